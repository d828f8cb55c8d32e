"""Width transfer of hyperparameters and model growth."""
from .growth import (GrowthPlan, GrowthReport, stack_grow, grow_config, grow_train_state, growth_experiment,
                     detect_crossover, grown_parameter_names)
from .transfer import OptimConfig, transfer_hparams, transfer_model, transfer_optim, WIDTH_DIMS

__all__ = ['GrowthPlan', 'GrowthReport', 'stack_grow', 'grow_config', 'grow_train_state', 'growth_experiment',
           'detect_crossover', 'grown_parameter_names', 'OptimConfig', 'transfer_hparams', 'transfer_model',
           'transfer_optim', 'WIDTH_DIMS']
