"""Training-stability instrumentation."""
from .monitors import StabilityMetrics, stability_report, grad_rms
from .optim import Adam, AdamState, AdamStepResult, TrainState, adam_step, lr_schedule
from .zloss import ZLossConfig, hidden_z_loss

__all__ = ['StabilityMetrics', 'stability_report', 'grad_rms', 'Adam', 'AdamState', 'AdamStepResult', 'TrainState',
           'adam_step', 'lr_schedule', 'ZLossConfig', 'hidden_z_loss']
