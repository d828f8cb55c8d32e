"""Experiment orchestration: configuration, corpora, training, ablations and the CLI."""
from .ablation import EXPERIMENTS, AblationReport, ablation, check_budgets
from .checkpoints import Checkpoint, load_checkpoint, save_checkpoint
from .config import ControllerConfig, LossConfig, RunConfig, ScheduleConfig
from .corpus import Corpus, fetch_corpus, load_corpus, synthetic_text
from .gradsuite import gradient_suite
from .metrics import MetricsRecord, MetricsWriter, read_metrics
from .route_stats import RouteStatsReport, routing_stats_report
from .train import TrainResult, build_model, compute_losses, evaluate, train_run

__all__ = ['EXPERIMENTS', 'AblationReport', 'ablation', 'check_budgets', 'Checkpoint', 'load_checkpoint',
           'save_checkpoint', 'ControllerConfig', 'LossConfig', 'RunConfig', 'ScheduleConfig', 'Corpus',
           'fetch_corpus', 'load_corpus', 'synthetic_text', 'gradient_suite',
           'MetricsRecord', 'MetricsWriter', 'read_metrics', 'RouteStatsReport', 'routing_stats_report',
           'TrainResult', 'build_model', 'compute_losses', 'evaluate', 'train_run']
