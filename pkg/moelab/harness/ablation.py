"""Paired experiments at desk scale, each with a declared direction and tolerance."""
import logging
import pathlib
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .config import LossConfig, RunConfig
from .train import TrainResult, train_run
from ..errors import ConfigurationError
from ..scaling.growth import GrowthPlan, growth_experiment

logger = logging.getLogger('moelab')


@dataclass(frozen=True)
class Expectation:
    arms: tuple
    direction: str
    tolerance: float
    description: str


EXPERIMENTS: Dict[str, Expectation] = {
    'zero-expert-vs-fixed-topk': Expectation(
        ('zero-expert', 'fixed-topk'), 'a <= b', 0.0,
        'zero-computation experts reach a final loss no worse than a fixed top-K router '
        'with the same expected number of FFN experts'),
    'scmoe-vs-interleaved': Expectation(
        ('scmoe', 'interleaved'), '|a - b| / b < tol', 0.02,
        'feeding the MoE block from the first attention output costs less than 2% final loss'),
    'zloss-on-off': Expectation(
        ('zloss-on', 'zloss-off'), 'max_norm(a) < max_norm(b) and |a - b| / b < tol', 0.02,
        'the hidden z-loss lowers the largest hidden-state norm at under 2% LM loss cost'),
    'growth-vs-random': Expectation(
        ('grown-init', 'random-init'), 'a crosses below b', 0.0,
        'a model grown from a shallower checkpoint ends below a randomly initialised one'),
    'eps-sweep': Expectation(
        ('eps=1e-16', 'eps=1e-12'), '|a - b| / b < tol', 0.01,
        'two Adam epsilons far below the gradient RMS give final losses within 1%'),
}


def final_loss(result: TrainResult) -> float:
    """Validation loss, or the mean LM loss over the last tenth of the run without a validation split."""
    if result.valid_loss is not None:
        return result.valid_loss
    curve = result.lm_curve
    return float(curve[-max(1, len(curve) // 10):].mean())


@dataclass
class ArmSummary:
    name: str
    final_losses: List[float] = field(default_factory=list)
    max_hidden_norms: List[float] = field(default_factory=list)
    mean_ffn_activated: List[float] = field(default_factory=list)
    min_grad_rms: List[float] = field(default_factory=list)
    curves: List[np.ndarray] = field(default_factory=list)

    def add(self, result: TrainResult):
        self.final_losses.append(final_loss(result))
        self.max_hidden_norms.append(max(r.hidden_norm for r in result.records))
        tail = result.records[-max(1, len(result.records) // 10):]
        self.mean_ffn_activated.append(float(np.mean([r.mean_ffn_activated for r in tail])))
        self.min_grad_rms.append(min(r.grad_rms_min for r in result.records))
        self.curves.append(result.lm_curve)

    @property
    def mean(self) -> float:
        return float(np.mean(self.final_losses))

    @property
    def std(self) -> float:
        return float(np.std(self.final_losses))

    def as_dict(self) -> Dict:
        return {'final_losses': self.final_losses,
                'mean': self.mean,
                'std': self.std,
                'max_hidden_norms': self.max_hidden_norms,
                'mean_ffn_activated': self.mean_ffn_activated,
                'min_grad_rms': self.min_grad_rms}


@dataclass
class AblationReport:
    experiment: str
    seeds: List[int]
    arms: Dict[str, ArmSummary]
    expectation: Expectation
    per_seed: List[bool]
    extra: Dict = field(default_factory=dict)

    @property
    def passed(self) -> int:
        return int(sum(self.per_seed))

    @property
    def holds(self) -> bool:
        """The direction holds in at least two thirds of the seeds."""
        return 3 * self.passed >= 2 * len(self.per_seed)

    def as_dict(self) -> Dict:
        return {'experiment': self.experiment,
                'seeds': self.seeds,
                'direction': self.expectation.direction,
                'tolerance': self.expectation.tolerance,
                'description': self.expectation.description,
                'arms': {name: arm.as_dict() for name, arm in self.arms.items()},
                'per_seed': self.per_seed,
                'verdict': 'holds' if self.holds else 'fails',
                **self.extra}

    def render_table(self) -> str:
        lines = [f'experiment: {self.experiment}',
                 f'direction:  {self.expectation.direction} (tol={self.expectation.tolerance})',
                 f'{"arm":<16} {"final loss":>22} {"max hidden norm":>16}']
        for name, arm in self.arms.items():
            norm = max(arm.max_hidden_norms) if arm.max_hidden_norms else float('nan')
            lines.append(f'{name:<16} {arm.mean:>12.4f} +- {arm.std:<7.4f} {norm:>16.4f}')
        lines.append(f'verdict: {"holds" if self.holds else "fails"} ({self.passed}/{len(self.per_seed)} seeds)')
        return '\n'.join(lines)


def check_budgets(arms: Mapping[str, RunConfig]):
    """Raise :class:`ConfigurationError` unless all arms see the same tokens in the same schedule."""
    budgets = {name: (c.schedule.steps, c.schedule.batch_size, c.schedule.seq_len, c.schedule.warmup, c.corpus)
               for name, c in arms.items()}
    if len(set(budgets.values())) > 1:
        raise ConfigurationError(f'arms differ in token budget or schedule: {budgets}')


def run_arms(arms: Mapping[str, RunConfig], seeds: Sequence[int],
             out_dir: Optional[Union[str, pathlib.Path]] = None) -> Dict[str, ArmSummary]:
    check_budgets(arms)
    if len(seeds) < 3:
        logger.warning(f'only {len(seeds)} seeds; verdicts need at least three to be meaningful')
    summaries = {name: ArmSummary(name) for name in arms}
    for seed in seeds:
        for name, config in arms.items():
            run_dir = None if out_dir is None else pathlib.Path(out_dir) / f'{name}-seed{seed}'
            config = config.model_copy(update={'seed': seed, 'tag': name})
            summaries[name].add(train_run(config, run_dir))
            logger.info(f'arm "{name}" seed {seed}: final loss {summaries[name].final_losses[-1]:.4f}')
    return summaries


def _relative_gap(a: float, b: float) -> float:
    return abs(a - b) / b


def _arm_configs(experiment: str, config: RunConfig) -> Dict[str, RunConfig]:
    m = config.model
    if experiment == 'zero-expert-vs-fixed-topk':
        if m.n_zero_experts == 0:
            raise ConfigurationError('the zero-expert arm needs n_zero_experts > 0')
        baseline = m.model_copy(update={'n_zero_experts': 0, 'top_k': m.k_expected})
        return {'zero-expert': config, 'fixed-topk': config.model_copy(update={'model': baseline})}
    if experiment == 'scmoe-vs-interleaved':
        return {'scmoe': config.model_copy(update={'model': m.model_copy(update={'shortcut': True})}),
                'interleaved': config.model_copy(update={'model': m.model_copy(update={'shortcut': False})})}
    if experiment == 'zloss-on-off':
        lam = config.loss.zloss_lambda or LossConfig().zloss_lambda
        return {'zloss-on': config.model_copy(update={'loss': config.loss.model_copy(update={'zloss_lambda': lam})}),
                'zloss-off': config.model_copy(update={'loss': config.loss.model_copy(update={'zloss_lambda': 0.0})})}
    if experiment == 'eps-sweep':
        return {name: config.model_copy(update={'optim': config.optim.model_copy(update={'eps': float(eps)})})
                for name, eps in (('eps=1e-16', 1e-16), ('eps=1e-12', 1e-12))}
    raise ConfigurationError(f'unknown experiment "{experiment}", expected one of {sorted(EXPERIMENTS)}')


def _verdicts(experiment: str, a: ArmSummary, b: ArmSummary, tol: float) -> List[bool]:
    pairs = list(zip(a.final_losses, b.final_losses))
    if experiment == 'zero-expert-vs-fixed-topk':
        return [la <= lb * (1 + tol) for la, lb in pairs]
    if experiment == 'zloss-on-off':
        return [na < nb and _relative_gap(la, lb) < tol
                for (la, lb), na, nb in zip(pairs, a.max_hidden_norms, b.max_hidden_norms)]
    return [_relative_gap(la, lb) < tol for la, lb in pairs]


def ablation(experiment: str,
             config: RunConfig,
             seeds: Sequence[int] = (0, 1, 2),
             out_dir: Optional[Union[str, pathlib.Path]] = None) -> AblationReport:
    """Run both arms of ``experiment`` over ``seeds`` and judge the declared direction.

    Parameters
    ----------
    experiment : str
        One of :data:`EXPERIMENTS`.
    config : RunConfig
        Base configuration; the arms differ from it only in the ablated setting.
    seeds : sequence of int
        Shared by both arms.
    out_dir : str or pathlib.Path, optional
        Parent directory of the per-arm run directories.
    """
    if experiment not in EXPERIMENTS:
        raise ConfigurationError(f'unknown experiment "{experiment}", expected one of {sorted(EXPERIMENTS)}')
    config.check()
    expectation = EXPERIMENTS[experiment]
    seeds = list(seeds)
    if experiment == 'growth-vs-random':
        growth = growth_experiment(config, config.schedule.steps, seeds, plan=GrowthPlan(rate=2), out_dir=out_dir)
        arms = {'grown-init': ArmSummary('grown-init'), 'random-init': ArmSummary('random-init')}
        for grown, rand in zip(growth.grown_curves, growth.random_curves):
            for arm, curve in ((arms['grown-init'], grown), (arms['random-init'], rand)):
                arm.final_losses.append(float(curve[-max(1, len(curve) // 10):].mean()))
                arm.curves.append(curve)
        return AblationReport(experiment, seeds, arms, expectation,
                              per_seed=[step is not None for step in growth.crossover_steps],
                              extra={'growth': growth.as_dict()})

    arm_configs = _arm_configs(experiment, config)
    for arm_config in arm_configs.values():
        arm_config.check()
    if experiment == 'zero-expert-vs-fixed-topk':
        expected = {name: c.model.k_expected for name, c in arm_configs.items()}
        if len(set(expected.values())) > 1:
            raise ConfigurationError(f'arms differ in expected activated FFN experts: {expected}')
    arms = run_arms(arm_configs, seeds, out_dir)
    a, b = (arms[name] for name in expectation.arms)
    report = AblationReport(experiment, seeds, arms, expectation,
                            per_seed=_verdicts(experiment, a, b, expectation.tolerance))
    if experiment == 'zero-expert-vs-fixed-topk':
        k_expected = config.model.k_expected
        report.extra['ffn_activation_deviation'] = float(
            max(abs(v - k_expected) / k_expected for v in a.mean_ffn_activated))
    logger.info(f'{experiment}: {report.passed}/{len(seeds)} seeds follow "{expectation.direction}"')
    return report
