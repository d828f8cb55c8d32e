"""Training loop composing the language-model, balance, z and multi-token losses."""
import datetime
import logging
import pathlib
import time
from dataclasses import dataclass
from typing import List, Optional, Union

import numpy as np

from .checkpoints import CHECKPOINT_SUFFIX, save_checkpoint
from .config import RunConfig
from .corpus import Corpus, load_corpus
from .metrics import MetricsRecord, MetricsWriter
from .provenance import write_run_card
from ..blocks.model import MoELanguageModel, ModelOutput
from ..cache import get_runs_dir
from ..diffcore import RngState, Tensor, cross_entropy, no_grad
from ..errors import NonFiniteLossError, UndefinedRatioError
from ..routing.balance import balance_gradient, lb_loss
from ..routing.monitors import RgTracker, grad_norm_ratio_from_grads, router_similarity
from ..stability.monitors import stability_report
from ..stability.optim import TrainState, adam_step, lr_schedule
from ..stability.zloss import hidden_z_loss

logger = logging.getLogger('moelab')


@dataclass
class LossTerms:
    total: Tensor
    lm: Tensor
    lb: Tensor
    z: Tensor
    mtp: Optional[Tensor]


@dataclass
class TrainResult:
    model: MoELanguageModel
    state: TrainState
    records: List[MetricsRecord]
    out_dir: pathlib.Path
    metrics_file: pathlib.Path
    checkpoint: pathlib.Path
    run_card: pathlib.Path
    valid_loss: Optional[float]

    @property
    def lm_curve(self) -> np.ndarray:
        return np.array([r.lm_loss for r in self.records])


def build_model(config: RunConfig) -> MoELanguageModel:
    """Freshly initialised model for ``config`` (seeded by ``config.seed``)."""
    return MoELanguageModel(config.model,
                            init_variance=config.optim.effective_init_variance(),
                            rng=RngState(config.seed),
                            controller=config.controller.model_dump())


def compute_losses(model: MoELanguageModel, out: ModelOutput, window: np.ndarray, config: RunConfig) -> LossTerms:
    """Loss terms for a forward pass over ``window[:, :-1]``; the total is summed in logged order."""
    lm = cross_entropy(out.logits, window[:, 1:])
    lb_cfg = config.loss.lb()
    lb = None
    for aux in out.aux:
        term = lb_loss(aux.probs, aux.decision, lb_cfg)
        lb = term if lb is None else lb + term
    z = hidden_z_loss(out.hidden, config.loss.zloss_lambda)
    mtp = model.mtp_loss(out.hidden, window)
    total = lm + lb + z
    if mtp is not None:
        total = total + mtp * config.loss.mtp_weight
    return LossTerms(total=total, lm=lm, lb=lb, z=z, mtp=mtp)


def lm_probability_grads(out: ModelOutput, lm: Tensor) -> List[Optional[np.ndarray]]:
    """``dL_LM/dp`` summed over tokens, one entry per layer (None without a gradient path).

    Backpropagates ``lm`` alone and clears every gradient it left on the graph,
    so a following backward of the total loss starts from zero.
    """
    lm.backward()
    grads = [None if aux.probs.grad is None else aux.probs.grad.sum(axis=0) for aux in out.aux]
    lm.zero_graph_grad()
    return grads


def _rg(out: ModelOutput, lm_grads: List[Optional[np.ndarray]], config: RunConfig) -> Optional[float]:
    """Mean over layers of ``||alpha * dL_LB/dp|| / ||dL_LM/dp||`` at the mean routing probabilities."""
    lb_cfg = config.loss.lb()
    values = []
    for aux, lm_grad in zip(out.aux, lm_grads):
        if lm_grad is None:
            continue
        try:
            values.append(grad_norm_ratio_from_grads(lm_grad, balance_gradient(aux.decision, lb_cfg), lb_cfg.alpha))
        except UndefinedRatioError:
            logger.debug('R_g undefined for a layer with zero LM gradient')
    return float(np.mean(values)) if values else None


def evaluate(model: MoELanguageModel, corpus: Corpus, config: RunConfig, n_batches: int = 4,
             split: str = 'valid') -> float:
    """Mean LM loss over ``n_batches`` fixed batches; routing counters are left untouched."""
    schedule = config.schedule
    losses = []
    with no_grad():
        for i in range(n_batches):
            window = corpus.batch(i, schedule.batch_size, schedule.seq_len, config.seed, split=split)
            out = model(window[:, :-1])
            losses.append(cross_entropy(out.logits, window[:, 1:]).item())
    return float(np.mean(losses))


def train_run(config: RunConfig,
              out_dir: Optional[Union[str, pathlib.Path]] = None,
              model: Optional[MoELanguageModel] = None,
              state: Optional[TrainState] = None,
              corpus: Optional[Corpus] = None) -> TrainResult:
    """Train for ``config.schedule.steps`` steps and write metrics, checkpoints and a run card.

    Parameters
    ----------
    config : RunConfig
        Validated before the first step.
    out_dir : str or pathlib.Path, optional
        Output directory; falls back to ``config.out_dir`` and then to the user runs directory.
    model, state : optional
        Continue from an existing model and train state (e.g. after growth).
    corpus : Corpus, optional
        Overrides ``config.corpus``.

    Raises
    ------
    NonFiniteLossError
        When a loss becomes NaN or Inf. The parameters before that step are
        saved as ``last_good.npt`` first.
    """
    config.check()
    out_dir = pathlib.Path(out_dir or config.out_dir or get_runs_dir() / f'{config.tag}-seed{config.seed}')
    out_dir.mkdir(parents=True, exist_ok=True)
    started = datetime.datetime.now(datetime.timezone.utc)
    if corpus is None:
        corpus = load_corpus(config.corpus, config.corpus_bytes, 0, config.valid_fraction)
    if model is None:
        model = build_model(config)
    if state is None:
        state = TrainState()
    state.adam.beta1, state.adam.beta2, state.adam.eps = config.optim.beta1, config.optim.beta2, config.optim.eps
    params = dict(model.named_parameters())
    lrs = config.optim.effective_lr()
    schedule = config.schedule
    tracker = RgTracker()
    records = []
    t0 = time.perf_counter()
    first_step = state.step

    metrics_file = out_dir / 'metrics.jsonl'
    with MetricsWriter(metrics_file) as writer:
        for _ in range(schedule.steps):
            window = corpus.batch(state.step, schedule.batch_size, schedule.seq_len, config.seed)
            model.zero_grad()
            out = model(window[:, :-1], record_routing=True)
            terms = compute_losses(model, out, window, config)
            if not terms.total.is_finite():
                last_good = save_checkpoint(out_dir / f'last_good{CHECKPOINT_SUFFIX}', model, state, config)
                raise NonFiniteLossError(f'non-finite loss {terms.total.item()} at step {state.step}; '
                                         f'last good parameters kept in {last_good}')
            lm_grads = lm_probability_grads(out, terms.lm)
            terms.total.backward()

            stability = stability_report(model, out.hidden, terms.total.item(), config.optim.eps)
            rg = _rg(out, lm_grads, config)
            reading = tracker.update(rg) if rg is not None else None
            counts = np.concatenate([aux.decision.ffn_counts for aux in out.aux])
            scale = lr_schedule(state.step, schedule.warmup, first_step + schedule.steps, config.optim.schedule,
                                config.optim.min_lr_ratio)
            result = adam_step(state.adam, params, {c: lr * scale for c, lr in lrs.items()})
            for router in model.routers:
                router.end_batch()

            record = MetricsRecord(step=state.step,
                                   lm_loss=terms.lm.item(),
                                   lb_loss=terms.lb.item(),
                                   z_loss=terms.z.item(),
                                   mtp_loss=None if terms.mtp is None else terms.mtp.item(),
                                   total_loss=terms.total.item(),
                                   hidden_norm=stability.hidden_norm,
                                   max_abs_activation=stability.max_abs_activation,
                                   grad_rms_min=stability.grad_rms_min,
                                   grad_rms_max=stability.grad_rms_max,
                                   mean_ffn_activated=float(counts.mean()),
                                   std_ffn_activated=float(counts.std()),
                                   R_g=rg,
                                   R_g_ema=None if reading is None else reading.ema,
                                   router_sim=float(np.mean([router_similarity(r).value for r in model.routers])),
                                   lr_scale=scale,
                                   step_applied=result.applied,
                                   tag=config.tag,
                                   wall_clock=time.perf_counter() - t0 if config.record_wall_clock else None)
            writer.write(record)
            records.append(record)
            logger.debug(f'step {state.step}: total={record.total_loss:.4f} lm={record.lm_loss:.4f} '
                         f'ffn={record.mean_ffn_activated:.3f}')
            state.step += 1
            state.samples += schedule.batch_size
            done = state.step - first_step
            if schedule.checkpoint_every and done % schedule.checkpoint_every == 0 and done < schedule.steps:
                save_checkpoint(out_dir / f'step{state.step:06d}{CHECKPOINT_SUFFIX}', model, state, config)

    checkpoint = save_checkpoint(out_dir / f'final{CHECKPOINT_SUFFIX}', model, state, config)
    valid_loss = None
    if len(corpus.valid) > schedule.seq_len:
        valid_loss = evaluate(model, corpus, config)
    run_card = write_run_card(out_dir / 'run.jsonld', config,
                              {'metrics': metrics_file, 'checkpoint': checkpoint},
                              started, datetime.datetime.now(datetime.timezone.utc))
    logger.info(f'Run "{config.tag}" (seed {config.seed}) finished after {state.step} steps, '
                f'final LM loss {records[-1].lm_loss:.4f}')
    return TrainResult(model=model, state=state, records=records, out_dir=out_dir, metrics_file=metrics_file,
                       checkpoint=checkpoint, run_card=run_card, valid_loss=valid_loss)
