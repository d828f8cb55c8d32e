"""Command line interface: ``moelab <command> ...``.

Failures print one JSON object ``{"error": ..., "message": ...}`` to stderr
and exit with status 1; usage errors exit with status 2.
"""
import argparse
import json
import logging
import pathlib
import sys
from typing import Dict, List, Optional

from pydantic import ValidationError

from .ablation import EXPERIMENTS, ablation
from .checkpoints import CHECKPOINT_SUFFIX, load_checkpoint, save_checkpoint
from .config import RunConfig
from .corpus import SYNTHETIC_STYLES, load_corpus
from .gradsuite import GRAD_TOLERANCE, gradient_suite
from .route_stats import routing_stats_report
from .train import train_run
from .. import set_logging_level
from ..config import JSON_INDENT
from ..errors import MoelabError
from ..inference.kvalloc import SAMPLERS, kv_alloc_simulate
from ..inference.specdec import SpecDecParams, expected_accept_length, simulate_accept_lengths, specdec_cost_ratio
from ..inference.tpot import COST_PRESETS, load_cost_model, tpot_theoretical
from ..scaling.growth import GrowthPlan, grow_train_state, stack_grow
from ..scaling.transfer import transfer_hparams

logger = logging.getLogger('moelab')


def _write_json(filename: pathlib.Path, data: Dict) -> pathlib.Path:
    filename.parent.mkdir(parents=True, exist_ok=True)
    with open(filename, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=JSON_INDENT)
    return filename


def _load_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    config.seed = args.seed
    if getattr(args, 'steps', None):
        config.schedule.steps = args.steps
    return config


def cmd_train(args) -> int:
    config = _load_config(args)
    result = train_run(config, args.out)
    print(f'steps: {result.state.step}')
    print(f'final lm loss: {result.records[-1].lm_loss:.4f}')
    print(f'metrics: {result.metrics_file}')
    print(f'checkpoint: {result.checkpoint}')
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args)
    seeds = [args.seed + i for i in range(args.n_seeds)]
    report = ablation(args.experiment, config, seeds, args.out)
    out = pathlib.Path(args.out)
    _write_json(out / 'report.json', report.as_dict())
    table = report.render_table()
    with open(out / 'report.txt', 'w', encoding='utf-8') as f:
        f.write(table + '\n')
    print(table)
    return 0


def cmd_grow(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    plan = GrowthPlan(rate=args.rate, reset_moments=not args.keep_moments,
                      reset_router_bias=args.reset_router_bias, source=str(args.checkpoint))
    grown = stack_grow(checkpoint.model, plan)
    state = grow_train_state(checkpoint.state, plan, len(checkpoint.model.layers))
    target = pathlib.Path(args.out) / f'grown{CHECKPOINT_SUFFIX}'
    save_checkpoint(target, grown, state, checkpoint.config)
    print(f'layers: {len(checkpoint.model.layers)} -> {len(grown.layers)}')
    print(f'checkpoint: {target}')
    return 0


def cmd_transfer(args) -> int:
    proxy = RunConfig.load(args.config)
    target = transfer_hparams(proxy, args.scale)
    target.save(args.out)
    lr = target.optim.effective_lr()
    print(f'd_model: {proxy.model.d_model} -> {target.model.d_model}')
    print('lr: ' + ', '.join(f'{c.value}={v:.6g}' for c, v in lr.items()))
    print(f'config: {args.out}')
    return 0


def _parse_corpora(items: List[str], n_bytes: int) -> Dict:
    corpora = {}
    for item in items:
        name, sep, source = item.partition('=')
        if not sep:
            source = item
            name = item.split(':', 1)[1] if item.startswith('synthetic:') else pathlib.Path(item).stem
        corpora[name] = load_corpus(source, n_bytes, seed=0, valid_fraction=0.0)
    return corpora


def cmd_route_stats(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    corpora = _parse_corpora(args.corpus or [f'synthetic:{s}' for s in SYNTHETIC_STYLES], args.max_tokens)
    report = routing_stats_report(checkpoint.model, corpora, seq_len=args.seq_len, max_tokens=args.max_tokens)
    out = pathlib.Path(args.out)
    _write_json(out / 'route_stats.json', report.as_dict())
    report.dump_tokens(out / 'route_tokens.jsonl')
    print(report.render_table())
    return 0


def cmd_specdec(args) -> int:
    params = SpecDecParams(gamma=args.gamma, alpha=args.alpha, draft_ratio=args.draft_ratio,
                           verify_ratio=args.verify_ratio)
    omega = expected_accept_length(args.gamma, args.alpha)
    sim = simulate_accept_lengths(args.gamma, args.alpha, args.trials, args.seed)
    within = abs(sim.mean - omega) <= 3 * sim.stderr
    print(f'omega: {omega:.6g}')
    print(f'cost ratio: {specdec_cost_ratio(params):.6g}')
    print(f'monte carlo: {sim.mean:.6g} +- {sim.stderr:.2g} ({"agrees" if within else "disagrees"} within 3 sigma)')
    return 0


def cmd_kv_sim(args) -> int:
    samplers = SAMPLERS if args.sampler == 'all' else (args.sampler,)
    violations = 0
    for i, sampler in enumerate(samplers):
        trace = kv_alloc_simulate(args.n, args.mtp, args.iters, sampler, rng=args.seed + i)
        violations += trace.violations
    low, high = trace.bounds
    print(f'bound: [{low}, {high}]')
    print(f'violations: {violations}')
    return 0


def cmd_tpot(args) -> int:
    cost = load_cost_model(args.cost)
    result = tpot_theoretical(cost)
    print(f'TPOT: {result.tpot_ms:.2f} ms')
    print(f'price per 1M output tokens: ${result.price_per_million:.3f}')
    if result.approximate:
        print('note: TBO layer time is modelled as max(compute, communication)')
    return 0


def cmd_grad_check(args) -> int:
    errors = gradient_suite(args.seed, args.instances)
    for name, err in errors.items():
        print(f'{name}: {err:.3e}')
    failed = sorted(name for name, err in errors.items() if not err < GRAD_TOLERANCE)
    if failed:
        print(json.dumps({'error': 'GradientCheckFailed', 'message': f'relative error >= {GRAD_TOLERANCE} '
                                                                     f'for {failed}'}), file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='moelab', description='Desk-scale mixture-of-experts experiments.')
    parser.add_argument('--log-level', default='WARNING', choices=('DEBUG', 'INFO', 'WARNING', 'ERROR'))
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help='train one model')
    p.add_argument('--config', help='run configuration JSON (defaults when omitted)')
    p.add_argument('--seed', type=int, required=True)
    p.add_argument('--steps', type=int)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('ablate', help='run a paired experiment over several seeds')
    p.add_argument('--experiment', required=True, choices=sorted(EXPERIMENTS))
    p.add_argument('--config')
    p.add_argument('--seed', type=int, required=True, help='first seed')
    p.add_argument('--n-seeds', type=int, default=3)
    p.add_argument('--steps', type=int)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser('grow', help='stack a checkpoint into a deeper model')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--rate', type=int, default=2)
    p.add_argument('--keep-moments', action='store_true', help='duplicate Adam moments instead of resetting them')
    p.add_argument('--reset-router-bias', action='store_true')
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_grow)

    p = sub.add_parser('transfer', help='map a proxy configuration to a wider model')
    p.add_argument('--config', required=True)
    p.add_argument('--scale', type=float, required=True)
    p.add_argument('--out', required=True, help='target configuration JSON')
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser('route-stats', help='activated FFN experts per corpus and layer')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--corpus', action='append', help='NAME=PATH, PATH or synthetic:STYLE (repeatable)')
    p.add_argument('--seq-len', type=int, default=64)
    p.add_argument('--max-tokens', type=int, default=4096)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_route_stats)

    p = sub.add_parser('specdec', help='speculative decoding accept length and cost ratio')
    p.add_argument('--gamma', type=int, default=1)
    p.add_argument('--alpha', type=float, required=True)
    p.add_argument('--draft-ratio', type=float, default=0.0)
    p.add_argument('--verify-ratio', type=float, default=1.0)
    p.add_argument('--trials', type=int, default=100000)
    p.add_argument('--seed', type=int, required=True)
    p.set_defaults(func=cmd_specdec)

    p = sub.add_parser('kv-sim', help='KV-slot bound under the overlapped scheduler')
    p.add_argument('--n', type=int, required=True)
    p.add_argument('--mtp', type=int, default=1)
    p.add_argument('--iters', type=int, default=100000)
    p.add_argument('--sampler', default='all', choices=('all',) + SAMPLERS)
    p.add_argument('--seed', type=int, default=0)
    p.set_defaults(func=cmd_kv_sim)

    p = sub.add_parser('tpot', help='theoretical TPOT and price')
    p.add_argument('--cost', required=True, help=f'cost JSON or one of {sorted(COST_PRESETS)}')
    p.set_defaults(func=cmd_tpot)

    p = sub.add_parser('grad-check', help='finite-difference check of all losses')
    p.add_argument('--seed', type=int, required=True)
    p.add_argument('--instances', type=int, default=3)
    p.set_defaults(func=cmd_grad_check)
    return parser


def cli_main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    set_logging_level(args.log_level)
    try:
        return args.func(args)
    except (MoelabError, ValidationError, OSError) as e:
        print(json.dumps({'error': e.__class__.__name__, 'message': str(e)}), file=sys.stderr)
        return 1
