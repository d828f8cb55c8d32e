"""Runs the desk-size acceptance checks and prints one line per check.

Usage::

    python scripts/run_acceptance.py [--replications] [--out runs/acceptance]

The directional replications train several small models per experiment and
take considerably longer than the other checks, so they only run with
``--replications``.
"""
import argparse
import pathlib
import sys
import time

import numpy as np

from moelab import RngState, set_logging_level
from moelab.blocks import MLAParams, MoELanguageModel, ModelConfig, mla_component_variances, moe_init_output_variance
from moelab.diffcore import ParamClass, no_grad
from moelab.harness import EXPERIMENTS, RunConfig, ScheduleConfig, ablation, gradient_suite, train_run
from moelab.harness.gradsuite import GRAD_TOLERANCE
from moelab.inference import (SAMPLERS, expected_accept_length, kv_alloc_simulate, load_cost_model,
                              simulate_accept_lengths, tpot_theoretical)
from moelab.routing import RouterState, simulate_controller
from moelab.scaling import GrowthPlan, OptimConfig, stack_grow, transfer_optim


def controller_convergence():
    state = RouterState(16, 16, 8, 6, 4, mu=2e-2, mu_decay=1.0)
    trace = simulate_controller(state, steps=3000, tokens_per_batch=1024, rng=RngState(0))
    deviation = trace.relative_deviation(4, last=1000)
    spread = float(trace.std_ffn[-1000:].mean())
    return [('controller keeps K_e within 1%', deviation < 0.01, f'max deviation {deviation:.4%}'),
            ('activated FFN experts vary per token', spread > 0.25, f'std {spread:.3f}')]


def kv_bound():
    violations = sum(kv_alloc_simulate(4, 1, 100000, sampler, rng=i).violations
                     for i, sampler in enumerate(SAMPLERS))
    return [('KV slots stay in [8, 12]', violations == 0, f'{violations} violations')]


def tpot_rows():
    targets = {'scmoe-28l-sbo': (16.0, 0.5 / 16.0), 'deepseek-v3-tbo': (30.0, 0.15), 'qwen3-235b-tbo': (26.2, 0.15)}
    results = []
    for name, (target, tolerance) in targets.items():
        tpot = tpot_theoretical(load_cost_model(name)).tpot_ms
        results.append((f'TPOT {name}', abs(tpot - target) / target <= tolerance,
                        f'{tpot:.2f} ms (reported {target} ms)'))
    return results


def transfer_rules():
    proxy = OptimConfig()
    failures = 0
    for s in (0.5, 2.0, 4.0):
        target = transfer_optim(proxy, s)
        for values, proxy_values in ((target.effective_lr(), proxy.effective_lr()),
                                     (target.effective_init_variance(), proxy.effective_init_variance())):
            failures += values[ParamClass.EMBEDDING] != proxy_values[ParamClass.EMBEDDING]
            failures += values[ParamClass.HIDDEN] != proxy_values[ParamClass.HIDDEN] / s
    composed = transfer_optim(transfer_optim(proxy, 2.0), 3.0)
    failures += composed.effective_lr() != transfer_optim(proxy, 6.0).effective_lr()
    return [('width transfer rules and composition', failures == 0, f'{failures} failing cases')]


def growth_identity():
    config = ModelConfig(d_model=32, n_layers=2, n_heads=2, head_dim=16, rope_dim=8, d_q=16, d_kv=8,
                         dense_inter=64, n_ffn_experts=8, n_zero_experts=4, top_k=4, k_expected=2,
                         segmentation=1, expert_inter=16, use_mtp=False)
    model = MoELanguageModel(config, rng=RngState(0))
    grown = stack_grow(model, GrowthPlan(rate=2))
    h = RngState(1).generator.standard_normal((100, 4, 32))
    with no_grad():
        once, _ = model.forward_layers(h)
        twice, _ = model.forward_layers(once)
        stacked, _ = grown.forward_layers(h)
    error = float(np.abs(stacked.data - twice.data).max())
    return [('stacked model equals composed forward', error <= 1e-12, f'max error {error:.2e}')]


def variance_alignment():
    h = RngState(0).generator.standard_normal((1, 2000, 256))
    results = []
    for aligned in (True, False):
        params = MLAParams(256, 16, 8, 4, 16, 8, variance_alignment=aligned, init_variance=1 / 256, rng=RngState(1))
        v = mla_component_variances(params, h)
        ratios = [v[name] / v['k_R'] for name in ('q_C', 'q_R', 'k_C')]
        if aligned:
            ok = all(1 / 1.25 <= r <= 1.25 for r in ratios)
        else:
            ok = min(ratios) <= 0.25
        results.append((f'component variances, alignment {"on" if aligned else "off"}', ok,
                        'ratios to k_R ' + ', '.join(f'{r:.3f}' for r in ratios)))
    return results


def gamma_compensation():
    reference = moe_init_output_variance(1, True)
    compensated = [moe_init_output_variance(m, True) / reference for m in (2, 4)]
    plain = [moe_init_output_variance(m, False) * m * m / reference for m in (2, 4)]
    return [('MoE init variance invariant with gamma=m', all(abs(r - 1) < 0.1 for r in compensated),
             'ratios ' + ', '.join(f'{r:.3f}' for r in compensated)),
            ('MoE init variance deflated by m^2 with gamma=1', all(0.7 < r < 1.3 for r in plain),
             'm^2-scaled ratios ' + ', '.join(f'{r:.3f}' for r in plain))]


def gradients():
    errors = gradient_suite(0, instances=3)
    worst = max(errors.values())
    return [('finite-difference gradient suite', worst < GRAD_TOLERANCE, f'max relative error {worst:.2e}')]


def desk_config(steps: int) -> RunConfig:
    model = ModelConfig(d_model=32, n_layers=2, n_heads=2, head_dim=16, rope_dim=8, d_q=16, d_kv=8,
                        dense_inter=64, n_ffn_experts=8, n_zero_experts=4, top_k=4, k_expected=2,
                        segmentation=1, expert_inter=16, mtp_inter=32)
    return RunConfig(model=model, schedule=ScheduleConfig(steps=steps, batch_size=4, seq_len=32),
                     corpus_bytes=1 << 15)


def determinism(out: pathlib.Path):
    config = desk_config(10)
    first = train_run(config, out / 'determinism-a')
    second = train_run(config, out / 'determinism-b')
    same = first.metrics_file.read_bytes() == second.metrics_file.read_bytes()
    return [('same-seed runs give identical metrics', same, str(first.metrics_file))]


def accept_length():
    worst = 0.0
    for gamma in range(1, 5):
        for alpha in (0.0, 0.5, 0.8, 0.9, 1.0):
            sim = simulate_accept_lengths(gamma, alpha, 20000, rng=gamma)
            omega = expected_accept_length(gamma, alpha)
            worst = max(worst, abs(sim.mean - omega) / sim.stderr if sim.stderr else abs(sim.mean - omega))
    return [('Monte Carlo accept length agrees within 3 sigma', worst <= 3.0, f'worst {worst:.2f} sigma'),
            ('gamma=1, alpha=0.8 gives 1.8', expected_accept_length(1, 0.8) == 1.8,
             f'{expected_accept_length(1, 0.8)}')]


def replications(out: pathlib.Path):
    results = []
    for experiment in EXPERIMENTS:
        report = ablation(experiment, desk_config(300), seeds=(0, 1, 2), out_dir=out / experiment)
        results.append((f'replication {experiment}', report.holds, f'{report.passed}/3 seeds'))
    return results


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description='Desk-size acceptance checks of moelab.')
    parser.add_argument('--replications', action='store_true', help='also run the paired experiments')
    parser.add_argument('--out', default='runs/acceptance')
    args = parser.parse_args(argv)
    set_logging_level('ERROR')
    out = pathlib.Path(args.out)

    checks = [controller_convergence, kv_bound, tpot_rows, transfer_rules, growth_identity, variance_alignment,
              gamma_compensation, gradients, lambda: determinism(out), accept_length]
    if args.replications:
        checks.append(lambda: replications(out))

    failed = 0
    for check in checks:
        t0 = time.perf_counter()
        for name, ok, detail in check():
            failed += not ok
            print(f'{"PASS" if ok else "FAIL"}  {name:<50} {detail}  ({time.perf_counter() - t0:.1f} s)')
    print(f'{failed} failed')
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
