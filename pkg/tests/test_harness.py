import hashlib
import json
import math
import pathlib
import shutil
import unittest
from unittest import mock

import numpy as np
import rdflib
from pydantic import ValidationError
from rdflib.namespace import PROV, RDF

from moelab import set_logging_level
from moelab.blocks import ModelConfig
from moelab.errors import ConfigurationError, EmptyBatchError, NonFiniteLossError, StateError
from moelab.harness import (Corpus, MetricsRecord, MetricsWriter, RunConfig, ScheduleConfig, ablation,
                            build_model, check_budgets, evaluate, fetch_corpus, gradient_suite, load_checkpoint,
                            load_corpus, read_metrics, routing_stats_report, synthetic_text, train_run)
from moelab.harness.ablation import EXPERIMENTS, _arm_configs
from moelab.harness.gradsuite import GRAD_TOLERANCE
from moelab.harness.provenance import M4I, run_parameters
from moelab.harness.train import compute_losses, lm_probability_grads

set_logging_level('WARNING')

__this_dir__ = pathlib.Path(__file__).parent


def tiny_run(**kwargs) -> RunConfig:
    model = ModelConfig(d_model=16, n_layers=2, n_heads=2, head_dim=8, rope_dim=4, d_q=8, d_kv=4, dense_inter=32,
                        n_ffn_experts=4, n_zero_experts=2, top_k=3, k_expected=2, segmentation=1, expert_inter=8,
                        mtp_inter=16)
    values = dict(model=model, schedule=ScheduleConfig(steps=3, batch_size=2, seq_len=8), corpus_bytes=4096)
    values.update(kwargs)
    return RunConfig(**values)


def sha256_of(filename) -> str:
    with open(filename, 'rb') as f:
        return hashlib.sha256(f.read()).hexdigest()


class TestRunConfig(unittest.TestCase):

    def setUp(self):
        self.out = __this_dir__ / 'harness_config'

    def tearDown(self):
        shutil.rmtree(self.out, ignore_errors=True)

    def test_save_and_load(self):
        config = tiny_run(seed=4, tag='cfg')
        filename = config.save(self.out / 'config.json')
        self.assertEqual(RunConfig.load(filename), config)
        with open(filename) as f:
            self.assertEqual(json.load(f)['model']['d_model'], 16)

    def test_check(self):
        tiny_run().check()
        with self.assertRaises(ConfigurationError):
            tiny_run(schedule=ScheduleConfig(steps=3, warmup=5)).check()
        config = tiny_run()
        config.loss.n_groups = 3
        with self.assertRaises(ConfigurationError):
            config.check()
        small_vocab = tiny_run().model.model_copy(update={'vocab_size': 200})
        with self.assertRaises(ConfigurationError):
            tiny_run(model=small_vocab).check()

    def test_validation(self):
        with self.assertRaises(ValidationError):
            RunConfig(unknown_field=1)
        with self.assertRaises(ValidationError):
            ScheduleConfig(seq_len=1)
        config = tiny_run()
        with self.assertRaises(ValidationError):
            config.schedule.steps = 0


class TestCorpus(unittest.TestCase):

    def setUp(self):
        self.out = __this_dir__ / 'harness_corpus'

    def tearDown(self):
        shutil.rmtree(self.out, ignore_errors=True)

    def test_synthetic_text(self):
        for style in ('prose', 'code', 'digits'):
            text = synthetic_text(style, 500, seed=1)
            self.assertEqual(len(text), 500)
            self.assertEqual(text, synthetic_text(style, 500, seed=1))
            self.assertNotEqual(text, synthetic_text(style, 500, seed=2))
        with self.assertRaises(ConfigurationError):
            synthetic_text('poetry', 10)

    def test_split_and_batches(self):
        corpus = Corpus(bytes(range(100)), valid_fraction=0.1)
        self.assertEqual((len(corpus.train), len(corpus.valid)), (90, 10))
        batch = corpus.batch(3, 4, 8, seed=0)
        self.assertEqual(batch.shape, (4, 9))
        np.testing.assert_array_equal(batch, corpus.batch(3, 4, 8, seed=0))
        self.assertFalse(np.array_equal(batch, corpus.batch(4, 4, 8, seed=0)))
        # consecutive bytes, all from the training part
        np.testing.assert_array_equal(np.diff(batch, axis=1), 1)
        self.assertLess(batch.max(), 90)
        self.assertGreaterEqual(corpus.batch(0, 4, 5, seed=0, split='valid').min(), 90)
        with self.assertRaises(EmptyBatchError):
            corpus.batch(0, 1, 10, seed=0, split='valid')

    def test_load_corpus(self):
        self.assertEqual(load_corpus('synthetic:code', 300).name, 'code')
        filename = self.out / 'tiny.txt'
        filename.parent.mkdir(parents=True, exist_ok=True)
        filename.write_bytes(b'hello world' * 10)
        corpus = load_corpus(str(filename), valid_fraction=0.0)
        self.assertEqual((corpus.name, len(corpus)), ('tiny', 110))
        with self.assertRaises(ConfigurationError):
            load_corpus(str(self.out / 'missing.txt'))

    def test_fetch_corpus(self):
        content = b'some corpus text'
        response = mock.Mock(ok=True, content=content)
        target = self.out / 'fetched.txt'
        with mock.patch('moelab.harness.corpus.requests.get', return_value=response) as get:
            with self.assertRaises(ValueError):
                fetch_corpus('https://example.org/corpus.txt', known_hash='0' * 64, dest_filename=target)
            self.assertFalse(target.exists())
            filename = fetch_corpus('https://example.org/corpus.txt', known_hash=hashlib.sha256(content).hexdigest(),
                                    dest_filename=target)
            self.assertEqual(filename.read_bytes(), content)
            fetch_corpus('https://example.org/corpus.txt', dest_filename=target)
            self.assertEqual(get.call_count, 2)


class TestMetrics(unittest.TestCase):

    def setUp(self):
        self.out = __this_dir__ / 'harness_metrics'

    def tearDown(self):
        shutil.rmtree(self.out, ignore_errors=True)

    @staticmethod
    def record(step: int) -> MetricsRecord:
        return MetricsRecord(step=step, lm_loss=5.0, lb_loss=1e-3, z_loss=1e-5, total_loss=5.001, hidden_norm=1.0,
                             max_abs_activation=2.0, grad_rms_min=1e-6, grad_rms_max=1e-2, mean_ffn_activated=2.0,
                             std_ffn_activated=0.5, router_sim=0.1, lr_scale=1.0)

    def test_steps_must_increase(self):
        with MetricsWriter(self.out / 'metrics.jsonl') as writer:
            writer.write(self.record(0))
            writer.write(self.record(2))
            with self.assertRaises(StateError):
                writer.write(self.record(2))
            self.assertEqual(writer.n_records, 2)
        records = read_metrics(self.out / 'metrics.jsonl')
        self.assertEqual([r.step for r in records], [0, 2])
        self.assertIsNone(records[0].wall_clock)


class TestTraining(unittest.TestCase):

    def setUp(self):
        self.out = __this_dir__ / 'harness_runs'

    def tearDown(self):
        shutil.rmtree(self.out, ignore_errors=True)

    def test_single_step(self):
        result = train_run(tiny_run(schedule=ScheduleConfig(steps=1, batch_size=2, seq_len=8)), self.out / 'one')
        self.assertEqual(len(read_metrics(result.metrics_file)), 1)
        record = result.records[0]
        self.assertEqual(record.step, 0)
        self.assertAlmostEqual(record.lm_loss / math.log(259), 1.0, delta=0.05)
        expected = record.lm_loss + record.lb_loss + record.z_loss + 0.1 * record.mtp_loss
        self.assertAlmostEqual(record.total_loss, expected, places=12)
        self.assertTrue(record.step_applied)
        self.assertTrue(result.checkpoint.exists())
        self.assertTrue(result.run_card.exists())
        self.assertEqual(result.state.samples, 2)

    def test_runs_are_reproducible(self):
        config = tiny_run(seed=1)
        first = train_run(config, self.out / 'a')
        second = train_run(config, self.out / 'b')
        self.assertEqual(sha256_of(first.metrics_file), sha256_of(second.metrics_file))
        other = train_run(tiny_run(seed=2), self.out / 'c')
        self.assertNotEqual(sha256_of(first.metrics_file), sha256_of(other.metrics_file))

    def test_resume_matches_uninterrupted_run(self):
        full = train_run(tiny_run(schedule=ScheduleConfig(steps=4, batch_size=2, seq_len=8)), self.out / 'full')
        half = train_run(tiny_run(schedule=ScheduleConfig(steps=2, batch_size=2, seq_len=8)), self.out / 'half')
        checkpoint = load_checkpoint(half.checkpoint)
        self.assertEqual(checkpoint.state.step, 2)
        for (name, p), (_, q) in zip(half.model.named_parameters(), checkpoint.model.named_parameters()):
            self.assertEqual(p.data.tobytes(), q.data.tobytes(), msg=name)
        for a, b in zip(half.model.routers, checkpoint.model.routers):
            np.testing.assert_array_equal(a.bias, b.bias)
            self.assertEqual(a.mu, b.mu)
        rest = train_run(checkpoint.config.model_copy(update={'schedule': ScheduleConfig(steps=2, batch_size=2,
                                                                                         seq_len=8)}),
                         self.out / 'rest', model=checkpoint.model, state=checkpoint.state)
        self.assertEqual([r.step for r in rest.records], [2, 3])
        self.assertEqual(rest.records[-1].lm_loss, full.records[-1].lm_loss)
        for (name, p), (_, q) in zip(full.model.named_parameters(), rest.model.named_parameters()):
            self.assertEqual(p.data.tobytes(), q.data.tobytes(), msg=name)

    def test_rg_with_chunked_experts(self):
        readings = {}
        for chunks in (1, 2):
            model = tiny_run().model.model_copy(update={'chunks': chunks})
            result = train_run(tiny_run(model=model, schedule=ScheduleConfig(steps=1, batch_size=2, seq_len=8)),
                               self.out / f'chunks{chunks}')
            record = result.records[0]
            self.assertIsNotNone(record.R_g)
            self.assertGreater(record.R_g, 0.0)
            self.assertIsNotNone(record.R_g_ema)
            readings[chunks] = record.R_g
        self.assertAlmostEqual(readings[1], readings[2], places=10)

    def test_lm_probability_grads(self):
        config = tiny_run()
        corpus = load_corpus(config.corpus, config.corpus_bytes)
        window = corpus.batch(0, 2, 8, config.seed)

        def parameter_grads(pre_pass: bool):
            model = build_model(config)
            out = model(window[:, :-1])
            terms = compute_losses(model, out, window, config)
            grads = lm_probability_grads(out, terms.lm) if pre_pass else None
            terms.total.backward()
            return grads, {name: p.grad.copy() for name, p in model.named_parameters() if p.grad is not None}

        lm_grads, with_pre_pass = parameter_grads(True)
        _, plain = parameter_grads(False)
        self.assertEqual(len(lm_grads), config.model.n_layers)
        for grad in lm_grads:
            self.assertEqual(grad.shape, (6,))
            self.assertGreater(np.linalg.norm(grad), 0.0)
        self.assertEqual(with_pre_pass.keys(), plain.keys())
        for name, grad in plain.items():
            np.testing.assert_allclose(with_pre_pass[name], grad, rtol=0, atol=1e-15, err_msg=name)

    def test_periodic_checkpoints(self):
        train_run(tiny_run(schedule=ScheduleConfig(steps=3, batch_size=2, seq_len=8, checkpoint_every=1)),
                  self.out / 'ckpt')
        names = sorted(p.name for p in (self.out / 'ckpt').glob('*.npt'))
        self.assertEqual(names, ['final.npt', 'step000001.npt', 'step000002.npt'])

    def test_non_finite_loss(self):
        config = tiny_run()
        model = build_model(config)
        model.embedding.data[:] = np.nan
        with self.assertRaises(NonFiniteLossError):
            train_run(config, self.out / 'nan', model=model)
        self.assertTrue((self.out / 'nan' / 'last_good.npt').exists())

    def test_evaluate_leaves_counters(self):
        config = tiny_run()
        model = build_model(config)
        corpus = load_corpus(config.corpus, config.corpus_bytes)
        loss = evaluate(model, corpus, config, n_batches=2)
        self.assertAlmostEqual(loss / math.log(259), 1.0, delta=0.05)
        self.assertTrue(all(r.counters.sum() == 0 for r in model.routers))

    def test_run_card(self):
        config = tiny_run(tag='card')
        result = train_run(config, self.out / 'card')
        g = rdflib.Graph()
        g.parse(result.run_card, format='json-ld')
        runs = list(g.subjects(RDF.type, PROV.Activity))
        self.assertEqual(len(runs), 1)
        self.assertIn((runs[0], RDF.type, M4I.ProcessingStep), g)
        self.assertEqual(len(list(g.objects(runs[0], M4I.hasParameter))), len(run_parameters(config)))
        self.assertEqual(len(list(g.objects(runs[0], PROV.generated))), 2)


class TestRouteStats(unittest.TestCase):

    def setUp(self):
        self.out = __this_dir__ / 'harness_route_stats'
        self.model = build_model(tiny_run())

    def tearDown(self):
        shutil.rmtree(self.out, ignore_errors=True)

    def test_single_token(self):
        report = routing_stats_report(self.model, {'one': b'a'})
        stats = report.corpora['one']
        self.assertEqual(stats.ffn_counts.shape, (2, 1))
        self.assertEqual([layer.std_ffn for layer in stats.layers], [0.0, 0.0])

    def test_report(self):
        corpora = {'prose': synthetic_text('prose', 200), 'code': 'def f(x):\n    return x\n' * 8}
        report = routing_stats_report(self.model, corpora, seq_len=16, max_tokens=128)
        self.assertEqual(sorted(report.ordering()), ['code', 'prose'])
        for stats in report.corpora.values():
            self.assertEqual(stats.ffn_counts.shape[0], 2)
            self.assertTrue(np.all((0 <= stats.ffn_counts) & (stats.ffn_counts <= 3)))
            for layer in stats.layers:
                self.assertAlmostEqual(layer.expert_load.sum(), 1.0)
        self.assertEqual(report.corpora['prose'].tokens.size, 128)
        self.assertTrue(all(r.counters.sum() == 0 for r in self.model.routers))
        self.assertIn('prose', report.render_table())
        self.assertEqual(set(report.as_dict()), {'prose', 'code'})
        filename = report.dump_tokens(self.out / 'tokens.jsonl')
        with open(filename) as f:
            lines = [json.loads(line) for line in f]
        self.assertEqual(len(lines), sum(s.tokens.size for s in report.corpora.values()))
        self.assertEqual(len(lines[0]['ffn_counts']), 2)


class TestAblation(unittest.TestCase):

    def setUp(self):
        self.out = __this_dir__ / 'harness_ablation'

    def tearDown(self):
        shutil.rmtree(self.out, ignore_errors=True)

    def test_budgets(self):
        a = tiny_run()
        b = tiny_run(schedule=ScheduleConfig(steps=4, batch_size=2, seq_len=8))
        check_budgets({'a': a, 'b': a})
        with self.assertRaises(ConfigurationError):
            check_budgets({'a': a, 'b': b})
        with self.assertRaises(ConfigurationError):
            check_budgets({'a': a, 'b': tiny_run(corpus='synthetic:code')})

    def test_arms(self):
        arms = _arm_configs('zero-expert-vs-fixed-topk', tiny_run())
        baseline = arms['fixed-topk'].model
        self.assertEqual((baseline.n_zero_experts, baseline.top_k, baseline.k_expected), (0, 2, 2))
        arms = _arm_configs('zloss-on-off', tiny_run())
        self.assertEqual(arms['zloss-off'].loss.zloss_lambda, 0.0)
        self.assertGreater(arms['zloss-on'].loss.zloss_lambda, 0.0)
        arms = _arm_configs('scmoe-vs-interleaved', tiny_run())
        self.assertFalse(arms['interleaved'].model.shortcut)
        with self.assertRaises(ConfigurationError):
            ablation('bigger-is-better', tiny_run())
        self.assertEqual(len(EXPERIMENTS), 5)

    def test_zero_expert_ablation(self):
        config = tiny_run(schedule=ScheduleConfig(steps=2, batch_size=2, seq_len=8))
        report = ablation('zero-expert-vs-fixed-topk', config, seeds=(0, 1, 2), out_dir=self.out)
        self.assertEqual(len(report.per_seed), 3)
        self.assertEqual(len(report.arms['fixed-topk'].final_losses), 3)
        summary = report.as_dict()
        self.assertIn(summary['verdict'], ('holds', 'fails'))
        self.assertIn('ffn_activation_deviation', summary)
        self.assertIn('fixed-topk', report.render_table())
        self.assertTrue((self.out / 'zero-expert-seed2' / 'metrics.jsonl').exists())


class TestGradientSuite(unittest.TestCase):

    def test_all_losses(self):
        errors = gradient_suite(0, instances=1)
        self.assertEqual(set(errors), {'lm', 'lb', 'z', 'mtp'})
        for name, error in errors.items():
            self.assertLess(error, GRAD_TOLERANCE, msg=name)
