import math
import unittest

import numpy as np

from moelab import set_logging_level
from moelab.blocks import ModelConfig, MoELanguageModel
from moelab.diffcore import Module, Parameter, ParamClass, RngState, Tensor, cross_entropy, grad_check
from moelab.errors import ParameterError
from moelab.stability import (Adam, AdamState, TrainState, ZLossConfig, adam_step, grad_rms, hidden_z_loss,
                              lr_schedule, stability_report)

set_logging_level('WARNING')


class Single(Module):

    def __init__(self, value, param_class=ParamClass.HIDDEN):
        self.w = Parameter(np.array(value, dtype=float), param_class)


class TestZLoss(unittest.TestCase):

    def test_values(self):
        z = RngState(0).generator.standard_normal((3, 4))
        self.assertEqual(hidden_z_loss(z, 0.0).item(), 0.0)
        self.assertEqual(hidden_z_loss(np.zeros((1, 1)), 1.0).item(), 0.0)
        self.assertAlmostEqual(hidden_z_loss(np.array([[math.log(2.0)]]), 1.0).item(), math.log(2.0) ** 2)
        self.assertAlmostEqual(hidden_z_loss(np.array([[math.log(2.0)]]), 1.0).item(), 0.4805, places=4)

    def test_mean_over_rows(self):
        z = RngState(0).generator.standard_normal((2, 3, 4))
        per_row = [hidden_z_loss(row[None, :], 1.0).item() for row in z.reshape(-1, 4)]
        self.assertAlmostEqual(hidden_z_loss(z, 1.0).item(), float(np.mean(per_row)))

    def test_sign_and_size(self):
        z = RngState(1).generator.standard_normal((4, 8))
        self.assertAlmostEqual(hidden_z_loss(z, 1.0).item(), hidden_z_loss(-z, 1.0).item())
        self.assertLess(hidden_z_loss(z, 1.0).item(), hidden_z_loss(3.0 * z, 1.0).item())
        self.assertTrue(hidden_z_loss(1e3 * z, 1.0).is_finite())

    def test_gradient(self):
        z = Tensor(RngState(0).generator.standard_normal((5, 6)), requires_grad=True)
        self.assertLess(grad_check(lambda: hidden_z_loss(z, 1e-2), [z], step=1e-4), 1e-4)

    def test_coefficient(self):
        with self.assertRaises(ParameterError):
            ZLossConfig(lam=-1.0)
        with self.assertRaises(ParameterError):
            hidden_z_loss(np.zeros((1, 1)), -1.0)


class TestAdam(unittest.TestCase):

    def test_zero_gradient_gives_zero_update(self):
        p = Parameter(np.array([1.0, -2.0]))
        p.grad = np.zeros(2)
        result = adam_step(AdamState(), {'p': p}, 1e-3)
        self.assertTrue(result.applied)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_moves_by_learning_rate(self):
        p = Parameter(np.array([0.5]))
        p.grad = np.array([1.0])
        state = AdamState(beta1=0.9, beta2=0.999, eps=1e-16)
        adam_step(state, {'p': p}, 1e-3)
        self.assertAlmostEqual(0.5 - p.data[0], 1e-3, places=12)
        self.assertEqual(state.step, 1)

    def test_large_epsilon_destroys_adaptivity(self):
        for g in (1.0, 1e-3):
            p = Parameter(np.array([0.0]))
            p.grad = np.array([g])
            adam_step(AdamState(eps=1e6), {'p': p}, 1e-3)
            self.assertAlmostEqual(-p.data[0] / (1e-3 * g / 1e6), 1.0, places=5)

    def test_non_finite_gradient_skips_step(self):
        p = Parameter(np.array([1.0, 2.0]))
        q = Parameter(np.array([3.0]))
        p.grad = np.array([np.nan, 1.0])
        q.grad = np.array([1.0])
        state = AdamState()
        with self.assertLogs('moelab', level='WARNING'):
            result = adam_step(state, {'p': p, 'q': q}, 1e-3)
        self.assertFalse(result.applied)
        self.assertEqual(result.nonfinite, ['p'])
        self.assertEqual(state.step, 0)
        np.testing.assert_array_equal(q.data, [3.0])

    def test_per_class_learning_rate(self):
        emb = Parameter(np.zeros(1), ParamClass.EMBEDDING)
        hid = Parameter(np.zeros(1), ParamClass.HIDDEN)
        for p in (emb, hid):
            p.grad = np.ones(1)
        optimizer = Adam([('emb', emb), ('hid', hid)], {ParamClass.EMBEDDING: 1e-2, 'hidden': 1e-3})
        optimizer.step(scale=0.5)
        self.assertAlmostEqual(emb.data[0], -5e-3)
        self.assertAlmostEqual(hid.data[0], -5e-4)

    def test_state_arguments(self):
        with self.assertRaises(ParameterError):
            AdamState(eps=0.0)
        with self.assertRaises(ParameterError):
            AdamState(beta1=1.0)
        state = AdamState(step=3, m={'p': np.ones(1)}, v={'p': np.ones(1)})
        state.reset()
        self.assertEqual((state.step, state.m, state.v), (3, {}, {}))
        self.assertEqual(TrainState().adam.step, 0)

    def test_schedule(self):
        self.assertAlmostEqual(lr_schedule(0, 4, 100), 0.25)
        self.assertAlmostEqual(lr_schedule(3, 4, 100), 1.0)
        self.assertEqual(lr_schedule(50, 4, 100), 1.0)
        self.assertAlmostEqual(lr_schedule(4, 4, 100, 'cosine'), 1.0)
        self.assertAlmostEqual(lr_schedule(100, 4, 100, 'cosine', min_ratio=0.1), 0.1)
        self.assertAlmostEqual(lr_schedule(52, 4, 100, 'cosine', min_ratio=0.0), 0.5)
        with self.assertRaises(ParameterError):
            lr_schedule(0, 0, 10, 'linear')


class TestMonitors(unittest.TestCase):

    def test_zero_model(self):
        config = ModelConfig(d_model=16, n_layers=1, n_heads=2, head_dim=8, rope_dim=4, d_q=8, d_kv=4,
                             dense_inter=32, n_ffn_experts=4, n_zero_experts=2, top_k=3, k_expected=2,
                             segmentation=1, expert_inter=8, mtp_inter=16)
        model = MoELanguageModel(config)
        tokens = np.array([[1, 2, 3, 4]])
        out = model(tokens)
        loss = cross_entropy(out.logits[:, :-1], tokens[:, 1:])
        loss.backward()
        metrics = stability_report(model, out.hidden, loss=loss.item())
        self.assertEqual(metrics.hidden_norm, 0.0)
        self.assertEqual(metrics.max_abs_activation, 0.0)
        self.assertEqual(metrics.grad_rms_max, 0.0)
        self.assertAlmostEqual(metrics.loss, math.log(259))
        self.assertFalse(metrics.loss_nonfinite or metrics.grad_nonfinite or metrics.eps_flag)
        self.assertEqual(set(metrics.grad_rms_by_class), {'embedding', 'hidden', 'unembedding'})

    def test_hidden_norm_and_flags(self):
        module = Single([1e-20, -1e-20])
        module.w.grad = np.array([1e-20, -1e-20])
        hidden = np.array([[3.0, 4.0], [0.0, 0.0]])
        with self.assertLogs('moelab', level='WARNING'):
            metrics = stability_report(module, hidden, loss=float('nan'), eps=1e-16)
        self.assertAlmostEqual(metrics.hidden_norm, 2.5)
        self.assertEqual(metrics.max_abs_activation, 4.0)
        self.assertTrue(metrics.eps_flag)
        self.assertTrue(metrics.loss_nonfinite)
        self.assertAlmostEqual(grad_rms(module.named_parameters())['w'], 1e-20)
        self.assertFalse(stability_report(module, hidden, eps=1e-30).eps_flag)
