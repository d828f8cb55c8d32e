import unittest
from unittest import mock

import numpy as np

from moelab import set_logging_level
from moelab.diffcore import RngState, Tensor, grad_check
from moelab.errors import ConfigurationError, EmptyBatchError, ParameterError, UndefinedRatioError
from moelab.routing import (LBLossConfig, RgTracker, RouterState, balance_gradient, bias_update,
                            grad_norm_ratio, grad_norm_ratio_from_grads, group_frequencies, lb_loss,
                            route_topk, router_similarity, select_experts, simulate_controller,
                            validate_router_dims)

set_logging_level('WARNING')

#: two tokens over N=4 FFN and Z=2 zero experts; K=3 picks {0, 1, 4} and {2, 3, 5}
BALANCED_PROBS = np.array([[.30, .25, .05, .05, .20, .15],
                           [.05, .05, .30, .25, .15, .20]])


class TestSelection(unittest.TestCase):

    def test_validate_dims(self):
        validate_router_dims(4, 2, 3, 2)
        validate_router_dims(4, 0, 2, 2)
        for args in [(4, 0, 2, 1),  # fixed top-k needs K_e == K
                     (4, 2, 3, 3),  # K_e < K
                     (4, 1, 4, 2),  # Z >= K - K_e
                     (4, 2, 7, 2),  # K <= N + Z
                     (0, 2, 1, 1)]:
            with self.assertRaises(ConfigurationError):
                validate_router_dims(*args)

    def test_topk_with_bias(self):
        decision = select_experts(BALANCED_PROBS, np.zeros(6), 3, 4, k_expected=2)
        np.testing.assert_array_equal(decision.indices, [[0, 1, 4], [2, 3, 5]])
        np.testing.assert_allclose(decision.gates.data, [[.30, .25, .20], [.30, .25, .20]])
        np.testing.assert_array_equal(decision.ffn_counts, [2, 2])
        np.testing.assert_array_equal(decision.expert_loads, [1, 1, 1, 1, 1, 1])

        bias = np.array([0., 0., 0., 0., 1., 1.])
        biased = select_experts(BALANCED_PROBS, bias, 3, 4, k_expected=2)
        np.testing.assert_array_equal(np.sort(biased.indices[:, :2], axis=1), [[4, 5], [4, 5]])
        # gates stay unbiased
        np.testing.assert_allclose(biased.gates.data[0, :2], [.20, .15])

    def test_ties_prefer_lower_index(self):
        decision = select_experts(np.full((1, 4), .25), np.zeros(4), 2, 4)
        np.testing.assert_array_equal(decision.indices, [[0, 1]])

    def test_renormalized_gates(self):
        decision = select_experts(BALANCED_PROBS, np.zeros(6), 3, 4, k_expected=2, renormalize=True)
        np.testing.assert_allclose(decision.gates.data.sum(axis=1), [1., 1.])

    def test_route_topk(self):
        state = RouterState(8, 4, 2, 3, 2, rng=RngState(0))
        x = RngState(1).generator.standard_normal((10, 8))
        decision = route_topk(x, state)
        self.assertEqual(decision.indices.shape, (10, 3))
        self.assertEqual(decision.probs.shape, (10, 6))
        np.testing.assert_allclose(decision.probs.data.sum(axis=1), np.ones(10))
        self.assertTrue(np.all(decision.indices < 6))

    def test_route_topk_ignores_logit_shift(self):
        # the last input feature is constant, so its weight row adds c to every logit
        plain = RouterState(9, 4, 2, 3, 2, init_variance=1.0, rng=RngState(0))
        shifted = RouterState(9, 4, 2, 3, 2, init_variance=1.0, rng=RngState(0))
        plain.weight.data[-1] = 0.0
        shifted.weight.data[-1] = 3.7
        plain.bias[:] = shifted.bias[:] = [.02, -.01, 0., .01, -.03, .05]
        x = RngState(1).generator.standard_normal((20, 9))
        x[:, -1] = 1.0
        a, b = route_topk(x, plain), route_topk(x, shifted)
        np.testing.assert_array_equal(a.indices, b.indices)
        np.testing.assert_allclose(a.gates.data, b.gates.data, rtol=1e-12, atol=1e-15)

    def test_router_arguments(self):
        with self.assertRaises(ParameterError):
            RouterState(8, 4, 2, 3, 2, mu=-1.0)
        with self.assertRaises(ParameterError):
            RouterState(8, 4, 2, 3, 2, mu_decay=0.0)
        with self.assertRaises(ParameterError):
            RouterState(8, 4, 2, 3, 2, update_every=0)


class TestBiasController(unittest.TestCase):

    def test_single_update(self):
        state = RouterState(4, 2, 2, 2, 1, mu=0.1)
        state.counters[:] = [1, 1, 0, 0]
        delta = bias_update(state, 1)
        np.testing.assert_allclose(delta, [-0.025, -0.025, 0., 0.])
        np.testing.assert_allclose(state.bias, delta)
        self.assertAlmostEqual(state.mu, 0.1 * 0.999)
        np.testing.assert_array_equal(state.counters, 0)

    def test_balanced_loads_leave_bias(self):
        state = RouterState(4, 4, 2, 3, 2, mu=0.1)
        state.record(select_experts(BALANCED_PROBS, state.bias, 3, 4, 2))
        np.testing.assert_allclose(bias_update(state, 2), np.zeros(6), atol=1e-15)

    def test_update_errors(self):
        state = RouterState(4, 2, 2, 2, 1)
        with self.assertRaises(EmptyBatchError):
            bias_update(state, 0)
        state.counters[:] = [1, 0, 0, 0]
        with self.assertRaises(ParameterError):
            bias_update(state, 1)

    def test_update_every(self):
        state = RouterState(4, 4, 2, 3, 2, update_every=2)
        decision = select_experts(BALANCED_PROBS, state.bias, 3, 4, 2)
        state.record(decision)
        self.assertIsNone(state.end_batch())
        state.record(decision)
        self.assertIsNotNone(state.end_batch())
        self.assertEqual(state.pending_tokens, 0)

    def test_controller_converges(self):
        state = RouterState(16, 16, 8, 6, 4, mu=2e-2, mu_decay=1.0)
        trace = simulate_controller(state, steps=3000, tokens_per_batch=1024, rng=RngState(0), window=100)
        self.assertGreater(trace.mean_ffn[:10].mean(), 4.0)
        self.assertTrue(trace.converged(4, last=1000, tolerance=0.01))
        # tokens keep a variable number of FFN experts
        self.assertGreater(trace.std_ffn[-1000:].mean(), 0.25)
        self.assertTrue(np.all(trace.bias[16:] == 0.0))

    def test_controller_honours_update_every(self):
        state = RouterState(16, 8, 4, 4, 2, mu=1e-2, mu_decay=0.5, update_every=4)
        simulate_controller(state, steps=6, tokens_per_batch=32, rng=RngState(0))
        self.assertAlmostEqual(state.mu, 1e-2 * 0.5)
        self.assertEqual(state.pending_batches, 2)
        self.assertEqual(state.pending_tokens, 64)
        self.assertEqual(int(state.counters.sum()), 4 * 64)

    def test_controller_renormalizes_gates(self):
        state = RouterState(16, 8, 4, 4, 2, renormalize_gates=True)
        with mock.patch('moelab.routing.controller.select_experts', wraps=select_experts) as selected:
            simulate_controller(state, steps=2, tokens_per_batch=8, rng=RngState(0))
        self.assertEqual(selected.call_count, 2)
        self.assertTrue(all(call.kwargs['renormalize'] for call in selected.call_args_list))


class TestBalanceLoss(unittest.TestCase):

    def setUp(self):
        self.decision = select_experts(BALANCED_PROBS, np.zeros(6), 3, 4, k_expected=2)

    def test_balanced_frequencies_are_one(self):
        for n_groups in (1, 2, 4):
            for count in ('per_slot', 'per_token'):
                cfg = LBLossConfig(alpha=1.0, n_groups=n_groups, zero_group_count=count)
                np.testing.assert_allclose(group_frequencies(self.decision, cfg), np.ones(n_groups + 1))
        np.testing.assert_allclose(balance_gradient(self.decision, LBLossConfig(n_groups=2)), np.ones(6))

    def test_balanced_loss_equals_alpha(self):
        cfg = LBLossConfig(alpha=0.01)
        self.assertAlmostEqual(lb_loss(BALANCED_PROBS, self.decision, cfg).item(), 0.01)

    def test_zero_group_counting(self):
        probs = np.array([[.35, .1, .1, .1, .2, .15]])
        decision = select_experts(probs, np.zeros(6), 3, 4, k_expected=1)
        np.testing.assert_array_equal(np.sort(decision.indices[0]), [0, 4, 5])
        per_slot = group_frequencies(decision, LBLossConfig(zero_group_count='per_slot'))
        per_token = group_frequencies(decision, LBLossConfig(zero_group_count='per_token'))
        self.assertAlmostEqual(per_slot[-1], 1.0)
        self.assertAlmostEqual(per_token[-1], 0.5)
        self.assertAlmostEqual(per_slot[0], 1.0)

    def test_gradient(self):
        probs = Tensor(BALANCED_PROBS.copy(), requires_grad=True)
        cfg = LBLossConfig(alpha=0.5, n_groups=2)
        self.assertLess(grad_check(lambda: lb_loss(probs, self.decision, cfg), [probs]), 1e-6)

    def test_permutation_within_group(self):
        probs = RngState(3).generator.dirichlet(np.ones(6), size=50)
        cfg = LBLossConfig(alpha=0.1, n_groups=2)
        # swap experts inside {0, 1}, {2, 3} and the zero experts
        perm = np.array([1, 0, 3, 2, 5, 4])
        decision = select_experts(probs, np.zeros(6), 3, 4, k_expected=2)
        permuted = select_experts(probs[:, perm], np.zeros(6), 3, 4, k_expected=2)
        np.testing.assert_array_equal(np.sort(permuted.indices, axis=1), np.sort(perm[decision.indices], axis=1))
        self.assertAlmostEqual(lb_loss(probs[:, perm], permuted, cfg).item(), lb_loss(probs, decision, cfg).item(),
                               places=14)

    def test_config_errors(self):
        with self.assertRaises(ParameterError):
            LBLossConfig(alpha=-1.0)
        with self.assertRaises(ConfigurationError):
            LBLossConfig(zero_group_count='sometimes')
        with self.assertRaises(ConfigurationError):
            group_frequencies(self.decision, LBLossConfig(n_groups=3))


class TestMonitors(unittest.TestCase):

    def test_router_similarity(self):
        result = router_similarity(np.array([[1., 0.], [2., 0.], [0., 3.]]))
        self.assertAlmostEqual(result.value, 1.0 / 3.0)
        self.assertEqual(result.excluded, 0)
        result = router_similarity(np.array([[1., 0.], [0., 0.], [1., 0.]]))
        self.assertAlmostEqual(result.value, 1.0)
        self.assertEqual(result.excluded, 1)
        with self.assertRaises(ConfigurationError):
            router_similarity(np.ones((1, 4)))

    def test_router_similarity_of_state(self):
        state = RouterState(8, 4, 2, 3, 2, rng=RngState(0))
        value = router_similarity(state).value
        self.assertLess(abs(value), 1.0)

    def test_grad_norm_ratio(self):
        self.assertAlmostEqual(grad_norm_ratio_from_grads(np.array([3., 4.]), np.array([1., 0.]), 0.5), 0.1)
        with self.assertRaises(UndefinedRatioError):
            grad_norm_ratio_from_grads(np.zeros(2), np.ones(2), 0.5)

        target = np.array([0.1, 0.2, 0.7])
        ratio = grad_norm_ratio(np.full(3, 1. / 3.),
                                lambda p: (p * target).sum(),
                                lambda p: (p * p).sum(),
                                alpha=1.0)
        expected = np.linalg.norm(np.full(3, 2. / 3.)) / np.linalg.norm(target)
        self.assertAlmostEqual(ratio, expected)

    def test_rg_tracker(self):
        tracker = RgTracker(threshold=0.1, decay=0.9)
        first = tracker.update(0.2)
        self.assertTrue(first.flagged)
        self.assertAlmostEqual(first.ema, 0.2)
        second = tracker.update(0.0)
        self.assertFalse(second.flagged)
        self.assertAlmostEqual(second.ema, 0.18)


class TestDocumentedValues(unittest.TestCase):

    def test_selection_cases(self):
        probs = np.array([[0.5, 0.3, 0.2]])
        decision = select_experts(probs, np.zeros(3), 2, 2, k_expected=1)
        self.assertEqual(set(decision.indices[0]), {0, 1})
        np.testing.assert_allclose(sorted(decision.gates.data[0]), [0.3, 0.5])

        decision = select_experts(probs, np.array([-0.4, 0., 0.]), 2, 2, k_expected=1)
        self.assertEqual(set(decision.indices[0]), {1, 2})
        np.testing.assert_allclose(sorted(decision.gates.data[0]), [0.2, 0.3])

        many = np.random.default_rng(0).dirichlet(np.ones(3), size=20)
        decision = select_experts(many, np.array([0., 0., 1e9]), 2, 2, k_expected=1)
        np.testing.assert_array_equal(decision.indices[:, 0], 2)
        np.testing.assert_allclose(decision.gates.data[:, 0], many[:, 2])
        with self.assertRaises(ConfigurationError):
            select_experts(probs, np.zeros(3), 4, 2)

    def test_bias_update_case(self):
        state = RouterState(4, 2, 1, 2, 1, mu=0.1)
        state.counters[:] = [80, 70, 50]
        delta = bias_update(state, 100)
        self.assertAlmostEqual(delta[0], 0.1 * (0.25 - 0.4))
        self.assertAlmostEqual(delta[0], -0.015)
        self.assertEqual(delta[2], 0.0)

    def test_balance_loss_case(self):
        probs = Tensor(np.full((2, 3), 1 / 3), requires_grad=True)
        decision = select_experts(probs, np.array([0., -1., 1.]), 2, 2, k_expected=1)
        np.testing.assert_array_equal(np.sort(decision.indices, axis=1), [[0, 2], [0, 2]])
        cfg = LBLossConfig(alpha=0.1)
        np.testing.assert_allclose(group_frequencies(decision, cfg), [1., 1.])
        self.assertAlmostEqual(lb_loss(probs, decision, cfg).item(), 0.1)

        zero = lb_loss(probs, decision, LBLossConfig(alpha=0.0))
        self.assertEqual(zero.item(), 0.0)
        zero.backward()
        np.testing.assert_array_equal(probs.grad, np.zeros((2, 3)))

    def test_balance_loss_gradient_on_batch(self):
        rng = RngState(0).generator
        probs = Tensor(rng.dirichlet(np.ones(6), size=8), requires_grad=True)
        decision = select_experts(probs, np.zeros(6), 3, 4, k_expected=2)
        cfg = LBLossConfig(alpha=1.0)
        self.assertLess(grad_check(lambda: lb_loss(probs, decision, cfg), [probs]), 1e-4)

    def test_similarity_cases(self):
        self.assertAlmostEqual(router_similarity(np.tile([[1., 2., 3.]], (4, 1))).value, 1.0)
        self.assertAlmostEqual(router_similarity(np.array([[1., 0.], [0., 1.]])).value, 0.0)
        self.assertAlmostEqual(router_similarity(np.eye(4)).value, 0.0)

    def test_ratio_cases(self):
        g = np.array([0.3, -0.2, 0.5])
        self.assertEqual(grad_norm_ratio_from_grads(g, g, 0.0), 0.0)
        self.assertAlmostEqual(grad_norm_ratio_from_grads(g, g, 1.0), 1.0)
