import pathlib
import shutil
import tempfile
import unittest

import numpy as np

from moelab import set_logging_level, set_config, get_config
from moelab.diffcore import (Module, Parameter, ParamClass, RngState, Tensor, concat, cross_entropy, fixed_matmul,
                             grad_check, load_tensors, logsumexp, matmul, no_grad, rope_apply, save_tensors,
                             scatter_rows, seeded_init, softmax)
from moelab.errors import DimensionError, EvaluationError, ParameterError

set_logging_level('WARNING')


class Pair(Module):

    def __init__(self):
        self.a = Parameter(np.ones((2, 3)), ParamClass.EMBEDDING)
        self.blocks = [Parameter(np.zeros(4))]


class TestTensor(unittest.TestCase):

    def test_matmul_values(self):
        a = np.arange(6.).reshape(2, 3)
        b = np.arange(12.).reshape(3, 4)
        np.testing.assert_array_equal(fixed_matmul(a, b), a @ b)
        c = matmul([[1., 2.], [3., 4.]], [[5., 6.], [7., 8.]])
        np.testing.assert_array_equal(c.data, [[19., 22.], [43., 50.]])

    def test_matmul_dimension_error(self):
        with self.assertRaises(DimensionError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))
        with self.assertRaises(ValueError):
            fixed_matmul(np.ones(3), np.ones((3, 1)))

    def test_matmul_batch_and_gradient(self):
        rng = RngState(3).generator
        a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        self.assertLess(grad_check(lambda: (a @ b).sum(), [a, b]), 1e-6)

    def test_elementwise_gradients(self):
        rng = RngState(5).generator
        x = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
        y = Tensor(rng.uniform(0.5, 2.0, (4,)), requires_grad=True)

        def f():
            return ((x * y - x / y) ** 2 + x.exp().log() + x.sqrt() + x.silu() + x.sigmoid()).mean()

        self.assertLess(grad_check(f, [x, y]), 1e-6)

    def test_indexing_gradient_accumulates_repeats(self):
        x = Tensor(np.arange(4.), requires_grad=True)
        x[np.array([0, 0, 3])].sum().backward()
        np.testing.assert_array_equal(x.grad, [2., 0., 0., 1.])

    def test_backward_seed_for_non_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with self.assertRaises(DimensionError):
            (x * 2.0).backward()
        (x * 2.0).backward(np.ones(3))
        np.testing.assert_array_equal(x.grad, [2., 2., 2.])

    def test_item(self):
        self.assertEqual(Tensor([[3.5]]).item(), 3.5)
        with self.assertRaises(DimensionError):
            Tensor([1., 2.]).item()

    def test_no_grad(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = x * 3.0
        self.assertFalse(y.requires_grad)
        self.assertTrue((x * 3.0).requires_grad)

    def test_dtype_config(self):
        self.assertEqual(get_config('dtype'), 'float64')
        with set_config(dtype='float32'):
            self.assertEqual(Tensor([1, 2]).dtype, np.float32)
        self.assertEqual(Tensor([1, 2]).dtype, np.float64)
        with self.assertRaises(KeyError):
            set_config(unknown=1)
        with self.assertRaises(ValueError):
            set_config(fd_step=-1.0)


class TestFunctional(unittest.TestCase):

    def test_softmax(self):
        np.testing.assert_allclose(softmax([0., 0.]).data, [0.5, 0.5])
        big = softmax([1000., 1000.])
        self.assertTrue(big.is_finite())
        np.testing.assert_allclose(big.data, [0.5, 0.5])

    def test_logsumexp_is_stable(self):
        self.assertAlmostEqual(logsumexp(np.array([1000., 1000.])).item(), 1000. + np.log(2.))

    def test_cross_entropy_uniform(self):
        logits = Tensor(np.zeros((2, 3, 7)))
        self.assertAlmostEqual(cross_entropy(logits, np.zeros((2, 3), dtype=int)).item(), np.log(7.))
        with self.assertRaises(DimensionError):
            cross_entropy(logits, np.zeros(3, dtype=int))

    def test_softmax_and_cross_entropy_gradients(self):
        rng = RngState(11).generator
        logits = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        targets = rng.integers(0, 6, 4)
        self.assertLess(grad_check(lambda: cross_entropy(logits, targets), [logits]), 1e-6)
        weights = rng.standard_normal((4, 6))
        self.assertLess(grad_check(lambda: (softmax(logits) * weights).sum(), [logits]), 1e-6)

    def test_concat_and_scatter(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.zeros((1, 2)), requires_grad=True)
        out = concat([a, b], axis=0)
        self.assertEqual(out.shape, (3, 2))
        s = scatter_rows(a, np.array([2, 0]), 4)
        np.testing.assert_array_equal(s.data[:, 0], [1., 0., 1., 0.])
        (s * 2.0).sum().backward()
        np.testing.assert_array_equal(a.grad, np.full((2, 2), 2.))

    def test_rope_preserves_pair_norms(self):
        x = RngState(1).generator.standard_normal((5, 8))
        rotated = rope_apply(x, base_frequency=1e4).data
        np.testing.assert_allclose(np.linalg.norm(rotated.reshape(5, 4, 2), axis=-1),
                                   np.linalg.norm(x.reshape(5, 4, 2), axis=-1))
        np.testing.assert_allclose(rotated[0], x[0])
        with self.assertRaises(DimensionError):
            rope_apply(np.ones((2, 3)))

    def test_rope_relative_positions(self):
        rng = RngState(2).generator
        q, k = rng.standard_normal((1, 4)), rng.standard_normal((1, 4))
        first = rope_apply(q, [3]).data @ rope_apply(k, [1]).data.T
        second = rope_apply(q, [7]).data @ rope_apply(k, [5]).data.T
        np.testing.assert_allclose(first, second)


class TestRng(unittest.TestCase):

    def test_streams_are_reproducible(self):
        a = seeded_init((100,), 'truncated-normal', 0.5, RngState(7, 1))
        b = seeded_init((100,), 'truncated-normal', 0.5, RngState(7, 1))
        c = seeded_init((100,), 'truncated-normal', 0.5, RngState(7, 2))
        np.testing.assert_array_equal(a.data, b.data)
        self.assertFalse(np.array_equal(a.data, c.data))

    def test_variance(self):
        for distribution in ('uniform', 'truncated-normal'):
            values = seeded_init((200000,), distribution, 0.02, RngState(0)).data
            self.assertAlmostEqual(values.var() / 0.02, 1.0, delta=0.02)
        self.assertLessEqual(np.abs(seeded_init((1000,), 'truncated-normal', 1.0, RngState(0)).data).max(),
                             2.0 / np.sqrt(0.7737) + 1e-9)

    def test_invalid_arguments(self):
        with self.assertRaises(ParameterError):
            seeded_init((2,), 'uniform', -1.0, RngState(0))
        with self.assertRaises(ParameterError):
            seeded_init((2,), 'cauchy', 1.0, RngState(0))
        np.testing.assert_array_equal(seeded_init((3,), 'uniform', 0.0, RngState(0)).data, np.zeros(3))


class TestGradCheck(unittest.TestCase):

    def test_detects_wrong_gradient(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)

        def wrong():
            out = x.sum()
            out._backward = lambda: None
            return out * 1.0

        self.assertGreater(grad_check(wrong, [x]), 0.5)

    def test_non_finite_function(self):
        x = Tensor(np.array([-1.0]), requires_grad=True)
        with self.assertRaises(EvaluationError):
            grad_check(lambda: x.log().sum(), [x])

    def test_non_scalar(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with self.assertRaises(ParameterError):
            grad_check(lambda: x * 1.0, [x])


class TestModuleAndCheckpoint(unittest.TestCase):

    def setUp(self):
        self.tmp = pathlib.Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_named_parameters(self):
        pair = Pair()
        self.assertEqual([name for name, _ in pair.named_parameters()], ['a', 'blocks.0'])
        self.assertEqual(pair.num_parameters(), 10)
        self.assertEqual(pair.a.param_class, ParamClass.EMBEDDING)

    def test_state_dict(self):
        pair = Pair()
        with self.assertRaises(KeyError):
            pair.load_state_dict({'a': np.zeros((2, 3))})
        with self.assertRaises(ValueError):
            pair.load_state_dict({'a': np.zeros((3, 2)), 'blocks.0': np.zeros(4)})
        pair.load_state_dict({'a': np.full((2, 3), 5.), 'blocks.0': np.arange(4.)})
        np.testing.assert_array_equal(pair.blocks[0].data, np.arange(4.))

    def test_tensor_file_is_bitwise(self):
        rng = RngState(0).generator
        tensors = {'w': rng.standard_normal((3, 4)), 'b': np.arange(5, dtype=np.int64)}
        filename = save_tensors(self.tmp / 'x.npt', tensors, {'step': 3})
        loaded, meta = load_tensors(filename)
        self.assertEqual(list(loaded), ['w', 'b'])
        self.assertEqual(meta, {'step': 3})
        for name in tensors:
            self.assertEqual(loaded[name].tobytes(), tensors[name].tobytes())
            self.assertEqual(loaded[name].dtype, tensors[name].dtype)


class TestDocumentedValues(unittest.TestCase):

    def test_matmul_cases(self):
        np.testing.assert_array_equal(fixed_matmul(np.eye(2), np.array([[3., 4.], [5., 6.]])), [[3., 4.], [5., 6.]])
        np.testing.assert_array_equal(fixed_matmul(np.array([[1., 2.]]), np.zeros((2, 1))), [[0.]])

        rng = RngState(0).generator
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        oracle = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                acc = 0.0
                for k in range(4):
                    acc += a[i, k] * b[k, j]
                oracle[i, j] = acc
        np.testing.assert_array_equal(fixed_matmul(a, b), oracle)

    def test_softmax_cases(self):
        np.testing.assert_allclose(softmax([1000., 0.]).data, [1., 0.], atol=1e-12)
        np.testing.assert_allclose(softmax(np.log([1., 2., 3.])).data, [1 / 6, 2 / 6, 3 / 6])

    def test_rope_cases(self):
        x = RngState(0).generator.standard_normal((1, 6))
        np.testing.assert_allclose(rope_apply(x, [0]).data, x)
        np.testing.assert_allclose(rope_apply([[1., 0.]], [np.pi / 2]).data, [[0., 1.]], atol=1e-12)

    def test_quadratic_gradient(self):
        theta = Tensor(np.array([3.0]), requires_grad=True)
        (theta ** 2).sum().backward()
        self.assertAlmostEqual(theta.grad[0], 6.0)
        self.assertLess(grad_check(lambda: (theta ** 2).sum(), [theta]), 1e-9)

    def test_sample_variance(self):
        values = seeded_init((1000000,), 'uniform', 0.04, RngState(0)).data
        self.assertTrue(0.0392 <= values.var() <= 0.0408)
