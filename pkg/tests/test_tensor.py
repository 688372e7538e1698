import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from oracles import masked_softmax_ref, softmax_ref

from lmmv import tensor as T
from lmmv.tensor import NumericFault, Parameter, ShapeError, Tensor


class TestPrimitiveExamples:
    def test_matmul_identity(self):
        out = T.apply("matmul", Tensor([[1, 2], [3, 4]]), Tensor(np.eye(2)))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_relu(self):
        np.testing.assert_array_equal(T.apply("relu", Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_softmax_symmetric(self):
        np.testing.assert_array_equal(T.apply("softmax_last_axis", Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_gelu_matches_tanh_form(self):
        x = np.linspace(-4, 4, 17)
        ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
        with T.precision("float64"):
            np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, rtol=1e-12, atol=1e-14)

    def test_layer_norm_normalizes(self, f64):
        x = np.random.default_rng(0).normal(3, 2, size=(4, 10))
        y = T.layer_norm(Tensor(x), Parameter(np.ones(10)), Parameter(np.zeros(10))).data
        np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
        np.testing.assert_allclose(y.var(-1), 1, rtol=1e-3)

    def test_conv2d_matches_direct_loop(self, f64):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 6, 6, 3))
        w = rng.normal(size=(3, 3, 3, 4))
        b = rng.normal(size=4)
        for stride in (1, 2):
            out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=1).data
            xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
            ho = (6 + 2 - 3) // stride + 1
            ref = np.zeros((2, ho, ho, 4))
            for i in range(ho):
                for j in range(ho):
                    patch = xp[:, i * stride:i * stride + 3, j * stride:j * stride + 3, :]
                    ref[:, i, j] = np.einsum("nhwc,hwco->no", patch, w) + b
            np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_embedding_lookup(self):
        table = Tensor(np.arange(12.0).reshape(4, 3))
        np.testing.assert_array_equal(T.apply("embedding_lookup", table, np.array([3, 0])).data,
                                      [[9, 10, 11], [0, 1, 2]])

    def test_concat_and_mean(self):
        out = T.apply("concat", Tensor([[1.0]]), Tensor([[2.0], [3.0]]), axis=0)
        assert out.shape == (3, 1)
        assert T.apply("mean", out).item() == 2.0

    def test_unknown_primitive(self):
        with pytest.raises(ValueError):
            T.apply("fft", Tensor([1.0]))


class TestErrors:
    def test_shape_error_names_kind_and_shapes(self):
        with pytest.raises(ShapeError) as exc:
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        assert exc.value.kind == "matmul"
        assert (2, 3) in exc.value.shapes

    def test_conv_rejects_unsupported_stride_and_rect_kernels(self):
        x = Tensor(np.ones((1, 4, 4, 1)))
        with pytest.raises(ShapeError):
            T.conv2d(x, Tensor(np.ones((3, 3, 1, 1))), stride=3)
        with pytest.raises(ShapeError):
            T.conv2d(x, Tensor(np.ones((3, 2, 1, 1))))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_output_is_a_numeric_fault(self):
        with pytest.raises(NumericFault):
            T.log(Tensor([0.0]))
        with pytest.raises(NumericFault):
            T.scale(Tensor([1e30], dtype=np.float32), 1e30)

    def test_softmax_other_axis_rejected(self):
        with pytest.raises(ShapeError):
            T.softmax(Tensor(np.ones((2, 3))), axis=0)


class TestMaskedSoftmax:
    def test_hand_computed(self):
        out = T.masked_softmax(Tensor([1.0, 2.0]), np.array([1, 1])).data
        np.testing.assert_allclose(out, [0.2689, 0.7311], atol=1e-4)

    def test_single_unmasked_key_exact(self):
        out = T.masked_softmax(Tensor([1.0, 2.0]), np.array([1, 0])).data
        assert out.tolist() == [1.0, 0.0]

    def test_symmetry_among_unmasked(self):
        out = T.masked_softmax(Tensor([5.0, 5.0, 5.0]), np.array([1, 1, 0])).data
        assert out.tolist() == [0.5, 0.5, 0.0]

    def test_all_masked_rejected(self):
        with pytest.raises(ValueError):
            T.masked_softmax(Tensor([1.0, 2.0]), np.array([0, 0]))

    def test_non_binary_mask_rejected(self):
        with pytest.raises(ValueError):
            T.masked_softmax(Tensor([1.0, 2.0]), np.array([1, 0.5]))

    def test_mask_may_not_broadcast_beyond_scores(self):
        with pytest.raises(ShapeError):
            T.masked_softmax(Tensor(np.ones((1, 3))), np.ones((2, 3)))

    def test_matches_literal_formula(self, f64):
        rng = np.random.default_rng(3)
        for _ in range(20):
            s = rng.normal(size=6)
            m = rng.integers(0, 2, size=6)
            m[0] = 1
            np.testing.assert_allclose(T.masked_softmax(Tensor(s), m).data, masked_softmax_ref(s, m),
                                       rtol=1e-12, atol=1e-300)

    def test_masked_gradient_is_exactly_zero(self, f64):
        s = Parameter(np.random.default_rng(0).normal(size=(3, 5)))
        m = np.array([1, 0, 1, 0, 1])
        w = np.random.default_rng(1).normal(size=(3, 5))
        T.sum(T.masked_softmax(s, m) * Tensor(w)).backward()
        assert (s.grad[:, m == 0] == 0).all()


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 8), st.integers(0, 2 ** 31), st.sampled_from(["float32", "float64"]))
def test_masked_softmax_properties(q, k, seed, prec):
    rng = np.random.default_rng(seed)
    with T.precision(prec):
        s = rng.normal(scale=5, size=(q, k))
        m = rng.integers(0, 2, size=k)
        m[rng.integers(k)] = 1
        out = T.masked_softmax(Tensor(s), m).data
        tol = 1e-6 if prec == "float32" else 1e-12
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=tol)
        assert (out[:, m == 0] == 0).all()
        # any change at masked keys is invisible, bit for bit
        s2 = s.copy()
        s2[:, m == 0] = rng.normal(scale=1e3, size=(q, int((m == 0).sum())))
        assert np.array_equal(T.masked_softmax(Tensor(s2), m).data, out)
        # all-ones mask is bitwise plain softmax
        ones = np.ones(k, dtype=int)
        assert np.array_equal(T.masked_softmax(Tensor(s), ones).data, T.softmax(Tensor(s)).data)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=10))
def test_softmax_matches_reference(xs):
    with T.precision("float64"):
        np.testing.assert_allclose(T.softmax(Tensor(xs)).data, softmax_ref(xs), rtol=1e-12, atol=1e-300)


class TestGraph:
    def test_parameter_keeps_grad_intermediates_freed(self):
        p = Parameter(np.array([1.0, 2.0]))
        h = p * p
        T.sum(h).backward()
        np.testing.assert_array_equal(p.grad, [2.0, 4.0])
        assert h.grad is None

    def test_grads_accumulate_until_zeroed(self):
        p = Parameter(np.array([3.0]))
        for _ in range(2):
            T.sum(p * p).backward()
        assert p.grad[0] == 12.0
        p.zero_grad()
        assert p.grad[0] == 0.0

    def test_shared_subexpression(self):
        p = Parameter(np.array([2.0]))
        h = p * p
        T.sum(h + h).backward()
        assert p.grad[0] == 8.0

    def test_no_grad_records_nothing(self):
        p = Parameter(np.array([1.0]))
        with T.no_grad():
            y = p * p
        assert y._backward is None and not y.requires_grad

    def test_backward_needs_scalar(self):
        p = Parameter(np.ones(3))
        with pytest.raises(ShapeError):
            (p * p).backward()

    def test_precision_switch(self):
        assert T.get_dtype() == np.float32
        with T.precision("float64"):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32
        with pytest.raises(ValueError):
            T.set_precision("float16")

    def test_index_backward_scatters_duplicates(self):
        p = Parameter(np.arange(4.0))
        T.sum(p[np.array([1, 1, 3])]).backward()
        np.testing.assert_array_equal(p.grad, [0, 2, 0, 1])
