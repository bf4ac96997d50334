import numpy as np
import pytest

from flucast import numkit as nk
from flucast.numkit import Tensor2


def triple_loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


class TestMatmul:
    def test_identity(self):
        out = nk.matmul(Tensor2([[1, 0], [0, 1]]), Tensor2([[3], [4]]))
        assert np.array_equal(out.data, [[3], [4]])

    def test_dot_product(self):
        out = nk.matmul(Tensor2([[1, 2]]), Tensor2([[3], [4]]))
        assert out.data[0, 0] == 11

    def test_matches_triple_loop_oracle(self):
        rng = nk.Rng(7)
        a = rng.uniform(-2, 2, (3, 4))
        b = rng.uniform(-2, 2, (4, 2))
        out = nk.matmul(Tensor2(a), Tensor2(b))
        assert np.max(np.abs(out.data - triple_loop_matmul(a, b))) < 1e-12

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(nk.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            nk.matmul(Tensor2(np.zeros((2, 3))), Tensor2(np.zeros((2, 2))))

    def test_associativity_on_random_chains(self):
        rng = nk.Rng(11)
        for _ in range(20):
            a, b, c = (Tensor2(rng.uniform(-1, 1, (2, 2)))
                       for _ in range(3))
            left = nk.matmul(nk.matmul(a, b), c).data
            right = nk.matmul(a, nk.matmul(b, c)).data
            assert np.max(np.abs(left - right)) < 1e-10


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert nk.elementwise("sigmoid", Tensor2([[0.0]])).data[0, 0] == 0.5

    def test_tanh_at_zero(self):
        assert nk.elementwise("tanh", Tensor2([[0.0]])).data[0, 0] == 0.0

    def test_mul(self):
        out = nk.elementwise("mul", Tensor2([[2, 3]]), Tensor2([[4, 5]]))
        assert np.array_equal(out.data, [[8, 15]])

    def test_shape_mismatch(self):
        with pytest.raises(nk.ShapeError):
            nk.add(Tensor2([[1, 2]]), Tensor2([[1], [2]]))

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_nonfinite_raises(self):
        big = Tensor2([[1e308]])
        with pytest.raises(nk.NonFiniteError):
            nk.mul(big, big)


class TestSoftmaxRow:
    def test_symmetry(self):
        assert np.allclose(nk.softmax_row(Tensor2([[0.0, 0.0]])).data,
                           [[0.5, 0.5]], atol=1e-15)

    def test_large_inputs_no_overflow(self):
        out = nk.softmax_row(Tensor2([[1000.0, 1000.0]]))
        assert np.allclose(out.data, [[0.5, 0.5]], atol=1e-15)

    def test_direct_formula(self):
        out = nk.softmax_row(Tensor2([[np.log(1.0), np.log(3.0)]]))
        assert np.max(np.abs(out.data - [[0.25, 0.75]])) < 1e-12

    def test_rows_sum_to_one_and_shift_invariance(self):
        rng = nk.Rng(3)
        for _ in range(20):
            x = rng.uniform(-5, 5, (4, 6))
            out = nk.softmax_row(Tensor2(x)).data
            assert np.max(np.abs(out.sum(axis=1) - 1.0)) < 1e-12
            shifted = nk.softmax_row(Tensor2(x + 3.7)).data
            assert np.max(np.abs(out - shifted)) < 1e-12


def finite_difference(f, x, step=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        hi = f()
        x[idx] = orig - step
        lo = f()
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * step)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-4, floor=1e-8):
    mask = np.abs(analytic) > floor
    if not np.any(mask):
        return
    rel = np.abs(analytic - numeric)[mask] / np.abs(analytic)[mask]
    assert rel.max() < rtol


class TestBackward:
    @pytest.mark.parametrize("op", ["add", "sub", "mul"])
    def test_binary_primitives_match_finite_differences(self, op):
        rng = nk.Rng(17)
        a = Tensor2(rng.uniform(-1, 1, (3, 4)))
        b = Tensor2(rng.uniform(-1, 1, (3, 4)))

        def loss():
            return nk.mean_all(
                nk.mul(nk.elementwise(op, a, b),
                       nk.elementwise(op, a, b))).item()

        with nk.GradTape() as tape:
            y = nk.elementwise(op, a, b)
            l = nk.mean_all(nk.mul(y, y))
        nk.backward(tape, l)
        assert_grad_close(a.grad, finite_difference(loss, a.data))
        assert_grad_close(b.grad, finite_difference(loss, b.data))

    @pytest.mark.parametrize("op", ["sigmoid", "tanh"])
    def test_unary_primitives_match_finite_differences(self, op):
        rng = nk.Rng(19)
        a = Tensor2(rng.uniform(-2, 2, (3, 4)))

        def loss():
            y = nk.elementwise(op, a)
            return nk.mean_all(nk.mul(y, y)).item()

        with nk.GradTape() as tape:
            y = nk.elementwise(op, a)
            l = nk.mean_all(nk.mul(y, y))
        nk.backward(tape, l)
        assert_grad_close(a.grad, finite_difference(loss, a.data))

    def test_matmul_softmax_chain_matches_finite_differences(self):
        rng = nk.Rng(23)
        a = Tensor2(rng.uniform(-1, 1, (2, 3)))
        b = Tensor2(rng.uniform(-1, 1, (3, 4)))

        def loss():
            y = nk.softmax_row(nk.matmul(a, b))
            return nk.mean_all(nk.mul(y, y)).item()

        with nk.GradTape() as tape:
            y = nk.softmax_row(nk.matmul(a, b))
            l = nk.mean_all(nk.mul(y, y))
        nk.backward(tape, l)
        assert_grad_close(a.grad, finite_difference(loss, a.data))
        assert_grad_close(b.grad, finite_difference(loss, b.data))

    def test_hstack_and_col_slice_gradients(self):
        rng = nk.Rng(29)
        a = Tensor2(rng.uniform(-1, 1, (2, 2)))
        b = Tensor2(rng.uniform(-1, 1, (2, 3)))

        def loss():
            y = nk.col_slice(nk.hstack([a, b]), 1, 4)
            return nk.mean_all(nk.mul(y, y)).item()

        with nk.GradTape() as tape:
            y = nk.col_slice(nk.hstack([a, b]), 1, 4)
            l = nk.mean_all(nk.mul(y, y))
        nk.backward(tape, l)
        assert_grad_close(a.grad, finite_difference(loss, a.data))
        assert_grad_close(b.grad, finite_difference(loss, b.data))

    def test_non_scalar_loss_rejected(self):
        with nk.GradTape() as tape:
            y = nk.add(Tensor2([[1.0, 2.0]]), Tensor2([[3.0, 4.0]]))
        with pytest.raises(nk.ContractError):
            nk.backward(tape, y)

    def test_reused_tensor_accumulates(self):
        a = Tensor2([[2.0]])
        with nk.GradTape() as tape:
            l = nk.mean_all(nk.mul(a, a))  # d/da a^2 = 2a
        nk.backward(tape, l)
        assert abs(a.grad[0, 0] - 4.0) < 1e-12


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = Tensor2([[1.0, 2.0]])
        st = nk.AdamState(p.shape, lr=0.1)
        out = nk.adam_step(st, p, np.zeros((1, 2)))
        assert np.array_equal(out.data, p.data)

    def test_first_step_matches_hand_formula(self):
        # t=1: m_hat = g, v_hat = g^2, update = lr * g/|g| = lr
        p = Tensor2([[0.5]])
        st = nk.AdamState(p.shape, lr=0.1)
        out = nk.adam_step(st, p, np.array([[1.0]]))
        assert abs(out.data[0, 0] - (0.5 - 0.1 * (1.0 / (1.0 + 1e-8)))) < 1e-15

    def test_determinism(self):
        def run():
            p = Tensor2([[1.0, -1.0]])
            st = nk.AdamState(p.shape, lr=0.01)
            g = np.array([[0.3, -0.2]])
            for _ in range(5):
                p = nk.adam_step(st, p, g)
            return p.data
        assert np.array_equal(run(), run())

    def test_shape_mismatch(self):
        p = Tensor2([[1.0]])
        st = nk.AdamState(p.shape, lr=0.1)
        with pytest.raises(nk.ShapeError):
            nk.adam_step(st, p, np.zeros((2, 2)))


class TestRng:
    def test_same_seed_identical_draws(self):
        a = nk.Rng(123).uniform(0, 1, 10_000)
        b = nk.Rng(123).uniform(0, 1, 10_000)
        assert np.array_equal(a, b)

    def test_spawn_streams_differ_by_name(self):
        root = nk.Rng(5)
        a = root.spawn("a").uniform(0, 1, 10)
        b = root.spawn("b").uniform(0, 1, 10)
        assert not np.array_equal(a, b)
        assert np.array_equal(a, nk.Rng(5).spawn("a").uniform(0, 1, 10))

    def test_glorot_bounds(self):
        t = nk.glorot_uniform(nk.Rng(1), 8, 8)
        assert np.max(np.abs(t.data)) <= np.sqrt(6.0 / 16)
