import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avloc import tensor as tn
from avloc.gradcheck import GradCheckError, grad_check, relative_error
from avloc.optim import ModelParams, adam_step, lr_at_epoch
from avloc.tensor import DimensionError, NonFiniteError, Tape, Tensor

from oracles import central_difference


def tape_grad(fn, *arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*ts)
    return out, tape.gradient(out, ts)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(tn.matmul(np.eye(2), a).data, a)

    def test_closed_form(self):
        assert tn.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            tn.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 5))
        _, (ga, gb) = tape_grad(lambda x, y: tn.sum(x @ y), a, b)
        fd_a = central_difference(lambda x: (x @ b).sum(), a)
        fd_b = central_difference(lambda y: (a @ y).sum(), b)
        assert relative_error(ga, fd_a).max() < 1e-6
        assert relative_error(gb, fd_b).max() < 1e-6

    def test_recorded_only_with_grad(self):
        with Tape() as tape:
            tn.matmul(np.eye(2), np.eye(2))
            tn.matmul(Tensor(np.eye(2), requires_grad=True), np.eye(2))
        assert [n.op for n in tape.nodes] == ["matmul"]


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(tn.softmax([0.0, 0.0]).data, [0.5, 0.5], atol=1e-15)

    def test_ln3(self):
        np.testing.assert_allclose(tn.softmax([0.0, math.log(3)]).data, [0.25, 0.75], atol=1e-15)

    def test_singleton(self):
        assert tn.softmax([[4.2]], axis=1).data.tolist() == [[1.0]]

    def test_axis_bounds(self):
        with pytest.raises(IndexError):
            tn.softmax(np.zeros((2, 2)), axis=2)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 1), st.floats(-50, 50))
    def test_sums_to_one_and_shift_invariant(self, seed, axis, shift):
        x = np.random.default_rng(seed).standard_normal((4, 5)) * 10
        p = tn.softmax(x, axis=axis).data
        assert np.all(p > 0)
        assert np.abs(p.sum(axis=axis) - 1).max() < 1e-12
        q = tn.softmax(x + shift, axis=axis).data
        assert np.abs(p - q).max() < 1e-9


class TestElementwise:
    def test_sigmoid_zero_exact(self):
        assert tn.sigmoid(0.0).data == 0.5

    def test_vector_broadcast_over_matrix(self):
        out = tn.elementwise("mul", [1.0, 2.0, 3.0], np.ones((3, 2)))
        assert out.data.tolist() == [[1, 1], [2, 2], [3, 3]]

    def test_relu_negative(self):
        assert tn.relu(-2.5).data == 0.0

    def test_non_broadcastable(self):
        with pytest.raises(DimensionError):
            tn.add(np.ones((2, 3)), np.ones((4, 5)))

    def test_sigmoid_extremes_finite(self):
        out = tn.sigmoid(np.array([-800.0, 800.0])).data
        assert out.tolist() == [0.0, 1.0]

    def test_dispatch(self):
        assert tn.elementwise("scale", [2.0], 3.0).data.tolist() == [6.0]
        with pytest.raises(ValueError):
            tn.elementwise("cube", [1.0])


class TestReduce:
    def test_mean(self):
        assert tn.reduce("mean", [[2.0, 4.0]], axis=1).data.tolist() == [3.0]

    def test_max_values_and_argmax(self):
        vals, idx = tn.reduce("max_with_argmax", [[1.0, 5.0], [7.0, 2.0]], axis=0)
        assert vals.data.tolist() == [7.0, 5.0]
        assert idx.tolist() == [1, 0]

    def test_max_tie_lowest_index(self):
        _, idx = tn.max([[3.0, 3.0, 1.0]], axis=1)
        assert idx.tolist() == [0]

    def test_sum_gradient(self):
        x = np.random.default_rng(3).standard_normal((3, 4))
        _, (g,) = tape_grad(lambda t: tn.sum(tn.sum(t, axis=0) * np.arange(4.0)), x)
        fd = central_difference(lambda a: (a.sum(axis=0) * np.arange(4.0)).sum(), x)
        assert relative_error(g, fd).max() < 1e-6

    def test_max_backward_routes_to_argmax(self):
        x = np.array([[1.0, 9.0, 9.0], [4.0, 0.0, 2.0]])
        upstream = np.array([2.5, -1.5])
        t = Tensor(x, requires_grad=True)
        with Tape() as tape:
            vals, _ = tn.max(t, axis=1)
        (g,) = tape.gradient(vals, [t], seed=upstream)
        assert g.tolist() == [[0, 2.5, 0], [-1.5, 0, 0]]
        assert g.sum(axis=1).tolist() == upstream.tolist()

    def test_axis_error(self):
        with pytest.raises(IndexError):
            tn.reduce("sum", np.ones(3), axis=1)


# every recorded op, checked against finite differences on 20 seeds
OP_CASES = {
    "add": (lambda a, b: tn.add(a, b), [(3, 4), (3, 4)]),
    "add_broadcast": (lambda a, b: tn.add(a, b), [(2, 3, 4), (4,)]),
    "sub": (lambda a, b: tn.sub(a, b), [(3, 4), (1, 4)]),
    "mul": (lambda a, b: tn.mul(a, b), [(3, 4), (3, 4)]),
    "mul_vector": (lambda a, b: tn.mul(a, b), [(3,), (3, 5)]),
    "scale": (lambda a: tn.scale(a, -1.7), [(3, 4)]),
    "matmul": (lambda a, b: tn.matmul(a, b), [(4, 3), (3, 5)]),
    "matmul_batched": (lambda a, b: tn.matmul(a, b), [(2, 4, 3), (3, 2)]),
    "matmul_row_vector": (lambda a, b: tn.matmul(a, b), [(3,), (2, 3, 4)]),
    "matmul_col_vector": (lambda a, b: tn.matmul(a, b), [(4, 3), (3,)]),
    "sigmoid": (tn.sigmoid, [(3, 4)]),
    "tanh": (tn.tanh, [(3, 4)]),
    "relu": (tn.relu, [(3, 4)]),
    "exp": (tn.exp, [(3, 4)]),
    "log": (lambda a: tn.log(tn.exp(a) + 0.5), [(3, 4)]),
    "clip": (lambda a: tn.clip(a, -0.7, 0.9), [(3, 4)]),
    "softmax": (lambda a: tn.softmax(a, axis=0), [(3, 4)]),
    "logsumexp": (lambda a: tn.logsumexp(a, axis=1), [(3, 4)]),
    "logsumexp_masked": (lambda a: tn.logsumexp(a, axis=1, mask=np.tri(3, 4, dtype=bool)), [(3, 4)]),
    "sum": (lambda a: tn.sum(a, axis=1, keepdims=True), [(3, 4)]),
    "mean": (lambda a: tn.mean(a, axis=0), [(3, 4)]),
    "max": (lambda a: tn.max(a, axis=1)[0], [(3, 4)]),
    "reshape": (lambda a: tn.reshape(a, (4, 3)), [(3, 4)]),
    "swapaxes": (lambda a: tn.swapaxes(a, 0, 2), [(2, 3, 4)]),
    "concat": (lambda a, b: tn.concat([a, b], axis=1), [(3, 2), (3, 4)]),
    "stack": (lambda a, b: tn.stack([a, b], axis=1), [(3, 4), (3, 4)]),
    "index": (lambda a: a[..., 1, :], [(2, 3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
@pytest.mark.parametrize("seed", range(20))
def test_op_gradient_matches_finite_differences(name, seed):
    fn, shapes = OP_CASES[name]
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    out_shape = fn(*arrays).shape
    weights = rng.standard_normal(out_shape)

    def scalar(*ts):
        return tn.sum(fn(*ts) * weights)

    _, grads = tape_grad(scalar, *arrays)
    for i, g in enumerate(grads):

        def f(x, i=i):
            args = [Tensor(a) for a in arrays]
            args[i] = Tensor(x)
            return float(scalar(*args).data)

        fd = central_difference(f, arrays[i])
        assert relative_error(g, fd).max() < 1e-6, (name, i)


class TestTape:
    def test_nodes_topological(self):
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            h = tn.relu(w @ w)
            out = tn.sum(h * h)
        produced = set()
        leaves = {id(w)}
        for node in tape.nodes:
            for t in node.inputs:
                assert id(t) in produced or id(t) in leaves or not t.requires_grad
            produced.add(id(node.output))
        assert tape.nodes[-1].output is out

    def test_reused_input_accumulates(self):
        _, (g,) = tape_grad(lambda x: tn.sum(x * x + x), np.array([1.0, -2.0]))
        assert g.tolist() == [3.0, -3.0]

    def test_no_recording_outside_tape(self):
        w = Tensor([1.0], requires_grad=True)
        out = tn.sigmoid(w)
        assert not out.requires_grad

    def test_unreachable_source_gets_zeros(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            out = tn.sum(a)
        ga, gb = tape.gradient(out, [a, b])
        assert ga.tolist() == [1.0, 1.0] and gb.tolist() == [0.0]

    def test_non_scalar_target_needs_seed(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            out = a * 2.0
        with pytest.raises(DimensionError):
            tape.gradient(out, [a])

    def test_nonfinite_rejected_at_construction(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, float("nan")])
        old = tn.set_checked(False)
        try:
            Tensor([float("inf")])
        finally:
            tn.set_checked(old)

    def test_bit_deterministic(self):
        def run():
            rng = np.random.default_rng(11)
            a = rng.standard_normal((5, 4))
            b = rng.standard_normal((4, 3))
            out, grads = tape_grad(lambda x, y: tn.sum(tn.softmax(tn.tanh(x @ y), axis=1) * b.T[:, :1].T), a, b)
            return out.data.tobytes(), [g.tobytes() for g in grads]

        assert run() == run()


class TestGradCheck:
    def test_linear_function_exact(self):
        rng = np.random.default_rng(0)
        params = ModelParams()
        params.add("W", rng.standard_normal((3, 4)))
        x = rng.standard_normal((4, 2))
        report = grad_check(lambda: tn.sum(params["W"] @ x), params)
        assert report.worst < 1e-9

    def test_corrupted_backward_detected(self):
        rng = np.random.default_rng(1)
        params = ModelParams()
        params.add("W", rng.standard_normal((3, 4)))
        x = rng.standard_normal((4,))
        f = lambda: tn.sum(tn.sigmoid(params["W"] @ x.reshape(4, 1)))  # noqa: E731
        assert grad_check(f, params).worst < 1e-6
        with tn.corrupted_backward("sigmoid", factor=2.0):
            assert grad_check(f, params).worst > 1e-2

    def test_nonfinite_loss_names_parameter(self):
        params = ModelParams()
        params.add("scale", [1e-300])
        f = lambda: tn.sum(tn.log(tn.relu(params["scale"])))  # noqa: E731
        with np.errstate(divide="ignore"), pytest.raises(GradCheckError, match="scale"):
            grad_check(f, params)

    def test_report_lists_each_name(self):
        params = ModelParams()
        params.add("a", [1.0])
        params.add("b", [2.0])
        report = grad_check(lambda: tn.sum(params["a"] * params["b"]), params)
        assert list(report.max_rel_error) == ["a", "b"]


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        params = ModelParams()
        params.add("w", [1.5, -2.0])
        adam_step(params, {"w": np.zeros(2)}, lr=0.1)
        assert params["w"].data.tolist() == [1.5, -2.0]

    def test_first_step_moves_by_lr(self):
        params = ModelParams()
        params.add("w", [0.0])
        adam_step(params, {"w": np.array([1.0])}, lr=0.1)
        assert abs(-params["w"].data[0] - 0.1) < 1e-9
        assert params.step == 1

    def test_clipping_scales_gradient(self):
        params = ModelParams()
        params.add("w", np.zeros(2))
        state = adam_step(params, {"w": np.array([6.0, 8.0])}, lr=0.1, clip_norm=1.0)
        assert state.grad_norm == 10.0
        assert state.clip_scale == pytest.approx(0.1, abs=1e-15)
        np.testing.assert_allclose(params.m["w"], 0.1 * np.array([0.6, 0.8]), atol=1e-15)

    def test_nonfinite_gradient_rejected(self):
        params = ModelParams()
        params.add("w", [0.0])
        with pytest.raises(NonFiniteError, match="w"):
            adam_step(params, {"w": np.array([np.nan])}, lr=0.1)
        assert params.step == 0

    def test_moment_shapes_match(self):
        params = ModelParams()
        params.zeros("a", (2, 3))
        assert params.m["a"].shape == params.v["a"].shape == (2, 3)
        with pytest.raises(KeyError):
            params.zeros("a", (1,))

    def test_schedule(self):
        lrs = [lr_at_epoch(e, 7e-4) for e in range(1, 41)]
        assert lrs[8] == 7e-4 and lrs[9] == 3.5e-4
        assert lrs[19] == 1.75e-4 and lrs[29] == 8.75e-5 and lrs[39] == 8.75e-5
