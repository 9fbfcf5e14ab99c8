import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relchain.autodiff import (
    SGD,
    Adam,
    MissingGradError,
    Module,
    Parameter,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    checkpoint,
    clip_grad_norm,
    grad,
    no_grad,
    ops,
)
from relchain.gradcheck import TOLERANCE, check_ops, numeric_grad, op_cases, rel_error


class TestForward:
    def test_matmul_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ops.matmul(a, np.eye(2)).data, a)

    def test_softmax_symmetric(self):
        np.testing.assert_allclose(ops.softmax(np.array([0.0, 0.0])).data, [0.5, 0.5])

    def test_concat_widths(self):
        out = ops.concat([np.zeros((4, 3)), np.ones((4, 5))], axis=1)
        assert out.shape == (4, 8)

    def test_softmax_rows_sum_to_one(self, rng):
        x = rng.normal(scale=30, size=(50, 7))
        np.testing.assert_allclose(ops.softmax(x).data.sum(axis=-1), 1.0, atol=1e-9)

    def test_cross_entropy_nonnegative_and_zero_when_certain(self, rng):
        logits = rng.normal(size=(20, 5))
        labels = rng.integers(0, 5, size=20)
        assert ops.cross_entropy(logits, labels).data >= 0
        sure = np.full((3, 4), -1000.0)
        sure[np.arange(3), [0, 2, 3]] = 1000.0
        assert ops.cross_entropy(sure, [0, 2, 3]).data == 0.0
        assert ops.cross_entropy(sure, [1, 2, 3]).data > 0

    def test_reduce_max_first_tie_gets_gradient(self):
        x = Tensor(np.array([[1.0, 3.0, 3.0]]), requires_grad=True)
        backward(ops.reduce_sum(ops.reduce_max(x, axis=1)))
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])

    def test_segment_sum_empty_segment_is_zero(self):
        out = ops.segment_sum(np.ones((3, 2)), [0, 0, 2], 4)
        np.testing.assert_array_equal(out.data, [[2, 2], [0, 0], [1, 1], [0, 0]])


class TestShapeErrors:
    def test_matmul_names_op_and_shapes(self):
        with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
            ops.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_add(self):
        with pytest.raises(ShapeError, match="add"):
            ops.add(np.zeros((2, 3)), np.zeros((4,)))

    def test_concat(self):
        with pytest.raises(ShapeError, match="concat"):
            ops.concat([np.zeros((2, 3)), np.zeros((3, 3))], axis=1)

    def test_cross_entropy(self):
        with pytest.raises(ShapeError):
            ops.cross_entropy(np.zeros((2, 3)), [0, 1, 2])


class TestBackward:
    def test_square_at_three(self):
        x = Tensor(3.0, requires_grad=True)
        backward(x * x)
        assert x.grad == 6.0
        fd = numeric_grad(lambda: float(x.data * x.data), x.data)
        assert rel_error(x.grad, fd) <= 1e-6

    def test_cross_entropy_at_uniform_logits(self):
        logits = Tensor(np.zeros((1, 2)), requires_grad=True)
        backward(ops.cross_entropy(ops.log_softmax(logits), [0]))
        np.testing.assert_allclose(logits.grad, [[-0.5, 0.5]], atol=1e-12)

    def test_unused_parameter_has_zero_grad(self):
        used, unused = Parameter(np.ones(3), "used"), Parameter(np.ones(3), "unused")
        backward(ops.reduce_sum(used * 2.0))
        np.testing.assert_array_equal(grad(unused).data, np.zeros(3))
        np.testing.assert_array_equal(grad(used).data, np.full(3, 2.0))

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            backward(x * 2.0)

    def test_second_backward_needs_reset(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x
        backward(y)
        with pytest.raises(TapeError):
            backward(y)

    def test_new_forward_pass_after_backward(self):
        x = Tensor(2.0, requires_grad=True)
        backward(x * x)
        x.grad = None
        backward(x * x * x)
        assert x.grad == 12.0

    def test_gradients_accumulate_on_leaves(self):
        x = Tensor(1.5, requires_grad=True)
        backward(x * 2.0)
        backward(x * 3.0)
        assert x.grad == 5.0

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape, no_grad():
            y = ops.reduce_sum(x * x)
        assert len(tape) == 0 and not y.requires_grad

    def test_tape_is_topologically_ordered(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            y = ops.tanh(x * 2.0)
            ops.reduce_sum(ops.mul(y, y))
        position = {id(t): i for i, t in enumerate(tape.nodes)}
        for i, t in enumerate(tape.nodes):
            for p in t.node.parents:
                assert position.get(id(p), -1) < i


class TestHandChains:
    """Backward through small compositions against gradients derived by hand."""

    def test_sigmoid_of_affine(self):
        w, x, b = 0.7, 1.3, -0.2
        wt = Tensor(w, requires_grad=True)
        backward(ops.sigmoid(wt * x + b))
        s = 1 / (1 + np.exp(-(w * x + b)))
        assert wt.grad == pytest.approx(s * (1 - s) * x, rel=1e-12)

    def test_tanh_squared_sum(self):
        v = np.array([0.1, -0.4, 0.9])
        t = Tensor(v, requires_grad=True)
        backward(ops.reduce_sum(ops.mul(ops.tanh(t), ops.tanh(t))))
        np.testing.assert_allclose(t.grad, 2 * np.tanh(v) * (1 - np.tanh(v) ** 2), rtol=1e-12)

    def test_linear_softmax_cross_entropy(self):
        x = np.array([[1.0, 2.0], [0.5, -1.0]])
        w = np.array([[0.3, -0.2, 0.1], [0.0, 0.4, -0.5]])
        labels = np.array([2, 0])
        wt = Tensor(w, requires_grad=True)
        backward(ops.cross_entropy(ops.matmul(x, wt), labels))
        p = np.exp(x @ w)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(2), labels] -= 1
        np.testing.assert_allclose(wt.grad, x.T @ p / 2, rtol=1e-12)


class TestGradientCheck:
    @pytest.mark.parametrize("name", sorted(op_cases(np.random.default_rng(0))))
    def test_op_matches_finite_differences(self, name):
        (result,) = check_ops(trials=20, seed=17, names=[name])
        assert result.max_rel_err <= TOLERANCE, result.line()

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=10, deadline=None)
    def test_random_seeds(self, seed):
        assert all(r.ok for r in check_ops(trials=1, seed=seed))


class TestOptimizers:
    def test_sgd_step(self):
        x = Parameter(np.array(3.0), "x")
        x.grad = np.array(6.0)
        SGD([x], lr=0.1).step()
        assert x.data == pytest.approx(2.4)

    def test_adam_first_step_is_about_lr(self):
        x = Parameter(np.array([1.0, -2.0]), "x")
        x.grad = np.array([0.37, -12.0])
        Adam([x], lr=0.01).step()
        np.testing.assert_allclose(x.data, [0.99, -1.99], rtol=1e-6)

    def test_adam_state_persists(self):
        x = Parameter(np.array(0.0), "x")
        opt = Adam([x], lr=0.1)
        for _ in range(3):
            x.grad = np.array(1.0)
            opt.step()
        assert opt.t == 3
        assert opt.m[0] == pytest.approx(1 - 0.9 ** 3)

    def test_missing_gradient(self):
        with pytest.raises(MissingGradError):
            SGD([Parameter(np.zeros(2), "w")], lr=0.1).step()

    def test_sgd_on_convex_quadratic_never_increases(self, rng):
        a = rng.normal(size=(5, 5))
        h = a @ a.T + np.eye(5)
        w = Parameter(rng.normal(size=(5, 1)), "w")
        opt = SGD([w], lr=0.01)
        losses = []
        for _ in range(200):
            opt.zero_grad()
            loss = ops.mul(ops.reduce_sum(ops.mul(w, ops.matmul(h, w))), 0.5)
            backward(loss)
            opt.step()
            losses.append(float(loss.data))
        assert all(b <= a for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 0.1 * losses[0]

    def test_clip_grad_norm(self):
        p = Parameter(np.zeros(2), "p")
        p.grad = np.array([3.0, 4.0])
        assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose(p.grad, [0.6, 0.8])


class TestModuleAndCheckpoint:
    def test_duplicate_names_rejected(self, rng):
        m = Module(rng)
        m.param("w", (2, 2))
        with pytest.raises(KeyError):
            m.param("w", (2, 2))

    def test_uniform_init_bound(self, rng):
        m = Module(rng)
        w = m.param("w", (16, 8))
        b = m.param("b", (8,), init="zeros")
        assert np.abs(w.data).max() <= 1 / 4
        assert not b.data.any()

    def test_bit_exact_round_trip(self, rng, tmp_path):
        params = {"a": rng.normal(size=(3, 4)), "b.c": np.array(np.pi), "emb": rng.normal(size=(2, 2, 2))}
        checkpoint.save(tmp_path / "m.ckpt", params, {"variant": "gru"})
        loaded, meta = checkpoint.load(tmp_path / "m.ckpt")
        assert meta == {"variant": "gru"}
        for name, arr in params.items():
            assert loaded[name].shape == arr.shape
            assert loaded[name].tobytes() == arr.astype("<f8").tobytes()

    def test_truncated_file(self, rng):
        blob = checkpoint.dumps({"a": rng.normal(size=10)})
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(blob[:-3])

    def test_wrong_magic(self):
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(b"not a checkpoint")
