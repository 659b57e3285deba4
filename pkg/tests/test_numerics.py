import math

import numpy as np
import pytest

from zen import numerics as nm


def rand(rng, *shape):
    return rng.standard_normal(shape)


def check_op(build, params, tol=1e-6):
    report = nm.grad_check(build, params, step=1e-5, tolerance=tol)
    assert report.passed, report.summary()


class TestForwardValues:
    def test_softmax_symmetry(self):
        y = nm.softmax(nm.tensor([0.0, 0.0]))
        np.testing.assert_allclose(y.values, [0.5, 0.5], atol=0)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        y = nm.softmax(nm.tensor(rand(rng, 4, 7)))
        np.testing.assert_allclose(y.values.sum(axis=-1), 1.0, atol=1e-15)

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(1)
        x = rand(rng, 5, 9)
        a = nm.softmax(nm.tensor(x)).values
        b = nm.softmax(nm.tensor(x + 13.7)).values
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_matmul_identity(self):
        rng = np.random.default_rng(2)
        x = rand(rng, 6, 6)
        y = nm.matmul(nm.tensor(np.eye(6)), nm.tensor(x))
        np.testing.assert_allclose(y.values, x, atol=0)

    def test_cross_entropy_uniform_is_log_v(self):
        for v in (2, 10, 37):
            logits = nm.tensor(np.zeros((3, v)))
            loss = nm.cross_entropy(logits, [0, 1, v - 1])
            np.testing.assert_allclose(loss.item(), math.log(v), rtol=1e-12)

    def test_layer_norm_standardizes(self):
        rng = np.random.default_rng(3)
        d = 16
        x = rand(rng, 5, d) * 4 + 2
        y = nm.layer_norm(nm.tensor(x), nm.tensor(np.ones(d)), nm.tensor(np.zeros(d)))
        np.testing.assert_allclose(y.values.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(y.values.var(axis=-1), 1.0, atol=1e-6)

    def test_dropout_zero_rate_is_identity(self):
        x = nm.tensor([[1.0, 2.0]])
        assert nm.dropout(x, 0.0, np.random.default_rng(0)) is x

    def test_dropout_scales_kept_values(self):
        rng = np.random.default_rng(4)
        x = nm.tensor(np.ones((100, 100)))
        y = nm.dropout(x, 0.25, rng).values
        kept = y != 0.0
        np.testing.assert_allclose(y[kept], 1.0 / 0.75)
        assert 0.70 < kept.mean() < 0.80


class TestShapeErrors:
    def test_matmul_mismatch_names_shapes(self):
        with pytest.raises(nm.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
            nm.matmul(nm.tensor(np.zeros((2, 3))), nm.tensor(np.zeros((2, 3))))

    def test_add_mismatch(self):
        with pytest.raises(nm.ShapeError, match="add"):
            nm.add(nm.tensor(np.zeros((2, 3))), nm.tensor(np.zeros((3, 2))))

    def test_backward_rejects_non_scalar(self):
        with pytest.raises(nm.ShapeError, match="scalar"):
            nm.backward(nm.tensor(np.zeros(3)))


class TestBackwardClosedForms:
    def test_square_via_matmul(self):
        # d/dx (x.x) at x=3 is 6
        x = nm.parameter(np.array([[3.0]]), "x")
        nm.backward(nm.reshape(nm.matmul(x, x), ()))
        np.testing.assert_allclose(x.grad, [[6.0]], atol=0)

    def test_softmax_cross_entropy_gradient(self):
        rng = np.random.default_rng(5)
        logits = nm.parameter(rand(rng, 1, 8), "logits")
        loss = nm.cross_entropy(logits, [3])
        nm.backward(loss)
        probs = nm.softmax(nm.tensor(logits.values)).values
        onehot = np.zeros((1, 8))
        onehot[0, 3] = 1.0
        np.testing.assert_allclose(logits.grad, probs - onehot, atol=1e-12)

    def test_shared_node_accumulates(self):
        x = nm.parameter(np.array([[2.0]]), "x")
        y = nm.add(x, x)
        loss = nm.reshape(nm.matmul(y, y), ())
        nm.backward(loss)
        # loss = 4x^2, so d/dx = 8x = 16
        np.testing.assert_allclose(x.grad, [[16.0]], atol=0)

    def test_gather_gradient_lands_only_on_gathered_rows(self):
        rng = np.random.default_rng(6)
        table = nm.parameter(rand(rng, 10, 4), "table")
        out = nm.gather(table, [2, 7, 2])
        loss = nm.cross_entropy(out, [0, 1, 2])
        nm.backward(loss)
        touched = {2, 7}
        for row in range(10):
            if row in touched:
                assert np.any(table.grad[row] != 0.0)
            else:
                np.testing.assert_array_equal(table.grad[row], 0.0)

    def test_grad_accumulates_across_backward_calls(self):
        x = nm.parameter(np.array([[1.0]]), "x")
        for _ in range(3):
            nm.backward(nm.reshape(nm.matmul(x, x), ()))
        np.testing.assert_allclose(x.grad, [[6.0]], atol=0)
        nm.zero_grad({"x": x})
        assert x.grad is None


class TestPrimitiveGradChecks:
    """Every primitive's backward against central differences, seeded shapes."""

    def test_matmul(self):
        rng = np.random.default_rng(10)
        a = nm.parameter(rand(rng, 3, 4), "a")
        b = nm.parameter(rand(rng, 4, 2), "b")
        w = nm.tensor(rand(rng, 3, 2))
        check_op(lambda: _frob(nm.matmul(a, b), w), {"a": a, "b": b})

    def test_matmul_batched(self):
        rng = np.random.default_rng(11)
        a = nm.parameter(rand(rng, 2, 3, 4), "a")
        b = nm.parameter(rand(rng, 2, 4, 3), "b")
        w = nm.tensor(rand(rng, 2, 3, 3))
        check_op(lambda: _frob(nm.matmul(a, b), w), {"a": a, "b": b})

    def test_add_same_shape(self):
        rng = np.random.default_rng(12)
        a = nm.parameter(rand(rng, 3, 5), "a")
        b = nm.parameter(rand(rng, 3, 5), "b")
        w = nm.tensor(rand(rng, 3, 5))
        check_op(lambda: _frob(nm.add(a, b), w), {"a": a, "b": b})

    def test_add_bias(self):
        rng = np.random.default_rng(13)
        a = nm.parameter(rand(rng, 4, 6), "a")
        b = nm.parameter(rand(rng, 6), "bias")
        w = nm.tensor(rand(rng, 4, 6))
        check_op(lambda: _frob(nm.add(a, b), w), {"a": a, "b": b})

    def test_scale(self):
        rng = np.random.default_rng(14)
        x = nm.parameter(rand(rng, 3, 3), "x")
        w = nm.tensor(rand(rng, 3, 3))
        check_op(lambda: _frob(nm.scale(x, -1.7), w), {"x": x})

    def test_softmax(self):
        rng = np.random.default_rng(15)
        x = nm.parameter(rand(rng, 4, 5), "x")
        w = nm.tensor(rand(rng, 4, 5))
        check_op(lambda: _frob(nm.softmax(x), w), {"x": x})

    def test_layer_norm(self):
        rng = np.random.default_rng(16)
        x = nm.parameter(rand(rng, 3, 8), "x")
        g = nm.parameter(1.0 + 0.1 * rand(rng, 8), "g")
        b = nm.parameter(0.1 * rand(rng, 8), "b")
        w = nm.tensor(rand(rng, 3, 8))
        check_op(lambda: _frob(nm.layer_norm(x, g, b), w), {"x": x, "g": g, "b": b}, tol=1e-5)

    def test_gelu(self):
        rng = np.random.default_rng(17)
        x = nm.parameter(rand(rng, 4, 4) * 2, "x")
        w = nm.tensor(rand(rng, 4, 4))
        check_op(lambda: _frob(nm.gelu(x), w), {"x": x})

    def test_tanh(self):
        rng = np.random.default_rng(18)
        x = nm.parameter(rand(rng, 5, 2), "x")
        w = nm.tensor(rand(rng, 5, 2))
        check_op(lambda: _frob(nm.tanh(x), w), {"x": x})

    def test_gather(self):
        rng = np.random.default_rng(19)
        t = nm.parameter(rand(rng, 7, 3), "t")
        w = nm.tensor(rand(rng, 4, 3))
        check_op(lambda: _frob(nm.gather(t, [0, 3, 3, 6]), w), {"t": t})

    def test_cross_entropy(self):
        rng = np.random.default_rng(20)
        x = nm.parameter(rand(rng, 5, 6), "x")
        check_op(lambda: nm.cross_entropy(x, [0, 5, 2, 2, 1]), {"x": x})

    def test_reshape_transpose(self):
        rng = np.random.default_rng(21)
        x = nm.parameter(rand(rng, 2, 3, 4), "x")
        w = nm.tensor(rand(rng, 4, 6))

        def build():
            y = nm.transpose(x, (2, 0, 1))
            return _frob(nm.reshape(y, (4, 6)), w)

        check_op(build, {"x": x})


class TestGradCheckHarness:
    def test_linear_function_is_machine_exact(self):
        rng = np.random.default_rng(30)
        x = nm.parameter(rand(rng, 3, 3), "x")
        w = nm.tensor(rand(rng, 3, 3))
        report = nm.grad_check(lambda: _frob(x, w), {"x": x}, step=1e-5, tolerance=1e-4)
        assert report.passed
        assert report.max_rel_error < 1e-6

    def test_corrupted_backward_is_reported(self):
        x = nm.parameter(np.array([[1.5]]), "x")

        def bad_square(t):
            # wrong rule on purpose: claims d(x^2) = x instead of 2x
            return nm.Tensor(t.values ** 2, parents=(t,), backward_fn=lambda g: (g * t.values * 1.0,))

        report = nm.grad_check(lambda: nm.reshape(bad_square(x), ()), {"x": x})
        assert not report.passed
        assert report.failures and report.failures[0].name == "x"


class TestTensorDump:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(40)
        arrays = {
            "w": rng.standard_normal((5, 3)),
            "b32": rng.standard_normal(7).astype(np.float32),
            "step": np.asarray(42, dtype=np.int64),
        }
        path = tmp_path / "dump.bin"
        nm.save_tensors(path, arrays)
        loaded = nm.load_tensors(path)
        assert set(loaded) == set(arrays)
        for name, arr in arrays.items():
            assert loaded[name].dtype == arr.dtype
            assert loaded[name].shape == arr.shape
            assert loaded[name].tobytes() == arr.tobytes()

    def test_save_is_deterministic(self, tmp_path):
        arrays = {"b": np.arange(4.0), "a": np.ones((2, 2))}
        nm.save_tensors(tmp_path / "one.bin", arrays)
        nm.save_tensors(tmp_path / "two.bin", dict(reversed(arrays.items())))
        assert (tmp_path / "one.bin").read_bytes() == (tmp_path / "two.bin").read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"nope")
        with pytest.raises(ValueError, match="magic"):
            nm.load_tensors(path)


def _frob(t, w):
    """Scalar projection <t, w> so any op output can feed grad checks."""
    flat = nm.reshape(t, (1, -1))
    return nm.reshape(nm.matmul(flat, nm.reshape(w, (-1, 1))), ())
