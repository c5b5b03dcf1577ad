"""Gradient, optimizer, and checkpoint tests for the autodiff core."""

import numpy as np
import pytest

from dewave import autodiff as ad
from dewave.autodiff import (
    ParamSet,
    Tensor,
    grad_check,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)
from dewave.errors import DataError, ShapeError, StateError

RNG = np.random.default_rng(1234)


def _proj(*shape):
    return Tensor(RNG.normal(size=shape))


class TestPrimitiveGradients:
    """Every primitive against central finite differences at eps=1e-5."""

    def check(self, f, ps, tol=1e-4):
        err = grad_check(f, ps, eps=1e-5)
        assert err < tol, f"max relative gradient error {err}"

    def test_quadratic_is_nearly_exact(self):
        ps = ParamSet()
        x = ps.add("x", RNG.normal(size=(4, 5)))
        ps.zero_grads()
        out = ad.sum_(ad.mul(x, x))
        out.backward()
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-12)
        err = grad_check(lambda: ad.sum_(ad.mul(x, x)), ps, eps=1e-5)
        assert err < 1e-8

    def test_add_broadcast(self):
        ps = ParamSet()
        a = ps.add("a", RNG.normal(size=(4, 5)))
        b = ps.add("b", RNG.normal(size=(5,)))
        p = _proj(4, 5)
        self.check(lambda: ad.sum_(ad.mul(ad.add(a, b), p)), ps)

    def test_sub_and_neg(self):
        ps = ParamSet()
        a = ps.add("a", RNG.normal(size=(3, 3)))
        b = ps.add("b", RNG.normal(size=(3, 3)))
        p = _proj(3, 3)
        self.check(lambda: ad.sum_(ad.mul(ad.sub(a, ad.scale(b, -1.0)), p)), ps)

    def test_mul_broadcast(self):
        ps = ParamSet()
        a = ps.add("a", RNG.normal(size=(3, 4)))
        b = ps.add("b", RNG.normal(size=(3, 1)))
        p = _proj(3, 4)
        self.check(lambda: ad.sum_(ad.mul(ad.mul(a, b), p)), ps)

    def test_matmul(self):
        ps = ParamSet()
        a = ps.add("a", RNG.normal(size=(3, 4)))
        b = ps.add("b", RNG.normal(size=(4, 2)))
        p = _proj(3, 2)
        self.check(lambda: ad.sum_(ad.mul(ad.matmul(a, b), p)), ps)

    def test_transpose_reshape(self):
        ps = ParamSet()
        a = ps.add("a", RNG.normal(size=(4, 5)))
        p1, p2 = _proj(5, 4), _proj(20)
        self.check(lambda: ad.sum_(ad.mul(ad.transpose(a), p1)), ps)
        self.check(lambda: ad.sum_(ad.mul(ad.reshape(a, (20,)), p2)), ps)

    def test_concat_slice(self):
        ps = ParamSet()
        a = ps.add("a", RNG.normal(size=(3, 4)))
        b = ps.add("b", RNG.normal(size=(2, 4)))
        p = _proj(5, 2)
        key = (slice(0, 5), slice(1, 3))
        self.check(lambda: ad.sum_(ad.mul(ad.slice_(ad.concat([a, b], axis=0), key), p)), ps)

    def test_relu_and_gelu(self):
        ps = ParamSet()
        # keep relu inputs away from the kink
        a = ps.add("a", RNG.normal(size=(4, 4)) + np.sign(RNG.normal(size=(4, 4))) * 0.3)
        b = ps.add("b", RNG.normal(size=(4, 4)))
        p = _proj(4, 4)
        self.check(lambda: ad.sum_(ad.mul(ad.relu(a), p)), ps)
        self.check(lambda: ad.sum_(ad.mul(ad.gelu(b), p)), ps)

    def test_softmax(self):
        ps = ParamSet()
        a = ps.add("a", RNG.normal(size=(3, 5)))
        p = _proj(3, 5)
        self.check(lambda: ad.sum_(ad.mul(ad.softmax(a), p)), ps)

    def test_layer_norm(self):
        ps = ParamSet()
        a = ps.add("a", RNG.normal(size=(3, 6)))
        g = ps.add("g", 1.0 + 0.1 * RNG.normal(size=6))
        b = ps.add("b", RNG.normal(size=6))
        p = _proj(3, 6)
        self.check(lambda: ad.sum_(ad.mul(ad.layer_norm(a, g, b), p)), ps)

    def test_embedding_lookup(self):
        ps = ParamSet()
        t = ps.add("t", RNG.normal(size=(7, 4)))
        ids = np.array([1, 3, 3, 0, 6])
        p = _proj(5, 4)
        self.check(lambda: ad.sum_(ad.mul(ad.embedding_lookup(t, ids), p)), ps)

    def test_mean_squared_error(self):
        ps = ParamSet()
        a = ps.add("a", RNG.normal(size=(3, 4)))
        b = ps.add("b", RNG.normal(size=(3, 4)))
        self.check(lambda: ad.mean_squared_error(a, b), ps, tol=1e-7)

    def test_cross_entropy(self):
        ps = ParamSet()
        logits = ps.add("logits", RNG.normal(size=(6, 5)))
        targets = np.array([0, 2, 4, 1, 1, 3])
        weights = np.array([1.0, 1.0, 0.0, 1.0, 2.0, 1.0])
        self.check(lambda: ad.cross_entropy(logits, targets, weights), ps, tol=1e-6)

    def test_mean_sum_axes(self):
        ps = ParamSet()
        a = ps.add("a", RNG.normal(size=(4, 3)))
        p0, p1 = _proj(3), _proj(4)
        self.check(lambda: ad.sum_(ad.mul(ad.mean(a, axis=0), p0)), ps)
        self.check(lambda: ad.sum_(ad.mul(ad.sum_(a, axis=1), p1)), ps)
        self.check(lambda: ad.mean(a), ps, tol=1e-7)

    @pytest.mark.parametrize("stride", [1, 2, 3])
    def test_conv1d(self, stride):
        ps = ParamSet()
        x = ps.add("x", RNG.normal(size=(3, 17)))
        w = ps.add("w", RNG.normal(size=(4, 3, 5)))
        b = ps.add("b", RNG.normal(size=(4,)))
        l_out = (17 - 5) // stride + 1
        p = _proj(4, l_out)
        self.check(lambda: ad.sum_(ad.mul(ad.conv1d(x, w, b, stride=stride), p)), ps)

    @pytest.mark.parametrize("stride", [1, 2, 3])
    def test_transpose_conv1d(self, stride):
        ps = ParamSet()
        x = ps.add("x", RNG.normal(size=(3, 6)))
        w = ps.add("w", RNG.normal(size=(3, 4, 3)))
        b = ps.add("b", RNG.normal(size=(4,)))
        l_out = (6 - 1) * stride + 3
        p = _proj(4, l_out)
        self.check(lambda: ad.sum_(ad.mul(ad.transpose_conv1d(x, w, b, stride=stride), p)), ps)


class TestStopGradient:
    def test_forward_identity_backward_zero(self):
        ps = ParamSet()
        x = ps.add("x", RNG.normal(size=(3, 3)))
        sg = ad.stop_gradient(x)
        np.testing.assert_array_equal(sg.data, x.data)
        out = ad.sum_(sg)
        out.backward()
        assert x.grad is None

    def test_blocks_only_its_branch(self):
        ps = ParamSet()
        x = ps.add("x", RNG.normal(size=(4,)))
        out = ad.sum_(ad.add(ad.stop_gradient(x), x))
        out.backward()
        np.testing.assert_allclose(x.grad, np.ones(4))

    def test_grad_check_on_unblocked_parameters(self):
        """The loss has a stop-gradient branch; checking only the parameters
        that feed the live branch must still pass."""
        ps = ParamSet()
        x = ps.add("x", RNG.normal(size=(3, 3)))
        frozen = Tensor(RNG.normal(size=(3, 3)))
        p = _proj(3, 3)

        def f():
            return ad.sum_(ad.mul(ad.add(x, ad.stop_gradient(ad.mul(frozen, frozen))), p))

        assert grad_check(f, ps, eps=1e-5) < 1e-6


class TestAnalyticValues:
    def test_softmax_of_zeros_is_uniform(self):
        out = ad.softmax(Tensor(np.zeros((1, 3))))
        np.testing.assert_allclose(out.data, np.full((1, 3), 1 / 3))

    def test_cross_entropy_uniform_logits_is_log_v(self):
        for v in (5, 50, 313):
            logits = Tensor(np.zeros((4, v)))
            out = ad.cross_entropy(logits, np.zeros(4, dtype=int))
            assert abs(float(out.data) - np.log(v)) < 1e-12

    def test_cross_entropy_high_margin_approaches_zero(self):
        logits = np.full((3, 7), -1e4)
        targets = np.array([1, 5, 2])
        logits[np.arange(3), targets] = 1e4
        out = ad.cross_entropy(Tensor(logits), targets)
        assert float(out.data) < 1e-9


class TestGraphMechanics:
    def test_backward_accumulates_additively(self):
        ps = ParamSet()
        x = ps.add("x", np.array([1.0, 2.0]))
        ad.sum_(ad.mul(x, x)).backward()
        first = x.grad.copy()
        ad.sum_(ad.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, 2 * first)

    def test_backward_needs_scalar(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ShapeError):
            ad.add(x, x).backward()

    def test_shared_parent_counted_twice(self):
        ps = ParamSet()
        x = ps.add("x", np.array([3.0]))
        ad.sum_(ad.add(x, x)).backward()
        np.testing.assert_allclose(x.grad, [2.0])

    def test_shape_errors_name_the_op(self):
        with pytest.raises(ShapeError, match="matmul"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        with pytest.raises(ShapeError, match="conv1d"):
            ad.conv1d(Tensor(np.zeros((2, 5))), Tensor(np.zeros((4, 3, 2))))


class TestConv1dOracle:
    """conv1d against a naive sliding-window implementation."""

    @staticmethod
    def naive_conv(x, w, b, stride):
        c_out, c_in, k = w.shape
        l_out = (x.shape[1] - k) // stride + 1
        out = np.zeros((c_out, l_out))
        for o in range(c_out):
            for t in range(l_out):
                window = x[:, t * stride:t * stride + k]
                out[o, t] = (window * w[o]).sum() + b[o]
        return out

    def test_lengths_and_values_match(self):
        rng = np.random.default_rng(7)
        for k in range(1, 6):
            for s in range(1, k + 1):
                length = int(rng.integers(k, k + 17))
                x = rng.normal(size=(2, length))
                w = rng.normal(size=(3, 2, k))
                b = rng.normal(size=3)
                got = ad.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=s).data
                want = self.naive_conv(x, w, b, s)
                assert got.shape[1] == (length - k) // s + 1
                np.testing.assert_allclose(got, want, atol=1e-12)

    def test_transpose_conv_matches_scatter_oracle(self):
        rng = np.random.default_rng(8)
        for k in range(1, 4):
            for s in range(1, 4):
                length = int(rng.integers(2, 9))
                x = rng.normal(size=(2, length))
                w = rng.normal(size=(2, 3, k))
                b = rng.normal(size=3)
                want = np.zeros((3, (length - 1) * s + k))
                for c in range(2):
                    for t in range(length):
                        for j in range(k):
                            want[:, t * s + j] += w[c, :, j] * x[c, t]
                want += b[:, None]
                got = ad.transpose_conv1d(Tensor(x), Tensor(w), Tensor(b), stride=s).data
                np.testing.assert_allclose(got, want, atol=1e-12)


class TestSGD:
    def test_update_rule(self):
        ps = ParamSet()
        p = ps.add("p", np.array([1.0]))
        p.grad = np.array([2.0])
        sgd_step(ps, lr=0.1)
        np.testing.assert_allclose(p.data, [0.8])
        assert p.grad is None

    def test_zero_lr_is_identity(self):
        ps = ParamSet()
        p = ps.add("p", np.array([1.5, -2.0]))
        p.grad = np.array([3.0, 4.0])
        sgd_step(ps, lr=0.0)
        np.testing.assert_array_equal(p.data, [1.5, -2.0])

    def test_missing_gradient_is_state_error(self):
        ps = ParamSet()
        ps.add("p", np.array([1.0]))
        with pytest.raises(StateError, match="p"):
            sgd_step(ps, lr=0.1)

    def test_seeded_trajectories_are_identical(self):
        def run():
            rng = np.random.default_rng(99)
            ps = ParamSet()
            w = ps.add("w", rng.normal(size=(3, 3)))
            target = Tensor(rng.normal(size=(3, 3)))
            history = []
            for _ in range(5):
                ad.mean_squared_error(w, target).backward()
                sgd_step(ps, lr=0.05)
                history.append(w.data.copy())
            return history

        for a, b in zip(run(), run()):
            np.testing.assert_array_equal(a, b)


class TestParamSet:
    def test_insertion_order_and_subset(self):
        ps = ParamSet()
        ps.add("b.x", np.zeros(1))
        ps.add("a.y", np.zeros(1))
        ps.add("a.z", np.zeros(1))
        assert ps.names() == ["b.x", "a.y", "a.z"]
        assert ps.subset(["a"]).names() == ["a.y", "a.z"]

    def test_duplicate_name_rejected(self):
        ps = ParamSet()
        ps.add("x", np.zeros(1))
        with pytest.raises(StateError):
            ps.add("x", np.zeros(1))

    def test_load_state_shape_mismatch(self):
        ps = ParamSet()
        ps.add("x", np.zeros((2, 2)))
        with pytest.raises(StateError):
            ps.load_state({"x": np.zeros(3)})


class TestCheckpointIO:
    def test_round_trip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        tensors = {
            "alpha": rng.normal(size=(3, 4)).astype(np.float32).astype(np.float64),
            "beta.gamma": rng.normal(size=(7,)).astype(np.float32).astype(np.float64),
            "scalar": np.float64(4.0),
        }
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(p1, tensors)
        loaded = load_checkpoint(p1)
        save_checkpoint(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()
        assert list(loaded) == list(tensors)
        for name in tensors:
            np.testing.assert_array_equal(
                np.asarray(loaded[name], dtype=np.float64),
                np.asarray(tensors[name], dtype=np.float64))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\0" * 16)
        with pytest.raises(DataError, match="magic"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, {"a": np.zeros((4, 4))})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DataError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_garbage(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, {"a": np.zeros(2)})
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(DataError, match="trailing"):
            load_checkpoint(path)


class TestGradCheckFacility:
    def test_reports_a_wrong_gradient(self):
        """A deliberately broken backward must be caught."""
        ps = ParamSet()
        x = ps.add("x", np.array([1.0, 2.0, 3.0]))

        def f():
            out = ad.sum_(ad.mul(x, x))
            broken = Tensor(out.data)
            broken._parents = (x,)
            broken._backward = lambda g: (np.full(3, g * 1.5),)
            return broken

        assert grad_check(f, ps, eps=1e-5) > 0.1

    def test_non_finite_objective_raises(self):
        from dewave.errors import NumericError
        ps = ParamSet()
        x = ps.add("x", np.array([1.0]))

        def f():
            return Tensor(np.asarray(np.inf))

        with pytest.raises(NumericError):
            grad_check(f, ps)
