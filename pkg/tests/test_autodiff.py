import os
import numpy as np
import pytest

from twoview import autodiff as ad
from twoview.autodiff import (
    NonScalarLoss,
    NotFinite,
    ParameterStore,
    ShapeMismatch,
    Tensor,
    adam_step,
    finite_difference_check,
    load_checkpoint,
    read_checkpoint_arrays,
    save_checkpoint,
)
from twoview.gradcheck import _op_cases


class TestForwardSemantics:
    def test_relu(self):
        out = ad.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        assert out.data.tolist() == [0.0, 0.0, 2.0]

    def test_softmax_uniform(self):
        out = ad.softmax(Tensor(np.zeros(3)), axis=0)
        assert np.allclose(out.data, np.full(3, 1 / 3))

    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(3, 5))
        out = ad.matmul(Tensor(np.eye(3)), Tensor(A))
        assert np.allclose(out.data, A)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 4))
        a = ad.softmax(ad.tanh(Tensor(x)), axis=1).data
        b = ad.softmax(ad.tanh(Tensor(x)), axis=1).data
        assert np.array_equal(a, b)

    def test_nan_aborts_with_diagnostics(self):
        with pytest.raises(NotFinite) as exc:
            ad.div(Tensor(np.ones(3)), Tensor(np.zeros(3)))
        assert "div" in str(exc.value)

    def test_constant_inputs_build_no_graph(self):
        out = ad.mul(Tensor(np.ones(3)), Tensor(np.ones(3)))
        assert not out.requires_grad and out._parents == ()

    def test_no_grad_suppresses_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            out = ad.tanh(x)
        assert not out.requires_grad


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(2).normal(size=(3, 4)), requires_grad=True)
        ad.backward(ad.reduce_sum(x))
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_detach_blocks_gradient(self):
        x = Tensor(np.random.default_rng(3).normal(size=(3,)), requires_grad=True)
        loss = ad.reduce_sum(ad.detach(x) * np.ones(3)) + 0.0 * ad.reduce_sum(x)
        ad.backward(loss)
        assert np.array_equal(x.grad, np.zeros(3))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(NonScalarLoss):
            ad.backward(ad.relu(x))

    def test_relu_subgradient_zero_at_zero(self):
        x = Tensor(np.array([0.0, 1.0, -1.0]), requires_grad=True)
        ad.backward(ad.reduce_sum(ad.relu(x)))
        assert x.grad.tolist() == [0.0, 1.0, 0.0]

    def test_random_three_layer_graph(self):
        rng = np.random.default_rng(4)
        W1, W2 = rng.normal(size=(5, 6)), rng.normal(size=(6, 2))
        proj = rng.normal(size=(3, 2))

        def f(t):
            h = ad.tanh(ad.matmul(t, W1))
            h = ad.relu(ad.matmul(h, W2) + 0.3)
            return ad.reduce_sum(h * proj)

        err = finite_difference_check(f, rng.normal(size=(3, 5)))
        assert err < 1e-4

    def test_fanout_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = ad.mul(x, x)  # both parents are the same tensor
        ad.backward(ad.reduce_sum(y))
        assert np.allclose(x.grad, [4.0])


class TestFiniteDifferenceCheck:
    def test_quadratic(self):
        err = finite_difference_check(lambda t: ad.reduce_sum(t * t), np.array([3.0]))
        assert err < 1e-9

    def test_tanh(self):
        err = finite_difference_check(lambda t: ad.reduce_sum(ad.tanh(t)), np.array([0.5]))
        assert err < 1e-8

    def test_every_op_ten_seeds(self):
        # the registered-op sweep: all ops, fresh random instances per seed
        for seed in range(10):
            rng = np.random.default_rng(1000 + seed)
            for name, x, fn in _op_cases(rng):
                err = finite_difference_check(fn, x)
                assert err < 1e-4, f"{name} (seed {seed}): {err:.3e}"


class TestAdam:
    def make_store(self):
        store = ParameterStore()
        store.parameter("w", np.array([1.0, -2.0, 3.0]))
        return store

    def test_zero_grad_keeps_parameters(self):
        store = self.make_store()
        before = store["w"].data.copy()
        adam_step(store, lr=0.1, grads={"w": np.zeros(3)})
        assert np.array_equal(store["w"].data, before)
        assert store.step == 1

    def test_first_step_magnitude(self):
        store = self.make_store()
        g = np.array([0.3, -0.7, 1.9])
        before = store["w"].data.copy()
        adam_step(store, lr=1e-2, grads={"w": g})
        delta = store["w"].data - before
        assert np.allclose(np.abs(delta), 1e-2, rtol=1e-6)
        assert np.array_equal(np.sign(delta), -np.sign(g))

    def test_descends_convex_quadratic(self):
        store = ParameterStore()
        store.parameter("x", np.array([5.0]))
        value = lambda: float(store["x"].data[0] ** 2)
        v0 = value()
        for _ in range(2):
            adam_step(store, lr=0.5, grads={"x": 2.0 * store["x"].data})
        assert value() < v0

    def test_shape_mismatch(self):
        store = self.make_store()
        with pytest.raises(ShapeMismatch):
            adam_step(store, grads={"w": np.zeros(4)})

    def test_gradients_from_graph(self):
        store = ParameterStore()
        w = store.parameter("w", np.array([1.0, 2.0]))
        ad.backward(ad.reduce_sum(w * w))
        before = w.data.copy()
        adam_step(store, lr=1e-3)
        assert np.all(np.abs(w.data - before) > 0)


class TestParameterStore:
    def test_duplicate_name_rejected(self):
        store = ParameterStore()
        store.parameter("a", np.zeros(2))
        with pytest.raises(ValueError):
            store.buffer("a", np.zeros(2))

    def test_reserved_prefix_rejected(self):
        store = ParameterStore()
        with pytest.raises(ValueError):
            store.parameter("__adam_m__/x", np.zeros(1))

    def test_zero_grad(self):
        store = ParameterStore()
        w = store.parameter("w", np.ones(2))
        ad.backward(ad.reduce_sum(w))
        assert w.grad is not None
        store.zero_grad()
        assert w.grad is None


class TestCheckpoint:
    def build(self, seed=0):
        rng = np.random.default_rng(seed)
        store = ParameterStore()
        store.parameter("layer.weight", rng.normal(size=(4, 3)))
        store.parameter("layer.bias", rng.normal(size=3))
        store.buffer("layer.running_mean", rng.normal(size=3))
        return store

    def test_round_trip_bit_exact(self, tmp_path):
        store = self.build()
        adam_step(store, grads={"layer.weight": np.ones((4, 3)) * 0.1,
                                "layer.bias": np.ones(3)})
        path = tmp_path / "ckpt.bin"
        save_checkpoint(store, path)
        other = self.build(seed=9)
        load_checkpoint(other, path)
        for name in store.names():
            assert np.array_equal(store[name].data, other[name].data)
        for name in store.trainable_names():
            assert np.array_equal(store._m[name], other._m[name])
            assert np.array_equal(store._v[name], other._v[name])
        assert other.step == store.step == 1

    def test_file_byte_stable(self, tmp_path):
        store = self.build()
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_checkpoint(store, p1)
        save_checkpoint(store, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_raw_read(self, tmp_path):
        store = self.build()
        path = tmp_path / "ckpt.bin"
        save_checkpoint(store, path)
        arrays = read_checkpoint_arrays(path)
        assert np.array_equal(arrays["layer.weight"], store["layer.weight"].data)
        assert "__step__" in arrays

    def test_truncated_file_rejected(self, tmp_path):
        store = self.build()
        path = tmp_path / "ckpt.bin"
        save_checkpoint(store, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(ValueError):
            read_checkpoint_arrays(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"hello world")
        with pytest.raises(ValueError):
            read_checkpoint_arrays(path)

    def test_missing_entry_rejected(self, tmp_path):
        store = self.build()
        path = tmp_path / "ckpt.bin"
        save_checkpoint(store, path)
        other = ParameterStore()
        other.parameter("different", np.zeros(2))
        with pytest.raises(ValueError):
            load_checkpoint(other, path)
