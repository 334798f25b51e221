"""Forward-path oracles for the tensor engine."""

import math

import numpy as np
import pytest

from mambafuse import ops
from mambafuse.errors import GraphError, IntegrityError, ShapeError
from mambafuse.tensor import Tensor, load_tensor, save_tensor


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal((a @ b).data, b.data)

    def test_hand_product(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal((a @ b).data, [[19.0, 22.0], [43.0, 50.0]])

    def test_dimension_error_names_shapes(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.zeros((4, 2)))
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            a @ b


class TestSoftmax:
    def test_uniform(self):
        out = ops.softmax(Tensor([0.0, 0.0, 0.0, 0.0]), axis=0)
        assert np.allclose(out.data, 0.25)

    def test_shift_invariance(self, rng):
        x = rng.normal(size=(5, 7))
        base = ops.softmax(Tensor(x), axis=1).data
        shifted = ops.softmax(Tensor(x + 13.7), axis=1).data
        assert np.allclose(base, shifted, atol=1e-12)

    def test_closed_form(self):
        out = ops.softmax(Tensor([0.0, math.log(3.0)]), axis=0)
        assert np.allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        for _ in range(20):
            x = rng.normal(scale=50.0, size=(4, 9))
            s = ops.softmax(Tensor(x), axis=1).data
            assert np.all(s > 0)
            assert np.abs(s.sum(axis=1) - 1.0).max() < 1e-6


class TestInterpolate:
    def test_constant_field(self):
        x = Tensor(np.full((1, 1, 1, 1), 3.5))
        for mode in ("nearest", "bilinear"):
            out = ops.interpolate(x, (2, 2), mode=mode)
            assert np.allclose(out.data, 3.5)

    def test_bilinear_reproduces_ramp(self):
        # corner-aligned sampling of a linear ramp is exact
        h, w, h2, w2 = 4, 5, 7, 9
        rows = np.arange(h)[:, None] * np.ones(w)
        x = Tensor(rows[None, None])
        out = ops.interpolate(x, (h2, w2), mode="bilinear").data[0, 0]
        expected = (np.arange(h2) * (h - 1) / (h2 - 1))[:, None] * np.ones(w2)
        assert np.allclose(out, expected, atol=1e-12)

    def test_nearest_round_trip(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        up = ops.interpolate(Tensor(x), (8, 10), mode="nearest").data
        assert np.array_equal(up[:, :, ::2, ::2], x)


class TestShapes:
    def test_reshape_permute_round_trip(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        t = Tensor(x)
        back = t.reshape(6, 20).reshape(2, 3, 4, 5)
        assert np.array_equal(back.data, x)
        perm = t.transpose(2, 0, 3, 1).transpose(1, 3, 0, 2)
        assert np.array_equal(perm.data, x)

    def test_concat_restores_slices(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
        out = ops.concat([Tensor(a), Tensor(b)], axis=1)
        assert np.array_equal(out.data[:, :3], a)
        assert np.array_equal(out.data[:, 3:], b)


class TestBackwardContract:
    def test_quadratic_form(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        (x * x).sum().backward()
        assert np.allclose(x.grad, 2 * x.data)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            (x * x).backward()

    def test_repeated_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        with pytest.raises(GraphError):
            loss.backward()

    def test_unreachable_node_has_no_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = Tensor(np.ones(3), requires_grad=True)
        (x * x).sum().backward()
        assert y.grad is None

    def test_grad_shapes_match_values(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        out = x @ w
        out.sum().backward()
        assert x.grad.shape == x.shape and w.grad.shape == w.shape


class TestFiniteness:
    def test_all_ops_finite_on_finite_input(self, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        t = Tensor(x)
        results = [
            t.exp(), t.sigmoid(), t.relu(), t.softplus(),
            ops.softmax(t, axis=1), ops.log_softmax(t, axis=1),
            t.sum(), t.mean(axis=(2, 3)), t.max(axis=1),
            ops.interpolate(t, (9, 4)), ops.global_avg_pool(t),
        ]
        for r in results:
            assert np.isfinite(r.data).all()


class TestDumpFormat:
    def test_round_trip_both_precisions(self, tmp_path, rng):
        for dtype in (np.float32, np.float64):
            arr = rng.normal(size=(3, 4, 2)).astype(dtype)
            path = tmp_path / f"t_{arr.dtype}.bin"
            save_tensor(arr, path)
            back = load_tensor(path)
            assert back.dtype == arr.dtype
            assert np.array_equal(back, arr)

    def test_scalar_rank_zero(self, tmp_path):
        arr = np.float64(7.25).reshape(())
        save_tensor(np.asarray(arr), tmp_path / "s.bin")
        assert load_tensor(tmp_path / "s.bin") == 7.25

    def test_truncated_payload_detected(self, tmp_path, rng):
        path = tmp_path / "t.bin"
        save_tensor(rng.normal(size=(4, 4)), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(IntegrityError):
            load_tensor(path)

    def test_bad_magic_detected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(IntegrityError):
            load_tensor(path)
