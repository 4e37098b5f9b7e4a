"""Tape engine, differentiable ops, optimizer and tensor file format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morse.autograd import (
    NonFiniteError,
    Parameter,
    Tape,
    Tensor,
    adamw_step,
    grad_check,
    mten,
    ops,
)
from morse.autograd.tensor import active_tape


def _t(rng, *shape, dtype=np.float64):
    return Tensor(rng.standard_normal(shape).astype(dtype), requires_grad=True)


def conv_loop(x, w, b=None):
    """Direct zero-padded cross-correlation."""
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((B, O, H, W))
    for bi in range(B):
        for o in range(O):
            for i in range(H):
                for j in range(W):
                    out[bi, o, i, j] = np.sum(w[o] * xp[bi, :, i : i + k, j : j + k])
    if b is not None:
        out += b[None, :, None, None]
    return out


class TestTape:
    def test_backward_reverse_order_and_accumulation(self):
        x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
        with Tape() as tape:
            y = ops.mul(x, x)
            z = ops.sum(ops.add(y, x))
        tape.backward(z)
        np.testing.assert_allclose(x.grad, 2 * x.data + 1)

    def test_tape_is_cleared_after_backward(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum(ops.square(x))
        tape.backward(loss)
        assert len(tape.nodes) == 0

    def test_no_recording_outside_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        assert active_tape() is None
        y = ops.mul(x, 2.0)
        np.testing.assert_array_equal(y.data, 2.0)

    def test_nested_tapes_restore_outer(self):
        with Tape() as outer:
            with Tape() as inner:
                assert active_tape() is inner
            assert active_tape() is outer
        assert active_tape() is None

    def test_unreached_params_get_zero_grad(self):
        a = Parameter(np.ones(2), "a", np.float64)
        b = Parameter(np.ones(3), "b", np.float64)
        with Tape() as tape:
            loss = ops.sum(a)
        tape.backward(loss, [a, b])
        np.testing.assert_array_equal(b.grad, np.zeros(3))

    def test_non_finite_forward_fails_fast(self):
        x = Tensor(np.array([0.0, 1.0]))
        with pytest.raises(NonFiniteError, match="log"):
            ops.log(x)


class TestElementwise:
    def test_broadcast_grad_shapes(self):
        rng = np.random.default_rng(0)
        a, b = _t(rng, 3, 4), _t(rng, 4)
        r = grad_check(lambda: ops.sum(ops.mul(ops.add(a, b), ops.sub(a, b))), [a, b])
        assert r.passed, r

    def test_div_exp_sin_cos(self):
        rng = np.random.default_rng(1)
        a = _t(rng, 5)
        b = Tensor(rng.uniform(1, 2, 5), requires_grad=True)
        r = grad_check(lambda: ops.sum(ops.div(ops.exp(ops.sin(a)), ops.add(ops.cos(a), b))), [a, b])
        assert r.passed, r

    def test_getitem_and_concat(self):
        rng = np.random.default_rng(2)
        a, b = _t(rng, 3, 5), _t(rng, 2, 5)
        r = grad_check(lambda: ops.sum(ops.square(ops.getitem(ops.concat([a, b], axis=0), (slice(1, 4), [0, 2, 2])))), [a, b])
        assert r.passed, r


class TestSoftmax:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((4, 6)) * 10)
        np.testing.assert_allclose(ops.softmax(x, axis=1).data.sum(axis=1), 1.0, atol=1e-12)

    def test_mask_zeroes_inactive_entries(self):
        x = Tensor(np.array([[1.0, 2.0, 3.0]]))
        s = ops.softmax(x, axis=1, mask=np.array([[True, False, True]])).data
        assert s[0, 1] == 0.0
        np.testing.assert_allclose(s[0, [0, 2]], np.exp([1, 3]) / np.exp([1, 3]).sum())

    def test_grad_with_mask(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            x = _t(rng, 2, 4, 3)
            mask = rng.random((2, 4, 1)) < 0.6
            mask[:, 0] = True
            proj = rng.standard_normal((2, 4, 3))
            r = grad_check(lambda: ops.sum(ops.mul(ops.softmax(x, axis=1, mask=mask), proj)), [x])
            assert r.passed, r

    def test_cross_entropy_uniform_logits(self):
        logits = Tensor(np.zeros((1, 4, 2, 3)))
        labels = np.zeros((1, 2, 3), dtype=np.int64)
        assert ops.cross_entropy(logits, labels).data == pytest.approx(np.log(4))

    def test_cross_entropy_rejects_bad_labels(self):
        with pytest.raises(ValueError):
            ops.cross_entropy(Tensor(np.zeros((1, 3, 2, 2))), np.full((1, 2, 2), 3))


class TestConv2d:
    @pytest.mark.parametrize("C,O,k", [(3, 5, 3), (6, 2, 3), (4, 4, 5), (2, 3, 1)])
    def test_matches_loop(self, C, O, k):
        rng = np.random.default_rng(C * 10 + O)
        x = rng.standard_normal((2, C, 6, 5))
        w = rng.standard_normal((O, C, k, k))
        b = rng.standard_normal(O)
        out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(out, conv_loop(x, w, b), atol=1e-12)

    def test_unbatched_input(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 4, 4))
        w = rng.standard_normal((2, 3, 3, 3))
        out = ops.conv2d(Tensor(x), Tensor(w)).data
        np.testing.assert_allclose(out, conv_loop(x[None], w)[0], atol=1e-12)

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(ValueError, match="axis"):
            ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))

    @pytest.mark.parametrize("C,O", [(2, 5), (5, 2)])
    def test_grad(self, C, O):
        rng = np.random.default_rng(7)
        x, w, b = _t(rng, 2, C, 5, 4), _t(rng, O, C, 3, 3), _t(rng, O)
        proj = rng.standard_normal((2, O, 5, 4))
        r = grad_check(lambda: ops.sum(ops.mul(ops.conv2d(x, w, b), proj)), [x, w, b])
        assert r.passed, r


class TestResampling:
    def test_bilinear_matrix_rows_stochastic(self):
        for n_in, n_out in [(4, 8), (5, 5), (3, 16)]:
            A = ops.bilinear_matrix(n_in, n_out)
            np.testing.assert_allclose(A.sum(axis=1), 1.0)

    def test_upsample_2x_closed_form(self):
        # align_corners=False, scale 2: interior outputs are 3/4, 1/4 blends
        x = np.array([[0.0, 4.0, 8.0]])
        A = ops.bilinear_matrix(3, 6)
        np.testing.assert_allclose(A @ x[0], [0.0, 1.0, 3.0, 5.0, 7.0, 8.0])

    def test_upsample_preserves_constants(self):
        x = Tensor(np.full((1, 2, 4, 4), 3.5))
        np.testing.assert_allclose(ops.bilinear_upsample(x, 16, 12).data, 3.5)

    def test_upsample_rejects_shrink(self):
        with pytest.raises(ValueError, match="smaller"):
            ops.bilinear_upsample(Tensor(np.zeros((1, 1, 4, 4))), 2, 4)

    def test_point_sample_at_pixel_centres(self):
        rng = np.random.default_rng(0)
        f = rng.standard_normal((3, 5, 6))
        pts = np.array([[0, 0], [5, 4], [2, 3]])
        out = ops.point_sample(Tensor(f), pts).data
        np.testing.assert_allclose(out, f[:, pts[:, 1], pts[:, 0]])

    def test_point_sample_four_neighbour_blend(self):
        rng = np.random.default_rng(1)
        f = rng.standard_normal((2, 4, 4))
        x, y = 1.25, 2.5
        expect = (
            f[:, 2, 1] * 0.75 * 0.5 + f[:, 2, 2] * 0.25 * 0.5 + f[:, 3, 1] * 0.75 * 0.5 + f[:, 3, 2] * 0.25 * 0.5
        )
        np.testing.assert_allclose(ops.point_sample(Tensor(f), np.array([[x, y]])).data[:, 0], expect)

    def test_point_sample_out_of_range_names_point(self):
        with pytest.raises(IndexError, match="point 1"):
            ops.point_sample(Tensor(np.zeros((1, 4, 4))), np.array([[0, 0], [4.5, 0]]))

    def test_grads(self):
        rng = np.random.default_rng(2)
        x = _t(rng, 1, 2, 3, 4)
        up_proj = rng.standard_normal((1, 2, 6, 8))
        r = grad_check(lambda: ops.sum(ops.mul(ops.bilinear_upsample(x, 6, 8), up_proj)), [x])
        assert r.passed, r
        f = _t(rng, 3, 5, 5)
        pts = rng.uniform(0, 4, (7, 2))
        proj = rng.standard_normal((3, 7))
        r = grad_check(lambda: ops.sum(ops.mul(ops.point_sample(f, pts), proj)), [f])
        assert r.passed, r


class TestAdamW:
    def test_single_step_matches_reference(self):
        p = Parameter(np.array([1.0, -2.0]), "p", np.float64)
        p.grad = np.array([0.5, 0.1])
        lr, wd, b1, b2, eps = 0.1, 0.01, 0.9, 0.999, 1e-8
        adamw_step([p], lr, betas=(b1, b2), eps=eps, weight_decay=wd)
        m = (1 - b1) * np.array([0.5, 0.1]) / (1 - b1)
        v = (1 - b2) * np.array([0.5, 0.1]) ** 2 / (1 - b2)
        expect = np.array([1.0, -2.0]) * (1 - lr * wd) - lr * m / (np.sqrt(v) + eps)
        np.testing.assert_allclose(p.data, expect)
        assert p.grad is None

    def test_missing_grad_raises(self):
        p = Parameter(np.ones(2), "p", np.float64)
        with pytest.raises(ValueError, match="p"):
            adamw_step([p], 0.1)


class TestMten:
    @given(
        shape=st.lists(st.integers(0, 4), min_size=0, max_size=4),
        dtype=st.sampled_from([np.float32, np.float64]),
    )
    @settings(max_examples=40, deadline=None)
    def test_round_trip(self, shape, dtype):
        rng = np.random.default_rng(len(shape))
        arr = rng.standard_normal(shape).astype(dtype)
        back = mten.from_bytes(mten.to_bytes(arr))
        assert back.dtype == arr.dtype and back.shape == arr.shape
        np.testing.assert_array_equal(back, arr)

    def test_header_layout(self):
        buf = mten.to_bytes(np.zeros((2, 3), np.float32))
        assert buf[:4] == b"MTEN" and buf[4] == 0 and buf[5] == 2
        assert int.from_bytes(buf[6:14], "little") == 2

    def test_bad_magic_names_offset(self):
        with pytest.raises(ValueError, match="offset 0"):
            mten.from_bytes(b"XXXX" + bytes(10))

    def test_truncated_payload(self):
        buf = mten.to_bytes(np.ones(4))
        with pytest.raises(ValueError, match="offset"):
            mten.from_bytes(buf[:-3])
