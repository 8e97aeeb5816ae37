import numpy as np
import pytest

from sfdet import autodiff as ad
from sfdet.autodiff import Tape, Tensor, finite_difference_grad
from sfdet.geometry import (
    Box,
    boxes_to_array,
    clip_boxes,
    corners,
    giou,
    giou_matrix,
    giou_pairs,
    iou,
    iou_matrix,
    roi_align,
)
from tests.test_autodiff import grads_close


def random_boxes(rng, n):
    wh = rng.uniform(0.05, 0.5, size=(n, 2))
    cxy = rng.uniform(0.0, 1.0, size=(n, 2))
    return np.concatenate([cxy, wh], axis=1)


class TestBox:
    def test_negative_size_rejected(self):
        with pytest.raises(ValueError):
            Box(0.5, 0.5, -0.1, 0.2)

    def test_corner_conversion_preserves_area(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            cx, cy = rng.uniform(0, 1, 2)
            w, h = rng.uniform(0, 0.8, 2)
            b = Box(cx, cy, w, h)
            x1, y1, x2, y2 = b.corners()
            assert abs((x2 - x1) * (y2 - y1) - b.area()) <= 1e-12


class TestIoU:
    def test_identical_boxes(self):
        b = Box(0.4, 0.6, 0.2, 0.3)
        assert iou(b, b) == 1.0

    def test_disjoint_boxes(self):
        assert iou(Box(0.2, 0.2, 0.1, 0.1), Box(0.8, 0.8, 0.1, 0.1)) == 0.0

    def test_half_shifted_squares(self):
        a = Box(0.3, 0.3, 0.4, 0.4)
        b = Box(0.5, 0.3, 0.4, 0.4)  # shifted right by half a side
        assert abs(iou(a, b) - 1.0 / 3.0) < 1e-12

    def test_zero_union_is_zero(self):
        z = Box(0.5, 0.5, 0.0, 0.0)
        assert iou(z, z) == 0.0

    def test_symmetry_exact(self):
        rng = np.random.default_rng(1)
        a = random_boxes(rng, 40)
        b = random_boxes(rng, 40)
        np.testing.assert_array_equal(iou_matrix(a, b), iou_matrix(b, a).T)
        np.testing.assert_array_equal(giou_matrix(a, b), giou_matrix(b, a).T)

    def test_self_iou_is_one(self):
        rng = np.random.default_rng(2)
        a = random_boxes(rng, 40)
        np.testing.assert_array_equal(np.diag(iou_matrix(a, a)), 1.0)


class TestGIoU:
    def test_identical_boxes(self):
        b = Box(0.4, 0.6, 0.2, 0.3)
        assert giou(b, b) == 1.0

    def test_abutting_halves_share_hull(self):
        left = Box(0.25, 0.5, 0.5, 1.0)
        right = Box(0.75, 0.5, 0.5, 1.0)
        assert giou(left, right) == 0.0

    def test_far_separated_tiny_boxes_approach_minus_one(self):
        a = Box(0.05, 0.05, 0.01, 0.01)
        b = Box(0.95, 0.95, 0.01, 0.01)
        g = giou(a, b)
        assert -1.0 <= g < -0.99

    def test_range(self):
        rng = np.random.default_rng(3)
        g = giou_matrix(random_boxes(rng, 30), random_boxes(rng, 30))
        assert np.all(g >= -1.0) and np.all(g <= 1.0)

    def test_tensor_path_matches_matrix_path(self):
        rng = np.random.default_rng(4)
        pred = random_boxes(rng, 25)
        tgt = random_boxes(rng, 25)
        got = giou_pairs(Tensor(pred), tgt).data.reshape(-1)
        want = np.diag(giou_matrix(pred, tgt))
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_tensor_path_gradient(self):
        rng = np.random.default_rng(5)
        pred = random_boxes(rng, 6)
        tgt = random_boxes(rng, 6)

        def f(t):
            return ad.sum_(giou_pairs(t, tgt))

        p = Tensor(pred, requires_grad=True)
        with Tape() as tape:
            loss = f(p)
        tape.backward(loss)
        fd = finite_difference_grad(f, Tensor(pred))
        assert grads_close(p.grad, fd)


def bilinear_at(data, y, x):
    """Scalar bilinear lookup, clamped to the map extent."""
    h, w = data.shape
    y = min(max(y, 0.0), h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    wy, wx = y - y0, x - x0
    return (data[y0, x0] * (1 - wy) * (1 - wx) + data[y0, x1] * (1 - wy) * wx
            + data[y1, x0] * wy * (1 - wx) + data[y1, x1] * wy * wx)


def roi_align_oracle(data, boxes, out_h, out_w, spb):
    """Straightforward loop sampler used as the independent reference."""
    h, w = data.shape
    boxes = clip_boxes(boxes_to_array(boxes))
    out = np.zeros((boxes.shape[0], out_h, out_w))
    for j, (cx, cy, bw, bh) in enumerate(boxes):
        x1, y1, x2, y2 = cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2
        for by in range(out_h):
            for bx in range(out_w):
                acc = 0.0
                for sy in range(spb):
                    for sx in range(spb):
                        u = x1 + (x2 - x1) * (bx + (sx + 0.5) / spb) / out_w
                        v = y1 + (y2 - y1) * (by + (sy + 0.5) / spb) / out_h
                        acc += bilinear_at(data, v * (h - 1), u * (w - 1))
                out[j, by, bx] = acc / (spb * spb)
    return out


class TestRoiAlign:
    def test_constant_map_invariance(self):
        rng = np.random.default_rng(6)
        data = np.full((9, 13), 4.25)
        boxes = random_boxes(rng, 12)
        out = roi_align(Tensor(data), boxes, 7, 7, 2)
        assert np.all(np.abs(out.data - 4.25) <= 1e-12)

    def test_two_by_two_center(self):
        data = np.array([[0.0, 1.0], [2.0, 3.0]])
        box = Box(0.5, 0.5, 1.0, 1.0)
        out = roi_align(Tensor(data), [box], 1, 1, 1)
        assert out.data.shape == (1, 1, 1)
        assert abs(out.data[0, 0, 0] - 1.5) < 1e-12

    def test_zero_area_box_samples_center(self):
        data = np.arange(25, dtype=np.float64).reshape(5, 5)
        out = roi_align(Tensor(data), [Box(0.5, 0.5, 0.0, 0.0)], 3, 3, 2)
        np.testing.assert_allclose(out.data, bilinear_at(data, 2.0, 2.0))

    def test_matches_oracle_on_100_random_cases(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            h, w = rng.integers(2, 10, size=2)
            data = rng.normal(size=(h, w))
            boxes = random_boxes(rng, rng.integers(1, 4))
            out_h, out_w = rng.integers(1, 5, size=2)
            spb = int(rng.integers(1, 4))
            got = roi_align(Tensor(data), boxes, out_h, out_w, spb).data
            want = roi_align_oracle(data, boxes, out_h, out_w, spb)
            assert np.max(np.abs(got - want)) <= 1e-9

    def test_out_of_frame_boxes_are_clipped(self):
        data = np.arange(16, dtype=np.float64).reshape(4, 4)
        wild = np.array([[0.5, 0.5, 3.0, 3.0]])
        full = np.array([[0.5, 0.5, 1.0, 1.0]])
        np.testing.assert_allclose(roi_align(Tensor(data), wild, 2, 2, 2).data,
                                   roi_align(Tensor(data), full, 2, 2, 2).data)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        data = rng.normal(size=(6, 6))
        boxes = random_boxes(rng, 3)

        def f(t):
            return ad.sum_(ad.mul(roi_align(t, boxes, 3, 3, 2), 2.0))

        m = Tensor(data, requires_grad=True)
        with Tape() as tape:
            loss = f(m)
        tape.backward(loss)
        fd = finite_difference_grad(f, Tensor(data))
        assert grads_close(m.grad, fd)

    def test_non_2d_map_rejected(self):
        with pytest.raises(ad.ShapeError, match="roi_align"):
            roi_align(Tensor(np.zeros((2, 2, 2))), [Box(0.5, 0.5, 0.5, 0.5)])
