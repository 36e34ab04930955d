import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ehsod import geometry
from ehsod.geometry import Box


def brute_force_nms(boxes, scores, thr):
    """O(n^2) greedy NMS written independently of the library path."""
    n = len(scores)
    idx = list(range(n))
    idx.sort(key=lambda i: (-scores[i], i))
    keep, dead = [], set()
    for i in idx:
        if i in dead:
            continue
        keep.append(i)
        for j in idx:
            if j != i and j not in dead and j not in keep:
                if geometry.iou(Box(*boxes[i]), Box(*boxes[j])) > thr:
                    dead.add(j)
    return keep


def random_boxes(rng, n, size=100.0):
    xy = rng.uniform(0, size, size=(n, 2))
    wh = rng.uniform(2, size / 2, size=(n, 2))
    return np.concatenate([xy, xy + wh], 1)


boxes_st = st.tuples(
    st.floats(-50, 50), st.floats(-50, 50), st.floats(0.5, 60), st.floats(0.5, 60)
).map(lambda t: Box(t[0], t[1], t[0] + t[2], t[1] + t[3]))


class TestIoU:
    def test_identical(self):
        assert geometry.iou(Box(1, 2, 5, 9), Box(1, 2, 5, 9)) == 1.0

    def test_disjoint(self):
        assert geometry.iou(Box(0, 0, 1, 1), Box(2, 2, 3, 3)) == 0.0

    def test_hand_arithmetic(self):
        assert geometry.iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)

    def test_degenerate_box_rejected(self):
        with pytest.raises(geometry.DegenerateBoxError):
            Box(0, 0, 0, 5)

    @given(boxes_st, boxes_st)
    def test_symmetric_and_bounded(self, a, b):
        v = geometry.iou(a, b)
        assert v == pytest.approx(geometry.iou(b, a), abs=1e-12)
        assert 0.0 <= v <= 1.0
        assert geometry.iou(a, a) == pytest.approx(1.0)

    def test_batched_matches_scalar(self):
        rng = np.random.default_rng(0)
        a, b = random_boxes(rng, 7), random_boxes(rng, 5)
        m = geometry.box_iou(torch.tensor(a), torch.tensor(b)).numpy()
        for i in range(7):
            for j in range(5):
                assert m[i, j] == pytest.approx(geometry.iou(Box(*a[i]), Box(*b[j])), abs=1e-12)


class TestCenterForm:
    def test_round_trip(self):
        b = Box(2, 3, 10, 7)
        assert b.to_center() == (6, 5, 8, 4)
        assert Box.from_center(*b.to_center()) == b


class TestAnchors:
    def test_count_single_level(self):
        boxes, levels = geometry.generate_anchors([(2, 2)], [4], [16], ratios=(1.0,))
        assert boxes.shape == (4, 4)
        assert levels.tolist() == [0, 0, 0, 0]

    def test_count_two_levels(self):
        boxes, levels = geometry.generate_anchors([(2, 2), (1, 1)], [4, 8], [16, 32])
        assert boxes.shape[0] == 4 * 3 + 1 * 3
        assert levels.tolist() == [0] * 12 + [1] * 3

    def test_no_shapes_rejected(self):
        with pytest.raises(ValueError):
            geometry.generate_anchors([(2, 2)], [4], [16], ratios=())

    def test_empty_pyramid_rejected(self):
        with pytest.raises(ValueError):
            geometry.generate_anchors([], [], [])

    def test_ordering_row_major_anchor_minor(self):
        boxes, _ = geometry.generate_anchors([(2, 3)], [8], [8], ratios=(0.5, 2.0))
        centers = (boxes[:, :2] + boxes[:, 2:]) / 2
        # anchor-minor: consecutive pairs share a centre
        assert torch.equal(centers[0], centers[1])
        # row-major: second cell is one stride to the right
        assert centers[2].tolist() == [12.0, 4.0]
        assert centers[6].tolist() == [4.0, 12.0]
        wh = boxes[:2, 2:] - boxes[:2, :2]
        assert wh[0, 1] / wh[0, 0] == pytest.approx(0.5)
        assert (wh[0, 0] * wh[0, 1]).item() == pytest.approx(64.0)


class TestNMS:
    def test_single(self):
        assert geometry.nms(torch.tensor([[0., 0, 1, 1]]), torch.tensor([0.3]), 0.5) == [0]

    def test_pair_suppressed(self):
        boxes = torch.tensor([[0., 0, 10, 10], [0, 0, 10, 8]])  # IoU 0.8
        assert geometry.nms(boxes, torch.tensor([0.2, 0.9]), 0.5) == [1]
        assert geometry.nms(boxes, torch.tensor([0.9, 0.2]), 0.5) == [0]

    def test_tie_lower_index_first(self):
        boxes = torch.tensor([[0., 0, 10, 10], [0, 0, 10, 10], [50, 50, 60, 60]])
        assert geometry.nms(boxes, torch.tensor([0.5, 0.5, 0.5]), 0.5) == [0, 2]

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            geometry.nms(torch.tensor([[0., 0, 1, 1]]), torch.tensor([float("nan")]), 0.5)

    @pytest.mark.parametrize("seed", range(30))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 51))
        boxes = random_boxes(rng, n)
        scores = rng.uniform(size=n)
        if seed % 3 == 0:
            scores = np.round(scores, 1)  # force ties
        thr = float(rng.uniform(0.1, 0.9))
        got = geometry.nms(torch.tensor(boxes), torch.tensor(scores), thr)
        assert got == brute_force_nms(boxes, scores, thr)

    def test_batched_nms_is_class_wise(self):
        boxes = torch.tensor([[0., 0, 10, 10], [0, 0, 10, 10]])
        keep = geometry.batched_nms(boxes, torch.tensor([0.9, 0.8]), torch.tensor([1, 2]), 0.5)
        assert keep == [0, 1]


class TestDeltas:
    def test_self_reference_is_zero(self):
        b = torch.tensor([[3., 4, 20, 30]], dtype=torch.float64)
        assert torch.equal(geometry.encode_deltas(b, b), torch.zeros(1, 4, dtype=torch.float64))

    def test_zero_deltas_identity(self):
        a = torch.tensor([[3., 4, 20, 30]], dtype=torch.float64)
        out = geometry.decode_deltas(torch.zeros(1, 4, dtype=torch.float64), a)
        assert torch.allclose(out, a, atol=1e-12)

    @pytest.mark.parametrize("stds", [(1, 1, 1, 1), (0.1, 0.1, 0.2, 0.2)])
    def test_round_trip(self, stds):
        rng = np.random.default_rng(1)
        b = torch.tensor(random_boxes(rng, 200))
        a = torch.tensor(random_boxes(rng, 200))
        back = geometry.decode_deltas(geometry.encode_deltas(b, a, stds), a, stds)
        assert (back - b).abs().max().item() < 1e-9

    def test_min_size_and_clip(self):
        a = torch.tensor([[10., 10, 20, 20]])
        out = geometry.decode_deltas(torch.tensor([[0., 0, -20, -20]]), a)
        wh = out[:, 2:] - out[:, :2]
        assert (wh >= geometry.MIN_BOX_SIZE - 1e-6).all()
        out = geometry.decode_deltas(torch.tensor([[5., 5, 2, 2]]), a, image_size=(32, 32))
        assert out.min() >= 0 and out[0, 2] <= 32 and out[0, 3] <= 32
        assert (out[:, 2:] - out[:, :2] >= geometry.MIN_BOX_SIZE - 1e-6).all()

    def test_degenerate_reference(self):
        with pytest.raises(geometry.DegenerateBoxError):
            geometry.encode_deltas(torch.tensor([[0., 0, 1, 1]]), torch.tensor([[0., 0, 0, 1]]))


class TestAssign:
    gt = torch.tensor([[0., 0, 10, 10], [20, 20, 40, 40]])
    labels = torch.tensor([2, 1])

    def test_exact_match_positive(self):
        a = geometry.assign(self.gt[1:], self.gt, self.labels, 0.5)
        assert a.labels.tolist() == [1] and a.matched_gt.tolist() == [1]
        assert a.iou.item() == pytest.approx(1.0)

    def test_empty_gt(self):
        a = geometry.assign(self.gt, torch.zeros(0, 4), torch.zeros(0, dtype=torch.long), 0.5)
        assert a.labels.tolist() == [0, 0] and a.matched_gt.tolist() == [-1, -1]

    def test_threshold_per_stage(self):
        # width 11/20 of the gt box -> IoU 0.55
        prop = torch.tensor([[0., 0, 5.5, 10]])
        ious = []
        for thr in (0.5, 0.6, 0.7):
            a = geometry.assign(prop, self.gt, self.labels, thr)
            ious.append(a.iou.item())
            assert a.labels.item() == (2 if thr == 0.5 else 0)
        assert ious[0] == pytest.approx(0.55)

    def test_tie_prefers_lower_gt(self):
        gt = torch.tensor([[0., 0, 10, 10], [0, 0, 10, 10]])
        a = geometry.assign(torch.tensor([[0., 0, 10, 10]]), gt, torch.tensor([3, 1]), 0.5)
        assert a.matched_gt.item() == 0 and a.labels.item() == 3

    @pytest.mark.parametrize("seed", range(10))
    def test_monotone_in_threshold(self, seed):
        rng = np.random.default_rng(seed)
        props = torch.tensor(random_boxes(rng, 40))
        gt = torch.tensor(random_boxes(rng, 5))
        lab = torch.tensor(rng.integers(1, 4, size=5))
        prev = None
        for thr in np.linspace(0.05, 0.95, 10):
            pos = geometry.assign(props, gt, lab, float(thr)).positive
            if prev is not None:
                assert not (pos & ~prev).any()
            prev = pos


def test_fpn_level_rule():
    boxes = torch.tensor([[0., 0, 224, 224], [0, 0, 112, 112], [0, 0, 10, 10], [0, 0, 2000, 2000]])
    lv = geometry.fpn_level(boxes, canonical_level=3, canonical_size=224)
    expected = [min(max(math.floor(3 + math.log2(s / 224)), 1), 4) - 1 for s in (224, 112, 10, 2000)]
    assert lv.tolist() == expected == [2, 1, 0, 3]
