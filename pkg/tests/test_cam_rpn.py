import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from ehsod import cam_rpn, geometry
from ehsod.config import CamRpnConfig, ConfigError

from test_geometry import brute_force_nms

STRIDES = (4, 8, 16, 32)


def oracle_level(box, l0, s0):
    w, h = box[2] - box[0], box[3] - box[1]
    return min(max(math.floor(l0 + math.log2(math.sqrt(w * h) / s0)), 1), 4) - 1


def oracle_heatmap(boxes, labels, shapes, strides, sigma, C, l0, s0):
    """Per-pixel rasterization from point-in-region predicates."""
    targets = [np.zeros((C, h, w)) for h, w in shapes]
    masks = [np.ones((C, h, w)) for h, w in shapes]
    regions = []
    for box, lab in zip(boxes, labels):
        lvl = oracle_level(box, l0, s0)
        m = [v / strides[lvl] for v in box]
        cx, cy = (m[0] + m[2]) / 2, (m[1] + m[3]) / 2
        pw, ph = sigma * (m[2] - m[0]), sigma * (m[3] - m[1])
        pos = (cx - pw / 2, cy - ph / 2, cx + pw / 2, cy + ph / 2)
        regions.append((lvl, lab - 1, m, pos, (cx, cy)))

    def inside(px, py, r):
        return r[0] <= px <= r[2] and r[1] <= py <= r[3]

    for lvl, (h, w) in enumerate(shapes):
        for c in range(C):
            for i in range(h):
                for j in range(w):
                    px, py = j + 0.5, i + 0.5
                    is_pos = is_ign = False
                    for rl, rc, m, pos, (cx, cy) in regions:
                        if rl != lvl or rc != c:
                            continue
                        any_center = any(inside(jj + 0.5, ii + 0.5, pos)
                                         for ii in range(h) for jj in range(w))
                        if inside(px, py, pos):
                            is_pos = True
                        elif not any_center and math.floor(cx) == j and math.floor(cy) == i:
                            is_pos = True
                        if inside(px, py, m):
                            is_ign = True
                    targets[lvl][c, i, j] = float(is_pos)
                    masks[lvl][c, i, j] = 0.0 if (is_ign and not is_pos) else 1.0
    return targets, masks


class TestComputeCam:
    def test_zero_weights_zero_logits(self):
        head = cam_rpn.CamHead(8, 3)
        for p in head.parameters():
            torch.nn.init.zeros_(p)
        feats = [torch.randn(2, 8, s, s) for s in (16, 8, 4, 2)]
        for a in cam_rpn.compute_cam(feats, head):
            assert torch.count_nonzero(a) == 0

    def test_shape_preserved(self):
        head = cam_rpn.CamHead(8, 5)
        feats = [torch.randn(1, 8, h, w) for h, w in ((12, 10), (6, 5), (3, 3), (2, 2))]
        out = cam_rpn.compute_cam(feats, head)
        assert [tuple(a.shape) for a in out] == [(1, 5, h, w) for h, w in
                                                 ((12, 10), (6, 5), (3, 3), (2, 2))]

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            cam_rpn.compute_cam([torch.randn(1, 4, 2, 2)], cam_rpn.CamHead(8, 2))

    def test_single_cell_is_matrix_vector_product(self):
        D, C = 3, 2
        head = cam_rpn.CamHead(D, C).double()
        with torch.no_grad():
            head.conv.weight.zero_()
            head.conv.weight[:, :, 1, 1] = torch.eye(D)  # centre tap only
            head.conv.bias.zero_()
            W = torch.tensor([[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]], dtype=torch.float64)
            head.outs[0].weight.copy_(W[:, :, None, None])
            head.outs[0].bias.copy_(torch.tensor([0.1, -0.2]))
        x = torch.tensor([2.0, 1.0, 4.0], dtype=torch.float64)
        out = cam_rpn.compute_cam([x.view(1, D, 1, 1)], head)[0].flatten()
        expected = W @ x + torch.tensor([0.1, -0.2], dtype=torch.float64)
        assert torch.allclose(out, expected, atol=1e-12)


class TestImageProbs:
    def test_zero_logits(self):
        y = cam_rpn.cam_image_probs([torch.zeros(3, 4, 4) for _ in range(4)])
        assert torch.equal(y, torch.full((3,), 0.5))

    def test_one_pixel(self):
        v = torch.tensor([1.5, -0.3, 0.0])
        y = cam_rpn.cam_image_probs([v.view(3, 1, 1)])
        assert torch.allclose(y, torch.sigmoid(v))

    def test_mean_then_sigmoid(self):
        a = torch.tensor([[[2.0, 0.0]]])  # 1 channel, 1x2 map
        assert cam_rpn.cam_image_probs([a]).item() == pytest.approx(1 / (1 + math.exp(-1)))

    def test_levels_are_averaged(self):
        levels = [torch.full((1, 2, 2), v) for v in (1.0, 2.0, 3.0, -2.0)]
        assert cam_rpn.cam_image_probs(levels).item() == pytest.approx(1 / (1 + math.exp(-1)))


class TestCamClsLoss:
    def test_perfect(self):
        eps = cam_rpn.EPS
        y = torch.tensor([1 - eps, eps, 1 - eps], dtype=torch.float64)
        assert cam_rpn.cam_cls_loss(y, torch.tensor([1.0, 0.0, 1.0])).item() < 1e-6

    def test_two_classes(self):
        v = cam_rpn.cam_cls_loss(torch.tensor([0.5, 0.5], dtype=torch.float64),
                                 torch.tensor([1.0, 0.0]))
        assert v.item() == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_one_class(self):
        v = cam_rpn.cam_cls_loss(torch.tensor([0.9], dtype=torch.float64), torch.tensor([1.0]))
        assert v.item() == pytest.approx(-math.log(0.9), abs=1e-12)
        assert v.item() == pytest.approx(0.10536, abs=1e-5)


class TestHeatmap:
    def test_no_boxes_all_negative(self):
        shapes = [(16, 16), (8, 8), (4, 4), (2, 2)]
        hm = cam_rpn.build_gt_heatmap(torch.zeros(0, 4), torch.zeros(0, dtype=torch.long),
                                      shapes, STRIDES, 0.8, 3)
        assert all(t.sum() == 0 for t in hm.targets)
        assert all(m.min() == 1 for m in hm.masks)

    def test_full_level_sigma_one(self):
        shapes = [(16, 16), (8, 8), (4, 4), (2, 2)]
        box = torch.tensor([[0.0, 0.0, 64.0, 64.0]])
        # l0=1, s0=64 puts a 64-pixel box on level 1
        hm = cam_rpn.build_gt_heatmap(box, torch.tensor([2]), shapes, STRIDES, 1.0, 3,
                                      canonical_level=1, canonical_size=64)
        assert hm.targets[0][1].min() == 1
        assert hm.targets[0][[0, 2]].max() == 0
        assert all(m.min() == 1 for m in hm.masks)
        assert all(t.sum() == 0 for t in hm.targets[1:])

    def test_ten_cell_box(self):
        shapes = [(16, 16), (8, 8), (4, 4), (2, 2)]
        box = torch.tensor([[8.0, 8.0, 48.0, 48.0]])  # 10x10 cells on level 1
        hm = cam_rpn.build_gt_heatmap(box, torch.tensor([1]), shapes, STRIDES, 0.8, 2,
                                      canonical_level=1, canonical_size=64)
        t, m = hm.targets[0][0], hm.masks[0][0]
        assert t.sum() == 64
        assert t[3:11, 3:11].min() == 1
        assert (m == 0).sum() == 36
        assert hm.masks[0][1].min() == 1
        ot, om = oracle_heatmap([[8, 8, 48, 48]], [1], shapes, STRIDES, 0.8, 2, 1, 64)
        assert np.array_equal(t.numpy(), ot[0][0]) and np.array_equal(m.numpy(), om[0][0])

    def test_tiny_box_marks_one_cell(self):
        shapes = [(16, 16), (8, 8), (4, 4), (2, 2)]
        box = torch.tensor([[9.0, 9.0, 10.0, 10.0]])
        hm = cam_rpn.build_gt_heatmap(box, torch.tensor([1]), shapes, STRIDES, 0.8, 1)
        assert hm.targets[0].sum() == 1 and hm.targets[0][0, 2, 2] == 1

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_per_pixel_oracle(self, seed):
        rng = np.random.default_rng(seed)
        size = 64
        shapes = [(size // s, size // s) for s in STRIDES]
        sigma = [0.5, 0.8, 1.0][seed % 3]
        n = int(rng.integers(0, 6))
        C = 3
        boxes = []
        for _ in range(n):
            w, h = rng.uniform(2, 60, size=2)
            x, y = rng.uniform(0, size - w), rng.uniform(0, size - h)
            boxes.append([x, y, x + w, y + h])
        labels = rng.integers(1, C + 1, size=n).tolist()
        l0, s0 = 2, 24.0
        hm = cam_rpn.build_gt_heatmap(torch.tensor(boxes, dtype=torch.float64).reshape(-1, 4),
                                      torch.tensor(labels, dtype=torch.long), shapes, STRIDES,
                                      sigma, C, l0, s0)
        ot, om = oracle_heatmap(boxes, labels, shapes, STRIDES, sigma, C, l0, s0)
        for lvl in range(4):
            assert np.array_equal(hm.targets[lvl].numpy(), ot[lvl])
            assert np.array_equal(hm.masks[lvl].numpy(), om[lvl])

    @pytest.mark.parametrize("seed", range(10))
    def test_sigma_monotone(self, seed):
        rng = np.random.default_rng(100 + seed)
        shapes = [(16, 16), (8, 8), (4, 4), (2, 2)]
        n = int(rng.integers(1, 5))
        xy = rng.uniform(0, 30, size=(n, 2))
        boxes = torch.tensor(np.concatenate([xy, xy + rng.uniform(4, 34, size=(n, 2))], 1))
        labels = torch.tensor(rng.integers(1, 3, size=n))
        prev = None
        for sigma in (0.2, 0.4, 0.6, 0.8, 1.0):
            hm = cam_rpn.build_gt_heatmap(boxes, labels, shapes, STRIDES, sigma, 2, 2, 16)
            cur = [t.bool() for t in hm.targets]
            if prev is not None:
                assert all(not (p & ~c).any() for p, c in zip(prev, cur))
            prev = cur

    def test_bad_sigma(self):
        with pytest.raises(ConfigError):
            cam_rpn.build_gt_heatmap(torch.zeros(0, 4), torch.zeros(0), [(2, 2)], [4], 0.0, 1)


def _single_pixel_target(t, m=1.0):
    return cam_rpn.GtHeatmap(targets=[torch.tensor([[[t]]], dtype=torch.float64)],
                             masks=[torch.tensor([[[m]]], dtype=torch.float64)])


class TestCamSegLoss:
    def test_all_ignored(self):
        logits = [torch.randn(2, 3, 3, dtype=torch.float64)]
        tgt = cam_rpn.GtHeatmap([torch.ones(2, 3, 3)], [torch.zeros(2, 3, 3)])
        assert cam_rpn.cam_seg_loss(logits, tgt, 0.25, 2.0).item() == 0.0

    def test_single_positive_pixel(self):
        logit = torch.tensor([[[math.log(3.0)]]], dtype=torch.float64)  # sigmoid = 0.75
        v = cam_rpn.cam_seg_loss([logit], _single_pixel_target(1.0), 0.25, 2.0).item()
        assert v == pytest.approx(-0.25 * 0.25 ** 2 * math.log(0.75), abs=1e-12)
        assert v == pytest.approx(0.004496, abs=1e-6)

    def test_single_negative_pixel(self):
        logit = torch.tensor([[[math.log(3.0)]]], dtype=torch.float64)
        v = cam_rpn.cam_seg_loss([logit], _single_pixel_target(0.0), 0.25, 2.0).item()
        assert v == pytest.approx(-0.25 * 0.75 ** 2 * math.log(0.25), abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_gamma_zero_is_bce(self, seed):
        g = torch.Generator().manual_seed(seed)
        logits = [torch.randn(3, 5, 4, generator=g, dtype=torch.float64) * 3 for _ in range(2)]
        targets = [(torch.rand(3, 5, 4, generator=g) > 0.7).double() for _ in range(2)]
        masks = [(torch.rand(3, 5, 4, generator=g) > 0.2).double() for _ in range(2)]
        v = cam_rpn.cam_seg_loss(logits, cam_rpn.GtHeatmap(targets, masks), 1.0, 0.0)
        ref = sum(F.binary_cross_entropy_with_logits(a, t, weight=m, reduction="sum")
                  for a, t, m in zip(logits, targets, masks))
        assert abs(v.item() - ref.item()) < 1e-10

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cam_rpn.cam_seg_loss([torch.zeros(2, 3, 3)],
                                 cam_rpn.GtHeatmap([torch.zeros(2, 2, 2)], [torch.ones(2, 2, 2)]),
                                 0.25, 2.0)


class TestObjectness:
    def test_uniform_logits(self):
        cam = torch.full((2, 8, 8), 0.3)
        s = cam_rpn.cam_objectness(cam, torch.tensor([[4.0, 4.0, 20.0, 20.0]]), 4)
        assert s.item() == pytest.approx(0.5)

    def test_saturated(self):
        cam = torch.zeros(3, 8, 8, dtype=torch.float64)
        cam[1, 1:5, 1:5] = 100.0
        s = cam_rpn.cam_objectness(cam, torch.tensor([[4.0, 4.0, 20.0, 20.0]]), 4)
        assert s.item() == pytest.approx(1.0, abs=1e-12)

    def test_two_cell_mean(self):
        # per-pixel max-softmax of 0.6 and 0.8 in a two-class map
        logits = torch.zeros(2, 1, 2, dtype=torch.float64)
        logits[0, 0, 0] = math.log(0.6 / 0.4)
        logits[0, 0, 1] = math.log(0.8 / 0.2)
        s = cam_rpn.cam_objectness(logits, torch.tensor([[0.0, 0.0, 8.0, 4.0]]), 4)
        assert s.item() == pytest.approx(0.7, abs=1e-12)

    def test_outside_map(self):
        cam = torch.randn(2, 4, 4)
        assert cam_rpn.cam_objectness(cam, torch.tensor([[100.0, 100.0, 120.0, 120.0]]), 4) == 0

    @pytest.mark.parametrize("seed", range(10))
    def test_brute_force_mean_and_invariances(self, seed):
        g = torch.Generator().manual_seed(seed)
        cam = torch.randn(3, 6, 7, generator=g, dtype=torch.float64) * 2
        rng = np.random.default_rng(seed)
        xy = rng.uniform(0, 20, size=(20, 2))
        boxes = torch.tensor(np.concatenate([xy, xy + rng.uniform(5, 15, size=(20, 2))], 1))
        s = cam_rpn.cam_objectness(cam, boxes, 4)
        prob = torch.softmax(cam, 0).max(0).values
        for k, b in enumerate(boxes.tolist()):
            cells = [prob[i, j].item() for i in range(6) for j in range(7)
                     if b[0] <= (j + 0.5) * 4 <= b[2] and b[1] <= (i + 0.5) * 4 <= b[3]]
            assert s[k].item() == pytest.approx(np.mean(cells), abs=1e-12)
        assert (s >= 0).all() and (s <= 1).all()
        shift = torch.randn(1, 6, 7, generator=g, dtype=torch.float64) * 5
        assert torch.allclose(cam_rpn.cam_objectness(cam + shift, boxes, 4), s, atol=1e-12)


def _rpn_instance(seed, image=64):
    g = torch.Generator().manual_seed(seed)
    shapes = [(image // s, image // s) for s in STRIDES]
    anchors, _ = geometry.generate_anchors(shapes, STRIDES, [16, 32, 64, 128], dtype=torch.float64)
    n = anchors.shape[0]
    logits = torch.randn(n, generator=g, dtype=torch.float64)
    deltas = torch.randn(n, 4, generator=g, dtype=torch.float64) * 0.2
    cam = [torch.randn(3, h, w, generator=g, dtype=torch.float64) for h, w in shapes]
    return shapes, anchors, logits, deltas, cam


class TestSelectProposals:
    cfg = CamRpnConfig(canonical_level=2, canonical_size=32, pre_nms_top_k=10000,
                       nms_threshold=0.6)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_pipeline_oracle(self, seed):
        shapes, anchors, logits, deltas, cam = _rpn_instance(seed)
        boxes, scores = cam_rpn.select_proposals(logits, deltas, anchors, cam, STRIDES, (64, 64),
                                                 self.cfg, top_k=30)
        dec = geometry.decode_deltas(deltas, anchors, image_size=(64, 64))
        fused = torch.sigmoid(logits) + cam_rpn.pyramid_objectness(cam, dec, STRIDES, 2, 32)
        keep = brute_force_nms(dec.numpy(), fused.numpy(), 0.6)[:30]
        assert torch.allclose(boxes, dec[keep]) and torch.allclose(scores, fused[keep])
        assert (scores >= 0).all() and (scores <= 2).all()

    def test_uniform_cam_equals_rpn_only(self):
        shapes, anchors, logits, deltas, _ = _rpn_instance(5)
        uniform = [torch.zeros(3, h, w, dtype=torch.float64) for h, w in shapes]
        a, _ = cam_rpn.select_proposals(logits, deltas, anchors, uniform, STRIDES, (64, 64),
                                        self.cfg, top_k=50)
        b, _ = cam_rpn.select_proposals(logits, deltas, anchors, None, STRIDES, (64, 64),
                                        self.cfg, top_k=50)
        assert torch.equal(a, b)

    def test_identical_boxes_keep_higher(self):
        anchors = torch.tensor([[0.0, 0, 16, 16], [0, 0, 16, 16]])
        cam = [torch.zeros(2, 16, 16), torch.zeros(2, 8, 8), torch.zeros(2, 4, 4),
               torch.zeros(2, 2, 2)]
        # sigmoid(logit) + 0.5 gives fused 1.3 and 0.9
        logits = torch.logit(torch.tensor([0.8, 0.4]))
        boxes, scores = cam_rpn.select_proposals(logits, torch.zeros(2, 4), anchors, cam, STRIDES,
                                                 (64, 64), self.cfg, top_k=5)
        assert scores.tolist() == pytest.approx([1.3])


class TestCamRpnLoss:
    cfg = CamRpnConfig()

    def test_zero(self):
        parts = dict.fromkeys(("cam_cls", "cam_seg", "rpn_cls", "rpn_reg"), 0.0)
        assert cam_rpn.cam_rpn_loss(parts, self.cfg) == 0

    def test_unit_parts(self):
        parts = dict.fromkeys(("cam_cls", "cam_seg", "rpn_cls", "rpn_reg"), 1.0)
        assert cam_rpn.cam_rpn_loss(parts, self.cfg) == pytest.approx(2.3)

    def test_weak_image(self):
        assert cam_rpn.cam_rpn_loss({"cam_cls": 0.5}, self.cfg) == pytest.approx(0.05)

    def test_negative_weight(self):
        with pytest.raises(ConfigError):
            cam_rpn.cam_rpn_loss({"cam_cls": 1.0}, CamRpnConfig(alpha1=-1.0))
        with pytest.raises(ConfigError):
            CamRpnConfig(alpha2=-0.1).validate()


class TestRpnTargets:
    def test_sampling_budget_and_best_anchor(self):
        shapes = [(16, 16), (8, 8), (4, 4), (2, 2)]
        anchors, _ = geometry.generate_anchors(shapes, STRIDES, [16, 32, 64, 128])
        gt = torch.tensor([[10.0, 10.0, 23.0, 31.0]])
        cfg = CamRpnConfig(rpn_batch_size=64)
        t = cam_rpn.rpn_targets(anchors, gt, cfg, torch.Generator().manual_seed(0))
        assert (t.labels >= 0).sum() == 64
        best = geometry.box_iou(anchors, gt)[:, 0].argmax()
        assert t.labels[best] == 1
        assert torch.allclose(geometry.decode_deltas(t.deltas[best:best + 1], anchors[best:best + 1]),
                              gt, atol=1e-4)
