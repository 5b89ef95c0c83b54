import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from recurflow.errors import ContractError, DimensionError
from recurflow.losses import (
    DomainError,
    GroundTruth,
    LossWeights,
    downsample_flow,
    downsample_occ,
    epe,
    fl_all,
    flow_loss,
    flow_metrics,
    format_report,
    occ_loss,
    occ_weights,
    occlusion_f1,
    parse_report,
    sequence_loss,
)
from recurflow.tensor import Tensor

# ---------------------------------------------------------------------------
# scalar oracles: plain python loops over pixels


def flow_loss_loop(pred, gt):
    total = 0.0
    b, _, h, w = pred.shape
    for n in range(b):
        for y in range(h):
            for x in range(w):
                total += math.hypot(pred[n, 0, y, x] - gt[n, 0, y, x], pred[n, 1, y, x] - gt[n, 1, y, x])
    return total


def occ_loss_loop(pred, gt):
    b, _, h, w = pred.shape
    total = 0.0
    for n in range(b):
        sp = sum(pred[n, 0, y, x] for y in range(h) for x in range(w))
        sg = sum(gt[n, 0, y, x] for y in range(h) for x in range(w))
        w_pos = h * w / (sp + sg)
        w_neg = h * w / ((h * w - sp) + (h * w - sg))
        for y in range(h):
            for x in range(w):
                p = min(max(pred[n, 0, y, x], 1e-7), 1 - 1e-7)
                g = gt[n, 0, y, x]
                total += w_pos * g * math.log(p) + w_neg * (1 - g) * math.log(1 - p)
    return -0.5 * total


def epe_loop(pred, gt, mask):
    vals = []
    b, _, h, w = pred.shape
    for n in range(b):
        for y in range(h):
            for x in range(w):
                if mask[n, y, x]:
                    vals.append(math.hypot(pred[n, 0, y, x] - gt[n, 0, y, x], pred[n, 1, y, x] - gt[n, 1, y, x]))
    return sum(vals) / len(vals) if vals else None


def f1_loop(pred, gt):
    tp = fp = fn = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        p, g = p > 0.5, g > 0.5
        tp += p and g
        fp += p and not g
        fn += g and not p
    return 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0


# ---------------------------------------------------------------------------


class TestFlowLoss:
    def test_perfect(self, rng):
        g = rng.normal(size=(1, 2, 4, 4))
        assert flow_loss(Tensor(g), g).item() == 0.0

    def test_three_four_five(self):
        gt = np.zeros((1, 2, 3, 5))
        pred = np.stack([np.full((3, 5), 3.0), np.full((3, 5), 4.0)])[None]
        assert flow_loss(Tensor(pred), gt).item() == pytest.approx(5.0 * 15)

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_loop(self, seed):
        rng = np.random.default_rng(seed)
        p, g = rng.normal(size=(2, 2, 2, 8, 8))
        assert abs(flow_loss(Tensor(p), g).item() - flow_loss_loop(p, g)) < 1e-12 * max(1.0, flow_loss_loop(p, g))

    @given(st.floats(0.01, 100))
    def test_one_homogeneous(self, c):
        rng = np.random.default_rng(0)
        g, e = rng.normal(size=(2, 1, 2, 4, 4))
        a = flow_loss(Tensor(g + c * e), g).item()
        assert a == pytest.approx(c * flow_loss(Tensor(g + e), g).item(), rel=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            flow_loss(Tensor(np.zeros((1, 2, 4, 4))), np.zeros((1, 2, 4, 2)))


class TestOccLoss:
    @pytest.mark.parametrize("seed", range(100))
    def test_matches_loop(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.uniform(0, 1, size=(2, 1, 8, 8))
        g = (rng.random((2, 1, 8, 8)) > 0.7).astype(float)
        want = occ_loss_loop(p, g)
        assert abs(occ_loss(Tensor(p), g).item() - want) < 1e-12 * max(1.0, abs(want))

    def test_half_prediction(self, rng):
        g = (rng.random((1, 1, 4, 4)) > 0.5).astype(float)
        p = np.full((1, 1, 4, 4), 0.5)
        w, wbar = occ_weights(p, g)
        n_pos = g.sum()
        want = -0.5 * math.log(0.5) * (w[0] * n_pos + wbar[0] * (16 - n_pos))
        assert occ_loss(Tensor(p), g).item() == pytest.approx(want, rel=1e-12)
        assert occ_loss(Tensor(p), g).item() == pytest.approx(occ_loss_loop(p, g), rel=1e-12)

    def test_perfect_limit_goes_to_zero(self):
        g = np.zeros((1, 1, 4, 4))
        vals = [occ_loss(Tensor(np.full((1, 1, 4, 4), eps)), g).item() for eps in (1e-1, 1e-3, 1e-6)]
        assert vals[0] > vals[1] > vals[2] and vals[2] < 1e-4

    @pytest.mark.parametrize("bad", [-0.1, 1.5, np.nan])
    def test_domain(self, bad):
        p = np.full((1, 1, 2, 2), 0.5)
        p[0, 0, 0, 0] = bad
        with pytest.raises(DomainError):
            occ_loss(Tensor(p), np.zeros((1, 1, 2, 2)))

    def test_printed_order_differs(self, rng):
        p = rng.uniform(0.1, 0.9, size=(1, 1, 4, 4))
        g = (rng.random((1, 1, 4, 4)) > 0.5).astype(float)
        assert occ_loss(Tensor(p), g, printed_order=True).item() != occ_loss(Tensor(p), g).item()

    @given(st.integers(0, 10_000), st.integers(1, 6))
    def test_weight_bounds(self, seed, scale):
        # w and w_bar from two probability maps each lie in [hw/(2hw), inf); the
        # weighted class masses are each at most hw and together at least hw/2
        rng = np.random.default_rng(seed)
        h = w = 2 * scale
        g = (rng.random((1, 1, h, w)) > rng.random()).astype(float)
        p = rng.uniform(0.01, 0.99, size=(1, 1, h, w))
        wp, wn = occ_weights(p, g)
        hw = h * w
        pos = wp[0] * g.sum()
        neg = wn[0] * (hw - g.sum())
        assert pos <= hw + 1e-9 and neg <= hw + 1e-9
        assert wp[0] >= 0.5 and wn[0] >= 0.5

    @given(st.integers(0, 1000), st.integers(1, 4))
    def test_weights_invariant_to_tiling(self, seed, k):
        rng = np.random.default_rng(seed)
        g = (rng.random((1, 1, 4, 4)) > 0.6).astype(float)
        p = rng.uniform(0.01, 0.99, size=(1, 1, 4, 4))
        small = occ_weights(p, g)
        big = occ_weights(np.tile(p, (1, 1, k, k)), np.tile(g, (1, 1, k, k)))
        np.testing.assert_allclose(small, big, rtol=1e-12)


class TestSequenceLoss:
    def test_single_level_no_occ_equals_flow_loss(self, rng):
        p, g = rng.normal(size=(2, 1, 2, 4, 4))
        parts = sequence_loss([[Tensor(p)]], None, [GroundTruth(g)], LossWeights(alpha=(1.0,), lambda_mode="fixed", lam=0))
        assert parts.total.item() == pytest.approx(flow_loss(Tensor(p), g).item(), rel=1e-14)

    def test_identical_steps_mean(self, rng):
        p, g = rng.normal(size=(2, 1, 2, 4, 4))
        lw = LossWeights(alpha=(1.0,))
        one = sequence_loss([[Tensor(p)]], None, [GroundTruth(g)], lw).total.item()
        two = sequence_loss([[Tensor(p)], [Tensor(p)]], None, [GroundTruth(g)] * 2, lw).total.item()
        assert two == pytest.approx(one, rel=1e-14)

    def test_unannotated_steps_contribute_zero(self, rng):
        p, g = rng.normal(size=(2, 1, 2, 4, 4))
        lw = LossWeights(alpha=(1.0,))
        parts = sequence_loss([[Tensor(p)], [Tensor(p)]], None, [GroundTruth(None), GroundTruth(g)], lw)
        assert parts.per_step[0] == 0.0
        assert parts.total.item() == pytest.approx(flow_loss(Tensor(p), g).item() / 2, rel=1e-14)

    def test_no_supervision_rejected(self, rng):
        with pytest.raises(ContractError):
            sequence_loss([[Tensor(np.zeros((1, 2, 2, 2)))]], None, [GroundTruth(None)], LossWeights(alpha=(1.0,)))

    def test_alpha_count_checked(self):
        with pytest.raises(ContractError):
            sequence_loss([[Tensor(np.zeros((1, 2, 2, 2)))]], None, [GroundTruth(np.zeros((1, 2, 2, 2)))], LossWeights())

    def test_gt_count_checked(self):
        with pytest.raises(ContractError):
            sequence_loss([[Tensor(np.zeros((1, 2, 2, 2)))]], None, [], LossWeights(alpha=(1.0,)))

    @pytest.mark.parametrize("mode", ["fixed", "auto"])
    def test_full_pyramid_matches_loop(self, rng, mode):
        levels, steps, b, size = 3, 2, 2, 16
        alpha = (0.32, 0.08, 0.02)
        flows, occs, gts = [], [], []
        for _ in range(steps):
            flows.append([Tensor(rng.normal(size=(b, 2, size >> (levels - l), size >> (levels - l)))) for l in range(levels)])
            occs.append([Tensor(rng.uniform(0.05, 0.95, size=(b, 1) + f.shape[2:])) for f in flows[-1]])
            gts.append(GroundTruth(rng.normal(size=(b, 2, size, size)), (rng.random((b, 1, size, size)) > 0.8) * 1.0))
        lw = LossWeights(alpha=alpha, lambda_mode=mode, lam=0.3)
        parts = sequence_loss(flows, occs, gts, lw)

        f_sum = o_sum = 0.0
        for t in range(steps):
            for l in range(levels):
                k = 2 ** (levels - l)
                # naive pooling by explicit block loops
                h = size // k
                gf = np.zeros((b, 2, h, h))
                go = np.zeros((b, 1, h, h))
                for y in range(h):
                    for x in range(h):
                        gf[:, :, y, x] = gts[t].flow[:, :, y * k:(y + 1) * k, x * k:(x + 1) * k].mean(axis=(2, 3)) / k
                        go[:, :, y, x] = gts[t].occ[:, :, y * k:(y + 1) * k, x * k:(x + 1) * k].max(axis=(2, 3))
                f_sum += alpha[l] * flow_loss_loop(flows[t][l].values, gf)
                o_sum += alpha[l] * occ_loss_loop(occs[t][l].values, go)
        lam = 0.5 * f_sum / o_sum if mode == "auto" else 0.3
        assert parts.lam == pytest.approx(lam, rel=1e-12)
        assert parts.total.item() == pytest.approx((f_sum + lam * o_sum) / (steps * b), rel=1e-12)

    def test_non_negative_and_zero_at_truth(self, rng):
        g = rng.normal(size=(1, 2, 8, 8))
        flows = [[Tensor(downsample_flow(g, 1)), Tensor(g)]]
        parts = sequence_loss(flows, None, [GroundTruth(g)], LossWeights(alpha=(0.32, 0.08)))
        assert parts.total.item() == 0.0
        noisy = [[Tensor(f.values + rng.normal(size=f.shape)) for f in flows[0]]]
        assert sequence_loss(noisy, None, [GroundTruth(g)], LossWeights(alpha=(0.32, 0.08))).total.item() > 0


class TestGroundTruthPyramid:
    def test_flow_scaled_with_resolution(self):
        g = np.full((1, 2, 8, 8), 4.0)
        np.testing.assert_array_equal(downsample_flow(g, 2), np.full((1, 2, 2, 2), 1.0))

    def test_occ_any_child(self):
        o = np.zeros((1, 1, 4, 4))
        o[0, 0, 3, 0] = 1
        np.testing.assert_array_equal(downsample_occ(o, 1)[0, 0], [[0, 0], [1, 0]])


class TestMetrics:
    def test_epe_examples(self, rng):
        g = rng.normal(size=(1, 2, 4, 4))
        assert epe(g, g) == 0.0
        shifted = g.copy()
        shifted[:, 1] += 1.0
        assert epe(shifted, g) == pytest.approx(1.0)

    @pytest.mark.parametrize("seed", range(100))
    def test_epe_matches_loop(self, seed):
        rng = np.random.default_rng(seed)
        p, g = rng.normal(size=(2, 1, 2, 8, 8))
        m = rng.random((1, 8, 8)) > 0.5
        want = epe_loop(p, g, m)
        got = epe(p, g, m)
        assert (got is None and want is None) or abs(got - want) < 1e-12

    def test_empty_mask_is_absent(self, rng):
        g = rng.normal(size=(1, 2, 4, 4))
        assert epe(g, g, np.zeros((1, 4, 4))) is None
        assert fl_all(g, g, np.zeros((1, 4, 4))) is None

    def test_fl_examples(self):
        g = np.zeros((1, 2, 4, 4))
        assert fl_all(g, g) == 0.0
        assert fl_all(g + np.array([4.0, 0.0])[None, :, None, None], g) == 100.0
        half = g.copy()
        half[:, 0, :2] = 5.0
        assert fl_all(half, g) == 50.0

    @given(st.integers(0, 10_000))
    def test_epe_all_convex_combination(self, seed):
        rng = np.random.default_rng(seed)
        p, g = rng.normal(size=(2, 1, 2, 8, 8))
        occ = (rng.random((1, 1, 8, 8)) > 0.7).astype(float)
        m = flow_metrics(p, g, occ)
        n_occ = occ.sum()
        n_noc = 64 - n_occ
        if n_occ == 0 or n_noc == 0:
            return
        combo = (n_noc * m["epe_noc"] + n_occ * m["epe_occ"]) / 64
        assert m["epe_all"] == pytest.approx(combo, rel=1e-12)

    def test_f1_examples(self):
        gt = np.array([1, 1, 1, 0, 0, 0], float)
        assert occlusion_f1(gt * 0.9, gt) == 1.0
        assert occlusion_f1(np.zeros(6), gt) == 0.0
        # TP=2 FP=1 FN=1
        assert occlusion_f1(np.array([1, 1, 0, 1, 0, 0], float), gt) == pytest.approx(2 / 3)
        assert occlusion_f1(np.zeros(6), np.zeros(6)) == 1.0

    @pytest.mark.parametrize("seed", range(100))
    def test_f1_matches_loop(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.random((1, 1, 8, 8))
        g = (rng.random((1, 1, 8, 8)) > 0.8).astype(float)
        assert abs(occlusion_f1(p, g) - f1_loop(p, g)) < 1e-12

    def test_report_round_trip(self):
        m = {"epe_all": 1.25, "epe_occ": None, "samples": 3}
        assert parse_report(format_report(m)) == m
