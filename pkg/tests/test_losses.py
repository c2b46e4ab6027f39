import math

import numpy as np
import pytest

from abn.boundary import valid_cell_mask
from abn.data import ModelConfig
from abn.errors import DataError
from abn.losses import (LossReport, _bll_core, _l2_core, l2_loss, total_loss,
                        total_loss_with_grads, weighted_bll)
from abn.supervision import SupervisionTargets


class Outputs:
    def __init__(self, p_start, p_end, p_cc, p_cr):
        self.p_start = np.asarray(p_start, dtype=np.float64)
        self.p_end = np.asarray(p_end, dtype=np.float64)
        self.p_cc = np.asarray(p_cc, dtype=np.float64)
        self.p_cr = np.asarray(p_cr, dtype=np.float64)


def toy_targets(T=4, D=2):
    l_s = np.array([1.0, 0.0, 0.0, 0.0])
    l_e = np.array([0.0, 0.0, 1.0, 0.0])
    l_bin = np.zeros((D, T))
    l_bin[1, 0] = 1.0
    g = np.zeros((D, T))
    g[1, 0] = 1.0
    g[0, 0] = 0.5
    return SupervisionTargets(l_s, l_e, l_bin, g, valid_cell_mask(T, D))


class TestWeightedBll:
    def test_balanced_hand_case(self):
        # alpha+ = alpha- = 2; loss = -(1/4) * 2 * ln(0.9*0.9*0.8*0.8) = -ln 0.72
        y = [1, 0, 0, 1]
        p = [0.9, 0.1, 0.2, 0.8]
        assert abs(weighted_bll(p, y) - (-math.log(0.72))) < 1e-12

    def test_uninformative_predictions(self):
        assert abs(weighted_bll([0.5, 0.5], [1, 0]) - 2 * math.log(2.0)) < 1e-12

    def test_perfect_predictions_vanish(self):
        y = np.array([1.0, 0.0, 1.0, 0.0])
        assert weighted_bll(y, y) < 1e-5

    def test_unbalanced_matches_manual_formula(self):
        y = np.array([1.0, 0.0, 0.0, 0.0])
        p = np.array([0.7, 0.4, 0.2, 0.1])
        a_pos, a_neg = 4.0, 4.0 / 3.0
        manual = -(a_pos * math.log(0.7)
                   + a_neg * (math.log(0.6) + math.log(0.8) + math.log(0.9))) / 4.0
        assert abs(weighted_bll(p, y) - manual) < 1e-12

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        y = (rng.random(40) > 0.7).astype(float)
        y[0] = 1.0
        y[1] = 0.0
        p = rng.uniform(0.01, 0.99, 40)
        base = weighted_bll(p, y)
        for _ in range(10):
            perm = rng.permutation(40)
            assert abs(weighted_bll(p[perm], y[perm]) - base) < 1e-12

    def test_mask_excludes_cells(self):
        y = np.array([[1.0, 0.0], [0.0, 1.0]])
        p = np.array([[0.8, 0.3], [0.6, 0.9]])
        mask = np.array([[True, True], [True, False]])
        base = weighted_bll(p, y, mask)
        p2 = p.copy()
        p2[1, 1] = 0.001
        assert weighted_bll(p2, y, mask) == base

    def test_single_class_warns_and_stays_finite(self):
        with pytest.warns(RuntimeWarning):
            v = weighted_bll([0.9, 0.8], [1.0, 1.0])
        assert np.isfinite(v)

    def test_unit_weights_equal_plain_bce(self):
        rng = np.random.default_rng(11)
        y = (rng.random(20) > 0.5).astype(float)
        p = rng.uniform(0.05, 0.95, 20)
        manual = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
        got = weighted_bll(p, y, class_balance=False)
        assert abs(got - manual) < 1e-12

    def test_empty_mask_rejected(self):
        with pytest.raises(DataError):
            weighted_bll([0.5], [1.0], np.array([False]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        y = (rng.random(12) > 0.6).astype(float)
        y[:2] = [1.0, 0.0]
        p = rng.uniform(0.05, 0.95, 12)
        _, grad, _, _ = _bll_core(p, y, None)
        h = 1e-7
        for i in range(12):
            pp = p.copy(); pp[i] += h
            pm = p.copy(); pm[i] -= h
            fd = (weighted_bll(pp, y) - weighted_bll(pm, y)) / (2 * h)
            assert abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-8) < 1e-4


class TestL2Loss:
    def test_zero_at_equality(self):
        x = np.array([[0.2, 0.7]])
        assert l2_loss(x, x) == 0.0

    def test_hand_mean_of_squares(self):
        pred = np.full((2, 2), 0.5)
        assert abs(l2_loss(pred, np.zeros((2, 2))) - 0.25) < 1e-15

    def test_mask_contract(self):
        pred = np.array([[0.5, 0.5], [0.5, 0.5]])
        tgt = np.zeros((2, 2))
        mask = np.array([[True, False], [True, True]])
        base = l2_loss(pred, tgt, mask)
        pred2 = pred.copy()
        pred2[0, 1] = 9.0
        assert l2_loss(pred2, tgt, mask) == base

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        p = rng.uniform(0, 1, (3, 4))
        t = rng.uniform(0, 1, (3, 4))
        _, grad = _l2_core(p, t, None)
        h = 1e-7
        i, j = 1, 2
        pp = p.copy(); pp[i, j] += h
        pm = p.copy(); pm[i, j] -= h
        fd = (l2_loss(pp, t) - l2_loss(pm, t)) / (2 * h)
        assert abs(fd - grad[i, j]) < 1e-6


class TestTotalLoss:
    def test_perfect_outputs_near_zero(self):
        t = toy_targets()
        out = Outputs(t.l_start, t.l_end, t.l_dur_bin, t.g_iou)
        cfg = ModelConfig(C=8, T=4, D=2, n_samples=4)
        rep = total_loss(out, t, cfg)
        assert rep.l_total < 1e-4

    def test_weight_linearity(self):
        t = toy_targets()
        rng = np.random.default_rng(1)
        out = Outputs(rng.uniform(0.1, 0.9, 4), rng.uniform(0.1, 0.9, 4),
                      rng.uniform(0.1, 0.9, (2, 4)), rng.uniform(0.1, 0.9, (2, 4)))
        cfg0 = ModelConfig(C=8, T=4, D=2, n_samples=4, lambda1=0.0, lambda2=2.0)
        rep = total_loss(out, t, cfg0)
        assert abs(rep.l_total - 2.0 * rep.l_pam) < 1e-9

    def test_total_is_weighted_sum(self):
        t = toy_targets()
        rng = np.random.default_rng(3)
        out = Outputs(rng.uniform(0.1, 0.9, 4), rng.uniform(0.1, 0.9, 4),
                      rng.uniform(0.1, 0.9, (2, 4)), rng.uniform(0.1, 0.9, (2, 4)))
        cfg = ModelConfig(C=8, T=4, D=2, n_samples=4, lambda1=0.7, lambda2=1.3)
        rep = total_loss(out, t, cfg)
        assert abs(rep.l_total - (0.7 * rep.l_tam + 1.3 * rep.l_pam)) < 1e-9

    def test_composes_the_published_terms(self):
        t = toy_targets()
        rng = np.random.default_rng(8)
        ps = rng.uniform(0.1, 0.9, 4)
        pe = rng.uniform(0.1, 0.9, 4)
        pcc = rng.uniform(0.1, 0.9, (2, 4))
        pcr = rng.uniform(0.1, 0.9, (2, 4))
        cfg = ModelConfig(C=8, T=4, D=2, n_samples=4)
        rep = total_loss(Outputs(ps, pe, pcc, pcr), t, cfg)
        expected = (weighted_bll(ps, t.l_start) + weighted_bll(pe, t.l_end)
                    + weighted_bll(pcc, t.l_dur_bin, t.valid_mask)
                    + 10.0 * l2_loss(pcr, t.g_iou, t.valid_mask))
        assert abs(rep.l_total - expected) < 1e-12

    def test_regression_target_flag(self):
        t = toy_targets()
        rng = np.random.default_rng(9)
        out = Outputs(rng.uniform(0.1, 0.9, 4), rng.uniform(0.1, 0.9, 4),
                      rng.uniform(0.1, 0.9, (2, 4)), rng.uniform(0.1, 0.9, (2, 4)))
        iou_cfg = ModelConfig(C=8, T=4, D=2, n_samples=4, regress_binary=False)
        bin_cfg = ModelConfig(C=8, T=4, D=2, n_samples=4, regress_binary=True)
        r_iou = total_loss(out, t, iou_cfg)
        r_bin = total_loss(out, t, bin_cfg)
        reg_iou = l2_loss(out.p_cr, t.g_iou, t.valid_mask)
        reg_bin = l2_loss(out.p_cr, t.l_dur_bin, t.valid_mask)
        assert abs((r_iou.l_pam - r_bin.l_pam) - 10.0 * (reg_iou - reg_bin)) < 1e-12

    def test_counts_reported(self):
        t = toy_targets()
        out = Outputs(t.l_start, t.l_end, t.l_dur_bin, t.g_iou)
        cfg = ModelConfig(C=8, T=4, D=2, n_samples=4)
        rep = total_loss(out, t, cfg)
        assert rep.counts["start"] == (1, 3)
        assert rep.counts["conf_cls"][0] == 1

    def test_head_gradients_match_finite_differences(self):
        t = toy_targets()
        rng = np.random.default_rng(12)
        arrays = dict(
            p_start=rng.uniform(0.1, 0.9, 4), p_end=rng.uniform(0.1, 0.9, 4),
            p_cc=rng.uniform(0.1, 0.9, (2, 4)), p_cr=rng.uniform(0.1, 0.9, (2, 4)))
        cfg = ModelConfig(C=8, T=4, D=2, n_samples=4)
        _, grads = total_loss_with_grads(Outputs(**arrays), t, cfg)
        h = 1e-7
        for key in arrays:
            flat_idx = 1 if key in ("p_start", "p_end") else (1, 2)
            plus = {k: v.copy() for k, v in arrays.items()}
            plus[key][flat_idx] += h
            minus = {k: v.copy() for k, v in arrays.items()}
            minus[key][flat_idx] -= h
            fd = (total_loss(Outputs(**plus), t, cfg).l_total
                  - total_loss(Outputs(**minus), t, cfg).l_total) / (2 * h)
            an = grads[key][flat_idx]
            assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) < 1e-4
