import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtcvr.data import ExposureDataset, GroundTruth
from mtcvr.errors import ContractError, UndefinedMetricError
from mtcvr.metrics import METRIC_KEYS, auc, evaluate, gauc


def brute_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


class TestAuc:
    def test_perfect(self):
        assert auc([0.9, 0.1], [1, 0]) == 1.0

    def test_hand_pairs(self):
        assert auc([0.8, 0.8, 0.6, 0.4], [1, 0, 1, 0]) == 0.625

    def test_all_ties(self):
        assert auc(np.full(9, 0.3), np.array([1, 0, 0, 1, 0, 1, 0, 0, 1])) == 0.5

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            auc([0.1, 0.2], [1, 1])

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            auc([0.1, 0.2], [1])

    def test_brute_force_with_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(2, 300))
            scores = rng.integers(0, 20, n) / 20.0
            labels = (rng.random(n) < 0.4).astype(int)
            labels[:2] = [0, 1]
            assert auc(scores, labels) == brute_auc(scores, labels)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.normal(size=100)
        labels = (rng.random(100) < 0.3).astype(int)
        labels[:2] = [0, 1]
        assert auc(scores, labels) == auc(np.exp(3 * scores) + 1.0, labels)


class TestGauc:
    def test_one_group_equals_auc(self):
        rng = np.random.default_rng(1)
        s, y = rng.random(40), (rng.random(40) < 0.5).astype(int)
        assert gauc(s, y, np.zeros(40)) == auc(s, y)

    def test_weighted_mean(self):
        # group 0: perfect ranking; group 1: all tied
        s = np.array([0.9, 0.1, 0.5, 0.5])
        y = np.array([1, 0, 1, 0])
        g = np.array([0, 0, 1, 1])
        assert gauc(s, y, g, weights={0: 10, 1: 30}) == pytest.approx(0.625, abs=1e-15)

    def test_single_class_groups_skipped(self):
        s = np.array([0.2, 0.7, 0.9, 0.1, 0.4, 0.3])
        y = np.array([1, 1, 0, 0, 1, 0])
        g = np.array([0, 0, 1, 1, 2, 2])
        assert gauc(s, y, g) == auc(s[4:], y[4:])

    def test_no_valid_group(self):
        with pytest.raises(UndefinedMetricError):
            gauc([0.1, 0.2], [1, 0], [0, 1])

    def test_equal_weights_give_plain_mean(self):
        rng = np.random.default_rng(3)
        g = np.repeat(np.arange(5), 20)
        s, y = rng.random(100), (rng.random(100) < 0.5).astype(int)
        per = [auc(s[g == k], y[g == k]) for k in range(5)]
        np.testing.assert_allclose(gauc(s, y, g), np.mean(per), rtol=0, atol=1e-15)

    def test_exposure_weights_by_default(self):
        s = np.array([0.9, 0.1, 0.2, 0.5, 0.4, 0.3])
        y = np.array([1, 0, 1, 0, 0, 1])
        g = np.array([0, 0, 1, 1, 1, 1])
        a0, a1 = auc(s[:2], y[:2]), auc(s[2:], y[2:])
        np.testing.assert_allclose(gauc(s, y, g), (2 * a0 + 4 * a1) / 6, atol=1e-15)


class _FixedNet:
    def __init__(self, ctr, cvr):
        self.ctr, self.cvr = ctr, cvr

    def predict_ctr(self, feats):
        return self.ctr

    def predict_cvr(self, feats):
        return self.cvr


def _dataset(n, rng, group_key=None):
    click = (rng.random(n) < 0.5).astype(np.int8)
    conv = (click * (rng.random(n) < 0.5)).astype(np.int8)
    feats = {f: np.zeros((n, 1), dtype=np.int64) for f in ("user", "item", "comb")}
    gk = np.arange(n) % 50 if group_key is None else group_key
    return ExposureDataset(feats, gk, click, conv, {"user": 1, "item": 1, "comb": 1})


class TestEvaluate:
    def test_random_scores_near_half(self):
        rng = np.random.default_rng(0)
        n = 10_000
        ds = _dataset(n, rng)
        truth = GroundTruth(np.full(n, 0.5), (rng.random(n) < 0.5).astype(np.int8), np.zeros(n))
        rep = evaluate(_FixedNet(rng.random(n), rng.random(n)), ds, truth, seed=1)
        for key in METRIC_KEYS:
            assert abs(getattr(rep, key) - 0.5) < 0.03, key

    def test_perfect_net(self):
        rng = np.random.default_rng(1)
        n = 500
        ds = _dataset(n, rng)
        true = (rng.random(n) < 0.3).astype(np.int8)
        true[ds.click == 1] = ds.conversion[ds.click == 1]
        truth = GroundTruth(np.full(n, 0.5), true, np.zeros(n))
        rep = evaluate(_FixedNet(np.full(n, 0.5), true * 0.9 + 0.05), ds, truth)
        assert rep.cvr_auc_do == 1.0

    def test_public_log_convention(self):
        # no counterfactual labels and one record per group key: only the AUC metrics exist
        rng = np.random.default_rng(2)
        n = 300
        ds = _dataset(n, rng, group_key=np.arange(n))
        rep = evaluate(_FixedNet(rng.random(n), rng.random(n)), ds, None, seed=0)
        assert rep.cvr_auc_do is None and rep.ctcvr_gauc is None
        assert rep.cvr_auc_clicked is not None and rep.ctcvr_auc is not None
        assert set(rep.to_dict()) == set(METRIC_KEYS) | {"seed"}
        assert len(rep.notes) == 2
