import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from agil.saliency_metrics import (FixationSet, MetricsReport, auc, cc, evaluate_predictions,
                                   kl_div, kl_terms, nss)


def brute_force_auc(P, mask):
    """ROC area by enumerating every threshold (trapezoidal rule)."""
    vals = P.ravel()
    pos = mask.ravel()
    thresholds = np.concatenate([[np.inf], np.unique(vals)[::-1]])
    tpr = [np.mean(vals[pos] >= t) for t in thresholds]
    fpr = [np.mean(vals[~pos] >= t) for t in thresholds]
    return float(np.trapezoid(tpr, fpr))


def random_case(rng):
    h, w = rng.integers(1, 9, size=2)
    while h * w < 2:
        h, w = rng.integers(1, 9, size=2)
    # few distinct values so that ties are common
    P = rng.integers(0, 4, (h, w)).astype(float) if rng.random() < 0.5 else rng.random((h, w))
    k = int(rng.integers(1, min(4, h * w - 1) + 1))
    flat = rng.choice(h * w, k, replace=False)
    mask = np.zeros(h * w, bool)
    mask[flat] = True
    return P, mask.reshape(h, w)


def test_auc_matches_threshold_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(300):
        P, mask = random_case(rng)
        assert auc(P, mask) == pytest.approx(brute_force_auc(P, mask), abs=1e-9)


def test_auc_extremes_and_ties():
    P = np.arange(9.0).reshape(3, 3)
    assert auc(P, FixationSet(((2, 2),))) == 1.0
    assert auc(P, FixationSet(((0, 0),))) == 0.0
    assert auc(np.ones((3, 3)), FixationSet(((1, 1),))) == 0.5


def test_auc_and_nss_need_fixations():
    with pytest.raises(ValueError):
        auc(np.ones((2, 2)), np.zeros((2, 2), bool))
    with pytest.raises(ValueError):
        nss(np.ones((2, 2)), np.zeros((2, 2), bool))
    with pytest.raises(ValueError):
        auc(np.ones((1, 2)), np.ones((1, 2), bool))


def test_nss_hand_computed():
    P = np.array([[1.0, 2.0], [3.0, 4.0]])
    z = (P - 2.5) / P.std()
    assert nss(P, FixationSet(((1, 1),))) == pytest.approx(z[1, 1])
    assert nss(P, [(0, 0), (1, 1)]) == pytest.approx((z[0, 0] + z[1, 1]) / 2)
    assert nss(np.ones((3, 3)), [(1, 1)]) == 0.0


# integer maps with power-of-two scales keep the transform exact
@given(arrays(np.float64, (5, 6), elements=st.integers(0, 50).map(float)),
       st.sampled_from([0.25, 0.5, 2.0, 8.0]), st.integers(-5, 5))
@settings(max_examples=50)
def test_nss_and_auc_are_affine_invariant(P, a, b):
    fix = FixationSet(((1, 2), (4, 0)))
    assert nss(a * P + b, fix) == pytest.approx(nss(P, fix), abs=1e-6)
    assert auc(a * P + b, fix) == pytest.approx(auc(P, fix), abs=1e-9)


def test_kl_uniform_prediction_vs_delta_is_log_n():
    P = np.full((10, 10), 0.01)
    Q = np.zeros((10, 10))
    Q[3, 7] = 1.0
    assert kl_div(P, Q) == pytest.approx(math.log(100), abs=1e-3)
    assert kl_div(P, P) == pytest.approx(0.0, abs=1e-6)


def test_kl_is_directional_and_non_negative():
    rng = np.random.default_rng(1)
    P = rng.random((6, 6)); P /= P.sum()
    Q = rng.random((6, 6)); Q /= Q.sum()
    assert kl_div(P, Q) > 0 and kl_div(Q, P) > 0
    assert kl_div(P, Q) != pytest.approx(kl_div(Q, P))
    with pytest.raises(ValueError):
        kl_div(P, Q[:5])


def test_kl_terms_batch_shape():
    P = torch.full((3, 4, 4), 1 / 16)
    assert kl_terms(P, P).shape == (3,)


def test_cc_fixtures():
    P = np.array([[1, 2, 3], [4, 5, 6], [7, 8, 9]], float)
    Q = np.array([[9, 8, 7], [6, 5, 4], [3, 2, 1]], float)
    assert cc(P, P) == pytest.approx(1.0)
    assert cc(P, Q) == pytest.approx(-1.0)
    R = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    p, r = P.ravel() - 5, R.ravel() - R.mean()
    assert cc(P, R) == pytest.approx(p @ r / math.sqrt((p @ p) * (r @ r)))
    with pytest.warns(RuntimeWarning):
        assert cc(np.ones((3, 3)), P) == 0.0


def test_fixation_set_from_continuous_coordinates():
    fs = FixationSet.from_xy([(0.2, 0.9), (3.99, 1.0), (4.0, 0.0), (-0.1, 1.0)], (2, 4))
    assert fs.points == ((0, 0), (3, 1))
    with pytest.raises(ValueError):
        FixationSet(((5, 5),)).mask((2, 2))


def test_report_aggregation_groups_games():
    class S:
        def __init__(self, game, P):
            self.game, self.target, self.fixations = game, P, FixationSet(((0, 0),))

    P = np.array([[0.7, 0.1], [0.1, 0.1]])
    samples = [S("a", P), S("a", P), S("b", P)]
    rep = evaluate_predictions(samples, lambda s: s.target, "GT")
    assert rep.games == ["a", "b"] and rep.models == ["GT"]
    assert rep.get("a", "GT", "AUC").n == 2
    assert rep.get("a", "GT", "KL").mean == pytest.approx(0.0, abs=1e-6)
    assert rep.get("b", "GT", "CC").std == 0.0
    assert rep == evaluate_predictions(samples, lambda s: s.target, "GT")
    with pytest.raises(KeyError):
        rep.get("c", "GT", "AUC")
    assert isinstance(MetricsReport().metadata["kl_eps"], float)
