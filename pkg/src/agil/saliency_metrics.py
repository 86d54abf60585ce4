"""Gaze-prediction metrics (NSS, AUC-Judd, KL, CC) and report aggregation.

``P`` is always the predicted map and ``Q`` the ground truth. NSS and AUC are
location based and take fixations in map pixel coordinates; KL and CC compare
two distributions.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

log = logging.getLogger(__name__)

KL_EPS = 1e-10
METRICS = ("NSS", "AUC", "KL", "CC")
AUC_VARIANT = "judd"
KL_AGGREGATION = "per-frame mean"


@dataclass(frozen=True)
class FixationSet:
    points: tuple[tuple[int, int], ...]

    @classmethod
    def from_xy(cls, xy: Iterable[Sequence[float]], shape: tuple[int, int]) -> "FixationSet":
        """Continuous map coordinates -> containing pixels; points off the map are dropped."""
        h, w = shape
        pts = []
        for x, y in xy:
            if 0.0 <= x < w and 0.0 <= y < h:
                pts.append((int(math.floor(x)), int(math.floor(y))))
        return cls(tuple(pts))

    def mask(self, shape: tuple[int, int]) -> np.ndarray:
        h, w = shape
        m = np.zeros(shape, dtype=bool)
        for x, y in self.points:
            if not (0 <= x < w and 0 <= y < h):
                raise ValueError(f"fixation {(x, y)} outside {w}x{h} map")
            m[y, x] = True
        return m


def _as_mask(fix, shape) -> np.ndarray:
    if isinstance(fix, FixationSet):
        return fix.mask(shape)
    arr = np.asarray(fix)
    if arr.dtype == bool and arr.shape == shape:
        return arr
    return FixationSet(tuple((int(x), int(y)) for x, y in arr)).mask(shape)


def nss(P: np.ndarray, fix) -> float:
    """Mean of the z-scored map over fixated pixels (0 for a constant map)."""
    P = np.asarray(P, dtype=np.float64)
    mask = _as_mask(fix, P.shape)
    if not mask.any():
        raise ValueError("NSS needs at least one fixation")
    std = P.std()
    # rounding noise on a constant map is not structure
    if std <= 1e-12 * np.abs(P).max():
        return 0.0
    return float(((P - P.mean()) / std)[mask].mean())


def auc(P: np.ndarray, fix) -> float:
    """AUC-Judd: ROC area with fixated pixels positive and every other pixel negative.

    Thresholds sweep all distinct map values, so the area equals the
    Mann-Whitney statistic with ties counted one half.
    """
    P = np.asarray(P, dtype=np.float64)
    mask = _as_mask(fix, P.shape)
    n_pos = int(mask.sum())
    n_neg = mask.size - n_pos
    if n_pos == 0:
        raise ValueError("AUC needs at least one fixation")
    if n_neg == 0:
        raise ValueError("AUC needs at least one non-fixated pixel")
    ranks = rankdata(P.ravel(), method="average")
    rank_sum = ranks[mask.ravel()].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def kl_terms(P: torch.Tensor, Q: torch.Tensor, eps: float = KL_EPS) -> torch.Tensor:
    """Per-map regularised KL, summed over the trailing two (spatial) dimensions.

    This is the single definition used both as the training loss and as the
    evaluation metric.
    """
    if P.shape != Q.shape:
        raise ValueError(f"shape mismatch: {tuple(P.shape)} vs {tuple(Q.shape)}")
    return (Q * torch.log(eps + Q / (eps + P))).sum(dim=(-2, -1))


def kl_div(P: np.ndarray, Q: np.ndarray, eps: float = KL_EPS) -> float:
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ValueError(f"shape mismatch: {P.shape} vs {Q.shape}")
    return float(kl_terms(torch.from_numpy(P), torch.from_numpy(Q), eps))


def cc(P: np.ndarray, Q: np.ndarray) -> float:
    """Pearson correlation over pixels; 0 (with a warning) if either map is constant."""
    P = np.asarray(P, dtype=np.float64).ravel()
    Q = np.asarray(Q, dtype=np.float64).ravel()
    if P.shape != Q.shape:
        raise ValueError(f"shape mismatch: {P.shape} vs {Q.shape}")
    p = P - P.mean()
    q = Q - Q.mean()
    denom = math.sqrt(float(np.dot(p, p)) * float(np.dot(q, q)))
    if denom == 0.0:
        warnings.warn("CC undefined for a constant map; returning 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.clip(np.dot(p, q) / denom, -1.0, 1.0))


def frame_metrics(P: np.ndarray, Q: np.ndarray, fix) -> dict[str, float]:
    return {"NSS": nss(P, fix), "AUC": auc(P, fix), "KL": kl_div(P, Q), "CC": cc(P, Q)}


# -- reports ------------------------------------------------------------------


@dataclass(frozen=True)
class MetricRow:
    game: str
    model: str
    metric: str
    mean: float
    std: float
    n: int


@dataclass
class MetricsReport:
    rows: list[MetricRow] = field(default_factory=list)
    metadata: dict = field(default_factory=lambda: {
        "auc_variant": AUC_VARIANT, "kl_aggregation": KL_AGGREGATION, "kl_eps": KL_EPS})

    def add(self, game: str, model: str, values: dict[str, Sequence[float]]) -> None:
        for metric in METRICS:
            v = np.asarray(values[metric], dtype=np.float64)
            self.rows.append(MetricRow(game, model, metric, float(v.mean()) if v.size else math.nan,
                                       float(v.std()) if v.size else math.nan, int(v.size)))

    def get(self, game: str, model: str, metric: str) -> MetricRow:
        for row in self.rows:
            if (row.game, row.model, row.metric) == (game, model, metric):
                return row
        raise KeyError((game, model, metric))

    @property
    def models(self) -> list[str]:
        return list(dict.fromkeys(r.model for r in self.rows))

    @property
    def games(self) -> list[str]:
        return list(dict.fromkeys(r.game for r in self.rows))

    def __eq__(self, other):
        if not isinstance(other, MetricsReport):
            return NotImplemented
        return self.rows == other.rows


def aggregate(game: str, model: str, per_frame: list[dict[str, float]], report: MetricsReport) -> None:
    values = {m: [f[m] for f in per_frame] for m in METRICS}
    report.add(game, model, values)


def evaluate_predictions(samples, predict: Callable, model_name: str,
                         report: MetricsReport | None = None) -> MetricsReport:
    """Per-frame metrics for ``predict(sample) -> P`` grouped by game.

    ``samples`` yields objects with ``game``, ``target`` (Q) and ``fixations``.
    Frames are reduced in their given order so the result is reproducible.
    """
    report = report if report is not None else MetricsReport()
    by_game: dict[str, list[dict[str, float]]] = {}
    for s in samples:
        P = predict(s)
        by_game.setdefault(s.game, []).append(frame_metrics(P, s.target, s.fixations))
    for game, rows in by_game.items():
        aggregate(game, model_name, rows, report)
    return report
