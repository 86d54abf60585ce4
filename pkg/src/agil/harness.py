"""Experiment protocols: ablation grid, policy and rollout comparisons, learning
curves, cross-subject matrices, and deterministic report rendering."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Mapping, Sequence

import numpy as np

from agil.agent import EpisodeScore, rollout, summarize_scores
from agil.data_model import DatasetSplit, Trajectory
from agil.errors import ConfigurationError, AgilError, InsufficientDataError, SchemaError
from agil.gaze_net import (LEARNED_CONFIGS, GazeChannelSet, GazeNetConfig, GazeTrainConfig,
                           baseline_predictor, build_gaze_net, eval_samples, evaluate_gaze_model,
                           gaze_forward, train_gaze)
from agil.pipeline import FeatureStore
from agil.policy_net import (PolicyConfig, PolicyTrainConfig, PolicyVariant, action_accuracy,
                             build_policy, train_policy)
from agil.saliency_metrics import METRICS, MetricRow, MetricsReport, cc

log = logging.getLogger(__name__)

ABLATION_ROWS = ("S", "M", "I", "I+S", "I+M", "I+S+M")


def _as_channels(c) -> GazeChannelSet:
    return c if isinstance(c, GazeChannelSet) else GazeChannelSet.parse(c)


# -- gaze ablation ------------------------------------------------------------


def run_gaze_ablation(split: DatasetSplit, configs: Sequence = LEARNED_CONFIGS,
                      baselines: Sequence[str] = ("saliency", "motion"), seed: int = 0,
                      net_config: GazeNetConfig | None = None,
                      train_config: GazeTrainConfig | None = None,
                      store: FeatureStore | None = None) -> MetricsReport:
    """Evaluate the non-learned baselines and train/evaluate every learned channel set
    with one shared seed on one shared test set."""
    if not split.train or not split.test:
        raise InsufficientDataError("ablation needs non-empty train and test sets")
    store = store or FeatureStore()
    net_config = replace(net_config or GazeNetConfig(), seed=seed)
    train_config = replace(train_config or GazeTrainConfig(), seed=seed)
    report = MetricsReport()
    report.metadata.update({"seed": seed, "failed": {}})
    cells = [("baseline", b) for b in baselines] + [("learned", _as_channels(c)) for c in configs]
    for kind, cell in cells:
        label = baseline_predictor(cell).label if kind == "baseline" else cell.label
        try:
            if kind == "baseline":
                evaluate_gaze_model(baseline_predictor(cell), split.test, store, report=report)
            else:
                model = build_gaze_net(cell, net_config)
                model, _ = train_gaze(model, split, train_config, store)
                evaluate_gaze_model(model, split.test, store, report=report)
        except AgilError as exc:
            log.error("ablation cell %s failed: %s", label, exc)
            report.metadata["failed"][label] = str(exc)
            for game in sorted({t.game for t in split.test}):
                report.add(game, label, {m: [] for m in METRICS})
    return report


# -- learning curves ----------------------------------------------------------


@dataclass
class LearningCurve:
    channels: str
    game: str
    points: list[tuple[int, float]] = field(default_factory=list)
    subsets: list[tuple[str, ...]] = field(default_factory=list)

    def __post_init__(self):
        xs = [p[0] for p in self.points]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValueError("learning-curve sizes must strictly increase")
        if any(not 0.0 <= p[1] <= 1.0 for p in self.points if not math.isnan(p[1])):
            raise ValueError("AUC values must lie in [0, 1]")


def nested_subsets(trajs: Sequence[Trajectory], fractions: Sequence[float],
                   seed: int) -> list[tuple[float, list[Trajectory]]]:
    """Prefixes of one seed-fixed permutation, so smaller subsets nest in larger ones."""
    if not fractions:
        raise ValueError("no fractions given")
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise ValueError("fractions must strictly increase")
    ordered = sorted(trajs, key=lambda t: t.trial_id)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    shuffled = [ordered[i] for i in perm]
    out = []
    for f in fractions:
        k = int(math.floor(f * len(shuffled) + 1e-9))
        if k == 0:
            warnings.warn(f"fraction {f} selects no trajectory; skipped", stacklevel=2)
            continue
        out.append((f, shuffled[:k]))
    return out


def learning_curve(split: DatasetSplit, fractions: Sequence[float], channels="I+M",
                   seed: int = 0, net_config: GazeNetConfig | None = None,
                   train_config: GazeTrainConfig | None = None,
                   store: FeatureStore | None = None) -> LearningCurve:
    channels = _as_channels(channels)
    store = store or FeatureStore()
    net_config = replace(net_config or GazeNetConfig(), seed=seed)
    train_config = replace(train_config or GazeTrainConfig(), seed=seed)
    games = sorted({t.game for t in split.test})
    points, subsets = [], []
    for _, subset in nested_subsets(split.train, fractions, seed):
        n_frames = sum(t.n_valid for t in subset)
        if points and n_frames <= points[-1][0]:
            continue
        model = build_gaze_net(channels, net_config)
        model, _ = train_gaze(model, subset, train_config, store)
        report = evaluate_gaze_model(model, split.test, store)
        aucs = [report.get(g, channels.label, "AUC").mean for g in games]
        points.append((n_frames, float(np.mean(aucs))))
        subsets.append(tuple(t.trial_id for t in subset))
    return LearningCurve(channels.label, ",".join(games), points, subsets)


# -- cross-subject matrices ---------------------------------------------------


@dataclass
class CrossSubjectMatrix:
    subjects: list[str]
    cc: np.ndarray
    train_trials: dict[str, tuple[str, ...]] = field(default_factory=dict)
    test_trials: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.subjects)
        if self.cc.shape != (n, n):
            raise ValueError(f"matrix must be {n}x{n}, got {self.cc.shape}")
        finite = self.cc[np.isfinite(self.cc)]
        if np.any(finite < -1.0 - 1e-12) or np.any(finite > 1.0 + 1e-12):
            raise ValueError("correlations must lie in [-1, 1]")

    @property
    def diagonal_mean(self) -> float:
        d = np.diag(self.cc)
        return float(np.nanmean(d)) if np.isfinite(d).any() else math.nan

    @property
    def off_diagonal_mean(self) -> float:
        mask = ~np.eye(len(self.subjects), dtype=bool)
        vals = self.cc[mask]
        return float(np.nanmean(vals)) if np.isfinite(vals).any() else math.nan


def _mean_cc(model, trajs: Sequence[Trajectory], store: FeatureStore) -> float:
    need_sal = "saliency" in model.channels
    vals = []
    for s in eval_samples(trajs, store, need_sal):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            vals.append(cc(gaze_forward(model, s.feats.gaze_inputs(s.t, model.channels)), s.target))
    return float(np.mean(vals)) if vals else math.nan


def cross_subject_matrix(trials_by_subject: Mapping[str, Sequence[Trajectory]], channels="I+M",
                         seed: int = 0, net_config: GazeNetConfig | None = None,
                         train_config: GazeTrainConfig | None = None,
                         store: FeatureStore | None = None,
                         n_train_trials: int = 1) -> CrossSubjectMatrix:
    """Train on each subject's first ``n_train_trials`` trials (by trial id); test on
    every subject's remaining trials.

    Row = training subject, column = test subject. A subject without a held-out
    trial yields a missing (NaN) column.
    """
    if len(trials_by_subject) < 2:
        raise InsufficientDataError("need at least two subjects")
    if n_train_trials < 1:
        raise ConfigurationError("n_train_trials must be at least 1")
    channels = _as_channels(channels)
    store = store or FeatureStore()
    net_config = replace(net_config or GazeNetConfig(), seed=seed)
    train_config = replace(train_config or GazeTrainConfig(), seed=seed)
    subjects = sorted(trials_by_subject)
    train, test = {}, {}
    for s in subjects:
        trials = sorted(trials_by_subject[s], key=lambda t: t.trial_id)
        if not trials:
            raise InsufficientDataError(f"subject {s} has no trials")
        train[s], test[s] = trials[:n_train_trials], trials[n_train_trials:]
        if not test[s]:
            warnings.warn(f"subject {s} has no held-out trial; its column is missing", stacklevel=2)
    matrix = np.full((len(subjects), len(subjects)), np.nan)
    for i, s in enumerate(subjects):
        model = build_gaze_net(channels, net_config)
        model, _ = train_gaze(model, list(train[s]), train_config, store)
        train_ids = {t.trial_id for t in train[s]}
        for j, u in enumerate(subjects):
            leaked = {t.trial_id for t in test[u]} & train_ids
            assert not leaked, f"training trials {sorted(leaked)} reused for testing"
            if test[u]:
                matrix[i, j] = _mean_cc(model, test[u], store)
    return CrossSubjectMatrix(subjects, matrix,
                              {s: tuple(t.trial_id for t in train[s]) for s in subjects},
                              {s: tuple(t.trial_id for t in test[s]) for s in subjects})


# -- policy comparison --------------------------------------------------------


@dataclass(frozen=True)
class PolicyRow:
    game: str
    variant: str
    seed: int
    accuracy: float


@dataclass
class PolicyReport:
    rows: list[PolicyRow] = field(default_factory=list)

    def summary(self) -> list[dict]:
        out = []
        for game in dict.fromkeys(r.game for r in self.rows):
            for variant in dict.fromkeys(r.variant for r in self.rows):
                acc = [r.accuracy for r in self.rows if (r.game, r.variant) == (game, variant)]
                if acc:
                    out.append({"game": game, "variant": variant,
                                "accuracy_mean": float(np.mean(acc)),
                                "accuracy_std": float(np.std(acc)), "n_seeds": len(acc)})
        return out

    def accuracies(self, variant: str, game: str | None = None) -> list[float]:
        return [r.accuracy for r in self.rows
                if r.variant == variant and (game is None or r.game == game)]


def compare_policies(split: DatasetSplit, variants: Sequence = ("plain", "attention"),
                     gaze_model=None, seeds: Sequence[int] = (0, 1, 2),
                     policy_config: PolicyConfig | None = None,
                     train_config: PolicyTrainConfig | None = None,
                     store: FeatureStore | None = None, report: PolicyReport | None = None,
                     ) -> tuple[PolicyReport, dict]:
    """Train each variant once per seed; held-out action accuracy per game."""
    store = store or FeatureStore()
    report = report if report is not None else PolicyReport()
    models = {}
    games = sorted({t.game for t in split.test})
    for seed in seeds:
        for v in variants:
            variant = PolicyVariant.parse(v)
            gaze = gaze_model if variant is not PolicyVariant.PLAIN else None
            model = build_policy(variant, replace(policy_config or PolicyConfig(), seed=seed),
                                 gaze)
            model, _ = train_policy(model, split.train,
                                    replace(train_config or PolicyTrainConfig(), seed=seed), store)
            for game in games:
                acc = action_accuracy(model, [t for t in split.test if t.game == game], store)
                report.rows.append(PolicyRow(game, variant.value, seed, acc))
            models[(variant.value, seed)] = model
    return report, models


# -- rollout comparison -------------------------------------------------------


@dataclass
class RolloutReport:
    scores: dict[str, list[EpisodeScore]] = field(default_factory=dict)
    game: str = "toy"

    def summary(self) -> list[dict]:
        return [{"game": self.game, "variant": name, **summarize_scores(s)}
                for name, s in self.scores.items()]


def compare_rollouts(env_factory, agents: Mapping[str, tuple], episodes: int = 100,
                     base_seed: int = 0, eta: float = 1.0, game: str = "toy",
                     **rollout_kw) -> RolloutReport:
    """``agents`` maps a name to ``(policy, gaze_model_or_None)``; every agent plays
    the same episode seeds in a fresh environment."""
    report = RolloutReport(game=game)
    for name, (policy, gaze) in agents.items():
        report.scores[name] = rollout(env_factory(), policy, gaze, episodes, base_seed, eta,
                                      **rollout_kw)
    return report


# -- rendering ----------------------------------------------------------------

METRICS_HEADER = ("game", "model", "metric", "mean", "std", "n")


def _fmt(x: float) -> str:
    return repr(float(x))


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def metrics_csv(report: MetricsReport, count_label: str = "n") -> str:
    header = METRICS_HEADER[:-1] + (count_label,)
    return _csv(header, [(r.game, r.model, r.metric, _fmt(r.mean), _fmt(r.std), r.n)
                         for r in report.rows])


def parse_metrics_csv(text: str) -> MetricsReport:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("empty report file") from None
    if tuple(header[:5]) != METRICS_HEADER[:5] or len(header) != 6 or header[5] not in ("n", "n_frames"):
        raise SchemaError(f"unexpected report header {header}")
    report = MetricsReport()
    for lineno, row in enumerate(reader, start=2):
        if len(row) != 6:
            raise SchemaError(f"line {lineno}: expected 6 fields")
        g, m, metric, mean, std, n = row
        report.rows.append(MetricRow(g, m, metric, float(mean), float(std), int(n)))
    return report


def _pm(mean: float, std: float, digits: int) -> str:
    if math.isnan(mean):
        return "n/a"
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def _markdown_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def _metrics_markdown(report: MetricsReport) -> str:
    """One block per metric, models as rows and games as columns."""
    games, models = report.games, report.models
    out = []
    for metric in METRICS:
        rows = []
        for model in models:
            cells = []
            for g in games:
                try:
                    r = report.get(g, model, metric)
                    cells.append(_pm(r.mean, r.std, 3))
                except KeyError:
                    cells.append("")
            rows.append([model] + cells)
        out.append(f"**{metric}**\n\n" + _markdown_table(["Model"] + games, rows))
    return "\n".join(out)


def render_report(report, fmt: str = "csv", count_label: str = "n") -> str:
    """Deterministic CSV or markdown text for any harness result."""
    if fmt not in ("csv", "markdown"):
        raise ValueError(f"unknown report format {fmt!r}; use 'csv' or 'markdown'")
    if isinstance(report, MetricsReport):
        return metrics_csv(report, count_label) if fmt == "csv" else _metrics_markdown(report)
    if isinstance(report, LearningCurve):
        rows = [(report.game, report.channels, n, _fmt(a)) for n, a in report.points]
        header = ("game", "channels", "training_frames", "auc")
        if fmt == "csv":
            return _csv(header, rows)
        return _markdown_table(header, [(g, c, n, f"{float(a):.4f}") for g, c, n, a in rows])
    if isinstance(report, CrossSubjectMatrix):
        if fmt == "csv":
            rows = [[s] + [_fmt(v) for v in report.cc[i]] for i, s in enumerate(report.subjects)]
            rows.append(["diagonal_mean", _fmt(report.diagonal_mean)] + [""] * (len(report.subjects) - 1))
            rows.append(["off_diagonal_mean", _fmt(report.off_diagonal_mean)]
                        + [""] * (len(report.subjects) - 1))
            return _csv(["train\\test"] + report.subjects, rows)
        rows = [[s] + [f"{v:.3f}" for v in report.cc[i]] for i, s in enumerate(report.subjects)]
        return (_markdown_table(["train \\ test"] + report.subjects, rows)
                + f"\ndiagonal mean {report.diagonal_mean:.3f}, "
                  f"off-diagonal mean {report.off_diagonal_mean:.3f}\n")
    if isinstance(report, PolicyReport):
        summary = report.summary()
        if fmt == "csv":
            return _csv(("game", "variant", "accuracy_mean", "accuracy_std", "n_seeds"),
                        [(r["game"], r["variant"], _fmt(r["accuracy_mean"]),
                          _fmt(r["accuracy_std"]), r["n_seeds"]) for r in summary])
        variants = list(dict.fromkeys(r["variant"] for r in summary))
        games = list(dict.fromkeys(r["game"] for r in summary))
        cell = {(r["game"], r["variant"]): _pm(r["accuracy_mean"], r["accuracy_std"], 1)
                for r in summary}
        return _markdown_table(["Game"] + [PolicyVariant.parse(v).label for v in variants],
                               [[g] + [cell.get((g, v), "") for v in variants] for g in games])
    if isinstance(report, RolloutReport):
        summary = report.summary()
        if fmt == "csv":
            return _csv(("game", "variant", "score_mean", "score_std", "n_ok", "n_failed"),
                        [(r["game"], r["variant"], _fmt(r["mean"]), _fmt(r["std"]), r["n_ok"],
                          r["n_failed"]) for r in summary])
        return _markdown_table(["Game", "Agent", "Score", "Failed episodes"],
                               [[r["game"], r["variant"], _pm(r["mean"], r["std"], 2),
                                 r["n_failed"]] for r in summary])
    if isinstance(report, Sequence) and all(isinstance(s, EpisodeScore) for s in report):
        rows = [(s.episode_index, s.seed, _fmt(s.score), s.steps, s.status) for s in report]
        header = ("episode_index", "seed", "score", "steps", "status")
        return _csv(header, rows) if fmt == "csv" else _markdown_table(header, rows)
    raise TypeError(f"cannot render {type(report).__name__}")


def reference_values() -> dict:
    """Published reference numbers shipped with the package (for side-by-side display)."""
    text = resources.files("agil").joinpath("data/reference_values.json").read_text()
    return json.loads(text)


def reference_markdown(section: str = "gaze_metrics") -> str:
    ref = reference_values()
    if section == "gaze_metrics":
        report = MetricsReport()
        for r in ref[section]:
            report.rows.append(MetricRow(r["game"], r["model"], r["metric"], r["mean"], 0.0, 0))
        return _metrics_markdown(report)
    if section == "policy_accuracy":
        rows = ref[section]
        games = list(dict.fromkeys(r["game"] for r in rows))
        variants = list(dict.fromkeys(r["variant"] for r in rows))
        cell = {(r["game"], r["variant"]): _pm(r["accuracy_mean"], r["accuracy_std"], 1) for r in rows}
        return _markdown_table(["Game"] + [v.capitalize() for v in variants],
                               [[g] + [cell[(g, v)] for v in variants] for g in games])
    if section == "rollout_scores":
        rows = ref[section]
        return _markdown_table(["Game", "Agent", "Score"],
                               [[r["game"], r["variant"], _pm(r["score_mean"], r["score_std"], 1)]
                                for r in rows])
    raise ValueError(f"unknown reference section {section!r}")
