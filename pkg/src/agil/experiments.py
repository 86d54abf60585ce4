"""Declarative experiment configs (YAML) and their runners.

A config names a protocol, where its data comes from, and the training
settings; the same (config, seed, data) always produces the same output bytes.
See ``configs/`` for one file per protocol and README.md for the schema.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from agil.agent import ToyConfig, toy_env
from agil.data_model import DatasetSplit, Trajectory, load_trials, split_train_test
from agil.errors import ConfigurationError
from agil.gaze_net import GazeNetConfig, GazeTrainConfig, build_gaze_net, train_gaze
from agil.harness import (compare_policies, compare_rollouts, cross_subject_matrix,
                          learning_curve, render_report, run_gaze_ablation)
from agil.pipeline import FeatureStore
from agil.policy_net import PolicyConfig, PolicyTrainConfig
from agil.synthetic_data import SyntheticSpec, generate, subject_pair

log = logging.getLogger(__name__)

PROTOCOLS = ("ablation", "curve", "cross_subject", "policies", "rollout")


@dataclass
class ExperimentConfig:
    protocol: str
    name: str = ""
    seed: int = 0
    data: dict = field(default_factory=lambda: {"synth": {"task": "dot_gaze", "n_frames": 500}})
    test_fraction: float = 0.2
    channels: str = "I+M"
    configs: list = field(default_factory=lambda: ["I", "I+S", "I+M", "I+S+M"])
    fractions: list = field(default_factory=lambda: [0.1, 0.25, 0.5, 1.0])
    variants: list = field(default_factory=lambda: ["plain", "attention"])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    train_trials: int = 1
    episodes: int = 100
    eta: float = 1.0
    max_steps: int | None = None
    toy: dict = field(default_factory=dict)
    gaze_net: dict = field(default_factory=dict)
    gaze_train: dict = field(default_factory=dict)
    policy_net: dict = field(default_factory=dict)
    policy_train: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigurationError(f"unknown protocol {self.protocol!r}; expected {PROTOCOLS}")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: expected a mapping")
        return cls.from_dict(raw)

    def with_overrides(self, **kw: Any) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    # typed views
    def gaze_net_config(self) -> GazeNetConfig:
        return GazeNetConfig(**self.gaze_net)

    def gaze_train_config(self) -> GazeTrainConfig:
        return GazeTrainConfig(**self.gaze_train)

    def policy_net_config(self) -> PolicyConfig:
        return PolicyConfig(**self.policy_net)

    def policy_train_config(self) -> PolicyTrainConfig:
        return PolicyTrainConfig(**self.policy_train)


def _synth_spec(raw: dict, seed: int) -> SyntheticSpec:
    raw = dict(raw)
    raw.setdefault("seed", seed)
    return SyntheticSpec(**raw)


def load_data(cfg: ExperimentConfig, data_path: str | Path | None = None) -> list[Trajectory]:
    """Trajectories from ``data_path`` if given, else from the config's data section."""
    if data_path is not None:
        return load_trials(data_path)
    if "path" in cfg.data:
        return load_trials(cfg.data["path"])
    if "synth" in cfg.data:
        return generate(_synth_spec(cfg.data["synth"], cfg.seed))
    if "subjects" in cfg.data:
        sub = cfg.data["subjects"]
        pairs = subject_pair(sub.get("kind", "divergent"), sub.get("n_frames", 400),
                             sub.get("seed", cfg.seed), sub.get("frames_per_trial", 100))
        return [t for trials in pairs.values() for t in trials]
    raise ConfigurationError("data section needs 'path', 'synth' or 'subjects'")


def make_split(cfg: ExperimentConfig, trajs: list[Trajectory]) -> DatasetSplit:
    return split_train_test(trajs, cfg.test_fraction, cfg.seed)


def run_experiment(cfg: ExperimentConfig, data_path: str | Path | None = None,
                   store: FeatureStore | None = None):
    """Run one protocol; returns its report object (render with ``render_report``)."""
    store = store or FeatureStore()
    if cfg.protocol == "rollout":
        return _run_rollout(cfg, data_path, store)
    trajs = load_data(cfg, data_path)
    if cfg.protocol == "cross_subject":
        by_subject: dict[str, list[Trajectory]] = {}
        for t in trajs:
            by_subject.setdefault(t.subject_id, []).append(t)
        return cross_subject_matrix(by_subject, cfg.channels, cfg.seed, cfg.gaze_net_config(),
                                    cfg.gaze_train_config(), store,
                                    n_train_trials=cfg.train_trials)
    split = make_split(cfg, trajs)
    if cfg.protocol == "ablation":
        return run_gaze_ablation(split, cfg.configs, seed=cfg.seed,
                                 net_config=cfg.gaze_net_config(),
                                 train_config=cfg.gaze_train_config(), store=store)
    if cfg.protocol == "curve":
        return learning_curve(split, cfg.fractions, cfg.channels, cfg.seed, cfg.gaze_net_config(),
                              cfg.gaze_train_config(), store)
    gaze = _train_gaze_for(cfg, split, store)
    report, _ = compare_policies(split, cfg.variants, gaze, cfg.seeds, cfg.policy_net_config(),
                                 cfg.policy_train_config(), store)
    return report


def _train_gaze_for(cfg: ExperimentConfig, split: DatasetSplit, store: FeatureStore):
    model = build_gaze_net(cfg.channels, replace(cfg.gaze_net_config(), seed=cfg.seed))
    model, _ = train_gaze(model, split, replace(cfg.gaze_train_config(), seed=cfg.seed), store)
    return model


def _run_rollout(cfg: ExperimentConfig, data_path, store: FeatureStore):
    """Train Plain and Attention on demonstrations, then play both in the toy game."""
    trajs = load_data(cfg, data_path)
    split = make_split(cfg, trajs)
    gaze = _train_gaze_for(cfg, split, store)
    _, models = compare_policies(split, cfg.variants, gaze, [cfg.seed], cfg.policy_net_config(),
                                 cfg.policy_train_config(), store)
    agents = {v: (models[(v, cfg.seed)], gaze if v != "plain" else None) for v in cfg.variants}
    toy = ToyConfig(**cfg.toy)
    return compare_rollouts(lambda: toy_env(toy), agents, cfg.episodes, cfg.seed, cfg.eta,
                            max_steps=cfg.max_steps)


def write_report(report, out: str | Path) -> Path:
    """CSV next to a markdown rendering (``.md``) of the same report."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_report(report, "csv"))
    out.with_suffix(".md").write_text(render_report(report, "markdown"))
    return out
