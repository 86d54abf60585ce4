"""Imitation policies: Plain, Foveated and Attention-guided action classifiers.

Every channel is the DQN convolution stack plus a 512-unit hidden layer. The
two-channel variants average the hidden features of the raw and the
gaze-modulated channel before the shared action head.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from agil.data_model import (FRAME_SIZE, N_ACTIONS, PREPROCESSING, DatasetSplit,
                             StackedObservation, Trajectory, stack_indices)
from agil.errors import ConfigurationError, DataError, TrainingDivergedError
from agil.gaze_net import (DQN_ENCODER, GazeNet, load_gaze_model, predict_trajectory,
                           set_deterministic)
from agil.pipeline import FeatureStore, TrajectoryFeatures
from agil.retina import VisualGeometry, foveate

log = logging.getLogger(__name__)


class PolicyVariant(str, Enum):
    PLAIN = "plain"
    FOVEATED = "foveated"
    ATTENTION = "attention"

    @classmethod
    def parse(cls, name: str | "PolicyVariant") -> "PolicyVariant":
        if isinstance(name, PolicyVariant):
            return name
        try:
            return cls(name.lower())
        except ValueError:
            raise ConfigurationError(f"unknown policy variant {name!r}") from None

    @property
    def label(self) -> str:
        return self.value.capitalize()


@dataclass(frozen=True)
class PolicyConfig:
    encoder: tuple = DQN_ENCODER
    input_size: int = FRAME_SIZE
    depth: int = 4
    hidden: int = 512
    n_actions: int = N_ACTIONS
    seed: int = 0
    version: str = "policy-1"


def _conv_out(size: int, spec) -> int:
    for _, k, s in spec:
        size = (size - k) // s + 1
    if size < 1:
        raise ConfigurationError("encoder reduces the input below one pixel")
    return size


class _Channel(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        layers: list[nn.Module] = []
        ch = cfg.depth
        for filters, k, s in cfg.encoder:
            layers += [nn.Conv2d(ch, filters, k, s), nn.ReLU()]
            ch = filters
        self.conv = nn.Sequential(*layers)
        side = _conv_out(cfg.input_size, cfg.encoder)
        self.fc = nn.Linear(ch * side * side, cfg.hidden)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.fc(self.conv(x).flatten(1)))


class PolicyNet(nn.Module):
    def __init__(self, variant: PolicyVariant, config: PolicyConfig, gaze_model: GazeNet | None = None):
        super().__init__()
        self.variant = variant
        self.config = config
        torch.manual_seed(config.seed)
        self.raw = _Channel(config)
        self.aux = _Channel(config) if variant is not PolicyVariant.PLAIN else None
        self.head = nn.Linear(config.hidden, config.n_actions)
        # the gaze model is a frozen collaborator, not part of this network's parameters
        object.__setattr__(self, "gaze_model", gaze_model)

    def forward(self, obs: torch.Tensor, aux: torch.Tensor | None = None) -> torch.Tensor:
        """Action logits of shape (B, n_actions)."""
        h = self.raw(obs)
        if self.aux is not None:
            if aux is None:
                raise ValueError(f"{self.variant.label} policy needs its second-channel input")
            h = (h + self.aux(aux)) / 2.0
        return self.head(h)


def build_policy(variant: PolicyVariant | str, config: PolicyConfig | None = None,
                 gaze_model: GazeNet | None = None) -> PolicyNet:
    variant = PolicyVariant.parse(variant)
    if variant is PolicyVariant.ATTENTION and gaze_model is None:
        raise ConfigurationError("the Attention policy needs a trained gaze model")
    if gaze_model is not None:
        gaze_model.eval()
        for p in gaze_model.parameters():
            p.requires_grad_(False)
    return PolicyNet(variant, config or PolicyConfig(), gaze_model)


def apply_attention_mask(obs: StackedObservation | np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Multiply every stacked frame by ``mask`` rescaled to a maximum of 1."""
    data = obs.data if isinstance(obs, StackedObservation) else np.asarray(obs)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != data.shape[-2:]:
        raise ValueError(f"mask shape {mask.shape} does not match frames {data.shape[-2:]}")
    peak = mask.max()
    scaled = mask / peak if peak > 0 else np.zeros_like(mask)
    return (data * scaled).astype(np.float32)


def map_gaze_point(P: np.ndarray) -> tuple[float, float]:
    """Most probable pixel (x, y) of a predicted map."""
    y, x = np.unravel_index(int(np.argmax(P)), P.shape)
    return float(x), float(y)


def foveated_frames(gray: np.ndarray, gaze_xy: np.ndarray, geom: VisualGeometry) -> np.ndarray:
    """Foveate each preprocessed frame at its own gaze point (84x84 map coordinates).

    Frames without a gaze point reuse the latest earlier one, else the centre.
    """
    out = np.empty_like(gray)
    h, w = gray.shape[-2:]
    last = (w / 2.0, h / 2.0)
    for i, frame in enumerate(gray):
        if np.all(np.isfinite(gaze_xy[i])):
            last = (min(max(gaze_xy[i][0], 0.0), w - 1.0), min(max(gaze_xy[i][1], 0.0), h - 1.0))
        out[i] = foveate(frame, last, geom).image
    return out


def policy_forward(model: PolicyNet, obs: StackedObservation | np.ndarray,
                   aux: np.ndarray | None = None) -> np.ndarray:
    """Action distribution for one observation.

    ``aux`` is the predicted gaze map for the Attention variant and the
    foveated 4x84x84 stack for the Foveated variant.
    """
    data = obs.data if isinstance(obs, StackedObservation) else np.asarray(obs)
    second = None
    if model.variant is PolicyVariant.ATTENTION:
        if aux is None:
            raise ValueError("the Attention policy needs a gaze map")
        second = apply_attention_mask(data, aux)
    elif model.variant is PolicyVariant.FOVEATED:
        if aux is None:
            raise ValueError("the Foveated policy needs a foveated stack")
        second = np.asarray(aux)
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        x = torch.as_tensor(data, dtype=dtype).unsqueeze(0)
        a = None if second is None else torch.as_tensor(second, dtype=dtype).unsqueeze(0)
        probs = torch.softmax(model(x, a), dim=1)[0].double().numpy()
    return probs


# -- training data ------------------------------------------------------------


@dataclass
class PolicyData:
    """Observation tensors, second-channel tensors and labels for a set of trajectories."""

    obs: np.ndarray
    aux: np.ndarray | None
    labels: np.ndarray
    trial_ids: list[str]

    def __len__(self):
        return len(self.labels)


def _check_labels(feats: TrajectoryFeatures, traj: Trajectory, n_actions: int) -> None:
    bad = np.flatnonzero((feats.actions < 0) | (feats.actions >= n_actions))
    if bad.size:
        rec = traj.records[int(bad[0])]
        raise DataError(f"trial {traj.trial_id} frame {rec.frame_id}: action {rec.action} "
                        f"outside the {n_actions}-action alphabet")


def policy_inputs(model: PolicyNet, trajs: Sequence[Trajectory], store: FeatureStore,
                  only_valid: bool = True) -> PolicyData:
    obs, aux, labels, ids = [], [], [], []
    gaze = model.gaze_model
    for traj in trajs:
        feats = store.get(traj)
        _check_labels(feats, traj, model.config.n_actions)
        frames = feats.valid_indices if only_valid else np.arange(len(feats))
        second = None
        if model.variant is PolicyVariant.ATTENTION:
            maps = predict_trajectory(gaze, feats)
        elif model.variant is PolicyVariant.FOVEATED:
            w, h = traj.geometry.screen_width_px, traj.geometry.screen_height_px
            scale = np.array([FRAME_SIZE / w, FRAME_SIZE / h])
            second = foveated_frames(feats.gray, feats.last_gaze * scale, traj.geometry)
        for t in frames:
            t = int(t)
            stack = feats.image_stack(t)
            obs.append(stack)
            if model.variant is PolicyVariant.ATTENTION:
                aux.append(apply_attention_mask(stack, maps[t]))
            elif second is not None:
                aux.append(second[stack_indices(t)])
            labels.append(int(feats.actions[t]))
            ids.append(traj.trial_id)
    return PolicyData(np.asarray(obs, np.float32).reshape(-1, 4, FRAME_SIZE, FRAME_SIZE),
                      np.asarray(aux, np.float32) if aux else None,
                      np.asarray(labels, np.int64), ids)


# -- training -----------------------------------------------------------------


@dataclass(frozen=True)
class PolicyTrainConfig:
    epochs: int = 8
    batch_size: int = 32
    lr: float = 2.5e-4
    weight_decay: float = 0.0
    class_weighting: bool = False
    seed: int = 0
    version: str = "policy-train-1"


@dataclass
class PolicyHistory:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self, path: Path) -> None:
        if not self.rows:
            Path(path).write_text("epoch\n")
            return
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            writer.writeheader()
            writer.writerows(self.rows)


def class_weights(labels: np.ndarray, n_actions: int) -> np.ndarray:
    """Inverse-frequency weights, normalised to mean 1 over the observed classes."""
    counts = np.bincount(labels, minlength=n_actions).astype(np.float64)
    w = np.zeros(n_actions)
    seen = counts > 0
    w[seen] = 1.0 / counts[seen]
    return w / w[seen].mean()


def _logits(model: PolicyNet, data: PolicyData, rows, dtype) -> torch.Tensor:
    x = torch.as_tensor(data.obs[rows], dtype=dtype)
    a = None if data.aux is None else torch.as_tensor(data.aux[rows], dtype=dtype)
    return model(x, a)


def predict_actions(model: PolicyNet, data: PolicyData, batch: int = 256) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for start in range(0, len(data), batch):
            rows = np.arange(start, min(start + batch, len(data)))
            out.append(_logits(model, data, rows, dtype).argmax(1).numpy())
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def train_policy(model: PolicyNet, split: DatasetSplit | Sequence[Trajectory],
                 config: PolicyTrainConfig | None = None,
                 store: FeatureStore | None = None) -> tuple[PolicyNet, PolicyHistory]:
    """Cross-entropy training on valid training frames; returns the final model."""
    cfg = config or PolicyTrainConfig()
    trajs = split.train if isinstance(split, DatasetSplit) else tuple(split)
    if not trajs:
        raise ValueError("training set is empty")
    store = store or FeatureStore()
    set_deterministic(cfg.seed)
    data = policy_inputs(model, trajs, store)
    if len(data) == 0:
        raise ValueError("training set has no valid frames")
    test = policy_inputs(model, split.test, store) if isinstance(split, DatasetSplit) else None
    dtype = next(model.parameters()).dtype
    weight = None
    if cfg.class_weighting:
        weight = torch.as_tensor(class_weights(data.labels, model.config.n_actions), dtype=dtype)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history = PolicyHistory()
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(data))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            y = torch.as_tensor(data.labels[rows])
            loss = F.cross_entropy(_logits(model, data, rows, dtype), y, weight=weight)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite policy loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(rows)
        row = {"epoch": epoch, "train_loss": total / len(data),
               "train_acc": float(np.mean(predict_actions(model, data) == data.labels) * 100)}
        if test is not None and len(test):
            row["test_acc"] = float(np.mean(predict_actions(model, test) == test.labels) * 100)
        row["wall_clock"] = time.perf_counter() - t0
        history.rows.append(row)
        log.info("policy %s epoch %d %s", model.variant.label, epoch, row)
    model.eval()
    return model, history


def action_accuracy(model: PolicyNet, test: DatasetSplit | Sequence[Trajectory],
                    store: FeatureStore | None = None) -> float:
    """Percentage of valid test frames whose most probable action is the recorded one."""
    trajs = test.test if isinstance(test, DatasetSplit) else tuple(test)
    data = policy_inputs(model, trajs, store or FeatureStore())
    if len(data) == 0:
        return math.nan
    return float(np.mean(predict_actions(model, data) == data.labels) * 100.0)


# -- persistence --------------------------------------------------------------


def save_policy(model: PolicyNet, path: str | Path, history: PolicyHistory | None = None,
                gaze_model_path: str | Path | None = None) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    torch.save({k: v for k, v in model.state_dict().items()}, out / "params.pt")
    meta = {"kind": "policy", "variant": model.variant.value, "net": asdict(model.config),
            "preprocessing": PREPROCESSING,
            "gaze_model": str(gaze_model_path) if gaze_model_path else None}
    (out / "config.json").write_text(json.dumps(meta, indent=2) + "\n")
    if history is not None:
        history.to_csv(out / "history.csv")
    return out


def load_policy(path: str | Path, gaze_model: GazeNet | None = None) -> PolicyNet:
    src = Path(path)
    meta = json.loads((src / "config.json").read_text())
    if meta.get("kind") != "policy":
        raise ConfigurationError(f"{src} does not hold a policy")
    net = dict(meta["net"])
    net["encoder"] = tuple(tuple(layer) for layer in net["encoder"])
    variant = PolicyVariant.parse(meta["variant"])
    if variant is PolicyVariant.ATTENTION and gaze_model is None and meta.get("gaze_model"):
        gaze_model = load_gaze_model(meta["gaze_model"])
    model = build_policy(variant, PolicyConfig(**net), gaze_model)
    model.load_state_dict(torch.load(src / "params.pt", weights_only=True))
    model.eval()
    return model


def clone_policy(model: PolicyNet) -> PolicyNet:
    twin = build_policy(model.variant, model.config, model.gaze_model)
    twin.load_state_dict(copy.deepcopy(model.state_dict()))
    return twin
