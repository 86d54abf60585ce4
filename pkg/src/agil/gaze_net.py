"""Multi-channel convolution-deconvolution gaze network.

Each enabled channel (image stack, Itti-Koch saliency, optical-flow motion) is
an encoder with the DQN convolution stack followed by a mirrored transposed
convolution decoder back to 84x84. Channel outputs are averaged and a spatial
softmax turns the result into a probability map.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from agil.data_model import FRAME_SIZE, PREPROCESSING, DatasetSplit, Trajectory
from agil.errors import ConfigurationError, TrainingDivergedError
from agil.features import FlowConfig
from agil.pipeline import FeatureStore, TrajectoryFeatures
from agil.retina import normalize_map
from agil.saliency_metrics import (MetricsReport, auc, evaluate_predictions, kl_terms)

log = logging.getLogger(__name__)

DQN_ENCODER = ((32, 8, 4), (64, 4, 2), (64, 3, 1))
CHANNEL_ORDER = ("image", "saliency", "motion")
_LETTERS = {"I": "image", "S": "saliency", "M": "motion"}


@dataclass(frozen=True)
class GazeChannelSet:
    image: bool = True
    saliency: bool = False
    motion: bool = False

    def __post_init__(self):
        if not (self.image or self.saliency or self.motion):
            raise ConfigurationError("a gaze model needs at least one input channel")

    @classmethod
    def parse(cls, label: str) -> "GazeChannelSet":
        flags = {}
        for part in label.replace(" ", "").upper().split("+"):
            if part not in _LETTERS:
                raise ConfigurationError(f"unknown channel {part!r} in {label!r}")
            flags[_LETTERS[part]] = True
        return cls(image=flags.get("image", False), saliency=flags.get("saliency", False),
                   motion=flags.get("motion", False))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c for c in CHANNEL_ORDER if getattr(self, c))

    @property
    def label(self) -> str:
        return "+".join(c[0].upper() for c in self.names)

    def __contains__(self, name: str) -> bool:
        return name in self.names


# the learned rows of the ablation grid
LEARNED_CONFIGS = tuple(GazeChannelSet.parse(s) for s in ("I", "I+S", "I+M", "I+S+M"))


@dataclass(frozen=True)
class GazeNetConfig:
    encoder: tuple = DQN_ENCODER
    input_size: int = FRAME_SIZE
    image_depth: int = 4
    motion_encoding: str = "magnitude"      # or "vector": dx, dy planes per transition
    fusion: str = "pre_softmax"             # or "post_softmax"
    output_init_scale: float = 0.1
    # flow inputs are clipped to +-motion_clip px/frame and divided by motion_scale
    motion_clip: float = 8.0
    motion_scale: float = 4.0
    seed: int = 0
    version: str = "gaze-1"

    @property
    def in_channels(self) -> dict[str, int]:
        motion = self.image_depth * (2 if self.motion_encoding == "vector" else 1)
        return {"image": self.image_depth, "saliency": 1, "motion": motion}


def _encoder_decoder(in_ch: int, spec: Sequence[tuple[int, int, int]], init_scale: float) -> nn.Sequential:
    layers: list[nn.Module] = []
    ch = in_ch
    for filters, k, s in spec:
        layers += [nn.Conv2d(ch, filters, k, s), nn.ReLU()]
        ch = filters
    outs = [in_ch_ for in_ch_, _, _ in spec[:-1]][::-1] + [1]
    for (_, k, s), filters in zip(reversed(spec), outs):
        layers += [nn.ConvTranspose2d(ch, filters, k, s), nn.ReLU()]
        ch = filters
    layers.pop()  # logits: no activation on the last deconvolution
    last = layers[-1]
    with torch.no_grad():
        last.weight.mul_(init_scale)
        last.bias.zero_()
    return nn.Sequential(*layers)


class GazeNet(nn.Module):
    def __init__(self, channels: GazeChannelSet, config: GazeNetConfig):
        super().__init__()
        self.channels = channels
        self.config = config
        torch.manual_seed(config.seed)
        sizes = config.in_channels
        self.streams = nn.ModuleDict({
            name: _encoder_decoder(sizes[name], config.encoder, config.output_init_scale)
            for name in channels.names
        })

    def _stream_logits(self, inputs: dict[str, torch.Tensor]) -> list[torch.Tensor]:
        outs = []
        for name in self.channels.names:
            x = inputs[name]
            if name == "motion":
                clip = self.config.motion_clip
                x = x.clamp(-clip, clip) / self.config.motion_scale
            outs.append(self.streams[name](x).squeeze(1))
        return outs

    def logits(self, inputs: dict[str, torch.Tensor]) -> torch.Tensor:
        return torch.stack(self._stream_logits(inputs)).mean(0)

    def forward(self, inputs: dict[str, torch.Tensor]) -> torch.Tensor:
        """Probability maps of shape (B, H, W)."""
        outs = self._stream_logits(inputs)
        b, h, w = outs[0].shape
        if self.config.fusion == "post_softmax":
            probs = [torch.softmax(o.reshape(b, -1), dim=1) for o in outs]
            return torch.stack(probs).mean(0).reshape(b, h, w)
        fused = torch.stack(outs).mean(0)
        return torch.softmax(fused.reshape(b, -1), dim=1).reshape(b, h, w)

    @property
    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_gaze_net(channels: GazeChannelSet | str, config: GazeNetConfig | None = None) -> GazeNet:
    if isinstance(channels, str):
        channels = GazeChannelSet.parse(channels)
    cfg = config or GazeNetConfig()
    if cfg.fusion not in ("pre_softmax", "post_softmax"):
        raise ConfigurationError(f"unknown fusion {cfg.fusion!r}")
    if cfg.motion_encoding not in ("magnitude", "vector"):
        raise ConfigurationError(f"unknown motion encoding {cfg.motion_encoding!r}")
    return GazeNet(channels, cfg)


def _check_inputs(model: GazeNet, inputs: dict) -> None:
    expected = set(model.channels.names)
    if set(inputs) != expected:
        raise ValueError(f"inputs must be exactly {sorted(expected)}, got {sorted(inputs)}")
    size = model.config.input_size
    for name, arr in inputs.items():
        want = (model.config.in_channels[name], size, size)
        if tuple(arr.shape[-3:]) != want:
            raise ValueError(f"{name} input must have shape {want}, got {tuple(arr.shape)}")


def _to_batch(inputs: dict, dtype=torch.float32) -> dict[str, torch.Tensor]:
    out = {}
    for name, arr in inputs.items():
        t = torch.as_tensor(np.asarray(arr), dtype=dtype)
        out[name] = t if t.ndim == 4 else t.unsqueeze(0)
    return out


def gaze_forward(model: GazeNet, inputs: dict[str, np.ndarray]) -> np.ndarray:
    """Predicted saliency map (float64, unit sum) for one frame's channel inputs."""
    _check_inputs(model, inputs)
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        P = model(_to_batch(inputs, dtype))[0].double().numpy()
    model.train(was_training)
    return P / P.sum()


def predict_batch(model: GazeNet, inputs: dict[str, np.ndarray]) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        return model(_to_batch(inputs, dtype)).double().numpy()


def gaze_loss(P: torch.Tensor, Q: torch.Tensor) -> torch.Tensor:
    """Mean regularised KL between predicted ``P`` and ground truth ``Q`` maps."""
    if P.shape != Q.shape:
        raise ValueError(f"shape mismatch: {tuple(P.shape)} vs {tuple(Q.shape)}")
    return kl_terms(P, Q).mean()


# -- training -----------------------------------------------------------------


@dataclass(frozen=True)
class GazeTrainConfig:
    epochs: int = 24
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    val_fraction: float = 0.15
    max_val_frames: int = 256
    select_on: str = "auc"              # checkpoint criterion: "auc" (highest) or "kl" (lowest)
    flip_augment: bool = True           # mirror random halves of each batch on both axes
    shift_augment: int = 6              # random translation of up to this many pixels
    cosine_schedule: bool = True        # anneal the learning rate to zero over the epochs
    seed: int = 0
    version: str = "gaze-train-1"


@dataclass
class TrainHistory:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_kl: list[float] = field(default_factory=list)
    val_auc: list[float] = field(default_factory=list)
    n_train: list[int] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def append(self, **row) -> None:
        for key, value in row.items():
            getattr(self, key).append(value)

    def rows(self) -> list[dict]:
        keys = ("epoch", "train_loss", "val_kl", "val_auc", "n_train", "wall_clock")
        return [dict(zip(keys, vals)) for vals in zip(*(getattr(self, k) for k in keys))]

    def to_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.rows()[0]) if self.epoch else ["epoch"])
            writer.writeheader()
            writer.writerows(self.rows())


def set_deterministic(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


@dataclass
class _Frames:
    """Flat index of (features, frame index) pairs over a set of trajectories."""

    feats: list[TrajectoryFeatures]
    index: list[tuple[int, int]]

    @classmethod
    def build(cls, trajs: Sequence[Trajectory], store: FeatureStore, saliency: bool) -> "_Frames":
        feats = [store.get(t, saliency=saliency) for t in trajs]
        index = [(k, int(t)) for k, f in enumerate(feats) for t in f.valid_indices]
        return cls(feats, index)

    def __len__(self):
        return len(self.index)

    def inputs(self, rows: Sequence[int], channels) -> dict[str, np.ndarray]:
        per = [self.feats[k].gaze_inputs(t, channels) for k, t in (self.index[r] for r in rows)]
        return {name: np.stack([p[name] for p in per]) for name in channels.names}

    def targets(self, rows: Sequence[int]) -> np.ndarray:
        return np.stack([self.feats[k].targets[t] for k, t in (self.index[r] for r in rows)])

    def fixations(self, r: int):
        k, t = self.index[r]
        return self.feats[k].fixations[t]


def _validation_split(trajs: Sequence[Trajectory], fraction: float, seed: int):
    trajs = sorted(trajs, key=lambda t: t.trial_id)
    if len(trajs) < 3 or fraction <= 0:
        return trajs, trajs
    n_val = max(1, int(round(fraction * len(trajs))))
    perm = np.random.default_rng(seed).permutation(len(trajs))
    val = [trajs[i] for i in sorted(perm[:n_val])]
    train = [trajs[i] for i in sorted(perm[n_val:])]
    return train, val


def _mirror(inputs: dict[str, np.ndarray], targets: np.ndarray, rows: np.ndarray,
            vector_motion: bool, axis: int = -1) -> None:
    """Flip the selected batch rows in place along ``axis`` (-1 left-right, -2 up-down);
    the matching flow component changes sign."""
    component = 0 if axis == -1 else 1
    for name, arr in inputs.items():
        arr[rows] = np.flip(arr[rows], axis=axis)
        if name == "motion" and vector_motion:
            arr[rows, component::2] *= -1.0
    targets[rows] = np.flip(targets[rows], axis=axis)


def _shift(inputs: dict[str, np.ndarray], targets: np.ndarray, rng: np.random.Generator,
           max_shift: int) -> None:
    """Translate each sample (inputs and target together) with zero fill, in place.

    Samples whose target would lose more than 1% of its mass stay put."""
    for i in range(len(targets)):
        dx, dy = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
        moved = _translate(targets[i], dx, dy)
        if moved.sum() < 0.99 * targets[i].sum():
            continue
        targets[i] = moved / moved.sum()
        for arr in inputs.values():
            arr[i] = _translate(arr[i], dx, dy)


def _translate(a: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(a)
    h, w = a.shape[-2:]
    out[..., max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = \
        a[..., max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)]
    return out


def _evaluate_frames(model: GazeNet, frames: _Frames, rows: Sequence[int], batch: int = 64):
    kls, aucs = [], []
    for start in range(0, len(rows), batch):
        chunk = rows[start:start + batch]
        P = predict_batch(model, frames.inputs(chunk, model.channels))
        Q = frames.targets(chunk)
        kls.extend(kl_terms(torch.from_numpy(P), torch.from_numpy(Q)).tolist())
        aucs.extend(auc(p, frames.fixations(r)) for p, r in zip(P, chunk))
    return float(np.mean(kls)), float(np.mean(aucs))


def train_gaze(model: GazeNet, split: DatasetSplit | Sequence[Trajectory],
               config: GazeTrainConfig | None = None,
               store: FeatureStore | None = None) -> tuple[GazeNet, TrainHistory]:
    """Minimise the mean KL loss over the training frames of ``split``.

    A trajectory-granular validation carve-out of the training set selects the
    checkpoint that is returned.
    """
    cfg = config or GazeTrainConfig()
    if cfg.select_on not in ("kl", "auc"):
        raise ConfigurationError(f"unknown checkpoint criterion {cfg.select_on!r}")
    trajs = split.train if isinstance(split, DatasetSplit) else tuple(split)
    if not trajs:
        raise ValueError("training set is empty")
    store = store or FeatureStore(motion_vector=model.config.motion_encoding == "vector")
    set_deterministic(cfg.seed)
    train_trajs, val_trajs = _validation_split(trajs, cfg.val_fraction, cfg.seed)
    need_sal = "saliency" in model.channels
    train = _Frames.build(train_trajs, store, need_sal)
    val = _Frames.build(val_trajs, store, need_sal)
    if len(train) == 0:
        raise ValueError("training set has no valid frames")
    rng = np.random.default_rng(cfg.seed)
    val_rows = sorted(rng.permutation(len(val))[:cfg.max_val_frames].tolist())

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs)
             if cfg.cosine_schedule else None)
    dtype = next(model.parameters()).dtype
    history = TrainHistory()
    best_state, best_score = None, math.inf
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(train))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            inputs, targets = train.inputs(rows, model.channels), train.targets(rows)
            if cfg.flip_augment:
                vector = model.config.motion_encoding == "vector"
                for axis in (-1, -2):
                    flip = np.flatnonzero(rng.random(len(rows)) < 0.5)
                    _mirror(inputs, targets, flip, vector, axis)
            if cfg.shift_augment > 0:
                _shift(inputs, targets, rng, cfg.shift_augment)
            x = _to_batch(inputs, dtype)
            Q = torch.as_tensor(targets, dtype=dtype)
            loss = gaze_loss(model(x), Q)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite gaze loss at epoch {epoch}, batch starting {start}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(rows)
            count += len(rows)
        if sched is not None:
            sched.step()
        val_kl, val_auc = _evaluate_frames(model, val, val_rows)
        history.append(epoch=epoch, train_loss=total / count, val_kl=val_kl, val_auc=val_auc,
                       n_train=len(train), wall_clock=time.perf_counter() - t0)
        log.info("gaze %s epoch %d loss %.4f val KL %.4f AUC %.4f", model.channels.label,
                 epoch, total / count, val_kl, val_auc)
        score = val_kl if cfg.select_on == "kl" else -val_auc
        if score < best_score:
            best_score, best_state = score, copy.deepcopy(model.state_dict())
            history.best_epoch = epoch
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


# -- evaluation and baselines -------------------------------------------------


@dataclass
class _EvalSample:
    game: str
    target: np.ndarray
    fixations: object
    feats: TrajectoryFeatures
    t: int


def eval_samples(trajs: Sequence[Trajectory], store: FeatureStore, saliency: bool = False):
    for traj in trajs:
        feats = store.get(traj, saliency=saliency)
        for t in feats.valid_indices:
            yield _EvalSample(feats.game, feats.targets[t], feats.fixations[t], feats, int(t))


class BaselinePredictor:
    """Non-learned predictor emitting the Itti-Koch or motion map of the current frame."""

    def __init__(self, kind: str):
        if kind not in ("saliency", "motion"):
            raise ConfigurationError(f"unknown baseline {kind!r}")
        self.kind = kind

    @property
    def label(self) -> str:
        return "S" if self.kind == "saliency" else "M"

    def predict(self, feats: TrajectoryFeatures, t: int) -> np.ndarray:
        if self.kind == "saliency":
            return normalize_map(feats.saliency[t])
        # motion planes of the newest transition; magnitude encoding only
        mag = feats.motion[t]
        if mag.shape[0] == 2:
            mag = np.hypot(mag[0], mag[1])[None]
        return normalize_map(mag[0])

    def predict_frame(self, raw: np.ndarray, prev_raw: np.ndarray | None = None) -> np.ndarray:
        from agil.features import itti_koch_saliency, motion_saliency, optical_flow
        if self.kind == "saliency":
            return itti_koch_saliency(raw)
        if prev_raw is None:
            prev_raw = raw
        return motion_saliency(optical_flow(prev_raw, raw))

    __call__ = predict


def baseline_predictor(kind: str) -> BaselinePredictor:
    return BaselinePredictor(kind)


def evaluate_gaze_model(model, test: Sequence[Trajectory] | DatasetSplit,
                        store: FeatureStore | None = None, name: str | None = None,
                        report: MetricsReport | None = None) -> MetricsReport:
    """NSS/AUC/KL/CC of a gaze model or baseline on every valid test frame, per game."""
    trajs = test.test if isinstance(test, DatasetSplit) else tuple(test)
    if not trajs:
        raise ValueError("test set is empty")
    store = store or FeatureStore()
    if isinstance(model, BaselinePredictor):
        need_sal = model.kind == "saliency"
        predict = lambda s: model.predict(s.feats, s.t)  # noqa: E731
        name = name or model.label
    else:
        need_sal = "saliency" in model.channels
        name = name or model.channels.label
        sample_feats = store.get(trajs[0], saliency=need_sal)
        if "motion" in model.channels and sample_feats.motion is not None:
            want = model.config.in_channels["motion"] // model.config.image_depth
            if sample_feats.motion.shape[1] != want:
                raise ConfigurationError("motion encoding of model and features differ")
        predict = lambda s: gaze_forward(model, s.feats.gaze_inputs(s.t, model.channels))  # noqa: E731
    return evaluate_predictions(eval_samples(trajs, store, need_sal), predict, name, report)


def predict_trajectory(model: GazeNet, feats: TrajectoryFeatures, batch: int = 128) -> np.ndarray:
    """Predicted maps for every frame of a trajectory, shape (N, 84, 84)."""
    out = np.zeros((len(feats), FRAME_SIZE, FRAME_SIZE))
    for start in range(0, len(feats), batch):
        ts = range(start, min(start + batch, len(feats)))
        per = [feats.gaze_inputs(t, model.channels) for t in ts]
        inputs = {n: np.stack([p[n] for p in per]) for n in model.channels.names}
        out[start:start + len(per)] = predict_batch(model, inputs)
    return out


# -- persistence --------------------------------------------------------------


def save_gaze_model(model: GazeNet, path: str | Path, history: TrainHistory | None = None,
                    flow_config: FlowConfig | None = None) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out / "params.pt")
    meta = {
        "kind": "gaze", "channels": model.channels.label, "net": asdict(model.config),
        "preprocessing": PREPROCESSING, "flow": asdict(flow_config or FlowConfig()),
        "decoder": "mirrored transposed convolutions (see net.encoder)",
    }
    (out / "config.json").write_text(json.dumps(meta, indent=2) + "\n")
    if history is not None:
        history.to_csv(out / "history.csv")
    return out


def load_gaze_model(path: str | Path) -> GazeNet:
    src = Path(path)
    meta = json.loads((src / "config.json").read_text())
    if meta.get("kind") != "gaze":
        raise ConfigurationError(f"{src} does not hold a gaze model")
    net = dict(meta["net"])
    net["encoder"] = tuple(tuple(layer) for layer in net["encoder"])
    model = build_gaze_net(meta["channels"], GazeNetConfig(**net))
    model.load_state_dict(torch.load(src / "params.pt", weights_only=True))
    model.eval()
    return model


def with_seed(config: GazeNetConfig, seed: int) -> GazeNetConfig:
    return replace(config, seed=seed)
