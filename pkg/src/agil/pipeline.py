"""Per-frame network inputs for whole trajectories and for live environments.

Both paths go through :func:`frame_gray` and :func:`frame_motion` and share
:func:`agil.data_model.stack_indices`, so offline stacks and rollout stacks are
built the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from agil.data_model import (FRAME_SIZE, Trajectory, on_screen, preprocess_frame,
                             stack_indices)
from agil.features import FlowConfig, flow_magnitude_map, itti_koch_saliency, optical_flow
from agil.retina import gaze_to_saliency_map
from agil.saliency_metrics import FixationSet

MAP_PIXELS = FRAME_SIZE * FRAME_SIZE


def frame_gray(raw: np.ndarray, prev_raw: np.ndarray | None) -> np.ndarray:
    return preprocess_frame(raw, prev_raw)


def frame_motion(prev_raw: np.ndarray | None, raw: np.ndarray,
                 flow_config: FlowConfig | None = None, vector: bool = False) -> np.ndarray:
    """Motion planes for the transition into ``raw``: (1, 84, 84) magnitude or (2, 84, 84) dx, dy."""
    depth = 2 if vector else 1
    if prev_raw is None:
        return np.zeros((depth, FRAME_SIZE, FRAME_SIZE), np.float32)
    flow = optical_flow(prev_raw, raw, flow_config)
    if not vector:
        return flow_magnitude_map(flow)[None]
    h, w = flow.dx.shape
    dx = cv2.resize(flow.dx, (FRAME_SIZE, FRAME_SIZE), interpolation=cv2.INTER_AREA) * (FRAME_SIZE / w)
    dy = cv2.resize(flow.dy, (FRAME_SIZE, FRAME_SIZE), interpolation=cv2.INTER_AREA) * (FRAME_SIZE / h)
    return np.stack([dx, dy]).astype(np.float32)


def frame_saliency(raw: np.ndarray) -> np.ndarray:
    """Itti-Koch map rescaled to mean 1, as fed to the saliency channel."""
    return (itti_koch_saliency(raw) * MAP_PIXELS).astype(np.float32)


@dataclass
class TrajectoryFeatures:
    trial_id: str
    subject_id: str
    game: str
    gray: np.ndarray                 # (N, 84, 84)
    actions: np.ndarray              # (N,)
    valid: np.ndarray                # (N,) bool
    targets: np.ndarray              # (N, 84, 84), zero for invalid frames
    fixations: list                  # FixationSet or None per frame
    last_gaze: np.ndarray            # (N, 2) raw-frame xy of the last on-screen sample, nan if none
    motion: np.ndarray | None = None       # (N, C, 84, 84)
    saliency: np.ndarray | None = None     # (N, 84, 84)
    frame_shape: tuple[int, int] = (0, 0)
    _raw: list = field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.actions)

    @property
    def valid_indices(self) -> np.ndarray:
        return np.flatnonzero(self.valid)

    def image_stack(self, t: int) -> np.ndarray:
        return self.gray[stack_indices(t)]

    def motion_stack(self, t: int) -> np.ndarray:
        if self.motion is None:
            raise ValueError("motion features were not extracted")
        planes = self.motion[stack_indices(t)]
        return planes.reshape(-1, FRAME_SIZE, FRAME_SIZE)

    def saliency_input(self, t: int) -> np.ndarray:
        if self.saliency is None:
            raise ValueError("saliency features were not extracted")
        return self.saliency[t][None]

    def gaze_inputs(self, t: int, channels) -> dict[str, np.ndarray]:
        out = {}
        if "image" in channels:
            out["image"] = self.image_stack(t)
        if "saliency" in channels:
            out["saliency"] = self.saliency_input(t)
        if "motion" in channels:
            out["motion"] = self.motion_stack(t)
        return out


def extract_features(traj: Trajectory, motion: bool = True, saliency: bool = False,
                     flow_config: FlowConfig | None = None, motion_vector: bool = False,
                     keep_raw: bool = False) -> TrajectoryFeatures:
    """Compute every per-frame array for ``traj`` (invalid frames included, flagged)."""
    n = len(traj.records)
    gray = np.zeros((n, FRAME_SIZE, FRAME_SIZE), np.float32)
    depth = 2 if motion_vector else 1
    mot = np.zeros((n, depth, FRAME_SIZE, FRAME_SIZE), np.float32) if motion else None
    sal = np.zeros((n, FRAME_SIZE, FRAME_SIZE), np.float32) if saliency else None
    targets = np.zeros((n, FRAME_SIZE, FRAME_SIZE), np.float64)
    valid = np.zeros(n, bool)
    last_gaze = np.full((n, 2), np.nan)
    fixations: list = [None] * n
    actions = np.array([r.action for r in traj.records], dtype=np.int64)
    geom = traj.geometry
    sx = FRAME_SIZE / geom.screen_width_px
    sy = FRAME_SIZE / geom.screen_height_px

    raws = []
    prev = None
    frame_shape = (0, 0)
    for i, rec in enumerate(traj.records):
        raw = rec.load_image()
        frame_shape = raw.shape[:2]
        gray[i] = frame_gray(raw, prev)
        if mot is not None:
            mot[i] = frame_motion(prev, raw, flow_config, motion_vector)
        if sal is not None:
            sal[i] = frame_saliency(raw)
        pts = [s for s in rec.gaze if on_screen(s, geom)]
        if rec.valid and pts:
            valid[i] = True
            targets[i] = gaze_to_saliency_map(pts, geom)
            fixations[i] = FixationSet.from_xy([(s.x * sx, s.y * sy) for s in pts],
                                               (FRAME_SIZE, FRAME_SIZE))
            last = max(pts, key=lambda s: s.timestamp)
            last_gaze[i] = (last.x, last.y)
        if keep_raw:
            raws.append(raw)
        prev = raw

    return TrajectoryFeatures(traj.trial_id, traj.subject_id, traj.game, gray, actions, valid,
                              targets, fixations, last_gaze, mot, sal, frame_shape, raws)


class FeatureStore:
    """Memoises :func:`extract_features` per trajectory object within one run."""

    def __init__(self, flow_config: FlowConfig | None = None, motion_vector: bool = False):
        self.flow_config = flow_config
        self.motion_vector = motion_vector
        self._cache: dict[int, tuple[Trajectory, TrajectoryFeatures]] = {}

    def get(self, traj: Trajectory, saliency: bool = False) -> TrajectoryFeatures:
        hit = self._cache.get(id(traj))
        if hit is not None and hit[0] is traj:
            feats = hit[1]
            if saliency and feats.saliency is None:
                feats.saliency = np.stack([frame_saliency(r.load_image()) for r in traj.records])
            return feats
        feats = extract_features(traj, motion=True, saliency=saliency,
                                 flow_config=self.flow_config, motion_vector=self.motion_vector)
        self._cache[id(traj)] = (traj, feats)
        return feats


class ObservationBuffer:
    """Rolling per-step inputs for a live episode (frame stack, motion, saliency)."""

    def __init__(self, flow_config: FlowConfig | None = None, motion_vector: bool = False,
                 need_motion: bool = True, need_saliency: bool = False):
        self.flow_config = flow_config
        self.motion_vector = motion_vector
        self.need_motion = need_motion
        self.need_saliency = need_saliency
        self.gray: list[np.ndarray] = []
        self.motion: list[np.ndarray] = []
        self.saliency: np.ndarray | None = None
        self.raw: list[np.ndarray] = []
        self._prev: np.ndarray | None = None

    def push(self, raw: np.ndarray) -> None:
        raw = np.asarray(raw)
        self.raw.append(raw)
        self.gray.append(frame_gray(raw, self._prev))
        if self.need_motion:
            self.motion.append(frame_motion(self._prev, raw, self.flow_config, self.motion_vector))
        if self.need_saliency:
            self.saliency = frame_saliency(raw)
        self._prev = raw
        # keep only what the 4-deep stacks can reach
        if len(self.gray) > 8:
            base = len(self.gray) - 4
            self.gray = self.gray[base:]
            self.motion = self.motion[base:]
            self.raw = self.raw[base:]

    @property
    def t(self) -> int:
        return len(self.gray) - 1

    def image_stack(self) -> np.ndarray:
        return np.stack([self.gray[i] for i in stack_indices(self.t)])

    def gaze_inputs(self, channels) -> dict[str, np.ndarray]:
        out = {}
        idx = stack_indices(self.t)
        if "image" in channels:
            out["image"] = self.image_stack()
        if "motion" in channels:
            out["motion"] = np.concatenate([self.motion[i] for i in idx])
        if "saliency" in channels:
            out["saliency"] = self.saliency[None]
        return out
