"""Deterministic desk-scale datasets in the trial format.

* ``dot_gaze``: a white dot moves among faster gray dots, identical but
  static white dots, coloured squares and a scrolling textured band; gaze
  follows the moving white dot, which only the conjunction of brightness and
  motion singles out.
* ``disambiguation``: the toy game's demonstrator, gaze on the true goal and
  each action a step toward it.
* ``subject_style``: dot_gaze scenes viewed by a configurable gaze policy
  (``dot``, ``corner`` or ``distractor``), for cross-subject experiments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from agil.agent import ToyConfig, ToyEnv
from agil.data_model import (ATARI_ACTIONS, N_ACTIONS, FrameRecord, GazeSample, Trajectory,
                             write_trial)
from agil.errors import ConfigurationError
from agil.retina import DEFAULT_GEOMETRY, VisualGeometry

TASKS = ("dot_gaze", "disambiguation", "subject_style")
GAZE_POLICIES = ("dot", "corner", "distractor")
FRAME_MS = 1000.0 / 60.0
# dot movement directions -> Atari actions, indexed by (sign dx + 1, sign dy + 1)
_MOTION_ACTIONS = {(-1, -1): 7, (0, -1): 2, (1, -1): 6, (-1, 0): 4, (0, 0): 0,
                   (1, 0): 3, (-1, 1): 9, (0, 1): 5, (1, 1): 8}


@dataclass(frozen=True)
class SyntheticSpec:
    task: str = "dot_gaze"
    n_frames: int = 500
    width: int = 160
    height: int = 210
    seed: int = 0
    frames_per_trial: int = 20
    # dot scenes
    dot_speed: float = 2.0
    dot_radius: float = 6.0
    n_distractors: int = 3
    distractor_speed: tuple[float, float] = (3.0, 5.0)
    n_static: int = 6
    static_size: int = 28
    n_static_dots: int = 4
    band_height: int = 40
    band_speed: int = 4
    gaze_policy: str = "dot"
    subject_id: str = "s1"
    corner: tuple[float, float] = (12.0, 12.0)
    # disambiguation
    n_targets: int = 2
    reach: int = 4

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.n_frames < 1 or self.frames_per_trial < 1:
            raise ConfigurationError("n_frames and frames_per_trial must be positive")
        if self.width < 64 or self.height < 64:
            raise ConfigurationError("frames must be at least 64x64")
        if self.gaze_policy not in GAZE_POLICIES:
            raise ConfigurationError(f"unknown gaze policy {self.gaze_policy!r}")
        if self.gaze_policy == "distractor" and self.n_distractors < 1:
            raise ConfigurationError("the distractor gaze policy needs at least one distractor")
        if self.dot_speed < 0 or self.dot_radius <= 0:
            raise ConfigurationError("dot speed must be non-negative and radius positive")
        if self.band_height >= self.height // 2:
            raise ConfigurationError("textured band is too tall for the frame")

    @property
    def geometry(self) -> VisualGeometry:
        return replace(DEFAULT_GEOMETRY, screen_width_px=self.width, screen_height_px=self.height)

    @property
    def trial_lengths(self) -> list[int]:
        full, rest = divmod(self.n_frames, self.frames_per_trial)
        return [self.frames_per_trial] * full + ([rest] if rest else [])


def _trial_rng(spec: SyntheticSpec, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([spec.seed, index, stream])


def _trial_id(spec: SyntheticSpec, index: int) -> str:
    return f"{spec.task}-{spec.subject_id}-s{spec.seed}-{index:03d}"


def _action_names(actions) -> dict:
    return {str(a): ATARI_ACTIONS[a] for a in actions}


# -- moving-dot scenes --------------------------------------------------------


def _disk(frame: np.ndarray, cx: float, cy: float, r: float, color) -> None:
    h, w = frame.shape[:2]
    x0, x1 = max(int(cx - r - 1), 0), min(int(cx + r + 2), w)
    y0, y1 = max(int(cy - r - 1), 0), min(int(cy + r + 2), h)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    inside = (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= r * r
    frame[y0:y1, x0:x1][inside] = color


class _Mover:
    """A point bouncing inside a box at constant speed."""

    def __init__(self, rng: np.random.Generator, box, speed: float):
        (self.x0, self.y0, self.x1, self.y1) = box
        self.x = float(rng.uniform(self.x0, self.x1))
        self.y = float(rng.uniform(self.y0, self.y1))
        angle = float(rng.uniform(0.0, 2.0 * math.pi))
        self.vx, self.vy = speed * math.cos(angle), speed * math.sin(angle)

    def advance(self) -> None:
        self.x += self.vx
        self.y += self.vy
        if not self.x0 <= self.x <= self.x1:
            self.vx = -self.vx
            self.x = min(max(self.x, self.x0), self.x1)
        if not self.y0 <= self.y <= self.y1:
            self.vy = -self.vy
            self.y = min(max(self.y, self.y0), self.y1)


def _dot_scene(spec: SyntheticSpec, index: int, length: int):
    """Yield (frame, dot xy, first distractor xy, dot velocity) for each frame."""
    rng = _trial_rng(spec, index)
    w, h = spec.width, spec.height
    play_bottom = h - spec.band_height
    r = spec.dot_radius
    box = (r + 2, r + 2, w - r - 2, play_bottom - r - 2)

    static = np.zeros((h, w, 3), np.uint8)
    palette = [(255, 40, 40), (40, 80, 255), (255, 220, 0), (0, 220, 120), (255, 0, 255)]
    for k in range(spec.n_static):
        size = spec.static_size
        sx = int(rng.integers(0, w - size))
        sy = int(rng.integers(0, play_bottom - size))
        static[sy:sy + size, sx:sx + size] = palette[k % len(palette)]
    static_dots = [(float(rng.uniform(box[0], box[2])), float(rng.uniform(box[1], box[3])))
                   for _ in range(spec.n_static_dots)]
    for sx, sy in static_dots:
        _disk(static, sx, sy, r, (255, 255, 255))
    band = (rng.random((spec.band_height, w)) ** 2 * 180).astype(np.uint8)
    band = np.repeat(band[..., None], 3, axis=2)

    dot = _Mover(rng, box, spec.dot_speed)
    distractors = [_Mover(rng, box, float(rng.uniform(*spec.distractor_speed)))
                   for _ in range(spec.n_distractors)]
    for t in range(length):
        frame = static.copy()
        frame[play_bottom:] = np.roll(band, spec.band_speed * t, axis=1)
        for d in distractors:
            _disk(frame, d.x, d.y, r, (110, 110, 110))
        _disk(frame, dot.x, dot.y, r, (255, 255, 255))
        first = (distractors[0].x, distractors[0].y) if distractors else (math.nan, math.nan)
        yield frame, (dot.x, dot.y), first, (dot.vx, dot.vy)
        dot.advance()
        for d in distractors:
            d.advance()


def _motion_action(vx: float, vy: float) -> int:
    sx = 0 if abs(vx) < 0.5 else int(math.copysign(1, vx))
    sy = 0 if abs(vy) < 0.5 else int(math.copysign(1, vy))
    return _MOTION_ACTIONS[(sx, sy)]


def _dot_trial(spec: SyntheticSpec, index: int, length: int) -> Trajectory:
    records = []
    for t, (frame, dot, first, vel) in enumerate(_dot_scene(spec, index, length)):
        if spec.gaze_policy == "dot":
            gx, gy = dot
        elif spec.gaze_policy == "corner":
            gx, gy = spec.corner
        else:
            gx, gy = first
        gaze = (GazeSample(float(gx), float(gy), t * FRAME_MS),)
        records.append(FrameRecord(t, frame, _motion_action(*vel), gaze, True))
    game = "dot_gaze" if spec.task == "dot_gaze" else "subject_style"
    return Trajectory(_trial_id(spec, index), spec.subject_id, game, spec.geometry,
                      tuple(records), tuple(range(N_ACTIONS)), _action_names(range(N_ACTIONS)))


# -- goal disambiguation ------------------------------------------------------


def toy_config_for(spec: SyntheticSpec, length: int) -> ToyConfig:
    return ToyConfig(width=spec.width, height=spec.height, n_targets=spec.n_targets,
                     reach=spec.reach, n_rounds=length // spec.reach + 1, max_steps=length)


def _disambiguation_trial(spec: SyntheticSpec, index: int, length: int) -> Trajectory:
    env = ToyEnv(toy_config_for(spec, length))
    env_seed = int(_trial_rng(spec, index).integers(2**31))
    frame = env.reset(env_seed)
    records = []
    for t in range(length):
        gx, gy = env.demonstrator_gaze()
        action = env.demonstrator_action()
        records.append(FrameRecord(t, frame, action, (GazeSample(gx, gy, t * FRAME_MS),), True))
        frame, _, done = env.step(action)
        if done:
            break
    return Trajectory(_trial_id(spec, index), spec.subject_id, "disambiguation", spec.geometry,
                      tuple(records), ToyEnv.legal, _action_names(ToyEnv.legal))


# -- entry points -------------------------------------------------------------


def generate(spec: SyntheticSpec) -> list[Trajectory]:
    """Trajectories for ``spec``, split into trials of ``frames_per_trial`` frames."""
    make = _disambiguation_trial if spec.task == "disambiguation" else _dot_trial
    return [make(spec, i, n) for i, n in enumerate(spec.trial_lengths)]


def write_dataset(trajs, out: str | Path) -> list[Path]:
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    return [write_trial(t, root / t.trial_id) for t in trajs]


def subject_pair(kind: str, n_frames: int = 400, seed: int = 0,
                 frames_per_trial: int = 100) -> dict[str, list[Trajectory]]:
    """Two synthetic subjects: ``identical`` (both track the dot, different scenes)
    or ``divergent`` (a dot tracker and a corner fixator)."""
    if kind not in ("identical", "divergent"):
        raise ConfigurationError(f"unknown subject pairing {kind!r}")
    policies = ("dot", "dot") if kind == "identical" else ("dot", "corner")
    out = {}
    for k, policy in enumerate(policies):
        sid = f"subj{k + 1}-{policy}"
        spec = SyntheticSpec(task="subject_style", n_frames=n_frames, seed=seed * 100 + k,
                             frames_per_trial=frames_per_trial, gaze_policy=policy, subject_id=sid)
        out[sid] = generate(spec)
    return out
