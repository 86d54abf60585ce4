"""Trial schema, ingestion, validity filtering, preprocessing and splitting.

A trial directory holds::

    meta.json       trial/subject/game ids, screen geometry, action alphabet
    samples.jsonl   one object per frame: frame_id, action, gaze, valid
    frames/         NNNNNN.png, RGB, native game resolution

Gaze coordinates are expressed in frame pixels. All gaze samples that fall in a
frame's display interval are kept on that frame's record.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from agil.errors import InsufficientDataError, IntegrityError, SchemaError
from agil.retina import VisualGeometry

log = logging.getLogger(__name__)

N_ACTIONS = 18
FRAME_SIZE = 84
STACK_DEPTH = 4
LUMINANCE_WEIGHTS = (0.299, 0.587, 0.114)

# recorded in model and feature metadata; fixed for every run
PREPROCESSING = {
    "luminance": "ITU-R BT.601 weights (0.299, 0.587, 0.114) on RGB scaled to [0, 1]",
    "resize": "cv2.INTER_AREA to 84x84",
    "flicker": "pixelwise max of the frame and the previous raw frame before luminance",
    "stack": "4 frames oldest first; the first frame repeats at episode start",
}

ATARI_ACTIONS = (
    "NOOP", "FIRE", "UP", "RIGHT", "LEFT", "DOWN", "UPRIGHT", "UPLEFT", "DOWNRIGHT",
    "DOWNLEFT", "UPFIRE", "RIGHTFIRE", "LEFTFIRE", "DOWNFIRE", "UPRIGHTFIRE",
    "UPLEFTFIRE", "DOWNRIGHTFIRE", "DOWNLEFTFIRE",
)


@dataclass(frozen=True)
class GazeSample:
    x: float
    y: float
    timestamp: float


@dataclass(frozen=True, eq=False)
class FrameRecord:
    frame_id: int
    image: Path | np.ndarray
    action: int
    gaze: tuple[GazeSample, ...] = ()
    valid: bool = True

    def load_image(self) -> np.ndarray:
        if isinstance(self.image, np.ndarray):
            return self.image
        bgr = cv2.imread(str(self.image), cv2.IMREAD_COLOR)
        if bgr is None:
            raise IntegrityError(f"cannot read frame image {self.image}")
        return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)

    def __eq__(self, other):
        if not isinstance(other, FrameRecord):
            return NotImplemented
        return (self.frame_id == other.frame_id and self.action == other.action
                and self.gaze == other.gaze and self.valid == other.valid
                and np.array_equal(self.load_image(), other.load_image()))

    __hash__ = None


@dataclass(frozen=True)
class Trajectory:
    trial_id: str
    subject_id: str
    game: str
    geometry: VisualGeometry
    records: tuple[FrameRecord, ...]
    legal_actions: tuple[int, ...] = tuple(range(N_ACTIONS))
    action_key_map: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        ids = [r.frame_id for r in self.records]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise IntegrityError(f"trial {self.trial_id}: frame ids must strictly increase")

    def __len__(self):
        return len(self.records)

    @property
    def n_valid(self) -> int:
        return sum(r.valid for r in self.records)

    def with_records(self, records: Sequence[FrameRecord]) -> "Trajectory":
        return Trajectory(self.trial_id, self.subject_id, self.game, self.geometry,
                          tuple(records), self.legal_actions, dict(self.action_key_map))


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[Trajectory, ...]
    test: tuple[Trajectory, ...]
    seed: int

    @property
    def train_ids(self) -> set[str]:
        return {t.trial_id for t in self.train}

    @property
    def test_ids(self) -> set[str]:
        return {t.trial_id for t in self.test}


@dataclass(frozen=True, eq=False)
class StackedObservation:
    data: np.ndarray
    frame_ids: tuple[int, ...]

    def __post_init__(self):
        if self.data.shape != (STACK_DEPTH, FRAME_SIZE, FRAME_SIZE):
            raise ValueError(f"stacked observation must be 4x84x84, got {self.data.shape}")


def on_screen(sample: GazeSample, geom: VisualGeometry) -> bool:
    return 0.0 <= sample.x < geom.screen_width_px and 0.0 <= sample.y < geom.screen_height_px


def record_is_valid(gaze: Sequence[GazeSample], source_valid: bool, geom: VisualGeometry) -> bool:
    """A record is usable iff the tracker flagged no error and some sample is on screen."""
    return bool(source_valid) and any(on_screen(s, geom) for s in gaze)


# -- ingestion ----------------------------------------------------------------

_META_FIELDS = ("trial_id", "subject_id", "game", "screen_width_cm", "screen_height_cm",
                "eye_distance_cm", "frame_width_px", "frame_height_px", "legal_actions")


def frame_path(trial_dir: Path, frame_id: int) -> Path:
    return trial_dir / "frames" / f"{frame_id:06d}.png"


def _read_meta(trial_dir: Path) -> dict:
    path = trial_dir / "meta.json"
    if not path.is_file():
        raise SchemaError(f"{path}: missing meta.json")
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: unparseable JSON ({exc})") from exc
    missing = [k for k in _META_FIELDS if k not in meta]
    if missing:
        raise SchemaError(f"{path}: missing fields {missing}")
    return meta


def _parse_sample_line(line: str, where: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{where}: unparseable JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected an object")
    for key, kind in (("frame_id", int), ("action", int), ("gaze", list), ("valid", bool)):
        if key not in obj:
            raise SchemaError(f"{where}: missing field {key!r}")
        if not isinstance(obj[key], kind) or (kind is int and isinstance(obj[key], bool)):
            raise SchemaError(f"{where}: field {key!r} has wrong type")
    if obj["frame_id"] < 0:
        raise SchemaError(f"{where}: negative frame_id")
    if not 0 <= obj["action"] < N_ACTIONS:
        raise SchemaError(f"{where}: action {obj['action']} outside [0, {N_ACTIONS})")
    for g in obj["gaze"]:
        if not (isinstance(g, list) and len(g) == 3 and all(isinstance(v, (int, float)) for v in g)):
            raise SchemaError(f"{where}: gaze entries must be [x, y, timestamp_ms]")
        if not all(np.isfinite(g)):
            raise SchemaError(f"{where}: non-finite gaze sample")
    return obj


def load_trial(path: str | Path) -> Trajectory:
    trial_dir = Path(path)
    meta = _read_meta(trial_dir)
    try:
        geom = VisualGeometry(float(meta["screen_width_cm"]), float(meta["screen_height_cm"]),
                              float(meta["eye_distance_cm"]), int(meta["frame_width_px"]),
                              int(meta["frame_height_px"]))
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{trial_dir / 'meta.json'}: bad screen geometry ({exc})") from exc
    samples_path = trial_dir / "samples.jsonl"
    if not samples_path.is_file():
        raise SchemaError(f"{samples_path}: missing samples.jsonl")
    if not (trial_dir / "frames").is_dir():
        raise SchemaError(f"{trial_dir}: missing frames/ directory")

    records = []
    seen: set[int] = set()
    with samples_path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{samples_path}:{lineno}"
            obj = _parse_sample_line(line, where)
            fid = obj["frame_id"]
            if fid in seen:
                raise IntegrityError(f"{where}: duplicate frame_id {fid}")
            if records and fid < records[-1].frame_id:
                raise IntegrityError(f"{where}: frame_id {fid} out of order")
            seen.add(fid)
            img = frame_path(trial_dir, fid)
            if not img.is_file():
                raise IntegrityError(f"{where}: frame {img} does not exist")
            gaze = tuple(GazeSample(float(x), float(y), float(t)) for x, y, t in obj["gaze"])
            records.append(FrameRecord(fid, img, obj["action"], gaze,
                                       record_is_valid(gaze, obj["valid"], geom)))

    traj = Trajectory(str(meta["trial_id"]), str(meta["subject_id"]), str(meta["game"]),
                      geom, tuple(records), tuple(int(a) for a in meta["legal_actions"]),
                      dict(meta.get("action_key_map", {})))
    frac = invalid_fraction(traj)
    log.info("loaded %s: %d records, %.2f%% invalid", traj.trial_id, len(traj), 100 * frac)
    return traj


def write_trial(traj: Trajectory, path: str | Path) -> Path:
    trial_dir = Path(path)
    (trial_dir / "frames").mkdir(parents=True, exist_ok=True)
    g = traj.geometry
    meta = {
        "trial_id": traj.trial_id, "subject_id": traj.subject_id, "game": traj.game,
        "screen_width_cm": g.screen_width_cm, "screen_height_cm": g.screen_height_cm,
        "eye_distance_cm": g.eye_distance_cm, "frame_width_px": g.screen_width_px,
        "frame_height_px": g.screen_height_px, "legal_actions": list(traj.legal_actions),
        "action_key_map": traj.action_key_map, "preprocessing": PREPROCESSING,
    }
    (trial_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    with (trial_dir / "samples.jsonl").open("w") as fh:
        for r in traj.records:
            img = r.load_image()
            cv2.imwrite(str(frame_path(trial_dir, r.frame_id)),
                        cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
            line = {"frame_id": r.frame_id, "action": r.action,
                    "gaze": [[s.x, s.y, s.timestamp] for s in r.gaze], "valid": r.valid}
            fh.write(json.dumps(line) + "\n")
    return trial_dir


def check_trial(path: str | Path) -> dict:
    """Validate a trial directory; returns record and invalid counts."""
    traj = load_trial(path)
    n_invalid = len(traj) - traj.n_valid
    return {"trial_id": traj.trial_id, "records": len(traj), "invalid": n_invalid,
            "invalid_fraction": n_invalid / len(traj) if len(traj) else 0.0}


def trial_dirs(root: str | Path) -> list[Path]:
    """``root`` itself if it is a trial directory, else its trial subdirectories, sorted."""
    root = Path(root)
    if (root / "meta.json").is_file():
        return [root]
    if not root.is_dir():
        raise SchemaError(f"{root}: not a directory")
    return sorted(p for p in root.iterdir() if (p / "meta.json").is_file())


def load_trials(root: str | Path) -> list[Trajectory]:
    dirs = trial_dirs(root)
    if not dirs:
        raise SchemaError(f"{root}: no trial directories found")
    return [load_trial(d) for d in dirs]


# -- filtering and splitting --------------------------------------------------


def invalid_fraction(traj: Trajectory) -> float:
    if not traj.records:
        return 0.0
    usable = sum(record_is_valid(r.gaze, r.valid, traj.geometry) for r in traj.records)
    return 1.0 - usable / len(traj.records)


def filter_valid(traj: Trajectory) -> Trajectory:
    kept = [r for r in traj.records if record_is_valid(r.gaze, r.valid, traj.geometry)]
    if len(kept) == len(traj.records):
        return traj
    return traj.with_records(kept)


def split_train_test(trials: Sequence[Trajectory], test_fraction: float, seed: int) -> DatasetSplit:
    """Assign whole trajectories to train or test.

    Trajectories are shuffled with ``seed`` and the shortest prefix whose valid
    frame count is closest to ``test_fraction`` of the total becomes the test set.
    Both sides always receive at least one trajectory.
    """
    if len(trials) < 2:
        raise InsufficientDataError("need at least two trajectories to split")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    ids = [t.trial_id for t in trials]
    if len(set(ids)) != len(ids):
        raise IntegrityError("trial ids must be unique")

    ordered = sorted(trials, key=lambda t: t.trial_id)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    shuffled = [ordered[i] for i in perm]
    sizes = np.array([t.n_valid for t in shuffled], dtype=float)
    target = test_fraction * sizes.sum()
    cum = np.cumsum(sizes)[:-1]
    k = int(np.argmin(np.abs(cum - target))) + 1
    return DatasetSplit(train=tuple(shuffled[k:]), test=tuple(shuffled[:k]), seed=seed)


# -- preprocessing ------------------------------------------------------------


def to_float_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype == np.uint8:
        return img.astype(np.float32) / 255.0
    return img.astype(np.float32)


def luminance(image: np.ndarray) -> np.ndarray:
    img = to_float_image(image)
    if img.ndim == 2:
        return img
    r, g, b = LUMINANCE_WEIGHTS
    return r * img[..., 0] + g * img[..., 1] + b * img[..., 2]


def preprocess_frame(image: np.ndarray, previous: np.ndarray | None = None) -> np.ndarray:
    """RGB frame -> 84x84 float32 grayscale in [0, 1].

    If ``previous`` (the preceding raw frame) is given, the pixelwise maximum of
    the two is taken first, which removes sprite flicker.
    """
    img = np.asarray(image)
    if img.size == 0 or min(img.shape[:2]) == 0:
        raise ValueError("cannot preprocess an empty image")
    if previous is not None:
        prev = np.asarray(previous)
        if prev.shape != img.shape:
            raise ValueError("previous frame must have the same shape")
        img = np.maximum(img, prev)
    gray = luminance(img)
    small = cv2.resize(gray, (FRAME_SIZE, FRAME_SIZE), interpolation=cv2.INTER_AREA)
    return np.clip(small, 0.0, 1.0).astype(np.float32)


def stack_indices(t: int, depth: int = STACK_DEPTH) -> list[int]:
    """Indices of the frames stacked at step ``t``, oldest first, first frame repeated."""
    return [max(t - depth + 1 + k, 0) for k in range(depth)]


def preprocess_record(traj: Trajectory, i: int) -> np.ndarray:
    prev = traj.records[i - 1].load_image() if i > 0 else None
    return preprocess_frame(traj.records[i].load_image(), prev)


def stack_observation(traj: Trajectory, t: int) -> StackedObservation:
    if not 0 <= t < len(traj.records):
        raise IndexError(f"frame index {t} out of range for {len(traj.records)} records")
    idx = stack_indices(t)
    cache = {i: preprocess_record(traj, i) for i in set(idx)}
    data = np.stack([cache[i] for i in idx])
    return StackedObservation(data, tuple(traj.records[i].frame_id for i in idx))
