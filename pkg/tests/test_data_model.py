import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agil.data_model import (FrameRecord, GazeSample, StackedObservation, Trajectory, check_trial,
                             filter_valid, invalid_fraction, load_trial, load_trials,
                             preprocess_frame, split_train_test, stack_indices, stack_observation,
                             trial_dirs, write_trial)
from agil.errors import InsufficientDataError, IntegrityError, SchemaError


def test_trial_round_trip(tmp_path, traj_factory):
    t = traj_factory(n=4)
    path = write_trial(t, tmp_path / "trial")
    back = load_trial(path)
    assert back == t
    assert check_trial(path) == {"trial_id": "t0", "records": 4, "invalid": 0,
                                 "invalid_fraction": 0.0}
    assert trial_dirs(path) == [path]
    assert [x.trial_id for x in load_trials(tmp_path)] == ["t0"]


def test_missing_frame_is_an_integrity_error(tmp_path, traj_factory):
    path = write_trial(traj_factory(n=3), tmp_path / "trial")
    next((path / "frames").iterdir()).unlink()
    with pytest.raises(IntegrityError):
        load_trial(path)


@pytest.mark.parametrize("corrupt", [
    lambda m: m.pop("subject_id"),
    lambda m: m.__setitem__("screen_width_cm", -1.0),
    lambda m: m.__setitem__("eye_distance_cm", "far"),
])
def test_bad_meta_is_a_schema_error(tmp_path, traj_factory, corrupt):
    path = write_trial(traj_factory(n=2), tmp_path / "trial")
    meta = json.loads((path / "meta.json").read_text())
    corrupt(meta)
    (path / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(SchemaError):
        load_trial(path)


@pytest.mark.parametrize("line", ['{"frame_id": 0}', "not json",
                                  '{"frame_id": 0, "action": 99, "gaze": [], "valid": true}'])
def test_bad_sample_line_is_a_schema_error(tmp_path, traj_factory, line):
    path = write_trial(traj_factory(n=1), tmp_path / "trial")
    (path / "samples.jsonl").write_text(line + "\n")
    with pytest.raises(SchemaError):
        load_trial(path)


def test_no_trials_is_a_schema_error(tmp_path):
    with pytest.raises(SchemaError):
        load_trials(tmp_path)


def test_frame_ids_must_increase(traj_factory):
    t = traj_factory(n=2)
    with pytest.raises(IntegrityError):
        t.with_records(t.records[::-1])


def test_validity_filtering(traj_factory):
    t = traj_factory(n=3)
    recs = list(t.records)
    recs[0] = FrameRecord(0, recs[0].image, 0, (GazeSample(-5, -5, 0),), True)
    recs[1] = FrameRecord(1, recs[1].image, 0, recs[1].gaze, False)
    t2 = t.with_records(recs)
    assert invalid_fraction(t2) == pytest.approx(2 / 3)
    assert [r.frame_id for r in filter_valid(t2).records] == [2]
    assert filter_valid(t) is t


def _pool(n, sizes=None):
    rng = np.random.default_rng(n)
    trials = []
    for i in range(n):
        k = int(sizes[i]) if sizes is not None else int(rng.integers(1, 6))
        recs = tuple(FrameRecord(j, np.zeros((2, 2, 3), np.uint8), 0) for j in range(k))
        trials.append(Trajectory(f"tr{i:02d}", "s", "g", None, recs))
    return trials


@given(st.integers(2, 25), st.floats(0.05, 0.95), st.integers(0, 1000))
@settings(max_examples=60, deadline=None)
def test_split_is_trajectory_granular_and_exhaustive(n, frac, seed):
    trials = _pool(n)
    split = split_train_test(trials, frac, seed)
    assert split.train and split.test
    assert not split.train_ids & split.test_ids
    assert split.train_ids | split.test_ids == {t.trial_id for t in trials}
    # frame-level scan: no (trial, frame) pair on both sides
    train_frames = {(t.trial_id, r.frame_id) for t in split.train for r in t.records}
    test_frames = {(t.trial_id, r.frame_id) for t in split.test for r in t.records}
    assert not train_frames & test_frames
    assert split_train_test(trials[::-1], frac, seed) == split


def test_split_targets_the_test_fraction():
    trials = _pool(10, sizes=[10] * 10)
    split = split_train_test(trials, 0.3, 0)
    assert len(split.test) == 3


def test_split_errors():
    with pytest.raises(InsufficientDataError):
        split_train_test(_pool(1), 0.5, 0)
    with pytest.raises(ValueError):
        split_train_test(_pool(3), 1.0, 0)
    dup = _pool(2)
    with pytest.raises(IntegrityError):
        split_train_test([dup[0], dup[0]], 0.5, 0)


def test_preprocess_frame():
    img = np.zeros((210, 160, 3), np.uint8)
    img[..., 1] = 255
    out = preprocess_frame(img)
    assert out.shape == (84, 84) and out.dtype == np.float32
    np.testing.assert_allclose(out, 0.587, atol=1e-5)
    prev = np.full_like(img, 255)
    np.testing.assert_allclose(preprocess_frame(img, prev), 1.0, atol=1e-5)
    with pytest.raises(ValueError):
        preprocess_frame(np.zeros((0, 5, 3), np.uint8))
    with pytest.raises(ValueError):
        preprocess_frame(img, prev[:10])


@pytest.mark.parametrize("t,expected", [(0, [0, 0, 0, 0]), (1, [0, 0, 0, 1]), (2, [0, 0, 1, 2]),
                                        (3, [0, 1, 2, 3]), (7, [4, 5, 6, 7])])
def test_stack_indices_repeat_first_frame(t, expected):
    assert stack_indices(t) == expected


def test_stack_observation(traj_factory):
    t = traj_factory(n=5)
    obs = stack_observation(t, 1)
    assert obs.frame_ids == (0, 0, 0, 1)
    np.testing.assert_array_equal(obs.data[0], obs.data[2])
    with pytest.raises(IndexError):
        stack_observation(t, 5)
    with pytest.raises(ValueError):
        StackedObservation(np.zeros((3, 84, 84)), (0, 0, 0))
