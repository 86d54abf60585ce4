import numpy as np
import pytest

from agil.data_model import GazeSample, stack_observation
from agil.pipeline import FeatureStore, ObservationBuffer, extract_features


def test_offline_and_live_stacks_agree(small_dot_trials):
    t = small_dot_trials[0]
    feats = extract_features(t, motion=True, saliency=True)
    buf = ObservationBuffer(need_motion=True, need_saliency=True)
    for i, rec in enumerate(t.records[:12]):
        buf.push(rec.load_image())
        np.testing.assert_array_equal(buf.image_stack(), feats.image_stack(i))
        live = buf.gaze_inputs(("image", "saliency", "motion"))
        off = feats.gaze_inputs(i, ("image", "saliency", "motion"))
        for k in off:
            np.testing.assert_array_equal(live[k], off[k])
    np.testing.assert_array_equal(feats.image_stack(5), stack_observation(t, 5).data)


def test_features_shapes_and_targets(small_dot_trials):
    t = small_dot_trials[0]
    f = extract_features(t, motion_vector=True)
    assert f.gray.shape == (20, 84, 84) and f.motion.shape == (20, 2, 84, 84)
    assert f.motion_stack(3).shape == (8, 84, 84)
    assert f.valid.all() and np.allclose(f.targets.sum(axis=(1, 2)), 1.0)
    assert (f.motion[0] == 0).all()
    np.testing.assert_allclose(f.last_gaze[0], (t.records[0].gaze[0].x, t.records[0].gaze[0].y))
    with pytest.raises(ValueError):
        f.saliency_input(0)


def test_invalid_frames_are_flagged(traj_factory):
    t = traj_factory(n=3, gaze=(GazeSample(-1, -1, 0),))
    f = extract_features(t, motion=False)
    assert not f.valid.any() and np.isnan(f.last_gaze).all()
    assert f.fixations == [None] * 3
    with pytest.raises(ValueError):
        f.motion_stack(0)


def test_last_gaze_uses_latest_sample(traj_factory):
    gaze = (GazeSample(10, 10, 5.0), GazeSample(30, 40, 9.0), GazeSample(20, 20, 7.0))
    f = extract_features(traj_factory(n=1, gaze=gaze), motion=False)
    np.testing.assert_array_equal(f.last_gaze[0], (30, 40))


def test_feature_store_memoises_and_adds_saliency(small_dot_trials):
    store = FeatureStore()
    a = store.get(small_dot_trials[0])
    assert store.get(small_dot_trials[0]) is a and a.saliency is None
    b = store.get(small_dot_trials[0], saliency=True)
    assert b is a and a.saliency.shape == (20, 84, 84)
