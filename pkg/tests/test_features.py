import numpy as np
import pytest

from agil.features import (FlowConfig, FlowField, IttiKochConfig, flow_magnitude_map,
                           itti_koch_saliency, motion_saliency, optical_flow)


def smooth_texture(h=96, w=96, seed=0):
    import cv2
    noise = np.random.default_rng(seed).random((h + 20, w + 20)).astype(np.float32)
    tex = cv2.GaussianBlur(noise, (0, 0), 2.0)
    tex = (tex - tex.min()) / (tex.max() - tex.min())
    return (tex * 255).astype(np.uint8)


def translate(img, dx, dy):
    return np.roll(np.roll(img, dy, axis=0), dx, axis=1)


@pytest.mark.parametrize("dx,dy", [(2, 0), (0, -3), (1, 1)])
def test_flow_recovers_translation(dx, dy):
    a = smooth_texture()
    b = translate(a, dx, dy)
    flow = optical_flow(a, b)
    inner = (slice(16, -16), slice(16, -16))
    err = np.hypot(flow.dx[inner] - dx, flow.dy[inner] - dy).mean()
    assert err < 0.25


def test_flow_of_identical_frames_is_zero():
    a = smooth_texture(seed=2)
    assert optical_flow(a, a).magnitude.mean() < 0.05


def test_flow_accepts_rgb_and_float_and_rejects_size_mismatch():
    a = np.random.default_rng(0).random((40, 50, 3)).astype(np.float32)
    flow = optical_flow(a, a)
    assert flow.dx.shape == (40, 50)
    with pytest.raises(ValueError):
        optical_flow(a, a[:30])
    with pytest.raises(ValueError):
        FlowField(np.zeros((2, 2)), np.zeros((3, 3)))


def test_motion_map_is_a_distribution_and_uniform_without_motion():
    a = np.zeros((96, 96), np.uint8)
    m = motion_saliency(optical_flow(a, a))
    assert m.shape == (84, 84) and m.sum() == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(m, 1 / 84 ** 2, atol=1e-9)


def test_motion_map_concentrates_on_moving_object():
    a = np.zeros((84, 84), np.uint8)
    b = a.copy()
    a[20:30, 50:60] = 255
    b[20:30, 52:62] = 255
    m = flow_magnitude_map(optical_flow(a, b))
    assert m[5:45, 35:77].sum() > 0.99 * m.sum()
    assert m[:, :30].sum() == 0


def test_itti_koch_finds_the_odd_one_out():
    img = np.zeros((96, 96, 3), np.uint8)
    img[40:52, 60:72] = (255, 0, 0)
    S = itti_koch_saliency(img)
    assert S.shape == (84, 84) and S.sum() == pytest.approx(1.0, abs=1e-6)
    y, x = np.unravel_index(S.argmax(), S.shape)
    assert 30 <= y <= 52 and 46 <= x <= 70


def test_itti_koch_uniform_for_blank_and_rejects_tiny():
    S = itti_koch_saliency(np.zeros((64, 64, 3), np.uint8))
    np.testing.assert_allclose(S, 1 / 84 ** 2, atol=1e-9)
    with pytest.raises(ValueError):
        itti_koch_saliency(np.zeros((10, 10, 3), np.uint8))


def test_itti_koch_is_deterministic_and_configurable():
    img = np.random.default_rng(1).integers(0, 256, (80, 80, 3), dtype=np.uint8)
    np.testing.assert_array_equal(itti_koch_saliency(img), itti_koch_saliency(img))
    other = itti_koch_saliency(img, IttiKochConfig(n_orientations=2), out_size=32)
    assert other.shape == (32, 32)


def test_flow_config_is_versioned():
    assert FlowConfig().version >= 1
