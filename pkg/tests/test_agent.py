import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chisquare

from agil.agent import (DOWN, LEFT, NOOP, RIGHT, UP, ScriptedPolicy, ToyConfig, ToyEnv,
                        demonstrator_policy, episode_seeds, exhaustive_optimum, gibbs_probs,
                        gibbs_select, make_env, restrict_to_legal, rollout, summarize_scores)
from agil.errors import ConfigurationError
from agil.features import optical_flow


def test_gibbs_two_action_case():
    np.testing.assert_allclose(gibbs_probs([1.0, 0.0], 1.0), [0.7311, 0.2689], atol=1e-4)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=18), st.floats(-20, 20))
def test_gibbs_probs_is_a_distribution_and_shift_invariant(p, eta):
    pi = gibbs_probs(p, eta)
    assert pi.sum() == pytest.approx(1.0) and (pi >= 0).all()
    np.testing.assert_allclose(gibbs_probs(np.array(p) + 7.0, eta), pi, rtol=1e-6, atol=1e-12)


def test_gibbs_zero_temperature_is_uniform_and_large_eta_is_argmax():
    np.testing.assert_allclose(gibbs_probs([0.9, 0.05, 0.05], 0.0), 1 / 3)
    assert gibbs_probs([0.2, 0.5, 0.3], 1e4).argmax() == 1
    assert gibbs_probs([1e300, -1e300], 1.0)[0] == 1.0


@pytest.mark.parametrize("bad", [[], [np.nan, 1.0], [[1.0]]])
def test_gibbs_rejects_bad_input(bad):
    with pytest.raises(ValueError):
        gibbs_probs(bad, 1.0)


@pytest.mark.parametrize("eta", [math.inf, math.nan])
def test_gibbs_rejects_non_finite_temperature(eta):
    with pytest.raises(ValueError):
        gibbs_probs([0.5, 0.5], eta)


def test_gibbs_select_frequencies():
    rng = np.random.default_rng(0)
    p = np.array([0.1, 0.6, 0.3])
    draws = [gibbs_select(p, 2.0, rng) for _ in range(20000)]
    counts = np.bincount(draws, minlength=3)
    assert chisquare(counts, 20000 * gibbs_probs(p, 2.0)).pvalue > 0.001


def test_restrict_to_legal():
    p = np.zeros(18)
    p[[0, 3, 17]] = [0.2, 0.2, 0.6]
    np.testing.assert_allclose(restrict_to_legal(p, [0, 3]), [0.5, 0.5])
    np.testing.assert_allclose(restrict_to_legal(p, [1, 2]), [0.5, 0.5])


# -- toy environment ----------------------------------------------------------


def test_toy_reset_is_seeded():
    env = ToyEnv()
    a = env.reset(3)
    rounds = env.rounds
    b = env.reset(3)
    np.testing.assert_array_equal(a, b)
    assert env.rounds == rounds
    env.reset(4)
    assert env.rounds != rounds


def test_toy_targets_are_identical_after_flicker_max():
    env = ToyEnv()
    prev = env.reset(0)
    cur, _, _ = env.step(NOOP)
    frame = np.maximum(prev, cur)
    rnd = env.rounds[0]
    crops = []
    for cx, cy in env.target_centers(rnd):
        crops.append(frame[cy - 8:cy + 8, cx - 12:cx + 12])
    np.testing.assert_array_equal(crops[0], crops[1])


def test_only_the_goal_moves():
    env = ToyEnv()
    env.reset(0)
    cur, _, _ = env.step(NOOP)
    nxt, _, _ = env.step(NOOP)
    flow = optical_flow(cur, nxt)
    rnd = env.rounds[0]
    mags = []
    for cx, cy in env.target_centers(rnd):
        mags.append(flow.magnitude[cy - 4:cy + 4, cx - 6:cx + 6].max())
    goal_mag = mags[rnd.goal]
    decoy_mag = max(m for i, m in enumerate(mags) if i != rnd.goal)
    assert goal_mag > 1.0 and decoy_mag < 0.1


def test_toy_rewards_and_termination():
    cfg = ToyConfig(n_rounds=2, reach=2)
    env = ToyEnv(cfg)
    env.reset(1)
    rnd = env.rounds[0]
    decoy = rnd.directions[1 - rnd.goal]
    env.step(decoy)
    _, r, done = env.step(decoy)
    assert r == -1.0 and not done and env.state.round == 1
    goal = env.demonstrator_action()
    env.step(goal)
    _, r, done = env.step(goal)
    assert r == 1.0 and done and env.state.score == 0.0
    with pytest.raises(RuntimeError):
        env.step(goal)


def test_toy_rejects_illegal_action_and_step_before_reset():
    env = ToyEnv()
    with pytest.raises(RuntimeError):
        env.step(NOOP)
    env.reset(0)
    with pytest.raises(ValueError):
        env.step(1)
    assert env.legal_actions() == [NOOP, UP, RIGHT, LEFT, DOWN]


@pytest.mark.parametrize("kw", [{"n_targets": 1}, {"n_targets": 5}, {"reach": 0},
                                {"axes": ("diagonal",)}, {"offset_range": (5, 60)},
                                {"offset_range": (28, 200)}])
def test_toy_config_validation(kw):
    with pytest.raises(ConfigurationError):
        ToyConfig(**kw)


@pytest.mark.parametrize("cfg", [ToyConfig(), ToyConfig(n_targets=3, n_rounds=3, max_steps=14),
                                 ToyConfig(n_targets=4, reach=3, n_rounds=6, max_steps=20)])
def test_demonstrator_reaches_exhaustive_optimum(cfg):
    env = ToyEnv(cfg)
    for seed in range(3):
        best = exhaustive_optimum(env, seed)
        assert best == env.analytic_optimum()
        scores = rollout(env, demonstrator_policy(), episodes=1, base_seed=seed, greedy=True)
        env.reset(seed)
        assert scores[0].score <= best


def test_demonstrator_rollout_scores_the_optimum():
    env = ToyEnv()
    scores = rollout(env, demonstrator_policy(), episodes=5, base_seed=0, greedy=True)
    assert all(s.score == env.analytic_optimum() for s in scores)
    # Gibbs sampling with a large temperature is near greedy too
    hot = rollout(env, demonstrator_policy(), episodes=3, base_seed=0, eta=50.0)
    assert all(s.score == env.analytic_optimum() for s in hot)


def test_episode_seeds_are_distinct_and_reproducible():
    s = episode_seeds(7, 100)
    assert len(set(s)) == 100 and s == episode_seeds(7, 100)
    assert s != episode_seeds(8, 100)
    with pytest.raises(ValueError):
        episode_seeds(0, 0)


def test_uniform_random_policy_scores_near_zero_on_average():
    env = ToyEnv()
    uniform = ScriptedPolicy(lambda env: 0)
    uniform.distribution = lambda env: np.ones(18)
    scores = rollout(env, uniform, episodes=40, base_seed=1)
    assert abs(summarize_scores(scores)["mean"]) < 1.0


def test_failed_episode_is_recorded_not_raised():
    class Broken(ToyEnv):
        def step(self, action):
            if self.seed % 2:
                raise RuntimeError("emulator fault")
            return super().step(action)

    scores = rollout(Broken(), demonstrator_policy(), episodes=6, base_seed=0, greedy=True)
    statuses = {s.status for s in scores}
    assert statuses == {"ok", "failed"}
    summary = summarize_scores(scores)
    assert summary["n_failed"] == sum(s.seed % 2 for s in scores)
    assert summary["mean"] == ToyEnv().analytic_optimum()


def test_rollout_argument_checks():
    with pytest.raises(ValueError):
        rollout(ToyEnv(), demonstrator_policy(), episodes=1, eta=math.nan)
    with pytest.raises(ValueError):
        rollout(ToyEnv(), demonstrator_policy(), episodes=1, frame_skip=0)


def test_make_env():
    assert isinstance(make_env("toy"), ToyEnv)
    with pytest.raises(ConfigurationError):
        make_env("gym:Pong")
    with pytest.raises(ConfigurationError):
        make_env("ale:definitely_not_a_rom")
