"""Closed-loop play: Gibbs action sampling, environments and episode rollouts.

The built-in toy game shows an avatar and several pixel-identical targets, one
of which is the rewarded goal. Only the goal sprite flickers between two
horizontal positions on alternate frames, so after flicker-max preprocessing
all targets look the same while frame-to-frame optical flow still singles out
the goal. A gaze model that reads motion can therefore tell the policy what a
frame stack alone cannot.
"""

from __future__ import annotations

import functools
import logging
import math
import sys
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol, Sequence

import numpy as np

from agil.data_model import N_ACTIONS, stack_indices
from agil.errors import ConfigurationError
from agil.features import FlowConfig
from agil.pipeline import ObservationBuffer

log = logging.getLogger(__name__)

NOOP, UP, RIGHT, LEFT, DOWN = 0, 2, 3, 4, 5
DEFAULT_ETA = 1.0


# -- action selection ---------------------------------------------------------


def gibbs_probs(dist: np.ndarray, eta: float = DEFAULT_ETA) -> np.ndarray:
    """pi(a) = exp(eta * P(a)) / sum exp(eta * P(a')), computed shift-stably."""
    if not math.isfinite(eta):
        raise ValueError(f"temperature must be finite, got {eta}")
    p = np.asarray(dist, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or not np.all(np.isfinite(p)):
        raise ValueError("action distribution must be a non-empty finite vector")
    z = eta * p
    z = np.exp(z - z.max())
    return z / z.sum()


def gibbs_select(dist: np.ndarray, eta: float, rng: np.random.Generator) -> int:
    """Sample an index of ``dist`` from its Gibbs distribution."""
    pi = gibbs_probs(dist, eta)
    return int(rng.choice(pi.size, p=pi))


def restrict_to_legal(dist: np.ndarray, legal: Sequence[int]) -> np.ndarray:
    """Policy probabilities over the legal actions, renormalised (uniform if all zero)."""
    p = np.asarray(dist, dtype=np.float64)[list(legal)]
    total = p.sum()
    return p / total if total > 0 else np.full(len(legal), 1.0 / len(legal))


# -- environments -------------------------------------------------------------


class EnvironmentInterface(Protocol):
    frame_shape: tuple[int, int, int]

    def reset(self, seed: int) -> np.ndarray: ...

    def step(self, action: int) -> tuple[np.ndarray, float, bool]: ...

    def legal_actions(self) -> list[int]: ...


@dataclass(frozen=True)
class ToyConfig:
    width: int = 160
    height: int = 210
    n_targets: int = 2
    reach: int = 4                  # presses toward a target that collect it
    n_rounds: int = 5
    max_steps: int = 100
    offset_range: tuple[int, int] = (28, 60)
    axes: tuple[str, ...] = ("horizontal", "vertical")
    sprite_w: int = 8
    sprite_h: int = 8
    jitter: int = 4
    avatar_size: int = 10
    background: tuple[int, int, int] = (0, 0, 0)
    target_color: tuple[int, int, int] = (220, 120, 40)
    avatar_color: tuple[int, int, int] = (60, 200, 60)

    def __post_init__(self):
        if not 2 <= self.n_targets <= 4:
            raise ConfigurationError("the toy game supports 2 to 4 targets")
        if self.reach < 1 or self.n_rounds < 1 or self.max_steps < 1:
            raise ConfigurationError("reach, n_rounds and max_steps must be positive")
        bad = set(self.axes) - {"horizontal", "vertical"}
        if bad or not self.axes:
            raise ConfigurationError(f"unknown axes {sorted(bad)}")
        lo, hi = self.offset_range
        margin = self.sprite_w // 2 + self.jitter
        if lo <= self.avatar_size or hi + margin > min(self.width, self.height) // 2:
            raise ConfigurationError(f"offset range {self.offset_range} does not fit the frame")


_DIRECTIONS = {LEFT: (-1, 0), RIGHT: (1, 0), UP: (0, -1), DOWN: (0, 1)}
_AXIS_PAIRS = {"horizontal": (LEFT, RIGHT), "vertical": (UP, DOWN)}


@dataclass(frozen=True)
class Round:
    directions: tuple[int, ...]     # action that moves toward each target
    offset: int
    goal: int                       # index into directions


@dataclass(frozen=True)
class ToyState:
    round: int
    progress: tuple[int, ...]
    steps: int
    phase: int                      # frames since the round's layout appeared
    score: float
    done: bool


class ToyEnv:
    """Deterministic-given-seed surrogate arcade game (see module docstring)."""

    legal = (NOOP, UP, RIGHT, LEFT, DOWN)

    def __init__(self, config: ToyConfig | None = None):
        self.config = config or ToyConfig()
        self.frame_shape = (self.config.height, self.config.width, 3)
        self.rounds: tuple[Round, ...] = ()
        self.state: ToyState | None = None
        self.seed: int | None = None

    # layout
    def _make_rounds(self, rng: np.random.Generator) -> tuple[Round, ...]:
        cfg = self.config
        rounds = []
        for _ in range(cfg.n_rounds):
            if cfg.n_targets == 2:
                axis = cfg.axes[int(rng.integers(len(cfg.axes)))]
                dirs = _AXIS_PAIRS[axis]
            else:
                pool = [LEFT, RIGHT, UP, DOWN]
                pick = sorted(rng.choice(4, cfg.n_targets, replace=False).tolist())
                dirs = tuple(pool[i] for i in pick)
            offset = int(rng.integers(cfg.offset_range[0], cfg.offset_range[1] + 1))
            goal = int(rng.integers(len(dirs)))
            rounds.append(Round(tuple(dirs), offset, goal))
        return tuple(rounds)

    @property
    def center(self) -> tuple[int, int]:
        return self.config.width // 2, self.config.height // 2

    def target_centers(self, rnd: Round) -> list[tuple[int, int]]:
        cx, cy = self.center
        return [(cx + dx * rnd.offset, cy + dy * rnd.offset)
                for dx, dy in (_DIRECTIONS[d] for d in rnd.directions)]

    def _goal_box(self, rnd: Round, phase: int) -> tuple[int, int, int, int]:
        """Drawn goal rectangle (x0, y0, x1, y1): the union on a round's first frame,
        then alternately the left and the right half-position."""
        cfg = self.config
        gx, gy = self.target_centers(rnd)[rnd.goal]
        half_w, half_h, j = cfg.sprite_w // 2, cfg.sprite_h // 2, cfg.jitter // 2
        y0, y1 = gy - half_h, gy + half_h
        if phase == 0:
            return gx - half_w - j, y0, gx + half_w + j, y1
        shift = -j if phase % 2 == 1 else j
        return gx - half_w + shift, y0, gx + half_w + shift, y1

    def _decoy_box(self, center: tuple[int, int]) -> tuple[int, int, int, int]:
        cfg = self.config
        half_w, half_h, j = cfg.sprite_w // 2, cfg.sprite_h // 2, cfg.jitter // 2
        return center[0] - half_w - j, center[1] - half_h, center[0] + half_w + j, center[1] + half_h

    # interface
    def reset(self, seed: int) -> np.ndarray:
        self.seed = int(seed)
        self.rounds = self._make_rounds(np.random.default_rng(self.seed))
        self.state = ToyState(0, (0,) * self.config.n_targets, 0, 0, 0.0, False)
        return self.render()

    def legal_actions(self) -> list[int]:
        return list(self.legal)

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        if self.state.done:
            raise RuntimeError("episode is over")
        if action not in self.legal:
            raise ValueError(f"action {action} is not legal in the toy game")
        self.state, reward = self.transition(self.state, action)
        return self.render(), reward, self.state.done

    def transition(self, s: ToyState, action: int) -> tuple[ToyState, float]:
        cfg = self.config
        rnd = self.rounds[s.round]
        progress = list(s.progress)
        reward = 0.0
        new_round, phase = s.round, s.phase + 1
        if action in rnd.directions:
            j = rnd.directions.index(action)
            progress[j] += 1
            if progress[j] >= cfg.reach:
                reward = 1.0 if j == rnd.goal else -1.0
                new_round, phase = s.round + 1, 0
                progress = [0] * cfg.n_targets
        steps = s.steps + 1
        done = new_round >= cfg.n_rounds or steps >= cfg.max_steps
        if new_round >= cfg.n_rounds:
            new_round, phase = s.round, s.phase + 1
        return ToyState(new_round, tuple(progress), steps, phase, s.score + reward, done), reward

    # rendering
    def render(self) -> np.ndarray:
        cfg = self.config
        frame = np.empty(self.frame_shape, np.uint8)
        frame[:] = cfg.background
        cx, cy = self.center
        a = cfg.avatar_size // 2
        frame[cy - a:cy + a, cx - a:cx + a] = cfg.avatar_color
        frame[cy - 2:cy + 2, cx - 2:cx + 2] = cfg.background
        rnd = self.rounds[self.state.round]
        for i, c in enumerate(self.target_centers(rnd)):
            x0, y0, x1, y1 = (self._goal_box(rnd, self.state.phase) if i == rnd.goal
                              else self._decoy_box(c))
            frame[y0:y1, x0:x1] = cfg.target_color
        return frame

    # demonstrator
    def demonstrator_action(self) -> int:
        rnd = self.rounds[self.state.round]
        return rnd.directions[rnd.goal]

    def demonstrator_gaze(self) -> tuple[float, float]:
        """Centre of the goal sprite as drawn in the current frame."""
        x0, y0, x1, y1 = self._goal_box(self.rounds[self.state.round], self.state.phase)
        return (x0 + x1) / 2.0, (y0 + y1) / 2.0

    def analytic_optimum(self) -> float:
        return float(min(self.config.n_rounds, self.config.max_steps // self.config.reach))


def toy_env(config: ToyConfig | dict | None = None) -> ToyEnv:
    if isinstance(config, dict):
        config = ToyConfig(**config)
    return ToyEnv(config)


def exhaustive_optimum(env: ToyEnv, seed: int) -> float:
    """Best achievable episode score, by memoised search over every action sequence."""
    env.reset(seed)
    # reward-to-go ignores the accumulated score and the render phase
    canon = lambda s: replace(s, phase=0, score=0.0)  # noqa: E731
    start = canon(env.state)

    @functools.lru_cache(maxsize=None)
    def best(s: ToyState) -> float:
        if s.done:
            return 0.0
        return max(r + best(canon(n)) for n, r in (env.transition(s, a) for a in env.legal))

    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 10 * env.config.max_steps + 1000))
    try:
        return best(start)
    finally:
        sys.setrecursionlimit(limit)


class AleEnv:
    """Adapter for an Arcade Learning Environment ROM (needs the optional ``ale_py``)."""

    def __init__(self, rom: str):
        try:
            from ale_py import ALEInterface, roms
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise ConfigurationError("ALE environments need the 'ale_py' package") from exc
        self._ale = ALEInterface()
        self._rom = roms.get_rom_path(rom)
        if self._rom is None:
            raise ConfigurationError(f"unknown ROM {rom!r}")
        self._ale.loadROM(self._rom)
        h, w = self._ale.getScreenDims()
        self.frame_shape = (h, w, 3)

    def reset(self, seed: int) -> np.ndarray:  # pragma: no cover - needs ROMs
        self._ale.setInt("random_seed", int(seed) % (2**31))
        self._ale.loadROM(self._rom)
        self._ale.reset_game()
        return self._ale.getScreenRGB()

    def step(self, action: int):  # pragma: no cover - needs ROMs
        reward = float(self._ale.act(self._ale.getLegalActionSet()[action]))
        return self._ale.getScreenRGB(), reward, bool(self._ale.game_over())

    def legal_actions(self) -> list[int]:  # pragma: no cover - needs ROMs
        return list(range(len(self._ale.getMinimalActionSet())))


def make_env(spec: str, toy_config: ToyConfig | None = None):
    if spec == "toy":
        return toy_env(toy_config)
    if spec.startswith("ale:"):
        return AleEnv(spec[4:])
    raise ConfigurationError(f"unknown environment {spec!r}; use 'toy' or 'ale:<rom>'")


# -- rollouts -----------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeScore:
    episode_index: int
    seed: int
    score: float
    steps: int
    status: str = "ok"


def episode_seeds(base_seed: int, episodes: int) -> list[int]:
    """Distinct per-episode seeds derived from ``base_seed``."""
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    rng = np.random.default_rng(base_seed)
    return [int(s) for s in rng.choice(2**31, size=episodes, replace=False)]


class ScriptedPolicy:
    """Hand-written policy reading privileged environment state; for tests and baselines."""

    variant = "scripted"

    def __init__(self, choose: Callable[[object], int], n_actions: int = N_ACTIONS):
        self.choose = choose
        self.n_actions = n_actions

    def distribution(self, env) -> np.ndarray:
        p = np.zeros(self.n_actions)
        p[self.choose(env)] = 1.0
        return p


def demonstrator_policy() -> ScriptedPolicy:
    return ScriptedPolicy(lambda env: env.demonstrator_action())


@dataclass
class _Agent:
    """Per-episode observation bookkeeping shared by every policy variant."""

    policy: object
    gaze: object | None
    flow_config: FlowConfig | None
    buffer: ObservationBuffer = field(init=False)
    foveated: list = field(default_factory=list)

    def __post_init__(self):
        channels = getattr(self.gaze, "channels", ())
        vector = getattr(getattr(self.gaze, "config", None), "motion_encoding", "") == "vector"
        self.buffer = ObservationBuffer(self.flow_config, motion_vector=vector,
                                        need_motion="motion" in channels,
                                        need_saliency="saliency" in channels)

    def observe(self, frame: np.ndarray) -> None:
        self.buffer.push(frame)

    def distribution(self, env) -> np.ndarray:
        from agil.policy_net import (PolicyVariant, foveated_frames, map_gaze_point,
                                     policy_forward)
        from agil.gaze_net import gaze_forward

        if isinstance(self.policy, ScriptedPolicy):
            return self.policy.distribution(env)
        obs = self.buffer.image_stack()
        variant = self.policy.variant
        if variant is PolicyVariant.PLAIN:
            return policy_forward(self.policy, obs)
        gaze_map = None
        if self.gaze is not None:
            gaze_map = gaze_forward(self.gaze, self.buffer.gaze_inputs(self.gaze.channels))
        if variant is PolicyVariant.ATTENTION:
            return policy_forward(self.policy, obs, gaze_map)
        # Foveated: foveate each new frame at its predicted fixation, stack like the frames
        current = self.buffer.gray[-1]
        point = map_gaze_point(gaze_map) if gaze_map is not None else (np.nan, np.nan)
        geom = getattr(env, "geometry", None)
        if geom is None:
            from agil.retina import DEFAULT_GEOMETRY as geom
        self.foveated.append(foveated_frames(current[None], np.array([point]), geom)[0])
        if len(self.foveated) > 8:
            self.foveated = self.foveated[-4:]
        stack = np.stack([self.foveated[i] for i in stack_indices(len(self.foveated) - 1)])
        return policy_forward(self.policy, obs, stack)


def rollout(env, policy, gaze=None, episodes: int = 100, base_seed: int = 0,
            eta: float = DEFAULT_ETA, max_steps: int | None = None, frame_skip: int = 1,
            greedy: bool = False, flow_config: FlowConfig | None = None) -> list[EpisodeScore]:
    """Play ``episodes`` seeded episodes, sampling each action from the Gibbs distribution
    of the policy's probabilities over the environment's legal actions."""
    if not math.isfinite(eta):
        raise ValueError(f"temperature must be finite, got {eta}")
    if frame_skip < 1:
        raise ValueError("frame_skip must be at least 1")
    from agil.policy_net import PolicyVariant
    variant = getattr(policy, "variant", None)
    if variant is PolicyVariant.ATTENTION and gaze is None:
        gaze = getattr(policy, "gaze_model", None)
        if gaze is None:
            raise ConfigurationError("the Attention policy needs a gaze model")

    scores = []
    for index, seed in enumerate(episode_seeds(base_seed, episodes)):
        rng = np.random.default_rng([seed, 1])
        agent = _Agent(policy, gaze, flow_config)
        score, steps, status = 0.0, 0, "ok"
        try:
            frame = env.reset(seed)
            legal = env.legal_actions()
            done = False
            while not done and (max_steps is None or steps < max_steps):
                agent.observe(frame)
                probs = restrict_to_legal(agent.distribution(env), legal)
                if greedy:
                    action = legal[int(np.argmax(probs))]
                else:
                    action = legal[gibbs_select(probs, eta, rng)]
                for _ in range(frame_skip):
                    frame, reward, done = env.step(action)
                    score += float(reward)
                    if done:
                        break
                steps += 1
        except Exception as exc:  # an environment fault ends only this episode
            log.warning("episode %d (seed %d) failed after %d steps: %s", index, seed, steps, exc)
            status = "failed"
        scores.append(EpisodeScore(index, seed, score, max(steps, 1), status))
    return scores


def summarize_scores(scores: Sequence[EpisodeScore]) -> dict:
    ok = [s.score for s in scores if s.status == "ok"]
    return {"mean": float(np.mean(ok)) if ok else math.nan,
            "std": float(np.std(ok)) if ok else math.nan,
            "n_ok": len(ok), "n_failed": len(scores) - len(ok)}
