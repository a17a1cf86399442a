"""Entropy-regularized advantage actor-critic over (scene, object) workers.

Each worker snapshots the shared parameters, rolls one episode with the
frozen snapshot, accumulates n-step actor-critic gradients over the
episode's segments, and applies the accumulated gradient to the shared
parameters in one lock-protected update at the episode boundary. With one
worker the whole run is bit-deterministic for a fixed seed.
"""

from __future__ import annotations

import csv
import os
import threading
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import nn, policy as policy_mod
from .detector import Detection, DetectorModel, detect as detector_detect
from .env import Action, N_ACTIONS, step, truth_detect_fn
from .policy import PolicyModel, act, encode_location, entropy, init_policy
from .reward import RecordState, RewardScheme, RecordArea, step_reward
from .scene import RobotState, Scene, goal_states

_EPISODE_SALT = 31
_START_SALT = 32


class TrainingDiverged(RuntimeError):
    """Loss stayed above the divergence bound for too many episodes."""


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 0.01  # entropy-bonus weight; higher explores more
    gamma: float = 0.99
    lr: float = 7e-4
    n_step: int = 5
    max_steps_per_episode: int = 300
    episodes: int = 30000
    workers: int = 1
    seed: int = 0
    use_truth_detections: bool = False
    optimizer: str = "sgd"  # "sgd" (plain, the default) or "rmsprop" (shared cache)
    rms_alpha: float = 0.99
    rms_eps: float = 1e-8
    diverge_loss_bound: float = 1e6
    diverge_patience: int = 10
    checkpoint_every: int = 0  # episodes between checkpoints; 0 disables
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must be in (0, 1]")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.n_step < 1:
            raise ValueError("n_step must be >= 1")
        if self.optimizer not in ("sgd", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class Transition:
    scene_id: str
    view: np.ndarray
    target: np.ndarray
    loc: np.ndarray
    action: int
    reward: float


@dataclass(frozen=True)
class Segment:
    transitions: tuple[Transition, ...]
    terminal: bool  # episode really ended (goal); step-limit cuts bootstrap
    bootstrap: float  # v(next state) when not terminal


@dataclass(frozen=True)
class EpisodeStats:
    episode: int
    object_id: str
    scene_id: str
    length: int
    total_reward: float
    mean_entropy: float
    loss: float


def n_step_returns(segment: Segment, gamma: float) -> list[float]:
    """Discounted returns per transition, bootstrapped at non-terminal cuts."""
    acc = 0.0 if segment.terminal else segment.bootstrap
    out: list[float] = []
    for tr in reversed(segment.transitions):
        acc = tr.reward + gamma * acc
        out.append(acc)
    out.reverse()
    return out


def segment_objective(
    p: Mapping[str, nn.Var],
    segment: Segment,
    returns: Sequence[float],
    advantages: Sequence[float],
    beta: float,
) -> nn.Var:
    """Actor-critic loss over one segment with fixed targets.

    Per step: -log pi(a_t) * A_t + 0.5 * (R_t - v_t)^2 - beta * H(pi_t),
    where the returns and advantages enter as constants.
    """
    total: nn.Var | float = 0.0
    for tr, ret, adv in zip(segment.transitions, returns, advantages):
        pi, v = policy_mod.forward(p, tr.scene_id, tr.view, tr.target, tr.loc)
        safe_pi = nn.clip(pi, 1e-12, 1.0)
        log_pi = nn.log(safe_pi)
        ent = -1.0 * nn.vsum(pi * log_pi)
        term = (-adv) * nn.pick(log_pi, tr.action) + 0.5 * nn.square(ret - v) + (-beta) * ent
        total = term if isinstance(total, float) else total + term
    return total


def a2c_update(
    model: PolicyModel,
    segment: Segment,
    config: TrainConfig,
) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    """Gradients of the segment loss plus scalar diagnostics."""
    if not segment.transitions:
        raise ValueError("empty segment")
    if len(segment.transitions) > config.n_step:
        raise ValueError(f"segment longer than n_step={config.n_step}")
    returns = n_step_returns(segment, config.gamma)
    evals = [act(model, tr.scene_id, tr.view, tr.target, tr.loc) for tr in segment.transitions]
    advantages = [r - v for r, (_, v) in zip(returns, evals)]
    loss, grads = nn.value_and_grad(
        lambda p: segment_objective(p, segment, returns, advantages, config.beta),
        model.params,
    )
    if not np.isfinite(loss):
        raise nn.NonFiniteError(f"actor-critic loss became non-finite ({loss})")
    entropies = [entropy(pi) for pi, _ in evals]
    stats = {
        "loss": loss,
        "mean_entropy": float(np.mean(entropies)),
        "mean_advantage": float(np.mean(advantages)),
        "mean_return": float(np.mean(returns)),
    }
    return grads, stats


class _Optimizer:
    """Shared-parameter update rule; the cache (if any) lives with the
    shared store and must be mutated under the same lock."""

    def __init__(self, config: TrainConfig, params: nn.ParamStore):
        self.config = config
        self.cache: dict[str, np.ndarray] | None = None
        if config.optimizer == "rmsprop":
            self.cache = {name: np.zeros_like(value) for name, value in params.items()}

    def apply(self, shared: nn.ParamStore, grads: Mapping[str, np.ndarray]) -> None:
        cfg = self.config
        if self.cache is None:
            nn.sgd_step(shared, grads, cfg.lr)
            return
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise nn.NonFiniteError(f"non-finite gradient for parameter {name!r}")
        for name, g in grads.items():
            c = cfg.rms_alpha * self.cache[name] + (1.0 - cfg.rms_alpha) * g * g
            self.cache[name] = c
            shared[name] = shared[name] - cfg.lr * g / np.sqrt(c + cfg.rms_eps)


DetectFn = Callable[[RobotState], Detection]


def make_detect_fn(
    scene: Scene,
    object_id: str,
    detector: DetectorModel | None,
    use_truth: bool,
) -> tuple[DetectFn, float]:
    """Detection provider and the presence threshold used for the location grid."""
    if use_truth or detector is None:
        return truth_detect_fn(scene, object_id), 0.5
    target = scene.object_by_id(object_id).target_feature

    def fn(s: RobotState) -> Detection:
        return detector_detect(detector, scene.view_features[s], target)

    return fn, detector.config.threshold


@dataclass
class _Task:
    scene_id: str
    scene: Scene
    object_id: str
    target: np.ndarray
    detect: DetectFn
    threshold: float
    starts: list[RobotState]  # non-goal valid states


def _collect_episode(
    local: PolicyModel,
    task: _Task,
    scheme: RewardScheme,
    config: TrainConfig,
    rng: np.random.Generator,
) -> tuple[dict[str, np.ndarray], EpisodeStats]:
    """One episode against frozen local params; returns summed gradients."""
    scene, scene_id, object_id = task.scene, task.scene_id, task.object_id
    goals = goal_states(scene, object_id)
    start = task.starts[int(rng.integers(len(task.starts)))]

    record = RecordState()
    s = start
    det = task.detect(s)
    _, record = step_reward(scheme, record, det.area, s in goals)
    loc = encode_location(det, task.threshold)

    ep_grads: dict[str, np.ndarray] | None = None
    transitions: list[Transition] = []
    entropies: list[float] = []
    total_reward = 0.0
    total_loss = 0.0
    length = 0

    for t in range(config.max_steps_per_episode):
        view = scene.view_features[s]
        pi, _ = act(local, scene_id, view, task.target, loc)
        a = int(rng.choice(N_ACTIONS, p=pi))
        entropies.append(entropy(pi))

        s_next = step(scene, s, Action(a))
        det = task.detect(s_next)
        at_goal = s_next in goals
        r, record = step_reward(scheme, record, det.area, at_goal)
        transitions.append(Transition(scene_id, view, task.target, loc, a, r))
        total_reward += r
        length += 1

        s = s_next
        loc = encode_location(det, task.threshold)
        done = at_goal
        cut = len(transitions) == config.n_step or t == config.max_steps_per_episode - 1
        if done or cut:
            bootstrap = 0.0
            if not done:
                bootstrap = act(local, scene_id, scene.view_features[s], task.target, loc)[1]
            segment = Segment(tuple(transitions), terminal=done, bootstrap=bootstrap)
            grads, seg_stats = a2c_update(local, segment, config)
            ep_grads = nn.accumulate_grads(ep_grads, grads)
            total_loss += seg_stats["loss"]
            transitions = []
        if done:
            break

    stats = EpisodeStats(
        episode=-1,  # filled in by the caller once the ticket is known
        object_id=object_id,
        scene_id=scene_id,
        length=length,
        total_reward=total_reward,
        mean_entropy=float(np.mean(entropies)) if entropies else 0.0,
        loss=total_loss,
    )
    return ep_grads or {}, stats


def train(
    scenes: Sequence[tuple[str, Scene]],
    object_ids: Sequence[str] | None,
    detector: DetectorModel | None,
    config: TrainConfig,
    scheme: RewardScheme | None = None,
) -> tuple[PolicyModel, list[EpisodeStats]]:
    """Train the policy over all (scene, object) pairs.

    Worker w handles pairs w, w+workers, ... and cycles through them, one
    episode per ticket drawn from a shared budget of `config.episodes`.
    Updates to the shared parameters are serialized by a lock and applied
    whole, once per episode.
    """
    if scheme is None:
        scheme = RecordArea(gamma=config.gamma)
    if not scenes:
        raise ValueError("need at least one scene")
    scene_ids = [sid for sid, _ in scenes]
    if len(set(scene_ids)) != len(scene_ids):
        raise ValueError("scene ids must be unique")

    tasks: list[_Task] = []
    for scene_id, scene in scenes:
        wanted = [o.id for o in scene.objects]
        if object_ids is not None:
            wanted = [oid for oid in wanted if oid in object_ids]
            if not wanted:
                raise ValueError(f"scene {scene_id!r} has none of the requested objects")
        for oid in wanted:
            detect, threshold = make_detect_fn(scene, oid, detector, config.use_truth_detections)
            goals = goal_states(scene, oid)
            starts = [s for s in scene.states() if s not in goals]
            if not starts:
                raise ValueError(f"no non-goal start states for object {oid!r}")
            tasks.append(_Task(
                scene_id=scene_id,
                scene=scene,
                object_id=oid,
                target=scene.object_by_id(oid).target_feature,
                detect=detect,
                threshold=threshold,
                starts=starts,
            ))

    feature_dim = scenes[0][1].feature_dim
    model = init_policy(scene_ids, feature_dim, config.seed)
    shared = model.params
    optimizer = _Optimizer(config, shared)
    if config.checkpoint_every > 0 and config.checkpoint_dir:
        os.makedirs(config.checkpoint_dir, exist_ok=True)

    lock = threading.Lock()
    ticket_box = {"next": 0}
    curves: list[EpisodeStats] = []
    errors: list[BaseException] = []

    def worker(w: int) -> None:
        my_tasks = tasks[w::config.workers] or tasks
        bad_streak = 0
        k = 0
        while True:
            with lock:
                if errors or ticket_box["next"] >= config.episodes:
                    return
                ticket = ticket_box["next"]
                ticket_box["next"] = ticket + 1
                local = PolicyModel(
                    params=shared.copy(),
                    scene_ids=model.scene_ids,
                    feature_dim=model.feature_dim,
                    embed_dim=model.embed_dim,
                    fusion_dim=model.fusion_dim,
                )
            task = my_tasks[k % len(my_tasks)]
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, _EPISODE_SALT, w, k]))
            try:
                grads, stats = _collect_episode(local, task, scheme, config, rng)
            except BaseException as exc:  # propagate to the caller
                with lock:
                    errors.append(exc)
                return
            if abs(stats.loss) > config.diverge_loss_bound:
                bad_streak += 1
                if bad_streak >= config.diverge_patience:
                    with lock:
                        errors.append(TrainingDiverged(
                            f"loss above {config.diverge_loss_bound} for "
                            f"{bad_streak} consecutive episodes (last {stats.loss!r})"
                        ))
                    return
            else:
                bad_streak = 0
            with lock:
                if grads:
                    optimizer.apply(shared, grads)
                curves.append(EpisodeStats(
                    episode=ticket,
                    object_id=stats.object_id,
                    scene_id=stats.scene_id,
                    length=stats.length,
                    total_reward=stats.total_reward,
                    mean_entropy=stats.mean_entropy,
                    loss=stats.loss,
                ))
                if (
                    config.checkpoint_every > 0
                    and config.checkpoint_dir
                    and (ticket + 1) % config.checkpoint_every == 0
                ):
                    path = os.path.join(config.checkpoint_dir, f"policy_ep{ticket + 1:06d}.npz")
                    policy_mod.save_policy(model, path)
            k += 1

    if config.workers == 1:
        worker(0)
    else:
        threads = [threading.Thread(target=worker, args=(w,)) for w in range(config.workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    if errors:
        raise errors[0]
    curves.sort(key=lambda st: st.episode)
    return model, curves


def write_curves_csv(curves: Sequence[EpisodeStats], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "object", "scene", "length", "total_reward", "mean_entropy"])
        for st in curves:
            writer.writerow([
                st.episode, st.object_id, st.scene_id, st.length,
                repr(st.total_reward), repr(st.mean_entropy),
            ])
