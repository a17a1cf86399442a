"""Evaluation harness: success rate, trajectory length, baselines, exports.

Success means reaching a ground-truth goal state for the requested object
within the step limit; the detector influences only what the policy sees,
never the success judgment. The average trajectory length counts successful
episodes only and is absent when there is no success to average over.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .detector import DetectorModel
from .env import (
    Action,
    DetectFn,
    EpisodeTrace,
    N_ACTIONS,
    Outcome,
    PolicyFn,
    run_episode,
    step,
    truth_detect_fn,
)
from .policy import PolicyModel, act, encode_location, entropy
from .reward import RecordArea, RewardScheme
from .scene import RobotState, Scene, goal_states
from .trainer import make_detect_fn

_EVAL_SALT = 41


@dataclass(frozen=True)
class EpisodeResult:
    episode: int
    object_id: str
    success: bool
    length: int
    total_reward: float


@dataclass
class EvalReport:
    episodes: list[EpisodeResult]
    traces: list[EpisodeTrace]

    @property
    def n_episodes(self) -> int:
        return len(self.episodes)

    @property
    def success_rate(self) -> float:
        if not self.episodes:
            return 0.0
        return sum(e.success for e in self.episodes) / len(self.episodes)

    @property
    def avg_length(self) -> float | None:
        """Mean steps over successful episodes; None when nothing succeeded."""
        lengths = [e.length for e in self.episodes if e.success]
        if not lengths:
            return None
        return float(np.mean(lengths))

    def per_object(self) -> dict[str, tuple[float, float | None]]:
        out: dict[str, tuple[float, float | None]] = {}
        for oid in sorted({e.object_id for e in self.episodes}):
            rows = [e for e in self.episodes if e.object_id == oid]
            wins = [e.length for e in rows if e.success]
            out[oid] = (
                sum(e.success for e in rows) / len(rows),
                float(np.mean(wins)) if wins else None,
            )
        return out


def merge_reports(reports: Sequence[EvalReport]) -> EvalReport:
    episodes: list[EpisodeResult] = []
    traces: list[EpisodeTrace] = []
    offset = 0
    for rep in reports:
        for e in rep.episodes:
            episodes.append(EpisodeResult(offset + e.episode, e.object_id, e.success,
                                          e.length, e.total_reward))
        traces.extend(rep.traces)
        offset += rep.n_episodes
    return EvalReport(episodes=episodes, traces=traces)


# ---------------------------------------------------------------------------
# actors
# ---------------------------------------------------------------------------

class RandomWalkActor:
    """Uniform over the 8 actions at every step."""

    def bind(self, scene: Scene, object_id: str) -> tuple[PolicyFn, DetectFn]:
        def policy_fn(s, det, rng):
            return Action(int(rng.integers(N_ACTIONS)))

        return policy_fn, truth_detect_fn(scene, object_id)


class PolicyActor:
    """Acts from the trained policy, fed by detector (or truth) detections.

    Actions are sampled from the policy distribution by default; pass
    `argmax=True` for greedy evaluation.
    """

    def __init__(
        self,
        model: PolicyModel,
        scene_id: str,
        detector: DetectorModel | None = None,
        use_truth: bool = False,
        argmax: bool = False,
    ):
        self.model = model
        self.scene_id = scene_id
        self.detector = detector
        self.use_truth = use_truth or detector is None
        self.argmax = argmax

    def bind(self, scene: Scene, object_id: str) -> tuple[PolicyFn, DetectFn]:
        detect, threshold = make_detect_fn(scene, object_id, self.detector, self.use_truth)
        target = scene.object_by_id(object_id).target_feature

        def policy_fn(s, det, rng):
            loc = encode_location(det, threshold)
            pi, _ = act(self.model, self.scene_id, scene.view_features[s], target, loc)
            if self.argmax:
                return Action(int(np.argmax(pi)))
            return Action(int(rng.choice(N_ACTIONS, p=pi)))

        return policy_fn, detect

    def distribution(self, scene: Scene, object_id: str, s: RobotState) -> tuple[np.ndarray, float]:
        detect, threshold = make_detect_fn(scene, object_id, self.detector, self.use_truth)
        target = scene.object_by_id(object_id).target_feature
        loc = encode_location(detect(s), threshold)
        return act(self.model, self.scene_id, scene.view_features[s], target, loc)


class ShortestPathActor:
    """Reference actor that walks a lattice shortest path to the goal set."""

    def bind(self, scene: Scene, object_id: str) -> tuple[PolicyFn, DetectFn]:
        dist = bfs_distances(scene, object_id)

        def policy_fn(s, det, rng):
            best_action, best_dist = Action(0), math.inf
            for a in Action:
                d = dist.get(step(scene, s, a), math.inf)
                if d < best_dist:
                    best_action, best_dist = a, d
            return best_action

        return policy_fn, truth_detect_fn(scene, object_id)


def bfs_distances(scene: Scene, object_id: str) -> dict[RobotState, int]:
    """Steps from every state to the nearest goal state (reverse BFS)."""
    preds: dict[RobotState, list[RobotState]] = {}
    for s in scene.states():
        for a in Action:
            preds.setdefault(step(scene, s, a), []).append(s)
    dist: dict[RobotState, int] = {g: 0 for g in goal_states(scene, object_id)}
    queue = deque(dist)
    while queue:
        cur = queue.popleft()
        for prev in preds.get(cur, ()):
            if prev not in dist:
                dist[prev] = dist[cur] + 1
                queue.append(prev)
    return dist


# ---------------------------------------------------------------------------
# evaluation runs
# ---------------------------------------------------------------------------

def evaluate(
    actor,
    scene: Scene,
    object_id: str,
    n_episodes: int = 10,
    max_steps: int = 5000,
    seed: int = 0,
    scheme: RewardScheme | None = None,
) -> EvalReport:
    """Run seeded episodes from uniformly random valid start states."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if scheme is None:
        scheme = RecordArea()
    policy_fn, detect = actor.bind(scene, object_id)
    states = list(scene.states())
    episodes: list[EpisodeResult] = []
    traces: list[EpisodeTrace] = []
    for i in range(n_episodes):
        start_rng = np.random.default_rng(np.random.SeedSequence([seed, _EVAL_SALT, i, 0]))
        start = states[int(start_rng.integers(len(states)))]
        trace = run_episode(
            scene, object_id, policy_fn, detect, scheme, start,
            max_steps=max_steps,
            rng_seed=np.random.SeedSequence([seed, _EVAL_SALT, i, 1]),
        )
        episodes.append(EpisodeResult(
            episode=i,
            object_id=object_id,
            success=trace.outcome is Outcome.SUCCESS,
            length=trace.length,
            total_reward=trace.total_reward,
        ))
        traces.append(trace)
    return EvalReport(episodes=episodes, traces=traces)


def random_walk(
    scene: Scene,
    object_id: str,
    n_episodes: int = 10,
    max_steps: int = 5000,
    seed: int = 0,
) -> EvalReport:
    return evaluate(RandomWalkActor(), scene, object_id, n_episodes, max_steps, seed)


def entropy_map(actor: PolicyActor, scene: Scene, object_id: str) -> np.ndarray:
    """Per-cell mean policy entropy over headings and tilts; blocked cells NaN."""
    out = np.full((scene.grid_height, scene.grid_width), np.nan)
    detect, threshold = make_detect_fn(scene, object_id, actor.detector, actor.use_truth)
    target = scene.object_by_id(object_id).target_feature
    for row in range(scene.grid_height):
        for col in range(scene.grid_width):
            if (col, row) in scene.blocked:
                continue
            values = []
            for heading in range(scene.headings):
                for tilt in range(scene.tilts):
                    s = RobotState(col, row, heading, tilt)
                    loc = encode_location(detect(s), threshold)
                    pi, _ = act(actor.model, actor.scene_id, scene.view_features[s], target, loc)
                    values.append(entropy(pi))
            out[row, col] = float(np.mean(values))
    return out


# ---------------------------------------------------------------------------
# artifact export
# ---------------------------------------------------------------------------

def write_report_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "object", "success", "length", "total_reward"])
        for e in report.episodes:
            writer.writerow([e.episode, e.object_id, int(e.success), e.length, repr(e.total_reward)])


def read_report_csv(path) -> EvalReport:
    episodes: list[EpisodeResult] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            episodes.append(EpisodeResult(
                episode=int(row["episode"]),
                object_id=row["object"],
                success=bool(int(row["success"])),
                length=int(row["length"]),
                total_reward=float(row["total_reward"]),
            ))
    return EvalReport(episodes=episodes, traces=[])


def write_entropy_map_csv(matrix: np.ndarray, path) -> None:
    """Rows of comma-separated entropies; blocked (NaN) cells are empty."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(matrix):
            writer.writerow(["" if math.isnan(v) else repr(float(v)) for v in row])


def read_entropy_map_csv(path) -> np.ndarray:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            rows.append([math.nan if cell == "" else float(cell) for cell in row])
    return np.asarray(rows)


_GOAL_COLORS = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
_CELL_PX = 48


def write_trace_svg(
    scene: Scene,
    trace: EpisodeTrace | None,
    path,
    object_ids: Sequence[str] | None = None,
) -> None:
    """Top-down overlay: grid, per-object goal cells, trajectory polyline.

    With no trace (or an empty one) only the grid and goal markers are drawn.
    """
    if object_ids is None:
        object_ids = [o.id for o in scene.objects]
    width_px = scene.grid_width * _CELL_PX
    height_px = scene.grid_height * _CELL_PX
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width_px}" height="{height_px}" '
        f'viewBox="0 0 {width_px} {height_px}">',
        f'<rect width="{width_px}" height="{height_px}" fill="white"/>',
    ]
    for row in range(scene.grid_height):
        for col in range(scene.grid_width):
            fill = "#444444" if (col, row) in scene.blocked else "none"
            parts.append(
                f'<rect x="{col * _CELL_PX}" y="{row * _CELL_PX}" width="{_CELL_PX}" '
                f'height="{_CELL_PX}" fill="{fill}" stroke="#bbbbbb"/>'
            )
    for i, oid in enumerate(object_ids):
        color = _GOAL_COLORS[i % len(_GOAL_COLORS)]
        goal_cells = sorted({(g.col, g.row) for g in goal_states(scene, oid)})
        for col, row in goal_cells:
            cx = col * _CELL_PX + _CELL_PX / 2
            cy = row * _CELL_PX + _CELL_PX / 2
            parts.append(
                f'<circle cx="{cx}" cy="{cy}" r="{_CELL_PX * 0.3 - 3 * i}" fill="none" '
                f'stroke="{color}" stroke-width="3"><title>goal:{oid}</title></circle>'
            )
    if trace is not None and trace.steps:
        points = " ".join(
            f"{s.col * _CELL_PX + _CELL_PX / 2},{s.row * _CELL_PX + _CELL_PX / 2}"
            for s in trace.visited_states()
        )
        parts.append(
            f'<polyline points="{points}" fill="none" stroke="#111111" stroke-width="2"/>'
        )
    if trace is not None:
        sx = trace.start.col * _CELL_PX + _CELL_PX / 2
        sy = trace.start.row * _CELL_PX + _CELL_PX / 2
        parts.append(f'<circle cx="{sx}" cy="{sy}" r="5" fill="#111111"/>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts))
