"""Episode dynamics on the scene lattice.

Transitions are deterministic and total: any move into a wall, a blocked
cell, or past the tilt range leaves the state unchanged (the collision
rule). An episode ends on arrival at a goal state or at the step limit.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .detector import Detection
from .reward import RecordState, RewardScheme, step_reward
from .scene import HEADING_VECTORS, RobotState, Scene, goal_states


class Action(enum.IntEnum):
    MOVE_AHEAD = 0
    MOVE_RIGHT = 1
    MOVE_LEFT = 2
    MOVE_BACK = 3
    LOOK_UP = 4
    LOOK_DOWN = 5
    ROTATE_RIGHT = 6
    ROTATE_LEFT = 7


N_ACTIONS = len(Action)

# move actions translate relative to the heading; offsets are quarter turns
_MOVE_TURNS = {
    Action.MOVE_AHEAD: 0,
    Action.MOVE_RIGHT: 1,
    Action.MOVE_BACK: 2,
    Action.MOVE_LEFT: 3,
}


class Outcome(enum.Enum):
    SUCCESS = "success"
    STEP_LIMIT = "step_limit"


class Step(NamedTuple):
    state: RobotState  # state arrived at after taking `action`
    action: Action
    detection: Detection
    reward: float


@dataclass
class EpisodeTrace:
    start: RobotState
    steps: list[Step]
    outcome: Outcome

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def total_reward(self) -> float:
        return sum(s.reward for s in self.steps)

    def visited_states(self) -> list[RobotState]:
        return [self.start] + [s.state for s in self.steps]


def step(scene: Scene, s: RobotState, a: Action) -> RobotState:
    """Apply one action; collisions (walls, blocked cells, tilt limits) stay put."""
    a = Action(a)
    if a in _MOVE_TURNS:
        hc, hr = HEADING_VECTORS[(s.heading + _MOVE_TURNS[a]) % scene.headings]
        target = (s.col + hc, s.row + hr)
        if scene.cell_free(target):
            return RobotState(target[0], target[1], s.heading, s.tilt)
        return s
    if a is Action.ROTATE_RIGHT:
        return RobotState(s.col, s.row, (s.heading + 1) % scene.headings, s.tilt)
    if a is Action.ROTATE_LEFT:
        return RobotState(s.col, s.row, (s.heading - 1) % scene.headings, s.tilt)
    if a is Action.LOOK_UP:
        if s.tilt + 1 < scene.tilts:
            return RobotState(s.col, s.row, s.heading, s.tilt + 1)
        return s
    if a is Action.LOOK_DOWN:
        if s.tilt > 0:
            return RobotState(s.col, s.row, s.heading, s.tilt - 1)
        return s
    raise ValueError(f"unknown action {a!r}")


def is_goal(scene: Scene, object_id: str, s: RobotState) -> bool:
    return s in goal_states(scene, object_id)


# detection provider: state -> Detection (detector-backed or ground truth)
DetectFn = Callable[[RobotState], Detection]
# action chooser: (state, detection at state, rng) -> Action
PolicyFn = Callable[[RobotState, Detection, np.random.Generator], Action]


def truth_detect_fn(scene: Scene, object_id: str) -> DetectFn:
    """Oracle detections straight from the scene's truth boxes."""

    def detect(s: RobotState) -> Detection:
        box = scene.truth_box(s, object_id)
        if box is None:
            return Detection(p=0.0, box=None, present=False)
        return Detection(p=1.0, box=box, present=True)

    return detect


def run_episode(
    scene: Scene,
    object_id: str,
    policy: PolicyFn,
    detect: DetectFn,
    scheme: RewardScheme,
    start: RobotState,
    max_steps: int,
    rng_seed,
) -> EpisodeTrace:
    """Roll one episode. Deterministic given the seed and fixed parameters.

    The goal check runs on arrival, before the next action is chosen; a
    start already at a goal terminates with length 0. The start state's
    detection seeds the record-keeping reward state but is credited to no
    action; each recorded step carries the detection and reward of the
    state it arrives at.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    if not scene.is_valid_state(start):
        raise ValueError(f"invalid start state {start}")
    rng = np.random.default_rng(rng_seed)
    goals = goal_states(scene, object_id)

    record = RecordState()
    det = detect(start)
    _, record = step_reward(scheme, record, det.area, start in goals)
    if start in goals:
        return EpisodeTrace(start=start, steps=[], outcome=Outcome.SUCCESS)

    steps: list[Step] = []
    s = start
    outcome = Outcome.STEP_LIMIT
    for _ in range(max_steps):
        a = policy(s, det, rng)
        s = step(scene, s, a)
        det = detect(s)
        at_goal = s in goals
        r, record = step_reward(scheme, record, det.area, at_goal)
        steps.append(Step(state=s, action=a, detection=det, reward=r))
        if at_goal:
            outcome = Outcome.SUCCESS
            break
    return EpisodeTrace(start=start, steps=steps, outcome=outcome)


def write_trace_csv(trace: EpisodeTrace, path) -> None:
    """One row per action with the arrived-at state."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "col", "row", "heading", "tilt", "action", "detected_area", "reward"])
        for i, st in enumerate(trace.steps):
            writer.writerow([
                i,
                st.state.col,
                st.state.row,
                st.state.heading,
                st.state.tilt,
                st.action.name,
                repr(st.detection.area),
                repr(st.reward),
            ])
