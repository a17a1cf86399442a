"""Reward schemes for the search task.

Three schemes are supported:

* ``SparseGoal``     -- fixed positive reward at goal states, small penalty
                        elsewhere.
* ``CumulativeArea`` -- the detected box area at every step, unconditionally.
* ``RecordArea``     -- the detected box area only when it strictly beats the
                        largest area seen so far in the episode; everything
                        else (including repeats and shrinking boxes) is 0.
                        This kills the back-and-forth trap where two adjacent
                        states with boxes pay out forever.

``step_reward`` is the streaming per-step form used inside episodes (the
return discount is applied later by the trainer). ``episode_total`` evaluates
the discounted episode total directly from an area sequence and serves as the
closed-form oracle the streaming form is checked against.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence


@dataclass(frozen=True)
class RecordState:
    """Largest area credited so far in the current episode."""

    best_area: float = 0.0


@dataclass(frozen=True)
class RewardScheme:
    gamma: float = 0.99

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")


@dataclass(frozen=True)
class SparseGoal(RewardScheme):
    goal_reward: float = 10.0
    step_penalty: float = -0.01


@dataclass(frozen=True)
class CumulativeArea(RewardScheme):
    pass


@dataclass(frozen=True)
class RecordArea(RewardScheme):
    pass


def make_scheme(name: str, gamma: float = 0.99) -> RewardScheme:
    """Scheme factory used by config/CLI (`sparse`, `cumulative`, `record`)."""
    schemes = {
        "sparse": SparseGoal,
        "cumulative": CumulativeArea,
        "record": RecordArea,
    }
    try:
        return schemes[name](gamma=gamma)
    except KeyError:
        raise ValueError(f"unknown reward scheme {name!r}; expected one of {sorted(schemes)}") from None


def step_reward(
    scheme: RewardScheme,
    record: RecordState,
    detected_area: float,
    at_goal: bool,
) -> tuple[float, RecordState]:
    """Undiscounted reward for arriving at a state, plus the updated record.

    `detected_area` is 0 when nothing was detected. RecordArea credits only a
    strict improvement over the episode's best area so far.
    """
    if detected_area < 0:
        raise ValueError("detected_area must be >= 0")
    if isinstance(scheme, SparseGoal):
        return (scheme.goal_reward if at_goal else scheme.step_penalty), record
    if isinstance(scheme, CumulativeArea):
        return detected_area, record
    if isinstance(scheme, RecordArea):
        if detected_area > record.best_area:
            return detected_area, replace(record, best_area=detected_area)
        return 0.0, record
    raise TypeError(f"unknown reward scheme {scheme!r}")


def episode_total(
    scheme: RewardScheme,
    areas: Sequence[float],
    goal_flags: Sequence[bool] | None = None,
) -> float:
    """Discounted episode total, evaluated directly from the area sequence.

    RecordArea sums gamma^i * a_i over the running-max record breaks (strict
    increases, left to right); CumulativeArea sums gamma^i * a_i over every
    step; SparseGoal needs `goal_flags` and sums the discounted goal/penalty
    rewards.
    """
    if goal_flags is None:
        goal_flags = [False] * len(areas)
    if len(goal_flags) != len(areas):
        raise ValueError("areas and goal_flags must have the same length")
    if any(a < 0 for a in areas):
        raise ValueError("areas must be >= 0")
    gamma = scheme.gamma
    if isinstance(scheme, SparseGoal):
        return sum(
            gamma**i * (scheme.goal_reward if flag else scheme.step_penalty)
            for i, flag in enumerate(goal_flags)
        )
    if isinstance(scheme, CumulativeArea):
        return sum(gamma**i * a for i, a in enumerate(areas))
    if isinstance(scheme, RecordArea):
        total = 0.0
        best = 0.0
        for i, a in enumerate(areas):
            if a > best:
                total += gamma**i * a
                best = a
        return total
    raise TypeError(f"unknown reward scheme {scheme!r}")
