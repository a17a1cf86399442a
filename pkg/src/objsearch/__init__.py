"""Recognition-guided object search on a discrete scene lattice.

Subpackages: `scene` (lattice + objects + goal derivation), `env` (episode
dynamics), `nn` (autodiff substrate), `detector` (target-conditioned
recognition), `reward` (reward schemes), `policy` (actor/critic network),
`trainer` (advantage actor-critic), `evaluation` (metrics, baselines,
exports), `cli` (command-line pipeline).
"""

from .detector import Detection, DetectorConfig, DetectorModel, detect
from .env import Action, EpisodeTrace, Outcome, is_goal, run_episode, step
from .evaluation import EvalReport, PolicyActor, RandomWalkActor, evaluate, random_walk
from .policy import PolicyModel, act, encode_location, entropy
from .reward import CumulativeArea, RecordArea, RecordState, SparseGoal, episode_total, step_reward
from .scene import Box, ObjectSpec, RobotState, Scene, generate_synthetic, goal_states, load_scene, save_scene
from .trainer import TrainConfig, a2c_update, train

__version__ = "0.1.0"

__all__ = [
    "Action",
    "Box",
    "CumulativeArea",
    "Detection",
    "DetectorConfig",
    "DetectorModel",
    "EpisodeTrace",
    "EvalReport",
    "ObjectSpec",
    "Outcome",
    "PolicyActor",
    "PolicyModel",
    "RandomWalkActor",
    "RecordArea",
    "RecordState",
    "RobotState",
    "Scene",
    "SparseGoal",
    "TrainConfig",
    "a2c_update",
    "act",
    "detect",
    "encode_location",
    "entropy",
    "episode_total",
    "evaluate",
    "generate_synthetic",
    "goal_states",
    "is_goal",
    "load_scene",
    "random_walk",
    "run_episode",
    "save_scene",
    "step",
    "step_reward",
    "train",
]
