"""Policy/value network with per-scene output branches.

The observation and target features pass through separate (non-shared)
embedding layers; the embeddings are fused together with a 5x5 binary grid
encoding where the recognized object sits in the view. Each training scene
owns its own output branch: a dense layer to 8 action logits (softmax) and a
dense layer to a scalar state value. Branch layers start at zero so the
initial policy is exactly uniform.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import nn
from .detector import Detection

N_ACTIONS = 8
GRID_SIDE = 5
LOC_DIM = GRID_SIDE * GRID_SIDE


@dataclass
class PolicyModel:
    params: nn.ParamStore
    scene_ids: list[str]  # branch registry; order fixes branch identity
    feature_dim: int
    embed_dim: int = 16
    fusion_dim: int = 32

    def branch_prefix(self, scene_id: str) -> str:
        if scene_id not in self.scene_ids:
            raise KeyError(f"no policy branch for scene {scene_id!r}; have {self.scene_ids}")
        return f"branch.{scene_id}"


def init_policy(
    scene_ids: list[str],
    feature_dim: int,
    seed: int,
    embed_dim: int = 16,
    fusion_dim: int = 32,
) -> PolicyModel:
    if not scene_ids:
        raise ValueError("need at least one scene id")
    if len(set(scene_ids)) != len(scene_ids):
        raise ValueError("scene ids must be unique")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 21]))
    p = nn.ParamStore()
    for name, fan_in, fan_out in [
        ("obs_embed", feature_dim, embed_dim),
        ("target_embed", feature_dim, embed_dim),
        ("fusion", 2 * embed_dim + LOC_DIM, fusion_dim),
    ]:
        p.add(f"{name}.W", nn.glorot_uniform(rng, fan_in, fan_out))
        p.add(f"{name}.b", np.zeros(fan_out))
    for scene_id in scene_ids:
        p.add(f"branch.{scene_id}.pi.W", np.zeros((fusion_dim, N_ACTIONS)))
        p.add(f"branch.{scene_id}.pi.b", np.zeros(N_ACTIONS))
        p.add(f"branch.{scene_id}.v.W", np.zeros((fusion_dim, 1)))
        p.add(f"branch.{scene_id}.v.b", np.zeros(1))
    return PolicyModel(
        params=p,
        scene_ids=list(scene_ids),
        feature_dim=feature_dim,
        embed_dim=embed_dim,
        fusion_dim=fusion_dim,
    )


def encode_location(det: Detection, threshold: float) -> np.ndarray:
    """5x5 binary grid of the cells the detected box overlaps (flattened).

    All zeros when the presence probability is below the threshold. A cell
    counts as covered only when the overlap has strictly positive area, so a
    box that merely touches a cell boundary does not light it up.
    """
    grid = np.zeros(LOC_DIM)
    if det.p < threshold or det.box is None:
        return grid
    b = det.box
    x1, x2 = b.x - b.w / 2.0, b.x + b.w / 2.0
    y1, y2 = b.y - b.h / 2.0, b.y + b.h / 2.0
    for r in range(GRID_SIDE):
        for c in range(GRID_SIDE):
            cx1, cx2 = c / GRID_SIDE, (c + 1) / GRID_SIDE
            cy1, cy2 = r / GRID_SIDE, (r + 1) / GRID_SIDE
            if min(x2, cx2) > max(x1, cx1) and min(y2, cy2) > max(y1, cy1):
                grid[r * GRID_SIDE + c] = 1.0
    return grid


def forward(
    p: Mapping[str, nn.Var],
    scene_id: str,
    view_feature,
    target_feature,
    loc: np.ndarray,
) -> tuple[nn.Var, nn.Var]:
    """Action distribution (softmax over 8 logits) and state value."""
    obs = nn.relu(nn.dense(view_feature, p["obs_embed.W"], p["obs_embed.b"]))
    tgt = nn.relu(nn.dense(target_feature, p["target_embed.W"], p["target_embed.b"]))
    joint = nn.relu(nn.dense(nn.concat([obs, tgt, nn.as_var(loc)]), p["fusion.W"], p["fusion.b"]))
    logits = nn.dense(joint, p[f"branch.{scene_id}.pi.W"], p[f"branch.{scene_id}.pi.b"])
    value = nn.dense(joint, p[f"branch.{scene_id}.v.W"], p[f"branch.{scene_id}.v.b"])
    return nn.softmax(logits), nn.sum_last(value)


def act(
    model: PolicyModel,
    scene_id: str,
    view_feature: np.ndarray,
    target_feature: np.ndarray,
    loc: np.ndarray,
) -> tuple[np.ndarray, float]:
    """Plain-array policy evaluation for acting and analysis."""
    model.branch_prefix(scene_id)  # raises on unknown scene
    view_feature = np.asarray(view_feature, dtype=np.float64)
    d = model.feature_dim
    if view_feature.shape != (d,):
        raise nn.ShapeError(f"expected view feature of dim {d}, got {view_feature.shape}")
    pi, v = forward(model.params.leaves(), scene_id, view_feature, target_feature, loc)
    return pi.data.copy(), float(v.data)


def entropy(pi: np.ndarray) -> float:
    """Shannon entropy of an action distribution, natural log, 0*log0 = 0."""
    pi = np.asarray(pi, dtype=np.float64)
    nzero = pi[pi > 0.0]
    return float(-(nzero * np.log(nzero)).sum())


MAX_ENTROPY = math.log(N_ACTIONS)


# --- checkpoint plumbing -----------------------------------------------------

def save_policy(model: PolicyModel, path) -> None:
    meta = {
        "kind": "policy",
        "scene_ids": json.dumps(model.scene_ids),
        "feature_dim": str(model.feature_dim),
        "embed_dim": str(model.embed_dim),
        "fusion_dim": str(model.fusion_dim),
    }
    nn.save_checkpoint(model.params, path, meta)


def load_policy(path) -> PolicyModel:
    params, meta = nn.load_checkpoint(path)
    if meta.get("kind") != "policy":
        raise ValueError(f"{path}: not a policy checkpoint")
    return PolicyModel(
        params=params,
        scene_ids=list(json.loads(meta["scene_ids"])),
        feature_dim=int(meta["feature_dim"]),
        embed_dim=int(meta["embed_dim"]),
        fusion_dim=int(meta["fusion_dim"]),
    )
