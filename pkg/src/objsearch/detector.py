"""Target-conditioned recognition: does the requested object appear in the
current view, and where.

The network takes the view feature and the target-object feature, projects
each through its own dense layer, fuses the concatenation, and splits into a
presence head (sigmoid scalar) and a box head (four sigmoid-squashed values:
center x, center y, width, height). Training minimizes binary cross-entropy
plus a weighted squared-error box term that is active only on positive
samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .scene import Box, Scene

EPS = 1e-7


@dataclass(frozen=True)
class DetectorConfig:
    feature_dim: int = 32
    embed_dim: int = 16
    box_weight: float = 0.5  # weight of the box regression term
    lr: float = 0.3
    threshold: float = 0.5  # presence probability cutoff
    batch_size: int = 32

    def __post_init__(self):
        if self.box_weight <= 0:
            raise ValueError("box_weight must be positive")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError("threshold must be in (0, 1)")


@dataclass(frozen=True)
class Detection:
    p: float
    box: Box | None
    present: bool

    @property
    def area(self) -> float:
        """Detected box area; 0 when not reported present."""
        if not self.present or self.box is None:
            return 0.0
        return self.box.area


@dataclass
class DetectorModel:
    params: nn.ParamStore
    config: DetectorConfig


def init_detector(config: DetectorConfig, seed: int) -> DetectorModel:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    d, e = config.feature_dim, config.embed_dim
    p = nn.ParamStore()
    for name, fan_in, fan_out in [
        ("view_proj", d, e),
        ("target_proj", d, e),
        ("fusion", 2 * e, e),
        ("cls_hidden", e, e),
        ("cls_out", e, 1),
        ("box_hidden", e, e),
        ("box_out", e, 4),
    ]:
        p.add(f"{name}.W", nn.glorot_uniform(rng, fan_in, fan_out))
        p.add(f"{name}.b", np.zeros(fan_out))
    return DetectorModel(params=p, config=config)


def _layer(p: Mapping[str, nn.Var], name: str, x) -> nn.Var:
    return nn.dense(x, p[f"{name}.W"], p[f"{name}.b"])


def forward(p: Mapping[str, nn.Var], view, target) -> tuple[nn.Var, nn.Var]:
    """Presence probability and raw (sigmoid-squashed) box.

    Accepts a single feature vector or a batch; returns (p, box) with shapes
    () / (4,) or (B,) / (B, 4).
    """
    ve = nn.relu(_layer(p, "view_proj", view))
    te = nn.relu(_layer(p, "target_proj", target))
    joint = nn.relu(_layer(p, "fusion", nn.concat([ve, te])))
    cls_h = nn.relu(_layer(p, "cls_hidden", joint))
    logit = _layer(p, "cls_out", cls_h)
    prob = nn.sigmoid(logit)
    box_h = nn.relu(_layer(p, "box_hidden", joint))
    box = nn.sigmoid(_layer(p, "box_out", box_h))
    if prob.data.ndim >= 1:
        prob = nn.sum_last(prob)  # squeeze the trailing singleton
    return prob, box


def detect(model: DetectorModel, view_feature: np.ndarray, target_feature: np.ndarray) -> Detection:
    view_feature = np.asarray(view_feature, dtype=np.float64)
    target_feature = np.asarray(target_feature, dtype=np.float64)
    d = model.config.feature_dim
    if view_feature.shape != (d,) or target_feature.shape != (d,):
        raise nn.ShapeError(
            f"expected feature vectors of dim {d}, got {view_feature.shape} and {target_feature.shape}"
        )
    prob, box = forward(model.params.leaves(), view_feature, target_feature)
    p = float(prob.data)
    x, y, w, h = (float(v) for v in box.data)
    return Detection(p=p, box=Box(x=x, y=y, w=w, h=h), present=p >= model.config.threshold)


def loss_graph(
    prob: nn.Var,
    box: nn.Var,
    label_present: np.ndarray,
    label_box: np.ndarray,
    box_weight: float,
) -> nn.Var:
    """Per-sample loss, reduced by mean over the batch.

    `label_present` holds 0/1 floats; `label_box` the truth coordinates
    (arbitrary on negatives: the box term is gated off by the label).
    """
    y = np.asarray(label_present, dtype=np.float64)
    p = nn.clip(prob, EPS, 1.0 - EPS)
    bce = -1.0 * (y * nn.log(p) + (1.0 - y) * nn.log(1.0 - p))
    box_err = nn.sum_last(nn.square(box - np.asarray(label_box, dtype=np.float64)))
    per_sample = bce + box_weight * (y * box_err)
    return nn.vmean(per_sample)


def detection_loss(
    p: float,
    box: Sequence[float],
    label_present: int,
    label_box: Sequence[float] | None,
    box_weight: float,
) -> float:
    """Scalar loss for one prediction/label pair.

    Cross-entropy on the presence probability (clamped to [EPS, 1-EPS]) plus
    `box_weight` times the squared coordinate error, the latter only when the
    label says the object is present.
    """
    if label_present not in (0, 1):
        raise ValueError("label_present must be 0 or 1")
    if (label_box is None) != (label_present == 0):
        raise ValueError("label_box must be given exactly when label_present is 1")
    target_box = np.zeros(4) if label_box is None else np.asarray(label_box, dtype=np.float64)
    val = loss_graph(
        nn.Var(float(p)),
        nn.Var(np.asarray(box, dtype=np.float64)),
        np.asarray(float(label_present)),
        target_box,
        box_weight,
    )
    return float(val.data)


@dataclass
class DetectorDataset:
    views: np.ndarray  # (N, D)
    targets: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,) 0/1
    boxes: np.ndarray  # (N, 4), zeros on negatives
    pairs: list[tuple[object, str]] = field(default_factory=list)  # (state, object id)


def build_dataset(scenes: Sequence[Scene]) -> DetectorDataset:
    views, targets, labels, boxes, pairs = [], [], [], [], []
    for scene in scenes:
        positives = {obj.id: 0 for obj in scene.objects}
        negatives = {obj.id: 0 for obj in scene.objects}
        for s in scene.states():
            feat = scene.view_features[s]
            for obj in scene.objects:
                box = scene.truth_box(s, obj.id)
                views.append(feat)
                targets.append(obj.target_feature)
                labels.append(1.0 if box is not None else 0.0)
                boxes.append(box.as_array() if box is not None else np.zeros(4))
                pairs.append((s, obj.id))
                if box is not None:
                    positives[obj.id] += 1
                else:
                    negatives[obj.id] += 1
        for oid in positives:
            if positives[oid] == 0 or negatives[oid] == 0:
                raise ValueError(f"object {oid!r} lacks positive or negative states for training")
    return DetectorDataset(
        views=np.asarray(views),
        targets=np.asarray(targets),
        labels=np.asarray(labels),
        boxes=np.asarray(boxes),
        pairs=pairs,
    )


def train(
    scenes: Scene | Sequence[Scene],
    config: DetectorConfig,
    seed: int,
    epochs: int,
) -> tuple[DetectorModel, list[float]]:
    """Minibatch SGD over all (state, object) pairs; returns model and the
    per-epoch mean loss curve. Deterministic given the seed."""
    if isinstance(scenes, Scene):
        scenes = [scenes]
    data = build_dataset(scenes)
    model = init_detector(config, seed)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([seed, 12]))
    n = data.views.shape[0]
    curve: list[float] = []
    for _ in range(epochs):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]

            def batch_loss(p: dict[str, nn.Var]) -> nn.Var:
                prob, box = forward(p, data.views[idx], data.targets[idx])
                return loss_graph(prob, box, data.labels[idx], data.boxes[idx], config.box_weight)

            value, grads = nn.value_and_grad(batch_loss, model.params)
            if not np.isfinite(value):
                raise nn.NonFiniteError(f"detector loss became non-finite ({value}) on batch at {lo}")
            if config.lr > 0:
                nn.sgd_step(model.params, grads, config.lr)
            epoch_loss += value * len(idx)
        curve.append(epoch_loss / n)
    return model, curve


# --- checkpoint plumbing -----------------------------------------------------

def save_detector(model: DetectorModel, path) -> None:
    meta = {
        "kind": "detector",
        "feature_dim": str(model.config.feature_dim),
        "embed_dim": str(model.config.embed_dim),
        "box_weight": repr(model.config.box_weight),
        "threshold": repr(model.config.threshold),
    }
    nn.save_checkpoint(model.params, path, meta)


def load_detector(path) -> DetectorModel:
    params, meta = nn.load_checkpoint(path)
    if meta.get("kind") != "detector":
        raise ValueError(f"{path}: not a detector checkpoint")
    config = DetectorConfig(
        feature_dim=int(meta["feature_dim"]),
        embed_dim=int(meta["embed_dim"]),
        box_weight=float(meta["box_weight"]),
        threshold=float(meta["threshold"]),
    )
    return DetectorModel(params=params, config=config)
