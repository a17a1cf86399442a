"""Discrete scenes: state lattice, objects, ground-truth boxes, view features.

A robot state is a (cell, heading, tilt) triple on a rectangular grid.
Every non-blocked state carries one feature vector standing in for the
camera view's embedding; states from which an object is visible also carry
a ground-truth box for it. Scenes are immutable after construction and can
be shared across threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

SCENE_FORMAT_VERSION = 1

# heading 0..3 = N, E, S, W as (dcol, drow); row grows southward
HEADING_VECTORS = ((0, -1), (1, 0), (0, 1), (-1, 0))
DEFAULT_HEADINGS = 4
DEFAULT_TILTS = 3  # 0 = down, 1 = level, 2 = up
DEFAULT_VISIBILITY_RANGE = 2

# salts for deriving independent per-state / per-object RNG streams
_FEATURE_SALT = 101
_OBJECT_SALT = 202
_LAYOUT_SALT = 303

# amplitude of the object signature mixed into view features, relative to the
# base noise; large enough for box geometry to be recoverable, small enough
# that recognition still needs the target conditioning
_SIGNATURE_GAIN = 3.0


class SceneError(ValueError):
    """Scene file cannot be parsed or violates a scene invariant."""


class RobotState(NamedTuple):
    col: int
    row: int
    heading: int
    tilt: int


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in normalized image coordinates (center + size)."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise SceneError(f"box center out of range: ({self.x}, {self.y})")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise SceneError(f"box size out of range: ({self.w}, {self.h})")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h])


@dataclass(frozen=True)
class ObjectSpec:
    id: str
    target_feature: np.ndarray
    anchor_cell: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "target_feature", np.asarray(self.target_feature, dtype=np.float64))


@dataclass(eq=False)
class Scene:
    grid_width: int
    grid_height: int
    headings: int
    tilts: int
    blocked: frozenset[tuple[int, int]]
    objects: list[ObjectSpec]
    view_features: dict[RobotState, np.ndarray]
    truth_boxes: dict[tuple[RobotState, str], Box]
    _goal_cache: dict[str, frozenset[RobotState]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._validate()

    # --- basic geometry -------------------------------------------------

    def in_grid(self, cell: tuple[int, int]) -> bool:
        c, r = cell
        return 0 <= c < self.grid_width and 0 <= r < self.grid_height

    def cell_free(self, cell: tuple[int, int]) -> bool:
        return self.in_grid(cell) and cell not in self.blocked

    def states(self) -> Iterator[RobotState]:
        """All valid robot states, row-major then heading then tilt."""
        for row in range(self.grid_height):
            for col in range(self.grid_width):
                if (col, row) in self.blocked:
                    continue
                for heading in range(self.headings):
                    for tilt in range(self.tilts):
                        yield RobotState(col, row, heading, tilt)

    def is_valid_state(self, s: RobotState) -> bool:
        return (
            self.cell_free((s.col, s.row))
            and 0 <= s.heading < self.headings
            and 0 <= s.tilt < self.tilts
        )

    @property
    def feature_dim(self) -> int:
        return next(iter(self.view_features.values())).shape[0]

    def object_by_id(self, object_id: str) -> ObjectSpec:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise KeyError(f"unknown object id {object_id!r}")

    def truth_box(self, s: RobotState, object_id: str) -> Box | None:
        return self.truth_boxes.get((s, object_id))

    # --- invariants -------------------------------------------------------

    def _validate(self) -> None:
        if self.grid_width < 1 or self.grid_height < 1:
            raise SceneError("grid must be at least 1x1")
        if self.headings != len(HEADING_VECTORS):
            raise SceneError(f"expected {len(HEADING_VECTORS)} headings, got {self.headings}")
        if self.tilts < 1:
            raise SceneError("need at least one tilt level")
        if not self.objects:
            raise SceneError("scene has no objects; nothing is findable")
        for cell in self.blocked:
            if not self.in_grid(cell):
                raise SceneError(f"blocked cell {cell} outside grid")

        expected = {s for s in self.states()}
        got = set(self.view_features)
        if got != expected:
            missing = sorted(expected - got)[:3]
            extra = sorted(got - expected)[:3]
            raise SceneError(f"view feature map mismatch (missing {missing}, extra {extra})")

        dim = self.feature_dim
        for s, feat in self.view_features.items():
            if feat.shape != (dim,):
                raise SceneError(f"feature at {s} has shape {feat.shape}, expected ({dim},)")

        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise SceneError("duplicate object ids")
        for obj in self.objects:
            if obj.target_feature.shape != (dim,):
                raise SceneError(f"target feature of {obj.id!r} has wrong dimension")
            if not self.in_grid(obj.anchor_cell):
                raise SceneError(f"anchor of {obj.id!r} outside grid")

        findable = {obj.id: False for obj in self.objects}
        for (s, object_id), box in self.truth_boxes.items():
            if object_id not in findable:
                raise SceneError(f"truth box references unknown object {object_id!r} at {s}")
            if s not in self.view_features:
                raise SceneError(f"truth box at invalid state {s}")
            if not isinstance(box, Box):
                raise SceneError(f"truth box at {s} is not a Box")
            findable[object_id] = True
        for object_id, ok in findable.items():
            if not ok:
                raise SceneError(f"object {object_id!r} has no state with a truth box")

    # --- equality (numpy-aware; cache excluded) -------------------------

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        if (
            (self.grid_width, self.grid_height, self.headings, self.tilts) !=
            (other.grid_width, other.grid_height, other.headings, other.tilts)
            or self.blocked != other.blocked
        ):
            return False
        if [o.id for o in self.objects] != [o.id for o in other.objects]:
            return False
        for a, b in zip(self.objects, other.objects):
            if a.anchor_cell != b.anchor_cell or not np.array_equal(a.target_feature, b.target_feature):
                return False
        if set(self.view_features) != set(other.view_features):
            return False
        for s, feat in self.view_features.items():
            if not np.array_equal(feat, other.view_features[s]):
                return False
        return self.truth_boxes == other.truth_boxes


# ---------------------------------------------------------------------------
# goal derivation
# ---------------------------------------------------------------------------

def goal_states(scene: Scene, object_id: str) -> frozenset[RobotState]:
    """States whose truth-box area reaches the fifth-largest area for the object.

    Fewer than five boxed states: all of them. Ties at the threshold are kept
    (>= comparison), so the result can exceed five states.
    """
    cached = scene._goal_cache.get(object_id)
    if cached is not None:
        return cached
    scene.object_by_id(object_id)  # raises on unknown id
    areas = [
        (box.area, s)
        for (s, oid), box in scene.truth_boxes.items()
        if oid == object_id
    ]
    if len(areas) <= 5:
        goals = frozenset(s for _, s in areas)
    else:
        threshold = sorted((a for a, _ in areas), reverse=True)[4]
        goals = frozenset(s for a, s in areas if a >= threshold)
    scene._goal_cache[object_id] = goals
    return goals


# ---------------------------------------------------------------------------
# synthetic scene generation
# ---------------------------------------------------------------------------

def heading_faces(cell: tuple[int, int], heading: int, anchor: tuple[int, int]) -> bool:
    """True when `anchor` lies in the 90-degree frontal cone of `heading`."""
    dc, dr = anchor[0] - cell[0], anchor[1] - cell[1]
    hc, hr = HEADING_VECTORS[heading]
    dot = dc * hc + dr * hr
    cross = hc * dr - hr * dc
    return dot > 0 and dot >= abs(cross)


def _state_index(scene_like: tuple[int, int, int, int], s: RobotState) -> int:
    width, _, headings, tilts = scene_like
    return ((s.row * width + s.col) * headings + s.heading) * tilts + s.tilt


def _object_rng(seed: int, obj_index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _OBJECT_SALT, obj_index, stream]))


def generate_synthetic(
    seed: int,
    grid: tuple[int, int],
    n_objects: int,
    feature_dim: int,
    *,
    tilts: int = DEFAULT_TILTS,
    visibility_range: int = DEFAULT_VISIBILITY_RANGE,
    n_blocked: int = 0,
) -> Scene:
    """Build a deterministic synthetic scene.

    Each object is anchored at a distinct cell and is visible from states
    whose cell lies within Chebyshev distance `visibility_range` of the
    anchor, whose heading faces the anchor, and whose tilt matches the
    object's height class. Truth-box area shrinks strictly with distance
    from the anchor; a small per-state jitter keeps areas distinct without
    crossing distance bands.

    View features mimic how neighbouring camera views overlap: the leading
    dimensions hold a smooth pose encoding, the rest is a per-state
    pseudo-random vector, and each visible object adds signature directions
    modulated by its box geometry.
    """
    width, height = grid
    if width < 2 or height < 2:
        raise ValueError("grid must be at least 2x2")
    if n_objects < 1:
        raise ValueError("need at least one object")
    if feature_dim < 8:
        raise ValueError("feature_dim must be >= 8")

    layout_rng = np.random.default_rng(np.random.SeedSequence([seed, _LAYOUT_SALT]))
    cells = [(c, r) for r in range(height) for c in range(width)]
    anchor_idx = layout_rng.choice(len(cells), size=n_objects, replace=False)
    anchors = [cells[i] for i in anchor_idx]

    blocked: set[tuple[int, int]] = set()
    if n_blocked > 0:
        candidates = [cell for cell in cells if cell not in anchors]
        order = layout_rng.permutation(len(candidates))
        for i in order:
            if len(blocked) == n_blocked:
                break
            trial = blocked | {candidates[i]}
            if _cells_connected(width, height, trial):
                blocked.add(candidates[i])
        if len(blocked) < n_blocked:
            raise SceneError("could not place blocked cells without disconnecting the grid")

    objects: list[ObjectSpec] = []
    signatures: list[np.ndarray] = []  # (5, D) per object
    height_class: list[int] = []
    for i in range(n_objects):
        rng = _object_rng(seed, i, 0)
        target = rng.uniform(-0.5, 0.5, feature_dim)
        sig = rng.normal(size=(5, feature_dim))
        sig /= np.linalg.norm(sig, axis=1, keepdims=True)
        objects.append(ObjectSpec(id=f"obj{i}", target_feature=target, anchor_cell=anchors[i]))
        signatures.append(sig)
        height_class.append(int(rng.integers(0, tilts)))

    dims = (width, height, DEFAULT_HEADINGS, tilts)
    truth_boxes: dict[tuple[RobotState, str], Box] = {}
    view_features: dict[RobotState, np.ndarray] = {}

    base_y = np.linspace(0.35, 0.65, tilts)  # lower tilt looks down -> object sits lower in frame

    for row in range(height):
        for col in range(width):
            if (col, row) in blocked:
                continue
            for heading in range(DEFAULT_HEADINGS):
                for tilt in range(tilts):
                    s = RobotState(col, row, heading, tilt)
                    idx = _state_index(dims, s)
                    feat_rng = np.random.default_rng(np.random.SeedSequence([seed, _FEATURE_SALT, idx]))
                    feature = feat_rng.uniform(-0.5, 0.5, feature_dim)
                    pose = _pose_encoding(s, width, height, tilts)
                    feature[:pose.size] = pose + 0.1 * feature[:pose.size]
                    for i, obj in enumerate(objects):
                        box = _synthetic_box(seed, i, s, obj.anchor_cell, height_class[i], base_y,
                                             visibility_range)
                        if box is None:
                            continue
                        truth_boxes[(s, obj.id)] = box
                        sig = signatures[i]
                        feature = feature + _SIGNATURE_GAIN * (
                            box.area * sig[0]
                            + (box.x - 0.5) * sig[1]
                            + (box.y - 0.5) * sig[2]
                            + box.w * sig[3]
                            + box.h * sig[4]
                        )
                    view_features[s] = feature

    return Scene(
        grid_width=width,
        grid_height=height,
        headings=DEFAULT_HEADINGS,
        tilts=tilts,
        blocked=frozenset(blocked),
        objects=objects,
        view_features=view_features,
        truth_boxes=truth_boxes,
    )


def _pose_encoding(s: RobotState, width: int, height: int, tilts: int) -> np.ndarray:
    """Smooth low-dimensional encoding of the camera pose.

    Nearby states get nearby encodings, the way embeddings of overlapping
    camera views correlate; this is what lets the value function and policy
    generalize instead of memorizing every state.
    """
    u = s.col / (width - 1) - 0.5
    v = s.row / (height - 1) - 0.5
    angle = s.heading * math.pi / 2.0
    t = (s.tilt / (tilts - 1) - 0.5) if tilts > 1 else 0.0
    return np.array([u, v, 0.5 * math.sin(angle), 0.5 * math.cos(angle), t, u * v])


def _synthetic_box(
    seed: int,
    obj_index: int,
    s: RobotState,
    anchor: tuple[int, int],
    obj_tilt: int,
    base_y: np.ndarray,
    visibility_range: int,
) -> Box | None:
    cell = (s.col, s.row)
    cheb = max(abs(anchor[0] - cell[0]), abs(anchor[1] - cell[1]))
    if cheb == 0 or cheb > visibility_range:
        return None
    if s.tilt != obj_tilt or not heading_faces(cell, s.heading, anchor):
        return None

    dc, dr = anchor[0] - cell[0], anchor[1] - cell[1]
    dist = math.hypot(dc, dr)
    # per-(object, state) jitter; +-8% never crosses distance bands
    jitter_rng = np.random.default_rng(
        np.random.SeedSequence([seed, _OBJECT_SALT, obj_index, 1, s.col, s.row, s.heading, s.tilt])
    )
    jw, jh, jx, jy = jitter_rng.uniform(-0.08, 0.08, 4)
    side = 0.55 / dist
    w = min(1.0, side * (1.0 + jw))
    h = min(1.0, side * (1.0 + jh))

    hc, hr = HEADING_VECTORS[s.heading]
    sin_bearing = (hc * dr - hr * dc) / dist  # signed lateral offset of the anchor
    x = min(0.95, max(0.05, 0.5 + 0.4 * sin_bearing + 0.1 * jx))
    y = min(0.95, max(0.05, base_y[obj_tilt] + 0.1 * jy))
    return Box(x=x, y=y, w=w, h=h)


def _cells_connected(width: int, height: int, blocked: set[tuple[int, int]]) -> bool:
    free = [(c, r) for r in range(height) for c in range(width) if (c, r) not in blocked]
    if not free:
        return False
    seen = {free[0]}
    frontier = [free[0]]
    while frontier:
        c, r = frontier.pop()
        for dc, dr in HEADING_VECTORS:
            nxt = (c + dc, r + dr)
            if nxt not in seen and 0 <= nxt[0] < width and 0 <= nxt[1] < height and nxt not in blocked:
                seen.add(nxt)
                frontier.append(nxt)
    return len(seen) == len(free)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def save_scene(scene: Scene, path) -> None:
    doc = {
        "format_version": SCENE_FORMAT_VERSION,
        "grid": {
            "width": scene.grid_width,
            "height": scene.grid_height,
            "headings": scene.headings,
            "tilts": scene.tilts,
        },
        "blocked": sorted(list(c) for c in scene.blocked),
        "objects": [
            {
                "id": obj.id,
                "anchor": list(obj.anchor_cell),
                "target_feature": obj.target_feature.tolist(),
            }
            for obj in scene.objects
        ],
        "states": [
            {
                "cell": [s.col, s.row],
                "heading": s.heading,
                "tilt": s.tilt,
                "feature": scene.view_features[s].tolist(),
                "boxes": {
                    oid: [box.x, box.y, box.w, box.h]
                    for (st, oid), box in scene.truth_boxes.items()
                    if st == s
                },
            }
            for s in scene.states()
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_scene(path) -> Scene:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise SceneError(f"cannot read scene file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path} is not valid JSON: {exc}") from exc

    try:
        grid = doc["grid"]
        width, height = int(grid["width"]), int(grid["height"])
        headings, tilts = int(grid["headings"]), int(grid["tilts"])
        blocked = frozenset((int(c), int(r)) for c, r in doc.get("blocked", []))
        objects = [
            ObjectSpec(
                id=str(o["id"]),
                target_feature=np.asarray(o["target_feature"], dtype=np.float64),
                anchor_cell=(int(o["anchor"][0]), int(o["anchor"][1])),
            )
            for o in doc["objects"]
        ]
        view_features: dict[RobotState, np.ndarray] = {}
        truth_boxes: dict[tuple[RobotState, str], Box] = {}
        for entry in doc["states"]:
            s = RobotState(int(entry["cell"][0]), int(entry["cell"][1]),
                           int(entry["heading"]), int(entry["tilt"]))
            if s in view_features:
                raise SceneError(f"duplicate state entry {s}")
            view_features[s] = np.asarray(entry["feature"], dtype=np.float64)
            for oid, coords in entry.get("boxes", {}).items():
                x, y, w, h = (float(v) for v in coords)
                truth_boxes[(s, str(oid))] = Box(x=x, y=y, w=w, h=h)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SceneError):
            raise
        raise SceneError(f"{path}: malformed scene document: {exc}") from exc

    return Scene(
        grid_width=width,
        grid_height=height,
        headings=headings,
        tilts=tilts,
        blocked=blocked,
        objects=objects,
        view_features=view_features,
        truth_boxes=truth_boxes,
    )
