from __future__ import annotations

import json
import math

import numpy as np
import pytest

from objsearch.scene import (
    Box,
    ObjectSpec,
    RobotState,
    Scene,
    SceneError,
    generate_synthetic,
    goal_states,
    heading_faces,
    load_scene,
    save_scene,
)

DIM = 8


def make_area_scene(areas, tie_pairs=()):
    """1-row strip scene with one object and hand-picked truth-box areas.

    `areas` maps consecutive (col, heading=0, tilt=0) states; `tie_pairs`
    lets a second state at heading=1 share the same cell/area.
    """
    width = max(len(areas), 2)
    features = {}
    boxes = {}
    for col in range(width):
        for heading in range(4):
            s = RobotState(col, 0, heading, 0)
            features[s] = np.full(DIM, 0.1 * col + heading)
    for col, area in enumerate(areas):
        side = math.sqrt(area)
        boxes[(RobotState(col, 0, 0, 0), "target")] = Box(0.5, 0.5, side, side)
    for col, area in tie_pairs:
        side = math.sqrt(area)
        boxes[(RobotState(col, 0, 1, 0), "target")] = Box(0.5, 0.5, side, side)
    return Scene(
        grid_width=width,
        grid_height=1,
        headings=4,
        tilts=1,
        blocked=frozenset(),
        objects=[ObjectSpec("target", np.zeros(DIM), (0, 0))],
        view_features=features,
        truth_boxes=boxes,
    )


# --- generation --------------------------------------------------------------

def test_generated_scene_state_count(scene_5x5):
    assert len(scene_5x5.view_features) == 5 * 5 * 4 * 3


def test_generation_is_deterministic():
    a = generate_synthetic(13, (4, 3), 2, 16)
    b = generate_synthetic(13, (4, 3), 2, 16)
    assert a == b


def test_generation_seed_changes_scene():
    a = generate_synthetic(13, (4, 3), 2, 16)
    b = generate_synthetic(14, (4, 3), 2, 16)
    assert a != b


def test_every_object_findable_by_exhaustive_scan():
    scene = generate_synthetic(7, (5, 5), 1, 32)
    found = any(
        scene.truth_box(s, "obj0") is not None for s in scene.states()
    )
    assert found


def test_largest_box_is_adjacent_and_facing():
    scene = generate_synthetic(7, (5, 5), 3, 32)
    for obj in scene.objects:
        best_state, best_area = None, -1.0
        for s in scene.states():
            box = scene.truth_box(s, obj.id)
            if box is not None and box.area > best_area:
                best_state, best_area = s, box.area
        anchor = obj.anchor_cell
        cheb = max(abs(best_state.col - anchor[0]), abs(best_state.row - anchor[1]))
        assert cheb == 1
        assert heading_faces((best_state.col, best_state.row), best_state.heading, anchor)


def test_box_area_decreases_with_distance():
    scene = generate_synthetic(7, (5, 5), 2, 32)
    for obj in scene.objects:
        by_cheb = {}
        for s in scene.states():
            box = scene.truth_box(s, obj.id)
            if box is None:
                continue
            cheb = max(abs(s.col - obj.anchor_cell[0]), abs(s.row - obj.anchor_cell[1]))
            by_cheb.setdefault(cheb, []).append(box.area)
        for near, far in zip(sorted(by_cheb), sorted(by_cheb)[1:]):
            assert min(by_cheb[near]) > max(by_cheb[far])


def test_generate_precondition_checks():
    with pytest.raises(ValueError):
        generate_synthetic(1, (1, 5), 1, 16)
    with pytest.raises(ValueError):
        generate_synthetic(1, (3, 3), 0, 16)
    with pytest.raises(ValueError):
        generate_synthetic(1, (3, 3), 1, 4)


def test_generate_with_blocked_cells_stays_connected():
    scene = generate_synthetic(3, (5, 5), 2, 16, n_blocked=4)
    assert len(scene.blocked) == 4
    free = [(c, r) for r in range(5) for c in range(5) if (c, r) not in scene.blocked]
    seen = {free[0]}
    stack = [free[0]]
    while stack:
        c, r = stack.pop()
        for dc, dr in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            nxt = (c + dc, r + dr)
            if nxt in seen or nxt in scene.blocked:
                continue
            if 0 <= nxt[0] < 5 and 0 <= nxt[1] < 5:
                seen.add(nxt)
                stack.append(nxt)
    assert seen == set(free)


# --- box invariants ----------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    dict(x=0.5, y=0.5, w=0.0, h=0.5),
    dict(x=0.5, y=0.5, w=0.5, h=1.5),
    dict(x=-0.1, y=0.5, w=0.5, h=0.5),
])
def test_box_invariants_rejected(kwargs):
    with pytest.raises(SceneError):
        Box(**kwargs)


def test_box_area():
    assert Box(0.5, 0.5, 0.25, 0.4).area == pytest.approx(0.1)


# --- goal states -------------------------------------------------------------

def test_goal_states_fifth_largest_threshold():
    scene = make_area_scene([0.10, 0.09, 0.08, 0.07, 0.06, 0.05, 0.04])
    goals = goal_states(scene, "target")
    assert len(goals) == 5
    assert {g.col for g in goals} == {0, 1, 2, 3, 4}


def test_goal_states_single_visible_state():
    scene = make_area_scene([0.25])
    assert goal_states(scene, "target") == frozenset({RobotState(0, 0, 0, 0)})


def test_goal_states_tie_at_fifth_kept():
    scene = make_area_scene(
        [0.10, 0.09, 0.08, 0.07, 0.06, 0.05, 0.04],
        tie_pairs=[(5, 0.06)],  # second state sharing the 5th-largest area
    )
    goals = goal_states(scene, "target")
    assert len(goals) == 6
    assert RobotState(5, 0, 1, 0) in goals


def test_goal_states_unknown_object():
    scene = make_area_scene([0.1, 0.2])
    with pytest.raises(KeyError):
        goal_states(scene, "ghost")


def test_goal_states_scale_invariant():
    areas = [0.10, 0.09, 0.08, 0.07, 0.06, 0.05, 0.04]
    base = {g.col for g in goal_states(make_area_scene(areas), "target")}
    for factor in (0.5, 2.0, 7.0):
        scaled = {g.col for g in goal_states(make_area_scene([a * factor / 10 for a in areas]), "target")}
        assert scaled == base


def test_goal_states_subset_of_boxed_states(scene_5x5):
    for obj in scene_5x5.objects:
        boxed = {s for (s, oid) in scene_5x5.truth_boxes if oid == obj.id}
        assert goal_states(scene_5x5, obj.id) <= boxed


# --- scene invariants --------------------------------------------------------

def test_scene_requires_objects():
    with pytest.raises(SceneError, match="findable|objects"):
        Scene(
            grid_width=2, grid_height=2, headings=4, tilts=1,
            blocked=frozenset(), objects=[],
            view_features={RobotState(c, r, h, 0): np.zeros(DIM)
                           for c in range(2) for r in range(2) for h in range(4)},
            truth_boxes={},
        )


def test_scene_requires_findable_objects():
    feats = {RobotState(c, r, h, 0): np.zeros(DIM)
             for c in range(2) for r in range(2) for h in range(4)}
    with pytest.raises(SceneError, match="invisible"):
        Scene(
            grid_width=2, grid_height=2, headings=4, tilts=1,
            blocked=frozenset(),
            objects=[ObjectSpec("invisible", np.zeros(DIM), (0, 0))],
            view_features=feats,
            truth_boxes={},
        )


def test_scene_rejects_missing_feature():
    feats = {RobotState(c, r, h, 0): np.zeros(DIM)
             for c in range(2) for r in range(2) for h in range(4)}
    del feats[RobotState(1, 1, 2, 0)]
    with pytest.raises(SceneError, match="missing"):
        Scene(
            grid_width=2, grid_height=2, headings=4, tilts=1,
            blocked=frozenset(),
            objects=[ObjectSpec("o", np.zeros(DIM), (0, 0))],
            view_features=feats,
            truth_boxes={(RobotState(0, 0, 0, 0), "o"): Box(0.5, 0.5, 0.2, 0.2)},
        )


# --- file round trip ---------------------------------------------------------

def test_save_load_roundtrip(scene_5x5, tmp_path):
    path = tmp_path / "scene.json"
    save_scene(scene_5x5, path)
    assert load_scene(path) == scene_5x5


def test_save_load_roundtrip_with_blocked(tmp_path):
    scene = generate_synthetic(3, (4, 4), 2, 16, n_blocked=3)
    path = tmp_path / "scene.json"
    save_scene(scene, path)
    assert load_scene(path) == scene


def test_load_scene_missing_file(tmp_path):
    with pytest.raises(SceneError, match="cannot read"):
        load_scene(tmp_path / "nope.json")


def test_load_scene_invalid_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(SceneError, match="JSON"):
        load_scene(path)


def test_load_scene_rejects_zero_width_box(scene_5x5, tmp_path):
    path = tmp_path / "scene.json"
    save_scene(scene_5x5, path)
    doc = json.loads(path.read_text())
    for entry in doc["states"]:
        if entry["boxes"]:
            oid = next(iter(entry["boxes"]))
            entry["boxes"][oid][2] = 0.0
            break
    path.write_text(json.dumps(doc))
    with pytest.raises(SceneError, match="size"):
        load_scene(path)


def test_load_scene_rejects_empty_objects(scene_5x5, tmp_path):
    path = tmp_path / "scene.json"
    save_scene(scene_5x5, path)
    doc = json.loads(path.read_text())
    doc["objects"] = []
    for entry in doc["states"]:
        entry["boxes"] = {}
    path.write_text(json.dumps(doc))
    with pytest.raises(SceneError, match="findable|objects"):
        load_scene(path)


def test_load_scene_rejects_duplicate_state(scene_5x5, tmp_path):
    path = tmp_path / "scene.json"
    save_scene(scene_5x5, path)
    doc = json.loads(path.read_text())
    doc["states"].append(doc["states"][0])
    path.write_text(json.dumps(doc))
    with pytest.raises(SceneError, match="duplicate"):
        load_scene(path)
