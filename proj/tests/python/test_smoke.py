import math

import numpy as np
import pytest

import escape


def test_bce_closed_forms():
    assert escape.bce(0.5, 1.0) == pytest.approx(0.693147, abs=1e-5)
    assert escape.bce(1.0 - 1e-7, 1.0) == pytest.approx(0.0, abs=1e-5)


def test_bilinear_sampling_gate_and_midpoint():
    grid = np.array([[[0.0], [1.0]], [[2.0], [3.0]]])
    mid = escape.bilinear_sample(grid, np.array([[0.5, 0.5]]))
    assert mid[0, 0] == pytest.approx(1.5)
    oob = escape.bilinear_sample(grid, np.array([[-5.0, -5.0]]))
    assert oob[0, 0] == 0.0


def test_projection_center_and_behind():
    p = escape.camera_projection_from_pose(0.0, 0.0, 0, 0, 60.0, 300, 300, 1.5)
    assert p.shape == (3, 4)
    uvd = escape.project_point(p, 1.0, 0.0, 1.5)
    assert uvd is not None
    u, v, depth = uvd
    assert u == pytest.approx(149.5)
    assert v == pytest.approx(149.5)
    assert depth == pytest.approx(1.0)
    assert escape.project_point(p, -1.0, 0.0, 1.5) is None


def test_pillar_points_bin_centers():
    pts = escape.pillar_reference_points(0, 0, 4, 0.0, 1.8, 0.25)
    assert pts.shape == (4, 3)
    assert list(pts[:, 2]) == pytest.approx([0.225, 0.675, 1.125, 1.575])
    assert pts[0, 0] == pytest.approx(0.125)


def test_bfs_manhattan_and_unreachable():
    free = np.ones((5, 5), dtype=np.uint8)
    path = escape.bfs_path(free, (0, 0), [(4, 4)])
    assert path is not None and len(path) == 8
    walled = np.ones((5, 5), dtype=np.uint8)
    walled[:, 2] = 0
    assert escape.bfs_path(walled, (0, 0), [(0, 4)]) is None


def test_subgoal_templates():
    assert escape.expand_subgoals("pick_place", "apple", "table") == [
        ("PickUp", "apple"),
        ("Put", "table"),
    ]
    heat = escape.expand_subgoals("heat_place", "egg", "table")
    assert heat == [("PickUp", "egg"), ("Heat", "microwave"), ("Put", "table")]
    two = escape.expand_subgoals("place_two", "apple", "bin")
    assert len(two) == 5 and two[1] == ("GotoLocation", "apple")


def test_metrics_identities():
    episodes = [
        dict(success=True, gc_met=1, gc_total=1, expert_length=10, agent_length=10),
        dict(success=True, gc_met=2, gc_total=2, expert_length=10, agent_length=20),
        dict(success=False, gc_met=1, gc_total=2, expert_length=15, agent_length=30),
    ]
    m = escape.compute_metrics(episodes)
    assert m["SR"] == pytest.approx(2 / 3)
    assert m["PLWSR"] == pytest.approx(0.5)
    assert m["EF"] == pytest.approx(m["PLWSR"] / m["SR"])
    assert m["PLWSR"] <= m["SR"]
    # the published EF arithmetic
    assert round(44.24 / 62.32, 3) == 0.710


def test_room_and_render():
    room = escape.gen_room(7)
    assert room["grid"] == (20, 20)
    assert room["walls"].shape == (20, 20)
    img = escape.render_semantic(7, 1.125, 1.125, 0)
    assert img.shape == (64, 64)
    cats = set(int(v) for v in np.unique(img))
    assert 0 in cats or 1 in cats  # floor or wall visible


def test_gradient_verifier_smoke():
    report = escape.verify_gradients(seed=11, seeds=1, tol=1e-4)
    assert report["pass"]
    assert set(report["components"]) == {
        "bce_head",
        "deform_attn",
        "ome_block",
        "mru_block",
        "map_head",
        "grounding",
        "monitor",
    }


def test_miou():
    pred = np.array([1, 0, 1, 0], dtype=np.uint8)
    gt = np.array([1, 0, 0, 0], dtype=np.uint8)
    per_cat, mean = escape.miou(pred, gt, 1)
    assert mean == pytest.approx(0.5)
