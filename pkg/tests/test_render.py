import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipbnb.bnb import Rectangle
from lipbnb.reach import RotatedRectangle
from lipbnb.render import clip_halfplane, convex_hull, polytope_vertices, project_rectangle, render_svg


def polygons(svg):
    return re.findall(r"<polygon points=\"([^\"]*)\"", svg)


def rot(theta):
    return np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])


def test_rectangles_only_plot():
    sets = [RotatedRectangle(rot(0.3), Rectangle([0.0, 0.0], [1.0, 2.0]))]
    svg = render_svg(sets, trajectories=np.empty((0, 3, 2)))
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert len(polygons(svg)) == 1
    assert "<circle" not in svg
    assert "over-approximation" in svg and "samples" not in svg


def test_partition_snapshot_one_polygon_each():
    boxes = Rectangle([0.0, 0.0], [1.0, 1.0]).split(2)
    boxes = boxes[0].split(2) + [boxes[1]]
    svg = render_svg(partitions=boxes)
    assert len(polygons(svg)) == 3


def test_identical_inputs_identical_bytes():
    rng = np.random.default_rng(0)
    sets = [RotatedRectangle(rot(t), Rectangle([t, 0.0], [t + 1.0, 0.5])) for t in (0.0, 0.4, 0.8)]
    traj = rng.normal(size=(10, 3, 2))
    a = render_svg(sets, traj, title="run", labels=["p", "v"])
    b = render_svg(sets, traj.copy(), title="run", labels=["p", "v"])
    assert a == b
    assert a.count("<circle") == 30


def test_projection_of_higher_dimensional_sets():
    r = RotatedRectangle.axis_aligned([0.0, 1.0, 2.0], [1.0, 3.0, 5.0])
    np.testing.assert_array_equal(convex_hull(project_rectangle(r, (0, 2))),
                                  [[0.0, 2.0], [1.0, 2.0], [1.0, 5.0], [0.0, 5.0]])
    svg = render_svg([r], axes=(2, 1))
    assert len(polygons(svg)) == 1


def test_invalid_axes_rejected():
    with pytest.raises(ValueError):
        render_svg(axes=(1, 1))
    with pytest.raises(ValueError):
        render_svg(axes=(0,))


def test_hull_of_square_with_interior_points():
    pts = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0.5, 0.5], [0.2, 0.7], [1, 0.5]], dtype=float)
    np.testing.assert_array_equal(convex_hull(pts), [[0, 0], [1, 0], [1, 1], [0, 1]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 60))
def test_hull_contains_all_points(seed, n):
    pts = np.random.default_rng(seed).normal(size=(n, 2))
    hull = convex_hull(pts)
    edges = np.roll(hull, -1, axis=0) - hull
    for p in pts:
        cross = edges[:, 0] * (p[1] - hull[:, 1]) - edges[:, 1] * (p[0] - hull[:, 0])
        assert np.all(cross >= -1e-9)


def test_polytope_vertices_square():
    dirs = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    v = polytope_vertices(dirs, [1.0, 2.0, 1.0, 2.0])
    # clipping starts from a 1e6 square, so vertices carry ~1e-10 roundoff
    np.testing.assert_allclose(sorted(map(tuple, v)), [(-1, -2), (-1, 2), (1, -2), (1, 2)], atol=1e-8)


def test_clip_halfplane_triangle():
    square = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    tri = clip_halfplane(square, np.array([1.0, 1.0]), 1.0)
    assert sorted(map(tuple, tri)) == [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0)]
