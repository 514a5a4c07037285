import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference
from segfield.errors import DegeneratePlaneError, InvalidInputError
from segfield.planes import (
    Plane,
    PlaneSet,
    fit_plane,
    fit_planes,
    plane_loss,
    point_plane_distance,
    project_onto_planes,
    same_class_neighbors,
    split_project,
)


def _plane(normal, anchor):
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    a = np.asarray(anchor, dtype=float)
    return Plane(n, float(-n @ a), a)


def _random_plane(rng):
    return _plane(rng.normal(size=3), rng.normal(size=3))


def test_neighbors_on_a_line():
    pos = np.array([[i, 0.0, 0.0] for i in range(5)])
    assert sorted(same_class_neighbors(pos, np.ones(5, dtype=int), 2, 2)) == [1, 3]


def test_neighbors_singleton_class():
    pos = np.random.default_rng(0).normal(size=(4, 3))
    assert same_class_neighbors(pos, np.array([1, 2, 2, 2]), 0, 3) == []


def test_neighbors_match_sorted_distance_oracle():
    rng = np.random.default_rng(1)
    pos = rng.normal(size=(200, 3))
    lab = rng.integers(1, 4, 200)
    for q in range(0, 200, 17):
        got = same_class_neighbors(pos, lab, q, 10)
        same = [i for i in range(200) if lab[i] == lab[q] and i != q]
        d = [np.linalg.norm(pos[i] - pos[q]) for i in same]
        want = [same[i] for i in np.argsort(d, kind="stable")[:10]]
        assert got == want


def test_fit_plane_three_points():
    p = fit_plane([(0, 0, 2), (1, 0, 2), (0, 1, 2)])
    assert np.allclose(p.normal, [0, 0, 1], atol=1e-12)
    assert p.offset == pytest.approx(-2.0, abs=1e-12)


def test_fit_plane_exact_tilted():
    rng = np.random.default_rng(2)
    xy = rng.normal(size=(10, 2))
    pts = np.column_stack([xy, 1 - xy.sum(axis=1)])
    p = fit_plane(pts)
    assert np.allclose(p.normal, np.ones(3) / np.sqrt(3), atol=1e-9)
    assert max(point_plane_distance(x, p) for x in pts) < 1e-12


def test_fit_plane_noisy_matches_svd():
    rng = np.random.default_rng(3)
    pts = np.column_stack([rng.uniform(-1, 1, (50, 2)), rng.normal(0, 0.01, 50)])
    p = fit_plane(pts)
    res = np.sqrt(np.mean([point_plane_distance(x, p) ** 2 for x in pts]))
    assert res <= 0.02
    _, _, vt = np.linalg.svd(pts - pts.mean(axis=0))
    ref = vt[-1] * np.sign(vt[-1][np.argmax(np.abs(vt[-1]) > 1e-12)])
    assert np.allclose(p.normal, ref, atol=1e-7)


def test_fit_plane_invariants():
    rng = np.random.default_rng(4)
    p = fit_plane(rng.normal(size=(12, 3)))
    assert abs(np.linalg.norm(p.normal) - 1) < 1e-9
    assert abs(p.normal @ p.anchor + p.offset) < 1e-9
    assert p.normal[np.argmax(np.abs(p.normal) > 1e-12)] > 0


@pytest.mark.parametrize(
    "pts",
    [[(0, 0, 0), (1, 1, 1), (2, 2, 2), (3, 3, 3)], [(1, 2, 3)] * 4, [(0, 0, 0), (1, 0, 0)]],
)
def test_fit_plane_degenerate(pts):
    with pytest.raises(DegeneratePlaneError):
        fit_plane(pts)


def test_fit_plane_locally_optimal():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(30, 3)) * [1, 0.7, 0.2]
    p = fit_plane(pts)
    best = np.sum([point_plane_distance(x, p) ** 2 for x in pts])
    c = pts.mean(axis=0)
    for n in rng.normal(size=(1000, 3)):
        cand = _plane(n, c)
        assert best <= np.sum([(cand.normal @ (x - c)) ** 2 for x in pts]) + 1e-12


def test_fit_planes_small_classes_skipped():
    rng = np.random.default_rng(6)
    pos = rng.normal(size=(20, 3))
    lab = np.array([1] * 15 + [2] * 3 + [0] * 2)
    ps = fit_planes(pos, lab, k=10)
    assert ps.has_plane[:15].all()
    assert not ps.has_plane[15:].any()


def test_fit_planes_uses_same_class_neighbors():
    rng = np.random.default_rng(7)
    pos = rng.normal(size=(60, 3))
    lab = rng.integers(1, 3, 60)
    ps = fit_planes(pos, lab, k=5, fitted_at=1000)
    assert ps.fitted_at == 1000
    for i in range(0, 60, 7):
        ref = fit_plane(pos[same_class_neighbors(pos, lab, i, 5)])
        got = ps.plane(i)
        assert np.allclose(got.normal, ref.normal, atol=1e-10)
        assert np.allclose(got.anchor, ref.anchor, atol=1e-12)


def test_point_plane_distance_examples():
    z0 = _plane([0, 0, 1], [0, 0, 0])
    assert point_plane_distance([5, -2, 0], z0) == 0
    assert point_plane_distance([0, 0, 3], z0) == 3
    rng = np.random.default_rng(8)
    for _ in range(20):
        p, x = _random_plane(rng), rng.normal(size=3)
        a, b, c = p.normal
        assert point_plane_distance(x, p) == pytest.approx(abs(a * x[0] + b * x[1] + c * x[2] + p.offset), abs=1e-12)


def test_plane_loss_examples():
    z0 = _plane([0, 0, 1], [0, 0, 0])
    ps = PlaneSet.from_planes([z0] * 4)
    loss, grad = plane_loss(np.array([[1, 2, 0.0], [0, 0, 0], [3, 3, 0], [4, 0, 0]]), ps)
    assert loss == 0 and not grad.any()
    loss, grad = plane_loss(np.array([[1, 2, 2.0], [0, 0, 0], [3, 3, 0], [4, 0, 0]]), ps)
    assert loss == 0.5
    assert np.allclose(grad[0], [0, 0, 0.25]) and not grad[1:].any()


def test_plane_loss_counts_planeless_splats():
    z0 = _plane([0, 0, 1], [0, 0, 0])
    ps = PlaneSet.from_planes([z0, None])
    loss, grad = plane_loss(np.array([[0, 0, 1.0], [0, 0, 5.0]]), ps)
    assert loss == 0.5 and not grad[1].any()


def test_plane_loss_length_mismatch():
    with pytest.raises(InvalidInputError):
        plane_loss(np.zeros((3, 3)), PlaneSet.empty(2))


def test_plane_loss_gradient_finite_differences():
    rng = np.random.default_rng(9)
    for _ in range(10):
        n = 8
        ps = PlaneSet.from_planes([_random_plane(rng) if i % 4 else None for i in range(n)])
        x = rng.normal(size=(n, 3))
        _, grad = plane_loss(x, ps)
        fd = central_difference(lambda v: plane_loss(v.reshape(n, 3), ps)[0], x.reshape(-1)).reshape(n, 3)
        assert np.allclose(grad, fd, rtol=1e-5, atol=1e-9)


def test_plane_loss_rigid_invariance():
    rng = np.random.default_rng(10)
    planes = [_random_plane(rng) for _ in range(10)]
    x = rng.normal(size=(10, 3))
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    t = rng.normal(size=3)
    moved = [_plane(q @ p.normal, q @ p.anchor + t) for p in planes]
    a, _ = plane_loss(x, PlaneSet.from_planes(planes))
    b, _ = plane_loss(x @ q.T + t, PlaneSet.from_planes(moved))
    assert abs(a - b) <= 1e-9


def test_split_project_examples():
    z0 = _plane([0, 0, 1], [0, 0, 0])
    assert np.array_equal(split_project([1, 1, 5], z0), [1, 1, 0])
    assert np.array_equal(split_project([3, -1, 0], z0), [3, -1, 0])


def test_split_project_is_closest_plane_point():
    rng = np.random.default_rng(11)
    for _ in range(5):
        p, x = _random_plane(rng), rng.normal(size=3)
        y = split_project(x, p)
        # dense sample of the plane patch around the projection
        u = np.cross(p.normal, [1, 0, 0] if abs(p.normal[0]) < 0.9 else [0, 1, 0])
        u /= np.linalg.norm(u)
        v = np.cross(p.normal, u)
        s = np.linspace(-0.5, 0.5, 41)
        patch = y + s[:, None, None] * u + s[None, :, None] * v
        d = np.linalg.norm(patch - x, axis=-1)
        assert np.linalg.norm(y - x) <= d.min() + 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_split_project_exact_and_idempotent(seed):
    rng = np.random.default_rng(seed)
    p = _random_plane(rng)
    x = rng.normal(size=3) * 10
    y = split_project(x, p)
    assert point_plane_distance(y, p) <= 1e-9
    assert np.max(np.abs(split_project(y, p) - y)) <= 1e-12


def test_project_onto_planes_matches_scalar():
    rng = np.random.default_rng(12)
    planes = [_random_plane(rng) if i != 2 else None for i in range(5)]
    ps = PlaneSet.from_planes(planes)
    idx = np.array([0, 0, 1, 2, 3, 4])
    x = rng.normal(size=(6, 3))
    out = project_onto_planes(x, ps, idx)
    for i, j in enumerate(idx):
        want = x[i] if planes[j] is None else split_project(x[i], planes[j])
        assert np.allclose(out[i], want, atol=1e-14)
