import itertools

import numpy as np
import pytest
from scipy.spatial import Delaunay

from segfield.errors import GenerationError, InvalidInputError
from segfield.planes import fit_plane, point_plane_distance
from segfield.render import Camera, project_points
from segfield.synth import (
    SceneObject,
    SceneSpec,
    arc_trajectory,
    cast,
    default_scene_spec,
    generate,
    random_scene_spec,
    read_bundle,
    reappearance_spec,
    surface_distance,
    write_bundle,
)


def _box_spec(cam, noise=0.0):
    return SceneSpec([SceneObject(1, (0.1, -0.05, 0.0), (0.6, 0.4, 0.5))], [cam], noise_sigma=noise)


@pytest.mark.parametrize("eye", [(0, 0, 3.0), (2.0, 1.5, 1.0), (-1.5, 2.0, -1.0)])
def test_box_silhouette_matches_convex_hull(eye):
    cam = Camera.look_at(eye, (0, 0, 0), (0, 1, 0) if eye[0] == 0 and eye[1] == 0 else (0, 0, 1), 60, 60, 31.5, 31.5, 64, 64)
    spec = _box_spec(cam)
    _, ids, _ = cast(spec, cam)
    obj = spec.objects[0]
    corners = np.array(list(itertools.product(*zip(obj.lo, obj.hi))))
    hull = Delaunay(project_points(corners, np.zeros(8), cam).uv)
    jj, ii = np.meshgrid(np.arange(64), np.arange(64))
    inside = hull.find_simplex(np.column_stack([jj.ravel(), ii.ravel()])) >= 0
    assert (ids.ravel() == 1).sum() > 100
    assert np.array_equal(ids.ravel() == 1, inside)


def test_generation_deterministic():
    spec = default_scene_spec(4, 32)
    spec.noise_sigma = 0.01
    a, b = generate(spec, 5), generate(spec, 5)
    for fa, fb in zip(a.frames, b.frames):
        assert np.array_equal(fa.rgb, fb.rgb)
        assert np.array_equal(fa.pointmap.points, fb.pointmap.points)
        assert np.array_equal(fa.masks.ids, fb.masks.ids)
    assert np.array_equal(a.gt_cloud.positions, b.gt_cloud.positions)
    c = generate(spec, 6)
    assert not np.array_equal(a.frames[0].pointmap.points, c.frames[0].pointmap.points)


def test_noiseless_pointmap_lies_on_surfaces():
    spec = default_scene_spec(3, 48)
    b = generate(spec, 0)
    for fr in b.frames:
        pts = fr.pointmap.points[fr.pointmap.valid]
        assert np.max(surface_distance(spec, pts)) <= 1e-9
        floor = pts[fr.gt_masks.ids[fr.pointmap.valid] == 1]
        p = fit_plane(floor)
        assert max(point_plane_distance(x, p) for x in floor[::25]) == 0.0


def test_corrupted_masks_share_gt_partition():
    b = generate(random_scene_spec(2, n_frames=5, width=48), 1)
    for fr in b.frames:
        pairs = set(zip(fr.gt_masks.ids.ravel().tolist(), fr.masks.ids.ravel().tolist()))
        gt_ids = [g for g, _ in pairs]
        ids = [m for _, m in pairs]
        assert len(set(gt_ids)) == len(gt_ids) and len(set(ids)) == len(ids)
        assert (0, 0) in pairs or not (fr.gt_masks.ids == 0).any()


def test_reappearance_hides_exactly_interval():
    base = default_scene_spec(10, 48)
    spec = reappearance_spec(base, 2, (3, 6))
    b = generate(spec, 0)
    for t, fr in enumerate(b.frames):
        visible = (fr.gt_masks.ids == 2).any()
        erased = visible and not np.any(fr.masks.ids[fr.gt_masks.ids == 2])
        assert erased == (3 <= t <= 6 and visible)
    assert not base.occlusions
    assert reappearance_spec(base, 2, (5, 4)).occlusions == {}
    assert reappearance_spec(base, 2, None).occlusions == {}
    with pytest.raises(InvalidInputError):
        reappearance_spec(base, 2, (8, 12))
    with pytest.raises(InvalidInputError):
        reappearance_spec(base, 9, (1, 2))


def test_gt_cloud_labels_on_their_surfaces():
    spec = default_scene_spec(2, 16)
    cloud = generate(spec, 0).gt_cloud
    for obj in spec.objects:
        pts = cloud.positions[cloud.labels == obj.object_id]
        assert len(pts) > 0
        alone = SceneSpec([obj], spec.trajectory)
        assert np.max(surface_distance(alone, pts)) <= 1e-12


def test_camera_inside_object_rejected():
    cam = Camera.look_at((0.1, 0, 0), (1, 0, 0), (0, 0, 1), 20, 20, 7.5, 7.5, 16, 16)
    with pytest.raises(GenerationError):
        generate(SceneSpec([SceneObject(1, (0, 0, 0), (1, 1, 1))], [cam]))


def test_invalid_specs_rejected():
    cams = arc_trajectory(2, width=16)
    with pytest.raises(InvalidInputError):
        SceneSpec([SceneObject(1, (0, 0, 0), (1, 1, 1)), SceneObject(1, (2, 0, 0), (1, 1, 1))], cams)
    with pytest.raises(InvalidInputError):
        SceneSpec([SceneObject(1, (0, 0, 0), (1, 0, 0))], cams)
    with pytest.raises(InvalidInputError):
        SceneSpec([], cams, noise_sigma=-1)


def test_bundle_round_trip(tmp_path):
    spec = reappearance_spec(default_scene_spec(3, 24), 3, (1, 1))
    spec.noise_sigma = 0.01
    a = generate(spec, 9)
    write_bundle(a, tmp_path)
    b = read_bundle(tmp_path)
    assert b.seed == 9 and b.spec.occlusions == {3: [(1, 1)]}
    for fa, fb in zip(a.frames, b.frames):
        assert np.array_equal(fa.masks.ids, fb.masks.ids)
        assert np.array_equal(fa.gt_masks.ids, fb.gt_masks.ids)
        assert np.array_equal(fa.pointmap.valid, fb.pointmap.valid)
        assert np.allclose(fa.pointmap.points, fb.pointmap.points, atol=1e-6)
        assert np.max(np.abs(fa.rgb - fb.rgb)) <= 0.5 / 255 + 1e-12
        assert np.allclose(fa.camera.rotation, fb.camera.rotation)
    assert np.allclose(a.gt_cloud.positions, b.gt_cloud.positions, atol=1e-6)
