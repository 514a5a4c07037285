"""Procedural scenes of axis-aligned boxes and planar panels with exact ground truth.

A scene is ray-cast from every camera of its trajectory to produce an RGB
image, an ideal pointmap (optionally noisy, with dropout), ground-truth
instance masks, and "corrupted" masks whose IDs are shuffled independently
per frame, mimicking a per-image segmenter. Objects can be marked occluded
over frame intervals; their masks are then erased from the corrupted set.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from segfield import fileio
from segfield.data import LabeledMaskSet, Pointmap, SegmentedPointCloud
from segfield.errors import GenerationError, InvalidInputError
from segfield.render import Camera

_LIGHT = np.array([0.35, 0.55, 0.76])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)


@dataclass
class SceneObject:
    """Axis-aligned box, or a panel when exactly one extent is zero.

    Attributes:
        object_id: Nonzero instance ID.
        center: Box center.
        size: Full extents along x, y, z.
        color: Base RGB in [0, 1].
    """

    object_id: int
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    color: tuple[float, float, float] = (0.7, 0.7, 0.7)

    @property
    def is_panel(self) -> bool:
        return sum(s == 0 for s in self.size) == 1

    @property
    def half(self) -> np.ndarray:
        return 0.5 * np.asarray(self.size, dtype=np.float64)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64) - self.half

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64) + self.half

    def contains(self, p: np.ndarray) -> bool:
        """Strict interior test (always False for panels)."""
        return bool(np.all(p > self.lo) and np.all(p < self.hi))

    def faces(self) -> list[tuple[int, float, np.ndarray, np.ndarray]]:
        """(normal axis, coordinate, rect lo, rect hi) for every face."""
        out = []
        for axis in range(3):
            if self.size[axis] == 0:
                out.append((axis, float(self.center[axis]), self.lo, self.hi))
            elif not self.is_panel:
                out.append((axis, float(self.lo[axis]), self.lo, self.hi))
                out.append((axis, float(self.hi[axis]), self.lo, self.hi))
        return out

    def area(self) -> float:
        s = self.size
        if self.is_panel:
            return float(np.prod([v for v in s if v > 0]))
        return 2.0 * float(s[0] * s[1] + s[1] * s[2] + s[0] * s[2])


@dataclass
class SceneSpec:
    """Everything needed to generate a scene deterministically.

    ``occlusions`` maps an object ID to inclusive (first, last) frame
    intervals during which its mask is removed from the corrupted masks.
    """

    objects: list[SceneObject]
    trajectory: list[Camera]
    extent: float = 2.0
    noise_sigma: float = 0.0
    dropout: float = 0.0
    occlusions: dict[int, list[tuple[int, int]]] = field(default_factory=dict)
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gt_points: int = 20000

    def __post_init__(self) -> None:
        ids = [o.object_id for o in self.objects]
        if any(i <= 0 for i in ids) or len(set(ids)) != len(ids):
            raise InvalidInputError("object IDs must be distinct and positive")
        if not self.trajectory:
            raise InvalidInputError("trajectory must contain at least one camera")
        if self.noise_sigma < 0 or not (0 <= self.dropout < 1):
            raise InvalidInputError("noise sigma must be >= 0 and dropout in [0, 1)")
        for o in self.objects:
            if any(s < 0 for s in o.size) or sum(s == 0 for s in o.size) > 1:
                raise InvalidInputError(f"object {o.object_id} has invalid size {o.size}")

    def object(self, object_id: int) -> SceneObject:
        for o in self.objects:
            if o.object_id == object_id:
                return o
        raise InvalidInputError(f"unknown object id {object_id}")

    def occluded(self, object_id: int, frame: int) -> bool:
        return any(a <= frame <= b for a, b in self.occlusions.get(object_id, []))

    def to_dict(self) -> dict:
        return {
            "objects": [asdict(o) for o in self.objects],
            "trajectory": [c.to_dict() for c in self.trajectory],
            "extent": self.extent,
            "noise_sigma": self.noise_sigma,
            "dropout": self.dropout,
            "occlusions": {str(k): [list(v) for v in vs] for k, vs in self.occlusions.items()},
            "background": list(self.background),
            "gt_points": self.gt_points,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        """Build from a dict; ``trajectory`` may be a camera list or ``{"arc": {...}}``."""
        objects = [
            SceneObject(int(o["object_id"]), tuple(o["center"]), tuple(o["size"]), tuple(o.get("color", (0.7,) * 3)))
            for o in d["objects"]
        ]
        traj = d["trajectory"]
        cams = arc_trajectory(**traj["arc"]) if isinstance(traj, dict) else [Camera.from_dict(c) for c in traj]
        return cls(
            objects=objects,
            trajectory=cams,
            extent=float(d.get("extent", 2.0)),
            noise_sigma=float(d.get("noise_sigma", 0.0)),
            dropout=float(d.get("dropout", 0.0)),
            occlusions={int(k): [tuple(v) for v in vs] for k, vs in d.get("occlusions", {}).items()},
            background=tuple(d.get("background", (0.0, 0.0, 0.0))),
            gt_points=int(d.get("gt_points", 20000)),
        )


@dataclass
class FrameData:
    rgb: np.ndarray
    pointmap: Pointmap
    gt_masks: LabeledMaskSet
    masks: LabeledMaskSet
    camera: Camera


@dataclass
class SceneBundle:
    frames: list[FrameData]
    gt_cloud: SegmentedPointCloud
    spec: SceneSpec
    seed: int


def arc_trajectory(
    n: int = 20,
    radius: float = 3.0,
    height: float = 1.6,
    start_deg: float = -60.0,
    end_deg: float = 60.0,
    target=(0.0, 0.0, 0.2),
    width: int = 128,
    height_px: int | None = None,
    fov_deg: float = 60.0,
) -> list[Camera]:
    """Cameras on a horizontal arc around ``target``, all looking at it (z up)."""
    h_px = width if height_px is None else height_px
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for ang in np.radians(np.linspace(start_deg, end_deg, n)):
        eye = target + np.array([radius * np.cos(ang), radius * np.sin(ang), height - target[2]])
        cams.append(Camera.look_at(eye, target, (0, 0, 1), f, f, (width - 1) / 2, (h_px - 1) / 2, width, h_px))
    return cams


def default_scene_spec(n_frames: int = 20, width: int = 128) -> SceneSpec:
    objects = [
        SceneObject(1, (0.0, 0.0, 0.0), (4.0, 4.0, 0.0), (0.55, 0.5, 0.45)),
        SceneObject(2, (0.3, -0.6, 0.25), (0.5, 0.5, 0.5), (0.85, 0.2, 0.2)),
        SceneObject(3, (-0.4, 0.5, 0.2), (0.6, 0.4, 0.4), (0.2, 0.7, 0.25)),
        SceneObject(4, (0.6, 0.6, 0.15), (0.3, 0.3, 0.3), (0.2, 0.3, 0.85)),
    ]
    return SceneSpec(objects, arc_trajectory(n_frames, width=width))


def random_scene_spec(
    seed: int,
    n_boxes: int = 3,
    n_frames: int = 20,
    width: int = 128,
    noise_sigma: float = 0.0,
) -> SceneSpec:
    """A floor panel plus ``n_boxes`` non-overlapping random boxes."""
    rng = np.random.default_rng([0x5CE, seed])
    objects = [SceneObject(1, (0.0, 0.0, 0.0), (4.0, 4.0, 0.0), (0.55, 0.5, 0.45))]
    placed: list[tuple[np.ndarray, np.ndarray]] = []
    tries = 0
    while len(objects) < n_boxes + 1:
        tries += 1
        if tries > 10000:
            raise GenerationError("could not place non-overlapping boxes")
        size = rng.uniform(0.3, 0.6, 3)
        xy = rng.uniform(-0.8, 0.8, 2)
        lo, hi = xy - size[:2] / 2 - 0.1, xy + size[:2] / 2 + 0.1
        if any(np.all(lo < h) and np.all(l < hi) for l, h in placed):
            continue
        placed.append((lo, hi))
        color = tuple(float(c) for c in rng.uniform(0.15, 0.95, 3))
        objects.append(SceneObject(len(objects) + 1, (float(xy[0]), float(xy[1]), float(size[2] / 2)), tuple(float(s) for s in size), color))
    return SceneSpec(objects, arc_trajectory(n_frames, width=width), noise_sigma=noise_sigma)


def reappearance_spec(base: SceneSpec, object_id: int, hide_frames: tuple[int, int] | None) -> SceneSpec:
    """Copy of ``base`` with ``object_id`` removed from corrupted masks over the inclusive interval."""
    base.object(object_id)
    spec = copy.deepcopy(base)
    if hide_frames is None or hide_frames[0] > hide_frames[1]:
        return spec
    first, last = hide_frames
    if first < 0 or last >= len(spec.trajectory):
        raise InvalidInputError("hide interval lies outside the trajectory")
    spec.occlusions.setdefault(object_id, []).append((int(first), int(last)))
    return spec


def _intersect(obj: SceneObject, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest positive ray parameter and hit face axis per ray (inf where missed)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        if obj.is_panel:
            axis = [i for i in range(3) if obj.size[i] == 0][0]
            t = (obj.center[axis] - origin[:, axis]) / dirs[:, axis]
            hit = origin + t[:, None] * dirs
            others = [i for i in range(3) if i != axis]
            inside = np.all((hit[:, others] >= obj.lo[others]) & (hit[:, others] <= obj.hi[others]), axis=1)
            ok = np.isfinite(t) & (t > 1e-9) & inside
            return np.where(ok, t, np.inf), np.full(len(t), axis)
        inv = 1.0 / dirs
        t1 = (obj.lo - origin) * inv
        t2 = (obj.hi - origin) * inv
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        # rays parallel to a slab: inside -> unconstrained, outside -> miss
        par = dirs == 0
        inside_slab = (origin >= obj.lo) & (origin <= obj.hi)
        tmin = np.where(par, np.where(inside_slab, -np.inf, np.inf), tmin)
        tmax = np.where(par, np.where(inside_slab, np.inf, -np.inf), tmax)
        near = tmin.max(axis=1)
        far = tmax.min(axis=1)
        axis = np.argmax(tmin, axis=1)
        ok = (near <= far) & (near > 1e-9)
        return np.where(ok, near, np.inf), axis


def cast(spec: SceneSpec, camera: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ray-cast one camera: exact hit points (H, W, 3), object IDs (0 = miss), face axes."""
    origin, dirs = camera.pixel_rays()
    o = origin.reshape(-1, 3)
    d = dirs.reshape(-1, 3)
    best_t = np.full(len(d), np.inf)
    best_id = np.zeros(len(d), dtype=np.int64)
    best_axis = np.zeros(len(d), dtype=np.int64)
    best_obj = np.full(len(d), -1)
    for k, obj in enumerate(spec.objects):
        t, axis = _intersect(obj, o, d)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_id[closer] = obj.object_id
        best_axis[closer] = axis[closer]
        best_obj[closer] = k
    hit = np.where(np.isfinite(best_t)[:, None], o + np.where(np.isfinite(best_t), best_t, 0.0)[:, None] * d, 0.0)
    # snap onto the exact face coordinate
    for k, obj in enumerate(spec.objects):
        sel = best_obj == k
        if not sel.any():
            continue
        ax = best_axis[sel]
        cur = hit[sel, ax]
        if obj.is_panel:
            snapped = np.full(len(cur), float(obj.center[ax[0]]))
        else:
            lo, hi = obj.lo[ax], obj.hi[ax]
            snapped = np.where(np.abs(cur - lo) <= np.abs(cur - hi), lo, hi)
        rows = np.flatnonzero(sel)
        hit[rows, ax] = snapped
    h, w = camera.height, camera.width
    return hit.reshape(h, w, 3), best_id.reshape(h, w), best_axis.reshape(h, w)


def _shade(spec: SceneSpec, ids: np.ndarray, axes: np.ndarray) -> np.ndarray:
    rgb = np.tile(np.asarray(spec.background, dtype=np.float64), ids.shape + (1,))
    lambert = 0.45 + 0.55 * np.abs(_LIGHT[axes])
    for obj in spec.objects:
        sel = ids == obj.object_id
        rgb[sel] = np.clip(np.asarray(obj.color)[None, :] * lambert[sel][:, None], 0.0, 1.0)
    return rgb


def _corrupt(spec: SceneSpec, gt: np.ndarray, frame: int, rng: np.random.Generator) -> np.ndarray:
    present = [int(v) for v in np.unique(gt) if v != 0 and not spec.occluded(int(v), frame)]
    perm = rng.permutation(len(present)) + 1
    out = np.zeros_like(gt)
    for obj_id, new_id in zip(present, perm):
        out[gt == obj_id] = new_id
    return out


def generate_frame(spec: SceneSpec, seed: int, frame: int) -> FrameData:
    cam = spec.trajectory[frame]
    center = cam.center
    for obj in spec.objects:
        if obj.contains(center):
            raise GenerationError(f"frame {frame}: camera is inside object {obj.object_id}")
    rng = np.random.default_rng([seed, frame])
    hit, ids, axes = cast(spec, cam)
    valid = ids != 0
    pts = hit.copy()
    if spec.noise_sigma > 0:
        pts = pts + rng.normal(0.0, spec.noise_sigma, pts.shape)
    if spec.dropout > 0:
        valid &= rng.random(valid.shape) >= spec.dropout
    pts[~valid] = 0.0
    rgb = _shade(spec, ids, axes)
    masks = _corrupt(spec, ids, frame, rng)
    return FrameData(rgb, Pointmap(pts, valid), LabeledMaskSet(ids), LabeledMaskSet(masks), cam)


def sample_surfaces(spec: SceneSpec, n_points: int, seed: int) -> SegmentedPointCloud:
    """Area-uniform samples on every object surface, labeled with the object ID."""
    areas = np.array([o.area() for o in spec.objects])
    counts = np.floor(n_points * areas / areas.sum()).astype(int)
    pos, labs = [], []
    for obj, cnt in zip(spec.objects, counts):
        rng = np.random.default_rng([seed, 0x6C, obj.object_id])
        faces = obj.faces()
        f_area = np.array([np.prod([obj.size[i] for i in range(3) if i != ax]) for ax, *_ in faces])
        which = rng.choice(len(faces), size=cnt, p=f_area / f_area.sum())
        u = rng.random((cnt, 3))
        p = obj.lo + u * (obj.hi - obj.lo)
        for k, (ax, coord, _, _) in enumerate(faces):
            p[which == k, ax] = coord
        pos.append(p)
        labs.append(np.full(cnt, obj.object_id))
    return SegmentedPointCloud(np.concatenate(pos), np.concatenate(labs), np.zeros(int(counts.sum()), dtype=np.int64))


def surface_distance(spec: SceneSpec, points) -> np.ndarray:
    """Exact distance from each point to the nearest object surface."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    best = np.full(len(p), np.inf)
    for obj in spec.objects:
        c = np.asarray(obj.center)
        q = np.abs(p - c) - obj.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        if obj.is_panel:
            d = outside
        else:
            inside = np.all(q < 0, axis=1)
            d = np.where(inside, -q.max(axis=1), outside)
        best = np.minimum(best, d)
    return best


def generate(spec: SceneSpec, seed: int = 0) -> SceneBundle:
    """Ray-cast every frame and sample the ground-truth cloud; deterministic in (spec, seed)."""
    frames = [generate_frame(spec, seed, t) for t in range(len(spec.trajectory))]
    return SceneBundle(frames, sample_surfaces(spec, spec.gt_points, seed), spec, seed)


# -- persistence ---------------------------------------------------------------


def write_bundle(bundle: SceneBundle, out_dir) -> Path:
    """Write every frame artifact, the ground-truth cloud and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = []
    for t, fr in enumerate(bundle.frames):
        names = {
            "rgb": f"rgb_{t:03d}.ppm",
            "pointmap": f"pointmap_{t:03d}.pmap",
            "gt_mask": f"gt_mask_{t:03d}.pgm",
            "mask": f"mask_{t:03d}.pgm",
        }
        fileio.write_image(out / names["rgb"], fr.rgb)
        fileio.write_pointmap(out / names["pointmap"], fr.pointmap)
        fileio.write_mask(out / names["gt_mask"], fr.gt_masks)
        fileio.write_mask(out / names["mask"], fr.masks)
        frames.append({**names, "camera": fr.camera.to_dict()})
    fileio.write_cloud(out / "gt_cloud.ply", bundle.gt_cloud)
    manifest = {"seed": bundle.seed, "spec": bundle.spec.to_dict(), "frames": frames, "gt_cloud": "gt_cloud.ply"}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_bundle(scene_dir) -> SceneBundle:
    """Load a bundle written by :func:`write_bundle` (images come back as floats in [0, 1])."""
    d = Path(scene_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    frames = []
    for fr in manifest["frames"]:
        frames.append(
            FrameData(
                fileio.read_image(d / fr["rgb"]).astype(np.float64) / 255.0,
                fileio.read_pointmap(d / fr["pointmap"]),
                fileio.read_mask(d / fr["gt_mask"]),
                fileio.read_mask(d / fr["mask"]),
                Camera.from_dict(fr["camera"]),
            )
        )
    spec = SceneSpec.from_dict(manifest["spec"])
    return SceneBundle(frames, fileio.read_cloud(d / manifest["gt_cloud"]), spec, int(manifest["seed"]))
