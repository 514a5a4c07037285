"""Local plane fitting from same-class neighbors, plane distance loss and split projection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from segfield.errors import DegeneratePlaneError, InvalidInputError

# Ratio of middle to largest covariance eigenvalue below which neighbors are
# treated as collinear.
_COLLINEAR_RTOL = 1e-10


@dataclass(frozen=True)
class Plane:
    """Unit-normal plane ``normal . x + offset = 0`` through ``anchor``."""

    normal: np.ndarray
    offset: float
    anchor: np.ndarray

    def signed_distance(self, point) -> float:
        return float(self.normal @ (np.asarray(point, dtype=np.float64) - self.anchor))


@dataclass
class PlaneSet:
    """Per-splat optional planes stored as parallel arrays.

    Rows with ``has_plane`` False carry zeros and are ignored everywhere.
    """

    normals: np.ndarray
    offsets: np.ndarray
    anchors: np.ndarray
    has_plane: np.ndarray
    fitted_at: int = 0

    def __len__(self) -> int:
        return len(self.has_plane)

    @classmethod
    def empty(cls, n: int, fitted_at: int = 0) -> PlaneSet:
        return cls(np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)), np.zeros(n, dtype=bool), fitted_at)

    @classmethod
    def from_planes(cls, planes: list[Plane | None], fitted_at: int = 0) -> PlaneSet:
        ps = cls.empty(len(planes), fitted_at)
        for i, p in enumerate(planes):
            if p is not None:
                ps.normals[i] = p.normal
                ps.offsets[i] = p.offset
                ps.anchors[i] = p.anchor
                ps.has_plane[i] = True
        return ps

    def plane(self, i: int) -> Plane | None:
        if not self.has_plane[i]:
            return None
        return Plane(self.normals[i].copy(), float(self.offsets[i]), self.anchors[i].copy())


def _canonical_sign(normals: np.ndarray) -> np.ndarray:
    """Flip each normal so its first component with magnitude > 1e-12 is positive."""
    nz = np.abs(normals) > 1e-12
    first = np.argmax(nz, axis=1)
    lead = normals[np.arange(len(normals)), first]
    return normals * np.where(lead < 0, -1.0, 1.0)[:, None]


def _fit_batch(groups: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Fit planes to a stack of neighbor sets, shape (B, k, 3).

    Returns normals, offsets, anchors and a non-degeneracy flag.
    """
    anchors = groups.mean(axis=1)
    centered = groups - anchors[:, None, :]
    cov = np.einsum("bki,bkj->bij", centered, centered)
    evals, evecs = np.linalg.eigh(cov)
    normals = _canonical_sign(evecs[:, :, 0])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    ok = evals[:, 1] > _COLLINEAR_RTOL * np.maximum(evals[:, 2], 1e-300)
    ok &= evals[:, 2] > 0
    offsets = -np.einsum("bi,bi->b", normals, anchors)
    return normals, offsets, anchors, ok


def fit_plane(neighbor_positions) -> Plane:
    """Least-squares plane through the centroid of at least three points.

    The normal is the eigenvector of the centered scatter matrix with the
    smallest eigenvalue, sign-canonicalized so its first nonzero component is
    positive.

    Raises:
        DegeneratePlaneError: Fewer than three points, or the points are collinear.
    """
    pts = np.asarray(neighbor_positions, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise DegeneratePlaneError(f"need at least 3 points to fit a plane, got {len(pts)}")
    n, d, a, ok = _fit_batch(pts[None])
    if not ok[0]:
        raise DegeneratePlaneError("neighbor points are collinear or coincident")
    return Plane(n[0], float(d[0]), a[0])


def same_class_neighbors(positions, labels, query_index: int, k: int) -> list[int]:
    """Indices of the ``k`` nearest points sharing the query's label, excluding the query.

    Returns fewer than ``k`` indices when the class is small.
    """
    if k < 1:
        raise InvalidInputError("k must be positive")
    pos = np.asarray(positions, dtype=np.float64)
    lab = np.asarray(labels)
    members = np.flatnonzero(lab == lab[query_index])
    members = members[members != query_index]
    if members.size == 0:
        return []
    tree = cKDTree(pos[members])
    kk = min(k, members.size)
    _, idx = tree.query(pos[query_index], k=kk)
    return [int(i) for i in members[np.atleast_1d(idx)]]


def _class_neighbor_table(pos: np.ndarray, members: np.ndarray, k: int) -> np.ndarray:
    """For every member, its k nearest same-class members (self excluded), shape (n, k)."""
    tree = cKDTree(pos[members])
    _, idx = tree.query(pos[members], k=k + 1)
    own = np.arange(members.size)[:, None]
    # Drop the query itself; if duplicates pushed it out of slot 0, drop the last slot.
    is_self = idx == own
    drop = np.where(is_self.any(axis=1), np.argmax(is_self, axis=1), k)
    keep = np.ones_like(idx, dtype=bool)
    keep[np.arange(members.size), drop] = False
    return members[idx[keep].reshape(members.size, k)]


def fit_planes(positions, labels, k: int = 10, fitted_at: int = 0) -> PlaneSet:
    """Fit one plane per labeled splat from its ``k`` same-class nearest neighbors.

    Splats that are unlabeled, belong to a class with fewer than three other
    members, or whose neighbors are collinear get no plane. Classes with
    between 3 and ``k`` other members use all of them.
    """
    if k < 3:
        raise InvalidInputError("k must be at least 3")
    pos = np.asarray(positions, dtype=np.float64)
    lab = np.asarray(labels)
    out = PlaneSet.empty(len(pos), fitted_at)
    for cls in np.unique(lab):
        if cls == 0:
            continue
        members = np.flatnonzero(lab == cls)
        kk = min(k, members.size - 1)
        if kk < 3:
            continue
        nbrs = _class_neighbor_table(pos, members, kk)
        n, d, a, ok = _fit_batch(pos[nbrs])
        sel = members[ok]
        out.normals[sel] = n[ok]
        out.offsets[sel] = d[ok]
        out.anchors[sel] = a[ok]
        out.has_plane[sel] = True
    return out


def point_plane_distance(point, plane: Plane) -> float:
    return abs(plane.signed_distance(point))


def signed_distances(positions: np.ndarray, planes: PlaneSet) -> np.ndarray:
    """Signed distance of each point to its own plane (0 where there is none)."""
    d = np.einsum("ni,ni->n", planes.normals, np.asarray(positions, dtype=np.float64) - planes.anchors)
    return np.where(planes.has_plane, d, 0.0)


def plane_loss(positions, planes: PlaneSet) -> tuple[float, np.ndarray]:
    """Mean point-to-plane distance over all splats and its gradient.

    Splats without a plane contribute zero but still count in the mean. The
    gradient at exactly zero distance is taken as zero.
    """
    pos = np.asarray(positions, dtype=np.float64)
    r = len(pos)
    if r == 0:
        return 0.0, np.zeros((0, 3))
    if len(planes) != r:
        raise InvalidInputError("plane set and positions differ in length")
    sd = signed_distances(pos, planes)
    loss = float(np.abs(sd).sum() / r)
    grad = np.sign(sd)[:, None] * planes.normals / r
    return loss, grad


def split_project(point, plane: Plane) -> np.ndarray:
    """Move ``point`` along the normal onto ``plane``."""
    p = np.asarray(point, dtype=np.float64)
    return p - plane.signed_distance(p) * plane.normal


def project_onto_planes(positions: np.ndarray, planes: PlaneSet, index: np.ndarray) -> np.ndarray:
    """Vectorized :func:`split_project` of ``positions[i]`` onto ``planes[index[i]]`` where present."""
    pos = np.asarray(positions, dtype=np.float64)
    n = planes.normals[index]
    sd = np.einsum("ni,ni->n", n, pos - planes.anchors[index])
    sd = np.where(planes.has_plane[index], sd, 0.0)
    return pos - sd[:, None] * n
