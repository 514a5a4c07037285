"""Gaussian splat collection: initialization, densification, pruning and object edits."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from segfield.data import SegmentedPointCloud
from segfield.errors import InvalidInputError
from segfield.planes import PlaneSet, project_onto_planes

IDENTITY_DIM = 16
SPLIT_CHILDREN = 2
SPLIT_SCALE_DIVISOR = 1.6


class UnknownObjectWarning(UserWarning):
    """An edit targeted a class ID that no splat carries."""


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p / (1.0 - p))


@dataclass
class GaussianSplat:
    position: np.ndarray
    raw_opacity: float
    raw_scale: float
    color: np.ndarray
    identity: np.ndarray
    class_label: int

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.raw_opacity))

    @property
    def scale(self) -> float:
        return float(np.exp(self.raw_scale))


@dataclass
class GaussianField:
    """Splats stored as parallel arrays plus the linear identity classifier.

    Attributes:
        positions: (N, 3) centers.
        raw_opacity: (N,) opacity logits.
        raw_scale: (N,) log of the isotropic standard deviation.
        colors: (N, 3) flat RGB.
        identity: (N, 16) identity encodings.
        labels: (N,) class labels, 0 = unlabeled.
        classifier_weight: (K, 16).
        classifier_bias: (K,).
    """

    positions: np.ndarray
    raw_opacity: np.ndarray
    raw_scale: np.ndarray
    colors: np.ndarray
    identity: np.ndarray
    labels: np.ndarray
    classifier_weight: np.ndarray
    classifier_bias: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.positions)
        for name in ("raw_opacity", "raw_scale", "colors", "identity", "labels"):
            if len(getattr(self, name)) != n:
                raise InvalidInputError(f"field array {name!r} has the wrong length")
        if self.classifier_weight.shape != (len(self.classifier_bias), IDENTITY_DIM):
            raise InvalidInputError("classifier shape mismatch")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def num_classes(self) -> int:
        return len(self.classifier_bias)

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.raw_opacity)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.raw_scale)

    def splat(self, i: int) -> GaussianSplat:
        return GaussianSplat(
            self.positions[i].copy(), float(self.raw_opacity[i]), float(self.raw_scale[i]),
            self.colors[i].copy(), self.identity[i].copy(), int(self.labels[i]),
        )

    def subset(self, index) -> GaussianField:
        """New field holding the splats at ``index`` (bool mask or integer array)."""
        return GaussianField(
            self.positions[index].copy(), self.raw_opacity[index].copy(), self.raw_scale[index].copy(),
            self.colors[index].copy(), self.identity[index].copy(), self.labels[index].copy(),
            self.classifier_weight.copy(), self.classifier_bias.copy(),
        )

    def copy(self) -> GaussianField:
        return self.subset(np.arange(len(self)))

    def predicted_labels(self) -> np.ndarray:
        """Argmax class of each splat's identity under the classifier."""
        logits = self.identity @ self.classifier_weight.T + self.classifier_bias
        return np.argmax(logits, axis=1)


def _label_identity(label: int, scale: float) -> np.ndarray:
    if label == 0:
        return np.zeros(IDENTITY_DIM)
    rng = np.random.default_rng([0x1D, int(label)])
    return scale * rng.standard_normal(IDENTITY_DIM)


def voxel_downsample(positions: np.ndarray, labels: np.ndarray, voxel_size: float):
    """Merge points per voxel cell: mean position, majority label (lowest on ties).

    Output is ordered by cell key.
    """
    keys = np.floor(positions / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n_cells = len(counts)
    merged = np.zeros((n_cells, 3))
    np.add.at(merged, inverse, positions)
    merged /= counts[:, None]
    # majority label: count (cell, label) pairs, pick the max count per cell
    _, lab_code = np.unique(labels, return_inverse=True)
    lab_values = np.unique(labels)
    pair = inverse.astype(np.int64) * len(lab_values) + lab_code.reshape(-1)
    tally = np.bincount(pair, minlength=n_cells * len(lab_values)).reshape(n_cells, len(lab_values))
    out_labels = lab_values[np.argmax(tally, axis=1)]
    return merged, out_labels


def init_from_cloud(
    cloud: SegmentedPointCloud,
    voxel_size: float | None = None,
    opacity: float = 0.1,
    color=(0.5, 0.5, 0.5),
    identity_scale: float = 0.1,
    min_scale: float = 1e-4,
) -> GaussianField:
    """One splat per cloud point (or per occupied voxel when ``voxel_size`` is set).

    Scales start at the RMS distance to the three nearest neighbors. Identity
    encodings start at a fixed pseudo-random vector per label (zero for
    unlabeled points) and the classifier starts at zero, so every class is
    initially equiprobable. The class count is ``max(label) + 1``.
    """
    if len(cloud) == 0:
        raise InvalidInputError("cannot initialize a field from an empty cloud")
    pos, labels = cloud.positions, cloud.labels
    if voxel_size is not None:
        if voxel_size <= 0:
            raise InvalidInputError("voxel_size must be positive")
        pos, labels = voxel_downsample(pos, labels, voxel_size)
    n = len(pos)
    if n > 1:
        k = min(4, n)
        d, _ = cKDTree(pos).query(pos, k=k)
        dist = np.sqrt(np.mean(d[:, 1:] ** 2, axis=1))
    else:
        dist = np.full(1, 0.01)
    dist = np.maximum(dist, min_scale)
    identity = np.stack([_label_identity(int(lab), identity_scale) for lab in labels])
    k_classes = int(labels.max()) + 1
    return GaussianField(
        positions=pos.copy(),
        raw_opacity=np.full(n, float(logit(opacity))),
        raw_scale=np.log(dist),
        colors=np.tile(np.asarray(color, dtype=np.float64), (n, 1)),
        identity=identity,
        labels=labels.astype(np.int64).copy(),
        classifier_weight=np.zeros((k_classes, IDENTITY_DIM)),
        classifier_bias=np.zeros(k_classes),
    )


def densify_with_lineage(
    field: GaussianField,
    grad_norms,
    grad_threshold: float,
    scale_threshold: float,
    planes: PlaneSet | None,
    rng_seed,
    split_projection: bool = True,
) -> tuple[GaussianField, np.ndarray, int]:
    """Clone small and split large high-gradient splats.

    Output order: untouched and cloned originals in their original order,
    then the clones, then two children per split parent.

    Returns:
        (new field, source index in the old field for every new splat,
        number of leading splats carried over unchanged).
    """
    g = np.asarray(grad_norms, dtype=np.float64)
    if g.shape != (len(field),) or not np.all(np.isfinite(g)):
        raise InvalidInputError("gradient norms must be finite with one entry per splat")
    hot = g > grad_threshold
    small = field.scale <= scale_threshold
    clone_idx = np.flatnonzero(hot & small)
    split_idx = np.flatnonzero(hot & ~small)
    keep_idx = np.flatnonzero(~(hot & ~small))

    rng = np.random.default_rng(rng_seed)
    parents = np.repeat(split_idx, SPLIT_CHILDREN)
    sigma = field.scale[parents]
    child_pos = field.positions[parents] + sigma[:, None] * rng.standard_normal((len(parents), 3))
    if split_projection and planes is not None and len(parents):
        child_pos = project_onto_planes(child_pos, planes, parents)

    source = np.concatenate([keep_idx, clone_idx, parents]).astype(np.int64)
    out = field.subset(source)
    n_fixed = len(keep_idx) + len(clone_idx)
    out.positions[n_fixed:] = child_pos
    out.raw_scale[n_fixed:] -= np.log(SPLIT_SCALE_DIVISOR)
    return out, source, len(keep_idx)


def densify(
    field: GaussianField,
    grad_norms,
    grad_threshold: float,
    scale_threshold: float,
    planes: PlaneSet | None,
    rng_seed,
    split_projection: bool = True,
) -> GaussianField:
    """Clone/split densification; see :func:`densify_with_lineage`."""
    return densify_with_lineage(
        field, grad_norms, grad_threshold, scale_threshold, planes, rng_seed, split_projection
    )[0]


def prune(field: GaussianField, opacity_floor: float) -> GaussianField:
    """Drop splats whose opacity is below ``opacity_floor``; may return an empty field."""
    return field.subset(field.opacity >= opacity_floor)


def _check_known(field: GaussianField, global_id: int) -> bool:
    if global_id <= 0 or global_id >= field.num_classes or not np.any(field.labels == global_id):
        warnings.warn(f"no splats carry class {global_id}; edit skipped", UnknownObjectWarning, stacklevel=3)
        return False
    return True


def delete_object(field: GaussianField, global_id: int) -> GaussianField:
    if not _check_known(field, global_id):
        return field.copy()
    return field.subset(field.labels != global_id)


def move_object(field: GaussianField, global_id: int, translation) -> GaussianField:
    out = field.copy()
    if not _check_known(field, global_id):
        return out
    sel = out.labels == global_id
    out.positions[sel] += np.asarray(translation, dtype=np.float64)
    return out
