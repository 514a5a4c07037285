"""Segmentation and reconstruction metrics: mIoU (single, multi-view, 3D), Chamfer, PSNR, SSIM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from segfield.assignment import solve_assignment
from segfield.data import LabeledMaskSet, SegmentedPointCloud
from segfield.errors import InvalidInputError, UndefinedMetricError
from segfield.field import GaussianField
from segfield.ssim import ssim as _ssim

NO_CATEGORY = -1


@dataclass
class IoUAccumulator:
    """Pooled intersection and per-ID pixel counts across views."""

    intersections: dict[tuple[int, int], int] = field(default_factory=dict)
    pred_sizes: dict[int, int] = field(default_factory=dict)
    gt_sizes: dict[int, int] = field(default_factory=dict)

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        """Add one view (or any aligned label arrays); label 0 is ignored on either side."""
        p = np.asarray(pred).reshape(-1)
        g = np.asarray(gt).reshape(-1)
        if p.shape != g.shape:
            raise InvalidInputError("prediction and ground truth differ in shape")
        for ids, sizes in ((p, self.pred_sizes), (g, self.gt_sizes)):
            vals, counts = np.unique(ids[ids != 0], return_counts=True)
            for v, c in zip(vals, counts):
                sizes[int(v)] = sizes.get(int(v), 0) + int(c)
        both = (p != 0) & (g != 0)
        pairs, counts = np.unique(np.stack([p[both], g[both]], axis=1), axis=0, return_counts=True)
        for (a, b), c in zip(pairs, counts):
            key = (int(a), int(b))
            self.intersections[key] = self.intersections.get(key, 0) + int(c)

    def union(self, pred_id: int, gt_id: int) -> int:
        inter = self.intersections.get((pred_id, gt_id), 0)
        return self.pred_sizes.get(pred_id, 0) + self.gt_sizes.get(gt_id, 0) - inter

    def iou_matrix(self) -> tuple[np.ndarray, list[int], list[int]]:
        preds = sorted(self.pred_sizes)
        gts = sorted(self.gt_sizes)
        m = np.zeros((len(preds), len(gts)))
        for (a, b), inter in self.intersections.items():
            m[preds.index(a), gts.index(b)] = inter / self.union(a, b)
        return m, preds, gts

    def matched_mean(self) -> float:
        """Mean over ground-truth IDs of IoU under the best one-to-one assignment."""
        if not self.gt_sizes:
            raise UndefinedMetricError("ground truth has no labeled masks")
        m, preds, gts = self.iou_matrix()
        if not preds:
            return 0.0
        res = solve_assignment(1.0 - m, reject_above=1.0)
        return float(sum(m[i, j] for i, j in res.pairs) / len(gts))


def miou_single(pred: LabeledMaskSet, gt: LabeledMaskSet) -> float:
    """Per-view mIoU with optimal pred-to-gt mask assignment; unmatched gt masks score 0."""
    if pred.shape != gt.shape:
        raise InvalidInputError("prediction and ground truth differ in shape")
    acc = IoUAccumulator()
    acc.add(pred.ids, gt.ids)
    return acc.matched_mean()


def miou_multi(preds: list[LabeledMaskSet], gts: list[LabeledMaskSet]) -> float:
    """Multi-view mIoU: counts pooled per (pred ID, gt ID) across all views before matching."""
    if len(preds) != len(gts):
        raise InvalidInputError("prediction and ground-truth lists differ in length")
    acc = IoUAccumulator()
    for p, g in zip(preds, gts):
        if p.shape != g.shape:
            raise InvalidInputError("prediction and ground truth differ in shape")
        acc.add(p.ids, g.ids)
    return acc.matched_mean()


def transfer_labels(positions: np.ndarray, gt_cloud: SegmentedPointCloud, gamma: float) -> np.ndarray:
    """Nearest ground-truth label per position, or ``NO_CATEGORY`` beyond ``gamma``."""
    if len(gt_cloud) == 0:
        raise UndefinedMetricError("ground-truth cloud is empty")
    if len(positions) == 0:
        return np.zeros(0, dtype=np.int64)
    dist, idx = cKDTree(gt_cloud.positions).query(positions, k=1)
    return np.where(dist <= gamma, gt_cloud.labels[idx], NO_CATEGORY)


def miou_3d(
    field_or_positions,
    gt_cloud: SegmentedPointCloud,
    gamma: float = 0.5,
    predicted=None,
    match_ids: bool = True,
) -> float:
    """3D mIoU over splats with nearest-neighbor label transfer.

    Each splat takes the label of its nearest ground-truth point, or "no
    category" beyond ``gamma``. Per-class IoU compares these with the
    predicted labels; a no-category splat still counts in the union of
    whatever class it was predicted as. The mean runs over ground-truth
    classes present in the cloud.

    Args:
        field_or_positions: A :class:`GaussianField` (predictions are its
            classifier argmax) or an (N, 3) array together with ``predicted``.
        gt_cloud: Labeled ground-truth points.
        gamma: Label transfer distance cutoff.
        predicted: Per-splat predicted labels when positions are given.
        match_ids: Pair predicted and ground-truth IDs by optimal assignment
            (needed when the two ID spaces differ); otherwise compare IDs directly.
    """
    if gamma <= 0:
        raise InvalidInputError("gamma must be positive")
    if len(gt_cloud) == 0:
        raise UndefinedMetricError("ground-truth cloud is empty")
    if isinstance(field_or_positions, GaussianField):
        pos = field_or_positions.positions
        pred = field_or_positions.predicted_labels() if predicted is None else np.asarray(predicted)
    else:
        pos = np.asarray(field_or_positions, dtype=np.float64).reshape(-1, 3)
        if predicted is None:
            raise InvalidInputError("predicted labels required with raw positions")
        pred = np.asarray(predicted)
    gt = transfer_labels(pos, gt_cloud, gamma)
    classes = [int(c) for c in np.unique(gt_cloud.labels) if c != 0]
    if not classes:
        raise UndefinedMetricError("ground-truth cloud has no labeled points")

    pred_ids = [int(c) for c in np.unique(pred) if c != 0]
    iou = np.zeros((len(pred_ids), len(classes)))
    for a, pid in enumerate(pred_ids):
        is_p = pred == pid
        for b, gid in enumerate(classes):
            is_g = gt == gid
            union = np.count_nonzero(is_p | is_g)
            if union:
                iou[a, b] = np.count_nonzero(is_p & is_g) / union
    if match_ids:
        if not pred_ids:
            return 0.0
        res = solve_assignment(1.0 - iou, reject_above=1.0)
        return float(sum(iou[i, j] for i, j in res.pairs) / len(classes))
    total = 0.0
    for b, gid in enumerate(classes):
        if gid in pred_ids:
            total += iou[pred_ids.index(gid), b]
    return total / len(classes)


def chamfer(a, b) -> float:
    """Symmetric mean Euclidean nearest-neighbor distance, halved."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise InvalidInputError("chamfer distance needs two non-empty point sets")
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def psnr(img, ref) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]; ``inf`` when identical."""
    x = np.asarray(img, dtype=np.float64)
    y = np.asarray(ref, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidInputError("image shapes differ")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def ssim(img, ref) -> float:
    return _ssim(img, ref)


def rigid_align(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation R and translation t with ``R @ source_i + t ~= target_i``.

    Requires known point correspondences (rows paired).
    """
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise InvalidInputError("rigid_align needs two (N, 3) arrays of equal shape")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rot, cd - rot @ cs
