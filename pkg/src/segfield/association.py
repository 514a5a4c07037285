"""Pointmap correspondence, redefined mask overlap and sequential mask association.

Frames are processed in order. The first frame keeps its own mask IDs as
global IDs; every later frame's masks are matched against a reference
labeling and either inherit a global ID or receive a fresh one. Two reference
labelings are supported:

``adjacent``
    The previous frame's relabeled masks, carried over through nearest-point
    pixel correspondence between the two pointmaps.
``accumulated``
    A virtual labeling of the current frame read off the labeled point cloud
    built so far (label of the nearest accumulated point within
    ``gamma_assoc``). This keeps IDs for objects that leave view and return.
"""

from __future__ import annotations

import logging
from typing import Literal

import numpy as np
from scipy.spatial import cKDTree

from segfield.assignment import solve_assignment
from segfield.data import CorrespondenceMap, LabeledMaskSet, Pointmap, SegmentedPointCloud
from segfield.errors import EmptyTargetError, InvalidInputError

log = logging.getLogger(__name__)

Mode = Literal["adjacent", "accumulated"]

# Candidate count per query used to resolve equal-distance ties by index.
_TIE_CANDIDATES = 4


def nearest_valid_index(query: np.ndarray, ref: np.ndarray, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Index into ``ref`` of the nearest point for each query row, and the distance.

    Exact duplicate reference points collapse to their first occurrence and
    remaining equal-distance candidates resolve to the lowest index.
    """
    uniq, first = np.unique(ref, axis=0, return_index=True)
    tree = cKDTree(uniq)
    k = min(_TIE_CANDIDATES, len(uniq))
    dist, idx = tree.query(query, k=k, workers=workers)
    if k == 1:
        return first[idx], dist
    cand = first[idx]
    tied = dist == dist[:, :1]
    cand = np.where(tied, cand, np.iinfo(np.int64).max)
    return cand.min(axis=1), dist[:, 0]


def build_correspondence(source: Pointmap, target: Pointmap, workers: int = 1) -> CorrespondenceMap:
    """Map each valid source pixel to the target pixel with the nearest 3D point.

    Raises:
        EmptyTargetError: The target has no valid pixels.
    """
    t_flat = np.flatnonzero(target.valid.reshape(-1))
    if t_flat.size == 0:
        raise EmptyTargetError("target pointmap has no valid pixels")
    s_valid = source.valid
    s_pts = source.points[s_valid]
    t_pts = target.points.reshape(-1, 3)[t_flat]
    out = np.zeros(source.shape + (2,), dtype=np.int64)
    if s_pts.size:
        nn, _ = nearest_valid_index(s_pts, t_pts, workers)
        rows, cols = np.divmod(t_flat[nn], target.width)
        out[s_valid] = np.stack([rows, cols], axis=1)
    return CorrespondenceMap(out, s_valid.copy(), target.shape)


def masked_overlap(
    mask_a_id: int, masks_a: LabeledMaskSet, mask_b_id: int, masks_b: LabeledMaskSet, phi: CorrespondenceMap
) -> int:
    """Count source pixels in mask ``a`` whose corresponding target pixel lies in mask ``b``."""
    if masks_a.shape != phi.shape:
        raise InvalidInputError("source masks and correspondence differ in shape")
    sel = (masks_a.ids == mask_a_id) & phi.defined
    t = phi.target[sel]
    return int(np.count_nonzero(masks_b.ids[t[:, 0], t[:, 1]] == mask_b_id))


def matching_cost(overlap: int, size_a: int, size_b: int) -> float:
    """``1 - overlap / min(size_a, size_b)``."""
    if size_a < 1 or size_b < 1:
        raise InvalidInputError("mask sizes must be at least 1")
    if overlap < 0 or overlap > min(size_a, size_b):
        raise InvalidInputError("overlap must lie in [0, min(size_a, size_b)]")
    return 1.0 - overlap / min(size_a, size_b)


def _pair_counts(ids_a: np.ndarray, ids_b: np.ndarray, list_a: np.ndarray, list_b: np.ndarray) -> np.ndarray:
    """Co-occurrence counts of (a, b) over aligned label arrays, shape (len(list_a), len(list_b))."""
    ia = np.searchsorted(list_a, ids_a)
    ib = np.searchsorted(list_b, ids_b)
    ok = (ia < len(list_a)) & (ib < len(list_b))
    ok &= list_a[np.minimum(ia, len(list_a) - 1)] == ids_a
    ok &= list_b[np.minimum(ib, len(list_b) - 1)] == ids_b
    code = ia[ok] * len(list_b) + ib[ok]
    return np.bincount(code, minlength=len(list_a) * len(list_b)).reshape(len(list_a), len(list_b))


def cost_matrix(
    ref_ids: np.ndarray, cur_ids: np.ndarray, ref_sizes: dict[int, int], cur_sizes: dict[int, int]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Matching costs between reference and current labels given aligned per-pixel labels.

    ``ref_ids`` and ``cur_ids`` are 1D arrays over the corresponding pixel
    pairs; sizes are the full valid-pixel mask sizes.

    Returns:
        (costs, reference label list, current label list).
    """
    rows = np.array(sorted(k for k, v in ref_sizes.items() if v > 0), dtype=np.int64)
    cols = np.array(sorted(k for k, v in cur_sizes.items() if v > 0), dtype=np.int64)
    overlap = _pair_counts(ref_ids, cur_ids, rows, cols)
    sa = np.array([ref_sizes[int(r)] for r in rows], dtype=np.float64)
    sb = np.array([cur_sizes[int(c)] for c in cols], dtype=np.float64)
    denom = np.minimum(sa[:, None], sb[None, :])
    costs = 1.0 - overlap / np.where(denom > 0, denom, 1.0)
    return np.clip(costs, 0.0, 1.0), rows, cols


def _valid_sizes(ids: np.ndarray, valid: np.ndarray) -> dict[int, int]:
    vals, counts = np.unique(ids[valid], return_counts=True)
    return {int(v): int(c) for v, c in zip(vals, counts) if v != 0}


def _frame_cloud(pm: Pointmap, ids: np.ndarray, frame: int) -> SegmentedPointCloud:
    sel = pm.valid & (ids != 0)
    return SegmentedPointCloud(pm.points[sel], ids[sel], np.full(int(sel.sum()), frame))


def virtual_labels(
    pm: Pointmap, cloud_positions: np.ndarray, cloud_labels: np.ndarray, gamma: float, workers: int = 1
) -> np.ndarray:
    """Per-pixel label of the nearest accumulated point within ``gamma`` (0 beyond or invalid)."""
    out = np.zeros(pm.shape, dtype=np.int64)
    if len(cloud_positions) == 0 or not pm.valid.any():
        return out
    tree = cKDTree(cloud_positions)
    dist, idx = tree.query(pm.points[pm.valid], k=1, workers=workers)
    lab = np.where(dist <= gamma, cloud_labels[np.minimum(idx, len(cloud_labels) - 1)], 0)
    out[pm.valid] = lab
    return out


def _relabel(
    cur: LabeledMaskSet,
    matched: dict[int, int],
    next_id: int,
    min_mask_pixels: int,
) -> tuple[np.ndarray, int]:
    """Map current frame IDs to global IDs; fresh IDs for large unmatched masks."""
    out = np.zeros_like(cur.ids)
    for b in cur.id_list:
        sel = cur.ids == b
        if b in matched:
            out[sel] = matched[b]
        elif int(sel.sum()) >= min_mask_pixels:
            out[sel] = next_id
            next_id += 1
    return out, next_id


def associate_sequence(
    frames: list[tuple[Pointmap, LabeledMaskSet]],
    mode: Mode = "accumulated",
    reject_above: float = 0.7,
    min_mask_pixels: int = 16,
    gamma_assoc: float = 0.1,
    workers: int = 1,
) -> tuple[list[LabeledMaskSet], SegmentedPointCloud]:
    """Relabel per-frame masks with globally consistent IDs and accumulate the labeled cloud.

    Args:
        frames: Ordered (pointmap, per-frame masks) pairs of equal dimensions.
        mode: ``"accumulated"`` or ``"adjacent"``.
        reject_above: Cost above which a pair is never matched.
        min_mask_pixels: Unmatched masks smaller than this become unlabeled
            instead of receiving a fresh ID.
        gamma_assoc: Radius for reading labels off the accumulated cloud.
        workers: Threads for nearest-neighbor queries.

    Returns:
        The relabeled masks and the labeled cloud of all labeled valid pixels.
    """
    if not frames:
        raise InvalidInputError("associate_sequence needs at least one frame")
    if mode not in ("adjacent", "accumulated"):
        raise InvalidInputError(f"unknown association mode {mode!r}")
    for t, (pm, masks) in enumerate(frames):
        if pm.shape != masks.shape:
            raise InvalidInputError(f"frame {t}: pointmap and masks differ in shape")

    pm0, m0 = frames[0]
    out_masks = [m0.copy()]
    clouds = [_frame_cloud(pm0, m0.ids, 0)]
    next_id = max(m0.id_list, default=0) + 1

    for t in range(1, len(frames)):
        pm, cur = frames[t]
        cur_sizes = _valid_sizes(cur.ids, pm.valid)
        if mode == "adjacent":
            prev_pm = frames[t - 1][0]
            prev_ids = out_masks[t - 1].ids
            ref_sizes = _valid_sizes(prev_ids, prev_pm.valid)
            if pm.valid.any() and prev_pm.valid.any():
                phi = build_correspondence(prev_pm, pm, workers)
                tgt = phi.target[phi.defined]
                ref_pix = prev_ids[phi.defined]
                cur_pix = cur.ids[tgt[:, 0], tgt[:, 1]]
            else:
                ref_pix = cur_pix = np.zeros(0, dtype=np.int64)
        else:
            acc = SegmentedPointCloud.concatenate(clouds)
            virt = virtual_labels(pm, acc.positions, acc.labels, gamma_assoc, workers)
            ref_sizes = _valid_sizes(virt, pm.valid)
            ref_pix = virt[pm.valid]
            cur_pix = cur.ids[pm.valid]

        costs, rows, cols = cost_matrix(ref_pix, cur_pix, ref_sizes, cur_sizes)
        result = solve_assignment(costs, reject_above)
        matched = {int(cols[j]): int(rows[i]) for i, j in result.pairs}
        ids, next_id = _relabel(cur, matched, next_id, min_mask_pixels)
        log.debug("frame %d: %d matched, next id %d", t, len(matched), next_id)
        out_masks.append(LabeledMaskSet(ids))
        clouds.append(_frame_cloud(pm, ids, t))

    return out_masks, SegmentedPointCloud.concatenate(clouds)


def independent_labels(
    frames: list[tuple[Pointmap, LabeledMaskSet]],
) -> tuple[list[LabeledMaskSet], SegmentedPointCloud]:
    """Keep every frame's own IDs (no association); the ablation baseline."""
    if not frames:
        raise InvalidInputError("need at least one frame")
    masks = [m.copy() for _, m in frames]
    cloud = SegmentedPointCloud.concatenate([_frame_cloud(pm, m.ids, t) for t, (pm, m) in enumerate(frames)])
    return masks, cloud
