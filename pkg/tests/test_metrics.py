import itertools

import numpy as np
import pytest

from oracles import chamfer_brute, enumerate_partial_matchings
from segfield.data import LabeledMaskSet, SegmentedPointCloud
from segfield.errors import InvalidInputError, UndefinedMetricError
from segfield.metrics import NO_CATEGORY, chamfer, miou_3d, miou_multi, miou_single, psnr, rigid_align, ssim


def _masks(a):
    return LabeledMaskSet(np.asarray(a))


def _cloud(pos, labels):
    return SegmentedPointCloud(np.asarray(pos, float), np.asarray(labels), np.zeros(len(pos), dtype=np.int64))


def _iou(p, g):
    return np.count_nonzero(p & g) / np.count_nonzero(p | g)


def _best_mean_iou(iou, n_gt):
    """Exhaustive search over partial matchings for the highest total IoU."""
    best = 0.0
    for match in enumerate_partial_matchings(*iou.shape):
        best = max(best, sum(iou[i, j] for i, j in match))
    return best / n_gt


def test_single_self_and_disjoint():
    gt = _masks([[1, 1, 2], [0, 2, 2]])
    assert miou_single(gt, gt) == 1.0
    pred = _masks([[0, 0, 0], [3, 0, 0]])
    assert miou_single(pred, gt) == 0.0


def test_single_split_three_by_two():
    gt = np.array([[1, 1, 1, 1], [2, 2, 2, 2]])
    pred = np.array([[5, 5, 6, 6], [7, 7, 7, 7]])
    got = miou_single(_masks(pred), _masks(gt))
    assert got == 0.75
    iou = np.array([[_iou(pred == p, gt == g) for g in (1, 2)] for p in (5, 6, 7)])
    assert got == pytest.approx(_best_mean_iou(iou, 2))


def test_single_relabeling_invariant():
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 4, (6, 6))
    pred = np.array([0, 9, 3, 7])[gt]
    assert miou_single(_masks(pred), _masks(gt)) == 1.0


def test_single_no_gt():
    with pytest.raises(UndefinedMetricError):
        miou_single(_masks([[1, 2]]), _masks([[0, 0]]))


def test_multi_consistent_ids():
    gts = [_masks([[1, 2], [0, 2]]), _masks([[2, 2], [1, 0]])]
    preds = [_masks(np.array([0, 4, 8])[g.ids]) for g in gts]
    assert miou_multi(preds, gts) == 1.0


def test_multi_id_change_penalized():
    gts = [_masks([[1, 1], [2, 2]])] * 3
    preds = [_masks([[5, 5], [6, 6]]), _masks([[5, 5], [6, 6]]), _masks([[9, 9], [6, 6]])]
    single = np.mean([miou_single(p, g) for p, g in zip(preds, gts)])
    assert single == 1.0
    assert miou_multi(preds, gts) < single


def test_multi_three_view_hand_count():
    gts = [_masks([[1, 1, 0]]), _masks([[1, 2, 2]]), _masks([[0, 2, 2]])]
    preds = [_masks([[3, 3, 3]]), _masks([[3, 3, 4]]), _masks([[0, 4, 4]])]
    # pooled counts: pred3 = 5 px, pred4 = 3 px, gt1 = 3 px, gt2 = 4 px
    # I(3,1)=3 I(3,2)=1 I(4,2)=3 -> IoU(3,1)=3/5, IoU(4,2)=3/4, IoU(3,2)=1/8
    # best: (3,1)+(4,2) = 0.6 + 0.75
    assert miou_multi(preds, gts) == pytest.approx((0.6 + 0.75) / 2)


def test_multi_length_mismatch():
    with pytest.raises(InvalidInputError):
        miou_multi([_masks([[1]])], [])


def test_miou_3d_self():
    rng = np.random.default_rng(1)
    pos = rng.normal(size=(80, 3))
    lab = rng.integers(1, 4, 80)
    assert miou_3d(pos, _cloud(pos, lab), predicted=lab) == 1.0
    assert miou_3d(pos, _cloud(pos, lab), predicted=lab, match_ids=False) == 1.0


def test_miou_3d_floaters_decrease():
    rng = np.random.default_rng(2)
    pos = rng.uniform(-1, 1, (100, 3))
    lab = rng.integers(1, 4, 100)
    gt = _cloud(pos, lab)
    base = miou_3d(pos, gt, predicted=lab)
    floaters = rng.uniform(-1, 1, (50, 3)) + np.array([10.0, 0, 0])
    more = miou_3d(np.vstack([pos, floaters]), gt, predicted=np.concatenate([lab, rng.integers(1, 4, 50)]))
    assert more < base


def test_miou_3d_brute_force_toy():
    rng = np.random.default_rng(3)
    gt_pos = rng.uniform(-1, 1, (60, 3))
    gt_lab = rng.integers(1, 4, 60)
    pos = np.vstack([gt_pos[:70] + rng.normal(0, 0.05, (60, 3)), rng.uniform(-3, 3, (40, 3))])
    pred = rng.integers(1, 4, 100)
    # O(n^2) transfer
    d = np.sqrt(((pos[:, None] - gt_pos[None]) ** 2).sum(-1))
    nearest = np.argmin(d, axis=1)
    transferred = np.where(d[np.arange(100), nearest] <= 0.5, gt_lab[nearest], NO_CATEGORY)
    classes = sorted(set(gt_lab.tolist()))
    direct = np.mean([_iou(pred == c, transferred == c) for c in classes])
    got = miou_3d(pos, _cloud(gt_pos, gt_lab), predicted=pred, match_ids=False)
    assert got == pytest.approx(direct, abs=1e-15)
    iou = np.array([[_iou(pred == p, transferred == c) for c in classes] for p in sorted(set(pred.tolist()))])
    assert miou_3d(pos, _cloud(gt_pos, gt_lab), predicted=pred) == pytest.approx(_best_mean_iou(iou, len(classes)))


def test_miou_3d_errors():
    with pytest.raises(UndefinedMetricError):
        miou_3d(np.zeros((1, 3)), _cloud(np.zeros((0, 3)), []), predicted=[1])
    with pytest.raises(InvalidInputError):
        miou_3d(np.zeros((1, 3)), _cloud(np.zeros((1, 3)), [1]), gamma=0, predicted=[1])


def test_chamfer_examples():
    a = np.random.default_rng(4).normal(size=(20, 3))
    assert chamfer(a, a) == 0.0
    assert chamfer([[0, 0, 0]], [[1, 0, 0]]) == 1.0
    with pytest.raises(InvalidInputError):
        chamfer(np.zeros((0, 3)), a)


def test_chamfer_matches_oracle_and_symmetry():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(500, 3)), rng.normal(size=(500, 3)) + 0.3
    assert abs(chamfer(a, b) - chamfer_brute(a, b)) <= 1e-9
    assert chamfer(a, b) == pytest.approx(chamfer(b, a), abs=1e-15)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    t = rng.normal(size=3)
    assert abs(chamfer(a @ q.T + t, b @ q.T + t) - chamfer(a, b)) <= 1e-9


def test_psnr_ssim_examples():
    rng = np.random.default_rng(6)
    x = rng.random((16, 16, 3))
    assert psnr(x, x) == float("inf")
    assert ssim(x, x) == pytest.approx(1.0)
    y = np.full((4, 4), 0.5)
    assert psnr(y + 0.1, y) == pytest.approx(20.0)


def test_rigid_align_recovers_transform():
    rng = np.random.default_rng(7)
    src = rng.normal(size=(30, 3))
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    t = rng.normal(size=3)
    rot, trans = rigid_align(src, src @ q.T + t)
    assert np.allclose(rot, q, atol=1e-10) and np.allclose(trans, t, atol=1e-10)


@pytest.mark.parametrize("n_pred,n_gt", list(itertools.product([1, 2, 3], [1, 2, 3])))
def test_single_matches_brute_force(n_pred, n_gt):
    rng = np.random.default_rng(10 * n_pred + n_gt)
    gt = rng.integers(0, n_gt + 1, (5, 5))
    gt[0, : n_gt] = np.arange(1, n_gt + 1)
    pred = rng.integers(0, n_pred + 1, (5, 5))
    pred[4, : n_pred] = np.arange(1, n_pred + 1)
    iou = np.array([[_iou(pred == p, gt == g) for g in range(1, n_gt + 1)] for p in range(1, n_pred + 1)])
    assert miou_single(_masks(pred), _masks(gt)) == pytest.approx(_best_mean_iou(iou, n_gt))
