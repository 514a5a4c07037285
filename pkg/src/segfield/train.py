"""End-to-end optimization of a Gaussian segmentation field.

Each iteration renders one training view, evaluates the photometric, 2D
identity, 3D identity and plane losses, backpropagates, and takes an Adam
step. Local planes are refit on a fixed schedule and right after every
densification, which clones/splits high-gradient splats and prunes
transparent ones.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from segfield.data import LabeledMaskSet
from segfield.errors import InvalidInputError, TrainingDiverged
from segfield.field import GaussianField, densify_with_lineage
from segfield.losses import LossBundle, loss_2d, loss_3d, loss_img
from segfield.planes import PlaneSet, fit_planes, plane_loss
from segfield.render import Camera, render, render_backward

log = logging.getLogger(__name__)

PER_SPLAT = ("positions", "raw_opacity", "raw_scale", "colors", "identity")
GLOBAL = ("classifier_weight", "classifier_bias")


@dataclass
class TrainView:
    image: np.ndarray
    masks: LabeledMaskSet
    camera: Camera


@dataclass
class TrainConfig:
    iterations: int = 2000
    lambda_plane: float = 10.0
    lambda_2d: float = 1.0
    lambda_3d: float = 1.0
    lambda_dssim: float = 0.2
    k_neighbors: int = 10
    plane_interval: int = 1000
    split_projection: bool = True
    densify_interval: int = 500
    densify_from: int = 500
    densify_until: int = 1500
    grad_threshold: float = 2e-4
    # None -> 1% of the scene extent
    scale_threshold: float | None = None
    opacity_floor: float = 0.005
    # None -> derived from the camera centers
    extent: float | None = None
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_color: float = 2.5e-3
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_identity: float = 2.5e-3
    lr_classifier: float = 2.5e-3
    cutoff: float = 3.0
    seed: int = 0
    dump_path: str | None = None

    def validate(self) -> None:
        if self.iterations < 0:
            raise InvalidInputError("iterations must be non-negative")
        for name in ("lambda_plane", "lambda_2d", "lambda_3d", "lambda_dssim"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be non-negative")
        if self.lambda_dssim > 1:
            raise InvalidInputError("lambda_dssim must lie in [0, 1]")
        for name in ("plane_interval", "densify_interval"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be at least 1")
        if not 3 <= self.k_neighbors:
            raise InvalidInputError("k_neighbors must be at least 3")


@dataclass
class IterationLog:
    iteration: int
    losses: LossBundle
    n_splats: int


@dataclass
class TrainResult:
    field: GaussianField
    history: list[IterationLog] = field(default_factory=list)


class Adam:
    """Adam over named numpy arrays, updating them in place."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        if name not in self.m or self.m[name].shape != param.shape:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.steps.setdefault(name, 0)
        self.steps[name] += 1
        t = self.steps[name]
        m, v = self.m[name], self.v[name]
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        m_hat = m / (1 - self.beta1**t)
        v_hat = v / (1 - self.beta2**t)
        param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def remap(self, names, source: np.ndarray, n_kept: int) -> None:
        """Carry moments for the first ``n_kept`` rows from ``source``; zero for the rest."""
        for name in names:
            if name not in self.m:
                continue
            for store in (self.m, self.v):
                old = store[name]
                new = np.zeros((len(source),) + old.shape[1:])
                new[:n_kept] = old[source[:n_kept]]
                store[name] = new


def scene_extent(cameras: list[Camera]) -> float:
    """1.1 times the largest camera distance from the mean camera center."""
    centers = np.stack([c.center for c in cameras])
    radius = float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max())
    return 1.1 * radius if radius > 0 else 1.0


def _position_lr(cfg: TrainConfig, it: int, extent: float) -> float:
    if cfg.iterations <= 1 or cfg.lr_position == 0:
        return cfg.lr_position * extent
    frac = min(it / (cfg.iterations - 1), 1.0)
    lo, hi = cfg.lr_position_final, cfg.lr_position
    return extent * math.exp(math.log(hi) * (1 - frac) + math.log(max(lo, 1e-300)) * frac)


def _dump_state(cfg: TrainConfig, it: int, bundle: LossBundle, f: GaussianField) -> dict:
    state = {
        "iteration": it,
        **{k: v for k, v in asdict(bundle).items()},
        "n_splats": len(f),
        "nonfinite_positions": int((~np.isfinite(f.positions)).sum()),
        "nonfinite_identity": int((~np.isfinite(f.identity)).sum()),
    }
    if cfg.dump_path:
        np.savez(
            cfg.dump_path, positions=f.positions, raw_opacity=f.raw_opacity, raw_scale=f.raw_scale,
            colors=f.colors, identity=f.identity, labels=f.labels, iteration=it,
        )
    return state


def train(field: GaussianField, views: list[TrainView], config: TrainConfig | None = None) -> TrainResult:
    """Optimize ``field`` against ``views``; the input field is not modified.

    Raises:
        InvalidInputError: No views or an invalid configuration.
        TrainingDiverged: The total loss or a splat parameter became non-finite.
    """
    cfg = config or TrainConfig()
    cfg.validate()
    if not views:
        raise InvalidInputError("training needs at least one view")
    f = field.copy()
    if cfg.iterations == 0:
        return TrainResult(f, [])
    extent = cfg.extent if cfg.extent is not None else scene_extent([v.camera for v in views])
    scale_threshold = cfg.scale_threshold if cfg.scale_threshold is not None else 0.01 * extent
    rng = np.random.default_rng(cfg.seed)
    adam = Adam()
    history: list[IterationLog] = []
    planes: PlaneSet | None = None
    queue: list[int] = []
    grad_accum = np.zeros(len(f))
    grad_count = np.zeros(len(f))

    for it in range(cfg.iterations):
        if not (np.isfinite(f.positions).all() and np.isfinite(f.identity).all()):
            state = _dump_state(cfg, it, LossBundle(math.nan, math.nan, math.nan, math.nan), f)
            raise TrainingDiverged(f"non-finite parameters at iteration {it}: {state}", it, state)
        if planes is None or it % cfg.plane_interval == 0:
            planes = fit_planes(f.positions, f.labels, cfg.k_neighbors, fitted_at=it)
        if not queue:
            queue = [int(i) for i in rng.permutation(len(views))]
        view = views[queue.pop()]
        cam = view.camera

        out = render(f, cam, cfg.cutoff)
        l_img, g_color = loss_img(out.color_image, view.image, cfg.lambda_dssim)
        ce2 = loss_2d(out.feature_image, view.masks, f.classifier_weight, f.classifier_bias)
        ce3 = loss_3d(f)
        l_plane, g_plane = plane_loss(f.positions, planes)
        bundle = LossBundle(
            l_img, ce2.value, ce3.value, l_plane,
            cfg.lambda_plane, cfg.lambda_2d, cfg.lambda_3d, cfg.lambda_dssim,
        )
        if not math.isfinite(bundle.total):
            state = _dump_state(cfg, it, bundle, f)
            raise TrainingDiverged(f"non-finite loss at iteration {it}: {state}", it, state)
        history.append(IterationLog(it, bundle, len(f)))

        g = render_backward(out, f, cam, g_color, grad_logits=cfg.lambda_2d * ce2.grad_logits)
        grads = {
            "positions": g.positions + cfg.lambda_plane * g_plane,
            "raw_opacity": g.raw_opacity,
            "raw_scale": g.raw_scale,
            "colors": g.colors,
            "identity": g.identity + cfg.lambda_3d * ce3.grad_input,
            "classifier_weight": cfg.lambda_2d * ce2.grad_weight + cfg.lambda_3d * ce3.grad_weight,
            "classifier_bias": cfg.lambda_2d * ce2.grad_bias + cfg.lambda_3d * ce3.grad_bias,
        }
        lrs = {
            "positions": _position_lr(cfg, it, extent),
            "raw_opacity": cfg.lr_opacity,
            "raw_scale": cfg.lr_scale,
            "colors": cfg.lr_color,
            "identity": cfg.lr_identity,
            "classifier_weight": cfg.lr_classifier,
            "classifier_bias": cfg.lr_classifier,
        }
        for name, grad in grads.items():
            adam.step(name, getattr(f, name), grad, lrs[name])
        np.clip(f.colors, 0.0, 1.0, out=f.colors)

        vis = out.projection.visible
        ndc = g.mean2d * np.array([cam.width / 2.0, cam.height / 2.0])
        grad_accum[vis] += np.linalg.norm(ndc[vis], axis=1)
        grad_count[vis] += 1

        step = it + 1
        if cfg.densify_from <= step <= cfg.densify_until and step % cfg.densify_interval == 0:
            avg = grad_accum / np.maximum(grad_count, 1)
            f, source, n_kept = densify_with_lineage(
                f, avg, cfg.grad_threshold, scale_threshold, planes,
                rng_seed=[cfg.seed, step], split_projection=cfg.split_projection,
            )
            adam.remap(PER_SPLAT, source, n_kept)
            keep = np.flatnonzero(f.opacity >= cfg.opacity_floor)
            if keep.size == 0:
                raise TrainingDiverged(f"all splats pruned at iteration {it}", it, {"n_splats": 0})
            f = f.subset(keep)
            adam.remap(PER_SPLAT, keep, n_kept=len(keep))
            log.debug("iteration %d: densified to %d splats", step, len(f))
            planes = fit_planes(f.positions, f.labels, cfg.k_neighbors, fitted_at=step)
            grad_accum = np.zeros(len(f))
            grad_count = np.zeros(len(f))

    return TrainResult(f, history)


def write_loss_log(path, history: list[IterationLog]) -> None:
    """CSV with one row per iteration; floats use ``repr`` so they read back exactly."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "l_img", "l_2d", "l_3d", "l_plane", "total", "splat_count"])
        for h in history:
            b = h.losses
            w.writerow([h.iteration, repr(b.l_img), repr(b.l_2d), repr(b.l_3d), repr(b.l_plane), repr(b.total), h.n_splats])


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        {k: (int(v) if k in ("iteration", "splat_count") else float(v)) for k, v in row.items()}
        for row in rows
    ]
