"""CPU splat rasterizer with an analytic backward pass.

Isotropic splats are projected with a pinhole camera and composited front to
back. Each visible splat touches the pixels within ``cutoff`` footprint
standard deviations of its projected center; the resulting (pixel, splat)
pairs are kept as flat arrays sorted by pixel and depth so that every
per-pixel prefix product becomes a segmented cumulative sum.

Pixel (row i, col j) has its center at image coordinates (u=j, v=i).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix

from segfield.errors import InvalidInputError
from segfield.field import IDENTITY_DIM, GaussianField

NEAR_PLANE = 0.01
ALPHA_MAX = 0.99
MIN_TRANSMITTANCE = 1e-4


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera pose ``x_cam = R x_world + t`` (+z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidInputError("image size must be positive")
        if np.linalg.norm(self.rotation @ self.rotation.T - np.eye(3)) > 1e-9:
            raise InvalidInputError("camera rotation is not orthonormal")

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, cx, cy, width, height) -> Camera:
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        return cls(fx, fy, cx, cy, width, height, rot, -rot @ eye)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def focal(self) -> float:
        return 0.5 * (self.fx + self.fy)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space origin and (unnormalized, unit camera-z) direction per pixel, shape (H, W, 3)."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        d_cam = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        d_world = d_cam @ self.rotation
        origin = np.broadcast_to(self.center, d_world.shape)
        return origin, d_world

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Camera:
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]), np.array(d["rotation"]), np.array(d["translation"]),
        )


@dataclass
class Projection:
    """Per-splat projection results; entries of culled splats are meaningless."""

    uv: np.ndarray
    depth: np.ndarray
    sigma2d: np.ndarray
    visible: np.ndarray
    cam_points: np.ndarray


def project_points(positions: np.ndarray, scales: np.ndarray, camera: Camera) -> Projection:
    pc = camera.to_camera(np.asarray(positions, dtype=np.float64))
    z = pc[:, 2]
    safe_z = np.where(z > NEAR_PLANE, z, 1.0)
    u = camera.fx * pc[:, 0] / safe_z + camera.cx
    v = camera.fy * pc[:, 1] / safe_z + camera.cy
    s2d = camera.focal * np.asarray(scales, dtype=np.float64) / safe_z
    margin = 3.0 * s2d
    visible = (
        (z > NEAR_PLANE)
        & (u >= -margin) & (u <= camera.width - 1 + margin)
        & (v >= -margin) & (v <= camera.height - 1 + margin)
    )
    return Projection(np.stack([u, v], axis=1), z, s2d, visible, pc)


def project(splat, camera: Camera):
    """Project one splat; returns ``(pixel_center, depth, sigma2d)`` or None when culled."""
    p = project_points(splat.position[None], np.array([splat.scale]), camera)
    if not p.visible[0]:
        return None
    return p.uv[0].copy(), float(p.depth[0]), float(p.sigma2d[0])


def composite(alphas, colors, features=None):
    """Front-to-back blend of one pixel's depth-sorted splats.

    Args:
        alphas: Per-splat influence before clamping to [0, 0.99].
        colors: (n, 3) or (n,) values blended like color.
        features: Optional (n, F) values blended the same way.

    Returns:
        (color, feature or None, accumulated alpha). A splat is skipped, and
        compositing stops, once it would push transmittance below 1e-4.
    """
    a = np.clip(np.asarray(alphas, dtype=np.float64), 0.0, ALPHA_MAX)
    c = np.asarray(colors, dtype=np.float64)
    f = None if features is None else np.asarray(features, dtype=np.float64)
    color = np.zeros(c.shape[1:])
    feat = None if f is None else np.zeros(f.shape[1:])
    trans = 1.0
    acc = 0.0
    for i in range(len(a)):
        nxt = trans * (1.0 - a[i])
        if nxt < MIN_TRANSMITTANCE:
            break
        w = a[i] * trans
        color = color + w * c[i]
        if feat is not None:
            feat = feat + w * f[i]
        acc += w
        trans = nxt
    return color, feat, acc


@dataclass
class _Pairs:
    """Flat (pixel, splat) contributions sorted by pixel then depth rank."""

    pix: np.ndarray
    splat: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    g: np.ndarray
    alpha: np.ndarray
    clamped: np.ndarray
    trans: np.ndarray
    weight: np.ndarray
    seg_start: np.ndarray
    seg_pix: np.ndarray
    # (pixels, splats) matrix of blend weights
    blend: csr_matrix


@dataclass
class RenderOutput:
    """Rendered images plus the cached state needed by :func:`render_backward`."""

    color_image: np.ndarray
    feature_image: np.ndarray
    class_image: np.ndarray
    alpha_image: np.ndarray
    logits: np.ndarray
    projection: Projection = field(repr=False)
    pairs: _Pairs = field(repr=False)


def _segment_offsets(values: np.ndarray, seg_start: np.ndarray, n_pairs: int) -> np.ndarray:
    """Per-pair value of ``values`` at the start of its segment."""
    seg_len = np.diff(np.append(seg_start, n_pairs))
    return np.repeat(values[seg_start], seg_len)


def _exclusive_segment_cumsum(x: np.ndarray, seg_start: np.ndarray) -> np.ndarray:
    c = np.cumsum(x)
    excl = c - x
    return excl - _segment_offsets(excl, seg_start, len(x))


def _reverse_exclusive_segment_cumsum(x: np.ndarray, seg_start: np.ndarray) -> np.ndarray:
    """Sum of ``x`` over later pairs in the same segment."""
    n = len(x)
    if n == 0:
        return x.copy()
    c = np.cumsum(x)
    seg_end = np.append(seg_start[1:], n) - 1
    seg_len = seg_end - seg_start + 1
    return np.repeat(c[seg_end], seg_len) - c


def _build_pairs(proj: Projection, opacity: np.ndarray, camera: Camera, cutoff: float) -> _Pairs:
    vis = np.flatnonzero(proj.visible)
    order = vis[np.lexsort((vis, proj.depth[vis]))]
    rank = np.empty(len(opacity), dtype=np.int64)
    rank[order] = np.arange(len(order))

    u, v = proj.uv[order, 0], proj.uv[order, 1]
    s = proj.sigma2d[order]
    r = np.where(np.isfinite(cutoff), cutoff * s, np.inf)
    w, h = camera.width, camera.height
    x0 = np.clip(np.ceil(u - r), 0, w).astype(np.int64)
    x1 = np.clip(np.floor(u + r), -1, w - 1).astype(np.int64)
    y0 = np.clip(np.ceil(v - r), 0, h).astype(np.int64)
    y1 = np.clip(np.floor(v + r), -1, h - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    count = nx * ny
    total = int(count.sum())
    owner = np.repeat(np.arange(len(order)), count)
    local = np.arange(total) - np.repeat(np.cumsum(count) - count, count)
    nx_o = nx[owner]
    px = x0[owner] + local % np.maximum(nx_o, 1)
    py = y0[owner] + local // np.maximum(nx_o, 1)
    dx = px - u[owner]
    dy = py - v[owner]
    q = (dx * dx + dy * dy) / (2.0 * s[owner] ** 2)
    keep = q <= 0.5 * cutoff * cutoff if np.isfinite(cutoff) else np.ones(total, dtype=bool)
    owner, px, py, dx, dy, q = owner[keep], px[keep], py[keep], dx[keep], dy[keep], q[keep]

    splat = order[owner]
    pix = py * w + px
    srt = np.argsort(pix * max(len(order), 1) + rank[splat])
    pix, splat, dx, dy, q = pix[srt], splat[srt], dx[srt], dy[srt], q[srt]

    g = np.exp(-q)
    raw = opacity[splat] * g
    clamped = raw > ALPHA_MAX
    a = np.minimum(raw, ALPHA_MAX)
    n = len(pix)
    seg_start = np.flatnonzero(np.r_[True, pix[1:] != pix[:-1]]) if n else np.zeros(0, dtype=np.int64)
    log_t = _exclusive_segment_cumsum(np.log1p(-a), seg_start) if n else np.zeros(0)
    trans = np.exp(log_t)
    included = trans * (1.0 - a) >= MIN_TRANSMITTANCE
    weight = np.where(included, a * trans, 0.0)
    indptr = np.searchsorted(pix, np.arange(w * h + 1))
    blend = csr_matrix((weight, splat, indptr), shape=(w * h, len(opacity)))
    seg_pix = pix[seg_start] if n else pix
    return _Pairs(pix, splat, dx, dy, g, a, clamped, trans, weight, seg_start, seg_pix, blend)


def _segment_sum(values: np.ndarray, pairs: _Pairs, n_pix: int) -> np.ndarray:
    out = np.zeros((n_pix,) + values.shape[1:])
    if len(pairs.pix):
        out[pairs.seg_pix] = np.add.reduceat(values, pairs.seg_start, axis=0)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def render(field: GaussianField, camera: Camera, cutoff: float = 3.0) -> RenderOutput:
    """Render color, identity features, class probabilities and alpha for one view.

    ``cutoff`` bounds each splat's footprint in units of its projected standard
    deviation; pass ``np.inf`` for untruncated Gaussians.
    """
    return rasterize(project_points(field.positions, field.scale, camera), field, camera, cutoff)


def rasterize(proj: Projection, field: GaussianField, camera: Camera, cutoff: float = 3.0) -> RenderOutput:
    """Composite an already computed projection; appearance comes from ``field``."""
    pairs = _build_pairs(proj, field.opacity, camera, cutoff)
    h, w = camera.height, camera.width
    n_pix = h * w
    color = (pairs.blend @ field.colors).reshape(h, w, 3)
    feat = (pairs.blend @ field.identity).reshape(h, w, IDENTITY_DIM)
    alpha = _segment_sum(pairs.weight, pairs, n_pix).reshape(h, w)
    logits = feat @ field.classifier_weight.T + field.classifier_bias
    return RenderOutput(color, feat, softmax(logits), alpha, logits, proj, pairs)


@dataclass
class SplatGradients:
    positions: np.ndarray
    raw_opacity: np.ndarray
    raw_scale: np.ndarray
    colors: np.ndarray
    identity: np.ndarray
    mean2d: np.ndarray


def render_backward(
    out: RenderOutput,
    field: GaussianField,
    camera: Camera,
    grad_color: np.ndarray | None = None,
    grad_feature: np.ndarray | None = None,
    grad_alpha: np.ndarray | None = None,
    grad_logits: np.ndarray | None = None,
) -> SplatGradients:
    """Chain image-space gradients back to splat parameters.

    ``grad_logits`` is a gradient w.r.t. the classified feature image
    (``out.logits``); it is added to ``grad_feature`` through the classifier
    weights without materializing per-pair 16-dim products. Position
    gradients flow through the projected 2D center only; the footprint
    size's dependence on depth is treated as constant.
    """
    n = len(field)
    pr = out.pairs
    h, w = camera.height, camera.width
    gc_img = np.zeros((h * w, 3)) if grad_color is None else grad_color.reshape(h * w, 3)
    gf_img = np.zeros((h * w, IDENTITY_DIM)) if grad_feature is None else grad_feature.reshape(h * w, IDENTITY_DIM)
    ga = np.zeros(len(pr.pix)) if grad_alpha is None else grad_alpha.reshape(-1)[pr.pix]

    wgt = pr.weight
    blend_t = pr.blend.T
    g_colors = blend_t @ gc_img
    g_ident = blend_t @ gf_img

    # Per-pair scalar that the loss multiplies each blend weight by.
    val = np.einsum("ij,ij->i", gc_img[pr.pix], field.colors[pr.splat])
    if grad_feature is not None:
        val += np.einsum("ij,ij->i", gf_img[pr.pix], field.identity[pr.splat])
    if grad_logits is not None:
        gl_img = grad_logits.reshape(h * w, -1)
        splat_logits = field.identity @ field.classifier_weight.T
        val += np.einsum("ij,ij->i", gl_img[pr.pix], splat_logits[pr.splat])
        g_ident += blend_t @ (gl_img @ field.classifier_weight)
    val += ga
    included = wgt > 0
    later = _reverse_exclusive_segment_cumsum(val * wgt, pr.seg_start)
    d_a = np.where(included, val * pr.trans - later / (1.0 - pr.alpha), 0.0)
    d_a = np.where(pr.clamped, 0.0, d_a)

    opac = field.opacity
    d_opacity = np.bincount(pr.splat, d_a * pr.g, minlength=n)
    d_g = d_a * opac[pr.splat]
    s = out.projection.sigma2d[pr.splat]
    d_u = np.bincount(pr.splat, d_g * pr.g * pr.dx / s**2, minlength=n)
    d_v = np.bincount(pr.splat, d_g * pr.g * pr.dy / s**2, minlength=n)
    d_s2d = np.bincount(pr.splat, d_g * pr.g * (pr.dx**2 + pr.dy**2) / s**3, minlength=n)

    proj = out.projection
    pc = proj.cam_points
    z = np.where(proj.visible, pc[:, 2], 1.0)
    d_pc = np.stack(
        [
            d_u * camera.fx / z,
            d_v * camera.fy / z,
            -(d_u * camera.fx * pc[:, 0] + d_v * camera.fy * pc[:, 1]) / z**2,
        ],
        axis=1,
    )
    return SplatGradients(
        positions=d_pc @ camera.rotation,
        raw_opacity=d_opacity * opac * (1.0 - opac),
        raw_scale=d_s2d * proj.sigma2d,
        colors=g_colors,
        identity=g_ident,
        mean2d=np.stack([d_u, d_v], axis=1),
    )
