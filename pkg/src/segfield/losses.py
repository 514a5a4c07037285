"""Training losses: photometric, 2D and 3D identity cross-entropy, and their bundle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from segfield.data import LabeledMaskSet
from segfield.errors import InvalidInputError
from segfield.field import GaussianField
from segfield.render import softmax
from segfield.ssim import ssim_with_grad


@dataclass
class LossBundle:
    l_img: float
    l_2d: float
    l_3d: float
    l_plane: float
    lambda_plane: float = 10.0
    lambda_2d: float = 1.0
    lambda_3d: float = 1.0
    lambda_dssim: float = 0.2

    @property
    def total(self) -> float:
        return self.l_img + self.lambda_plane * self.l_plane + self.lambda_2d * self.l_2d + self.lambda_3d * self.l_3d


@dataclass
class ClassifierLoss:
    """Cross-entropy value with gradients for inputs and classifier parameters."""

    value: float
    grad_input: np.ndarray
    grad_weight: np.ndarray
    grad_bias: np.ndarray
    # gradient w.r.t. the logits, shaped like the input with K trailing channels
    grad_logits: np.ndarray | None = None


def cross_entropy(features: np.ndarray, targets: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> ClassifierLoss:
    """Mean of ``-log softmax(W f + b)[target]`` over rows with a positive target.

    Rows whose target is 0 or outside the class range are ignored.
    """
    f = features.reshape(-1, weight.shape[1])
    t = targets.reshape(-1)
    sel = (t > 0) & (t < weight.shape[0])
    n = int(sel.sum())
    gi = np.zeros_like(f)
    gl = np.zeros((len(f), weight.shape[0]))
    lead = features.shape[:-1]
    if n == 0:
        return ClassifierLoss(
            0.0, gi.reshape(features.shape), np.zeros_like(weight), np.zeros_like(bias), gl.reshape(lead + (-1,))
        )
    fs = f[sel]
    logits = fs @ weight.T + bias
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    ts = t[sel]
    value = float(-logp[np.arange(n), ts].mean())
    d_logits = np.exp(logp)
    d_logits[np.arange(n), ts] -= 1.0
    d_logits /= n
    gi[sel] = d_logits @ weight
    gl[sel] = d_logits
    return ClassifierLoss(
        value, gi.reshape(features.shape), d_logits.T @ fs, d_logits.sum(axis=0), gl.reshape(lead + (-1,))
    )


def loss_2d(feature_image: np.ndarray, target_masks: LabeledMaskSet, weight: np.ndarray, bias: np.ndarray) -> ClassifierLoss:
    """Pixel cross-entropy of classified rendered features against mask IDs."""
    if feature_image.shape[:2] != target_masks.shape:
        raise InvalidInputError("feature image and target masks differ in shape")
    return cross_entropy(feature_image, target_masks.ids, weight, bias)


def loss_2d_from_probs(class_image: np.ndarray, target_masks: LabeledMaskSet) -> float:
    """Pixel cross-entropy evaluated directly on class probabilities (no gradient)."""
    t = target_masks.ids.reshape(-1)
    p = class_image.reshape(-1, class_image.shape[-1])
    sel = (t > 0) & (t < p.shape[1])
    if not sel.any():
        return 0.0
    return float(-np.log(p[sel, t[sel]]).mean())


def loss_3d(field: GaussianField) -> ClassifierLoss:
    """Cross-entropy of each labeled splat's identity against its class label."""
    return cross_entropy(field.identity, field.labels, field.classifier_weight, field.classifier_bias)


def loss_img(color_image, target_image, lambda_dssim: float = 0.2) -> tuple[float, np.ndarray]:
    """``(1 - lambda) * L1 + lambda * (1 - SSIM) / 2`` and its gradient w.r.t. the render."""
    x = np.asarray(color_image, dtype=np.float64)
    y = np.asarray(target_image, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidInputError(f"image shapes differ: {x.shape} vs {y.shape}")
    diff = x - y
    l1 = float(np.abs(diff).mean())
    grad = (1.0 - lambda_dssim) * np.sign(diff) / diff.size
    if lambda_dssim == 0.0:
        return (1.0 - lambda_dssim) * l1, grad
    s, gs = ssim_with_grad(x, y)
    return (1.0 - lambda_dssim) * l1 + lambda_dssim * (1.0 - s) / 2.0, grad - 0.5 * lambda_dssim * gs


def class_probabilities(features: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return softmax(features @ weight.T + bias)
