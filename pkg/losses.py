#!/usr/bin/env python3
"""
Training Losses
Silhouette losses (multi-scale cosine, negative IoU, squared error), the
feature-normalized perceptual color loss, internal pressure gradients and the
view discrimination losses. Every loss returns its analytic gradient with
respect to the predicted image (or, for discrimination, the discriminator input).
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from mesh_core import EPS_AREA, Mesh
from networks import Discriminator, FeatureExtractor
from utils import ValidationError

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
SILHOUETTE_LOSSES = ('multiscale_cosine', 'neg_iou', 'sse')
_MAX_NEG_LOG = -np.log(PROB_FLOOR)


@dataclass
class LossWeights:
    """Loss weighting: total = L_s + lambda_c L_c + L_d (through reversal) + lambda_p L_p."""
    lambda_c: float = 0.5
    lambda_d: float = 0.2
    lambda_p: float = 1e-4
    n_scales: int = 5

    def validate(self, image_size: Optional[int] = None):
        for name in ('lambda_c', 'lambda_d', 'lambda_p'):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValidationError(f"Loss weight {name} must be >= 0, got {value}")
        if self.n_scales < 1:
            raise ValidationError(f"n_scales must be >= 1, got {self.n_scales}")
        if image_size is not None and 2 ** (self.n_scales - 1) > image_size:
            raise ValidationError(f"n_scales={self.n_scales} needs images of at least "
                                  f"{2 ** (self.n_scales - 1)} px, got {image_size}")


def _check_pair(target: np.ndarray, pred: np.ndarray, what: str):
    if target.shape != pred.shape:
        raise ValidationError(f"{what}: target {target.shape} and prediction {pred.shape} differ in shape")


def _pool2(x: np.ndarray) -> np.ndarray:
    h2, w2 = x.shape[0] // 2, x.shape[1] // 2
    return x[:2 * h2, :2 * w2].reshape(h2, 2, w2, 2).mean(axis=(1, 3))


def _pool2_backward(grad: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    up = np.repeat(np.repeat(grad, 2, axis=0), 2, axis=1) / 4.0
    out = np.zeros(shape, dtype=grad.dtype)
    out[:up.shape[0], :up.shape[1]] = up
    return out


def multiscale_cosine(target: np.ndarray, pred: np.ndarray, n_scales: int = 5) -> Tuple[float, np.ndarray]:
    """
    Sum over scales of 1 - cos(target level, prediction level).

    Level i is the silhouette 2x2-average-pooled i - 1 times. A level where
    either image has zero norm contributes 1 with zero gradient.
    """
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    _check_pair(target, pred, 'multiscale_cosine')
    if n_scales < 1 or 2 ** (n_scales - 1) > min(target.shape):
        raise ValidationError(f"n_scales={n_scales} does not fit a {target.shape} silhouette")

    a_levels, b_levels = [target], [pred]
    for _ in range(n_scales - 1):
        a_levels.append(_pool2(a_levels[-1]))
        b_levels.append(_pool2(b_levels[-1]))

    loss = 0.0
    level_grads = []
    for a, b in zip(a_levels, b_levels):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            loss += 1.0
            level_grads.append(np.zeros_like(b))
            continue
        cos = float(np.sum(a * b)) / (na * nb)
        loss += 1.0 - cos
        level_grads.append(-(a / (na * nb) - cos * b / nb ** 2))

    grad = level_grads[-1]
    for level in range(n_scales - 2, -1, -1):
        grad = level_grads[level] + _pool2_backward(grad, b_levels[level].shape)
    return loss, grad


def neg_iou(target: np.ndarray, pred: np.ndarray) -> Tuple[float, np.ndarray]:
    """1 - |x * y|_1 / |x + y - x * y|_1; both images empty gives 0."""
    x = np.asarray(target, dtype=np.float64)
    y = np.asarray(pred, dtype=np.float64)
    _check_pair(x, y, 'neg_iou')
    intersection = float(np.sum(x * y))
    union = float(np.sum(x + y - x * y))
    if union <= 0.0:
        return 0.0, np.zeros_like(y)
    loss = 1.0 - intersection / union
    grad = -(x * union - intersection * (1.0 - x)) / union ** 2
    return loss, grad


def sse(target: np.ndarray, pred: np.ndarray) -> Tuple[float, np.ndarray]:
    x = np.asarray(target, dtype=np.float64)
    y = np.asarray(pred, dtype=np.float64)
    _check_pair(x, y, 'sse')
    diff = y - x
    return float(np.sum(diff * diff)), 2.0 * diff


def silhouette_loss(kind: str, target: np.ndarray, pred: np.ndarray,
                    n_scales: int = 5) -> Tuple[float, np.ndarray]:
    if kind == 'multiscale_cosine':
        return multiscale_cosine(target, pred, n_scales)
    if kind == 'neg_iou':
        return neg_iou(target, pred)
    if kind == 'sse':
        return sse(target, pred)
    raise ValidationError(f"Unknown silhouette loss '{kind}' (expected one of {SILHOUETTE_LOSSES})")


def perceptual_color(target: np.ndarray, pred: np.ndarray,
                     extractor: FeatureExtractor) -> Tuple[np.ndarray, np.ndarray]:
    """
    Feature-normalized perceptual loss per image.

    Args:
        target: (N, H, W, 3) or (H, W, 3) ground-truth colors
        pred: same shape, predicted colors
        extractor: frozen feature stack

    Returns:
        (per-image losses (N,), gradient w.r.t. pred, same shape as pred)
    """
    single = np.ndim(pred) == 3
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    _check_pair(target, pred, 'perceptual_color')
    if single:
        target, pred = target[None], pred[None]
    dtype = extractor.stages[0].layers[0].weight.data.dtype

    target_maps = extractor.features(target.transpose(0, 3, 1, 2).astype(dtype))
    target_maps = [f.astype(np.float64) for f in target_maps]
    pred_maps = extractor.features(pred.transpose(0, 3, 1, 2).astype(dtype))

    n = pred.shape[0]
    losses = np.zeros(n)
    tap_grads = []
    for f_t, f_p in zip(target_maps, pred_maps):
        f_p = f_p.astype(np.float64)
        d = f_p[0].size
        flat_t = f_t.reshape(n, -1)
        flat_p = f_p.reshape(n, -1)
        norm_t = np.linalg.norm(flat_t, axis=1)
        norm_p = np.linalg.norm(flat_p, axis=1)
        ok = (norm_t > 0) & (norm_p > 0)
        a = flat_p / np.where(ok, norm_p, 1.0)[:, None]
        b = flat_t / np.where(ok, norm_t, 1.0)[:, None]
        diff = a - b
        losses += np.where(ok, np.sum(diff * diff, axis=1) / d, 0.0)
        proj = diff - a * np.sum(a * diff, axis=1, keepdims=True)
        g = np.where(ok[:, None], (2.0 / d) * proj / np.where(ok, norm_p, 1.0)[:, None], 0.0)
        tap_grads.append(g.reshape(f_p.shape).astype(dtype))

    grad = extractor.backward_taps(tap_grads).astype(np.float64).transpose(0, 2, 3, 1)
    if single:
        return losses, grad[0]
    return losses, grad


def internal_pressure_from_vertices(vertices: np.ndarray, faces: np.ndarray) -> Tuple[np.ndarray, int]:
    """
    Gradient-only inflation term: every vertex of a face accumulates -n.

    Returns:
        (per-vertex gradient (V, 3), number of degenerate faces skipped)
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    tri = vertices[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(cross, axis=1)
    degenerate = 0.5 * norm <= EPS_AREA
    normals = np.where(degenerate[:, None], 0.0, cross / np.where(degenerate, 1.0, norm)[:, None])
    grad = np.zeros_like(vertices)
    for corner in range(3):
        np.add.at(grad, faces[:, corner], -normals)
    n_degenerate = int(degenerate.sum())
    if n_degenerate:
        logger.debug(f"Internal pressure skipped {n_degenerate} degenerate faces")
    return grad, n_degenerate


def internal_pressure_grads(mesh: Mesh) -> Tuple[np.ndarray, int]:
    return internal_pressure_from_vertices(mesh.vertices, mesh.faces)


@dataclass
class ReconstructionTerms:
    """Summed view losses over a list of (render, target) pairs plus per-pair image gradients."""
    loss_s: float = 0.0
    loss_c: float = 0.0
    total: float = 0.0
    grad_colors: List[np.ndarray] = field(default_factory=list)
    grad_alphas: List[np.ndarray] = field(default_factory=list)


def reconstruction_loss(pairs: Sequence[Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]],
                        weights: LossWeights, kind: str = 'multiscale_cosine',
                        extractor: Optional[FeatureExtractor] = None) -> ReconstructionTerms:
    """
    Sum of L_s + lambda_c L_c over view pairs.

    Args:
        pairs: (pred color (H, W, 3), pred alpha (H, W), target color, target alpha) tuples
        weights: lambda_c and the silhouette pyramid depth are read from here
        kind: silhouette loss selector
        extractor: feature stack; without one (or with lambda_c = 0) color is not compared
    """
    terms = ReconstructionTerms()
    use_color = extractor is not None and weights.lambda_c > 0
    for pred_color, pred_alpha, target_color, target_alpha in pairs:
        loss_s, grad_alpha = silhouette_loss(kind, target_alpha, pred_alpha, weights.n_scales)
        terms.loss_s += loss_s
        terms.grad_alphas.append(grad_alpha)
        terms.grad_colors.append(np.zeros(np.shape(pred_color)))

    if use_color and pairs:
        preds = np.stack([p[0] for p in pairs])
        targets = np.stack([p[2] for p in pairs])
        losses, grads = perceptual_color(targets, preds, extractor)
        terms.loss_c = float(losses.sum())
        terms.grad_colors = [weights.lambda_c * g for g in grads]

    terms.total = terms.loss_s + (weights.lambda_c * terms.loss_c if use_color else 0.0)
    return terms


def _neg_log_sigmoid(logits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(-log max(sigmoid(l), floor), d/dl) with zero slope where the floor is active."""
    value = np.logaddexp(0.0, -logits)
    clamped = value > _MAX_NEG_LOG
    slope = np.where(clamped, 0.0, -0.5 * (1.0 - np.tanh(0.5 * logits)))
    return np.minimum(value, _MAX_NEG_LOG), slope


def _neg_log_one_minus_sigmoid(logits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    value = np.logaddexp(0.0, logits)
    clamped = value > _MAX_NEG_LOG
    slope = np.where(clamped, 0.0, 0.5 * (1.0 + np.tanh(0.5 * logits)))
    return np.minimum(value, _MAX_NEG_LOG), slope


@dataclass
class DiscriminationResult:
    """
    loss: mean over objects of the cross-entropy terms (discriminator-side value)
    input_grad: dL/d(discriminator input) for the reconstructor's renders
    reversed_grad: what the reconstructor receives through gradient reversal
    """
    loss: float
    logits: np.ndarray
    input_grad: np.ndarray
    reversed_grad: np.ndarray


def _discriminate(discriminator: Discriminator, images, viewpoints, labels, positive_count: int):
    logits = discriminator.forward_logits(images, viewpoints, labels).astype(np.float64)
    pos_val, pos_slope = _neg_log_sigmoid(logits[:positive_count])
    neg_val, neg_slope = _neg_log_one_minus_sigmoid(logits[positive_count:])
    return logits, pos_val, neg_val, np.concatenate([pos_slope, neg_slope])


def view_discrimination_loss(discriminator: Discriminator, render_obs: np.ndarray, vp_obs: np.ndarray,
                             render_unobs: np.ndarray, vp_unobs: np.ndarray,
                             labels: Optional[np.ndarray] = None, lambda_d: float = 1.0) -> DiscriminationResult:
    """
    -log Dis(obs view, v_obs) - log(1 - Dis(unobserved view, v_u)), averaged over objects.

    Observed and unobserved renders go through the discriminator as one
    batch. Discriminator parameter gradients are accumulated (+dL_d); the
    returned `reversed_grad` is -lambda_d * dL_d for both renders.
    """
    n = render_obs.shape[0]
    if render_unobs.shape != render_obs.shape:
        raise ValidationError(f"Observed {render_obs.shape} and unobserved {render_unobs.shape} renders differ")
    images = np.concatenate([render_obs, render_unobs], axis=0)
    viewpoints = np.concatenate([vp_obs, vp_unobs], axis=0)
    both_labels = None if labels is None else np.concatenate([labels, labels])
    logits, pos_val, neg_val, slope = _discriminate(discriminator, images, viewpoints, both_labels, n)
    loss = float(np.sum(pos_val) + np.sum(neg_val)) / n
    input_grad = discriminator.backward(slope / n).astype(np.float64)
    return DiscriminationResult(loss, logits, input_grad, -lambda_d * input_grad)


def view_discrimination_loss_exact(discriminator: Discriminator, render_obs: np.ndarray, vp_obs: np.ndarray,
                                   renders_unobs: np.ndarray, vps_unobs: np.ndarray,
                                   label: Optional[int] = None, n_viewpoints: Optional[int] = None,
                                   lambda_d: float = 1.0) -> DiscriminationResult:
    """
    Full average over the unobserved viewpoints for one object.

    -log Dis(obs) - (1 / (|V| - 1)) * sum over v != v_obs of log(1 - Dis(render at v)).

    Args:
        render_obs: (C, S, S) observed-view render
        vp_obs: (3,) encoded observed viewpoint
        renders_unobs: (K, C, S, S) renders at every other viewpoint of V
        vps_unobs: (K, 3) their encoded viewpoints
        n_viewpoints: |V|; defaults to K + 1
    """
    k = renders_unobs.shape[0]
    n_viewpoints = k + 1 if n_viewpoints is None else n_viewpoints
    if n_viewpoints < 2 or k < 1:
        raise ValidationError("Exact view discrimination needs at least two viewpoints")
    images = np.concatenate([render_obs[None], renders_unobs], axis=0)
    viewpoints = np.concatenate([np.asarray(vp_obs).reshape(1, -1), vps_unobs], axis=0)
    labels = None if label is None else np.full(k + 1, label, dtype=np.int64)
    logits, pos_val, neg_val, slope = _discriminate(discriminator, images, viewpoints, labels, 1)
    weight = np.concatenate([[1.0], np.full(k, 1.0 / (n_viewpoints - 1))])
    loss = float(pos_val[0] + np.sum(neg_val) / (n_viewpoints - 1))
    input_grad = discriminator.backward(slope * weight).astype(np.float64)
    return DiscriminationResult(loss, logits, input_grad, -lambda_d * input_grad)


def real_vs_fake_discrimination_loss(discriminator: Discriminator, render: np.ndarray, vp_render: np.ndarray,
                                     real: np.ndarray, vp_real: np.ndarray,
                                     labels: Optional[np.ndarray] = None,
                                     lambda_d: float = 1.0) -> DiscriminationResult:
    """
    -log Dis(dataset view) - log(1 - Dis(reconstructed view)), averaged over objects.

    Only the reconstructed renders carry a gradient back to the reconstructor;
    `input_grad` / `reversed_grad` cover those renders alone.
    """
    n = render.shape[0]
    if real.shape != render.shape:
        raise ValidationError(f"Real views {real.shape} and renders {render.shape} differ")
    images = np.concatenate([real, render], axis=0)
    viewpoints = np.concatenate([vp_real, vp_render], axis=0)
    both_labels = None if labels is None else np.concatenate([labels, labels])
    logits, pos_val, neg_val, slope = _discriminate(discriminator, images, viewpoints, both_labels, n)
    loss = float(np.sum(pos_val) + np.sum(neg_val)) / n
    input_grad = discriminator.backward(slope / n).astype(np.float64)[n:]
    return DiscriminationResult(loss, logits, input_grad, -lambda_d * input_grad)
