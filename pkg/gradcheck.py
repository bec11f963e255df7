#!/usr/bin/env python3
"""
Gradient Check Suites
Brute-force oracle for the renderer's approximate backward pass and central
finite-difference checks for every exactly differentiable piece: projection,
texture sampling, network layers, silhouette/color losses and the
discrimination losses.
"""

import csv
import io
import logging
from dataclasses import astuple, dataclass, fields
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from losses import multiscale_cosine, neg_iou, perceptual_color, real_vs_fake_discrimination_loss, sse, \
    view_discrimination_loss
from mesh_core import Mesh, Viewpoint, make_cube_template
from networks import Discriminator, FeatureExtractor
from nn_layers import (BatchNorm, Concat, Conv2d, Deconv2d, Embedding, Flatten, GlobalAvgPool, LeakyReLU, Linear,
                       Module, ReLU, Reshape, Sigmoid, Tanh, Tile, apply_spectral_norm, gradient_reversal)
from renderer import Camera, RenderOutput, backward_pixels_to_projected, backward_texture, project_vertices, \
    rasterize
from utils import ValidationError, atomic_write_text

logger = logging.getLogger(__name__)

SCOPES = ('renderer', 'losses', 'nn', 'all')
FD_STEP = 1e-6
REL_TOLERANCE = 1e-4
ORACLE_TOLERANCE = 1e-9
# Relative errors are taken against max(|analytic|, |numeric|, MAGNITUDE_FLOOR).
MAGNITUDE_FLOOR = 1e-2
COORDS_PER_TENSOR = 8
DEFAULT_TRIALS = 100
DEFAULT_SCENES = 200


@dataclass
class CheckResult:
    scope: str
    name: str
    trials: int
    max_abs_error: float
    max_rel_error: float
    tolerance: float
    passed: bool


class _ErrorTracker:
    def __init__(self):
        self.max_abs = 0.0
        self.max_rel = 0.0

    def add(self, analytic: float, numeric: float):
        diff = abs(float(analytic) - float(numeric))
        self.max_abs = max(self.max_abs, diff)
        self.max_rel = max(self.max_rel, diff / max(abs(analytic), abs(numeric), MAGNITUDE_FLOOR))


def central_difference(f: Callable[[], float], array: np.ndarray, index: Tuple[int, ...],
                       h: float = FD_STEP) -> float:
    """(f(x + h e_i) - f(x - h e_i)) / 2h, perturbing `array` in place and restoring it."""
    original = array[index]
    array[index] = original + h
    plus = f()
    array[index] = original - h
    minus = f()
    array[index] = original
    return (plus - minus) / (2.0 * h)


def _sample_indices(rng: np.random.Generator, shape: Tuple[int, ...], count: int = COORDS_PER_TENSOR):
    size = int(np.prod(shape))
    picks = rng.choice(size, size=min(count, size), replace=False)
    return [np.unravel_index(int(p), shape) for p in picks]


def _away_from_zero(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    x = rng.normal(size=shape)
    return x + np.sign(x) * 0.1


# -- renderer -------------------------------------------------------------------------

def brute_force_pixels_to_projected(out: RenderOutput, grad_color: np.ndarray,
                                    grad_alpha: np.ndarray) -> np.ndarray:
    """Pixel-by-pixel application of the three-case rule, written independently of the vectorized pass."""
    size = out.size
    rgba = out.rgba()
    g_rgba = np.concatenate([np.asarray(grad_color, dtype=np.float64),
                             np.asarray(grad_alpha, dtype=np.float64)[..., None]], axis=-1)
    outside_pixel = np.append(out.background, 0.0)
    outside_grad = np.zeros(4)

    def pixel(y, x):
        return rgba[y, x] if 0 <= y < size and 0 <= x < size else outside_pixel

    def upstream(y, x):
        return g_rgba[y, x] if 0 <= y < size and 0 <= x < size else outside_grad

    grad = np.zeros((out.n_vertices, 2))
    for y in range(size):
        for x in range(size):
            face = out.face_id[y, x]
            if face < 0:
                continue
            for column, (dy, dx) in enumerate(((0, 1), (1, 0))):
                p_prev, p_here, p_next = pixel(y - dy, x - dx), pixel(y, x), pixel(y + dy, x + dx)
                g_prev, g_here, g_next = upstream(y - dy, x - dx), upstream(y, x), upstream(y + dy, x + dx)
                g_right = float(np.dot(g_here, p_prev - p_here) + np.dot(g_next, p_here - p_next))
                g_left = float(np.dot(g_here, p_here - p_next) + np.dot(g_prev, p_prev - p_here))
                d_right, d_left = -g_right, g_left
                if max(d_right, d_left) < 0.0:
                    value = 0.0
                elif d_right < d_left:
                    value = g_left
                else:
                    value = g_right
                for corner in range(3):
                    grad[out.faces[face][corner], column] += out.bary[y, x, corner] * value
    return grad


def random_scene(rng: np.random.Generator, max_faces: int = 6) -> Tuple[Mesh, Camera]:
    """A few random triangles near the origin seen from a random viewpoint, 8 to 16 px."""
    n_faces = int(rng.integers(1, max_faces + 1))
    vertices = rng.uniform(-0.8, 0.8, size=(3 * n_faces, 3))
    faces = np.arange(3 * n_faces).reshape(n_faces, 3)
    colors = rng.uniform(0.0, 1.0, size=(n_faces, 3))
    mesh = Mesh(vertices, faces, face_colors=colors, name='random_scene')
    viewpoint = Viewpoint(rng.uniform(0, 360), rng.uniform(-60, 60), rng.uniform(2.5, 4.0))
    camera = Camera(viewpoint, fov=40.0, image_size=int(rng.integers(8, 17)))
    return mesh, camera


def check_renderer_oracle(seed: int, scenes: int = DEFAULT_SCENES) -> CheckResult:
    tracker = _ErrorTracker()
    for trial in range(scenes):
        rng = np.random.default_rng([seed, trial, 1])
        mesh, camera = random_scene(rng)
        out = rasterize(mesh, camera, background=rng.uniform(0, 1, size=3))
        size = camera.image_size
        grad_color = rng.normal(size=(size, size, 3))
        grad_alpha = rng.normal(size=(size, size))
        fast = backward_pixels_to_projected(out, grad_color, grad_alpha)
        slow = brute_force_pixels_to_projected(out, grad_color, grad_alpha)
        diff = float(np.max(np.abs(fast - slow))) if fast.size else 0.0
        tracker.max_abs = max(tracker.max_abs, diff)
    return CheckResult('renderer', 'pixels_to_projected_oracle', scenes, tracker.max_abs, tracker.max_abs,
                       ORACLE_TOLERANCE, tracker.max_abs < ORACLE_TOLERANCE)


def check_projection_jacobian(seed: int, trials: int = DEFAULT_TRIALS) -> CheckResult:
    tracker = _ErrorTracker()
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial, 2])
        camera = Camera(Viewpoint(rng.uniform(0, 360), rng.uniform(-80, 80), rng.uniform(2.0, 5.0)),
                        fov=rng.uniform(20, 80), image_size=64)
        vertices = rng.uniform(-0.5, 0.5, size=(4, 3))
        jacobian = project_vertices(vertices, camera).jacobian
        for v in range(len(vertices)):
            for axis in range(3):
                for out_axis in range(2):
                    numeric = central_difference(lambda: float(project_vertices(vertices, camera).xy[v, out_axis]),
                                                 vertices, (v, axis))
                    tracker.add(jacobian[v, out_axis, axis], numeric)
    return CheckResult('renderer', 'projection_jacobian', trials, tracker.max_abs, tracker.max_rel, REL_TOLERANCE,
                       tracker.max_rel < REL_TOLERANCE)


def check_texture_adjoint(seed: int, trials: int = DEFAULT_TRIALS) -> CheckResult:
    tracker = _ErrorTracker()
    template = make_cube_template(2)
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial, 3])
        textures = rng.uniform(0.1, 0.9, size=(6, 4, 4, 3))
        camera = Camera(Viewpoint(rng.uniform(0, 360), rng.uniform(-40, 40), 2.5), fov=40.0, image_size=8)
        weights = rng.normal(size=(8, 8, 3))

        def loss() -> float:
            mesh = template.instantiate(template.mesh.vertices, textures)
            return float(np.sum(weights * rasterize(mesh, camera).color))

        mesh = template.instantiate(template.mesh.vertices, textures)
        analytic = backward_texture(rasterize(mesh, camera), weights, mesh)
        for index in _sample_indices(rng, textures.shape):
            tracker.add(analytic[index], central_difference(loss, textures, index))
    return CheckResult('renderer', 'texture_adjoint', trials, tracker.max_abs, tracker.max_rel, REL_TOLERANCE,
                       tracker.max_rel < REL_TOLERANCE)


# -- nn layers ------------------------------------------------------------------------

def _spectral(layer, rng):
    apply_spectral_norm(layer, rng, power_iterations=1)
    # Evaluation mode keeps u fixed between the finite-difference evaluations.
    layer.set_training(False)
    return layer


def _concat_case(rng):
    layer = Concat(2)
    layer.extra = rng.normal(size=(2, 2, 3, 3))
    return layer, rng.normal(size=(2, 3, 3, 3))


LAYER_CASES: Dict[str, Callable[[np.random.Generator], Tuple[Module, np.ndarray]]] = {
    'linear': lambda rng: (Linear(5, 4, rng), rng.normal(size=(3, 5))),
    'linear_spectral': lambda rng: (_spectral(Linear(5, 4, rng), rng), rng.normal(size=(3, 5))),
    'conv': lambda rng: (Conv2d(2, 3, 3, 2, rng), rng.normal(size=(2, 2, 5, 5))),
    'conv_spectral': lambda rng: (_spectral(Conv2d(2, 3, 3, 1, rng), rng), rng.normal(size=(2, 2, 4, 4))),
    'deconv': lambda rng: (Deconv2d(2, 3, 4, 2, rng), rng.normal(size=(2, 2, 3, 3))),
    'deconv_stride1': lambda rng: (Deconv2d(3, 2, 3, 1, rng), rng.normal(size=(2, 3, 3, 3))),
    'batchnorm_2d': lambda rng: (BatchNorm(3), rng.normal(size=(4, 3))),
    'batchnorm_4d': lambda rng: (BatchNorm(2), rng.normal(size=(3, 2, 3, 3))),
    'relu': lambda rng: (ReLU(), _away_from_zero(rng, (3, 4))),
    'leaky_relu': lambda rng: (LeakyReLU(0.2), _away_from_zero(rng, (3, 4))),
    'sigmoid': lambda rng: (Sigmoid(), rng.normal(size=(3, 4))),
    'tanh': lambda rng: (Tanh(), rng.normal(size=(3, 4))),
    'reshape': lambda rng: (Reshape(2), rng.normal(size=(2, 8))),
    'flatten': lambda rng: (Flatten(), rng.normal(size=(2, 2, 3, 3))),
    'tile': lambda rng: (Tile(3), rng.normal(size=(2, 4))),
    'concat': _concat_case,
    'avgpool': lambda rng: (GlobalAvgPool(), rng.normal(size=(2, 3, 4, 4))),
}


def check_layer_case(name: str, build: Callable[[np.random.Generator], Tuple[Module, np.ndarray]], seed: int,
                     trials: int = DEFAULT_TRIALS) -> CheckResult:
    """Input and parameter gradients of sum(R * layer(x)) against central differences."""
    tracker = _ErrorTracker()
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial, 4])
        layer, x = build(rng)
        x = np.asarray(x, dtype=np.float64)
        weights = rng.normal(size=layer.forward(x).shape)

        def loss() -> float:
            return float(np.sum(weights * layer.forward(x)))

        layer.zero_grad()
        layer.forward(x)
        grad_x = layer.backward(weights)
        analytic_params = [(t, t.grad.copy()) for _, t in layer.named_parameters()]
        for index in _sample_indices(rng, x.shape):
            tracker.add(grad_x[index], central_difference(loss, x, index))
        for tensor, grad in analytic_params:
            for index in _sample_indices(rng, tensor.shape):
                tracker.add(grad[index], central_difference(loss, tensor.data, index))
    return CheckResult('nn', name, trials, tracker.max_abs, tracker.max_rel, REL_TOLERANCE,
                       tracker.max_rel < REL_TOLERANCE)


def check_embedding(seed: int, trials: int = DEFAULT_TRIALS) -> CheckResult:
    tracker = _ErrorTracker()
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial, 5])
        layer = Embedding(4, 3, rng)
        labels = rng.integers(0, 4, size=5)
        weights = rng.normal(size=(5, 3))
        layer.zero_grad()
        layer.forward(labels)
        layer.backward(weights)
        for index in _sample_indices(rng, layer.weight.shape):
            numeric = central_difference(lambda: float(np.sum(weights * layer.forward(labels))),
                                         layer.weight.data, index)
            tracker.add(layer.weight.grad[index], numeric)
    return CheckResult('nn', 'embedding', trials, tracker.max_abs, tracker.max_rel, REL_TOLERANCE,
                       tracker.max_rel < REL_TOLERANCE)


def check_gradient_reversal(seed: int, trials: int = DEFAULT_TRIALS) -> CheckResult:
    """Exact check: forward is the identity, backward is -scale * g."""
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial, 6])
        scale = float(rng.uniform(0.0, 3.0))
        layer = gradient_reversal(scale)
        x = rng.normal(size=(3, 4))
        g = rng.normal(size=(3, 4))
        worst = max(worst, float(np.max(np.abs(layer.forward(x) - x))),
                    float(np.max(np.abs(layer.backward(g) - (-scale * g)))))
    return CheckResult('nn', 'gradient_reversal', trials, worst, worst, 0.0, worst == 0.0)


# -- losses ---------------------------------------------------------------------------

def _image_loss_check(name: str, fn: Callable, seed: int, trials: int, salt: int, size: int = 16,
                      **kwargs) -> CheckResult:
    tracker = _ErrorTracker()
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial, salt])
        target = rng.uniform(0.0, 1.0, size=(size, size))
        pred = rng.uniform(0.05, 0.95, size=(size, size))
        _, grad = fn(target, pred, **kwargs)
        for index in _sample_indices(rng, pred.shape):
            tracker.add(grad[index], central_difference(lambda: fn(target, pred, **kwargs)[0], pred, index))
    return CheckResult('losses', name, trials, tracker.max_abs, tracker.max_rel, REL_TOLERANCE,
                       tracker.max_rel < REL_TOLERANCE)


def check_perceptual_color(seed: int, trials: int = DEFAULT_TRIALS) -> CheckResult:
    tracker = _ErrorTracker()
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial, 10])
        extractor = FeatureExtractor(seed=int(rng.integers(1 << 31)), channels=(4, 4, 4, 4, 4),
                                     dtype=np.float64)
        target = rng.uniform(0.0, 1.0, size=(2, 8, 8, 3))
        pred = rng.uniform(0.0, 1.0, size=(2, 8, 8, 3))
        _, grad = perceptual_color(target, pred, extractor)
        for index in _sample_indices(rng, pred.shape):
            numeric = central_difference(lambda: float(perceptual_color(target, pred, extractor)[0].sum()),
                                         pred, index)
            tracker.add(grad[index], numeric)
    return CheckResult('losses', 'perceptual_color', trials, tracker.max_abs, tracker.max_rel, REL_TOLERANCE,
                       tracker.max_rel < REL_TOLERANCE)


def _small_discriminator(rng: np.random.Generator, conditioning: str) -> Discriminator:
    disc = Discriminator(16, 1, rng, conditioning=conditioning, n_classes=3, scale=0.125, dtype=np.float64)
    disc.set_training(False)
    return disc


def check_discrimination_losses(seed: int, trials: int = DEFAULT_TRIALS) -> List[CheckResult]:
    results = []
    for name, conditioning, real_vs_fake in (('view_discrimination', 'viewpoint', False),
                                             ('view_discrimination_class', 'viewpoint+class', False),
                                             ('real_vs_fake_discrimination', 'viewpoint', True)):
        tracker = _ErrorTracker()
        for trial in range(trials):
            rng = np.random.default_rng([seed, trial, 11])
            disc = _small_discriminator(rng, conditioning)
            first = rng.uniform(0, 1, size=(2, 1, 16, 16))
            second = rng.uniform(0, 1, size=(2, 1, 16, 16))
            vp_a = rng.uniform(-1, 1, size=(2, 3))
            vp_b = rng.uniform(-1, 1, size=(2, 3))
            labels = rng.integers(0, 3, size=2) if conditioning == 'viewpoint+class' else None
            loss_fn = real_vs_fake_discrimination_loss if real_vs_fake else view_discrimination_loss

            def run():
                return loss_fn(disc, first, vp_a, second, vp_b, labels)

            # Both losses put the gradient of `first` in the leading rows.
            grad = run().input_grad[:len(first)]
            for index in _sample_indices(rng, first.shape):
                tracker.add(grad[index], central_difference(lambda: run().loss, first, index))
        results.append(CheckResult('losses', name, trials, tracker.max_abs, tracker.max_rel, REL_TOLERANCE,
                                   tracker.max_rel < REL_TOLERANCE))
    return results


# -- driver ---------------------------------------------------------------------------

def run_gradcheck(scope: str, seed: int, trials: int = DEFAULT_TRIALS,
                  scenes: int = DEFAULT_SCENES) -> List[CheckResult]:
    """Every check of `scope` ('renderer', 'losses', 'nn' or 'all'), in a fixed order."""
    if scope not in SCOPES:
        raise ValidationError(f"Unknown gradcheck scope '{scope}' (expected one of {SCOPES})")
    if trials < 1 or scenes < 1:
        raise ValidationError("gradcheck needs at least one trial and one scene")
    results: List[CheckResult] = []
    if scope in ('renderer', 'all'):
        results += [check_renderer_oracle(seed, scenes), check_projection_jacobian(seed, trials),
                    check_texture_adjoint(seed, trials)]
    if scope in ('nn', 'all'):
        results += [check_layer_case(name, build, seed, trials) for name, build in LAYER_CASES.items()]
        results += [check_embedding(seed, trials), check_gradient_reversal(seed, trials)]
    if scope in ('losses', 'all'):
        results += [_image_loss_check('multiscale_cosine', multiscale_cosine, seed, trials, 7, n_scales=3),
                    _image_loss_check('neg_iou', neg_iou, seed, trials, 8),
                    _image_loss_check('sse', sse, seed, trials, 9),
                    check_perceptual_color(seed, trials)]
        results += check_discrimination_losses(seed, trials)

    for result in results:
        status = "✅" if result.passed else "❌"
        logger.info(f"{status} {result.scope}/{result.name}: max abs {result.max_abs_error:.3e}, "
                    f"max rel {result.max_rel_error:.3e} (tol {result.tolerance:g}, {result.trials} trials)")
    return results


def format_report(results: Sequence[CheckResult]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow([f.name for f in fields(CheckResult)])
    for result in results:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in astuple(result)])
    return buffer.getvalue()


def write_report(results: Sequence[CheckResult], path: str):
    atomic_write_text(path, format_report(results))


def failed_checks(results: Sequence[CheckResult]) -> List[str]:
    return [f"{r.scope}/{r.name}" for r in results if not r.passed]
