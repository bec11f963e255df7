#!/usr/bin/env python3
"""
Loss tests: silhouette and perceptual gradients, view discrimination values
and internal pressure.
"""

import os
import sys

import numpy as np

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from gradcheck import _image_loss_check, check_discrimination_losses, check_perceptual_color
from losses import (LossWeights, internal_pressure_from_vertices, multiscale_cosine, neg_iou, perceptual_color,
                    real_vs_fake_discrimination_loss, reconstruction_loss, silhouette_loss, sse,
                    view_discrimination_loss, view_discrimination_loss_exact)
from mesh_core import make_cube_template, signed_volume_batch
from networks import FeatureExtractor
from utils import ValidationError


class ScriptedDiscriminator:
    """Returns fixed logits and records the logit gradient it is handed."""

    def __init__(self, logits=None):
        self.logits = logits
        self.received = None

    def forward_logits(self, images, viewpoints=None, labels=None):
        self._shape = images.shape
        if self.logits is None:
            return np.zeros(images.shape[0])
        return np.asarray(self.logits, dtype=np.float64)

    def backward(self, grad_logits):
        self.received = np.asarray(grad_logits, dtype=np.float64)
        return np.zeros(self._shape)


def _softplus(x):
    return float(np.log1p(np.exp(x)))


def test_silhouette_gradients_match_finite_differences():
    assert _image_loss_check('multiscale_cosine', multiscale_cosine, 0, 10, 7, n_scales=3).passed
    assert _image_loss_check('neg_iou', neg_iou, 0, 10, 8).passed
    assert _image_loss_check('sse', sse, 0, 10, 9).passed


def test_multiscale_cosine_values():
    rng = np.random.default_rng(0)
    image = rng.uniform(size=(16, 16))
    loss, grad = multiscale_cosine(image, image, n_scales=5)
    assert abs(loss) < 1e-12 and np.allclose(grad, 0.0, atol=1e-12)
    empty_loss, empty_grad = multiscale_cosine(image, np.zeros((16, 16)), n_scales=5)
    assert empty_loss == 5.0 and np.all(empty_grad == 0.0)
    try:
        multiscale_cosine(image, image, n_scales=6)
        assert False, "32x pooling of a 16 px image accepted"
    except ValidationError:
        pass


def test_neg_iou_and_sse_values():
    a = np.zeros((4, 4))
    b = np.zeros((4, 4))
    a[:2] = 1.0
    b[1:3] = 1.0
    assert abs(neg_iou(a, b)[0] - (1.0 - 4.0 / 12.0)) < 1e-12
    assert neg_iou(np.zeros((4, 4)), np.zeros((4, 4)))[0] == 0.0
    assert sse(a, b)[0] == 8.0
    try:
        silhouette_loss('l1', a, b)
        assert False, "unknown silhouette loss accepted"
    except ValidationError:
        pass


def test_perceptual_color_gradient_and_zero_on_match():
    assert check_perceptual_color(0, trials=3).passed
    extractor = FeatureExtractor(seed=1, channels=(4, 4, 4, 4, 4), dtype=np.float64)
    image = np.random.default_rng(2).uniform(size=(8, 8, 3))
    losses, grad = perceptual_color(image[None], image[None], extractor)
    assert losses.shape == (1,) and abs(losses[0]) < 1e-12
    assert grad.shape == (1, 8, 8, 3)


def test_discrimination_gradients_match_finite_differences():
    for result in check_discrimination_losses(0, trials=3):
        assert result.passed, f"{result.name}: {result.max_rel_error:.3e}"


def test_uninformed_discriminator_gives_two_log_two():
    images = np.zeros((3, 1, 8, 8))
    vps = np.zeros((3, 3))
    result = view_discrimination_loss(ScriptedDiscriminator(), images, vps, images, vps)
    assert abs(result.loss - 2.0 * np.log(2.0)) < 1e-12
    rvf = real_vs_fake_discrimination_loss(ScriptedDiscriminator(), images, vps, images, vps)
    assert abs(rvf.loss - 2.0 * np.log(2.0)) < 1e-12
    assert rvf.input_grad.shape == images.shape
    exact = view_discrimination_loss_exact(ScriptedDiscriminator(), images[0], vps[0],
                                           np.zeros((4, 1, 8, 8)), np.zeros((4, 3)))
    assert abs(exact.loss - 2.0 * np.log(2.0)) < 1e-12


def test_exact_mode_matches_hand_sum():
    # |V| = 5: one observed view and four unobserved ones.
    logits = np.array([0.8, -1.2, 0.3, 2.0, -0.4])
    disc = ScriptedDiscriminator(logits)
    result = view_discrimination_loss_exact(disc, np.zeros((1, 8, 8)), np.zeros(3),
                                            np.zeros((4, 1, 8, 8)), np.zeros((4, 3)), lambda_d=0.3)
    expected = _softplus(-logits[0]) + sum(_softplus(l) for l in logits[1:]) / 4.0
    assert abs(result.loss - expected) < 1e-12
    sigmoid = 1.0 / (1.0 + np.exp(-logits))
    expected_slope = np.concatenate([[sigmoid[0] - 1.0], sigmoid[1:] / 4.0])
    assert np.allclose(disc.received, expected_slope)
    assert np.allclose(result.reversed_grad, -0.3 * result.input_grad)
    try:
        view_discrimination_loss_exact(disc, np.zeros((1, 8, 8)), np.zeros(3), np.zeros((0, 1, 8, 8)),
                                       np.zeros((0, 3)))
        assert False, "a single viewpoint accepted"
    except ValidationError:
        pass


def test_extreme_logits_stay_finite():
    disc = ScriptedDiscriminator(np.array([-80.0, 80.0]))
    images = np.zeros((1, 1, 8, 8))
    result = view_discrimination_loss(disc, images, np.zeros((1, 3)), images, np.zeros((1, 3)))
    assert np.isfinite(result.loss)
    assert abs(result.loss - 2.0 * -np.log(1e-12)) < 1e-6
    assert np.all(disc.received == 0.0)


def test_internal_pressure_inflates_cube_every_step():
    template = make_cube_template()
    faces = template.mesh.faces
    vertices = template.mesh.vertices.copy()
    volume = signed_volume_batch(vertices[None], faces)[0]
    for step in range(100):
        grad, degenerate = internal_pressure_from_vertices(vertices, faces)
        assert degenerate == 0
        vertices = vertices - 1e-4 * grad
        stepped = signed_volume_batch(vertices[None], faces)[0]
        assert stepped > volume, f"volume did not grow at step {step}: {volume} -> {stepped}"
        volume = stepped


def test_internal_pressure_skips_degenerate_faces():
    vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [2.0, 0.0, 0.0]])
    faces = np.array([[0, 1, 2], [0, 1, 3]])
    grad, degenerate = internal_pressure_from_vertices(vertices, faces)
    assert degenerate == 1
    assert np.allclose(grad[3], 0.0)
    assert np.allclose(grad[2], [0.0, 0.0, -1.0])


def test_reconstruction_loss_sums_pairs():
    rng = np.random.default_rng(4)
    weights = LossWeights(lambda_c=0.0, n_scales=2)
    pairs = []
    for _ in range(3):
        pairs.append((rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8)),
                      rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8))))
    terms = reconstruction_loss(pairs, weights)
    expected = sum(multiscale_cosine(p[3], p[1], 2)[0] for p in pairs)
    assert abs(terms.loss_s - expected) < 1e-12
    assert terms.loss_c == 0.0 and terms.total == terms.loss_s
    assert len(terms.grad_alphas) == 3 and all(np.all(g == 0.0) for g in terms.grad_colors)


def test_loss_weights_validation():
    LossWeights().validate(64)
    for bad in (LossWeights(lambda_d=-1.0), LossWeights(n_scales=0)):
        try:
            bad.validate()
            assert False, f"{bad} accepted"
        except ValidationError:
            pass
    try:
        LossWeights(n_scales=5).validate(8)
        assert False, "pyramid deeper than the image accepted"
    except ValidationError:
        pass


if __name__ == "__main__":
    from check_runner import run_tests
    sys.exit(1 if run_tests(globals(), "Losses") else 0)
