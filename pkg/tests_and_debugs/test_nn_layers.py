#!/usr/bin/env python3
"""
NN toolkit tests: layer gradients against finite differences, gradient
reversal, spectral normalization and Adam.
"""

import os
import sys

import numpy as np

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from gradcheck import LAYER_CASES, check_embedding, check_layer_case
from nn_layers import (AUDIT_POWER_ITERATIONS, Adam, AdamState, Conv2d, Deconv2d, LayerSpec, Linear, ReLU, Tensor,
                       adam_step, apply_spectral_norm, build_layers, gradient_reversal, spectral_normalize)
from utils import ValidationError


def test_every_layer_matches_finite_differences():
    for name, build in LAYER_CASES.items():
        result = check_layer_case(name, build, seed=0, trials=10)
        assert result.passed, f"{name}: max rel error {result.max_rel_error:.3e}"
    assert check_embedding(0, trials=10).passed


class _BrokenReLU(ReLU):
    def backward(self, grad):
        return grad


def test_corrupted_backward_is_caught():
    result = check_layer_case('broken_relu', lambda rng: (_BrokenReLU(), rng.normal(size=(4, 5)) + 0.05),
                              seed=0, trials=5)
    assert not result.passed
    assert result.name == 'broken_relu'


def test_gradient_reversal_identity_and_scaling():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4))
    g = rng.normal(size=(3, 4))
    layer = gradient_reversal(0.7)
    assert np.array_equal(layer.forward(x), x)
    assert np.array_equal(layer.backward(g), -0.7 * g)
    assert np.all(gradient_reversal(0.0).backward(g) == 0.0)
    try:
        gradient_reversal(-1.0)
        assert False, "negative reversal scale accepted"
    except ValidationError:
        pass


def test_conv_output_sizes():
    rng = np.random.default_rng(0)
    conv = Conv2d(3, 4, 5, 2, rng)
    assert conv.forward(rng.normal(size=(2, 3, 16, 16))).shape == (2, 4, 8, 8)
    deconv = Deconv2d(4, 2, 4, 2, rng)
    assert deconv.forward(rng.normal(size=(2, 4, 8, 8))).shape == (2, 2, 16, 16)


def test_build_layers_shapes_and_spec_errors():
    rng = np.random.default_rng(1)
    specs = [LayerSpec('linear', (32,)), LayerSpec('relu'), LayerSpec('reshape', (2,)),
             LayerSpec('deconv', (3, 4, 2)), LayerSpec('sigmoid')]
    seq, shape = build_layers(specs, (6,), rng)
    assert shape == (3, 4, 4)
    assert seq.forward(rng.normal(size=(2, 6))).shape == (2, 3, 4, 4)
    for bad in (('conv', (3, 0, 1)), ('linear', ()), ('pool', ())):
        try:
            LayerSpec(*bad)
            assert False, f"{bad} accepted"
        except ValidationError:
            pass
    try:
        build_layers([LayerSpec('relu', spectral_norm=True)], (4,), rng)
        assert False, "spectral norm on relu accepted"
    except ValidationError:
        pass


def test_spectral_norm_audit_on_random_matrices():
    rng = np.random.default_rng(2)
    for _ in range(100):
        rows, cols = rng.integers(2, 12, size=2)
        weight = rng.normal(size=(rows, cols)) * rng.uniform(0.1, 10.0)
        u = rng.normal(size=rows)
        normalized, _ = spectral_normalize(weight, u, iterations=AUDIT_POWER_ITERATIONS)
        sigma = np.linalg.svd(normalized, compute_uv=False)[0]
        assert 0.95 <= sigma <= 1.05, sigma


def test_spectral_norm_persists_u_in_training_only():
    rng = np.random.default_rng(3)
    layer = apply_spectral_norm(Linear(6, 5, rng), rng, power_iterations=1)
    x = rng.normal(size=(2, 6))
    u0 = layer.spectral.u.data.copy()
    layer.set_training(False)
    layer.forward(x)
    assert np.array_equal(layer.spectral.u.data, u0)
    layer.set_training(True)
    for _ in range(100):
        layer.forward(x)
    assert not np.array_equal(layer.spectral.u.data, u0)
    assert [n for n, _ in layer.named_buffers()] == ['linear.sn_u']
    sigma = np.linalg.svd(layer.effective_weight(), compute_uv=False)[0]
    assert abs(sigma - 1.0) < 0.05


def test_adam_first_step_moves_by_alpha():
    p = np.array([1.0, -2.0, 3.0])
    g = np.array([0.5, -4.0, 0.0])
    state = AdamState(alpha=0.1)
    adam_step([p], [g], state)
    # With bias correction the first step is alpha * sign(g) (up to eps).
    assert np.allclose(p, [0.9, -1.9, 3.0], atol=1e-6)
    assert state.step == 1


def test_adam_matches_scalar_trace():
    w = np.array([1.0])
    state = AdamState(alpha=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    ref, m, v = 1.0, 0.0, 0.0
    for t in range(1, 11):
        adam_step([w], [2.0 * w], state)
        g = 2.0 * ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert abs(w[0] - ref) < 1e-10


def test_adam_minimizes_quadratic():
    target = np.array([0.3, -0.7])
    param = Tensor(np.zeros(2), 'w')
    opt = Adam([param], alpha=0.01, beta1=0.9)
    for _ in range(2000):
        opt.zero_grad()
        param.grad += 2.0 * (param.data - target)
        opt.step()
    assert np.allclose(param.data, target, atol=2e-2)
    names = [n for n, _ in opt.moment_tensors('adam')]
    assert names == ['adam.m.0', 'adam.v.0']


def test_adam_rejects_mismatched_shapes():
    try:
        adam_step([np.zeros(3)], [np.zeros(4)], AdamState())
        assert False, "shape mismatch accepted"
    except ValidationError:
        pass


if __name__ == "__main__":
    from check_runner import run_tests
    sys.exit(1 if run_tests(globals(), "NN layers") else 0)
