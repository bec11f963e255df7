#!/usr/bin/env python3
"""
Network builder tests: encoder, shape/texture decoders, discriminator variants
and the frozen feature extractor.
"""

import os
import sys

import numpy as np

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from gradcheck import central_difference
from mesh_core import Viewpoint, make_cube_template
from networks import (LATENT_DIM, Discriminator, Encoder, FeatureExtractor, ShapeDecoder, TextureDecoder,
                      encode_viewpoints)
from utils import ValidationError


def test_encoder_latent_shape():
    rng = np.random.default_rng(0)
    encoder = Encoder(32, rng, scale=0.125)
    z = encoder.forward(rng.uniform(size=(2, 3, 32, 32)).astype(np.float32))
    assert z.shape == (2, LATENT_DIM)
    assert encoder.backward(np.ones_like(z)).shape == (2, 3, 32, 32)


def test_shape_decoder_stays_near_template():
    rng = np.random.default_rng(1)
    decoder = ShapeDecoder(rng, scale=0.0625)
    vertices = decoder.forward(rng.normal(size=(2, LATENT_DIM)).astype(np.float32))
    template = make_cube_template()
    assert vertices.shape == (2, 1352, 3)
    assert np.all(np.abs(vertices - template.mesh.vertices) <= 0.5 + 1e-6)


def test_shape_decoder_gradient():
    rng = np.random.default_rng(2)
    decoder = ShapeDecoder(rng, scale=0.03125, dtype=np.float64)
    z = rng.normal(size=(1, LATENT_DIM))
    weights = rng.normal(size=(1, 1352, 3))
    decoder.forward(z)
    grad_z = decoder.backward(weights)
    for index in [(0, int(i)) for i in rng.choice(LATENT_DIM, 4, replace=False)]:
        numeric = central_difference(lambda: float(np.sum(weights * decoder.forward(z))), z, index)
        assert abs(grad_z[index] - numeric) <= 1e-4 * max(1.0, abs(numeric))


def test_shape_decoder_merges_shared_vertices():
    rng = np.random.default_rng(3)
    decoder = ShapeDecoder(rng, scale=0.0625)
    raw = rng.normal(size=(1, 6, 256, 3)).astype(np.float32)
    merged = decoder.merge(raw)
    template = make_cube_template()
    # A cube corner is predicted by three sides; it gets their mean.
    corner = template.grid_index[0, 15, 15]
    sources = [raw[0, s, k] for s in range(6) for k in np.flatnonzero(decoder.vertex_index[s] == corner)]
    assert len(sources) == 3
    assert np.allclose(merged[0, corner], np.mean(sources, axis=0), atol=1e-6)


def test_texture_decoder_range_and_shape():
    rng = np.random.default_rng(4)
    decoder = TextureDecoder(rng, texture_size=8, scale=0.0625)
    textures = decoder.forward(rng.normal(size=(3, LATENT_DIM)).astype(np.float32))
    assert textures.shape == (3, 6, 8, 8, 3)
    assert np.all((textures >= 0) & (textures <= 1))
    try:
        TextureDecoder(rng, texture_size=12)
        assert False, "texture size 12 accepted"
    except ValidationError:
        pass


def test_discriminator_conditioning_variants():
    rng = np.random.default_rng(5)
    images = rng.uniform(size=(4, 1, 16, 16))
    viewpoints = rng.uniform(-1, 1, size=(4, 3))
    for conditioning in ('none', 'viewpoint', 'viewpoint+class'):
        disc = Discriminator(16, 1, rng, conditioning=conditioning, n_classes=3, scale=0.125, dtype=np.float64)
        logits = disc.forward_logits(images, viewpoints, np.array([0, 1, 2, 0]))
        assert logits.shape == (4,)
        grad = disc.backward(np.ones(4))
        assert grad.shape == images.shape
        expected = 6 + (1 if conditioning == 'viewpoint+class' else 0)
        assert len(disc.spectral_layers()) == expected
    try:
        disc.forward_logits(images, viewpoints)
        assert False, "class-conditioned discriminator ran without labels"
    except ValidationError:
        pass


def test_projection_discriminator_inner_product():
    rng = np.random.default_rng(6)
    disc = Discriminator(16, 4, rng, conditioning='viewpoint+class', n_classes=2, scale=0.125, dtype=np.float64)
    disc.set_training(False)
    image = rng.uniform(size=(1, 4, 16, 16))
    vp = rng.uniform(-1, 1, size=(1, 3))
    first = disc.forward_logits(image, vp, np.array([0]))[0]
    phi = disc._phi[0].copy()
    second = disc.forward_logits(image, vp, np.array([1]))[0]
    embed = disc.embed.effective_weight()
    assert abs((second - first) - float(np.dot(embed[1] - embed[0], phi))) < 1e-9


def test_feature_extractor_linear_mode_scales():
    extractor = FeatureExtractor(seed=3, channels=(4, 4, 4, 4, 4), linear=True, dtype=np.float64)
    x = np.random.default_rng(7).uniform(size=(1, 3, 16, 16))
    base = extractor.features(x)
    doubled = extractor.features(2.0 * x)
    assert extractor.n_maps == 5
    for a, b in zip(base, doubled):
        assert np.allclose(b, 2.0 * a)


def test_viewpoint_encoding():
    encoded = encode_viewpoints([Viewpoint(180.0, 45.0, 4.0), Viewpoint(0.0, -90.0, 2.0)], dtype=np.float64)
    assert np.allclose(encoded, [[0.5, 0.0, 0.0], [-1.0, -1.0, -0.5]])


if __name__ == "__main__":
    from check_runner import run_tests
    sys.exit(1 if run_tests(globals(), "Networks") else 0)
