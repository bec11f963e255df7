#!/usr/bin/env python3
"""
Network Architectures
Encoder, per-side shape and texture decoders over the cube template, the
view discriminator (viewpoint-tiled, spectral-normalized, optional projection
class conditioning) and the frozen feature extractor behind the perceptual loss.
"""

import logging
from typing import List, Optional, Sequence

import numpy as np

from mesh_core import CubeTemplate, Viewpoint, make_cube_template
from nn_layers import (Embedding, LayerSpec, Linear, Module, Sequential, apply_spectral_norm,
                       build_layers)
from utils import ValidationError

logger = logging.getLogger(__name__)

LATENT_DIM = 512
REFERENCE_DISTANCE = 4.0
VIEWPOINT_DIM = 3
CONDITIONING_MODES = ('none', 'viewpoint', 'viewpoint+class')


def _width(channels: int, scale: float) -> int:
    return max(4, int(round(channels * scale)))


def _upsample_steps(size: int, what: str) -> int:
    steps = 0
    current = 4
    while current < size:
        current *= 2
        steps += 1
    if current != size:
        raise ValidationError(f"{what} size must be 4 * 2^k, got {size}")
    return steps


def encode_viewpoints(viewpoints: Sequence[Viewpoint], dtype=np.float32) -> np.ndarray:
    """(elevation, azimuth, distance) rescaled to roughly [-1, 1]: (N, 3)."""
    return np.array([[vp.elevation / 90.0, vp.azimuth / 180.0 - 1.0, vp.distance / REFERENCE_DISTANCE - 1.0]
                     for vp in viewpoints], dtype=dtype).reshape(-1, VIEWPOINT_DIM)


class Encoder(Module):
    """Strided conv stack -> global average pool -> linear(512)."""

    def __init__(self, image_size: int, rng: np.random.Generator, scale: float = 1.0,
                 dtype=np.float32, in_channels: int = 3, name: str = 'encoder'):
        super().__init__(name)
        specs = []
        size = image_size
        for channels in (64, 128, 256, 256):
            if size < 4:
                break
            specs += [LayerSpec('conv', (_width(channels, scale), 5, 2)), LayerSpec('relu')]
            size = (size + 1) // 2
        specs += [LayerSpec('avgpool'), LayerSpec('linear', (LATENT_DIM,))]
        self.net, _ = build_layers(specs, (in_channels, image_size, image_size), rng, dtype, name='net')
        self.image_size = image_size

    def children(self):
        return [self.net]

    def forward(self, images):
        return self.net.forward(images)

    def backward(self, grad):
        return self.net.backward(grad)


class ShapeDecoder(Module):
    """
    Six per-side branches, each producing a grid x grid x 3 map of raw offsets.

    Raw predictions that land on the same template vertex (cube edges and
    corners) are averaged; vertex = template + 0.5 * tanh(mean raw offset).
    """

    def __init__(self, rng: np.random.Generator, scale: float = 1.0, dtype=np.float32,
                 template: Optional[CubeTemplate] = None, name: str = 'shape_decoder'):
        super().__init__(name)
        self.template = template or make_cube_template()
        grid = self.template.grid
        steps = _upsample_steps(grid, 'Template grid')
        width = _width(512, scale)
        self.branches: List[Sequential] = []
        for side in range(6):
            specs = [LayerSpec('linear', (width * 16,)), LayerSpec('relu'), LayerSpec('reshape', (4,))]
            channels = width
            for _ in range(steps):
                channels = max(4, channels // 2)
                specs += [LayerSpec('deconv', (channels, 4, 2)), LayerSpec('relu')]
            specs.append(LayerSpec('deconv', (3, 3, 1)))
            branch, _ = build_layers(specs, (LATENT_DIM,), rng, dtype, name=f"side{side}")
            self.branches.append(branch)

        self.vertex_index = self.template.grid_index.reshape(6, -1)
        counts = np.zeros(self.template.n_vertices)
        np.add.at(counts, self.vertex_index.reshape(-1), 1.0)
        self.counts = counts.astype(dtype)
        self.base = self.template.mesh.vertices.astype(dtype)
        self._tanh = None

    def children(self):
        return self.branches

    def raw_predictions(self, z: np.ndarray) -> np.ndarray:
        """(N, 6, grid * grid, 3) unmerged branch outputs."""
        outs = []
        for branch in self.branches:
            out = branch.forward(z)
            outs.append(out.reshape(out.shape[0], 3, -1).transpose(0, 2, 1))
        return np.stack(outs, axis=1)

    def merge(self, raw: np.ndarray) -> np.ndarray:
        """Average per-side predictions onto shared vertex indices: (N, V, 3)."""
        n = raw.shape[0]
        sums = np.zeros((n, self.template.n_vertices, 3), dtype=raw.dtype)
        for side in range(6):
            np.add.at(sums, (slice(None), self.vertex_index[side]), raw[:, side])
        return sums / self.counts[None, :, None]

    def forward(self, z):
        merged = self.merge(self.raw_predictions(z))
        self._tanh = np.tanh(merged)
        return self.base[None] + 0.5 * self._tanh

    def backward(self, grad_vertices):
        g_merged = (grad_vertices * 0.5 * (1.0 - self._tanh ** 2)) / self.counts[None, :, None]
        grad_z = None
        for side, branch in enumerate(self.branches):
            g_side = g_merged[:, self.vertex_index[side]]
            n = g_side.shape[0]
            grid = self.template.grid
            g_map = g_side.transpose(0, 2, 1).reshape(n, 3, grid, grid)
            g = branch.backward(np.ascontiguousarray(g_map))
            grad_z = g if grad_z is None else grad_z + g
        return grad_z


class TextureDecoder(Module):
    """Six per-side branches: linear/deconv + BN + ReLU, final deconv, sigmoid to [0, 1]."""

    def __init__(self, rng: np.random.Generator, texture_size: int = 64, scale: float = 1.0,
                 dtype=np.float32, name: str = 'texture_decoder'):
        super().__init__(name)
        steps = _upsample_steps(texture_size, 'Texture')
        width = _width(512, scale)
        self.texture_size = texture_size
        self.branches: List[Sequential] = []
        for side in range(6):
            specs = [LayerSpec('linear', (width * 16,)), LayerSpec('batchnorm'), LayerSpec('relu'),
                     LayerSpec('reshape', (4,))]
            channels = width
            for _ in range(steps):
                channels = max(4, channels // 2)
                specs += [LayerSpec('deconv', (channels, 4, 2)), LayerSpec('batchnorm'), LayerSpec('relu')]
            specs += [LayerSpec('deconv', (3, 3, 1)), LayerSpec('sigmoid')]
            branch, _ = build_layers(specs, (LATENT_DIM,), rng, dtype, name=f"side{side}")
            self.branches.append(branch)

    def children(self):
        return self.branches

    def forward(self, z):
        """(N, 6, T, T, 3) textures; texel (i, j) is map position (row i, column j)."""
        return np.stack([branch.forward(z).transpose(0, 2, 3, 1) for branch in self.branches], axis=1)

    def backward(self, grad_textures):
        grad_z = None
        for side, branch in enumerate(self.branches):
            g = branch.backward(np.ascontiguousarray(grad_textures[:, side].transpose(0, 3, 1, 2)))
            grad_z = g if grad_z is None else grad_z + g
        return grad_z


class Discriminator(Module):
    """
    View discriminator: image (+ tiled viewpoint) -> logit.

    conv(w, 5, 2) + LeakyReLU, concat with the tiled viewpoint encoding, three
    more stride-2 convs with LeakyReLU, a last conv, global pooling to the
    feature vector phi, logit = psi(phi) [+ <embed(class), phi>]. Every conv,
    linear and embedding layer is spectral-normalized.
    """

    def __init__(self, image_size: int, in_channels: int, rng: np.random.Generator,
                 conditioning: str = 'viewpoint', n_classes: int = 1, scale: float = 1.0,
                 batch_norm: bool = False, power_iterations: int = 1, dtype=np.float32,
                 name: str = 'discriminator'):
        super().__init__(name)
        if conditioning not in CONDITIONING_MODES:
            raise ValidationError(f"Unknown conditioning '{conditioning}' (expected one of {CONDITIONING_MODES})")
        self.conditioning = conditioning
        self.in_channels = in_channels
        self.image_size = image_size
        width = _width(64, scale)

        head_specs = [LayerSpec('conv', (width, 5, 2), spectral_norm=True), LayerSpec('leaky_relu', (0.2,))]
        self.head, head_shape = build_layers(head_specs, (in_channels, image_size, image_size), rng, dtype,
                                             power_iterations, name='head')
        body_specs = []
        if conditioning != 'none':
            body_specs.append(LayerSpec('concat', (VIEWPOINT_DIM,)))
        for multiplier in (2, 4, 8):
            body_specs.append(LayerSpec('conv', (width * multiplier, 5, 2), spectral_norm=True))
            if batch_norm:
                body_specs.append(LayerSpec('batchnorm'))
            body_specs.append(LayerSpec('leaky_relu', (0.2,)))
        body_specs += [LayerSpec('conv', (width * 8, 3, 1), spectral_norm=True), LayerSpec('avgpool')]
        self.body, phi_shape = build_layers(body_specs, head_shape, rng, dtype, power_iterations, name='body')
        self.feature_dim = phi_shape[0]
        self.concat = self.body.layers[0] if conditioning != 'none' else None

        self.psi = apply_spectral_norm(Linear(self.feature_dim, 1, rng, dtype, name='psi'), rng, power_iterations)
        self.embed = None
        if conditioning == 'viewpoint+class':
            self.embed = apply_spectral_norm(Embedding(n_classes, self.feature_dim, rng, dtype), rng,
                                             power_iterations)
        self._phi = None
        self._class_vectors = None

    def children(self):
        mods = [self.head, self.body, self.psi]
        if self.embed is not None:
            mods.append(self.embed)
        return mods

    def spectral_layers(self):
        """Every spectral-normalized layer, for the singular-value audit."""
        layers = [l for l in self.head.layers + self.body.layers if getattr(l, 'spectral', None) is not None]
        layers.append(self.psi)
        if self.embed is not None:
            layers.append(self.embed)
        return layers

    def forward_logits(self, images: np.ndarray, viewpoints: Optional[np.ndarray] = None,
                       labels: Optional[np.ndarray] = None) -> np.ndarray:
        """
        Args:
            images: (N, C, S, S) RGBA or silhouette batch
            viewpoints: (N, 3) encoded viewpoints (ignored when unconditioned)
            labels: (N,) class labels (used only with class conditioning)

        Returns:
            (N,) logits
        """
        if images.ndim != 4 or images.shape[1:] != (self.in_channels, self.image_size, self.image_size):
            raise ValidationError(f"Discriminator expects (N, {self.in_channels}, {self.image_size}, "
                                  f"{self.image_size}) images, got {images.shape}")
        h = self.head.forward(images)
        if self.concat is not None:
            if viewpoints is None:
                raise ValidationError("Viewpoint-conditioned discriminator needs viewpoints")
            vp = np.asarray(viewpoints, dtype=h.dtype)
            self.concat.extra = np.broadcast_to(vp[:, :, None, None], vp.shape + h.shape[2:]).copy()
        phi = self.body.forward(h)
        self._phi = phi
        logits = self.psi.forward(phi)[:, 0]
        if self.embed is not None:
            if labels is None:
                raise ValidationError("Class-conditioned discriminator needs class labels")
            self._class_vectors = self.embed.forward(labels)
            logits = logits + np.sum(self._class_vectors * phi, axis=1)
        return logits

    def forward(self, images):
        return self.forward_logits(images)

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        """Accumulates parameter gradients; returns the image gradient."""
        g = grad_logits.reshape(-1, 1).astype(self._phi.dtype)
        g_phi = self.psi.backward(g)
        if self.embed is not None:
            g_phi = g_phi + g * self._class_vectors
            self.embed.backward(g * self._phi)
        g_head = self.body.backward(g_phi)
        return self.head.backward(g_head)


class FeatureExtractor(Module):
    """
    Frozen, seeded conv stack exposing five feature maps for the perceptual loss.

    With `linear=True` the stack has no biases and no nonlinearities, so
    scaling the input scales every feature map.
    """

    def __init__(self, seed: int = 0, channels: Sequence[int] = (16, 32, 64, 64, 64),
                 strides: Sequence[int] = (2, 1, 2, 1, 1), linear: bool = False, dtype=np.float32,
                 in_channels: int = 3, name: str = 'features'):
        super().__init__(name)
        if len(channels) < 1 or len(channels) != len(strides):
            raise ValidationError("Feature extractor needs matching channel and stride lists")
        rng = np.random.default_rng(seed)
        self.stages: List[Sequential] = []
        c_in = in_channels
        for i, (c_out, stride) in enumerate(zip(channels, strides)):
            specs = [LayerSpec('conv', (c_out, 3, stride))]
            if not linear:
                specs.append(LayerSpec('relu'))
            stage, _ = build_layers(specs, (c_in, 16, 16), rng, dtype, name=f"stage{i}")
            if linear:
                stage.layers[0].bias = None
            self.stages.append(stage)
            c_in = c_out
        self._tap_shapes = []
        self.set_training(False)

    @property
    def n_maps(self) -> int:
        return len(self.stages)

    def children(self):
        return self.stages

    def features(self, images: np.ndarray) -> List[np.ndarray]:
        """The N_f feature maps for an (N, 3, H, W) batch."""
        taps = []
        x = images
        for stage in self.stages:
            x = stage.forward(x)
            taps.append(x)
        self._tap_shapes = [t.shape for t in taps]
        return taps

    def forward(self, images):
        return self.features(images)

    def backward_taps(self, tap_grads: Sequence[Optional[np.ndarray]]) -> np.ndarray:
        """Input gradient given a gradient (or None) for each feature map."""
        grad = None
        shapes = reversed(self._tap_shapes)
        for stage, tap_grad, shape in zip(reversed(self.stages), reversed(list(tap_grads)), shapes):
            if tap_grad is not None:
                grad = tap_grad if grad is None else grad + tap_grad
            elif grad is None:
                grad = np.zeros(shape, dtype=np.float32)
            grad = stage.backward(grad)
        return grad
