#!/usr/bin/env python3
"""
Trainer
Wires encoder -> decoders -> renderer -> losses -> view discriminator and runs
single-view, multi-view and iterative-adversarial training with checkpoints,
resume, the CSV training log and sample render grids.
"""

import copy
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from dataset import (Dataset, ViewSample, augment, augment_pair, designated_views,
                     sample_multi_view_batch, sample_single_view_batch, sample_unobserved_viewpoint)
from losses import (SILHOUETTE_LOSSES, DiscriminationResult, LossWeights, internal_pressure_from_vertices,
                    real_vs_fake_discrimination_loss, reconstruction_loss, view_discrimination_loss)
from mesh_core import AXES, Mesh, Viewpoint, make_cube_template, signed_volume_batch, \
    symmetrize_backward, symmetrize_vertices
from networks import (CONDITIONING_MODES, Discriminator, Encoder, FeatureExtractor, ShapeDecoder,
                      TextureDecoder, encode_viewpoints)
from nn_layers import Adam, Module
from renderer import DEFAULT_FOV, DEFAULT_SUPERSAMPLE, MeshRenderer, RenderOutput
from run_storage import TrainingLog, load_checkpoint, save_checkpoint
from utils import DatasetError, NumericalError, ValidationError, spawn_rngs, validate_config

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
TRAINING_MODES = ('single_view', 'multi_view')
DISCRIMINATOR_MODES = ('obs_vs_unobs', 'real_vs_fake')
ADVERSARIAL_MODES = ('gradient_reversal', 'iterative')
RNG_STREAMS = ('batch', 'augment', 'viewpoint')
INIT_STREAMS = ('reconstructor', 'discriminator')
NOVEL_AZIMUTH_OFFSETS = (90.0, 180.0, 270.0)
MAX_GRID_SAMPLES = 4

DEFAULT_CONFIG = {
    'training': {
        'mode': 'single_view',
        'vpl': False,
        'discriminator_mode': 'obs_vs_unobs',
        'conditioning': 'viewpoint',
        'texture_prediction': False,
        'adversarial_optimization': 'gradient_reversal',
        'iterations': 1000,
        'iterations_per_view': False,
        'iteration_scale': 1.0,
        'batch_size': 64,
        'seed': 0,
        'image_size': 64,
        'network_scale': 1.0,
        'texture_size': 16,
        'symmetric': False,
        'symmetry_axis': 'x',
        'silhouette_loss': 'multiscale_cosine',
        'augment': True,
        'num_workers': 0,
        'checkpoint_every': 1000,
        'log_every': 10,
        'sample_every': 0,
        'iterative_adversarial_weight': 1.0,
    },
    'weights': {'lambda_c': 0.0, 'lambda_d': 0.2, 'lambda_p': 1e-4, 'n_scales': 5},
    'optimizer': {'alpha': 4e-4, 'beta1': 0.5, 'beta2': 0.999, 'eps': 1e-8},
    'discriminator': {'batch_norm': False, 'power_iterations': 1},
    'renderer': {'fov': DEFAULT_FOV, 'background': [0.0, 0.0, 0.0], 'supersample': DEFAULT_SUPERSAMPLE},
    'dataset': {'root': 'data'},
    'output': {'dir': 'runs/latest'},
    'logging': {'level': 'INFO', 'file': None, 'record_wall_time': True},
}


def _shapenet_preset(mode: str, texture: bool, vpl: bool) -> Dict:
    if mode == 'single_view':
        iterations = 100000 if vpl else 50000
        lambda_c = 0.5
        lambda_d = 2.0 if texture else 0.2
    else:
        iterations = 50000 if vpl else 25000
        lambda_c = 0.1
        lambda_d = 0.3 if texture else 0.03
    weights = {'lambda_c': lambda_c if texture else 0.0, 'lambda_p': 1e-4}
    if vpl:
        weights['lambda_d'] = lambda_d
    return {
        'training': {'mode': mode, 'vpl': vpl, 'texture_prediction': texture, 'iterations': iterations,
                     'iterations_per_view': mode == 'multi_view', 'batch_size': 64,
                     'silhouette_loss': 'multiscale_cosine', 'symmetric': False},
        'weights': weights,
        'optimizer': {'alpha': 4e-4, 'beta1': 0.5, 'beta2': 0.999},
    }


_PASCAL_ITERATIONS = {
    'agnostic': {(False, False): 15000, (True, False): 15000, (False, True): 50000, (True, True): 250000},
    'specific': {(False, False): 5000, (True, False): 5000, (False, True): 40000, (True, True): 80000},
}


def _pascal_preset(kind: str, texture: bool, vpl: bool) -> Dict:
    weights = {'lambda_c': 0.01 if texture else 0.0, 'lambda_p': 3e-5}
    if vpl:
        weights['lambda_d'] = 0.5 if texture else 2.0
    return {
        'training': {'mode': 'single_view', 'vpl': vpl, 'texture_prediction': texture,
                     'iterations': _PASCAL_ITERATIONS[kind][(texture, vpl)], 'iterations_per_view': False,
                     'batch_size': 16, 'silhouette_loss': 'neg_iou', 'symmetric': True},
        'weights': weights,
        'optimizer': {'alpha': 2e-5, 'beta1': 0.5, 'beta2': 0.999},
    }


def _build_presets() -> Dict[str, Dict]:
    presets = {}
    for texture in (False, True):
        for vpl in (False, True):
            suffix = ('_texture' if texture else '') + ('_vpl' if vpl else '')
            presets[f"shapenet_single{suffix}"] = _shapenet_preset('single_view', texture, vpl)
            presets[f"shapenet_multi{suffix}"] = _shapenet_preset('multi_view', texture, vpl)
            presets[f"pascal_agnostic{suffix}"] = _pascal_preset('agnostic', texture, vpl)
            presets[f"pascal_specific{suffix}"] = _pascal_preset('specific', texture, vpl)
    return presets


PRESETS = _build_presets()


def _merge(base: Dict, override: Dict) -> Dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def resolve_config(raw: Optional[Dict] = None, preset: Optional[str] = None) -> Dict:
    """
    Defaults <- preset <- explicit config keys.

    Args:
        raw: Parsed config file (may name a `preset` itself)
        preset: Preset name from the command line; wins over the file's `preset`

    Returns:
        The fully resolved nested config (what run manifests hash)
    """
    raw = dict(raw or {})
    errors = validate_config(raw)
    if errors:
        raise ValidationError("Invalid config:\n  " + "\n  ".join(errors))
    preset = preset or raw.pop('preset', None)
    raw.pop('preset', None)
    resolved = copy.deepcopy(DEFAULT_CONFIG)
    if preset is not None:
        if preset not in PRESETS:
            raise ValidationError(f"Unknown preset '{preset}' (known: {', '.join(sorted(PRESETS))})")
        resolved = _merge(resolved, PRESETS[preset])
    resolved = _merge(resolved, raw)
    resolved['preset'] = preset
    return resolved


@dataclass
class TrainConfig:
    mode: str = 'single_view'
    vpl: bool = False
    discriminator_mode: str = 'obs_vs_unobs'
    conditioning: str = 'viewpoint'
    texture_prediction: bool = False
    adversarial_optimization: str = 'gradient_reversal'
    iterations: int = 1000
    iterations_per_view: bool = False
    iteration_scale: float = 1.0
    batch_size: int = 64
    seed: int = 0
    image_size: int = 64
    network_scale: float = 1.0
    texture_size: int = 16
    symmetric: bool = False
    symmetry_axis: str = 'x'
    silhouette_loss: str = 'multiscale_cosine'
    augment: bool = True
    num_workers: int = 0
    checkpoint_every: int = 1000
    log_every: int = 10
    sample_every: int = 0
    iterative_adversarial_weight: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    alpha: float = 4e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    discriminator_batch_norm: bool = False
    power_iterations: int = 1
    fov: float = DEFAULT_FOV
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    supersample: int = DEFAULT_SUPERSAMPLE
    dataset_root: str = 'data'
    output_dir: str = 'runs/latest'
    record_wall_time: bool = True
    preset: Optional[str] = None

    @classmethod
    def from_dict(cls, config: Dict) -> 'TrainConfig':
        """Build from a nested config; missing keys fall back to the defaults."""
        resolved = resolve_config(config)
        t, w, o = resolved['training'], resolved['weights'], resolved['optimizer']
        d, r = resolved['discriminator'], resolved['renderer']
        try:
            built = cls(
                mode=str(t['mode']), vpl=bool(t['vpl']), discriminator_mode=str(t['discriminator_mode']),
                conditioning=str(t['conditioning']), texture_prediction=bool(t['texture_prediction']),
                adversarial_optimization=str(t['adversarial_optimization']), iterations=int(t['iterations']),
                iterations_per_view=bool(t['iterations_per_view']), iteration_scale=float(t['iteration_scale']),
                batch_size=int(t['batch_size']), seed=int(t['seed']), image_size=int(t['image_size']),
                network_scale=float(t['network_scale']), texture_size=int(t['texture_size']),
                symmetric=bool(t['symmetric']), symmetry_axis=str(t['symmetry_axis']),
                silhouette_loss=str(t['silhouette_loss']), augment=bool(t['augment']),
                num_workers=int(t['num_workers']), checkpoint_every=int(t['checkpoint_every']),
                log_every=int(t['log_every']), sample_every=int(t['sample_every']),
                iterative_adversarial_weight=float(t['iterative_adversarial_weight']),
                weights=LossWeights(float(w['lambda_c']), float(w['lambda_d']), float(w['lambda_p']),
                                    int(w['n_scales'])),
                alpha=float(o['alpha']), beta1=float(o['beta1']), beta2=float(o['beta2']), eps=float(o['eps']),
                discriminator_batch_norm=bool(d['batch_norm']), power_iterations=int(d['power_iterations']),
                fov=float(r['fov']), background=tuple(float(c) for c in r['background']),
                supersample=int(r['supersample']), dataset_root=str(resolved['dataset']['root']),
                output_dir=str(resolved['output']['dir']),
                record_wall_time=bool(resolved['logging'].get('record_wall_time', True)),
                preset=resolved.get('preset'))
        except (TypeError, ValueError) as e:
            raise ValidationError(f"Malformed config value: {e}")
        built.validate()
        return built

    def validate(self):
        problems = []
        if self.mode not in TRAINING_MODES:
            problems.append(f"training.mode must be one of {TRAINING_MODES}, got '{self.mode}'")
        if self.discriminator_mode not in DISCRIMINATOR_MODES:
            problems.append(f"training.discriminator_mode must be one of {DISCRIMINATOR_MODES}")
        if self.conditioning not in CONDITIONING_MODES:
            problems.append(f"training.conditioning must be one of {CONDITIONING_MODES}")
        if self.adversarial_optimization not in ADVERSARIAL_MODES:
            problems.append(f"training.adversarial_optimization must be one of {ADVERSARIAL_MODES}")
        if self.silhouette_loss not in SILHOUETTE_LOSSES:
            problems.append(f"training.silhouette_loss must be one of {SILHOUETTE_LOSSES}")
        if self.symmetry_axis not in AXES:
            problems.append(f"training.symmetry_axis must be x, y or z, got '{self.symmetry_axis}'")
        for name in ('iterations', 'batch_size', 'image_size', 'texture_size', 'supersample', 'power_iterations',
                     'log_every'):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ('num_workers', 'checkpoint_every', 'sample_every'):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.iteration_scale <= 0 or self.network_scale <= 0:
            problems.append("iteration_scale and network_scale must be > 0")
        if self.iterative_adversarial_weight < 0:
            problems.append("iterative_adversarial_weight must be >= 0")
        if not (self.alpha > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            problems.append("optimizer needs alpha > 0, 0 <= beta1, beta2 < 1 and eps > 0")
        if len(self.background) != 3:
            problems.append("renderer.background must have 3 components")
        if problems:
            raise ValidationError("Invalid training config:\n  " + "\n  ".join(problems))
        self.weights.validate(self.image_size)

    def total_iterations(self, n_views: int = 1) -> int:
        count = self.iterations * (n_views if self.iterations_per_view else 1)
        return max(1, int(round(count * self.iteration_scale)))

    def architecture(self) -> Dict:
        """The fields that decide parameter shapes; checkpoints must agree on these."""
        return {'image_size': self.image_size, 'network_scale': self.network_scale,
                'texture_prediction': self.texture_prediction, 'texture_size': self.texture_size,
                'vpl': self.vpl, 'conditioning': self.conditioning,
                'discriminator_batch_norm': self.discriminator_batch_norm}

    def to_dict(self) -> Dict:
        """Nested form accepted by `from_dict`."""
        return {
            'preset': None,
            'training': {k: getattr(self, k) for k in DEFAULT_CONFIG['training']},
            'weights': asdict(self.weights),
            'optimizer': {'alpha': self.alpha, 'beta1': self.beta1, 'beta2': self.beta2, 'eps': self.eps},
            'discriminator': {'batch_norm': self.discriminator_batch_norm,
                              'power_iterations': self.power_iterations},
            'renderer': {'fov': self.fov, 'background': list(self.background), 'supersample': self.supersample},
            'dataset': {'root': self.dataset_root},
            'output': {'dir': self.output_dir},
            'logging': {'level': 'INFO', 'file': None, 'record_wall_time': self.record_wall_time},
        }


class Reconstructor(Module):
    """Image -> (template-topology vertices, optional per-side textures)."""

    def __init__(self, image_size: int, rng: np.random.Generator, scale: float = 1.0,
                 texture_size: Optional[int] = None, symmetric: bool = False, symmetry_axis: str = 'x',
                 dtype=np.float32, name: str = 'reconstructor'):
        super().__init__(name)
        self.template = make_cube_template()
        self.encoder = Encoder(image_size, rng, scale, dtype)
        self.shape_decoder = ShapeDecoder(rng, scale, dtype, self.template)
        self.texture_decoder = TextureDecoder(rng, texture_size, scale, dtype) if texture_size else None
        self.symmetric = symmetric
        self.symmetry_axis = symmetry_axis
        self.dtype = dtype

    def children(self):
        mods = [self.encoder, self.shape_decoder]
        if self.texture_decoder is not None:
            mods.append(self.texture_decoder)
        return mods

    def forward(self, images: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        """
        Args:
            images: (N, S, S, 3) colors in [0, 1]

        Returns:
            (vertices (N, V, 3), textures (N, 6, T, T, 3) or None)
        """
        z = self.encoder.forward(np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=self.dtype))
        vertices = self.shape_decoder.forward(z)
        if self.symmetric:
            vertices = symmetrize_vertices(vertices, self.symmetry_axis, self.template)
        textures = self.texture_decoder.forward(z) if self.texture_decoder is not None else None
        return vertices, textures

    def backward(self, grad_vertices: np.ndarray, grad_textures: Optional[np.ndarray] = None):
        if self.symmetric:
            grad_vertices = symmetrize_backward(grad_vertices, self.symmetry_axis, self.template)
        grad_z = self.shape_decoder.backward(grad_vertices.astype(self.dtype))
        if self.texture_decoder is not None and grad_textures is not None:
            grad_z = grad_z + self.texture_decoder.backward(grad_textures.astype(self.dtype))
        return self.encoder.backward(grad_z)

    def meshes(self, vertices: np.ndarray, textures: Optional[np.ndarray],
               names: Optional[Sequence[str]] = None) -> List[Mesh]:
        out = []
        for i in range(len(vertices)):
            tex = None if textures is None else np.clip(textures[i].astype(np.float64), 0.0, 1.0)
            out.append(self.template.instantiate(vertices[i], tex, names[i] if names else f"recon_{i}"))
        return out

    def predict(self, image: np.ndarray, name: str = 'reconstruction') -> Mesh:
        """Inference on one (S, S, 3) image; running statistics are used and left untouched."""
        was_training = self.training
        self.set_training(False)
        try:
            vertices, textures = self.forward(np.asarray(image)[None])
        finally:
            self.set_training(was_training)
        return self.meshes(vertices, textures, [name])[0]


@dataclass
class StepRecord:
    """One row of the training log."""
    step: int
    loss_s: float
    loss_c: float
    loss_d: float
    volume_mean: float
    n_degenerate: int = 0


@dataclass
class _ForwardPass:
    elements: List[Tuple[ViewSample, List[ViewSample]]]
    vertices: np.ndarray
    textures: Optional[np.ndarray]
    meshes: List[Mesh]
    jobs: List[Tuple[int, ViewSample]]
    outs: List[RenderOutput]
    first_job: List[int]
    unobserved: List[Viewpoint] = field(default_factory=list)
    unobserved_outs: List[RenderOutput] = field(default_factory=list)


class Trainer:
    """Owns the networks, optimizers and random streams of one training run."""

    def __init__(self, config: TrainConfig, dataset: Dataset):
        self.logger = logging.getLogger(__name__)
        config.validate()
        self.config = config
        if dataset.image_size != config.image_size:
            raise ValidationError(f"Dataset images are {dataset.image_size} px but training.image_size is "
                                  f"{config.image_size}")
        self.dataset = dataset.split('train')
        if self.dataset.n_objects == 0:
            raise DatasetError("Dataset has no training objects", dataset.root)
        streams = spawn_rngs(config.seed, list(INIT_STREAMS + RNG_STREAMS))

        self.reconstructor = Reconstructor(config.image_size, streams['reconstructor'],
                                           config.network_scale,
                                           config.texture_size if config.texture_prediction else None,
                                           config.symmetric, config.symmetry_axis)
        self.discriminator: Optional[Discriminator] = None
        if config.vpl:
            self.discriminator = Discriminator(config.image_size, 4 if config.texture_prediction else 1,
                                               streams['discriminator'], config.conditioning,
                                               max(1, dataset.n_classes), config.network_scale,
                                               config.discriminator_batch_norm, config.power_iterations)
        self.extractor: Optional[FeatureExtractor] = None
        if config.texture_prediction and config.weights.lambda_c > 0:
            self.extractor = FeatureExtractor(seed=config.seed)

        self.renderer = MeshRenderer(config.image_size, config.fov, config.background, config.supersample)
        self.optimizer = Adam(self.reconstructor.parameters(), config.alpha, config.beta1, config.beta2,
                              config.eps)
        self.disc_optimizer = None
        if self.discriminator is not None:
            self.disc_optimizer = Adam(self.discriminator.parameters(), config.alpha, config.beta1,
                                       config.beta2, config.eps)

        self.rngs = {name: streams[name] for name in RNG_STREAMS}
        self.step = 0
        self.wall_time = 0.0
        self.designated = designated_views(self.dataset, config.seed)
        if config.mode == 'single_view':
            self.viewpoint_set = [obj.viewpoints[self.designated[obj.object_id]] for obj in self.dataset.objects]
        else:
            self.viewpoint_set = self.dataset.viewpoints()
        if config.vpl and len(set(self.viewpoint_set)) < 2:
            raise ValidationError("View prior learning needs at least two distinct training viewpoints")
        self._executor: Optional[ThreadPoolExecutor] = None

    # -- plumbing -----------------------------------------------------------------

    def _map(self, fn: Callable, items: Sequence) -> List:
        """Ordered map; a thread pool when num_workers > 0."""
        if self.config.num_workers <= 0 or len(items) < 2:
            return [fn(item) for item in items]
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=self.config.num_workers)
        return list(self._executor.map(fn, items))

    def close(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()

    def _labels(self, samples: Sequence[ViewSample]) -> Optional[np.ndarray]:
        if self.config.conditioning != 'viewpoint+class':
            return None
        return np.array([s.class_label for s in samples], dtype=np.int64)

    def _disc_images(self, colors: Sequence[np.ndarray], alphas: Sequence[np.ndarray]) -> np.ndarray:
        """(N, C, S, S) discriminator input: RGBA with textures, the silhouette alone otherwise."""
        if self.config.texture_prediction:
            stacked = np.stack([np.concatenate([c, a[..., None]], axis=-1) for c, a in zip(colors, alphas)])
            return np.ascontiguousarray(stacked.transpose(0, 3, 1, 2), dtype=np.float32)
        return np.stack(alphas)[:, None].astype(np.float32)

    def _split_image_grad(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Inverse of `_disc_images` for one element: (color grad (S, S, 3), alpha grad (S, S))."""
        if self.config.texture_prediction:
            g = grad.transpose(1, 2, 0)
            return g[..., :3], g[..., 3]
        return np.zeros(grad.shape[1:] + (3,)), grad[0]

    @staticmethod
    def _check_finite(step: int, **terms):
        for name, value in terms.items():
            if not np.all(np.isfinite(value)):
                raise NumericalError(f"Non-finite {name} at step {step}")

    # -- forward / adversarial / backward ------------------------------------------

    def _forward(self, elements: List[Tuple[ViewSample, List[ViewSample]]]) -> _ForwardPass:
        images = np.stack([inp.image for inp, _ in elements])
        vertices, textures = self.reconstructor.forward(images)
        meshes = self.reconstructor.meshes(vertices, textures, [inp.object_id for inp, _ in elements])
        jobs, first_job = [], []
        for i, (_, targets) in enumerate(elements):
            first_job.append(len(jobs))
            jobs.extend((i, target) for target in targets)
        outs = self._map(lambda job: self.renderer.render(meshes[job[0]], job[1].viewpoint), jobs)
        fwd = _ForwardPass(elements, vertices, textures, meshes, jobs, outs, first_job)

        if self.discriminator is not None:
            rng = self.rngs['viewpoint']
            fwd.unobserved = [sample_unobserved_viewpoint(self.viewpoint_set, inp.viewpoint, rng)
                              for inp, _ in elements]
            fwd.unobserved_outs = self._map(lambda k: self.renderer.render(meshes[k], fwd.unobserved[k]),
                                            list(range(len(elements))))
        return fwd

    def _discriminate(self, fwd: _ForwardPass) -> DiscriminationResult:
        """Configured discrimination loss; accumulates +dL_d into the discriminator's gradients."""
        inputs = [inp for inp, _ in fwd.elements]
        observed = [fwd.outs[j] for j in fwd.first_job]
        labels = self._labels(inputs)
        vp_obs = encode_viewpoints([s.viewpoint for s in inputs])
        vp_unobs = encode_viewpoints(fwd.unobserved)
        unobs_images = self._disc_images([o.color for o in fwd.unobserved_outs],
                                         [o.alpha for o in fwd.unobserved_outs])
        lambda_d = self.config.weights.lambda_d
        if self.config.discriminator_mode == 'obs_vs_unobs':
            obs_images = self._disc_images([o.color for o in observed], [o.alpha for o in observed])
            return view_discrimination_loss(self.discriminator, obs_images, vp_obs, unobs_images, vp_unobs,
                                            labels, lambda_d)
        real_images = self._disc_images([s.image for s in inputs], [s.silhouette for s in inputs])
        return real_vs_fake_discrimination_loss(self.discriminator, unobs_images, vp_unobs, real_images, vp_obs,
                                                labels, lambda_d)

    def _backward(self, fwd: _ForwardPass, result: Optional[DiscriminationResult],
                  adversarial_scale: float, include_reconstruction: bool = True) -> StepRecord:
        """
        Image gradients -> renderer backward -> internal pressure -> reconstructor backward.

        The adversarial image gradient is `adversarial_scale * dL_d/d(input)`:
        -lambda_d under gradient reversal, -w for the iterative generator pass.
        """
        n = len(fwd.elements)
        weights = self.config.weights
        pairs = [(out.color, out.alpha, target.image, target.silhouette)
                 for out, (_, target) in zip(fwd.outs, fwd.jobs)]
        terms = reconstruction_loss(pairs, weights, self.config.silhouette_loss, self.extractor)
        grad_colors = [g / n for g in terms.grad_colors]
        grad_alphas = [g / n for g in terms.grad_alphas]
        if not include_reconstruction:
            grad_colors = [np.zeros_like(g) for g in grad_colors]
            grad_alphas = [np.zeros_like(g) for g in grad_alphas]

        render_items = [(i, out, gc, ga) for (i, _), out, gc, ga in zip(fwd.jobs, fwd.outs, grad_colors, grad_alphas)]
        loss_d = 0.0
        if result is not None:
            loss_d = result.loss
            image_grad = adversarial_scale * result.input_grad
            if self.config.discriminator_mode == 'obs_vs_unobs':
                for k, j in enumerate(fwd.first_job):
                    gc, ga = self._split_image_grad(image_grad[k])
                    i, out, base_c, base_a = render_items[j]
                    render_items[j] = (i, out, base_c + gc, base_a + ga)
                unobs_grad = image_grad[n:]
            else:
                unobs_grad = image_grad
            for k, out in enumerate(fwd.unobserved_outs):
                gc, ga = self._split_image_grad(unobs_grad[k])
                render_items.append((k, out, gc, ga))

        def backward_one(item):
            i, out, gc, ga = item
            return self.renderer.backward(fwd.meshes[i], out, gc, ga)

        grads = self._map(backward_one, render_items)
        grad_vertices = np.zeros(fwd.vertices.shape)
        grad_textures = None if fwd.textures is None else np.zeros(fwd.textures.shape)
        for (i, _, _, _), (gv, gt) in zip(render_items, grads):
            grad_vertices[i] += gv
            if gt is not None:
                grad_textures[i] += gt

        faces = self.reconstructor.template.mesh.faces
        n_degenerate = 0
        if weights.lambda_p > 0:
            for i in range(n):
                pressure, skipped = internal_pressure_from_vertices(fwd.vertices[i], faces)
                grad_vertices[i] += (weights.lambda_p / n) * pressure
                n_degenerate += skipped
            if n_degenerate:
                self.logger.warning(f"⚠️ Internal pressure skipped {n_degenerate} degenerate faces")

        record = StepRecord(self.step, terms.loss_s / n, terms.loss_c / n, loss_d,
                            float(np.mean(signed_volume_batch(fwd.vertices.astype(np.float64), faces))),
                            n_degenerate)
        self._check_finite(self.step, loss_s=record.loss_s, loss_c=record.loss_c, loss_d=record.loss_d,
                           vertex_gradient=grad_vertices,
                           texture_gradient=0.0 if grad_textures is None else grad_textures)
        self.reconstructor.backward(grad_vertices, grad_textures)
        return record

    def _zero_grads(self):
        self.optimizer.zero_grad()
        if self.disc_optimizer is not None:
            self.disc_optimizer.zero_grad()

    # -- public steps -----------------------------------------------------------------

    def reconstructor_gradients(self, elements: List[Tuple[ViewSample, List[ViewSample]]],
                                adversarial: str = 'gradient_reversal',
                                include_reconstruction: bool = True) -> StepRecord:
        """
        Fill reconstructor gradients for `elements` without stepping any optimizer.

        `adversarial` picks the wiring of the discrimination term: the reversal
        layer (-lambda_d) or the iterative generator objective (-w * L_d).
        """
        if adversarial not in ADVERSARIAL_MODES:
            raise ValidationError(f"Unknown adversarial wiring '{adversarial}'")
        self._zero_grads()
        fwd = self._forward(elements)
        result = self._discriminate(fwd) if self.discriminator is not None else None
        scale = (-self.config.weights.lambda_d if adversarial == 'gradient_reversal'
                 else -self.config.iterative_adversarial_weight)
        return self._backward(fwd, result, scale, include_reconstruction)

    def _reversal_step(self, elements) -> StepRecord:
        record = self.reconstructor_gradients(elements, 'gradient_reversal')
        self.optimizer.step()
        if self.disc_optimizer is not None:
            self.disc_optimizer.step()
        self.step += 1
        record.step = self.step
        return record

    def train_step_single_view(self, samples: Sequence[ViewSample]) -> StepRecord:
        """One update from single views: each sample is reconstructed and compared at its own viewpoint."""
        if self.config.mode != 'single_view':
            raise ValidationError("train_step_single_view needs training.mode = single_view")
        elements = [(s, [s]) for s in samples]
        if self.discriminator is not None and self.config.adversarial_optimization == 'iterative':
            return self.train_iterative_adversarial(elements)
        return self._reversal_step(elements)

    def train_step_multi_view(self, pairs: Sequence[Tuple[ViewSample, ViewSample]]) -> StepRecord:
        """
        One update from view pairs (A, B) of the same object.

        Both A and B are reconstructed; each reconstruction is compared at both
        viewpoints, so a pair contributes four view losses.
        """
        if self.config.mode != 'multi_view':
            raise ValidationError("train_step_multi_view needs training.mode = multi_view")
        elements = []
        for a, b in pairs:
            elements.append((a, [a, b]))
            elements.append((b, [b, a]))
        if self.discriminator is not None and self.config.adversarial_optimization == 'iterative':
            return self.train_iterative_adversarial(elements)
        return self._reversal_step(elements)

    def discriminator_pass(self, fwd: _ForwardPass) -> DiscriminationResult:
        """Discriminator-only update on already rendered views; reconstructor untouched."""
        self.disc_optimizer.zero_grad()
        result = self._discriminate(fwd)
        self.disc_optimizer.step()
        return result

    def train_iterative_adversarial(self, elements: List[Tuple[ViewSample, List[ViewSample]]]) -> StepRecord:
        """
        Alternating updates: the discriminator minimizes L_d, then the
        reconstructor minimizes L_s + lambda_c L_c - w L_d (plus internal pressure)
        against the updated discriminator on the same renders.
        """
        if self.discriminator is None:
            raise ValidationError("Iterative adversarial training needs training.vpl = true")
        self._zero_grads()
        fwd = self._forward(elements)
        disc_result = self.discriminator_pass(fwd)

        self._zero_grads()
        generator_result = self._discriminate(fwd)
        record = self._backward(fwd, generator_result, -self.config.iterative_adversarial_weight)
        self.disc_optimizer.zero_grad()
        self.optimizer.step()
        record.loss_d = disc_result.loss
        self.step += 1
        record.step = self.step
        return record

    def sample_batch(self):
        """Draw (and augment) the next minibatch from the run's random streams."""
        cfg = self.config
        if cfg.mode == 'single_view':
            batch = sample_single_view_batch(self.dataset, cfg.batch_size, self.rngs['batch'], self.designated)
            if cfg.augment:
                batch = [augment(s, self.rngs['augment']) for s in batch]
            return batch
        pairs = sample_multi_view_batch(self.dataset, cfg.batch_size, self.rngs['batch'])
        if cfg.augment:
            pairs = [augment_pair(a, b, self.rngs['augment']) for a, b in pairs]
        return pairs

    def train_step(self) -> StepRecord:
        batch = self.sample_batch()
        if self.config.mode == 'single_view':
            return self.train_step_single_view(batch)
        return self.train_step_multi_view(batch)

    # -- artifacts --------------------------------------------------------------------

    def _named_state(self) -> List[Tuple[str, np.ndarray]]:
        blocks = [(f"param.{n}", t.data) for n, t in self.reconstructor.named_parameters()]
        blocks += [(f"buffer.{n}", t.data) for n, t in self.reconstructor.named_buffers()]
        blocks += self.optimizer.moment_tensors('adam.reconstructor')
        if self.discriminator is not None:
            blocks += [(f"param.{n}", t.data) for n, t in self.discriminator.named_parameters()]
            blocks += [(f"buffer.{n}", t.data) for n, t in self.discriminator.named_buffers()]
            blocks += self.disc_optimizer.moment_tensors('adam.discriminator')
        return blocks

    def save_checkpoint(self, path: str):
        header = {
            'version': CHECKPOINT_VERSION,
            'seed': self.config.seed,
            'step': self.step,
            'wall_time': self.wall_time if self.config.record_wall_time else 0.0,
            'architecture': self.config.architecture(),
            'config': self.config.to_dict(),
            'n_classes': max(1, self.dataset.n_classes),
            'adam_steps': {'reconstructor': self.optimizer.state.step,
                           'discriminator': self.disc_optimizer.state.step if self.disc_optimizer else 0},
            'rng_states': {name: rng.bit_generator.state for name, rng in self.rngs.items()},
        }
        save_checkpoint(path, header, self._named_state())
        self.logger.info(f"💾 Saved checkpoint {path} (step {self.step})")

    def load_checkpoint(self, path: str):
        """Restore parameters, buffers, optimizer moments, random streams and the step counter."""
        header, blocks = load_checkpoint(path)
        _check_version(header, path)
        if header.get('architecture') != self.config.architecture():
            raise ValidationError(f"Checkpoint {path} architecture {header.get('architecture')} does not match "
                                  f"the config {self.config.architecture()}")
        for name, array in self._named_state():
            if name not in blocks:
                raise ValidationError(f"Checkpoint {path} has no block '{name}'")
            if blocks[name].shape != array.shape:
                raise ValidationError(f"Checkpoint block '{name}' has shape {blocks[name].shape}, "
                                      f"expected {array.shape}")
            array[...] = blocks[name]
        self.optimizer.state.step = int(header['adam_steps']['reconstructor'])
        if self.disc_optimizer is not None:
            self.disc_optimizer.state.step = int(header['adam_steps']['discriminator'])
        for name, state in header['rng_states'].items():
            self.rngs[name].bit_generator.state = state
        self.step = int(header['step'])
        self.wall_time = float(header.get('wall_time', 0.0))
        self.logger.info(f"📂 Resumed from {path} at step {self.step}")

    def save_sample_grid(self, samples: Sequence[ViewSample], path: str):
        """Per sample row: input, observed-view render, renders at azimuth +90/+180/+270."""
        samples = list(samples)[:MAX_GRID_SAMPLES]
        size = self.config.image_size
        rows = []
        for sample in samples:
            mesh = self.reconstructor.predict(sample.image, sample.object_id)
            vp = sample.viewpoint
            views = [vp] + [Viewpoint(vp.azimuth + offset, vp.elevation, vp.distance)
                            for offset in NOVEL_AZIMUTH_OFFSETS]
            tiles = [sample.image]
            for view in views:
                out = self.renderer.render(mesh, view)
                tiles.append(out.color if self.config.texture_prediction else np.repeat(out.alpha[..., None], 3, -1))
            rows.append(np.concatenate(tiles, axis=1))
        grid = np.concatenate(rows, axis=0) if rows else np.zeros((size, size, 3))
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        Image.fromarray(np.clip(np.round(grid * 255.0), 0, 255).astype(np.uint8)).save(path)


def _check_version(header: Dict, path: str):
    if header.get('version') != CHECKPOINT_VERSION:
        raise ValidationError(f"Checkpoint {path} has version {header.get('version')}, "
                              f"this build reads version {CHECKPOINT_VERSION}")


def load_reconstructor(path: str) -> Tuple[Reconstructor, TrainConfig]:
    """Inference-only reconstructor from a checkpoint (evaluation mode)."""
    header, blocks = load_checkpoint(path)
    _check_version(header, path)
    config = TrainConfig.from_dict(header['config'])
    reconstructor = Reconstructor(config.image_size, np.random.default_rng(0), config.network_scale,
                                  config.texture_size if config.texture_prediction else None,
                                  config.symmetric, config.symmetry_axis)
    named = [(f"param.{n}", t) for n, t in reconstructor.named_parameters()]
    named += [(f"buffer.{n}", t) for n, t in reconstructor.named_buffers()]
    for name, tensor in named:
        if name not in blocks or blocks[name].shape != tensor.shape:
            raise ValidationError(f"Checkpoint {path} is missing or misshapes block '{name}'")
        tensor.data[...] = blocks[name]
    reconstructor.set_training(False)
    return reconstructor, config


def checkpoint_name(step: int) -> str:
    return f"ckpt_{step:06d}.bin"


def run_training(config: TrainConfig, dataset: Dataset, out_dir: Optional[str] = None,
                 resume: Optional[str] = None) -> str:
    """
    Train to `config.total_iterations`, writing log.csv, ckpt_*.bin and step_*.png under `out_dir`.

    Returns:
        Path of the final checkpoint
    """
    out_dir = out_dir or config.output_dir
    os.makedirs(out_dir, exist_ok=True)
    total = config.total_iterations(dataset.n_views)
    with Trainer(config, dataset) as trainer:
        if resume:
            trainer.load_checkpoint(resume)
        log = TrainingLog(os.path.join(out_dir, 'log.csv'), config.record_wall_time)
        log.start(trainer.step if resume else None)
        logger.info(f"🚀 Training {config.mode} (vpl={config.vpl}, texture={config.texture_prediction}) "
                    f"for {total} steps from step {trainer.step}")
        started = time.perf_counter() - trainer.wall_time
        final_path = os.path.join(out_dir, checkpoint_name(total))
        while trainer.step < total:
            record = trainer.train_step()
            trainer.wall_time = time.perf_counter() - started
            if record.step % config.log_every == 0 or record.step == total:
                log.append(record.step, record.loss_s, record.loss_c, record.loss_d, record.volume_mean,
                           trainer.wall_time)
                logger.info(f"📊 step {record.step}/{total}: L_s {record.loss_s:.4f}  L_c {record.loss_c:.4f}  "
                            f"L_d {record.loss_d:.4f}  volume {record.volume_mean:.4f}")
            if config.checkpoint_every and record.step % config.checkpoint_every == 0 and record.step != total:
                trainer.save_checkpoint(os.path.join(out_dir, checkpoint_name(record.step)))
            if config.sample_every and record.step % config.sample_every == 0:
                grid_path = os.path.join(out_dir, f"step_{record.step:06d}.png")
                try:
                    views = [trainer.dataset.objects[k].view(trainer.designated[trainer.dataset.objects[k].object_id])
                             for k in range(min(MAX_GRID_SAMPLES, trainer.dataset.n_objects))]
                    trainer.save_sample_grid(views, grid_path)
                except Exception as e:
                    logger.warning(f"⚠️ Could not write sample grid {grid_path}: {e}")
        trainer.save_checkpoint(final_path)
    logger.info(f"✅ Training finished: {final_path}")
    return final_path
