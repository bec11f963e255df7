#!/usr/bin/env python3
"""
Dataset
On-disk view datasets (RGBA PNG views + manifest.json), procedural primitive
synthesis, augmentation and the single-/multi-view minibatch samplers.

Layout:
    root/manifest.json
    root/objects/<object_id>/view_<k>.png   (RGB color, silhouette in alpha)
    root/objects/<object_id>/mesh.obj       (ground truth, evaluation only)
"""

import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from mesh_core import Mesh, Viewpoint, face_normals, load_obj, make_cube_template, reversed_winding, \
    save_obj, signed_volume
from renderer import DEFAULT_DISTANCE, DEFAULT_FOV, Camera, rasterize
from utils import DatasetError, ValidationError, atomic_write_text, spawn_rngs

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
PRIMITIVE_CLASSES = ('box', 'ellipsoid', 'cylinder', 'cone', 'L-shape')
ELEVATION_RANGE = (-20.0, 30.0)
HALF_EXTENT_RANGE = (0.25, 0.6)
SPLITS = ('train', 'test')
_SEGMENTS = 24


@dataclass(frozen=True, eq=False)
class ViewSample:
    """One view: color (H, W, 3) and silhouette (H, W) in [0, 1] with its viewpoint."""
    image: np.ndarray
    silhouette: np.ndarray
    viewpoint: Viewpoint
    class_label: int
    object_id: str
    view_index: int = 0

    def __post_init__(self):
        if self.image.shape[:2] != self.silhouette.shape or self.image.shape[2:] != (3,):
            raise ValidationError(f"View {self.object_id}/{self.view_index}: image {self.image.shape} and "
                                  f"silhouette {self.silhouette.shape} do not match")
        if self.class_label < 0:
            raise ValidationError(f"View {self.object_id}: class label must be >= 0")

    @property
    def size(self) -> int:
        return self.silhouette.shape[0]


@dataclass(eq=False)
class ObjectRecord:
    object_id: str
    class_label: int
    class_name: str
    split: str
    viewpoints: List[Viewpoint]
    pixels: np.ndarray
    mesh_path: Optional[str] = None

    def view(self, k: int) -> ViewSample:
        rgba = self.pixels[k].astype(np.float32) / 255.0
        return ViewSample(rgba[..., :3], rgba[..., 3], self.viewpoints[k], self.class_label, self.object_id, k)

    @property
    def views(self) -> List[ViewSample]:
        return [self.view(k) for k in range(len(self.viewpoints))]


@dataclass(eq=False)
class Dataset:
    root: str
    image_size: int
    n_views: int
    classes: List[str]
    objects: List[ObjectRecord] = field(default_factory=list)

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def split(self, name: str) -> 'Dataset':
        """Objects of one split (views shared, not copied)."""
        if name not in SPLITS:
            raise ValidationError(f"Unknown split '{name}' (expected one of {SPLITS})")
        return Dataset(self.root, self.image_size, self.n_views, self.classes,
                       [obj for obj in self.objects if obj.split == name])

    def viewpoints(self) -> List[Viewpoint]:
        """The viewpoint multiset of every view."""
        return [vp for obj in self.objects for vp in obj.viewpoints]

    def load_mesh(self, obj: ObjectRecord) -> Mesh:
        if not obj.mesh_path:
            raise DatasetError(f"Object {obj.object_id} has no ground-truth mesh", self.root)
        path = os.path.join(self.root, obj.mesh_path)
        if not os.path.exists(path):
            raise DatasetError(f"Missing ground-truth mesh of {obj.object_id}", path)
        return load_obj(path, name=obj.object_id)


def _require(entry: Dict, key: str, path: str, where: str):
    if key not in entry:
        raise DatasetError(f"Manifest {where} is missing '{key}'", path)
    return entry[key]


def load_dataset(root: str) -> Dataset:
    """Read and validate a dataset directory."""
    manifest_path = os.path.join(root, 'manifest.json')
    try:
        with open(manifest_path, 'r', encoding='utf-8') as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise DatasetError("Dataset has no manifest", manifest_path)
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"Malformed manifest: {e}", manifest_path)
    if not isinstance(manifest, dict):
        raise DatasetError("Manifest must be a JSON object", manifest_path)

    version = _require(manifest, 'version', manifest_path, 'header')
    if version != MANIFEST_VERSION:
        raise DatasetError(f"Unsupported manifest version {version}", manifest_path)
    image_size = int(_require(manifest, 'image_size', manifest_path, 'header'))
    n_views = int(_require(manifest, 'n_views', manifest_path, 'header'))
    classes = list(_require(manifest, 'classes', manifest_path, 'header'))
    entries = _require(manifest, 'objects', manifest_path, 'header')
    if n_views < 1:
        raise DatasetError(f"n_views must be >= 1, got {n_views}", manifest_path)

    objects = []
    seen = set()
    for i, entry in enumerate(entries):
        where = f"object #{i}"
        object_id = str(_require(entry, 'object_id', manifest_path, where))
        if object_id in seen:
            raise DatasetError(f"Duplicate object id {object_id}", manifest_path)
        seen.add(object_id)
        label = int(_require(entry, 'class_label', manifest_path, object_id))
        if not 0 <= label < len(classes):
            raise DatasetError(f"Object {object_id}: class label {label} outside {len(classes)} classes",
                               manifest_path)
        split = entry.get('split', 'train')
        if split not in SPLITS:
            raise DatasetError(f"Object {object_id}: unknown split '{split}'", manifest_path)
        views = _require(entry, 'views', manifest_path, object_id)
        if len(views) != n_views:
            raise DatasetError(f"Object {object_id} has {len(views)} views, dataset declares {n_views}",
                               manifest_path)
        viewpoints, pixels = [], []
        for k, view in enumerate(views):
            try:
                viewpoints.append(Viewpoint.from_dict(view))
            except ValidationError as e:
                raise DatasetError(f"Object {object_id} view {k}: {e}", manifest_path)
            image_path = os.path.join(root, _require(view, 'file', manifest_path, f"{object_id} view {k}"))
            try:
                with Image.open(image_path) as img:
                    rgba = np.asarray(img.convert('RGBA'), dtype=np.uint8)
            except (OSError, ValueError) as e:
                raise DatasetError(f"Cannot read view image: {e}", image_path)
            if rgba.shape[:2] != (image_size, image_size):
                raise DatasetError(f"View is {rgba.shape[1]}x{rgba.shape[0]}, dataset declares {image_size}",
                                   image_path)
            pixels.append(rgba)
        objects.append(ObjectRecord(object_id, label, str(entry.get('class_name', classes[label])), split,
                                    viewpoints, np.stack(pixels), entry.get('mesh')))

    logger.info(f"📂 Loaded dataset {root}: {len(objects)} objects, {n_views} views, {len(classes)} classes")
    return Dataset(root, image_size, n_views, classes, objects)


def _oriented(mesh: Mesh) -> Mesh:
    return reversed_winding(mesh) if signed_volume(mesh) < 0 else mesh


def _extrude(outline: np.ndarray, caps: Sequence[Tuple[int, int, int]], half_width: float,
             axis: int, name: str) -> Mesh:
    """Prism: a closed 2D outline (in the plane normal to `axis`) swept over [-w, w] along `axis`."""
    n = len(outline)
    other = [a for a in range(3) if a != axis]
    vertices = np.zeros((2 * n, 3))
    for layer, coord in enumerate((-half_width, half_width)):
        vertices[layer * n:(layer + 1) * n, other[0]] = outline[:, 0]
        vertices[layer * n:(layer + 1) * n, other[1]] = outline[:, 1]
        vertices[layer * n:(layer + 1) * n, axis] = coord
    faces = []
    for a, b, c in caps:
        faces.append((a, c, b))
        faces.append((n + a, n + b, n + c))
    for i in range(n):
        j = (i + 1) % n
        faces.append((i, j, n + j))
        faces.append((i, n + j, n + i))
    return _oriented(Mesh(vertices, np.array(faces), name=name))


def _polygon_fan(n: int) -> List[Tuple[int, int, int]]:
    return [(0, k, k + 1) for k in range(1, n - 1)]


def make_primitive(kind: str, rng: np.random.Generator, name: str = 'primitive') -> Mesh:
    """
    Closed, outward-wound primitive centered at the origin and mirror symmetric in x.

    Half-extents are drawn from HALF_EXTENT_RANGE.
    """
    lo, hi = HALF_EXTENT_RANGE
    extents = rng.uniform(lo, hi, size=3)
    if kind == 'box':
        template = make_cube_template(4)
        return _oriented(Mesh(template.mesh.vertices * 2.0 * extents, template.mesh.faces, name=name))
    if kind == 'ellipsoid':
        template = make_cube_template(8)
        unit = template.mesh.vertices / np.linalg.norm(template.mesh.vertices, axis=1, keepdims=True)
        return _oriented(Mesh(unit * extents, template.mesh.faces, name=name))
    if kind in ('cylinder', 'cone'):
        angles = 2.0 * np.pi * np.arange(_SEGMENTS) / _SEGMENTS
        ring = np.stack([extents[0] * np.sin(angles), extents[2] * np.cos(angles)], axis=1)
        if kind == 'cylinder':
            return _extrude(ring, _polygon_fan(_SEGMENTS), extents[1], axis=1, name=name)
        vertices = np.zeros((_SEGMENTS + 1, 3))
        vertices[:_SEGMENTS, 0], vertices[:_SEGMENTS, 2] = ring[:, 0], ring[:, 1]
        vertices[:_SEGMENTS, 1] = -extents[1]
        vertices[_SEGMENTS, 1] = extents[1]
        apex = _SEGMENTS
        faces = [(0, k + 1, k) for k in range(1, _SEGMENTS - 1)]
        faces += [(k, (k + 1) % _SEGMENTS, apex) for k in range(_SEGMENTS)]
        return _oriented(Mesh(vertices, np.array(faces), name=name))
    if kind == 'L-shape':
        depth, height = extents[2], extents[1]
        thickness = rng.uniform(0.35, 0.6)
        tz, ty = -depth + 2 * depth * thickness, -height + 2 * height * thickness
        # (z, y) corners, counter-clockwise from the reflex corner.
        outline = np.array([(tz, ty), (tz, height), (-depth, height), (-depth, -height),
                            (depth, -height), (depth, ty)])
        return _extrude(outline[:, ::-1], _polygon_fan(len(outline)), extents[0], axis=0, name=name)
    raise ValidationError(f"Unknown primitive class '{kind}' (expected one of {PRIMITIVE_CLASSES})")


def shade_faces(mesh: Mesh, base_color: np.ndarray) -> np.ndarray:
    """Per-face colors: base color times a fixed directional-light factor."""
    normals, _ = face_normals(mesh)
    light = np.array([0.4, 0.8, 0.45])
    light /= np.linalg.norm(light)
    factor = 0.55 + 0.45 * np.abs(normals @ light)
    return np.clip(base_color[None, :] * factor[:, None], 0.0, 1.0)


def random_viewpoint(rng: np.random.Generator, distance: float = DEFAULT_DISTANCE) -> Viewpoint:
    azimuth = rng.uniform(0.0, 360.0)
    elevation = rng.uniform(*ELEVATION_RANGE)
    return Viewpoint(azimuth, elevation, distance)


def synth_primitives(seed: int, n_objects: int, n_views: int, classes: Sequence[str], size: int,
                     out: str, test_fraction: float = 0.2, fov: float = DEFAULT_FOV,
                     distance: float = DEFAULT_DISTANCE) -> Dataset:
    """
    Write a procedural primitive dataset to `out` and return it loaded.

    Objects cycle through `classes`; shape parameters, colors, viewpoints and
    the train/test split all come from independent streams of `seed`.
    """
    classes = list(classes)
    unknown = [c for c in classes if c not in PRIMITIVE_CLASSES]
    if not classes or unknown:
        raise ValidationError(f"Unknown primitive classes {unknown} (expected a subset of {PRIMITIVE_CLASSES})")
    if n_objects < 1 or n_views < 1:
        raise ValidationError(f"Need at least one object and one view, got {n_objects}/{n_views}")
    if not 0.0 <= test_fraction < 1.0:
        raise ValidationError(f"test_fraction must be in [0, 1), got {test_fraction}")

    rngs = spawn_rngs(seed, ['shapes', 'colors', 'views', 'split'])
    n_test = min(int(round(n_objects * test_fraction)), n_objects - 1)
    test_ids = set(rngs['split'].permutation(n_objects)[:n_test].tolist())

    entries = []
    for i in range(n_objects):
        class_label = i % len(classes)
        class_name = classes[class_label]
        object_id = f"{class_name}_{i:04d}"
        mesh = make_primitive(class_name, rngs['shapes'], name=object_id)
        base_color = rngs['colors'].uniform(0.25, 1.0, size=3)
        mesh = Mesh(mesh.vertices, mesh.faces, face_colors=shade_faces(mesh, base_color), name=object_id)

        object_dir = os.path.join(out, 'objects', object_id)
        os.makedirs(object_dir, exist_ok=True)
        save_obj(mesh, os.path.join(object_dir, 'mesh.obj'))
        views = []
        for k in range(n_views):
            vp = random_viewpoint(rngs['views'], distance)
            render = rasterize(mesh, Camera(vp, fov=fov, image_size=size))
            if not np.any(render.alpha > 0):
                logger.warning(f"⚠️ Empty silhouette for {object_id} view {k}")
            rgba = np.concatenate([render.color, render.alpha[..., None]], axis=-1)
            Image.fromarray(np.clip(np.round(rgba * 255.0), 0, 255).astype(np.uint8)).save(
                os.path.join(object_dir, f"view_{k}.png"))
            views.append({'file': f"objects/{object_id}/view_{k}.png", **vp.to_dict()})
        entries.append({'object_id': object_id, 'class_label': class_label, 'class_name': class_name,
                        'split': 'test' if i in test_ids else 'train',
                        'mesh': f"objects/{object_id}/mesh.obj", 'views': views})
        logger.debug(f"Synthesized {object_id}")

    manifest = {'version': MANIFEST_VERSION, 'image_size': size, 'n_views': n_views, 'classes': classes,
                'fov': fov, 'seed': seed, 'objects': entries}
    atomic_write_text(os.path.join(out, 'manifest.json'), json.dumps(manifest, indent=2, sort_keys=True))
    logger.info(f"✅ Wrote {n_objects} objects x {n_views} views to {out} ({n_test} test objects)")
    return load_dataset(out)


def augment(sample: ViewSample, rng: np.random.Generator) -> ViewSample:
    """
    Random color-channel flip and horizontal flip, each with probability 1/2.

    A horizontal flip also mirrors the viewpoint (azimuth -> 360 - azimuth).
    Both draws are always made so the stream advances identically.
    """
    return apply_flips(sample, *_draw_flips(rng))


def augment_pair(first: ViewSample, second: ViewSample,
                 rng: np.random.Generator) -> Tuple[ViewSample, ViewSample]:
    """Two views of one object get the same flips, so they stay views of one (mirrored) object."""
    flips = _draw_flips(rng)
    return apply_flips(first, *flips), apply_flips(second, *flips)


def _draw_flips(rng: np.random.Generator) -> Tuple[bool, bool]:
    flip_channels = bool(rng.random() < 0.5)
    flip_horizontal = bool(rng.random() < 0.5)
    return flip_channels, flip_horizontal


def apply_flips(sample: ViewSample, flip_channels: bool, flip_horizontal: bool) -> ViewSample:
    image, silhouette, viewpoint = sample.image, sample.silhouette, sample.viewpoint
    if flip_channels:
        image = image[..., ::-1]
    if flip_horizontal:
        image = image[:, ::-1]
        silhouette = silhouette[:, ::-1]
        viewpoint = viewpoint.flipped()
    if not (flip_channels or flip_horizontal):
        return sample
    return replace(sample, image=np.ascontiguousarray(image), silhouette=np.ascontiguousarray(silhouette),
                   viewpoint=viewpoint)


def designated_views(dataset: Dataset, seed: int) -> Dict[str, int]:
    """The single training view of each object, fixed for a whole run by `seed`."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    return {obj.object_id: int(rng.integers(dataset.n_views)) for obj in dataset.objects}


def _pick_objects(dataset: Dataset, batch: int, rng: np.random.Generator) -> np.ndarray:
    if dataset.n_objects == 0:
        raise DatasetError("Cannot sample from an empty dataset", dataset.root)
    if batch < 1:
        raise ValidationError(f"Batch size must be >= 1, got {batch}")
    return rng.choice(dataset.n_objects, size=batch, replace=batch > dataset.n_objects)


def sample_single_view_batch(dataset: Dataset, batch: int, rng: np.random.Generator,
                             designated: Dict[str, int]) -> List[ViewSample]:
    picks = _pick_objects(dataset, batch, rng)
    return [dataset.objects[i].view(designated[dataset.objects[i].object_id]) for i in picks]


def sample_multi_view_batch(dataset: Dataset, batch: int,
                            rng: np.random.Generator) -> List[Tuple[ViewSample, ViewSample]]:
    """Two distinct views of the same object per element."""
    if dataset.n_views < 2:
        raise DatasetError(f"Multi-view sampling needs at least 2 views per object, dataset has "
                           f"{dataset.n_views}", dataset.root)
    picks = _pick_objects(dataset, batch, rng)
    pairs = []
    for i in picks:
        a, b = rng.choice(dataset.n_views, size=2, replace=False)
        obj = dataset.objects[i]
        pairs.append((obj.view(int(a)), obj.view(int(b))))
    return pairs


def sample_unobserved_viewpoint(viewpoints: Union[Dataset, Sequence[Viewpoint]], observed: Viewpoint,
                                rng: np.random.Generator) -> Viewpoint:
    """Uniform draw from the viewpoint set excluding entries equal to `observed`."""
    pool = viewpoints.viewpoints() if isinstance(viewpoints, Dataset) else list(viewpoints)
    candidates = [vp for vp in pool if vp != observed]
    if not candidates:
        raise ValidationError(f"No unobserved viewpoint available in a set of {len(pool)}")
    return candidates[int(rng.integers(len(candidates)))]
