#!/usr/bin/env python3
"""
Evaluation Metrics
Filled-interior voxelization by parity ray casting, voxel IoU, surface and
volume point sampling, Chamfer distance, exact earth mover's distance and the
rendered silhouette IoU, plus the per-class evaluation table.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from mesh_core import Mesh
from renderer import DEFAULT_FOV, DEFAULT_SUPERSAMPLE, Camera, rasterize
from utils import MeshError, NumericalError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 32
VOLUME_RESOLUTION = 128
DEFAULT_BOX = (-1.0, 1.0)
BRUTE_FORCE_MAX = 2048
EMD_MAX_POINTS = 512
MIN_ACCEPTANCE = 1e-4
DISTANCE_SCALE = 100.0
METRIC_COLUMNS = ('iou', 'cd_s', 'cd_v', 'emd_s', 'emd_v', 'sil_iou')
MASK_THRESHOLD = 0.5

# Fixed sub-voxel offsets for ray origins so rays never graze template edges.
_RAY_JITTER = (1.234567e-7, 2.718281e-7)
_RAY_CHUNK = 512


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """R x R x R occupancy over the axis-aligned cube [box_min, box_max]^3, indexed [x, y, z]."""
    occupancy: np.ndarray
    box_min: float = DEFAULT_BOX[0]
    box_max: float = DEFAULT_BOX[1]

    def __post_init__(self):
        occ = np.asarray(self.occupancy, dtype=bool)
        if occ.ndim != 3 or len(set(occ.shape)) != 1 or occ.shape[0] < 2:
            raise ValidationError(f"Voxel occupancy must be R x R x R with R >= 2, got {occ.shape}")
        object.__setattr__(self, 'occupancy', occ)

    @property
    def resolution(self) -> int:
        return self.occupancy.shape[0]

    @property
    def count(self) -> int:
        return int(self.occupancy.sum())


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    kind: str = 'surface'

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(pts) < 1 or not np.all(np.isfinite(pts)):
            raise ValidationError("Point cloud must be nonempty and finite")
        object.__setattr__(self, 'points', pts)

    def __len__(self):
        return len(self.points)


def voxel_centers(resolution: int, box: Tuple[float, float] = DEFAULT_BOX) -> np.ndarray:
    step = (box[1] - box[0]) / resolution
    return box[0] + (np.arange(resolution) + 0.5) * step


def _ray_crossings(mesh: Mesh, ys: np.ndarray, zs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Intersections of +x-parallel lines through (y, z) with the mesh.

    Returns:
        (ray index, x of the hit) for every line/face intersection
    """
    tri = mesh.triangles()
    ay, az = tri[:, 0, 1], tri[:, 0, 2]
    ey1, ez1 = tri[:, 1, 1] - ay, tri[:, 1, 2] - az
    ey2, ez2 = tri[:, 2, 1] - ay, tri[:, 2, 2] - az
    denom = ey1 * ez2 - ez1 * ey2
    usable = np.abs(denom) > 1e-15
    tri, ay, az, ey1, ez1, ey2, ez2, denom = (a[usable] for a in (tri, ay, az, ey1, ez1, ey2, ez2, denom))
    y_lo, y_hi = tri[:, :, 1].min(axis=1), tri[:, :, 1].max(axis=1)
    z_lo, z_hi = tri[:, :, 2].min(axis=1), tri[:, :, 2].max(axis=1)

    ray_ids, hits = [], []
    for start in range(0, len(ys), _RAY_CHUNK):
        py = ys[start:start + _RAY_CHUNK, None]
        pz = zs[start:start + _RAY_CHUNK, None]
        near = (py >= y_lo) & (py <= y_hi) & (pz >= z_lo) & (pz <= z_hi)
        r, f = np.nonzero(near)
        if len(r) == 0:
            continue
        dy, dz = py[r, 0] - ay[f], pz[r, 0] - az[f]
        w1 = (dy * ez2[f] - dz * ey2[f]) / denom[f]
        w2 = (ey1[f] * dz - ez1[f] * dy) / denom[f]
        w0 = 1.0 - w1 - w2
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        r, f = r[inside], f[inside]
        x = w0[inside] * tri[f, 0, 0] + w1[inside] * tri[f, 1, 0] + w2[inside] * tri[f, 2, 0]
        ray_ids.append(r + start)
        hits.append(x)
    if not ray_ids:
        return np.zeros(0, np.int64), np.zeros(0)
    return np.concatenate(ray_ids), np.concatenate(hits)


def _inside_along_rays(mesh: Mesh, ys: np.ndarray, zs: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """
    Parity test: query k lies inside iff an odd number of hits on ray k
    lie beyond xs[k]. `xs` is (n_rays, m) query positions per ray.
    """
    ray_ids, hit_x = _ray_crossings(mesh, ys, zs)
    per_ray = np.bincount(ray_ids, minlength=len(ys))
    odd = np.flatnonzero(per_ray % 2)
    if len(odd):
        raise MeshError(f"Mesh '{mesh.name}' is not closed: {len(odd)} rays cross its surface an odd "
                        f"number of times", mesh_name=mesh.name)
    beyond = np.zeros(xs.shape, dtype=np.int64)
    order = np.argsort(ray_ids, kind='stable')
    ray_ids, hit_x = ray_ids[order], hit_x[order]
    bounds = np.concatenate([[0], np.cumsum(per_ray)])
    for k in np.flatnonzero(per_ray):
        row_hits = np.sort(hit_x[bounds[k]:bounds[k + 1]])
        beyond[k] = len(row_hits) - np.searchsorted(row_hits, xs[k], side='right')
    return beyond % 2 == 1


def voxelize(mesh: Mesh, resolution: int = DEFAULT_RESOLUTION,
             box: Tuple[float, float] = DEFAULT_BOX) -> VoxelGrid:
    """Occupancy of voxel centers inside a closed mesh (interiors filled)."""
    if resolution < 2:
        raise ValidationError(f"Voxel resolution must be >= 2, got {resolution}")
    centers = voxel_centers(resolution, box)
    yy, zz = np.meshgrid(centers, centers, indexing='ij')
    ys = yy.reshape(-1) + _RAY_JITTER[0]
    zs = zz.reshape(-1) + _RAY_JITTER[1]
    xs = np.broadcast_to(centers, (len(ys), resolution))
    inside = _inside_along_rays(mesh, ys, zs, xs)
    occupancy = inside.reshape(resolution, resolution, resolution).transpose(2, 0, 1)
    return VoxelGrid(occupancy, box[0], box[1])


def points_inside(mesh: Mesh, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return _inside_along_rays(mesh, points[:, 1], points[:, 2], points[:, :1])[:, 0]


def voxel_iou(a: VoxelGrid, b: VoxelGrid) -> float:
    """|a and b| / |a or b|; two empty grids count as identical."""
    if a.resolution != b.resolution or (a.box_min, a.box_max) != (b.box_min, b.box_max):
        raise ValidationError(f"Voxel grids differ: R={a.resolution}/{b.resolution}, "
                              f"box=({a.box_min}, {a.box_max})/({b.box_min}, {b.box_max})")
    union = int(np.logical_or(a.occupancy, b.occupancy).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a.occupancy, b.occupancy).sum()) / union


def sample_surface(mesh: Mesh, n: int, seed: int = 0) -> PointCloud:
    """Area-weighted face choice, then uniform barycentric sampling inside the face."""
    if n < 1:
        raise ValidationError(f"Need at least one sample point, got {n}")
    rng = np.random.default_rng(seed)
    tri = mesh.triangles()
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    total = areas.sum()
    if total <= 0:
        raise NumericalError(f"Mesh '{mesh.name}' has zero surface area")
    face = rng.choice(len(tri), size=n, p=areas / total)
    s = np.sqrt(rng.random(n))
    r = rng.random(n)
    w = np.stack([1.0 - s, s * (1.0 - r), s * r], axis=1)
    return PointCloud(np.einsum('nk,nkc->nc', w, tri[face]), 'surface')


def sample_volume(mesh: Mesh, n: int, seed: int = 0) -> PointCloud:
    """Rejection sampling of bounding-box points that pass the parity inside test."""
    if n < 1:
        raise ValidationError(f"Need at least one sample point, got {n}")
    rng = np.random.default_rng(seed)
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    accepted: List[np.ndarray] = []
    n_accepted, n_drawn = 0, 0
    batch = max(4 * n, 1024)
    max_draws = int(np.ceil(n / MIN_ACCEPTANCE))
    while n_accepted < n:
        candidates = lo + (hi - lo) * rng.random((batch, 3))
        keep = candidates[points_inside(mesh, candidates)]
        n_drawn += batch
        accepted.append(keep)
        n_accepted += len(keep)
        if n_accepted < n and (n_drawn >= max_draws or n_accepted / n_drawn < MIN_ACCEPTANCE):
            raise NumericalError(f"Volume sampling of mesh '{mesh.name}' accepted {n_accepted}/{n_drawn} "
                                 f"points (below {MIN_ACCEPTANCE})")
    return PointCloud(np.concatenate(accepted)[:n], 'volume')


def _points(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else PointCloud(cloud).points


def _nearest_sq_brute(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
    return d2.min(axis=1)


def _nearest_sq_tree(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _, idx = cKDTree(b).query(a, k=1)
    return np.sum((a - b[idx]) ** 2, axis=-1)


def chamfer_distance(a, b, method: str = 'auto') -> float:
    """
    Mean squared nearest-neighbour distance A -> B plus B -> A.

    `method` is 'brute', 'tree' or 'auto' (brute force up to 2048 points).
    Tree distances are recomputed from coordinates.
    """
    pa, pb = _points(a), _points(b)
    if method == 'auto':
        method = 'brute' if max(len(pa), len(pb)) <= BRUTE_FORCE_MAX else 'tree'
    if method == 'brute':
        nearest = _nearest_sq_brute
    elif method == 'tree':
        nearest = _nearest_sq_tree
    else:
        raise ValidationError(f"Unknown chamfer method '{method}'")
    return float(nearest(pa, pb).mean() + nearest(pb, pa).mean())


def emd(a, b) -> float:
    """Minimum mean Euclidean distance over perfect matchings (exact assignment)."""
    pa, pb = _points(a), _points(b)
    if len(pa) != len(pb):
        raise ValidationError(f"EMD needs equal-size clouds, got {len(pa)} and {len(pb)}")
    if len(pa) > EMD_MAX_POINTS:
        raise ValidationError(f"Exact EMD is limited to {EMD_MAX_POINTS} points, got {len(pa)}")
    cost = np.sqrt(np.sum((pa[:, None, :] - pb[None, :, :]) ** 2, axis=-1))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


@dataclass
class EvalRow:
    """Metrics of one class (or `all`); CD and EMD are scaled by DISTANCE_SCALE."""
    name: str
    iou: float
    cd_s: float
    cd_v: float
    emd_s: float
    emd_v: float
    sil_iou: float = 0.0
    count: int = 0

    def values(self) -> Tuple[float, ...]:
        return tuple(getattr(self, c) for c in METRIC_COLUMNS)


def plain_mean(values: Sequence[float]) -> float:
    """Left-to-right sum / count, the aggregation every table row uses."""
    return sum(values) / len(values)


def silhouette_iou(prediction: Mesh, sample, fov: float = DEFAULT_FOV,
                   supersample: int = DEFAULT_SUPERSAMPLE) -> float:
    """
    IoU of the prediction's mask rendered at the sample's viewpoint against the stored view mask.

    Rendered alpha is quantized to 8 bits like a stored view before both sides
    are thresholded at MASK_THRESHOLD. Two empty masks score 1.
    """
    camera = Camera(sample.viewpoint, fov=fov, image_size=sample.size)
    alpha = np.round(rasterize(prediction, camera, supersample=supersample).alpha * 255.0) / 255.0
    rendered = alpha > MASK_THRESHOLD
    target = np.asarray(sample.silhouette) > MASK_THRESHOLD
    union = np.count_nonzero(rendered | target)
    if union == 0:
        return 1.0
    return np.count_nonzero(rendered & target) / union


def score_prediction(prediction: Mesh, ground_truth: Mesh, resolution: int = DEFAULT_RESOLUTION,
                     n_points: int = EMD_MAX_POINTS, seed: int = 0,
                     gt_voxels: Optional[VoxelGrid] = None) -> Dict[str, float]:
    """IoU, CD and EMD (surface and volume samples) of one reconstruction."""
    pred_voxels = voxelize(prediction, resolution)
    gt_voxels = gt_voxels or voxelize(ground_truth, resolution)
    surf_seed, vol_seed = np.random.SeedSequence(seed).generate_state(2)
    pred_s = sample_surface(prediction, n_points, int(surf_seed))
    gt_s = sample_surface(ground_truth, n_points, int(surf_seed))
    pred_v = sample_volume(prediction, n_points, int(vol_seed))
    gt_v = sample_volume(ground_truth, n_points, int(vol_seed))
    return {
        'iou': voxel_iou(pred_voxels, gt_voxels),
        'cd_s': DISTANCE_SCALE * chamfer_distance(pred_s, gt_s),
        'cd_v': DISTANCE_SCALE * chamfer_distance(pred_v, gt_v),
        'emd_s': DISTANCE_SCALE * emd(pred_s, gt_s),
        'emd_v': DISTANCE_SCALE * emd(pred_v, gt_v),
    }


def evaluate_model(predict: Callable, dataset, split: str = 'test', resolution: int = DEFAULT_RESOLUTION,
                   n_points: int = EMD_MAX_POINTS, seed: int = 0, per_sample_mean: bool = False,
                   max_views: Optional[int] = None, fov: float = DEFAULT_FOV,
                   on_prediction: Optional[Callable] = None) -> List[EvalRow]:
    """
    Reconstruct every view of every object in `split` and score it against the object's mesh.

    Args:
        predict: ViewSample -> Mesh
        dataset: loaded Dataset with ground-truth meshes
        per_sample_mean: `all` row averages samples instead of class rows
        fov: camera field of view the views were rendered with (silhouette IoU)
        max_views: score at most this many views per object
        on_prediction: optional callback (object record, view index, predicted mesh)

    Returns:
        One EvalRow per class (sorted by class name) followed by the `all` row
    """
    objects = [obj for obj in dataset.objects if obj.split == split]
    per_class: Dict[str, List[Dict[str, float]]] = {}
    for obj_index, obj in enumerate(objects):
        ground_truth = dataset.load_mesh(obj)
        gt_voxels = voxelize(ground_truth, resolution)
        views = obj.views[:max_views] if max_views else obj.views
        for view_index, sample in enumerate(views):
            sample_seed = int(np.random.SeedSequence([seed, obj_index, view_index]).generate_state(1)[0])
            prediction = predict(sample)
            if on_prediction is not None:
                on_prediction(obj, view_index, prediction)
            try:
                scores = score_prediction(prediction, ground_truth, resolution, n_points, sample_seed, gt_voxels)
                scores['sil_iou'] = silhouette_iou(prediction, sample, fov)
            except (MeshError, NumericalError) as e:
                raise type(e)(f"{e} [object {obj.object_id}, view {view_index}]") from e
            per_class.setdefault(obj.class_name, []).append(scores)
        logger.debug(f"Scored object {obj.object_id} ({obj.class_name})")

    if not per_class:
        raise ValidationError(f"Evaluation found no samples in split '{split}'")

    rows = []
    for name in sorted(per_class):
        records = per_class[name]
        rows.append(EvalRow(name, *(plain_mean([r[c] for r in records]) for c in METRIC_COLUMNS),
                            count=len(records)))
    if per_sample_mean:
        every = [r for records in per_class.values() for r in records]
        all_values = [plain_mean([r[c] for r in every]) for c in METRIC_COLUMNS]
    else:
        all_values = [plain_mean([getattr(row, c) for row in rows]) for c in METRIC_COLUMNS]
    rows.append(EvalRow('all', *all_values, count=sum(row.count for row in rows)))
    for row in rows:
        logger.info(f"📊 {row.name}: IoU {row.iou:.4f}  CD_s {row.cd_s:.4f}  CD_v {row.cd_v:.4f}  "
                    f"EMD_s {row.emd_s:.4f}  EMD_v {row.emd_v:.4f}  silhouette IoU {row.sil_iou:.4f}  "
                    f"(n={row.count})")
    return rows
