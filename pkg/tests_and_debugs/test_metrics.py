#!/usr/bin/env python3
"""
Metric tests: voxel IoU, Chamfer and EMD against brute force, rendered
silhouette IoU and the per-class evaluation table.
"""

import itertools
import os
import sys
import tempfile
from dataclasses import replace

import numpy as np

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from dataset import synth_primitives
from mesh_core import Mesh, make_cube_template
from metrics import (PointCloud, VoxelGrid, chamfer_distance, emd, evaluate_model, plain_mean, points_inside,
                     sample_surface, sample_volume, silhouette_iou, voxel_iou, voxelize)
from utils import ValidationError


def _box(half_extents, offset=(0.0, 0.0, 0.0)):
    template = make_cube_template(2)
    vertices = template.mesh.vertices * 2.0 * np.asarray(half_extents) + np.asarray(offset)
    return Mesh(vertices, template.mesh.faces, name='box')


def test_voxelized_box_matches_analytic_counts():
    # Centers at -0.9375 .. 0.9375 step 0.125: |c| < 0.5 keeps 8 per axis.
    grid = voxelize(_box((0.5, 0.5, 0.5)), resolution=16)
    assert grid.count == 8 ** 3
    assert grid.occupancy[8, 8, 8] and not grid.occupancy[0, 0, 0]


def test_voxel_iou_of_overlapping_boxes():
    a = voxelize(_box((0.5, 0.5, 0.5)), resolution=16)
    b = voxelize(_box((0.5, 0.5, 0.5), offset=(0.25, 0.0, 0.0)), resolution=16)
    # Shifted by two voxels along x: 6 of 8 slices shared.
    assert abs(voxel_iou(a, b) - 6.0 / 10.0) < 1e-12
    assert voxel_iou(a, a) == 1.0
    empty = VoxelGrid(np.zeros((16, 16, 16), dtype=bool))
    assert voxel_iou(empty, empty) == 1.0
    try:
        voxel_iou(a, voxelize(_box((0.5, 0.5, 0.5)), resolution=8))
        assert False, "resolution mismatch accepted"
    except ValidationError:
        pass


def test_points_inside_cube():
    mesh = _box((0.5, 0.5, 0.5))
    inside = points_inside(mesh, np.array([[0.1, 0.2, -0.3], [0.7, 0.1, -0.2], [0.0, -0.6, 0.05]]))
    assert inside.tolist() == [True, False, False]


def test_surface_and_volume_samples():
    mesh = _box((0.5, 0.25, 0.5))
    surface = sample_surface(mesh, 300, seed=1)
    on_face = np.isclose(np.abs(surface.points), [0.5, 0.25, 0.5], atol=1e-9).any(axis=1)
    assert np.all(on_face)
    volume = sample_volume(mesh, 300, seed=1)
    assert np.all(np.abs(volume.points) <= [0.5, 0.25, 0.5])
    assert np.array_equal(sample_surface(mesh, 50, seed=4).points, sample_surface(mesh, 50, seed=4).points)


def test_sampling_needs_points():
    for sampler in (sample_surface, sample_volume):
        try:
            sampler(_box((0.5, 0.5, 0.5)), 0)
            assert False, f"{sampler.__name__} accepted n = 0"
        except ValidationError:
            pass


def test_chamfer_tree_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(5):
        a = rng.normal(size=(200, 3))
        b = rng.normal(size=(150, 3))
        brute = chamfer_distance(a, b, method='brute')
        tree = chamfer_distance(a, b, method='tree')
        assert abs(brute - tree) < 1e-12
    assert chamfer_distance(a, a) == 0.0
    try:
        chamfer_distance(a, b, method='grid')
        assert False, "unknown chamfer method accepted"
    except ValidationError:
        pass


def test_emd_matches_permutation_search():
    for n in range(1, 7):
        perms = np.array(list(itertools.permutations(range(n))))
        for seed in range(1000):
            rng = np.random.default_rng([n, seed])
            a = rng.normal(size=(n, 3))
            b = rng.normal(size=(n, 3))
            cost = np.sqrt(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1))
            best = cost[np.arange(n), perms].mean(axis=1).min()
            assert abs(emd(a, b) - best) < 1e-12, (n, seed)
    rng = np.random.default_rng(1)
    try:
        emd(rng.normal(size=(3, 3)), rng.normal(size=(4, 3)))
        assert False, "unequal clouds accepted"
    except ValidationError:
        pass
    try:
        PointCloud(np.zeros((0, 3)))
        assert False, "empty cloud accepted"
    except ValidationError:
        pass


def test_plain_mean_is_left_to_right():
    values = [0.1, 0.2, 0.3]
    assert plain_mean(values) == ((0.1 + 0.2) + 0.3) / 3


def test_evaluate_model_scores_ground_truth_perfectly():
    with tempfile.TemporaryDirectory() as tmp:
        dataset = synth_primitives(0, 4, 2, ['box', 'cylinder'], 16, tmp, test_fraction=0.5)
        seen = []

        def predict(sample):
            obj = next(o for o in dataset.objects if o.object_id == sample.object_id)
            return dataset.load_mesh(obj)

        rows = evaluate_model(predict, dataset, split='test', resolution=16, n_points=64, seed=0,
                              on_prediction=lambda obj, k, mesh: seen.append((obj.object_id, k)))
        test_objects = [o for o in dataset.objects if o.split == 'test']
        assert len(seen) == 2 * len(test_objects)
        assert rows[-1].name == 'all'
        assert rows[-1].count == len(seen)
        for row in rows:
            assert row.iou == 1.0
            assert row.cd_s == 0.0 and row.cd_v == 0.0
            assert row.emd_s == 0.0 and row.emd_v == 0.0
            assert row.sil_iou >= 0.95
        assert [r.name for r in rows[:-1]] == sorted(r.name for r in rows[:-1])

        limited = evaluate_model(predict, dataset, split='train', resolution=16, n_points=32, max_views=1)
        assert limited[-1].count == len(dataset.objects) - len(test_objects)


def test_silhouette_iou_against_stored_views():
    with tempfile.TemporaryDirectory() as tmp:
        dataset = synth_primitives(5, 1, 4, ['box'], 16, tmp, test_fraction=0.0)
        obj = dataset.objects[0]
        truth = dataset.load_mesh(obj)
        speck = Mesh(truth.vertices * 1e-3, truth.faces, name='speck')
        for sample in obj.views:
            assert np.count_nonzero(sample.silhouette > 0.5) > 0
            assert silhouette_iou(truth, sample) >= 0.95
            # Covers no pixel, so nothing overlaps the stored mask.
            assert silhouette_iou(speck, sample) == 0.0
        blank = replace(obj.view(0), silhouette=np.zeros_like(obj.view(0).silhouette))
        assert silhouette_iou(speck, blank) == 1.0
        assert silhouette_iou(truth, blank) == 0.0


def test_class_mean_versus_sample_mean():
    with tempfile.TemporaryDirectory() as tmp:
        dataset = synth_primitives(2, 6, 1, ['box', 'ellipsoid'], 16, tmp, test_fraction=0.0)
        cube = _box((0.3, 0.3, 0.3))
        class_rows = evaluate_model(lambda s: cube, dataset, split='train', resolution=16, n_points=32)
        sample_rows = evaluate_model(lambda s: cube, dataset, split='train', resolution=16, n_points=32,
                                     per_sample_mean=True)
        per_class = class_rows[:-1]
        assert class_rows[-1].iou == plain_mean([r.iou for r in per_class])
        # Three objects per class, so both aggregations agree up to summation order.
        assert abs(sample_rows[-1].iou - class_rows[-1].iou) < 1e-12
        try:
            evaluate_model(lambda s: cube, dataset, split='test')
            assert False, "empty split scored"
        except ValidationError:
            pass


if __name__ == "__main__":
    from check_runner import run_tests
    sys.exit(1 if run_tests(globals(), "Metrics") else 0)
