#!/usr/bin/env python3
"""
Trainer tests on a tiny primitive dataset: config resolution, the
adversarial wiring identities, determinism and resume.
"""

import os
import shutil
import sys
import tempfile

import numpy as np

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from dataset import synth_primitives
from nn_layers import gradient_norms
from run_storage import load_checkpoint, read_log_csv
from trainer import PRESETS, Reconstructor, TrainConfig, Trainer, load_reconstructor, resolve_config, run_training
from utils import ValidationError

_DATASETS = {}


def _dataset(n_views=3):
    """Shared 16 px dataset per view count, synthesized once per test session."""
    if n_views not in _DATASETS:
        root = tempfile.mkdtemp(prefix='vpl_trainer_test_')
        _DATASETS[n_views] = synth_primitives(11, 4, n_views, ['box', 'cone'], 16, root, test_fraction=0.0)
    return _DATASETS[n_views]


def _config(weights=None, **training):
    base = {'image_size': 16, 'network_scale': 0.0625, 'batch_size': 2, 'iterations': 4, 'checkpoint_every': 2,
            'log_every': 1, 'seed': 3}
    base.update(training)
    raw = {'training': base, 'weights': {'n_scales': 3, **(weights or {})},
           'logging': {'record_wall_time': False}}
    return TrainConfig.from_dict(raw)


def _parameters(module):
    return [t.data.copy() for _, t in module.named_parameters()]


def _grads(module):
    return [t.grad.copy() for _, t in module.named_parameters()]


def _elements(trainer, count=2):
    views = [obj.view(trainer.designated[obj.object_id]) for obj in trainer.dataset.objects[:count]]
    return [(v, [v]) for v in views]


def test_presets_and_overrides():
    resolved = resolve_config({'training': {'batch_size': 8}}, 'shapenet_single_vpl')
    assert resolved['training']['vpl'] is True
    assert resolved['training']['batch_size'] == 8
    assert resolved['weights']['lambda_d'] == 0.2
    assert resolved['preset'] == 'shapenet_single_vpl'
    assert PRESETS['pascal_agnostic_texture_vpl']['training']['iterations'] == 250000
    config = TrainConfig.from_dict(resolve_config({}, 'shapenet_multi'))
    assert config.total_iterations(20) == 25000 * 20
    for raw, preset in (({}, 'imagenet'), ({'training': {'mode': 'triple_view'}}, None),
                        ({'weights': {'lambda_p': -1.0}}, None), ({'training': {'colour': True}}, None)):
        try:
            TrainConfig.from_dict(resolve_config(raw, preset))
            assert False, f"{raw} / {preset} accepted"
        except ValidationError:
            pass


def test_config_round_trip():
    config = _config(vpl=True, conditioning='viewpoint+class', texture_prediction=True, texture_size=8)
    again = TrainConfig.from_dict(config.to_dict())
    assert again == config


def test_trainer_rejects_mismatched_images():
    try:
        Trainer(_config(image_size=32), _dataset())
        assert False, "16 px dataset accepted by a 32 px trainer"
    except ValidationError:
        pass


def test_reversal_equals_scaled_iterative_gradient():
    config = _config(vpl=True, iterative_adversarial_weight=1.0, weights={'lambda_d': 0.5, 'lambda_p': 0.0})
    trainer = Trainer(config, _dataset())
    trainer.discriminator.set_training(False)
    elements = _elements(trainer)
    state = trainer.rngs['viewpoint'].bit_generator.state

    trainer.reconstructor_gradients(elements, 'gradient_reversal', include_reconstruction=False)
    reversal = _grads(trainer.reconstructor)
    trainer.rngs['viewpoint'].bit_generator.state = state
    trainer.reconstructor_gradients(elements, 'iterative', include_reconstruction=False)
    iterative = _grads(trainer.reconstructor)

    assert any(np.any(g != 0) for g in reversal)
    for r, i in zip(reversal, iterative):
        assert np.array_equal(r, 0.5 * i)


def test_zero_lambda_d_matches_training_without_vpl():
    plain = Trainer(_config(vpl=False, iterations=50, batch_size=1), _dataset())
    silent = Trainer(_config(vpl=True, iterations=50, batch_size=1, weights={'lambda_d': 0.0}), _dataset())
    for _ in range(50):
        plain.train_step()
        silent.train_step()
    assert plain.step == silent.step == 50
    for a, b in zip(_parameters(plain.reconstructor), _parameters(silent.reconstructor)):
        assert np.array_equal(a, b)


def test_discriminator_pass_leaves_reconstructor_untouched():
    trainer = Trainer(_config(vpl=True, adversarial_optimization='iterative'), _dataset())
    before = _parameters(trainer.reconstructor)
    disc_before = _parameters(trainer.discriminator)
    fwd = trainer._forward(_elements(trainer))
    result = trainer.discriminator_pass(fwd)
    assert np.isfinite(result.loss)
    for a, b in zip(before, _parameters(trainer.reconstructor)):
        assert np.array_equal(a, b)
    assert any(not np.array_equal(a, b) for a, b in zip(disc_before, _parameters(trainer.discriminator)))

    record = trainer.train_step()
    assert record.step == 1 and np.isfinite(record.loss_d)


def test_multi_view_pair_of_one_view_doubles_single_view_loss():
    single = Trainer(_config(mode='single_view'), _dataset())
    multi = Trainer(_config(mode='multi_view'), _dataset())
    view = single.dataset.objects[0].view(0)
    single_record = single.train_step_single_view([view])
    multi_record = multi.train_step_multi_view([(view, view)])
    assert abs(multi_record.loss_s - 2.0 * single_record.loss_s) <= 1e-12 * max(1.0, multi_record.loss_s)
    try:
        single.train_step_multi_view([(view, view)])
        assert False, "single-view trainer ran a multi-view step"
    except ValidationError:
        pass


def test_internal_pressure_alone_inflates_meshes():
    trainer = Trainer(_config(alpha=1e-3, weights={'lambda_p': 1.0}), _dataset())
    elements = _elements(trainer)
    first = trainer.reconstructor_gradients(elements, include_reconstruction=False).volume_mean
    for _ in range(4):
        trainer.optimizer.step()
        last = trainer.reconstructor_gradients(elements, include_reconstruction=False).volume_mean
    assert last > first


def test_every_decoder_parameter_receives_gradient():
    rng = np.random.default_rng(0)
    reconstructor = Reconstructor(16, rng, scale=0.0625, texture_size=8)
    vertices, textures = reconstructor.forward(rng.uniform(size=(2, 16, 16, 3)).astype(np.float32))
    reconstructor.zero_grad()
    reconstructor.backward(rng.normal(size=vertices.shape), np.ones(textures.shape))
    norms = gradient_norms(reconstructor)
    dead = [name for name, norm in norms.items() if norm == 0.0]
    assert not dead, dead


def test_worker_pool_matches_sequential_step():
    sequential = Trainer(_config(vpl=True), _dataset())
    with Trainer(_config(vpl=True, num_workers=2), _dataset()) as pooled:
        sequential.train_step()
        pooled.train_step()
        for a, b in zip(_parameters(sequential.reconstructor), _parameters(pooled.reconstructor)):
            assert np.allclose(a, b, rtol=1e-6, atol=1e-9)


def test_runs_are_deterministic_and_resume_exactly():
    config = _config(vpl=True, iterations=4, checkpoint_every=2)
    dataset = _dataset()
    with tempfile.TemporaryDirectory() as tmp:
        first = run_training(config, dataset, os.path.join(tmp, 'a'))
        second = run_training(config, dataset, os.path.join(tmp, 'b'))
        resumed = run_training(config, dataset, os.path.join(tmp, 'c'),
                               resume=os.path.join(tmp, 'a', 'ckpt_000002.bin'))
        with open(first, 'rb') as f:
            reference = f.read()
        for other in (second, resumed):
            with open(other, 'rb') as f:
                assert f.read() == reference, f"{other} differs from {first}"
        header, _ = load_checkpoint(first)
        assert header['step'] == 4 and header['wall_time'] == 0.0

        log_a = read_log_csv(os.path.join(tmp, 'a', 'log.csv'))
        assert log_a == read_log_csv(os.path.join(tmp, 'b', 'log.csv'))
        assert [row['step'] for row in log_a] == [1, 2, 3, 4]
        assert all(row['wall_time'] == 0.0 for row in log_a)
        assert read_log_csv(os.path.join(tmp, 'c', 'log.csv')) == log_a[2:]

        reconstructor, loaded_config = load_reconstructor(first)
        assert loaded_config.architecture() == config.architecture()
        mesh = reconstructor.predict(dataset.objects[0].view(0).image)
        assert mesh.vertices.shape == (1352, 3)


def test_resume_rejects_other_architecture():
    with tempfile.TemporaryDirectory() as tmp:
        path = run_training(_config(iterations=1), _dataset(), tmp)
        trainer = Trainer(_config(network_scale=0.125), _dataset())
        try:
            trainer.load_checkpoint(path)
            assert False, "checkpoint of another architecture accepted"
        except ValidationError:
            pass


def test_sample_grid_written():
    trainer = Trainer(_config(), _dataset())
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'grid.png')
        trainer.save_sample_grid([obj.view(0) for obj in trainer.dataset.objects], path)
        from PIL import Image
        with Image.open(path) as img:
            # Four samples, five tiles each.
            assert img.size == (16 * 5, 16 * 4)


def _cleanup():
    for dataset in _DATASETS.values():
        shutil.rmtree(dataset.root, ignore_errors=True)


if __name__ == "__main__":
    from check_runner import run_tests
    try:
        failures = run_tests(globals(), "Trainer")
    finally:
        _cleanup()
    sys.exit(1 if failures else 0)
