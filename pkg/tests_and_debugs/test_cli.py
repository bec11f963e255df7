#!/usr/bin/env python3
"""
Command line tests: gradcheck exit codes and reports, and a tiny
make-dataset -> train -> eval -> render -> report pipeline.
"""

import json
import os
import sys
import tempfile

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import nn_layers
from gradcheck import failed_checks, run_gradcheck
from run_storage import read_eval_csv
from utils import ValidationError
from vpl_cli import MANIFEST_NAME, main


def test_unknown_scope_is_a_usage_error():
    assert main(['gradcheck', '--scope', 'optics']) == ValidationError.exit_code == 2


def test_gradcheck_report_is_reproducible():
    with tempfile.TemporaryDirectory() as tmp:
        first, second = os.path.join(tmp, 'a.csv'), os.path.join(tmp, 'b.csv')
        assert main(['gradcheck', '--scope', 'nn', '--seed', '4', '--trials', '2', '--out', first]) == 0
        assert main(['gradcheck', '--scope', 'nn', '--seed', '4', '--trials', '2', '--out', second]) == 0
        with open(first, 'r', encoding='utf-8') as a, open(second, 'r', encoding='utf-8') as b:
            text = a.read()
            assert text == b.read()
        assert text.splitlines()[0].startswith('scope,name,trials')
        assert os.path.exists(os.path.join(tmp, MANIFEST_NAME))


def test_corrupted_layer_fails_gradcheck():
    original = nn_layers.ReLU.backward
    nn_layers.ReLU.backward = lambda self, grad: grad
    try:
        assert main(['gradcheck', '--scope', 'nn', '--trials', '2']) == 1
    finally:
        nn_layers.ReLU.backward = original
    assert main(['gradcheck', '--scope', 'nn', '--trials', '2']) == 0


def test_renderer_suite_passes_on_few_scenes():
    results = run_gradcheck('renderer', seed=1, trials=3, scenes=10)
    assert [r.name for r in results] == ['pixels_to_projected_oracle', 'projection_jacobian', 'texture_adjoint']
    assert not failed_checks(results), failed_checks(results)


def test_pipeline_end_to_end():
    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, 'data')
        assert main(['make-dataset', '--seed', '1', '--objects', '3', '--views', '2', '--classes', 'box,cone',
                     '--size', '16', '--test-fraction', '0.0', '--out', data]) == 0

        config_path = os.path.join(tmp, 'train.json')
        with open(config_path, 'w', encoding='utf-8') as f:
            json.dump({'training': {'image_size': 16, 'network_scale': 0.0625, 'batch_size': 2, 'iterations': 2,
                                    'vpl': True, 'checkpoint_every': 0},
                       'weights': {'n_scales': 3}}, f)
        run = os.path.join(tmp, 'run')
        assert main(['train', '--config', config_path, '--dataset', data, '--out', run, '--seed', '5']) == 0
        checkpoint = os.path.join(run, 'ckpt_000002.bin')
        assert os.path.exists(checkpoint)
        with open(os.path.join(run, MANIFEST_NAME), 'r', encoding='utf-8') as f:
            manifest = json.load(f)
        assert manifest['command'] == 'train' and manifest['seed'] == 5

        eval_path = os.path.join(tmp, 'eval', 'eval.csv')
        assert main(['eval', '--checkpoint', checkpoint, '--dataset', data, '--split', 'train', '--resolution', '8',
                     '--points', '16', '--export-meshes', '--out', eval_path]) == 0
        rows = read_eval_csv(eval_path)
        assert rows[-1].name == 'all' and rows[-1].count == 6
        exported = sorted(os.listdir(os.path.join(tmp, 'eval', 'meshes')))
        assert len(exported) == 6 and exported[0].endswith('_v0.obj')

        image = os.path.join(tmp, 'render.png')
        assert main(['render', '--mesh', os.path.join(tmp, 'eval', 'meshes', exported[0]), '--size', '16',
                     '--out', image, '--alpha-out', os.path.join(tmp, 'alpha.png')]) == 0
        assert os.path.exists(image) and os.path.exists(os.path.join(tmp, 'alpha.png'))

        report = os.path.join(tmp, 'report')
        assert main(['report', '--log', os.path.join(run, 'log.csv'), '--eval', f"vpl={eval_path}",
                     '--out', report]) == 0
        assert os.path.exists(os.path.join(report, 'summary.txt'))

        assert main(['eval', '--checkpoint', os.path.join(run, 'missing.bin'), '--dataset', data,
                     '--out', eval_path]) == 2


if __name__ == "__main__":
    from check_runner import run_tests
    sys.exit(1 if run_tests(globals(), "Command line") else 0)
