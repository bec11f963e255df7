#!/usr/bin/env python3
"""
Run storage tests: checkpoint codec, training log resume, eval tables and manifests.
"""

import json
import os
import sys
import tempfile

import numpy as np

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from metrics import EvalRow
from run_storage import (LOG_COLUMNS, RunManifest, TrainingLog, load_checkpoint, read_eval_csv, read_log_csv,
                         save_checkpoint, write_eval_csv)
from utils import ValidationError, config_hash


def test_checkpoint_preserves_blocks_and_header():
    rng = np.random.default_rng(0)
    blocks = [('encoder.w', rng.normal(size=(3, 4)).astype(np.float32)), ('step_scalar', np.array([7.0]))]
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'ckpt', 'model.bin')
        save_checkpoint(path, {'step': 7, 'config': {'lr': 1e-4}}, blocks)
        header, loaded = load_checkpoint(path)
        assert header['step'] == 7 and header['config'] == {'lr': 1e-4}
        assert [b['name'] for b in header['blocks']] == ['encoder.w', 'step_scalar']
        assert np.array_equal(loaded['encoder.w'], blocks[0][1])
        assert loaded['step_scalar'].dtype == np.float32
        assert not os.path.exists(path + '.part')


def test_checkpoint_corruption_is_reported():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'model.bin')
        save_checkpoint(path, {}, [('w', np.ones((4, 4)))])
        with open(path, 'rb') as f:
            data = f.read()

        cases = {'bad magic': b'NOTACKPT' + data[8:], 'truncated': data[:-8], 'trailing': data + b'\0\0\0\0'}
        for label, payload in cases.items():
            with open(path, 'wb') as f:
                f.write(payload)
            try:
                load_checkpoint(path)
                assert False, f"{label} checkpoint accepted"
            except ValidationError:
                pass
        try:
            load_checkpoint(os.path.join(tmp, 'missing.bin'))
            assert False, "missing checkpoint accepted"
        except ValidationError:
            pass


def test_training_log_resume_drops_later_rows():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'log.csv')
        log = TrainingLog(path)
        log.start()
        for step in (10, 20, 30):
            log.append(step, 0.5, 0.25, 1.3, 1.0 + step / 100.0, 3.5)
        log.start(resume_step=20)
        rows = read_log_csv(path)
        assert [r['step'] for r in rows] == [10, 20]
        assert rows[1]['volume_mean'] == 1.2
        log.append(30, 0.4, 0.2, 1.2, 1.3, 4.0)
        assert [r['step'] for r in read_log_csv(path)] == [10, 20, 30]


def test_training_log_without_wall_time():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'log.csv')
        log = TrainingLog(path, record_wall_time=False)
        log.start()
        log.append(1, 0.1, 0.0, 0.0, 1.0, 12.5)
        assert read_log_csv(path)[0]['wall_time'] == 0.0


def test_malformed_log_reports_line():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'log.csv')
        with open(path, 'w', encoding='utf-8') as f:
            f.write(','.join(LOG_COLUMNS) + '\n1,0.1,0,0,1,0\n2,0.1,zero,0,1,0\n')
        try:
            read_log_csv(path)
            assert False, "malformed log accepted"
        except ValidationError as e:
            assert ':3:' in str(e)


def test_eval_table_round_trip_and_errors():
    rows = [EvalRow('box', 0.5, 1.0, 2.0, 3.0, 4.0, count=3), EvalRow('all', 0.5, 1.0, 2.0, 3.0, 4.0, count=3)]
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'eval.csv')
        write_eval_csv(path, rows)
        with open(path, 'r', encoding='utf-8') as f:
            assert f.readline().startswith('#')
        back = read_eval_csv(path)
        assert [(r.name, r.values(), r.count) for r in back] == [(r.name, r.values(), r.count) for r in rows]

        with open(path, 'a', encoding='utf-8') as f:
            f.write('cone,0.1,0.2\n')
        try:
            read_eval_csv(path)
            assert False, "short eval row accepted"
        except ValidationError as e:
            assert ':5:' in str(e)


def test_run_manifest_records_config_hash():
    resolved = {'training': {'seed': 3}, 'losses': {'lambda_d': 0.2}}
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'run_manifest.json')
        RunManifest.for_command('train', resolved, seed=3, arguments={'preset': 'x'},
                                outputs={'log': 'log.csv'}).write(path)
        with open(path, 'r', encoding='utf-8') as f:
            manifest = json.load(f)
        assert manifest['command'] == 'train' and manifest['seed'] == 3
        assert manifest['config_hash'] == config_hash(resolved)
        assert 'numpy' in manifest['versions']
        assert manifest['outputs'] == {'log': 'log.csv'}
    assert config_hash({'a': 1, 'b': 2}) == config_hash({'b': 2, 'a': 1})
    assert config_hash({'a': 1}) != config_hash({'a': 2})


if __name__ == "__main__":
    from check_runner import run_tests
    sys.exit(1 if run_tests(globals(), "Run storage") else 0)
