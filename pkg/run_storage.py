#!/usr/bin/env python3
"""
Run Storage
Everything a run leaves on disk: binary checkpoints, the training log CSV,
evaluation tables and the run manifest.

Checkpoint layout (little-endian):
    b'VPLCKPT1' | uint32 header length | UTF-8 JSON header | float32 blocks

The header lists every block (name, shape) in the order the blocks follow.
"""

import csv
import io
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from datetime import datetime
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from metrics import METRIC_COLUMNS, EvalRow
from utils import ValidationError, atomic_write_text, config_hash, library_versions

CHECKPOINT_MAGIC = b'VPLCKPT1'
LOG_COLUMNS = ('step', 'loss_s', 'loss_c', 'loss_d', 'volume_mean', 'wall_time')
EVAL_HEADER_NOTE = ("# cd_* are mean squared nearest-neighbour distances x100; emd_* are mean matched distances x100; "
                    "sil_iou is the rendered mask IoU at each input viewpoint")


def save_checkpoint(path: str, header: Dict, blocks: Sequence[Tuple[str, np.ndarray]]):
    """Write named arrays as float32 blocks after a JSON header (atomic rename)."""
    header = dict(header)
    header['format'] = CHECKPOINT_MAGIC.decode('ascii')
    header['blocks'] = [{'name': name, 'shape': list(np.shape(array))} for name, array in blocks]
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = path + '.part'
    with open(tmp_path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<I', len(header_bytes)))
        f.write(header_bytes)
        for _, array in blocks:
            f.write(np.ascontiguousarray(array, dtype='<f4').tobytes())
    os.replace(tmp_path, path)


def load_checkpoint(path: str) -> Tuple[Dict, Dict[str, np.ndarray]]:
    """
    Read a checkpoint.

    Returns:
        (header, {block name: float32 array})
    """
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise ValidationError(f"Cannot read checkpoint {path}: {e}")
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path} is not a {CHECKPOINT_MAGIC.decode()} checkpoint "
                              f"(magic {data[:8]!r})")
    offset = len(CHECKPOINT_MAGIC)
    try:
        (header_len,) = struct.unpack_from('<I', data, offset)
        offset += 4
        header = json.loads(data[offset:offset + header_len].decode('utf-8'))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValidationError(f"Corrupt checkpoint header in {path}: {e}")
    offset += header_len

    blocks = {}
    for block in header.get('blocks', []):
        count = int(np.prod(block['shape'], dtype=np.int64))
        end = offset + 4 * count
        if end > len(data):
            raise ValidationError(f"Checkpoint {path} is truncated in block {block['name']}")
        blocks[block['name']] = np.frombuffer(data[offset:end], dtype='<f4').astype(np.float32).reshape(
            block['shape'])
        offset = end
    if offset != len(data):
        raise ValidationError(f"Checkpoint {path} has {len(data) - offset} trailing bytes")
    return header, blocks


class TrainingLog:
    """Append-only training curve CSV."""

    def __init__(self, path: str, record_wall_time: bool = True):
        self.path = path
        self.record_wall_time = record_wall_time
        self.logger = logging.getLogger(__name__)

    def start(self, resume_step: Optional[int] = None):
        """Create the file, or on resume drop rows written after the checkpoint step."""
        os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
        if resume_step is None or not os.path.exists(self.path):
            with open(self.path, 'w', newline='', encoding='utf-8') as f:
                csv.writer(f).writerow(LOG_COLUMNS)
            return
        rows = read_log_csv(self.path)
        kept = [row for row in rows if row['step'] <= resume_step]
        with open(self.path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(LOG_COLUMNS)
            for row in kept:
                writer.writerow([_format_value(row[c]) for c in LOG_COLUMNS])
        self.logger.info(f"📝 Resumed log {self.path} at step {resume_step} ({len(rows) - len(kept)} rows dropped)")

    def append(self, step: int, loss_s: float, loss_c: float, loss_d: float, volume_mean: float,
               wall_time: float):
        wall_time = wall_time if self.record_wall_time else 0.0
        with open(self.path, 'a', newline='', encoding='utf-8') as f:
            csv.writer(f).writerow([step] + [_format_value(v) for v in (loss_s, loss_c, loss_d, volume_mean,
                                                                         wall_time)])


def _format_value(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def read_log_csv(path: str) -> List[Dict[str, float]]:
    """Parse a training log; malformed rows raise with their line number."""
    rows = []
    try:
        with open(path, 'r', newline='', encoding='utf-8') as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None or tuple(header) != LOG_COLUMNS:
                raise ValidationError(f"{path}:1: expected header {','.join(LOG_COLUMNS)}, got {header}")
            for row in reader:
                line = reader.line_num
                if not row:
                    continue
                if len(row) != len(LOG_COLUMNS):
                    raise ValidationError(f"{path}:{line}: expected {len(LOG_COLUMNS)} fields, got {len(row)}")
                try:
                    values = {c: float(v) for c, v in zip(LOG_COLUMNS, row)}
                except ValueError as e:
                    raise ValidationError(f"{path}:{line}: {e}")
                values['step'] = int(values['step'])
                rows.append(values)
    except OSError as e:
        raise ValidationError(f"Cannot read log {path}: {e}")
    return rows


def write_eval_csv(path: str, rows: Sequence[EvalRow]):
    buffer = io.StringIO()
    buffer.write(EVAL_HEADER_NOTE + "\n")
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(('class',) + METRIC_COLUMNS + ('count',))
    for row in rows:
        writer.writerow([row.name] + [repr(float(v)) for v in row.values()] + [row.count])
    atomic_write_text(path, buffer.getvalue())


def read_eval_csv(path: str) -> List[EvalRow]:
    rows = []
    try:
        with open(path, 'r', encoding='utf-8') as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise ValidationError(f"Cannot read eval table {path}: {e}")
    expected = ['class', *METRIC_COLUMNS, 'count']
    header_seen = False
    for line_number, line in enumerate(lines, 1):
        if not line.strip() or line.startswith('#'):
            continue
        fields = next(csv.reader([line]))
        if not header_seen:
            if fields != expected:
                raise ValidationError(f"{path}:{line_number}: expected header {','.join(expected)}")
            header_seen = True
            continue
        if len(fields) != len(expected):
            raise ValidationError(f"{path}:{line_number}: expected {len(expected)} fields, got {len(fields)}")
        try:
            rows.append(EvalRow(fields[0], *(float(v) for v in fields[1:-1]), count=int(fields[-1])))
        except ValueError as e:
            raise ValidationError(f"{path}:{line_number}: {e}")
    if not header_seen:
        raise ValidationError(f"{path}: no header row")
    return rows


@dataclass
class RunManifest:
    """What was run, with which config and library versions, and where the outputs went."""
    command: str
    config_hash: str
    seed: Optional[int]
    started_at: str = field(default_factory=lambda: datetime.now().isoformat(timespec='seconds'))
    versions: Dict[str, str] = field(default_factory=library_versions)
    arguments: Dict = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def for_command(cls, command: str, resolved_config: Dict, seed: Optional[int] = None,
                    arguments: Optional[Dict] = None, outputs: Optional[Dict[str, str]] = None) -> 'RunManifest':
        return cls(command=command, config_hash=config_hash(resolved_config), seed=seed,
                   arguments=dict(arguments or {}), outputs=dict(outputs or {}))

    def write(self, path: str):
        atomic_write_text(path, json.dumps(asdict(self), indent=2, sort_keys=True, default=str))
