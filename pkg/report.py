#!/usr/bin/env python3
"""
Run Reports
Turns a training log and any number of evaluation tables into loss-curve and
per-class IoU plots plus a plain-text summary.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from metrics import METRIC_COLUMNS, EvalRow, plain_mean  # noqa: E402
from run_storage import read_eval_csv, read_log_csv  # noqa: E402
from utils import ValidationError, atomic_write_text  # noqa: E402

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ('loss_s', 'loss_c', 'loss_d', 'volume_mean')
# Fixed PNG metadata keeps repeated reports byte-identical.
PNG_METADATA = {'Software': None}


@dataclass
class ReportResult:
    summary_path: str
    summary: str
    plots: List[str] = field(default_factory=list)
    audits: Dict[str, bool] = field(default_factory=dict)


def parse_eval_argument(value: str) -> Tuple[str, str]:
    """'name=path' -> (name, path); a bare path is named after its file."""
    if '=' in value:
        name, path = value.split('=', 1)
        if not name:
            raise ValidationError(f"Empty eval name in '{value}'")
        return name, path
    return os.path.splitext(os.path.basename(value))[0], value


def audit_class_mean(rows: Sequence[EvalRow]) -> bool:
    """True when the `all` row equals the plain mean of the class rows, column by column."""
    classes = [row for row in rows if row.name != 'all']
    overall = [row for row in rows if row.name == 'all']
    if not classes or len(overall) != 1:
        return False
    return all(plain_mean([getattr(row, c) for row in classes]) == getattr(overall[0], c)
               for c in METRIC_COLUMNS)


def _class_order(tables: Sequence[Tuple[str, List[EvalRow]]]) -> List[str]:
    names: List[str] = []
    for _, rows in tables:
        for row in rows:
            if row.name != 'all' and row.name not in names:
                names.append(row.name)
    return names + ['all']


def plot_loss_curves(log_rows: List[Dict[str, float]], path: str) -> str:
    steps = [row['step'] for row in log_rows]
    fig, axes = plt.subplots(1, len(CURVE_COLUMNS), figsize=(4 * len(CURVE_COLUMNS), 3.2))
    for ax, column in zip(axes, CURVE_COLUMNS):
        ax.plot(steps, [row[column] for row in log_rows], linewidth=1.2)
        ax.set_title(column)
        ax.set_xlabel('step')
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def plot_iou_bars(tables: Sequence[Tuple[str, List[EvalRow]]], path: str) -> str:
    classes = _class_order(tables)
    x = np.arange(len(classes))
    width = 0.8 / len(tables)
    fig, ax = plt.subplots(figsize=(max(5.0, 1.2 * len(classes)), 3.5))
    for k, (name, rows) in enumerate(tables):
        by_class = {row.name: row.iou for row in rows}
        ax.bar(x + (k - (len(tables) - 1) / 2) * width, [by_class.get(c, 0.0) for c in classes], width,
               label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(classes)
    ax.set_ylabel('voxel IoU')
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def _training_section(log_path: str, log_rows: List[Dict[str, float]]) -> List[str]:
    lines = [f"TRAINING  {log_path}", '=' * 60]
    if not log_rows:
        return lines + ["(no rows logged)", '']
    last = log_rows[-1]
    lines.append(f"rows: {len(log_rows)}   final step: {last['step']}")
    lines.append(f"{'column':<12}{'first':>14}{'final':>14}{'min':>14}")
    for column in CURVE_COLUMNS:
        values = [row[column] for row in log_rows]
        lines.append(f"{column:<12}{values[0]:>14.6f}{values[-1]:>14.6f}{min(values):>14.6f}")
    return lines + ['']


def _evaluation_section(tables: Sequence[Tuple[str, List[EvalRow]]], audits: Dict[str, bool]) -> List[str]:
    classes = _class_order(tables)
    names = [name for name, _ in tables]
    header = f"{'class':<14}" + ''.join(f"{name:>12}" for name in names)
    if len(tables) > 1:
        header += ''.join(f"{'d(' + name + ')':>14}" for name in names[1:])
    lines = ["EVALUATION  voxel IoU", '=' * 60, header]

    lookup = [{row.name: row for row in rows} for _, rows in tables]
    for cls in classes:
        ious = [table.get(cls).iou if cls in table else None for table in lookup]
        line = f"{cls:<14}" + ''.join(f"{v:>12.4f}" if v is not None else f"{'-':>12}" for v in ious)
        for v in ious[1:]:
            line += f"{v - ious[0]:>+14.4f}" if v is not None and ious[0] is not None else f"{'-':>14}"
        lines.append(line)
    lines.append('')

    for name, rows in tables:
        lines.append(f"{name}: full metrics (CD/EMD x100)")
        lines.append(f"  {'class':<12}" + ''.join(f"{c:>10}" for c in METRIC_COLUMNS) + f"{'count':>8}")
        for row in rows:
            lines.append(f"  {row.name:<12}" + ''.join(f"{v:>10.4f}" for v in row.values()) + f"{row.count:>8}")
        status = "ok" if audits[name] else "differs (per-sample aggregation or edited table)"
        lines.append(f"  class-mean audit: {status}")
        lines.append('')
    return lines


def build_report(log_path: Optional[str], evals: Sequence[Tuple[str, str]], out_dir: str) -> ReportResult:
    """
    Write loss_curves.png, iou_bars.png (when evals are given) and summary.txt into out_dir.

    Args:
        log_path: training log.csv (None to skip the training section)
        evals: (name, eval csv path) pairs; the first is the baseline for delta columns
        out_dir: output directory

    Returns:
        ReportResult with the summary text and written paths
    """
    names = [name for name, _ in evals]
    if len(set(names)) != len(names):
        raise ValidationError(f"Duplicate eval names: {names}")
    os.makedirs(out_dir, exist_ok=True)

    log_rows = read_log_csv(log_path) if log_path else []
    tables = [(name, read_eval_csv(path)) for name, path in evals]
    audits = {name: audit_class_mean(rows) for name, rows in tables}

    plots = []
    if log_rows:
        try:
            plots.append(plot_loss_curves(log_rows, os.path.join(out_dir, 'loss_curves.png')))
        except Exception as e:
            logger.warning(f"⚠️ Could not draw loss curves: {e}")
    if tables:
        try:
            plots.append(plot_iou_bars(tables, os.path.join(out_dir, 'iou_bars.png')))
        except Exception as e:
            logger.warning(f"⚠️ Could not draw IoU bars: {e}")

    lines: List[str] = []
    if log_path:
        lines += _training_section(log_path, log_rows)
    if tables:
        lines += _evaluation_section(tables, audits)
    summary = '\n'.join(lines).rstrip() + '\n'
    summary_path = os.path.join(out_dir, 'summary.txt')
    atomic_write_text(summary_path, summary)

    for name, ok in audits.items():
        if not ok:
            logger.warning(f"⚠️ {name}: 'all' row is not the plain mean of its class rows")
    logger.info(f"📊 Report written to {out_dir} ({len(plots)} plots)")
    return ReportResult(summary_path=summary_path, summary=summary, plots=plots, audits=audits)
