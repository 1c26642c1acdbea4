"""Write experiment results to disk: manifest, score tables and figure data.

Every file is rendered deterministically (sorted keys, shortest round-trip
float repr, no timestamps), so re-running an experiment from its manifest
reproduces the directory byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import os
import platform
import shutil
import tempfile

import numpy as np

from .. import __version__
from ..errors import InvalidConfigError
from ..models.checkpoint import checkpoint_bytes
from ..textmetrics import threshold_proportion
from .experiment import DESK_WINDOWS, ROUND_DEFINITION, ExperimentResult, ReportRow

MANIFEST = "manifest.json"
PER_ITEM = "per_item_scores.csv"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def manifest_dict(result: ExperimentResult) -> dict:
    exp = result.exp
    return {
        "format": 1,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "kind": result.kind,
        "command": result.command,
        "experiment": exp.to_dict(),
        "round_definition": ROUND_DEFINITION,
        "window_mapping": {name: str(w) for name, w in DESK_WINDOWS.items()},
        "attack_config_hash": exp.attack_hash(),
        "config_hashes": {
            arm.label: {str(s): _cell_hash(exp, arm, s) for s in exp.seeds} for arm in exp.arms
        },
        "cells": [
            {
                "arm": c.arm.label,
                "seed": c.seed,
                "error": c.error,
                "clean": c.clean,
                "epochs_run": None if c.checkpoint is None else c.checkpoint.metadata["epochs_run"],
                "final_train_loss": None if c.checkpoint is None
                else c.checkpoint.metadata["final_train_loss"],
            }
            for c in result.cells
        ],
        "band": None if exp.band is None else {"spec": exp.band.to_dict(), "arms": result.band_flags},
        "headline_arms": [a.label for a in exp.arms
                          if result.band_flags.get(a.label, {"in_band": True})["in_band"]],
    }


def _cell_hash(exp, arm, seed):
    from ..models import config_hash
    return config_hash(exp.train_config(arm, seed).to_dict())


def render(result: ExperimentResult) -> dict:
    """File name -> bytes for everything the report directory will hold."""
    exp = result.exp
    files = {}
    per_item = []
    for c in result.cells:
        for metric, grid in sorted(c.scores.items()):
            for r, row in enumerate(grid):
                per_item.extend((c.arm.label, c.seed, metric, r, i, float(v)) for i, v in enumerate(row))
    files[PER_ITEM] = _csv(("arm", "seed", "metric", "round", "item", "value"), per_item)

    arms = {a.label: a for a in exp.arms}
    curve_rows = [(cv.arm, arms[cv.arm].b, cv.window, cv.metric, r, float(m), float(s), cv.n_seeds,
                   result.band_flags.get(cv.arm, {"in_band": True})["in_band"])
                  for cv in result.curves for r, (m, s) in enumerate(zip(cv.mean, cv.std))]
    files["curves.csv"] = _csv(("arm", "b", "window", "metric", "round", "mean", "std", "n_seeds",
                                "in_band"), curve_rows)
    files["thresholds.csv"] = thresholds_csv(result.thresholds)
    if result.kind == "sweep-b":
        files["fig1_b_sweep.csv"] = _csv(("b", "arm", "metric", "round", "mean", "std"),
                                         [(r[1], r[0], r[3], r[4], r[5], r[6]) for r in curve_rows])
    if result.kind == "sweep-k":
        files["fig3_k_sweep.csv"] = _csv(("arm", "window", "metric", "round", "mean", "std"),
                                         [(r[0], r[2], r[3], r[4], r[5], r[6]) for r in curve_rows])
    if result.thresholds:
        files["fig2_thresholds.csv"] = _csv(
            ("arm", "metric", "threshold", "proportion"),
            [(t.arm, t.metric, t.threshold, t.proportion) for t in result.thresholds])
    for metric in exp.metrics:
        if any(c.metric == metric and c.n_seeds for c in result.curves):
            files[f"fig_{metric}.svg"] = svg_curves(result, metric)
    if exp.save_checkpoints:
        for c in result.cells:
            if c.checkpoint is not None:
                files[f"checkpoints/{_slug(c.arm.label)}_seed{c.seed}.ckpt"] = checkpoint_bytes(c.checkpoint)
    files[MANIFEST] = json.dumps(manifest_dict(result), indent=2, sort_keys=True) + "\n"
    return files


def thresholds_csv(rows) -> str:
    return _csv(("arm", "metric", "threshold", "proportion", "rounds", "n_seeds"),
                [(t.arm, t.metric, t.threshold, t.proportion, t.rounds, t.n_seeds) for t in rows])


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in label)


def write_files(files: dict, out_dir) -> None:
    """Stage everything in a sibling temp dir, then move it in; nothing partial on failure."""
    out_dir = os.path.abspath(out_dir)
    parent = os.path.dirname(out_dir)
    os.makedirs(parent, exist_ok=True)
    stage = tempfile.mkdtemp(dir=parent, prefix=".report-")
    try:
        for name, content in files.items():
            path = os.path.join(stage, name)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            with open(path, "wb") as fh:
                fh.write(content if isinstance(content, bytes) else content.encode())
        os.makedirs(out_dir, exist_ok=True)
        for name in files:
            dest = os.path.join(out_dir, name)
            os.makedirs(os.path.dirname(dest), exist_ok=True)
            os.replace(os.path.join(stage, name), dest)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def emit_report(result: ExperimentResult, out_dir) -> list[str]:
    files = render(result)
    write_files(files, out_dir)
    return sorted(files)


def read_manifest(path) -> dict:
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST)
    with open(path) as fh:
        return json.load(fh)


def read_per_item(path) -> dict:
    """(arm, seed, metric) -> (rounds + 1, n_items) array from a per-item CSV."""
    if os.path.isdir(path):
        path = os.path.join(path, PER_ITEM)
    cells: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["arm"], int(row["seed"]), row["metric"])
            cells.setdefault(key, {}).setdefault(int(row["round"]), {})[int(row["item"])] = float(row["value"])
    out = {}
    for key, rounds in cells.items():
        out[key] = np.array([[rounds[r][i] for i in sorted(rounds[r])] for r in sorted(rounds)])
    return out


def thresholds_from_scores(scores: dict, thresholds, rounds: int = 2, metric: str | None = None):
    """Recompute seed-mean threshold proportions from stored per-item scores."""
    if not thresholds:
        raise InvalidConfigError("at least one threshold is required")
    groups: dict = {}
    for (arm, _seed, m), grid in sorted(scores.items()):
        if metric is not None and m != metric:
            continue
        if rounds >= len(grid):
            raise InvalidConfigError(f"scores only cover {len(grid) - 1} rounds")
        groups.setdefault((arm, m), []).append(grid[rounds])
    if not groups:
        raise InvalidConfigError("no per-item scores match the request")
    return [ReportRow(arm, float(t), float(np.mean([threshold_proportion(f, t) for f in finals])),
                      rounds, len(finals), m)
            for (arm, m), finals in groups.items() for t in thresholds]


def svg_curves(result: ExperimentResult, metric: str, width: int = 480, height: int = 320) -> str:
    """Minimal line chart of mean curves; one polyline per arm."""
    curves = [c for c in result.curves if c.metric == metric]
    if not curves:
        raise InvalidConfigError(f"no curves for metric {metric!r}")
    n = max(len(c) for c in curves)
    pad = 40
    palette = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf",
               "#7f7f7f", "#bcbd22", "#e377c2", "#000000")
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for idx, c in enumerate(curves):
        pts = " ".join(
            f"{pad + (width - 2 * pad) * r / max(1, n - 1):.1f},"
            f"{height - pad - (height - 2 * pad) * (m if np.isfinite(m) else 0.0):.1f}"
            for r, m in enumerate(c.mean))
        color = palette[idx % len(palette)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{width - pad - 90}" y="{pad + 12 * idx}" font-size="10" '
                     f'fill="{color}">{c.arm}</text>')
    parts.append(f'<text x="{pad}" y="{height - 8}" font-size="10">round</text>')
    parts.append(f'<text x="4" y="{pad - 8}" font-size="10">{metric}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
