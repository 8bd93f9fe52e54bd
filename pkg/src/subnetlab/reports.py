"""Plot-ready CSV reports with fixed numeric formatting.

CER uses 2 decimals, losses 6 significant digits, IOU 4 decimals; reruns
of the same experiment therefore diff clean.
"""
from __future__ import annotations

import csv
import math
from typing import Sequence

from .pipeline import (MissingCellError, RunResult, avg_downstream_language,
                       avg_subnetwork_performance)

GRID_HEADER = ["upstream", "downstream", "mask_source", "sparsity", "seed",
               "cer", "epochs_run", "best_val_loss"]


def _fmt_sparsity(s: float) -> str:
    return f"{s:g}"


def write_grid_csv(results: Sequence[RunResult], path: str) -> None:
    """One row per successful grid cell, canonical order, fixed precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GRID_HEADER)
        for r in sorted(results, key=RunResult.sort_key):
            if r.error is not None:
                continue
            writer.writerow([r.upstream, r.downstream, r.mask_source,
                             _fmt_sparsity(r.sparsity), r.seed, f"{r.cer:.2f}",
                             r.epochs_run, f"{r.best_val_loss:.6g}"])


def read_grid_csv(path: str) -> list[RunResult]:
    results = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != GRID_HEADER:
            raise ValueError(f"unexpected grid CSV header {reader.fieldnames}")
        for row in reader:
            results.append(RunResult(
                upstream=row["upstream"], downstream=row["downstream"],
                mask_source=row["mask_source"], sparsity=float(row["sparsity"]),
                seed=int(row["seed"]), cer=float(row["cer"]),
                epochs_run=int(row["epochs_run"]),
                best_val_loss=float(row["best_val_loss"])))
    return results


def _write_average_csv(path: str, key_name: str, per_key: dict[str, dict[float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([key_name, "sparsity", "avg_cer"])
        for key in sorted(per_key):
            for sparsity in sorted(per_key[key]):
                writer.writerow([key, _fmt_sparsity(sparsity),
                                 f"{per_key[key][sparsity]:.2f}"])


def write_upstream_averages(results: Sequence[RunResult], path: str) -> list[str]:
    """Per-upstream cross-language averages; returns upstreams skipped as ragged."""
    skipped = []
    per_key: dict[str, dict[float, float]] = {}
    for upstream in sorted({r.upstream for r in results if r.mask_source == "self"}):
        try:
            per_key[upstream] = avg_subnetwork_performance(results, upstream)
        except MissingCellError:
            skipped.append(upstream)
    _write_average_csv(path, "upstream", per_key)
    return skipped


def write_downstream_averages(results: Sequence[RunResult], path: str) -> list[str]:
    skipped = []
    per_key: dict[str, dict[float, float]] = {}
    for language in sorted({r.downstream for r in results if r.mask_source == "self"}):
        try:
            per_key[language] = avg_downstream_language(results, language)
        except MissingCellError:
            skipped.append(language)
    _write_average_csv(path, "downstream", per_key)
    return skipped


def write_iou_matrix(labels: Sequence[str], matrix: Sequence[Sequence[float]],
                     path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subnetwork", *labels])
        for label, row in zip(labels, matrix):
            writer.writerow([label] + [f"{v:.4f}" if not math.isnan(v) else "nan"
                                       for v in row])
