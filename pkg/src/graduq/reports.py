"""Report serialization: structured JSON documents and flat CSV tables.

Reports are JSON with sorted keys and a trailing newline, so re-serializing
a parsed report reproduces the bytes exactly. Non-finite metric values are
refused: a NaN in a report always indicates an upstream bug.
"""

from __future__ import annotations

import csv
import json
import math

from .errors import DomainError


def _check_finite(node, path: str = "$") -> None:
    if isinstance(node, float) and not math.isfinite(node):
        raise DomainError(f"report field {path} is not finite: {node}")
    if isinstance(node, dict):
        for key, value in node.items():
            _check_finite(value, f"{path}.{key}")
    elif isinstance(node, (list, tuple)):
        for i, value in enumerate(node):
            _check_finite(value, f"{path}[{i}]")


def render_report(report: dict) -> str:
    _check_finite(report)
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_report(report: dict, path: str) -> None:
    text = render_report(report)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def read_report(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_scores_csv(rows: list[tuple[int, str, float]], path: str) -> None:
    """Per-sample scores: columns sample_index, method, score."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_index", "method", "score"])
        for sample_index, method, score in rows:
            if not math.isfinite(score):
                raise DomainError(f"score for sample {sample_index} is not finite")
            writer.writerow([sample_index, method, repr(float(score))])


def write_metrics_csv(rows: list[tuple[str, int, str, float]], path: str) -> None:
    """Flat experiment results: columns method, seed, metric, value."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "seed", "metric", "value"])
        for method, seed, metric, value in rows:
            if not math.isfinite(value):
                raise DomainError(f"metric {metric} for {method}/seed {seed} is not finite")
            writer.writerow([method, seed, metric, repr(float(value))])
