"""Per-layer quality metrics and machine-readable engine comparisons.

The quality metric is the proxy loss: the squared Frobenius norm of the
output error on calibration data, computed as trace(D H D^T) with
D = dequantized - original. When H = X X^T this equals ||D X||_F^2 exactly,
so the trace form and the explicit-activation form are two routes to the
same number; tests hold them together at 1e-10.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import NumericalError
from .linalg import HessianState

__all__ = ["LayerReport", "proxy_loss", "compare_table"]

CSV_SCHEMA = "lowbit-compare-v1"

_CSV_COLUMNS = [
    "layer",
    "engine",
    "bits",
    "group_size",
    "beta",
    "block_size",
    "proxy_loss",
    "rtn_relative",
    "wall_time_s",
    "drift_max",
    "drift_mean",
]


@dataclass
class LayerReport:
    """Outcome of quantizing one layer with one engine configuration."""

    layer: str
    engine: str
    bits: int
    group_size: int
    beta: float
    block_size: int
    proxy_loss: float
    rtn_relative: float
    wall_time_s: float
    drift_max: float
    drift_mean: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LayerReport":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__})


def proxy_loss(w_deq: np.ndarray, w_orig: np.ndarray, hessian) -> float:
    """trace(D H D^T) for D = w_deq - w_orig; equals ||D X||_F^2 for H = X X^T.

    ``hessian`` may be a HessianState (must be undamped: the metric is
    defined by the calibration data, not by the regularizer) or a plain
    symmetric matrix.
    """
    if isinstance(hessian, HessianState):
        if hessian.damped:
            raise NumericalError("proxy loss must be computed on the undamped Hessian")
        H = hessian.matrix
    else:
        H = np.asarray(hessian, dtype=np.float64)
    delta = np.asarray(w_deq, dtype=np.float64) - np.asarray(w_orig, dtype=np.float64)
    if delta.shape[1] != H.shape[0] or H.shape[0] != H.shape[1]:
        raise NumericalError(
            f"shape mismatch: delta {delta.shape} against Hessian {H.shape}"
        )
    return float(np.sum((delta @ H) * delta))


def compare_table(
    reports: list[LayerReport],
    csv_path: str | os.PathLike | None = None,
    json_path: str | os.PathLike | None = None,
) -> tuple[str, dict]:
    """Build the (layer, engine) comparison table and its summary.

    Every engine must cover the same layer set. Rows are sorted by layer
    name then engine name, so identical inputs produce identical output.
    Returns (csv text, summary dict); optionally writes both to disk.

    The summary carries per-engine means, win counts (strictly smallest
    proxy loss on a layer), tie counts, and the full per-layer proxy-loss
    distribution per engine.
    """
    if not reports:
        raise NumericalError("no reports to compare")
    by_engine: dict[str, dict[str, LayerReport]] = {}
    for rep in reports:
        by_engine.setdefault(rep.engine, {})
        if rep.layer in by_engine[rep.engine]:
            raise NumericalError(
                f"duplicate report for layer {rep.layer!r}, engine {rep.engine!r}"
            )
        by_engine[rep.engine][rep.layer] = rep
    layer_sets = {eng: frozenset(rows) for eng, rows in by_engine.items()}
    reference = next(iter(layer_sets.values()))
    mismatched = {eng for eng, ls in layer_sets.items() if ls != reference}
    if mismatched:
        raise NumericalError(
            f"engines cover inconsistent layer sets: {sorted(mismatched)}"
        )

    ordered = sorted(reports, key=lambda r: (r.layer, r.engine))
    buf = io.StringIO()
    buf.write(f"# schema: {CSV_SCHEMA}\n")
    writer = csv.DictWriter(buf, fieldnames=_CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for rep in ordered:
        row = rep.to_dict()
        writer.writerow({k: row[k] for k in _CSV_COLUMNS})
    csv_text = buf.getvalue()

    layers = sorted(reference)
    engines = sorted(by_engine)
    wins = {eng: 0 for eng in engines}
    ties = 0
    for layer in layers:
        losses = {eng: by_engine[eng][layer].proxy_loss for eng in engines}
        best = min(losses.values())
        winners = [eng for eng, v in losses.items() if v == best]
        if len(winners) == 1:
            wins[winners[0]] += 1
        else:
            ties += 1
    summary = {
        "schema": CSV_SCHEMA,
        "n_layers": len(layers),
        "layers": layers,
        "ties": ties,
        "engines": {
            eng: {
                "mean_proxy_loss": float(
                    np.mean([by_engine[eng][l].proxy_loss for l in layers])
                ),
                "mean_rtn_relative": float(
                    np.mean([by_engine[eng][l].rtn_relative for l in layers])
                ),
                "wins": wins[eng],
                "proxy_loss": {l: by_engine[eng][l].proxy_loss for l in layers},
            }
            for eng in engines
        },
    }

    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(csv_text)
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return csv_text, summary
