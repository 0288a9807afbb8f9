"""Forecast metrics, model comparison tables and heatmap exports."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

TABLE_HEADER = "model,rmse,r2,mae,n"
MAE_NOTE = "# mae is the mean absolute error |y - y_hat| (not squared)"


@dataclass(frozen=True)
class MetricsReport:
    rmse: float
    r2: float
    mae: float
    n: int
    model: str = ""
    scope: str = "global"
    r2_undefined: bool = False

    def row(self) -> str:
        return f"{self.model},{self.rmse!r},{self.r2!r},{self.mae!r},{self.n}"


def metrics(y, y_hat, model: str = "", scope: str = "global") -> MetricsReport:
    """RMSE, R-squared and MAE over all entries, flattened.

    R-squared is NaN (with ``r2_undefined`` set) when ``y`` has no variance;
    it is never clamped, so a poor predictor yields a negative value.
    """
    y = np.asarray(y, dtype=float).ravel()
    y_hat = np.asarray(y_hat, dtype=float).ravel()
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.size} vs {y_hat.size}")
    if y.size == 0:
        raise ValueError("metrics need at least one value")
    r = y - y_hat
    sse = float(r @ r)
    dev = y - y.mean()
    sst = float(dev @ dev)
    undefined = sst == 0.0
    r2 = math.nan if undefined else 1.0 - sse / sst
    return MetricsReport(math.sqrt(sse / y.size), r2, float(np.abs(r).mean()), int(y.size),
                         model, scope, undefined)


def per_cell_metrics(y, y_hat, model: str = "") -> list[list[MetricsReport]]:
    """Metrics for each cell of (n, I, J) arrays."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    I, J = y.shape[1:]
    return [[metrics(y[:, i, j], y_hat[:, i, j], model, f"cell({i},{j})") for j in range(J)]
            for i in range(I)]


def compare(predictions: Mapping[str, np.ndarray], truth) -> list[MetricsReport]:
    """One report per model, in the mapping's order."""
    return [metrics(truth, pred, name) for name, pred in predictions.items()]


def comparison_table(reports: list[MetricsReport], footer: bool = True) -> str:
    lines = [TABLE_HEADER] + [r.row() for r in reports]
    if footer:
        lines.append(MAE_NOTE)
    return "\n".join(lines) + "\n"


def read_comparison_table(text: str) -> dict[str, dict[str, float]]:
    out = {}
    for line in text.splitlines()[1:]:
        if not line or line.startswith("#"):
            continue
        model, rmse, r2, mae, n = line.split(",")
        out[model] = {"rmse": float(rmse), "r2": float(r2), "mae": float(mae), "n": int(n)}
    return out


def export_heatmap(grid, path) -> tuple[Path, Path]:
    """Write ``<path>.pgm`` (largest value darkest, zero lightest) and
    ``<path>.csv`` (full-precision values)."""
    m = np.asarray(grid, dtype=float)
    if m.ndim != 2:
        raise ValueError("heatmap needs a 2-D matrix")
    if not np.isfinite(m).all():
        raise ValueError("heatmap values must be finite")
    base = Path(path)
    if base.suffix in (".pgm", ".csv"):
        base = base.with_suffix("")
    pgm, csv = base.with_suffix(".pgm"), base.with_suffix(".csv")
    vmax = float(m.max())
    if vmax > 0:
        shade = np.rint(255.0 * np.clip(m, 0.0, None) / vmax).astype(int)
    else:
        shade = np.zeros(m.shape, dtype=int)
    pixels = 255 - shade
    buf = io.StringIO()
    buf.write(f"P2\n{m.shape[1]} {m.shape[0]}\n255\n")
    for row in pixels:
        buf.write(" ".join(str(v) for v in row) + "\n")
    pgm.write_text(buf.getvalue())
    csv.write_text("\n".join(",".join(repr(float(v)) for v in row) for row in m) + "\n")
    return pgm, csv


def read_heatmap_csv(path) -> np.ndarray:
    rows = [line.split(",") for line in Path(path).read_text().splitlines() if line]
    return np.array([[float(v) for v in row] for row in rows])


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if tokens[0] != "P2":
        raise ValueError("not a plain graymap")
    w, h = int(tokens[1]), int(tokens[2])
    return np.array([int(t) for t in tokens[4:4 + w * h]]).reshape(h, w)
