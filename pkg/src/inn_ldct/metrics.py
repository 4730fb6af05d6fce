"""PSNR, SSIM, noise-residual statistics and the ablation/comparison report."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(x, ref) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    return x, ref


def psnr(x, ref, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) in dB; ``inf`` for identical images."""
    x, ref = _pair(x, ref)
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = g.size
    a = sliding_window_view(a, n, axis=1) @ g
    return sliding_window_view(a, n, axis=0) @ g


def ssim_map(x, ref, peak: float = 1.0) -> np.ndarray:
    """Local SSIM at every position where the 11x11 window fits entirely."""
    x, ref = _pair(x, ref)
    if x.ndim != 2 or min(x.shape) < SSIM_WIN:
        raise ValueError(f"SSIM needs a 2-D image of at least {SSIM_WIN}x{SSIM_WIN}, got {x.shape}")
    g = gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(ref, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(ref * ref, g) - my * my
    sxy = _filter_valid(x * ref, g) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(x, ref, peak: float = 1.0) -> float:
    return float(np.mean(ssim_map(x, ref, peak)))


def residual_stats(noisy, denoised, regions: dict | None = None) -> dict[str, dict[str, float]]:
    """Mean/std of ``noisy - denoised`` over the full slice and each ``(y0, y1, x0, x1)`` ROI."""
    a, b = _pair(noisy, denoised)
    res = a - b
    out = {"full": {"mean": float(res.mean()), "std": float(res.std())}}
    for name, (y0, y1, x0, x1) in (regions or {}).items():
        if not (0 <= y0 < y1 <= res.shape[0] and 0 <= x0 < x1 <= res.shape[1]):
            raise ValueError(f"ROI {name!r} = {(y0, y1, x0, x1)} outside image {res.shape}")
        roi = res[y0:y1, x0:x1]
        out[name] = {"mean": float(roi.mean()), "std": float(roi.std())}
    return out


# --- reports -----------------------------------------------------------------

@dataclass
class MetricReport:
    """Per-slice metrics of one method, aggregated as mean and population std."""

    name: str
    per_slice: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.per_slice:
            raise ValueError(f"report entry {self.name!r} has no per-slice values")

    def _values(self, key: str) -> np.ndarray:
        return np.array([float(s[key]) for s in self.per_slice])

    def aggregate(self, key: str) -> tuple[float, float]:
        v = self._values(key)
        return float(v.mean()), float(v.std())

    def summary(self) -> dict:
        out = {"name": self.name}
        for key, col in (("psnr_db", "psnr"), ("ssim", "ssim")):
            out[f"{col}_mean"], out[f"{col}_std"] = self.aggregate(key)
        if all("residual_std" in s for s in self.per_slice):
            out["residual_std_mean"], out["residual_std_std"] = self.aggregate("residual_std")
        return out


def evaluate_slices(name: str, estimate: np.ndarray, clean: np.ndarray, noisy: np.ndarray | None = None,
                    indices=None, peak: float = 1.0, metadata: dict | None = None) -> MetricReport:
    """Score a [z, y, x] estimate against the clean volume slice by slice."""
    idx = range(clean.shape[0]) if indices is None else indices
    rows = []
    for i in idx:
        row = {"slice": int(i), "psnr_db": psnr(estimate[i], clean[i], peak), "ssim": ssim(estimate[i], clean[i], peak)}
        if noisy is not None:
            row["residual_std"] = residual_stats(noisy[i], estimate[i])["full"]["std"]
        rows.append(row)
    return MetricReport(name, rows, dict(metadata or {}))


def _jsonable(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return _jsonable(v.item())
    return v


CSV_FIELDS = ("name", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std")


def emit_report(entries: list[MetricReport], out_dir, metadata: dict | None = None) -> tuple[str, str]:
    """Write ``report.csv`` (4 decimals) and ``report.json`` (full precision); returns both paths."""
    if not entries:
        raise ValueError("report needs at least one entry")
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "report.csv")
    json_path = os.path.join(out_dir, "report.json")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for e in entries:
            s = e.summary()
            w.writerow([e.name] + [_fmt4(s[k]) for k in CSV_FIELDS[1:]])
    doc = {
        "metadata": dict(metadata or {}),
        "methods": [
            {"name": e.name, "summary": e.summary(), "per_slice": e.per_slice, "metadata": e.metadata}
            for e in entries
        ],
    }
    with open(json_path, "w") as fh:
        json.dump(_jsonable(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return csv_path, json_path


def _fmt4(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.4f}"


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (row[k] if k == "name" else float(row[k])) for k in CSV_FIELDS}
            for row in csv.DictReader(fh)
        ]


def read_report_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
