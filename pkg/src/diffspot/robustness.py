"""Degradation sweeps: Gaussian blur and JPEG recompression curves.

``degrade`` applies one corruption level to an image (dimensions preserved,
ground-truth masks untouched); ``sweep`` evaluates a model over every level
of every spec and emits a long-form table plus line plots of score vs level.
Blur kernel 1 is accepted as an explicit identity probe below the protocol
range (the protocol itself enumerates odd kernels 3..23 and JPEG qualities
100..60).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import data as D
from .engine import ModelState
from .evaluation import METRIC_NAMES, MetricReport, evaluate_samples
from .errors import ValidationError

KIND_GAUSSIAN_BLUR = "gaussian_blur"
KIND_JPEG = "jpeg"
KINDS = (KIND_GAUSSIAN_BLUR, KIND_JPEG)


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    levels: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not self.levels:
            raise ValueError("levels must be nonempty")
        for lv in self.levels:
            _check_level(self.kind, lv)

    @staticmethod
    def default_blur() -> "DegradationSpec":
        return DegradationSpec(KIND_GAUSSIAN_BLUR, tuple(range(3, 24, 2)))

    @staticmethod
    def default_jpeg() -> "DegradationSpec":
        return DegradationSpec(KIND_JPEG, tuple(range(100, 59, -10)))


def _check_level(kind: str, level: int) -> None:
    if kind == KIND_GAUSSIAN_BLUR:
        if level < 1 or level % 2 == 0:
            raise ValueError(f"blur kernel must be odd and >= 1, got {level}")
    else:
        if not 1 <= level <= 100:
            raise ValueError(f"jpeg quality must be in [1,100], got {level}")


def degrade(image: np.ndarray, kind: str, level: int) -> np.ndarray:
    """Apply one degradation level; output dimensions equal input dimensions."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    _check_level(kind, level)
    if kind == KIND_GAUSSIAN_BLUR:
        return D.gaussian_blur(image, level)
    return D.jpeg_recompress(image, level)


@dataclass
class SweepRow:
    kind: str
    level: int
    subset: str
    metric: str
    value: float | None


def sweep(
    manifest: D.Manifest,
    state: ModelState,
    specs: list[DegradationSpec],
    split: str | None = "test",
    threshold: float = 0.5,
) -> tuple[list[SweepRow], dict[tuple[str, int], MetricReport]]:
    """Evaluate degraded copies of the split for every (kind, level).

    Returns long-form rows (kind, level, subset incl. "AVG", metric, value)
    plus the full per-level reports.
    """
    subset = manifest.filter(split=split) if split else manifest
    if len(subset) == 0:
        raise ValidationError(f"no samples in split {split!r}")

    # Degrade decoded copies in memory and evaluate via the standard path.
    samples = [D.load_sample(subset, e) for e in subset.entries]

    rows: list[SweepRow] = []
    reports: dict[tuple[str, int], MetricReport] = {}
    for spec in specs:
        for level in spec.levels:
            degraded = [replace(s, image=degrade(s.image, spec.kind, level)) for s in samples]
            report = evaluate_samples(degraded, state, threshold=threshold)
            reports[(spec.kind, level)] = report
            for sm in report.subsets:
                for metric in METRIC_NAMES:
                    rows.append(SweepRow(spec.kind, level, sm.subset, metric, getattr(sm, metric)))
            for metric in METRIC_NAMES:
                rows.append(SweepRow(spec.kind, level, "AVG", metric, report.average[metric]))
    return rows, reports


def write_sweep_csv(rows: list[SweepRow], path: str | Path) -> None:
    """Long-form CSV: kind,level,subset,metric,value (header included)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["kind", "level", "subset", "metric", "value"])
        for r in rows:
            writer.writerow([r.kind, r.level, r.subset, r.metric,
                             "" if r.value is None else f"{r.value:.6f}"])


def plot_sweep(rows: list[SweepRow], out_dir: str | Path) -> list[Path]:
    """One PNG per (kind, metric): score vs degradation level, per subset."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    kinds = sorted({r.kind for r in rows})
    for kind in kinds:
        for metric in METRIC_NAMES:
            series: dict[str, list[tuple[int, float]]] = {}
            for r in rows:
                if r.kind == kind and r.metric == metric and r.value is not None:
                    series.setdefault(r.subset, []).append((r.level, r.value))
            if not series:
                continue
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for subset, pts in sorted(series.items()):
                pts = sorted(pts)
                ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=subset)
            ax.set_xlabel("blur kernel size" if kind == KIND_GAUSSIAN_BLUR else "jpeg quality")
            if kind == KIND_JPEG:
                ax.invert_xaxis()
            ax.set_ylabel(metric)
            ax.set_ylim(-0.02, 1.02)
            ax.legend(fontsize=7)
            ax.set_title(f"{metric} vs {kind}")
            fig.tight_layout()
            path = out_dir / f"sweep_{kind}_{metric}.png"
            fig.savefig(path, dpi=110)
            plt.close(fig)
            written.append(path)
    return written
