"""Geodesic-error scoring of point maps and distortion curves.

Errors are geodesic distances on the target shape between the mapped and
the true vertex, divided by the square root of its surface area.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .correspondence import PointMap
from .geodesics import march_many
from .mesh import TriMesh

DEFAULT_THRESHOLDS = np.linspace(0.0, 0.25, 101)
SUMMARY_THRESHOLDS = (0.01, 0.05, 0.10)
_SOURCE_BLOCK = 256

CAVEAT = ("note: ground-truth correspondences of scanned datasets are themselves "
          "ambiguous for a sizeable fraction of points; curves measure agreement "
          "with the supplied truth, not absolute accuracy")


@dataclass(frozen=True, eq=False)
class DistortionCurve:
    thresholds: np.ndarray
    fraction: np.ndarray
    label: str = ""
    count: int = 0

    def at(self, threshold: float) -> float:
        """Fraction at the largest grid threshold not above ``threshold``.

        Grid points within a relative 1e-9 of ``threshold`` count as equal,
        so ``at(0.05)`` hits the 0.05 entry of a ``linspace`` grid.
        """
        k = int(np.searchsorted(self.thresholds, threshold * (1 + 1e-9), side="right")) - 1
        return float(self.fraction[max(k, 0)])

    def save_csv(self, path) -> None:
        with open(path, "w", encoding="ascii", newline="\n") as f:
            f.write("threshold,fraction\n")
            for t, v in zip(self.thresholds.tolist(), self.fraction.tolist()):
                f.write(f"{t:.6g},{v:.10g}\n")

    def summary(self, at=SUMMARY_THRESHOLDS) -> str:
        parts = [f"{t:g}: {self.at(t):.4f}" for t in at]
        head = f"{self.label} " if self.label else ""
        return f"{head}fraction within " + ", ".join(parts) + f" (n={self.count})"


def load_truth(path) -> np.ndarray:
    """Ground truth as one target index per line."""
    with open(path, encoding="ascii") as f:
        vals = [ln.split()[0] for ln in f if ln.strip() and not ln.lstrip().startswith("#")]
    return np.array([int(v) for v in vals], dtype=np.int64)


def geodesic_errors(pm: PointMap, truth, mesh2: TriMesh, update: str = "circular") -> np.ndarray:
    """``d_2(target[i], truth[i]) / sqrt(area_2)`` for every source vertex.

    One fast march per distinct truth vertex, batched in parallel.
    """
    truth = np.asarray(truth, dtype=np.int64)
    if len(truth) != pm.n:
        raise ValueError(f"point map has {pm.n} entries but the truth has {len(truth)}")
    if truth.min() < 0 or truth.max() >= mesh2.n or pm.target_index.max() >= mesh2.n:
        raise ValueError("vertex index out of range for the target mesh")
    sources, inverse = np.unique(truth, return_inverse=True)
    err = np.empty(len(truth))
    for lo in range(0, len(sources), _SOURCE_BLOCK):
        fields = march_many(mesh2, sources[lo:lo + _SOURCE_BLOCK], update=update)
        rows = np.flatnonzero((inverse >= lo) & (inverse < lo + _SOURCE_BLOCK))
        err[rows] = fields[inverse[rows] - lo, pm.target_index[rows]]
    return err / np.sqrt(mesh2.area)


def distortion_curve(errors, thresholds=None, label: str = "") -> DistortionCurve:
    """Empirical CDF of ``errors`` sampled at ``thresholds`` (default 0 to 0.25)."""
    t = DEFAULT_THRESHOLDS if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    if t.ndim != 1 or len(t) == 0 or t[0] != 0 or np.any(np.diff(t) <= 0):
        raise ValueError("thresholds must start at 0 and increase strictly")
    e = np.sort(np.asarray(errors, dtype=np.float64))
    if len(e) == 0:
        raise ValueError("no errors to summarize")
    frac = np.searchsorted(e, t, side="right") / len(e)
    return DistortionCurve(t.copy(), frac, label, len(e))


def pooled_curve(error_sets, thresholds=None) -> DistortionCurve:
    """One curve over all points of all pairs."""
    return distortion_curve(np.concatenate([np.asarray(e) for e in error_sets]), thresholds,
                            "pooled")


def mean_curve(curves) -> DistortionCurve:
    """Pair-averaged curve (each pair weighted equally)."""
    t = curves[0].thresholds
    if any(not np.array_equal(c.thresholds, t) for c in curves):
        raise ValueError("curves use different threshold grids")
    return DistortionCurve(t, np.mean([c.fraction for c in curves], axis=0), "pair-mean",
                           sum(c.count for c in curves))


def save_svg(curves, path, title: str = "") -> None:
    """Line plot of one or more curves; output is byte-stable across runs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "distortion", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 4))
        for c in curves:
            ax.plot(c.thresholds, 100.0 * c.fraction, label=c.label or None)
        ax.set_xlabel("geodesic error / sqrt(area)")
        ax.set_ylabel("% correspondences")
        ax.set_xlim(0, curves[0].thresholds[-1])
        ax.set_ylim(0, 100)
        ax.grid(alpha=0.3)
        if title:
            ax.set_title(title)
        if any(c.label for c in curves):
            ax.legend(loc="lower right")
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
