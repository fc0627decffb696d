"""Training-time measurement: per-layer activation histograms over update
windows, a total-variation drift metric between consecutive windows, and
plain CSV emitters.

Histograms answer "did this layer's input distribution move when that
happened" questions, which is how clipping policies get compared here.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ActivationHistogram",
    "record_activations",
    "HistogramSeries",
    "tv_distance",
    "drift_metric",
    "ActivationRecorder",
    "MetricsWriter",
]


def _fmt(x) -> str:
    # repr of a Python float round-trips exactly; never emit numpy's str().
    return repr(float(x))


def _default_edges() -> np.ndarray:
    # 50 bins across the tanh codomain.
    return np.linspace(-1.0, 1.0, 51)


@dataclass
class ActivationHistogram:
    """Counts of activation values over fixed bins.

    Values outside the edge range land in the nearest boundary bin, so mass
    is conserved even when something escapes the expected codomain.
    """

    edges: np.ndarray = field(default_factory=_default_edges)
    counts: np.ndarray = field(init=False)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        if self.edges.ndim != 1 or self.edges.size < 2:
            raise ValueError("need at least two bin edges")
        if not (np.diff(self.edges) > 0).all():
            raise ValueError("bin edges must be strictly increasing")
        self.counts = np.zeros(self.edges.size - 1, dtype=np.int64)

    @property
    def n_bins(self) -> int:
        return self.counts.size

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def add(self, values: np.ndarray) -> None:
        v = np.asarray(values, dtype=np.float64).reshape(-1)
        if v.size == 0:
            return
        if not np.isfinite(v).all():
            raise ValueError("non-finite activation value")
        idx = np.searchsorted(self.edges, v, side="right") - 1
        np.clip(idx, 0, self.n_bins - 1, out=idx)
        np.add.at(self.counts, idx, 1)

    def masses(self) -> np.ndarray:
        """Normalized bin masses; zero vector if nothing was recorded."""
        t = self.total
        if t == 0:
            return np.zeros(self.n_bins, dtype=np.float64)
        return self.counts / t

    def reset(self) -> None:
        self.counts[:] = 0


def record_activations(trace, layer: int, accumulator: ActivationHistogram) -> ActivationHistogram:
    """Add every hidden-state scalar of one layer's window to the accumulator."""
    if not (1 <= layer <= len(trace.hidden)):
        raise ValueError(f"trace has no layer {layer}")
    accumulator.add(trace.hidden[layer - 1])
    return accumulator


def tv_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Total-variation distance between two binned mass vectors, in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("mass vectors must have matching shape")
    return 0.5 * float(np.abs(a - b).sum())


@dataclass
class HistogramSeries:
    """One layer's sequence of per-window bin-mass vectors, shared edges."""

    layer: int
    edges: np.ndarray = field(default_factory=_default_edges)
    window_updates: int = 20
    masses: list[np.ndarray] = field(default_factory=list)

    def append_window(self, mass: np.ndarray) -> None:
        mass = np.asarray(mass, dtype=np.float64)
        if mass.shape != (self.edges.size - 1,):
            raise ValueError("mass vector does not match the bin edges")
        if abs(float(mass.sum()) - 1.0) > 1e-9:
            raise ValueError("window mass does not sum to 1")
        self.masses.append(mass)

    @property
    def n_windows(self) -> int:
        return len(self.masses)


def drift_metric(series: HistogramSeries) -> tuple[list[float], float]:
    """TV distance between consecutive windows and the mean drift."""
    if series.n_windows < 2:
        raise ValueError("need at least two windows to measure drift")
    values = [tv_distance(a, b) for a, b in zip(series.masses, series.masses[1:])]
    return values, float(np.mean(values))


class ActivationRecorder:
    """Feeds one HistogramSeries per layer from forward traces.

    Accumulates `window_updates` updates per flushed window and stops after
    `horizon_updates` updates; early training is the interesting part.
    """

    def __init__(
        self,
        n_layers: int,
        edges: np.ndarray | None = None,
        window_updates: int = 20,
        horizon_updates: int = 500,
    ):
        if n_layers < 1:
            raise ValueError("need at least one layer")
        if window_updates < 1 or horizon_updates < window_updates:
            raise ValueError("bad window/horizon sizes")
        base = np.asarray(edges, dtype=np.float64) if edges is not None else _default_edges()
        self.series = {
            k: HistogramSeries(k, base.copy(), window_updates) for k in range(1, n_layers + 1)
        }
        self._acc = {k: ActivationHistogram(base.copy()) for k in range(1, n_layers + 1)}
        self.window_updates = window_updates
        self.horizon_updates = horizon_updates
        self._updates = 0

    @property
    def done(self) -> bool:
        return self._updates >= self.horizon_updates

    def record(self, trace) -> None:
        if self.done:
            return
        for k, acc in self._acc.items():
            record_activations(trace, k, acc)
        self._updates += 1
        if self._updates % self.window_updates == 0:
            for k, acc in self._acc.items():
                self.series[k].append_window(acc.masses())
                acc.reset()


class MetricsWriter:
    """CSV emitters for one run directory. Floats go through repr() so two
    identical runs produce byte-identical files."""

    def __init__(self, out_dir: str | Path):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._files: dict[str, object] = {}
        self._writers: dict = {}

    def _writer(self, name: str, header: list[str]):
        if name not in self._writers:
            f = open(self.out_dir / f"{name}.csv", "w", newline="")
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            self._files[name] = f
            self._writers[name] = w
        return self._writers[name]

    def log_epoch(self, phase: int, epoch: int, train_loss: float, valid_ppl: float) -> None:
        w = self._writer("epochs", ["phase", "epoch", "train_loss", "valid_ppl"])
        w.writerow([phase, epoch, _fmt(train_loss), _fmt(valid_ppl)])

    def log_group_norms(self, step: int, pre: dict[str, float], post: dict[str, float]) -> None:
        try:
            w = self._writer("gradnorms", ["step", "group", "pre_norm", "post_norm"])
            for group in pre:
                w.writerow([step, group, _fmt(pre[group]), _fmt(post[group])])
        except OSError as exc:
            raise OSError(f"writing gradient norms at step {step}: {exc}") from exc

    def log_histograms(self, recorder: ActivationRecorder) -> None:
        w = self._writer("histograms", ["step_window", "layer", "bin_index", "mass"])
        for layer in sorted(recorder.series):
            series = recorder.series[layer]
            for win, mass in enumerate(series.masses):
                for b, m in enumerate(mass):
                    w.writerow([win, layer, b, _fmt(m)])

    def log_drift(self, recorder: ActivationRecorder) -> None:
        w = self._writer("drift", ["window", "layer", "tv_distance"])
        for layer in sorted(recorder.series):
            series = recorder.series[layer]
            if series.n_windows < 2:
                continue
            values, _ = drift_metric(series)
            for win, v in enumerate(values, 1):
                w.writerow([win, layer, _fmt(v)])

    def log_mi(self, epoch: int, mis: list[float]) -> None:
        w = self._writer("mi", ["epoch", "layer", "mi_bits"])
        for layer, v in enumerate(mis):
            w.writerow([epoch, layer, _fmt(v)])

    def close(self) -> None:
        for f in self._files.values():
            f.close()  # type: ignore[attr-defined]
        self._files.clear()
        self._writers.clear()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
