"""Multivariate magnitude series: loading, normalization, sliding windows.

The on-disk format is a UTF-8 CSV with a header row, first column ``time``
(decimal, strictly increasing), remaining columns one magnitude series per
star. Optional sibling files ``<name>.labels.csv`` and ``<name>.noise.csv``
carry {0,1} cells of identical shape (ground-truth anomalies and
concurrent-noise masks).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class ObservationFrame:
    """N-variate magnitude matrix with per-timestamp times.

    ``values`` is N x CT, ``times`` has length CT and is strictly increasing.
    ``labels`` / ``noise_mask`` are optional {0,1} matrices of the same shape
    as ``values``.
    """

    values: np.ndarray
    times: np.ndarray
    labels: np.ndarray | None = None
    noise_mask: np.ndarray | None = None
    variate_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        times = np.asarray(self.times, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "times", times)
        if values.ndim != 2:
            raise DataError("values must be a 2-D (variates x timestamps) matrix")
        if times.shape != (values.shape[1],):
            raise DataError("times length must equal the number of timestamps")
        if np.any(np.isnan(values)):
            raise DataError("values contain NaN; gaps must be resolved at load time")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            bad = int(np.flatnonzero(np.diff(times) <= 0)[0]) + 1
            raise DataError(f"times must be strictly increasing (violated at index {bad})")
        for attr in ("labels", "noise_mask"):
            m = getattr(self, attr)
            if m is not None:
                m = np.asarray(m, dtype=np.int8)
                object.__setattr__(self, attr, m)
                if m.shape != values.shape:
                    raise DataError(
                        f"{attr} shape {m.shape} does not match values shape {values.shape}")
        if not self.variate_names:
            object.__setattr__(
                self, "variate_names",
                tuple(f"star{i}" for i in range(values.shape[0])))
        self.values.setflags(write=False)
        self.times.setflags(write=False)

    @property
    def n_variates(self) -> int:
        return self.values.shape[0]

    @property
    def n_timestamps(self) -> int:
        return self.values.shape[1]

    def median_interval(self) -> float:
        if self.times.size < 2:
            return 1.0
        return float(np.median(np.diff(self.times)))


@dataclass(frozen=True)
class NormStats:
    """Per-variate min/max extrema, derived from the training split only."""

    vmin: np.ndarray
    vmax: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vmin", np.asarray(self.vmin, dtype=np.float64))
        object.__setattr__(self, "vmax", np.asarray(self.vmax, dtype=np.float64))
        if np.any(self.vmax < self.vmin):
            raise DataError("max < min in normalization stats")


@dataclass(frozen=True)
class WindowInstance:
    """One sliding-window sample.

    ``long`` is the N x W context segment, ``short`` its trailing N x omega
    columns; ``positions`` are global integer indices of the W columns and
    ``deltas`` the time intervals normalized by the training median interval.
    """

    long: np.ndarray
    short: np.ndarray
    positions: np.ndarray
    deltas: np.ndarray
    end_index: int

    def __post_init__(self):
        omega = self.short.shape[1]
        w = self.long.shape[1]
        if not omega < w:
            raise DataError("short window must be strictly shorter than long window")
        if not np.array_equal(self.short, self.long[:, -omega:]):
            raise DataError("short segment must equal the trailing columns of long")


def _read_matrix_csv(path: Path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Parse a time+variates CSV; returns (times, values N x CT, names)."""
    times: list[float] = []
    rows: list[list[float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 2:
            raise DataError(f"{path}: header must contain a time column and >=1 variate")
        names = [h.strip() for h in header[1:]]
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataError(f"{path}: line {lineno}: expected {width} fields, got {len(row)}")
            try:
                parsed = [float(cell) for cell in row]
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            times.append(parsed[0])
            rows.append(parsed[1:])
    if not rows:
        raise DataError(f"{path}: no data rows")
    values = np.asarray(rows, dtype=np.float64).T
    return np.asarray(times, dtype=np.float64), values, names


def load_csv(path: str | Path) -> ObservationFrame:
    """Load a frame plus optional ``.labels.csv`` / ``.noise.csv`` siblings."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such data file: {path}")
    times, values, names = _read_matrix_csv(path)
    if times.size > 1:
        bad = np.flatnonzero(np.diff(times) <= 0)
        if bad.size:
            # +2: header line plus 0-based diff offset
            raise DataError(f"{path}: non-increasing time at data row {int(bad[0]) + 2}")

    def _sibling(suffix: str) -> np.ndarray | None:
        sib = path.with_suffix(f".{suffix}.csv")
        if not sib.exists():
            return None
        _, mat, _ = _read_matrix_csv(sib)
        if mat.shape != values.shape:
            raise DataError(
                f"{sib}: shape {mat.shape} does not match frame shape {values.shape}")
        if not np.isin(mat, (0.0, 1.0)).all():
            raise DataError(f"{sib}: cells must be 0 or 1")
        return mat.astype(np.int8)

    return ObservationFrame(values=values, times=times,
                            labels=_sibling("labels"),
                            noise_mask=_sibling("noise"),
                            variate_names=tuple(names))


def save_csv(frame: ObservationFrame, path: str | Path) -> None:
    """Write a frame (and label/noise siblings if present) in the load_csv format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def _write(fname: Path, matrix: np.ndarray, fmt: str) -> None:
        with open(fname, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time", *frame.variate_names])
            for j in range(frame.n_timestamps):
                writer.writerow([repr(float(frame.times[j])),
                                 *(fmt % v for v in matrix[:, j])])

    _write(path, frame.values, "%.10g")
    if frame.labels is not None:
        _write(path.with_suffix(".labels.csv"), frame.labels, "%d")
    if frame.noise_mask is not None:
        _write(path.with_suffix(".noise.csv"), frame.noise_mask, "%d")


def fit_normalize(frame: ObservationFrame) -> NormStats:
    """Columnwise-free per-variate extrema; constant variates get max=min+1."""
    vmin = frame.values.min(axis=1)
    vmax = frame.values.max(axis=1)
    constant = vmax == vmin
    if np.any(constant):
        warnings.warn(
            f"{int(constant.sum())} constant variate(s); widening range to avoid "
            "division by zero", stacklevel=2)
        vmax = np.where(constant, vmin + 1.0, vmax)
    return NormStats(vmin=vmin, vmax=vmax)


def apply_normalize(frame: ObservationFrame, stats: NormStats) -> ObservationFrame:
    """Map each value to (v - min)/(max - min).

    Values outside the training range land outside [0, 1] on purpose: the
    reconstruction head can only emit (0, 1), so out-of-range points keep
    their full residual instead of being squashed by clipping.
    """
    span = (stats.vmax - stats.vmin)[:, None]
    scaled = (frame.values - stats.vmin[:, None]) / span
    return ObservationFrame(values=scaled, times=frame.times,
                            labels=frame.labels, noise_mask=frame.noise_mask,
                            variate_names=frame.variate_names)


def invert_normalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """Exact inverse of apply_normalize, for reporting."""
    span = (stats.vmax - stats.vmin)[:, None]
    return values * span + stats.vmin[:, None]


def make_windows(frame: ObservationFrame, w: int, omega: int, stride: int = 1,
                 median_interval: float | None = None) -> list[WindowInstance]:
    """Slice the frame into sliding-window instances.

    Instances end at global indices t = W-1, W-1+stride, ...; the count is
    floor((CT - W)/stride) + 1. ``median_interval`` is the training-frame
    median sampling interval used to normalize deltas; defaults to this
    frame's own median. The first delta of the series (no predecessor) is
    defined as the median interval, i.e. normalized 1.0.
    """
    if not 0 < omega < w:
        raise ValueError("require 0 < omega < W")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ct = frame.n_timestamps
    if ct < w:
        warnings.warn(f"series length {ct} < window {w}; no windows produced",
                      stacklevel=2)
        return []
    med = frame.median_interval() if median_interval is None else float(median_interval)
    if med <= 0:
        med = 1.0
    raw_deltas = np.empty(ct, dtype=np.float64)
    raw_deltas[0] = med
    raw_deltas[1:] = np.diff(frame.times)
    deltas = raw_deltas / med
    positions = np.arange(ct, dtype=np.int64)

    instances = []
    for end in range(w - 1, ct, stride):
        lo = end - w + 1
        long = frame.values[:, lo:end + 1]
        instances.append(WindowInstance(
            long=long,
            short=long[:, -omega:],
            positions=positions[lo:end + 1],
            deltas=deltas[lo:end + 1],
            end_index=end,
        ))
    return instances
