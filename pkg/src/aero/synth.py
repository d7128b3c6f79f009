"""Synthetic star-magnitude benchmark generator.

Basic signals are either pure Gaussian noise N(0, 0.2^2) (non-variable stars)
or 2*sin(2*pi*pos/T) plus the same Gaussian noise (variable stars, period T
drawn uniformly from [100, 300]). Three kinds of concurrent noise (drift,
darken-then-recover, exponential brightening) are injected onto >=2 variates
over a shared interval, each carrying a shared high-frequency jitter on top
of the smooth template, and three kinds of single-variate true anomalies
(flare, dip, burst) provide ground truth. Everything is deterministic under
the configured seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import ObservationFrame

NOISE_KINDS = ("drift", "darken_recover", "brighten")
ANOMALY_KINDS = ("flare", "dip", "burst")

GAUSS_STD = 0.2
GAUSS_TRUNCATION = 3.0  # clip measurement noise at +-3 sigma
SINE_AMPLITUDE = 2.0
PERIOD_RANGE = (100.0, 300.0)
BRIGHTEN_CURVATURE = 3.0  # shape constant of the exponential ramp
FLARE_DECAY_RATE = 5.0


class GenerationError(ValueError):
    """Inconsistent generation request (bounds, overlaps, unknown preset)."""


@dataclass(frozen=True)
class NoiseEvent:
    """One concurrent-noise event: same additive shape on several variates.

    ``jitter`` is the standard deviation of a shared high-frequency
    fluctuation riding on the smooth template (rapid transparency changes
    during the weather event). Each affected variate sees the same jitter
    series up to a positive per-variate scale.
    """

    kind: str
    variates: tuple[int, ...]
    start: int
    duration: int
    amplitude: float
    jitter: float = 0.0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise GenerationError(f"unknown noise kind {self.kind!r}")
        if len(self.variates) < 2:
            raise GenerationError("concurrent noise must touch >=2 variates")
        if self.duration < 1:
            raise GenerationError("noise duration must be >=1")
        if self.jitter < 0.0:
            raise GenerationError("noise jitter must be >=0")
        object.__setattr__(self, "variates", tuple(sorted(self.variates)))


@dataclass(frozen=True)
class AnomalyEvent:
    """One true anomaly on a single variate."""

    kind: str
    variate: int
    start: int
    duration: int
    amplitude: float

    def __post_init__(self):
        if self.kind not in ANOMALY_KINDS:
            raise GenerationError(f"unknown anomaly kind {self.kind!r}")
        if self.duration < 1:
            raise GenerationError("anomaly duration must be >=1")


@dataclass(frozen=True)
class GenSpec:
    """Full recipe for one synthetic split."""

    n_variates: int
    length: int
    variable_fraction: float = 0.5
    noise_events: tuple[NoiseEvent, ...] = field(default=())
    anomaly_events: tuple[AnomalyEvent, ...] = field(default=())
    seed: int = 0
    base_seed: int | None = None  # controls variable-star structure; defaults to seed

    def __post_init__(self):
        if not 0.0 <= self.variable_fraction <= 1.0:
            raise GenerationError("variable_fraction must lie in [0, 1]")
        for ev in (*self.noise_events, *self.anomaly_events):
            if ev.start < 0 or ev.start + ev.duration > self.length:
                raise GenerationError(f"event {ev} exceeds series bounds [0, {self.length})")
        vmax = self.n_variates
        for ev in self.noise_events:
            if max(ev.variates) >= vmax:
                raise GenerationError(f"noise event references variate >= {vmax}")
        for ev in self.anomaly_events:
            if ev.variate >= vmax:
                raise GenerationError(f"anomaly event references variate >= {vmax}")


def gen_basic(spec: GenSpec) -> ObservationFrame:
    """Generate the clean basic signals on a uniform integer time grid."""
    base_seed = spec.seed if spec.base_seed is None else spec.base_seed
    rng_structure = np.random.default_rng(base_seed)
    rng_noise = np.random.default_rng(spec.seed)

    n, length = spec.n_variates, spec.length
    n_variable = int(round(spec.variable_fraction * n))
    variable = rng_structure.choice(n, size=n_variable, replace=False)
    periods = rng_structure.uniform(*PERIOD_RANGE, size=n)

    pos = np.arange(length, dtype=np.float64)
    # truncated Gaussian: raw single-point excursions beyond 3 sigma would be
    # indistinguishable from injected anomalies, so the measurement noise is
    # clipped (a <1.5% perturbation of the standard deviation)
    lim = GAUSS_TRUNCATION * GAUSS_STD
    values = np.clip(rng_noise.normal(0.0, GAUSS_STD, size=(n, length)), -lim, lim)
    for v in variable:
        values[v] += SINE_AMPLITUDE * np.sin(2.0 * math.pi * pos / periods[v])

    return ObservationFrame(
        values=values,
        times=pos.copy(),
        labels=np.zeros((n, length), dtype=np.int8),
        noise_mask=np.zeros((n, length), dtype=np.int8),
    )


def _noise_shape(kind: str, duration: int, amplitude: float) -> np.ndarray:
    k = np.arange(duration, dtype=np.float64)
    if kind == "drift":
        return np.full(duration, amplitude)
    if kind == "darken_recover":
        return amplitude * np.sin(math.pi * k / duration)
    if kind == "brighten":
        c = BRIGHTEN_CURVATURE
        return amplitude * (np.exp(c * k / duration) - 1.0) / (math.exp(c) - 1.0)
    raise GenerationError(f"unknown noise kind {kind!r}")


def _anomaly_shape(kind: str, duration: int, amplitude: float,
                   rng: np.random.Generator) -> np.ndarray:
    k = np.arange(duration, dtype=np.float64)
    if kind == "flare":
        rise = max(1, duration // 8)  # steep rise, slow exponential decay
        c = BRIGHTEN_CURVATURE
        shape = np.empty(duration)
        kr = np.arange(rise, dtype=np.float64)
        shape[:rise] = amplitude * (np.exp(c * (kr + 1.0) / rise) - 1.0) / (math.exp(c) - 1.0)
        tail = max(1, duration - rise)
        kd = np.arange(duration - rise, dtype=np.float64)
        shape[rise:] = amplitude * np.exp(-FLARE_DECAY_RATE * (kd + 1.0) / tail)
        return shape
    if kind == "dip":
        # box-shaped occultation: sharp ingress and egress
        return np.full(duration, -amplitude)
    if kind == "burst":
        signs = rng.choice((-1.0, 1.0), size=duration)
        return amplitude * signs
    raise GenerationError(f"unknown anomaly kind {kind!r}")


def inject_noise(frame: ObservationFrame, events: tuple[NoiseEvent, ...] | list[NoiseEvent],
                 seed: int = 0) -> ObservationFrame:
    """Add concurrent-noise events; returns a frame with noise_mask filled.

    ``seed`` drives the shared jitter series of events with ``jitter > 0``
    and the positive per-variate jitter scales.
    """
    rng = np.random.default_rng(seed)
    values = frame.values.copy()
    mask = (np.zeros_like(values, dtype=np.int8) if frame.noise_mask is None
            else frame.noise_mask.copy())
    labels = frame.labels
    for ev in events:
        sl = slice(ev.start, ev.start + ev.duration)
        if sl.stop > frame.n_timestamps:
            raise GenerationError(f"noise event {ev} exceeds frame length")
        shape = _noise_shape(ev.kind, ev.duration, ev.amplitude)
        shared = (rng.normal(0.0, ev.jitter, size=ev.duration)
                  if ev.jitter > 0.0 else None)
        for v in ev.variates:
            if labels is not None and labels[v, sl].any():
                raise GenerationError(
                    f"noise event on variate {v} overlaps an anomaly in "
                    f"[{ev.start}, {sl.stop})")
            values[v, sl] += shape
            if shared is not None:
                values[v, sl] += float(rng.uniform(0.7, 1.3)) * shared
            mask[v, sl] = 1
    return ObservationFrame(values=values, times=frame.times, labels=labels,
                            noise_mask=mask, variate_names=frame.variate_names)


def inject_anomalies(frame: ObservationFrame,
                     events: tuple[AnomalyEvent, ...] | list[AnomalyEvent],
                     seed: int = 0) -> ObservationFrame:
    """Add true-anomaly events; returns a frame with labels filled."""
    rng = np.random.default_rng(seed)
    values = frame.values.copy()
    labels = (np.zeros_like(values, dtype=np.int8) if frame.labels is None
              else frame.labels.copy())
    mask = frame.noise_mask
    for ev in events:
        sl = slice(ev.start, ev.start + ev.duration)
        if sl.stop > frame.n_timestamps:
            raise GenerationError(f"anomaly event {ev} exceeds frame length")
        if mask is not None and mask[ev.variate, sl].any():
            raise GenerationError(
                f"anomaly on variate {ev.variate} overlaps concurrent noise in "
                f"[{ev.start}, {sl.stop})")
        values[ev.variate, sl] += _anomaly_shape(ev.kind, ev.duration, ev.amplitude, rng)
        labels[ev.variate, sl] = 1
    return ObservationFrame(values=values, times=frame.times, labels=labels,
                            noise_mask=mask, variate_names=frame.variate_names)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Preset:
    n_variates: int = 24
    length: int = 4000
    # most field stars are photometrically quiet; only a minority shows
    # intrinsic periodic variability
    variable_fraction: float = 0.25
    n_noise_variates: int = 17
    noise_fraction: float = 0.01719
    anomaly_segments: int = 5
    anomaly_fraction: float = 0.0018
    min_anomaly_gap: int = 200  # keeps point-adjust segments unambiguous
    noise_amplitude: tuple[float, float] = (0.8, 1.5)
    anomaly_amplitude: tuple[float, float] = (7.0, 9.0)
    noise_duration: tuple[int, int] = (30, 60)
    noise_group: tuple[int, int] = (3, 6)
    # shared high-frequency jitter inside each masked event (raw std); this
    # is what makes concurrent noise look like anomalies to a per-star model
    noise_jitter: float = 1.5


PRESETS: dict[str, Preset] = {
    "middle": Preset(),
    "high": Preset(anomaly_segments=10, anomaly_fraction=0.00359),
    "low": Preset(noise_fraction=0.03438),
}


def _draw_noise_events(rng: np.random.Generator, preset: Preset,
                       noise_variates: np.ndarray) -> list[NoiseEvent]:
    """Draw events until the noise cell budget is met; every designated noise
    variate participates in at least one event."""
    budget = int(round(preset.noise_fraction * preset.n_variates * preset.length))
    lo_d, hi_d = preset.noise_duration
    lo_g, hi_g = preset.noise_group
    events: list[NoiseEvent] = []
    cells = 0

    # first pass: chunk the shuffled noise variates so each appears once
    pool = noise_variates.copy()
    rng.shuffle(pool)
    groups: list[np.ndarray] = []
    i = 0
    while i < len(pool):
        g = int(rng.integers(lo_g, hi_g + 1))
        if len(pool) - i - g == 1:  # avoid leaving a singleton behind
            g += 1
        groups.append(pool[i:i + g])
        i += g

    def _amplitude(kind: str) -> float:
        mag = float(rng.uniform(*preset.noise_amplitude))
        if kind == "darken_recover":
            return -mag
        if kind == "drift":
            return mag if rng.random() < 0.5 else -mag
        return mag

    gi = 0
    while cells < budget:
        if gi < len(groups):
            variates = groups[gi]
        else:
            g = int(rng.integers(lo_g, hi_g + 1))
            variates = rng.choice(noise_variates, size=g, replace=False)
        gi += 1
        kind = NOISE_KINDS[int(rng.integers(0, len(NOISE_KINDS)))]
        duration = int(rng.integers(lo_d, hi_d + 1))
        remaining = budget - cells
        if gi > len(groups) and duration * len(variates) > remaining:
            duration = max(1, remaining // len(variates))
        start = int(rng.integers(0, preset.length - duration))
        events.append(NoiseEvent(kind=kind, variates=tuple(int(v) for v in variates),
                                 start=start, duration=duration,
                                 amplitude=_amplitude(kind),
                                 jitter=preset.noise_jitter * float(rng.uniform(0.8, 1.2))))
        cells += duration * len(variates)
    return events


def _draw_anomaly_events(rng: np.random.Generator, preset: Preset,
                         noise_events: list[NoiseEvent]) -> list[AnomalyEvent]:
    total_points = int(round(preset.anomaly_fraction * preset.n_variates * preset.length))
    n_seg = preset.anomaly_segments
    base = total_points // n_seg

    noise_spans: dict[int, list[tuple[int, int]]] = {}
    for ev in noise_events:
        for v in ev.variates:
            noise_spans.setdefault(v, []).append((ev.start, ev.start + ev.duration))

    # sharp shapes dominate; slow dips stay in the mix for shape coverage
    kind_cycle = ("flare", "burst", "flare", "dip", "burst")
    events: list[AnomalyEvent] = []
    placed: list[tuple[int, int]] = []
    for s in range(n_seg):
        duration = max(4, base + int(rng.integers(-4, 5)))
        kind = kind_cycle[s % len(kind_cycle)]
        for _ in range(10_000):
            variate = int(rng.integers(0, preset.n_variates))
            # leave a warm-up prefix: a detector needs a full context window
            # of history before it can score a point at all
            start = int(rng.integers(preset.min_anomaly_gap,
                                     preset.length - duration))
            end = start + duration
            if any(start < pe + preset.min_anomaly_gap and ps - preset.min_anomaly_gap < end
                   for ps, pe in placed):
                continue
            if any(start < ne and ns < end for ns, ne in noise_spans.get(variate, ())):
                continue
            break
        else:
            raise GenerationError("could not place anomaly segments with required gaps")
        placed.append((start, end))
        events.append(AnomalyEvent(kind=kind, variate=variate, start=start,
                                   duration=duration,
                                   amplitude=float(rng.uniform(*preset.anomaly_amplitude))))
    return events


def gen_dataset(preset: str, seed: int = 0
                ) -> tuple[ObservationFrame, ObservationFrame]:
    """Generate (train, test) frames for a named preset.

    Both splits share the variable-star structure (which stars are sinusoidal
    and their periods) and carry concurrent noise; only the test split carries
    true anomalies, so training remains unsupervised on normal-plus-noise data.

    Each concurrent-noise event carries a shared high-frequency jitter on top
    of its smooth template, which makes the event look like an anomaly to any
    model that sees one star at a time.
    """
    if preset not in PRESETS:
        raise GenerationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[preset]
    ss = np.random.SeedSequence(seed)
    (s_base, s_train, s_test, s_events_tr, s_events_te, s_burst,
     s_jit_tr, s_jit_te) = (int(c.generate_state(1)[0]) for c in ss.spawn(8))

    rng_tr = np.random.default_rng(s_events_tr)
    rng_te = np.random.default_rng(s_events_te)
    noise_vars = np.random.default_rng(s_base).choice(
        cfg.n_variates, size=cfg.n_noise_variates, replace=False)

    train_noise = _draw_noise_events(rng_tr, cfg, noise_vars)
    test_noise = _draw_noise_events(rng_te, cfg, noise_vars)
    test_anoms = _draw_anomaly_events(rng_te, cfg, test_noise)

    train_spec = GenSpec(n_variates=cfg.n_variates, length=cfg.length,
                         variable_fraction=cfg.variable_fraction,
                         seed=s_train, base_seed=s_base,
                         noise_events=tuple(train_noise))
    test_spec = GenSpec(n_variates=cfg.n_variates, length=cfg.length,
                        variable_fraction=cfg.variable_fraction,
                        seed=s_test, base_seed=s_base,
                        noise_events=tuple(test_noise),
                        anomaly_events=tuple(test_anoms))

    train = inject_noise(gen_basic(train_spec), train_spec.noise_events, seed=s_jit_tr)
    test = inject_noise(gen_basic(test_spec), test_spec.noise_events, seed=s_jit_te)
    test = inject_anomalies(test, test_spec.anomaly_events, seed=s_burst)
    return train, test
