"""Scoring and POT thresholding."""

import numpy as np
import pytest

from aero.data import ObservationFrame, make_windows
from aero.detection import (PotThreshold, ScoreSeries, _grimshaw, _moments_fit,
                            label, pot_fit, pot_fit_per_variate,
                            save_threshold_report, score_stream)
from aero.noisegraph import NoiseModule
from aero.temporal import TemporalModule
from aero.training import TrainConfig, train_stage1, train_stage2


def _setup(seed=0, ct=160):
    rng = np.random.default_rng(seed)
    values = np.clip(0.5 + rng.normal(0, 0.1, (3, ct)), 0, 1)
    frame = ObservationFrame(values=values, times=np.arange(ct, dtype=float))
    wins = make_windows(frame, 24, 8)
    cfg = TrainConfig(w=24, omega=8, d_m=8, heads=2, max_epochs=2,
                      batch_size=16, stride=1, seed=seed)
    temporal, _ = train_stage1(wins, cfg)
    noise, _ = train_stage2(wins, temporal, cfg)
    return wins, temporal, noise


def test_scores_are_last_column_residual_magnitude():
    wins, temporal, noise = _setup()
    series = score_stream(wins, temporal, None)
    from aero.training import stage1_outputs
    y1 = stage1_outputs(temporal, wins)
    shorts = np.stack([w.short for w in wins])
    expected = np.abs((shorts - y1)[:, :, -1]).T
    np.testing.assert_allclose(series.scores, expected, rtol=1e-12)
    assert (series.scores >= 0).all()
    np.testing.assert_array_equal(series.end_indices,
                                  [w.end_index for w in wins])


def test_online_equals_batch_scoring():
    wins, temporal, noise = _setup(seed=1)
    batch = score_stream(wins, temporal, noise)
    for i in (0, 5, len(wins) - 1):
        one = score_stream(wins[i:i + 1], temporal, noise)
        np.testing.assert_allclose(one.scores[:, 0], batch.scores[:, i],
                                   rtol=1e-8, atol=1e-12)


def test_precomputed_y1_matches():
    wins, temporal, noise = _setup(seed=2)
    from aero.training import stage1_outputs
    y1 = stage1_outputs(temporal, wins)
    a = score_stream(wins, temporal, noise)
    b = score_stream(wins, temporal, noise, y1=y1)
    np.testing.assert_array_equal(a.scores, b.scores)


def test_score_series_validation():
    with pytest.raises(ValueError):
        ScoreSeries(scores=np.zeros((2, 3)), end_indices=np.arange(4))
    with pytest.raises(ValueError):
        score_stream([], TemporalModule(d_m=8, heads=2), None)


# ---------------------------------------------------------------------------
# POT tail fit
# ---------------------------------------------------------------------------

def test_pot_exponential_tail_oracle():
    # Exponential(1): the true 1-q quantile is -ln(q); single-trial version
    # of the acceptance benchmark with a loose tolerance
    rng = np.random.default_rng(0)
    s = rng.exponential(1.0, size=100_000)
    fit = pot_fit(s, level=0.99, q=0.001)
    assert fit.method in ("grimshaw", "moments")
    assert fit.z_q == pytest.approx(-np.log(0.001), rel=0.08)
    assert abs(fit.gamma) < 0.15  # exponential has gamma = 0


def test_pot_threshold_monotone_in_q():
    rng = np.random.default_rng(1)
    s = rng.exponential(1.0, size=50_000)
    z1 = pot_fit(s, q=0.005).z_q
    z2 = pot_fit(s, q=0.0005).z_q
    assert z2 > z1 >= pot_fit(s, q=0.005).t0


def test_pot_heavy_tail_positive_gamma():
    # Pareto tail: gamma should come out clearly positive
    rng = np.random.default_rng(2)
    s = rng.pareto(2.0, size=100_000)
    fit = pot_fit(s)
    assert fit.gamma > 0.2
    assert fit.z_q > fit.t0


def test_pot_empirical_fallback_on_degenerate_tail():
    s = np.zeros(200)
    s[:5] = 1.0
    with pytest.warns(UserWarning, match="excesses"):
        fit = pot_fit(s)
    assert fit.method == "empirical"
    assert fit.z_q >= fit.t0


def test_pot_input_validation():
    rng = np.random.default_rng(3)
    s = rng.exponential(1.0, size=1000)
    with pytest.raises(ValueError, match="at least 100"):
        pot_fit(s[:50])
    with pytest.raises(ValueError, match="level"):
        pot_fit(s, level=1.5)
    with pytest.raises(ValueError, match="q must"):
        pot_fit(s, level=0.99, q=0.5)


def test_grimshaw_recovers_gpd_parameters():
    # exact GPD sample via inverse CDF: y = sigma/gamma * ((1-u)^-gamma - 1)
    rng = np.random.default_rng(4)
    gamma, sigma = 0.3, 2.0
    u = rng.random(200_000)
    y = sigma / gamma * ((1.0 - u) ** -gamma - 1.0)
    g, s = _grimshaw(y)
    assert g == pytest.approx(gamma, abs=0.03)
    assert s == pytest.approx(sigma, rel=0.05)


def test_moments_fit_on_exponential():
    rng = np.random.default_rng(5)
    y = rng.exponential(3.0, size=100_000)
    g, s = _moments_fit(y)
    assert g == pytest.approx(0.0, abs=0.02)
    assert s == pytest.approx(3.0, rel=0.05)


def test_pot_threshold_validation():
    with pytest.raises(ValueError):
        PotThreshold(t0=1.0, gamma=0.0, sigma=-1.0, z_q=2.0, n=10,
                     n_excesses=5, level=0.99, q=0.001, method="grimshaw")
    with pytest.raises(ValueError):
        PotThreshold(t0=1.0, gamma=0.0, sigma=1.0, z_q=0.5, n=10,
                     n_excesses=5, level=0.99, q=0.001, method="grimshaw")


def test_per_variate_fit_and_labeling():
    rng = np.random.default_rng(6)
    scores = np.stack([rng.exponential(1.0, 5000), rng.exponential(5.0, 5000)])
    fits = pot_fit_per_variate(scores)
    assert fits[1].z_q > fits[0].z_q
    series = ScoreSeries(scores=scores, end_indices=np.arange(5000))
    lab = label(series, fits)
    assert lab.shape == scores.shape and lab.dtype == np.int8
    shared = label(series, fits[0])
    assert shared[1].sum() > lab[1].sum()  # variate 1 needs its own threshold
    with pytest.raises(ValueError, match="per variate"):
        label(series, fits[:1])


def test_label_uses_geq():
    series = ScoreSeries(scores=np.array([[1.0, 2.0, 3.0]]),
                         end_indices=np.arange(3))
    t = PotThreshold(t0=1.0, gamma=0.0, sigma=1.0, z_q=2.0, n=100,
                     n_excesses=10, level=0.99, q=0.001, method="grimshaw")
    np.testing.assert_array_equal(label(series, t), [[0, 1, 1]])


def test_threshold_report_roundtrip(tmp_path):
    t = PotThreshold(t0=1.5, gamma=0.1, sigma=0.7, z_q=3.25, n=1000,
                     n_excesses=42, level=0.99, q=0.001, method="grimshaw")
    path = tmp_path / "report.txt"
    save_threshold_report(t, path)
    parsed = dict(line.split(" = ") for line in path.read_text().splitlines())
    assert float(parsed["z_q"]) == 3.25
    assert parsed["method"] == "grimshaw"
    assert int(parsed["n_excesses"]) == 42
