import math
import warnings

import numpy as np
import pytest

from oracles import lag_autocorr
from spectrodiff.errors import ValidationError
from spectrodiff.metrics import (EMBED_DIM, EvalReport, SeriesSet, context_fid, correlational_score,
                                 discriminative_score, encoder_embed, evaluate, frechet_distance,
                                 predictive_score, slice_windows)
from spectrodiff.rng import substream
from spectrodiff.signal_io import SynthCohortConfig, generate_synthetic_cohort

# null thresholds from pilot runs (two independent 100-subject cohorts score ~0.006)
CORR_NULL = 0.02


def ar1(phi, n, L, seed, burn=50):
    e = substream(seed, "ar").standard_normal((n, L + burn))
    x = np.zeros_like(e)
    for t in range(1, L + burn):
        x[:, t] = phi * x[:, t - 1] + e[:, t]
    return x[:, burn:]


@pytest.fixture(scope="module")
def cohort():
    return generate_synthetic_cohort(SynthCohortConfig(10, 4, 232, seed=1))


def test_slice_windows_examples():
    x = np.zeros((3, 232))
    assert len(slice_windows([x], 24)) == 3 * 9
    assert len(slice_windows([x], 232)) == 3
    assert len(slice_windows([x], 231, stride=1)) == 3 * 2
    w = slice_windows([np.arange(10.0)[None]], 4, stride=3).windows
    assert w.tolist() == [[0, 1, 2, 3], [3, 4, 5, 6], [6, 7, 8, 9]]
    with pytest.raises(ValidationError):
        slice_windows([x], 233)


def test_encoder_examples():
    f = encoder_embed(np.ones(24))
    assert f.shape == (EMBED_DIM,)
    assert f[0] == 1.0 and f[1] == 0.0
    assert np.all(f[2:6] == 0.0)
    alt = np.array([1.0, -1.0] * 12)
    assert abs(encoder_embed(alt)[2] - lag_autocorr(alt.tolist(), 1)) < 1e-9
    assert abs(encoder_embed(alt)[2] + 1.0) < 1e-9
    w = np.random.default_rng(0).standard_normal(40)
    assert encoder_embed(w).tobytes() == encoder_embed(w.copy()).tobytes()
    for lag in range(1, 5):
        assert encoder_embed(w)[1 + lag] == pytest.approx(lag_autocorr(w.tolist(), lag), abs=1e-12)


def test_frechet_examples():
    mu, cov = np.array([0.3, -1.0]), np.array([[2.0, 0.5], [0.5, 1.0]])
    assert frechet_distance(mu, cov, mu, cov) < 1e-8
    assert frechet_distance([0.0], [[1.0]], [1.0], [[1.0]]) == pytest.approx(1.0, abs=1e-12)
    assert frechet_distance([0.0], [[1.0]], [0.0], [[4.0]]) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValidationError):
        frechet_distance([np.nan], [[1.0]], [0.0], [[1.0]])


def test_frechet_symmetric_nonnegative():
    rng = np.random.default_rng(1)
    for _ in range(50):
        d = int(rng.integers(1, 8))
        A, B = rng.standard_normal((d, d)), rng.standard_normal((d, d))
        m1, m2 = rng.standard_normal(d), rng.standard_normal(d)
        c1, c2 = A @ A.T, B @ B.T
        ab, ba = frechet_distance(m1, c1, m2, c2), frechet_distance(m2, c2, m1, c1)
        assert ab >= 0 and ab == pytest.approx(ba, rel=1e-8, abs=1e-10)
        assert frechet_distance(m1, c1, m1, c1) < 1e-8
        assert ab > 1e-6


def test_context_fid_null_and_separation():
    a = SeriesSet(ar1(0.5, 10_000, 24, 1))
    b = SeriesSet(ar1(0.5, 10_000, 24, 2))
    c = SeriesSet(ar1(-0.5, 10_000, 24, 3))
    assert context_fid(a, a) < 1e-8
    null = context_fid(a, b)
    assert null < 0.1
    assert context_fid(a, c) > null


def test_context_fid_small_sample_warns():
    a = SeriesSet(ar1(0.5, 20, 24, 1))
    with pytest.warns(UserWarning):
        context_fid(a, a)


def test_correlational_examples(cohort):
    assert correlational_score(cohort, cohort) == 0.0
    t = np.linspace(0, 1, 50)
    real = [np.stack([t, 2 * t + 1])]
    u = np.sin(2 * np.pi * np.arange(50) / 50)
    v = np.cos(2 * np.pi * np.arange(50) / 50)
    synth = [np.stack([u, v])]
    assert correlational_score(real, synth) == pytest.approx(0.2, abs=1e-12)
    with pytest.raises(ValidationError):
        correlational_score(real, [np.zeros((3, 50)) + np.arange(50)])


def test_correlational_independent_cohorts():
    a = generate_synthetic_cohort(SynthCohortConfig(50, 4, 232, seed=1))
    b = generate_synthetic_cohort(SynthCohortConfig(50, 4, 232, seed=2))
    assert correlational_score(a, b) < CORR_NULL


def test_correlational_zero_variance_roi():
    x = np.random.default_rng(0).standard_normal((3, 40))
    x[1] = 5.0
    with pytest.warns(UserWarning):
        correlational_score([x], [x])


def test_discriminative(cohort):
    real = slice_windows(cohort, 24)
    mean, _ = discriminative_score(real, real)
    assert mean < 0.1
    far = SeriesSet(real.windows + 10.0)
    assert discriminative_score(real, far)[0] > 0.4
    assert discriminative_score(real, far, repeats=1)[1] == 0.0
    with pytest.raises(ValidationError):
        discriminative_score(SeriesSet(real.windows[:39]), real)


def test_predictive_recovers_noiseless_ar2():
    phi1, phi2 = 1.2, -0.5
    x = np.zeros((20, 60))
    rng = np.random.default_rng(0)
    x[:, :2] = rng.standard_normal((20, 2))
    for t in range(2, 60):
        x[:, t] = phi1 * x[:, t - 1] + phi2 * x[:, t - 2]
    s = SeriesSet(x)
    assert predictive_score(s, s)[0] < 1e-3


def test_predictive_white_noise_matches_expectation():
    rng = np.random.default_rng(3)
    real = SeriesSet(rng.standard_normal((400, 32)))
    synth = SeriesSet(rng.standard_normal((400, 32)))
    span = real.windows.max() - real.windows.min()
    expected = math.sqrt(2 / math.pi) / span
    mae, _ = predictive_score(real, synth)
    assert abs(mae / expected - 1) < 0.1


def test_predictive_boundaries():
    x = SeriesSet(np.random.default_rng(0).standard_normal((10, 2)))
    mae, std = predictive_score(x, x)
    assert np.isfinite(mae) and np.isfinite(std)
    with pytest.raises(ValidationError):
        predictive_score(SeriesSet(np.zeros((10, 1))), SeriesSet(np.zeros((10, 1))))
    const = SeriesSet(np.ones((10, 8)))
    assert np.isfinite(predictive_score(const, const)[0])


def test_scores_invariant_to_window_order(cohort):
    real = slice_windows(cohort, 24)
    synth = SeriesSet(real.windows[::2] + 0.3)
    perm = np.random.default_rng(9).permutation(len(synth))
    shuffled = SeriesSet(synth.windows[perm])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert context_fid(real, synth) == context_fid(real, shuffled)
    assert discriminative_score(real, synth) == discriminative_score(real, shuffled)
    assert predictive_score(real, synth) == predictive_score(real, shuffled)


def test_mean_shift_sweep_monotone(cohort):
    real = slice_windows(cohort, 24)
    rows = []
    for shift in np.linspace(0.0, 2.0, 5):
        synth = SeriesSet(real.windows + shift)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fid = context_fid(real, synth)
        rows.append((fid, discriminative_score(real, synth)[0], predictive_score(real, synth)[0],
                     correlational_score(cohort, [r.series + shift for r in cohort])))
    rows = np.array(rows)
    assert np.all(np.diff(rows[:, :3], axis=0) >= 0)
    # correlation ignores a common offset; it stays at 0 up to round-off
    assert np.all(rows[:, 3] < 1e-12)


def test_evaluate_report_and_flags(cohort):
    rep = evaluate(cohort, cohort, 24, repeats=2)
    assert rep.correlational == (0.0, 0.0) and rep.context_fid[0] < 0.1
    assert rep.discriminative[0] < 0.1 and rep.flags == []
    assert rep.csv_row().count(",") == EvalReport.csv_header().count(",")
    assert "flags: none" in rep.to_text()
    tiny = evaluate(cohort[:1], cohort[:1], 232, repeats=1)
    assert "small_sample_fid" in tiny.flags
    assert "insufficient_windows_discriminative" in tiny.flags
    assert math.isnan(tiny.discriminative[0])
