import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import wft_loops
from spectrodiff.errors import ValidationError
from spectrodiff.tfimage import (NormStats, Spectrogram, WftConfig, coverage_mask, interior_mask,
                                 iwft, normalize, plan_frames, read_spectrogram,
                                 spectrograms_to_subject, subject_to_spectrograms, unnormalize, wft,
                                 write_spectrogram)

CFG = WftConfig(16, 8, "hann", 232)


def test_shape_default():
    spec = wft(np.zeros(232), CFG)
    assert spec.stack().shape == (2, 9, 28)


def test_matches_direct_summation():
    rng = np.random.default_rng(0)
    for cfg in (CFG, WftConfig(10, 3, "hann", 47), WftConfig(8, 8, "rect", 40)):
        x = rng.standard_normal(cfg.T)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            spec = wft(x, cfg)
        ref = np.array(wft_loops(x.tolist(), cfg.N, cfg.h, cfg.window_kind))
        assert np.allclose(spec.re, ref.real, atol=1e-12)
        assert np.allclose(spec.im, ref.imag, atol=1e-12)


def test_on_bin_cosine():
    cfg = WftConfig(16, 16, "rect", 16)
    x = np.cos(2 * np.pi * 4 * np.arange(16) / 16)
    spec = wft(x, cfg)
    expected = np.zeros((9, 1))
    expected[4, 0] = 8.0
    assert np.allclose(spec.re, expected, atol=1e-9)
    assert np.allclose(spec.im, 0.0, atol=1e-9)
    assert np.allclose(iwft(spec), x, atol=1e-9)


def test_analytic_cosine_spectrum_inverts():
    cfg = WftConfig(16, 16, "rect", 16)
    re = np.zeros((9, 1))
    re[4, 0] = 8.0
    x = iwft(Spectrogram(re, np.zeros((9, 1)), cfg))
    assert np.allclose(x, np.cos(2 * np.pi * 4 * np.arange(16) / 16), atol=1e-9)


def test_constant_series_dc_only():
    cfg = WftConfig(8, 8, "rect", 32)
    spec = wft(np.full(32, 2.5), cfg)
    assert np.allclose(spec.re[0], 2.5 * 8, atol=1e-12)
    assert np.allclose(spec.re[1:], 0.0, atol=1e-12)
    assert np.allclose(spec.im, 0.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([(16, 8), (8, 4), (32, 16), (16, 4), (12, 6)]),
       st.integers(40, 300))
def test_perfect_reconstruction(seed, nh, T):
    N, h = nh
    cfg = WftConfig(N, h, "hann", T)
    x = np.random.default_rng(seed).standard_normal(T)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        y = iwft(wft(x, cfg))
    mask = interior_mask(cfg)
    assert np.all(np.abs(y[mask] - x[mask]) < 1e-6)
    cov = coverage_mask(cfg)
    assert np.max(np.abs(y[cov] - x[cov])) < 1e-6
    assert np.all(y[~cov] == 0.0)


def test_uncovered_edge_behaviour():
    cov = coverage_mask(CFG)
    # periodic Hann has w[0] = 0, so the very first sample is never seen
    assert not cov[0] and cov[1:].all()
    with pytest.raises(ValidationError):
        iwft(wft(np.ones(232), CFG), strict=True)


def test_trailing_samples_dropped_with_warning():
    with pytest.warns(UserWarning):
        spec = wft(np.zeros(235), WftConfig(16, 8, "hann", 235))
    assert spec.re.shape == (9, 28)


def test_invalid_configs():
    for cfg in (WftConfig(16, 9, "hann", 232), WftConfig(15, 4, "hann", 232),
                WftConfig(16, 8, "hann", 10), WftConfig(16, 0, "rect", 232)):
        with pytest.raises(ValidationError):
            wft(np.zeros(cfg.T), cfg)
    with pytest.raises(ValidationError):
        wft(np.zeros(100), CFG)


def test_parseval_rect():
    N = 16
    cfg = WftConfig(N, N, "rect", 64)
    x = np.random.default_rng(1).standard_normal(64)
    spec = wft(x, cfg)
    X2 = spec.re ** 2 + spec.im ** 2
    full = X2[0] + X2[-1] + 2 * X2[1:-1].sum(axis=0)
    energy = (x.reshape(4, N) ** 2).sum(axis=1)
    assert np.allclose(full / N, energy, rtol=1e-9)


def test_linearity_and_hermitian_rows():
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal(232), rng.standard_normal(232)
    a, b = 1.7, -0.4
    s = wft(a * x + b * y, CFG)
    sx, sy = wft(x, CFG), wft(y, CFG)
    assert np.allclose(s.re, a * sx.re + b * sy.re, rtol=1e-9, atol=1e-12)
    assert np.allclose(s.im, a * sx.im + b * sy.im, rtol=1e-9, atol=1e-12)
    assert np.all(s.im[0] == 0.0) and np.all(s.im[-1] == 0.0)


def test_zero_spectrogram_inverts_to_zero():
    assert np.all(iwft(Spectrogram(np.zeros((9, 28)), np.zeros((9, 28)), CFG)) == 0.0)


def test_normalize_unnormalize():
    spec = wft(np.random.default_rng(3).standard_normal(232), CFG)
    n, stats = normalize(spec)
    assert abs(n.re.mean()) < 1e-9 and abs(n.re.std() - 1) < 1e-9
    assert abs(n.im.mean()) < 1e-9 and abs(n.im.std() - 1) < 1e-9
    back = unnormalize(n)
    assert np.allclose(back.re, spec.re, atol=1e-9) and np.allclose(back.im, spec.im, atol=1e-9)
    assert back.norm_stats is None and n.norm_stats == stats


def test_normalize_zero_channel():
    cfg = WftConfig(16, 16, "rect", 16)
    n, stats = normalize(Spectrogram(np.zeros((9, 1)), np.zeros((9, 1)), cfg))
    assert np.all(n.re == 0) and stats.mean_re == 0 and stats.std_re == 1e-8


def test_unnormalize_arithmetic():
    cfg = WftConfig(16, 16, "rect", 16)
    half = np.full((9, 1), 0.5)
    ident = unnormalize(Spectrogram(half, half, cfg), NormStats(0, 1, 0, 1))
    assert np.all(ident.re == 0.5)
    out = unnormalize(Spectrogram(half, half, cfg), NormStats(1, 2, 0, 1))
    assert np.all(out.re == 2.0) and np.all(out.im == 0.5)
    with pytest.raises(ValidationError):
        unnormalize(Spectrogram(half, half, cfg))


def test_iwft_refuses_normalized_input():
    n, _ = normalize(wft(np.ones(232), CFG))
    with pytest.raises(ValidationError):
        iwft(n)


def test_subject_roundtrip_and_permutation():
    x = np.random.default_rng(4).standard_normal((116, 232))
    specs = subject_to_spectrograms(x, CFG)
    assert len(specs) == 116 and [r for _, r in specs] == list(range(116))
    y = spectrograms_to_subject(specs)
    mask = coverage_mask(CFG)
    assert np.max(np.abs(y[:, mask] - x[:, mask])) < 1e-5
    shuffled = [specs[i] for i in np.random.default_rng(5).permutation(116)]
    assert np.array_equal(spectrograms_to_subject(shuffled), y)
    with pytest.raises(ValidationError):
        spectrograms_to_subject(specs[1:])


def test_single_roi_and_identical_rows():
    row = np.random.default_rng(6).standard_normal(232)
    [(spec, r)] = subject_to_spectrograms(row[None], CFG)
    ref, _ = normalize(wft(row, CFG))
    assert r == 0 and np.array_equal(spec.re, ref.re)
    assert np.array_equal(spectrograms_to_subject([(spec, 0)])[0], iwft(unnormalize(spec)))
    a, b = subject_to_spectrograms(np.stack([row, row]), CFG)
    assert np.array_equal(a[0].re, b[0].re) and np.array_equal(a[0].im, b[0].im)


def test_spc_roundtrip(tmp_path):
    spec = wft(np.random.default_rng(7).standard_normal(232), CFG)
    write_spectrogram(tmp_path / "a.spc", spec)
    raw = (tmp_path / "a.spc").read_bytes()
    assert raw[:4] == b"SPC1" and len(raw) == 4 + 8 + 16 + 8 * 9 * 28
    back = read_spectrogram(tmp_path / "a.spc", CFG)
    assert back.norm_stats is None
    assert np.array_equal(back.re, spec.re.astype(np.float32))
    n, stats = normalize(spec)
    write_spectrogram(tmp_path / "b.spc", n)
    got = read_spectrogram(tmp_path / "b.spc", CFG).norm_stats
    assert np.allclose(got.as_tuple(), stats.as_tuple(), rtol=1e-6)
    with pytest.raises(ValidationError):
        read_spectrogram(tmp_path / "a.spc", WftConfig(8, 4, "hann", 232))


@pytest.mark.parametrize("size", [8, 16, 32, 64])
def test_plan_frames_fits_image(size):
    plan = plan_frames(232, size)
    assert plan.config.K <= size and plan.cols <= size
    x = np.random.default_rng(size).standard_normal(232)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        spec, stats = normalize(wft(x, plan.config))
    img = plan.to_image(spec)
    assert img.shape == (2, size, size)
    y = plan.decode(img, stats)
    mask = plan.sample_mask()
    assert mask.sum() > 0
    assert np.max(np.abs(y[mask] - x[mask])) < 1e-6


def test_plan_16_uses_every_pixel():
    plan = plan_frames(232, 16)
    assert (plan.config.K, plan.config.M) == (16, 16) and plan.crop == 0


def test_plan_too_short():
    with pytest.raises(ValidationError, match="too short"):
        plan_frames(1, 8)
