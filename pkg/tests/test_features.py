import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import direct_dft_power, one_sided_energy
from soundscreen.audio_io import AudioClip
from soundscreen.errors import DegenerateBand, ShapeMismatch, TooShort
from soundscreen.features import (
    SpectrogramConfig,
    WindowPolicy,
    decode_lmel,
    encode_lmel,
    filter_centers_hz,
    hz_to_mel,
    log_mel,
    log_mel_spectrogram,
    mel_filterbank,
    mel_to_hz,
    stft_power,
    window_offsets,
    windows,
)

SR = 16000


def _one_frame_config(n=512):
    # window == n_fft so one frame is exactly the DFT length
    return SpectrogramConfig(window_ms=n * 1000 / SR, hop_ms=n * 1000 / SR, n_fft=n)


def test_mel_formula():
    assert hz_to_mel(0.0) == 0.0
    assert hz_to_mel(700.0) == pytest.approx(2595 * np.log10(2), abs=1e-9)
    assert hz_to_mel(700.0) == pytest.approx(781.17, abs=0.01)
    f = np.linspace(0, 8000, 50)
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)


def test_frame_count():
    clip = AudioClip(np.zeros(SR), SR)
    assert stft_power(clip).shape == (98, 257)
    assert np.all(stft_power(clip) == 0.0)


def test_too_short():
    with pytest.raises(TooShort):
        stft_power(AudioClip(np.zeros(100), SR))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([64, 256, 512]))
def test_parseval_single_rect_frame(seed, n):
    x = np.random.default_rng(seed).uniform(-1, 1, n)
    power = stft_power(AudioClip(x, SR), _one_frame_config(n), window="rect")[0]
    # power is |X|^2 / N, so doubling interior bins gives sum(x^2)
    energy = one_sided_energy(power, n)
    assert abs(energy - np.sum(x**2)) / np.sum(x**2) < 1e-6
    np.testing.assert_allclose(power, direct_dft_power(x) / n, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("k", [5, 16, 40, 100, 200])
def test_bin_centered_sine_concentrates_energy(k):
    n = 512
    x = np.sin(2 * np.pi * k * np.arange(n) / n)
    power = stft_power(AudioClip(x, SR), _one_frame_config(n), window="rect")[0]
    assert power[k - 1 : k + 2].sum() >= 0.9 * power.sum()


def test_filterbank_shape_and_coverage():
    fb = mel_filterbank(SR, 512, 64, 0.0, 8000.0)
    assert fb.shape == (64, 257)
    assert np.all(fb >= 0)
    assert np.all(fb.sum(axis=1) > 0)
    centers = filter_centers_hz(SR, 64, 0.0, 8000.0)
    bins = np.arange(257) * SR / 512
    inside = (bins >= centers[0]) & (bins <= centers[-1])
    assert np.all(fb[:, inside].sum(axis=0) > 0)
    np.testing.assert_allclose(np.diff(hz_to_mel(centers)), np.diff(hz_to_mel(centers))[0])


def test_filterbank_degenerate():
    with pytest.raises(DegenerateBand):
        mel_filterbank(SR, 64, 128, 0.0, 8000.0)


def test_log_mel_floor_and_shape_errors():
    fb = mel_filterbank(SR, 512, 64, 125.0, 7500.0)
    out = log_mel(np.zeros((3, 257)), fb, 1e-10)
    np.testing.assert_allclose(out.values, np.log(1e-10))
    with pytest.raises(ShapeMismatch):
        log_mel(np.zeros((3, 100)), fb)


def test_doubling_amplitude_adds_ln4():
    x = np.random.default_rng(1).uniform(-0.4, 0.4, SR)
    a = log_mel_spectrogram(AudioClip(x, SR)).values
    b = log_mel_spectrogram(AudioClip(2 * x, SR)).values
    above = a > np.log(1e-10) + 1
    np.testing.assert_allclose((b - a)[above], np.log(4.0), atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_log_mel_monotone_in_power(seed):
    rng = np.random.default_rng(seed)
    fb = mel_filterbank(SR, 512, 64, 125.0, 7500.0)
    p = rng.exponential(1e-3, (4, 257)) * (rng.random((4, 257)) < 0.5)
    q = p + rng.exponential(1e-3, p.shape) * (rng.random(p.shape) < 0.3)
    assert np.all(log_mel(q, fb).values >= log_mel(p, fb).values)


@pytest.mark.parametrize("index", [3, 12, 25, 40, 55])
def test_tone_argmax_is_nearest_center(index):
    cfg = SpectrogramConfig()
    centers = filter_centers_hz(SR, cfg.n_mels, cfg.fmin_hz, cfg.fmax_hz)
    tone_hz = centers[index] * 1.01
    x = 0.5 * np.sin(2 * np.pi * tone_hz * np.arange(SR) / SR)
    spec = log_mel_spectrogram(AudioClip(x, SR), cfg).values
    assert int(np.argmin(np.abs(centers - tone_hz))) == index
    assert int(np.argmax(spec.mean(axis=0))) == index


def test_log_mel_values_are_bounded_below():
    x = np.zeros(SR)
    x[5000] = 0.5
    spec = log_mel_spectrogram(AudioClip(x, SR))
    assert np.all(np.isfinite(spec.values))
    assert np.all(spec.values >= np.log(spec.config.log_floor))


def test_spectrogram_is_deterministic():
    x = np.random.default_rng(3).uniform(-0.5, 0.5, SR)
    a = log_mel_spectrogram(AudioClip(x, SR)).values
    b = log_mel_spectrogram(AudioClip(x.copy(), SR)).values
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize(
    "kw",
    [dict(hop_ms=30.0), dict(n_fft=500), dict(n_fft=256), dict(fmin_hz=9000.0), dict(fmax_hz=9000.0)],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SpectrogramConfig(**kw).validate(SR)


# ---------------------------------------------------------------- windows


def test_center_crop():
    v = np.arange(98 * 4, dtype=float).reshape(98, 4)
    (w,) = windows(v, 96, WindowPolicy.center_crop_or_pad)
    raw = v[1:97]
    np.testing.assert_allclose(w.values, (raw - raw.mean()) / raw.std())


def test_symmetric_edge_pad():
    rng = np.random.default_rng(0)
    v = rng.standard_normal((40, 4))
    (w,) = windows(v, 96, WindowPolicy.center_crop_or_pad)
    padded = np.concatenate([np.repeat(v[:1], 28, 0), v, np.repeat(v[-1:], 28, 0)])
    np.testing.assert_allclose(w.values, (padded - padded.mean()) / padded.std())


def test_tiled_offsets():
    assert window_offsets(192, 96, "tiled_50pct_overlap") == [0, 48, 96]
    assert window_offsets(98, 96, "tiled_50pct_overlap") == [0]
    assert window_offsets(98, 96, "center_crop_or_pad") == [1]
    assert len(windows(np.random.default_rng(0).standard_normal((192, 8)), 96, "tiled_50pct_overlap")) == 3


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 400), st.integers(1, 128), st.sampled_from(list(WindowPolicy)))
def test_window_count_is_a_pure_function_of_lengths(n_frames, t_frames, policy):
    offs = window_offsets(n_frames, t_frames, policy)
    assert offs == window_offsets(n_frames, t_frames, policy)
    assert len(offs) >= 1
    if policy is WindowPolicy.center_crop_or_pad:
        assert len(offs) == 1
    elif n_frames >= t_frames:
        assert len(offs) == 1 + (n_frames - t_frames) // max(1, t_frames // 2)
        assert all(0 <= o <= n_frames - t_frames for o in offs)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(10, 200), st.sampled_from(list(WindowPolicy)))
def test_windows_are_z_normalized(seed, n_frames, policy):
    v = np.random.default_rng(seed).normal(3.0, 5.0, (n_frames, 16))
    for w in windows(v, 32, policy):
        assert w.values.shape == (32, 16)
        assert abs(w.values.mean()) < 1e-6
        assert w.values.std() == pytest.approx(1.0, abs=1e-6)


def test_constant_window_maps_to_zeros():
    (w,) = windows(np.full((100, 8), -3.0), 96)
    assert np.all(w.values == 0.0)


# ---------------------------------------------------------------- LMEL files


def test_lmel_layout_and_round_trip():
    v = np.random.default_rng(0).standard_normal((7, 5)).astype(np.float32)
    data = encode_lmel(v, "cough")
    assert data[:4] == b"LMEL"
    assert data[4:6] == (1).to_bytes(2, "little")
    assert data[6:10] == (7).to_bytes(4, "little")
    assert data[10:14] == (5).to_bytes(4, "little")
    assert data[14] == 1
    assert len(data) == 15 + 7 * 5 * 4
    out, modality = decode_lmel(data)
    assert modality == "cough"
    assert out.astype(np.float32).tobytes() == v.tobytes()


def test_lmel_rejects_other_files():
    with pytest.raises(ValueError):
        decode_lmel(b"RIFF0000")
