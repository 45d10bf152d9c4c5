import math
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avpc.data import DataConfig, synth_clip
from avpc.dsp import (
    AudioClip,
    SeparationMask,
    SpectrogramConfig,
    apply_mask_and_reconstruct,
    ground_truth_mask,
    hann_window,
    istft,
    load_wav,
    magnitude_spectrogram,
    mix_waveforms,
    save_wav,
    stft,
    unwarp_mask,
    warp_log_frequency,
    warp_matrix,
)
from avpc.evaluation import bss_metrics

DESK = SpectrogramConfig.desk()


def interior(cfg):
    return slice(cfg.hop_len, cfg.clip_samples - cfg.hop_len)


def rel_l2(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_desk_config_shapes():
    assert DESK.linear_bins == 256
    assert stft(np.zeros(DESK.clip_samples), DESK).shape == (256, 64)


def test_zero_clip_gives_zero_spectrogram():
    assert not np.any(stft(np.zeros(DESK.clip_samples), DESK))


def test_reference_config_shape():
    ref = SpectrogramConfig.reference()
    spec = stft(np.zeros(ref.clip_samples), ref)
    assert spec.shape == (512, 256)
    assert warp_log_frequency(np.abs(spec), ref).shape == (256, 256)


def test_bin_centre_sine_matches_direct_dft():
    k = 40
    n = np.arange(DESK.clip_samples)
    x = np.sin(2 * np.pi * k * n / DESK.fft_size + 0.3)
    spec = stft(x, DESK)

    # direct summation for an interior frame centred on sample m * hop
    m = 20
    w = hann_window(DESK.window_len)
    start = m * DESK.hop_len - DESK.fft_size // 2
    seg = x[start : start + DESK.fft_size] * w
    nn = np.arange(DESK.fft_size)
    for kk in (k - 2, k - 1, k, k + 1, k + 2):
        direct = np.sum(seg * np.exp(-2j * np.pi * kk * nn / DESK.fft_size))
        assert abs(direct - spec[kk, m]) < 1e-9 * DESK.fft_size

    energy = np.abs(spec) ** 2
    # main lobe of the Hann window spans k +- 1
    assert energy[k - 1 : k + 2].sum() / energy.sum() >= 0.99
    inner = energy[:, 2:-2]
    assert np.allclose(inner[k] / inner.sum(axis=0), 2.0 / 3.0, atol=1e-9)


def test_stft_rejects_bad_input():
    with pytest.raises(ValueError):
        stft(np.zeros(100), DESK)
    x = np.zeros(DESK.clip_samples)
    x[5] = np.nan
    with pytest.raises(ValueError):
        stft(x, DESK)


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        SpectrogramConfig(window_len=254, fft_size=254)  # hop 128 > 254 / 2
    with pytest.raises(ValueError):
        SpectrogramConfig(warp_bins=48)


def test_istft_zero():
    clip = istft(np.zeros((DESK.linear_bins, DESK.frames), complex), DESK)
    assert not np.any(clip.samples)


def test_istft_shape_mismatch():
    with pytest.raises(ValueError):
        istft(np.zeros((10, 10), complex), DESK)


def test_round_trip_white_noise():
    rng = np.random.default_rng(0)
    sl = interior(DESK)
    for _ in range(20):
        x = rng.uniform(-1, 1, DESK.clip_samples)
        y = istft(stft(x, DESK), DESK).samples
        assert rel_l2(y[sl], x[sl]) < 1e-10


def test_round_trip_reference_config():
    ref = SpectrogramConfig.reference()
    x = np.random.default_rng(1).uniform(-1, 1, ref.clip_samples)
    y = istft(stft(x, ref), ref).samples
    sl = interior(ref)
    assert rel_l2(y[sl], x[sl]) < 1e-10


def test_round_trip_synthetic_instrument():
    audio, _ = synth_clip(4, 7, DataConfig())
    y = istft(stft(audio, DESK), DESK).samples
    sl = interior(DESK)
    assert rel_l2(y[sl], audio.samples[sl]) < 1e-10


# -- warp ---------------------------------------------------------------------


def independent_warp_table(cfg):
    """Hat-function weights from the geometric centres, built without the module's loop."""
    nyq = cfg.linear_bins - 1
    j = np.arange(cfg.warp_bins)[:, None]
    centres = np.exp(j / (cfg.warp_bins - 1) * math.log(nyq))
    i = np.arange(cfg.linear_bins)[None, :]
    table = np.maximum(0.0, 1.0 - np.abs(centres - i))
    table[0] = 0.0
    table[0, :2] = 0.5
    return table


def test_warp_matches_independent_table():
    assert np.allclose(warp_matrix(DESK), independent_warp_table(DESK), atol=1e-12)
    ref = SpectrogramConfig.reference()
    assert np.allclose(warp_matrix(ref), independent_warp_table(ref), atol=1e-12)


def test_warp_rows_are_convex_weights():
    w = warp_matrix(DESK)
    assert np.all(w >= 0)
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_warp_constant_grid():
    grid = np.full((DESK.linear_bins, DESK.frames), 2.5)
    assert np.allclose(warp_log_frequency(grid, DESK), 2.5)


def test_single_linear_bin_spreads_to_adjacent_warped_bins():
    table = independent_warp_table(DESK)
    for i in (60, 120, 200, 255):
        grid = np.zeros((DESK.linear_bins, DESK.frames))
        grid[i] = 1.0
        out = warp_log_frequency(grid, DESK)[:, 0]
        nz = np.flatnonzero(out)
        assert np.allclose(out, table[:, i])
        # high-frequency region: warped spacing exceeds one linear bin, so a
        # linear bin feeds at most two adjacent warped bins (possibly none)
        assert len(nz) <= 2
        assert np.all(np.diff(nz) == 1)


def test_warp_shape_mismatch():
    with pytest.raises(ValueError):
        warp_log_frequency(np.zeros((5, 5)), DESK)


def brute_force_unwarp_index(cfg):
    nyq = cfg.linear_bins - 1
    logc = np.array([j / (cfg.warp_bins - 1) * math.log(nyq) for j in range(cfg.warp_bins)])
    idx = [0]
    for i in range(1, cfg.linear_bins):
        idx.append(int(np.argmin(np.abs(math.log(i) - logc))))
    return np.array(idx)


def test_unwarp_constant_masks():
    assert np.all(unwarp_mask(np.ones((64, 64)), DESK) == 1.0)
    assert np.all(unwarp_mask(SeparationMask(np.zeros((64, 64))), DESK) == 0.0)
    assert unwarp_mask(np.ones((64, 64)), DESK).shape == (DESK.linear_bins, DESK.frames)


@pytest.mark.parametrize("j", [0, 5, 30, 45, 63])
def test_unwarp_indicator_maps_to_contiguous_range(j):
    mask = np.zeros((64, 64))
    mask[j] = 1.0
    lin = unwarp_mask(mask, DESK)[:, 0]
    expected = brute_force_unwarp_index(DESK) == j
    assert np.array_equal(lin.astype(bool), expected)
    hits = np.flatnonzero(lin)
    if len(hits):
        assert np.all(np.diff(hits) == 1)


# -- mixing and masks -----------------------------------------------------------


def _clip(x):
    return AudioClip(x, DESK.sample_rate_hz)


def test_mix_identical_and_opposite():
    w = np.random.default_rng(0).uniform(-1, 1, 64)
    assert np.array_equal(mix_waveforms([_clip(w), _clip(w)]).samples, w)
    assert np.allclose(mix_waveforms([_clip(w), _clip(-w)]).samples, 0.0)


def test_mix_three_matches_loop():
    rng = np.random.default_rng(1)
    ws = [rng.uniform(-1, 1, 32) for _ in range(3)]
    out = mix_waveforms([_clip(w) for w in ws]).samples
    for i in range(32):
        acc = 0.0
        for w in ws:
            acc += w[i]
        assert out[i] == pytest.approx(acc / 3, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3))
def test_mix_permutation_invariant_and_linear(seed, scale):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.uniform(-1, 1, 16) for _ in range(3))
    base = mix_waveforms([_clip(a), _clip(b), _clip(c)]).samples
    assert np.allclose(mix_waveforms([_clip(c), _clip(a), _clip(b)]).samples, base, atol=1e-15)
    scaled = mix_waveforms([_clip(scale * a), _clip(b), _clip(c)]).samples
    assert np.allclose(scaled - base, (scale - 1) * a / 3, atol=1e-12)


def test_mix_errors():
    with pytest.raises(ValueError):
        mix_waveforms([_clip(np.zeros(4))])
    with pytest.raises(ValueError):
        mix_waveforms([_clip(np.zeros(4)), _clip(np.zeros(5))])
    with pytest.raises(ValueError):
        mix_waveforms([AudioClip(np.zeros(4), 8000), AudioClip(np.zeros(4), 16000)])


def test_ground_truth_mask_example():
    s_n = np.array([[0.6, 0.1], [0.3, 0.3]])
    s_mix = np.array([[0.5, 0.2], [0.3, 0.4]])
    m = ground_truth_mask(s_n, s_mix)
    assert m.kind == "ground_truth"
    assert np.array_equal(m.values, [[1, 0], [1, 0]])
    assert np.all(ground_truth_mask(s_mix, s_mix).values == 1)


def test_ground_truth_mask_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a, b = rng.random((2, 16, 16))
        ties = rng.random((16, 16)) < 0.1
        b[ties] = a[ties]
        m = ground_truth_mask(a, b).values
        for u in range(16):
            for v in range(16):
                assert m[u, v] == (1.0 if a[u, v] >= b[u, v] else 0.0)


def test_ground_truth_mask_shape_mismatch():
    with pytest.raises(ValueError):
        ground_truth_mask(np.zeros((2, 2)), np.zeros((3, 2)))


def test_all_ones_mask_is_bitwise_round_trip():
    x = np.random.default_rng(5).uniform(-1, 1, DESK.clip_samples)
    spec = stft(x, DESK)
    a = apply_mask_and_reconstruct(spec, np.ones((64, 64)), DESK).samples
    b = istft(spec, DESK).samples
    assert np.array_equal(a, b)


def test_all_zeros_mask_gives_silence():
    x = np.random.default_rng(6).uniform(-1, 1, DESK.clip_samples)
    out = apply_mask_and_reconstruct(stft(x, DESK), np.zeros((64, 64)), DESK).samples
    assert not np.any(out)


def test_disjoint_tones_oracle_mask_separates():
    n = np.arange(DESK.clip_samples)
    taper = np.ones(DESK.clip_samples)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(512) / 512)
    taper[:512], taper[-512:] = ramp, ramp[::-1]
    # bin-centred tones (linear bins 16 and 128) with smooth onsets
    lo = 0.8 * np.sin(2 * np.pi * 16 * n / DESK.fft_size) * taper
    hi = 0.8 * np.sin(2 * np.pi * 128 * n / DESK.fft_size + 1.0) * taper
    m_lo, m_hi = magnitude_spectrogram(lo, DESK), magnitude_spectrogram(hi, DESK)
    assert not np.any((m_lo > 1e-4 * m_lo.max()) & (m_hi > 1e-4 * m_hi.max()))
    mix = mix_waveforms([_clip(lo), _clip(hi)])
    mix_spec = stft(mix, DESK)
    mix_mag = warp_log_frequency(np.abs(mix_spec), DESK)
    for k, (src, mag) in enumerate([(lo, m_lo), (hi, m_hi)]):
        est = apply_mask_and_reconstruct(mix_spec, ground_truth_mask(mag, mix_mag), DESK)
        sdr, _, _ = bss_metrics(est, [lo, hi], k)
        assert sdr >= 20.0


# -- WAV I/O -------------------------------------------------------------------


def test_wav_round_trip_quantisation(tmp_path):
    x = np.random.default_rng(7).uniform(-1, 1, 4000)
    save_wav(AudioClip(x, 8000), tmp_path / "a.wav")
    y = load_wav(tmp_path / "a.wav")
    assert y.sample_rate_hz == 8000
    assert np.max(np.abs(y.samples - x)) <= 2**-15 + 1e-12


def test_wav_save_clamps(tmp_path):
    save_wav(AudioClip(np.array([2.0, -3.0, 0.5]), 8000), tmp_path / "c.wav")
    y = load_wav(tmp_path / "c.wav").samples
    assert y[0] == 1.0 and y[1] == -1.0


def test_wav_rejects_stereo(tmp_path):
    path = tmp_path / "stereo.wav"
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(2)
        fh.setsampwidth(2)
        fh.setframerate(8000)
        fh.writeframes(np.zeros(20, "<i2").tobytes())
    with pytest.raises(ValueError):
        load_wav(path)


def test_wav_rejects_garbage(tmp_path):
    path = tmp_path / "junk.wav"
    path.write_bytes(b"not a wav file")
    with pytest.raises(ValueError):
        load_wav(path)


def test_wav_resample_length(tmp_path):
    n = 44100
    save_wav(AudioClip(0.5 * np.sin(np.arange(n) * 0.01), 44100), tmp_path / "hi.wav")
    y = load_wav(tmp_path / "hi.wav", sample_rate_hz=11025)
    assert y.sample_rate_hz == 11025
    assert abs(len(y) - n / 4) <= 1
