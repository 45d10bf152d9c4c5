"""Waveform and spectrogram plumbing.

Spectrogram grids are ``(bins, frames)`` numpy arrays. Masks live on the
log-frequency ("warped") grid and are mapped back to linear bins by nearest
warped bin before they multiply the mixture STFT.
"""
from __future__ import annotations

import functools
import math
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class SpectrogramConfig:
    sample_rate_hz: int = 8000
    window_len: int = 510
    hop_len: int = 128
    fft_size: int = 510
    clip_samples: int = 8192
    warp_bins: int = 64
    frames: int = 64

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if self.hop_len <= 0 or self.hop_len > self.window_len // 2:
            raise ValueError("hop_len must satisfy 0 < hop_len <= window_len / 2")
        if self.fft_size < self.window_len:
            raise ValueError("fft_size must be >= window_len")
        if not (_is_pow2(self.warp_bins) and _is_pow2(self.frames)):
            raise ValueError("warp_bins and frames must be powers of two")
        if self.clip_samples % self.hop_len:
            raise ValueError("clip_samples must be a multiple of hop_len")
        if self.frames > self.centered_frames:
            raise ValueError(
                f"frames={self.frames} exceeds the {self.centered_frames} centered frames of a clip"
            )
        if self.warp_bins > self.linear_bins:
            raise ValueError("warp_bins must not exceed linear_bins")

    @property
    def linear_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def centered_frames(self) -> int:
        return 1 + self.clip_samples // self.hop_len

    @classmethod
    def desk(cls) -> "SpectrogramConfig":
        return cls()

    @classmethod
    def reference(cls) -> "SpectrogramConfig":
        # 255 hops plus centred framing gives exactly 256 frames.
        return cls(
            sample_rate_hz=11025,
            window_len=1022,
            hop_len=256,
            fft_size=1022,
            clip_samples=65280,
            warp_bins=256,
            frames=256,
        )


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioClip samples must be one-dimensional")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass
class SeparationMask:
    values: np.ndarray
    kind: str = "predicted"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.kind not in ("predicted", "ground_truth"):
            raise ValueError(f"unknown mask kind {self.kind!r}")


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window."""
    k = np.arange(n)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)


def _check_samples(samples, cfg: SpectrogramConfig) -> np.ndarray:
    x = np.asarray(samples.samples if isinstance(samples, AudioClip) else samples, dtype=np.float64)
    if x.shape != (cfg.clip_samples,):
        raise ValueError(f"expected {cfg.clip_samples} samples, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("clip contains non-finite samples")
    return x


def _check_grid(grid: np.ndarray, shape: tuple[int, int], what: str) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.shape != shape:
        raise ValueError(f"{what}: expected shape {shape}, got {grid.shape}")
    return grid


def _padded_window(cfg: SpectrogramConfig) -> np.ndarray:
    w = np.zeros(cfg.fft_size)
    off = (cfg.fft_size - cfg.window_len) // 2
    w[off : off + cfg.window_len] = hann_window(cfg.window_len)
    return w


def stft(clip, cfg: SpectrogramConfig) -> np.ndarray:
    """Centre-padded STFT, shape ``(linear_bins, cfg.frames)``.

    Frame ``m`` is centred on sample ``m * hop_len``; the clip is zero padded
    by ``fft_size // 2`` on both sides and trailing frames beyond
    ``cfg.frames`` are dropped.
    """
    x = _check_samples(clip, cfg)
    pad = cfg.fft_size // 2
    xp = np.pad(x, pad)
    idx = np.arange(cfg.frames)[:, None] * cfg.hop_len + np.arange(cfg.fft_size)[None, :]
    frames = xp[idx] * _padded_window(cfg)[None, :]
    return np.fft.rfft(frames, axis=1).T


def istft(spec: np.ndarray, cfg: SpectrogramConfig) -> AudioClip:
    """Weighted overlap-add inverse of :func:`stft`.

    Samples with no window support (the tail dropped by frame cropping)
    come back as zeros.
    """
    spec = _check_grid(spec, (cfg.linear_bins, cfg.frames), "istft")
    frames = np.fft.irfft(spec.T, n=cfg.fft_size, axis=1)
    w = _padded_window(cfg)
    pad = cfg.fft_size // 2
    total = cfg.clip_samples + 2 * pad
    out = np.zeros(total)
    norm = np.zeros(total)
    w2 = w * w
    for m in range(cfg.frames):
        s = m * cfg.hop_len
        out[s : s + cfg.fft_size] += frames[m] * w
        norm[s : s + cfg.fft_size] += w2
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    out[~nz] = 0.0
    return AudioClip(out[pad : pad + cfg.clip_samples], cfg.sample_rate_hz)


def warp_positions(cfg: SpectrogramConfig) -> np.ndarray:
    """Fractional linear-bin position of each warped bin centre (geometric from bin 1 to Nyquist)."""
    nyq = cfg.linear_bins - 1
    return nyq ** (np.arange(cfg.warp_bins) / (cfg.warp_bins - 1))


@functools.lru_cache(maxsize=16)
def warp_matrix(cfg: SpectrogramConfig) -> np.ndarray:
    """``(warp_bins, linear_bins)`` interpolation matrix; rows are nonnegative and sum to 1."""
    pos = warp_positions(cfg)
    mat = np.zeros((cfg.warp_bins, cfg.linear_bins))
    last = cfg.linear_bins - 1
    for j, c in enumerate(pos):
        lo = min(int(math.floor(c)), last)
        frac = c - lo
        if lo >= last or frac < 1e-12:
            mat[j, lo] = 1.0
        else:
            mat[j, lo] = 1.0 - frac
            mat[j, lo + 1] = frac
    # DC has no log position; share the first warped bin with bin 1.
    mat[0, :] = 0.0
    mat[0, 0] = 0.5
    mat[0, 1] = 0.5
    mat.setflags(write=False)
    return mat


@functools.lru_cache(maxsize=16)
def unwarp_index(cfg: SpectrogramConfig) -> np.ndarray:
    """Nearest warped bin (in log frequency) for every linear bin; DC maps to warped bin 0."""
    nyq = cfg.linear_bins - 1
    idx = np.zeros(cfg.linear_bins, dtype=np.int64)
    i = np.arange(1, cfg.linear_bins)
    idx[1:] = np.clip(np.rint(np.log(i) / np.log(nyq) * (cfg.warp_bins - 1)), 0, cfg.warp_bins - 1)
    idx.setflags(write=False)
    return idx


def warp_log_frequency(spec_mag: np.ndarray, cfg: SpectrogramConfig) -> np.ndarray:
    spec_mag = _check_grid(spec_mag, (cfg.linear_bins, cfg.frames), "warp_log_frequency")
    return warp_matrix(cfg) @ spec_mag


def unwarp_mask(mask, cfg: SpectrogramConfig) -> np.ndarray:
    values = mask.values if isinstance(mask, SeparationMask) else np.asarray(mask)
    values = _check_grid(values, (cfg.warp_bins, cfg.frames), "unwarp_mask")
    return values[unwarp_index(cfg), :]


def magnitude_spectrogram(clip, cfg: SpectrogramConfig) -> np.ndarray:
    """Warped magnitude of a waveform."""
    return warp_log_frequency(np.abs(stft(clip, cfg)), cfg)


def mix_waveforms(clips: list) -> AudioClip:
    if len(clips) < 2:
        raise ValueError("need at least two clips to mix")
    rates = {c.sample_rate_hz for c in clips}
    lengths = {len(c) for c in clips}
    if len(rates) != 1 or len(lengths) != 1:
        raise ValueError("clips must share length and sample rate")
    stacked = np.stack([c.samples for c in clips])
    return AudioClip(stacked.mean(axis=0), clips[0].sample_rate_hz)


def ground_truth_mask(source_mag: np.ndarray, mix_mag: np.ndarray) -> SeparationMask:
    """Binary mask: 1 where the source magnitude is at least the mixture magnitude."""
    source_mag = np.asarray(source_mag)
    mix_mag = np.asarray(mix_mag)
    if source_mag.shape != mix_mag.shape:
        raise ValueError(f"shape mismatch {source_mag.shape} vs {mix_mag.shape}")
    return SeparationMask((source_mag >= mix_mag).astype(np.float64), kind="ground_truth")


def apply_mask_and_reconstruct(mix_complex: np.ndarray, mask, cfg: SpectrogramConfig) -> AudioClip:
    """Scale the mixture STFT by the unwarped mask (mixture phase kept) and invert."""
    mix_complex = _check_grid(mix_complex, (cfg.linear_bins, cfg.frames), "mixture spectrogram")
    return istft(mix_complex * unwarp_mask(mask, cfg), cfg)


def _resample_linear(x: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    if src_rate == dst_rate:
        return x
    n_out = int(round(len(x) * dst_rate / src_rate))
    t_out = np.arange(n_out) * (src_rate / dst_rate)
    return np.interp(t_out, np.arange(len(x)), x)


def load_wav(path, sample_rate_hz: int | None = None) -> AudioClip:
    """Read a 16-bit PCM mono WAV, optionally resampling to ``sample_rate_hz``."""
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError, OSError) as exc:
        raise ValueError(f"cannot read WAV file {path}: {exc}") from exc
    if channels != 1:
        raise ValueError(f"{path}: expected mono audio, found {channels} channels")
    if width != 2:
        raise ValueError(f"{path}: expected 16-bit PCM, found {8 * width}-bit")
    x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    x = np.clip(x, -1.0, 1.0)
    if sample_rate_hz is not None:
        x = _resample_linear(x, rate, sample_rate_hz)
        rate = sample_rate_hz
    return AudioClip(x, rate)


def save_wav(clip: AudioClip, path) -> Path:
    path = Path(path)
    pcm = np.rint(np.clip(clip.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(clip.sample_rate_hz))
        fh.writeframes(pcm.tobytes())
    return path


def fit_length(clip: AudioClip, n: int) -> AudioClip:
    """Crop or zero-pad to exactly ``n`` samples."""
    x = clip.samples[:n]
    if len(x) < n:
        x = np.pad(x, (0, n - len(x)))
    return AudioClip(x, clip.sample_rate_hz)
