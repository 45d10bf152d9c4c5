"""Deterministic synthetic audio-visual "instrument" dataset.

Each class is a five-harmonic tone with a class-specific fundamental and
spectral tilt, amplitude modulated at a per-clip rate. The paired frames show
a glyph in the class hue at jittered positions. ``(class_id, seed)`` fixes a
clip bit-for-bit.
"""
from __future__ import annotations

import colorsys
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dsp import AudioClip, SpectrogramConfig, magnitude_spectrogram, stft

N_HARMONICS = 5
GLYPHS = ("square", "disk", "cross", "ring")


@dataclass(frozen=True)
class DataConfig:
    n_classes: int = 8
    per_class: int = 10
    n_frames: int = 3
    frame_size: int = 64
    spectrogram: SpectrogramConfig = field(default_factory=SpectrogramConfig)

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.per_class < 4:
            raise ValueError("per_class must be >= 4 (val, test and at least two train clips)")
        if self.n_frames < 1 or self.frame_size < 16:
            raise ValueError("invalid frame settings")
        nyquist = self.spectrogram.sample_rate_hz / 2
        for c in range(self.n_classes):
            if N_HARMONICS * fundamental_hz(c) >= nyquist:
                raise ValueError(
                    f"class {c}: top harmonic {N_HARMONICS * fundamental_hz(c):.1f} Hz "
                    f"is above Nyquist {nyquist:.1f} Hz"
                )


def fundamental_hz(class_id: int) -> float:
    return 110.0 * 2.0 ** (class_id / 3.0)


def decay_exponent(class_id: int) -> float:
    return 0.5 + 0.25 * class_id


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    class_id: int
    seed: int
    split: str
    f0_hz: float
    decay: float
    am_rate_hz: float
    am_depth: float
    hue: float
    glyph: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ClipRecord":
        return cls(**d)


def _rng(class_id: int, seed: int) -> np.random.Generator:
    return np.random.default_rng([int(class_id), int(seed), 0xA5C])


def clip_record(class_id: int, seed: int, split: str, cfg: DataConfig) -> ClipRecord:
    rng = _rng(class_id, seed)
    return ClipRecord(
        clip_id=f"c{class_id}_s{seed}",
        class_id=int(class_id),
        seed=int(seed),
        split=split,
        f0_hz=fundamental_hz(class_id),
        decay=decay_exponent(class_id),
        am_rate_hz=float(rng.uniform(2.0, 6.0)),
        am_depth=float(rng.uniform(0.2, 0.6)),
        hue=class_id / cfg.n_classes,
        glyph=GLYPHS[class_id % len(GLYPHS)],
    )


def _glyph_mask(kind: str, size: int, cy: int, cx: int, radius: int) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    if kind == "disk":
        return dy**2 + dx**2 <= radius**2
    if kind == "cross":
        arm = max(1, radius // 3)
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= radius)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= radius))
    r2 = dy**2 + dx**2
    return (r2 <= radius**2) & (r2 >= (radius // 2) ** 2)


def synth_clip(class_id: int, seed: int, cfg: DataConfig) -> tuple[AudioClip, np.ndarray]:
    """Return ``(audio, frames)``; frames have shape ``(F, H, W, 3)`` in [0, 1]."""
    if not 0 <= class_id < cfg.n_classes:
        raise ValueError(f"class_id {class_id} outside [0, {cfg.n_classes})")
    rec = clip_record(class_id, seed, "", cfg)
    rng = _rng(class_id, seed)
    rng.uniform(size=2)  # consumed by clip_record
    sc = cfg.spectrogram
    t = np.arange(sc.clip_samples) / sc.sample_rate_hz
    phases = rng.uniform(0.0, 2.0 * np.pi, size=N_HARMONICS)
    x = np.zeros_like(t)
    for h in range(1, N_HARMONICS + 1):
        x += h ** (-rec.decay) * np.sin(2.0 * np.pi * h * rec.f0_hz * t + phases[h - 1])
    am_phase = rng.uniform(0.0, 2.0 * np.pi)
    x *= 1.0 + rec.am_depth * np.sin(2.0 * np.pi * rec.am_rate_hz * t + am_phase)
    x *= 0.9 / np.max(np.abs(x))

    size = cfg.frame_size
    rgb = np.array(colorsys.hsv_to_rgb(rec.hue, 0.9, 0.95))
    radius = size // 8
    frames = np.zeros((cfg.n_frames, size, size, 3))
    for f in range(cfg.n_frames):
        cy, cx = rng.integers(radius + 1, size - radius - 1, size=2)
        m = _glyph_mask(rec.glyph, size, int(cy), int(cx), radius)
        frames[f] = 0.05 * rng.random((size, size, 1))
        frames[f][m] = rgb
    return AudioClip(x, sc.sample_rate_hz), frames


def build_dataset(cfg: DataConfig) -> list[ClipRecord]:
    """Seeds 0 and 1 of every class go to val and test; the rest train."""
    cfg.validate()
    records = []
    for c in range(cfg.n_classes):
        for s in range(cfg.per_class):
            split = "val" if s == 0 else "test" if s == 1 else "train"
            records.append(clip_record(c, s, split, cfg))
    return records


def write_manifest(records: list[ClipRecord], path) -> Path:
    path = Path(path)
    path.write_text("".join(r.to_json() + "\n" for r in records))
    return path


def read_manifest(path) -> list[ClipRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(ClipRecord.from_dict(json.loads(line)))
    return out


def split_records(records: list[ClipRecord], split: str) -> list[ClipRecord]:
    return [r for r in records if r.split == split]


def sample_mixture(records: list[ClipRecord], n: int, rng: np.random.Generator) -> list[ClipRecord]:
    """``n`` records with pairwise distinct classes, classes drawn uniformly without replacement."""
    by_class: dict[int, list[ClipRecord]] = {}
    for r in records:
        by_class.setdefault(r.class_id, []).append(r)
    classes = sorted(by_class)
    if n > len(classes):
        raise ValueError(f"cannot draw {n} distinct classes from {len(classes)}")
    chosen = rng.choice(len(classes), size=n, replace=False)
    out = []
    for ci in chosen:
        pool = by_class[classes[ci]]
        out.append(pool[int(rng.integers(len(pool)))])
    return out


def num_workers() -> int:
    try:
        cap = int(os.environ.get("AVPC_NUM_WORKERS", "0"))
    except ValueError:
        cap = 0
    n = os.cpu_count() or 1
    return max(1, min(n, cap) if cap > 0 else n)


class ClipBank:
    """Synthesised waveforms, frames and warped magnitudes for a list of records."""

    def __init__(self, records: list[ClipRecord], cfg: DataConfig):
        if not records:
            raise ValueError("empty record list")
        self.records = list(records)
        self.cfg = cfg
        with ThreadPoolExecutor(max_workers=num_workers()) as pool:
            clips = list(pool.map(lambda r: synth_clip(r.class_id, r.seed, cfg), self.records))
        sc = cfg.spectrogram
        self.waveforms = np.stack([a.samples for a, _ in clips])
        self.frames = np.stack([f for _, f in clips]).astype(np.float32)
        self.classes = np.array([r.class_id for r in self.records])
        self.magnitudes = np.stack([magnitude_spectrogram(w, sc) for w in self.waveforms])
        self.index = {r.clip_id: i for i, r in enumerate(self.records)}

    def __len__(self) -> int:
        return len(self.records)

    def sample_indices(self, n: int, rng: np.random.Generator) -> list[int]:
        return [self.index[r.clip_id] for r in sample_mixture(self.records, n, rng)]


def class_support(cfg: DataConfig, class_id: int, seed: int = 0, rel_db: float = -20.0) -> np.ndarray:
    """Boolean active-bin set of a class on the warped axis (time-averaged, within ``rel_db`` of the peak)."""
    audio, _ = synth_clip(class_id, seed, cfg)
    profile = magnitude_spectrogram(audio, cfg.spectrogram).mean(axis=1)
    return profile >= profile.max() * 10 ** (rel_db / 20)


def check_class_separability(cfg: DataConfig, max_overlap: float = 0.5) -> float:
    """Largest pairwise overlap |A & B| / |A | B| of class supports; raises if it reaches ``max_overlap``."""
    supports = [class_support(cfg, c) for c in range(cfg.n_classes)]
    worst = 0.0
    for i in range(cfg.n_classes):
        for j in range(i + 1, cfg.n_classes):
            inter = np.sum(supports[i] & supports[j])
            union = np.sum(supports[i] | supports[j])
            worst = max(worst, inter / union)
    if worst >= max_overlap:
        raise ValueError(f"class supports overlap by {worst:.2f} (limit {max_overlap})")
    return float(worst)


def complex_spectrogram(waveform: np.ndarray, cfg: SpectrogramConfig) -> np.ndarray:
    return stft(waveform, cfg)
