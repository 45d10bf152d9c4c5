"""Separation metrics, mask image metrics, test-set evaluation and cycle sweeps."""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .data import ClipBank
from .dsp import AudioClip, apply_mask_and_reconstruct
from .model import AVPCModel
from .training import MixtureBatch, make_batch

DB_CAP = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
METRICS = ("sdr", "sir", "sar")


def _db(num: float, den: float) -> float:
    if den <= 0.0:
        return DB_CAP if num > 0.0 else -DB_CAP
    if num <= 0.0:
        return -DB_CAP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CAP, DB_CAP))


def _samples(x) -> np.ndarray:
    return np.asarray(x.samples if isinstance(x, AudioClip) else x, dtype=np.float64)


def bss_decompose(estimate, references, target: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(s_target, e_interf, e_artif)`` with single-tap projections."""
    est = _samples(estimate)
    refs = np.stack([_samples(r) for r in references])
    if refs.shape[1] != est.shape[0]:
        raise ValueError("estimate and references must have equal length")
    s = refs[target]
    energy = s @ s
    if energy <= 0.0:
        raise ValueError("target reference has zero energy")
    s_target = (est @ s) / energy * s
    coef, *_ = np.linalg.lstsq(refs.T, est, rcond=None)
    p_all = refs.T @ coef
    return s_target, p_all - s_target, est - p_all


def bss_metrics(estimate, references, target: int) -> tuple[float, float, float]:
    """SDR, SIR, SAR in dB, each capped to +-100."""
    s_t, e_i, e_a = bss_decompose(estimate, references, target)
    st = s_t @ s_t
    sdr = _db(st, (e_i + e_a) @ (e_i + e_a))
    sir = _db(st, e_i @ e_i)
    sar = _db((s_t + e_i) @ (s_t + e_i), e_a @ e_a)
    return sdr, sir, sar


def _mask_values(m) -> np.ndarray:
    return np.asarray(getattr(m, "values", m), dtype=np.float64)


def psnr(mask_pred, mask_gt) -> float:
    a, b = _mask_values(mask_pred), _mask_values(mask_gt)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return DB_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _ssim_terms(x, y, sigma=1.5, data_range=1.0):
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    g = lambda z: gaussian_filter(z, sigma, mode="reflect", truncate=3.5)
    mx, my = g(x), g(y)
    sxx = g(x * x) - mx * mx
    syy = g(y * y) - my * my
    sxy = g(x * y) - mx * my
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return float(lum.mean()), float(cs.mean())


def ms_ssim(mask_pred, mask_gt, weights=MS_SSIM_WEIGHTS, min_side: int = 8) -> float:
    """Multi-scale SSIM (Gaussian sigma 1.5, data range 1).

    Scales are dropped from the coarse end while the image is too small to
    halve below ``min_side``; the remaining weights are renormalised.
    Negative contrast-structure terms are clipped to zero.
    """
    a, b = _mask_values(mask_pred), _mask_values(mask_gt)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("ms_ssim needs two equal-shape 2-D grids")
    if not np.any(a) and not np.any(b):
        raise ValueError("ms_ssim is degenerate for an all-zero pair")
    levels = 1
    side = min(a.shape)
    while levels < len(weights) and side // 2 >= min_side:
        side //= 2
        levels += 1
    w = np.asarray(weights[:levels], dtype=np.float64)
    w = w / w.sum()
    score = 1.0
    for i in range(levels):
        lum, cs = _ssim_terms(a, b)
        if i == levels - 1:
            score *= max(lum * cs, 0.0) ** w[i]
        else:
            score *= max(cs, 0.0) ** w[i]
            a = _downsample(a)
            b = _downsample(b)
    return float(score)


def _downsample(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


@dataclass
class MetricsReport:
    items: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def column(self, key: str) -> np.ndarray:
        return np.array([it[key] for it in self.items], dtype=np.float64)

    def summary(self) -> dict:
        out = {"n_items": len(self.items)}
        for prefix in ("", "baseline_"):
            for m in METRICS:
                col = self.column(prefix + m)
                out[f"{prefix}{m}_median"] = float(np.median(col))
                out[f"{prefix}{m}_mean"] = float(np.mean(col))
                out[f"{prefix}{m}_capped"] = int(np.sum(np.abs(col) >= DB_CAP))
        for m in ("psnr", "ms_ssim"):
            if self.items and m in self.items[0]:
                col = self.column(m)
                out[f"{m}_median"] = float(np.median(col))
                out[f"{m}_mean"] = float(np.mean(col))
        return out

    def to_csv(self, path) -> Path:
        path = Path(path)
        keys = list(self.items[0]) if self.items else []
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for it in self.items:
                w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in it.items()})
        return path

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps({"metadata": self.metadata, "summary": self.summary()}, indent=2, sort_keys=True))
        return path

    @classmethod
    def from_csv(cls, path, metadata: dict | None = None) -> "MetricsReport":
        items = []
        with Path(path).open() as fh:
            for row in csv.DictReader(fh):
                items.append({k: _parse_cell(v) for k, v in row.items()})
        return cls(items, dict(metadata or {}))


def _parse_cell(v: str):
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def enumerate_mixtures(bank: ClipBank, n_sources: int, seed: int, mixtures_per_clip: int = 1) -> np.ndarray:
    """Fixed-seed mixtures: every clip anchors ``mixtures_per_clip`` mixtures with distinct-class partners."""
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, c in enumerate(bank.classes.tolist()):
        by_class.setdefault(c, []).append(i)
    classes = sorted(by_class)
    if n_sources > len(classes):
        raise ValueError(f"cannot mix {n_sources} distinct classes from {len(classes)}")
    rows = []
    for anchor in range(len(bank)):
        others = [c for c in classes if c != bank.classes[anchor]]
        for _ in range(mixtures_per_clip):
            picks = rng.choice(len(others), size=n_sources - 1, replace=False)
            row = [anchor] + [by_class[others[k]][int(rng.integers(len(by_class[others[k]])))] for k in picks]
            rows.append(row)
    return np.array(rows)


def all_mixtures(bank: ClipBank, n_sources: int) -> np.ndarray:
    """Every combination of ``n_sources`` clips with pairwise distinct classes, in index order."""
    rows = [
        c for c in itertools.combinations(range(len(bank)), n_sources)
        if len({int(bank.classes[i]) for i in c}) == n_sources
    ]
    if not rows:
        raise ValueError(f"no {n_sources}-class combinations in this split")
    return np.array(rows)


@torch.no_grad()
def predict_masks(model: AVPCModel, bank: ClipBank, batch: MixtureBatch, T: int, chunk: int = 64) -> list[np.ndarray]:
    """Masks at every cycle ``t = 0..T``; each entry is ``(B, N, bins, frames)``."""
    model.eval()
    dt = next(model.pcnet.parameters()).dtype
    spec = batch.spec_input(dt)
    vis = batch.visual(bank, model.guidance, dt)
    per_t: list[list[np.ndarray]] = [[] for _ in range(T + 1)]
    for s in range(0, spec.shape[0], chunk):
        _, tr, _ = model(spec[s : s + chunk], vis[s : s + chunk], T=T, trace=True)
        for t, m in enumerate(tr.masks):
            per_t[t].append(m[:, 0].double().numpy())
    B, N = batch.indices.shape
    return [np.concatenate(ms).reshape(B, N, *ms[0].shape[1:]) for ms in per_t]


def score_masks(bank: ClipBank, batch: MixtureBatch, masks: np.ndarray, with_images: bool = True) -> list[dict]:
    """Reconstruct every source with its mask and score it against the clean references."""
    sc = bank.cfg.spectrogram
    items = []
    B, N = batch.indices.shape
    for b in range(B):
        refs = [bank.waveforms[i] for i in batch.indices[b]]
        mix = batch.mix_waveforms[b]
        for n in range(N):
            est = apply_mask_and_reconstruct(batch.mix_complex[b], masks[b, n], sc).samples
            sdr, sir, sar = bss_metrics(est, refs, n)
            bsdr, bsir, bsar = bss_metrics(mix, refs, n)
            it = {
                "mixture": b,
                "source": n,
                "clip_id": bank.records[batch.indices[b, n]].clip_id,
                "class_id": int(bank.classes[batch.indices[b, n]]),
                "sdr": sdr,
                "sir": sir,
                "sar": sar,
                "baseline_sdr": bsdr,
                "baseline_sir": bsir,
                "baseline_sar": bsar,
            }
            if with_images:
                it["psnr"] = psnr(masks[b, n], batch.gt[b, n])
                it["ms_ssim"] = ms_ssim(masks[b, n], batch.gt[b, n]) if np.any(masks[b, n]) or np.any(batch.gt[b, n]) else 0.0
            items.append(it)
    return items


def evaluate_testset(
    model: AVPCModel,
    bank: ClipBank,
    n_sources: int = 2,
    T_test: int | None = None,
    seed: int = 0,
    mixtures_per_clip: int = 1,
    masks: str = "model",
    checkpoint_id: str = "",
    exhaustive: bool = False,
) -> MetricsReport:
    """Score ``len(bank) * mixtures_per_clip`` fixed-seed mixtures, ``N`` sources each.

    ``masks`` selects the mask source: the model, the ground-truth ("oracle")
    masks, or all-ones ("ones", which reproduces the mixture baseline).
    ``exhaustive`` scores every distinct-class combination instead of sampling.
    """
    if masks not in ("model", "oracle", "ones"):
        raise ValueError("masks must be 'model', 'oracle' or 'ones'")
    T = model.arch.t_test if T_test is None else T_test
    rows = all_mixtures(bank, n_sources) if exhaustive else enumerate_mixtures(bank, n_sources, seed, mixtures_per_clip)
    batch = make_batch(bank, rows)
    if masks == "model":
        m = predict_masks(model, bank, batch, T)[-1]
    elif masks == "oracle":
        m = batch.gt
    else:
        m = np.ones_like(batch.gt)
    meta = {"checkpoint": checkpoint_id, "T_test": T, "N": n_sources, "seed": seed, "masks": masks, "exhaustive": exhaustive}
    return MetricsReport(score_masks(bank, batch, m), meta)


def cycle_sweep(
    model: AVPCModel, bank: ClipBank, T_max: int, repeats: int = 10, n_sources: int = 2, seed: int = 0,
    mixtures_per_clip: int = 1,
) -> list[dict]:
    """Mean SDR/SIR/SAR of the trace mask at each ``t = 1..T_max``, pooled over ``repeats`` seeds."""
    if not model.arch.linear_diagnostic and T_max > model.arch.capacity:
        raise ValueError(f"T_max={T_max} exceeds normalisation capacity {model.arch.capacity}")
    per_t: dict[int, list[dict]] = {t: [] for t in range(1, T_max + 1)}
    for r in range(repeats):
        rows = enumerate_mixtures(bank, n_sources, seed + r, mixtures_per_clip)
        batch = make_batch(bank, rows)
        masks = predict_masks(model, bank, batch, T_max)
        for t in range(1, T_max + 1):
            per_t[t].extend(score_masks(bank, batch, masks[t], with_images=False))
    table = []
    for t in range(1, T_max + 1):
        row = {"t": t}
        for m in METRICS:
            vals = np.array([it[m] for it in per_t[t]])
            row[m] = float(vals.mean())
            row[f"{m}_median"] = float(np.median(vals))
        table.append(row)
    return table


def write_table(rows: list[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return path


def plot_cycle_sweep(rows: list[dict], path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    t = [r["t"] for r in rows]
    for m in METRICS:
        ax.plot(t, [r[m] for r in rows], marker="o", label=m.upper())
    ax.set_xlabel("cycle t")
    ax.set_ylabel("dB")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_class_bars(report: MetricsReport, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    classes = sorted({it["class_id"] for it in report.items})
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.25
    for k, m in enumerate(METRICS):
        vals = [np.mean([it[m] for it in report.items if it["class_id"] == c]) for c in classes]
        ax.bar(np.arange(len(classes)) + (k - 1) * width, vals, width, label=m.upper())
    ax.set_xticks(np.arange(len(classes)), [str(c) for c in classes])
    ax.set_xlabel("class")
    ax.set_ylabel("dB")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
