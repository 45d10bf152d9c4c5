"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np

from .dsp import AudioClip


def check_waveform(x, n_samples: int | None = None, name: str = "waveform") -> np.ndarray:
    """1-D finite float64 samples; ``AudioClip`` is unwrapped."""
    if isinstance(x, AudioClip):
        x = x.samples
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite samples")
    if n_samples is not None and arr.size != n_samples:
        raise ValueError(f"{name} has {arr.size} samples, expected {n_samples}")
    return arr


def check_waveform_batch(X, n_samples: int | None = None) -> np.ndarray:
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.ndim != 2:
        raise ValueError(f"expected (n_clips, n_samples) waveforms, got shape {arr.shape}")
    for i, row in enumerate(arr):
        check_waveform(row, n_samples, name=f"waveform {i}")
    return arr


def check_class_ids(ids, n_classes: int) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(ids))
    if arr.ndim != 1 or not np.issubdtype(arr.dtype, np.integer):
        raise ValueError("class ids must be a 1-D integer array")
    if np.any(arr < 0) or np.any(arr >= n_classes):
        raise ValueError(f"class ids must lie in [0, {n_classes})")
    return arr.astype(np.int64)


def check_frames(frames, n_sources: int | None = None) -> np.ndarray:
    """``(N, F, H, W, 3)`` frame stacks in [0, 1]."""
    arr = np.asarray(frames, dtype=np.float32)
    if arr.ndim == 4:
        arr = arr[None]
    if arr.ndim != 5 or arr.shape[-1] != 3:
        raise ValueError(f"frames must have shape (N, F, H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("frames contain non-finite values")
    if n_sources is not None and arr.shape[0] != n_sources:
        raise ValueError(f"got frames for {arr.shape[0]} sources, expected {n_sources}")
    return arr
