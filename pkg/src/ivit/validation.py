"""Input validation helpers shared by the estimator and CLI surfaces."""

from __future__ import annotations

import numpy as np

from .model import ModelConfig


def check_images(X, cfg: ModelConfig) -> np.ndarray:
    """Coerce to (n, H, W, C) float32 in a finite range matching the config."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"images must be (n, H, W[, C]); got shape {X.shape}")
    n, h, w, c = X.shape
    if (h, w, c) != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ValueError(
            f"images are {(h, w, c)}, expected "
            f"({cfg.image_size}, {cfg.image_size}, {cfg.channels})")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    return X


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"labels must be 1-D of length {n_samples}")
    if y.dtype.kind not in "iu":
        if not np.all(y == y.astype(np.int64)):
            raise ValueError("labels must be integers")
    return y.astype(np.int64)


def check_teacher_rows(maps, n_samples: int, n_patches: int) -> np.ndarray:
    """Per-sample teacher distributions as an (n, N) float array."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.shape != (n_samples, n_patches):
        raise ValueError(
            f"teacher maps must be ({n_samples}, {n_patches}); got {maps.shape}")
    if np.any(maps < 0) or not np.all(np.isfinite(maps)):
        raise ValueError("teacher maps must be finite and non-negative")
    sums = maps.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-4):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValueError(f"teacher map {bad} sums to {sums[bad]:.6g}, not 1")
    return maps
