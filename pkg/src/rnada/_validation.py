"""Input checks for the estimator API."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array


def check_clips(X, n_modalities: int | None = None, frame_shape=None) -> np.ndarray:
    """Validate a clip tensor of shape ``(n_clips, n_modalities, T, frame_dim)``."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True,
                    input_name="X")
    if X.ndim != 4:
        raise ValueError(f"X must be 4-D (clips, modalities, frames, dim), got shape {X.shape}")
    if n_modalities is not None and X.shape[1] != n_modalities:
        raise ValueError(f"X has {X.shape[1]} modalities, expected {n_modalities}")
    if frame_shape is not None and X.shape[2:] != tuple(frame_shape):
        raise ValueError(f"X frames have shape {X.shape[2:]}, expected {tuple(frame_shape)}")
    return X


def check_dual_labels(y, n: int) -> np.ndarray:
    """Validate ``(n, 2)`` verb/noun labels."""
    y = np.asarray(y)
    if y.shape != (n, 2):
        raise ValueError(f"y must have shape ({n}, 2) holding (verb, noun), got {y.shape}")
    return y


def check_kitchens(kitchens, n: int) -> np.ndarray:
    if kitchens is None:
        return np.zeros(n, dtype=np.intp)
    kitchens = np.asarray(kitchens)
    if kitchens.shape != (n,):
        raise ValueError(f"kitchens must have shape ({n},), got {kitchens.shape}")
    if not np.issubdtype(kitchens.dtype, np.integer) or (n and kitchens.min() < 0):
        raise ValueError("kitchen ids must be non-negative integers")
    return kitchens.astype(np.intp)
