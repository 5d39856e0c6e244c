import numpy as np
from sklearn.utils import check_array


def check_images(X, min_size=1):
    """Validate a stack of RGB images (N, H, W, 3) with values in [0, 1]."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images of shape (N, H, W, 3), got {X.shape}")
    if min(X.shape[1:3]) < min_size:
        raise ValueError(f"images must be at least {min_size} x {min_size}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return X


def check_trials(X, min_samples=8):
    """Validate a stack of EEG trials (N, C, T)."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected trials of shape (N, C, T), got {X.shape}")
    if X.shape[-1] < min_samples:
        raise ValueError(f"trials need at least {min_samples} samples")
    return X
