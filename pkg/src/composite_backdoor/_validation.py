"""Input validation helpers for image batches and labels.

All public entry points of the toolkit funnel their array inputs through
these checks so shape/range errors surface with a clear message instead of
a downstream numpy broadcast failure.
"""

import numpy as np


def check_images(X, name="X"):
    """Validate a batch of images and return it as float64 in [0, 1].

    Accepts ``(N, H, W, C)`` float arrays in [0, 1] or uint8 arrays in
    [0, 255]. A single ``(H, W, C)`` image is promoted to a batch of one.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None, ...]
    if X.ndim != 4:
        raise ValueError(
            f"{name} must have shape (N, H, W, C) or (H, W, C), got {X.shape}"
        )
    if X.dtype == np.uint8:
        X = X.astype(np.float64) / 255.0
    else:
        X = X.astype(np.float64, copy=True)
        if X.size and (X.min() < -1e-9 or X.max() > 1.0 + 1e-9):
            raise ValueError(
                f"{name} values must lie in [0, 1], got range "
                f"[{X.min():.4g}, {X.max():.4g}]"
            )
        X = np.clip(X, 0.0, 1.0)
    if min(X.shape[1:]) < 1:
        raise ValueError(f"{name} has an empty image dimension: {X.shape}")
    return X


def check_labels(y, n=None, name="y"):
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        yi = y.astype(np.int64)
        if not np.array_equal(yi, y):
            raise ValueError(f"{name} must contain integer class labels")
        y = yi
    else:
        y = y.astype(np.int64)
    if n is not None and len(y) != n:
        raise ValueError(f"{name} has {len(y)} entries, expected {n}")
    return y


def check_image_shape(shape):
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ValueError(f"image shape must be (H, W, C) with positive sizes, got {shape}")
    return shape


def to_uint8(X):
    """Quantize float images in [0, 1] to uint8, round-half-even.

    This is the single quantization point of the toolkit: materialized
    poisoned datasets and triggered evaluation inputs both pass through it,
    so the model sees identical trigger statistics at train and test time.
    """
    X = np.asarray(X, dtype=np.float64)
    return np.rint(np.clip(X, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(X):
    return np.asarray(X, dtype=np.float64) / 255.0
