"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np

from probekit.errors import ContractError, NumericError, ShapeError


def check_images(X, size: int | None = None, allow_flat: bool = True) -> np.ndarray:
    """Return ``X`` as a float (N, H, W) array of finite values in [-1, 1].

    Flat (N, H*W) input is reshaped when H*W is a perfect square.
    """
    X = np.asarray(X)
    if X.dtype.kind not in "fiu":
        raise ContractError(f"images must be numeric, got dtype {X.dtype}")
    X = X.astype(np.float64 if X.dtype == np.float64 else np.float32, copy=False)
    if X.ndim == 2 and allow_flat:
        side = int(round(np.sqrt(X.shape[1])))
        if side * side != X.shape[1]:
            raise ShapeError(f"flat images of length {X.shape[1]} are not square")
        X = X.reshape(len(X), side, side)
    if X.ndim != 3:
        raise ShapeError(f"expected (N, H, W) images, got shape {X.shape}")
    if len(X) == 0:
        raise ContractError("no images given")
    if size is not None and X.shape[1:] != (size, size):
        raise ShapeError(f"expected {size}x{size} images, got {X.shape[1]}x{X.shape[2]}")
    if not np.all(np.isfinite(X)):
        raise NumericError("images contain non-finite values")
    if X.min() < -1 - 1e-6 or X.max() > 1 + 1e-6:
        raise ContractError("pixel values must lie in [-1, 1]")
    return X


def check_binary_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y).astype(np.int64).ravel()
    if len(y) != n:
        raise ShapeError(f"{len(y)} labels for {n} images")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("labels must be 0 (real) or 1 (fake)")
    return y


def check_class_ids(y, n: int, n_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y).astype(np.int64).ravel()
    if len(y) != n:
        raise ShapeError(f"{len(y)} class ids for {n} images")
    if y.min() < 0 or (n_classes is not None and y.max() >= n_classes):
        raise ContractError(f"class ids must lie in [0, {n_classes})")
    return y

