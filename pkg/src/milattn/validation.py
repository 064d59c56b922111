"""Input validation helpers shared by the estimator and the pipeline code."""
from __future__ import annotations

import numpy as np


def require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")


def check_bag(bag, index: int | None = None) -> np.ndarray:
    """Validate one bag: a 2-D (n_instances, n_features) finite float array."""
    where = "bag" if index is None else f"bag {index}"
    arr = np.asarray(bag, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{where} must be 2-D (instances x features), got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError(f"{where} must contain at least one instance")
    require_finite(where, arr)
    return arr


def check_bags(X) -> list[np.ndarray]:
    """Validate a sequence of bags and enforce a common feature dimension."""
    if len(X) == 0:
        raise ValueError("X must contain at least one bag")
    bags = [check_bag(b, i) for i, b in enumerate(X)]
    dim = bags[0].shape[1]
    for i, b in enumerate(bags):
        if b.shape[1] != dim:
            raise ValueError(
                f"bag {i} has feature dimension {b.shape[1]}, expected {dim}"
            )
    return bags


def check_labels(y, n: int, n_classes: int | None = None) -> np.ndarray:
    """Validate integer labels aligned with n bags."""
    arr = np.asarray(y)
    if arr.shape != (n,):
        raise ValueError(f"y must have shape ({n},), got {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        fl = np.asarray(arr, dtype=np.float64)
        if not np.all(fl == np.floor(fl)):
            raise ValueError("y must contain integer class labels")
        arr = fl.astype(np.int64)
    arr = arr.astype(np.int64)
    if n_classes is not None and arr.size:
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"labels must lie in [0, {n_classes - 1}]")
    return arr
