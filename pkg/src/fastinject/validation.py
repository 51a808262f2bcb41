"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def check_feature_sequences(X, feature_dim: int | None = None) -> list[np.ndarray]:
    """Coerce X to a list of [T, feature_dim] float64 arrays.

    Accepts any iterable of 2-D array-likes; all items must share the same
    second dimension (and match ``feature_dim`` when given).
    """
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    out = []
    dim = feature_dim
    for i, item in enumerate(X):
        arr = np.asarray(item, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise ShapeError(f"X[{i}] must be a non-empty [T, d] array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ShapeError(f"X[{i}] contains non-finite values")
        if dim is None:
            dim = arr.shape[1]
        elif arr.shape[1] != dim:
            raise ShapeError(f"X[{i}] has feature dim {arr.shape[1]}, expected {dim}")
        out.append(arr)
    if not out:
        raise ShapeError("X must contain at least one utterance")
    return out


def check_token_sequences(y, vocab_size: int | None = None,
                          blank_id: int | None = None, name: str = "y") -> list[list[int]]:
    """Coerce y to lists of int token ids, bounds-checked against the vocab."""
    out = []
    for i, seq in enumerate(y):
        ids = [int(t) for t in seq]
        if vocab_size is not None:
            bad = [t for t in ids if t < 0 or t >= vocab_size]
            if bad:
                raise ShapeError(
                    f"{name}[{i}] has token ids {bad[:5]} outside [0, {vocab_size})")
        if blank_id is not None and blank_id in ids:
            raise ShapeError(f"{name}[{i}] contains the blank id {blank_id}")
        out.append(ids)
    return out


def check_paired(X, y) -> None:
    if len(X) != len(y):
        raise ShapeError(f"X and y must have equal length, got {len(X)} and {len(y)}")
