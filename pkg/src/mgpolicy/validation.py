"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError

from .errors import ShapeError


def as_action_batch(X, action_dim: int | None = None) -> np.ndarray:
    """Coerce X to a float64 (n, T, j) batch of action sequences."""
    if isinstance(X, (list, tuple)):
        X = np.stack([np.asarray(x, dtype=np.float64) for x in X])
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ShapeError(f"expected (n, T, j) action sequences, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ShapeError("action sequences contain non-finite values")
    if action_dim is not None and X.shape[2] != action_dim:
        raise ShapeError(f"action dim {X.shape[2]} != fitted dim {action_dim}")
    return X


def as_token_batch(tokens, vocab_limit: int) -> np.ndarray:
    """Coerce to int64 (n, N) token-id batch and bound-check ids."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if tokens.ndim != 2:
        raise ShapeError(f"expected (n, N) token ids, got shape {tokens.shape}")
    tokens = tokens.astype(np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_limit):
        raise ShapeError(f"token id outside [0, {vocab_limit})")
    return tokens


def check_fitted(est, attr: str):
    if not hasattr(est, attr):
        raise NotFittedError(
            f"{type(est).__name__} is not fitted yet; call fit() before using it")
