#!/usr/bin/env python3

import hashlib
import numpy as np

SIMPLEX_TOL = 1e-9


##################
# --- ERRORS --- #
##################


class ZeroVolatilityError(ValueError):
    """Raised when a return series has no measurable volatility."""


class RuinError(ValueError):
    """Raised when a wealth growth factor is not strictly positive."""


class NonFiniteError(ValueError):
    """Raised when a forward pass, loss, or ratio produces NaN or infinity."""


class ChecksumError(ValueError):
    """Raised when a checkpoint fails CRC verification."""


###########################
# --- SIMPLEX HELPERS --- #
###########################

def softmax(logits: np.ndarray) -> np.ndarray:
    """
    Numerically stable softmax over the last axis.

    The maximum logit is subtracted before exponentiation, so the output is
    invariant under adding a constant to every logit.

    Args:
        logits (np.ndarray): Array of shape [..., N].

    Returns:
        np.ndarray: Same shape, each row on the probability simplex.

    Example:
        >>> softmax(np.array([np.log(2.0), 0.0]))
        array([0.66666667, 0.33333333])
    """
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / np.sum(exps, axis=-1, keepdims=True)


def uniform_weights(n: int) -> np.ndarray:
    """Return the equal-weight vector of length ``n``."""
    if n < 1:
        raise ValueError(f"Number of assets must be positive, got {n}.")
    return np.full(n, 1.0 / n)


def is_simplex(weights: np.ndarray, tol: float = SIMPLEX_TOL) -> bool:
    """Return True if every row of ``weights`` lies in [0, 1] and sums to one within ``tol``."""
    weights = np.asarray(weights, dtype=float)
    if not np.all(np.isfinite(weights)):
        return False
    in_range = np.all(weights >= -tol) and np.all(weights <= 1.0 + tol)
    sums = np.sum(weights, axis=-1)
    return bool(in_range and np.all(np.abs(sums - 1.0) <= tol))


def check_simplex(weights: np.ndarray, tol: float = SIMPLEX_TOL, name: str = "weights") -> np.ndarray:
    """
    Validate that ``weights`` is a long-only allocation.

    Args:
        weights (np.ndarray): Candidate weight vector (or batch of vectors).
        tol (float): Allowed deviation from the simplex constraints.
        name (str): Field name used in the error message.

    Returns:
        np.ndarray: The weights as a float array.

    Raises:
        ValueError: If any entry is outside [0, 1] or a row does not sum to one.
    """
    weights = np.asarray(weights, dtype=float)
    if not is_simplex(weights, tol):
        raise ValueError(f"{name} must be non-negative and sum to one, got {weights}.")
    return weights


def renormalize_simplex(weights: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """
    Snap a nearly-valid allocation back onto the simplex.

    Entries are clipped to be non-negative and the vector is rescaled to sum to
    one. Vectors further than ``tol`` from the simplex are rejected.

    Raises:
        ValueError: If ``weights`` is off the simplex by more than ``tol``.
    """
    weights = check_simplex(weights, tol=tol, name="action")
    clipped = np.clip(weights, 0.0, None)
    return clipped / np.sum(clipped)


#########################
# --- MISC HELPERS --- #
#########################

def ensure_finite(values, what: str):
    """
    Raise ``NonFiniteError`` if ``values`` contains NaN or infinity.

    Returns:
        The input, unchanged, for chaining.
    """
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"Non-finite value encountered in {what}.")
    return values


def derive_seed(seed: int, label: str) -> int:
    """
    Derive a reproducible child seed from a top-level seed and a label.

    Example:
        >>> derive_seed(7, "actor") == derive_seed(7, "actor")
        True
        >>> derive_seed(7, "actor") == derive_seed(7, "critic")
        False
    """
    digest = hashlib.sha256(f"{int(seed)}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], byteorder="little") >> 1
