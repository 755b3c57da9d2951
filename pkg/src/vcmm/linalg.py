"""Symmetric spectral factorizations and stabilized solves.

The ridge-augmented Gram matrices handled here are symmetric PSD, so the
"SVD" is computed as a symmetric eigendecomposition (U = V).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DimensionMismatchError, NumericalError

DEFAULT_TAU = 1e-10
SYMMETRY_TOL = 1e-10


@dataclass(frozen=True)
class SvdMode:
    """How to decompose: ``full``, ``truncated`` (tau or rank) or ``randomized``."""

    kind: str = "full"
    tau: float = DEFAULT_TAU
    rank: int | None = None
    oversample: int = 10
    power_iters: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("full", "truncated", "randomized"):
            raise ValueError(f"unknown svd mode {self.kind!r}")
        if self.kind == "randomized" and self.rank is None:
            raise ValueError("randomized mode needs a target rank")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("kind", "tau", "rank", "oversample", "power_iters", "seed")}


@dataclass(frozen=True, eq=False)
class SpectralFactors:
    U: np.ndarray
    S: np.ndarray
    truncation_threshold: float
    n: int

    @property
    def rank(self) -> int:
        return self.S.shape[0]

    def matrix(self) -> np.ndarray:
        return (self.U * self.S) @ self.U.T

    def pinv(self) -> np.ndarray:
        return (self.U / self.S) @ self.U.T


def _symmetrize(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatchError("A", "square matrix", A.shape)
    if not np.all(np.isfinite(A)):
        raise NumericalError("non-finite entries in matrix to decompose")
    scale = max(np.max(np.abs(A)), 1.0) if A.size else 1.0
    if np.max(np.abs(A - A.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise NumericalError("matrix is not symmetric within tolerance")
    return 0.5 * (A + A.T)


def _randomized_eigh(A: np.ndarray, mode: SvdMode):
    n = A.shape[0]
    k = min(n, mode.rank + mode.oversample)
    rng = np.random.default_rng(mode.seed)
    Y = A @ rng.standard_normal((n, k))
    Qm, _ = np.linalg.qr(Y)
    for _ in range(mode.power_iters):
        Qm, _ = np.linalg.qr(A @ Qm)
    small = Qm.T @ A @ Qm
    w, V = np.linalg.eigh(0.5 * (small + small.T))
    return w, Qm @ V


def spectral_decompose(A, mode: SvdMode | str = "full") -> SpectralFactors:
    """Factor a symmetric PSD matrix as U diag(S) U' with S descending.

    ``full`` keeps every strictly positive eigenvalue; ``truncated`` keeps
    those above ``tau * S_1`` (or the leading ``rank``); ``randomized``
    runs a seeded Gaussian range finder with power iterations and keeps
    the leading ``rank`` components.
    """
    if isinstance(mode, str):
        mode = SvdMode(mode)
    A = _symmetrize(A)
    n = A.shape[0]
    if n == 0:
        return SpectralFactors(np.zeros((0, 0)), np.zeros(0), 0.0, 0)
    if mode.kind == "randomized":
        w, V = _randomized_eigh(A, mode)
    else:
        w, V = np.linalg.eigh(A)
    order = np.argsort(w)[::-1]
    w, V = w[order], V[:, order]
    top = w[0] if w.size else 0.0
    if mode.kind == "full":
        threshold = 0.0
        keep = w > 0.0
    elif mode.kind == "truncated" and mode.rank is None:
        threshold = mode.tau
        keep = w > mode.tau * top
    else:
        threshold = mode.tau if mode.kind == "truncated" else 0.0
        keep = np.zeros(w.shape[0], dtype=bool)
        keep[: mode.rank] = True
        keep &= w > 0.0
    return SpectralFactors(V[:, keep], w[keep], threshold, n)


def stabilized_solve(factors: SpectralFactors, rhs) -> np.ndarray:
    """U S^-1 U' rhs: the exact inverse when full rank, else the spectral pseudo-inverse."""
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] != factors.n:
        raise DimensionMismatchError("rhs", factors.n, rhs.shape[0])
    coef = factors.U.T @ rhs
    coef = coef / (factors.S if coef.ndim == 1 else factors.S[:, None])
    return factors.U @ coef


def reconstruction_error(A, factors: SpectralFactors) -> float:
    """Relative Frobenius error ||A - U S U'|| / ||A||."""
    A = np.asarray(A, dtype=float)
    denom = np.linalg.norm(A)
    return float(np.linalg.norm(A - factors.matrix()) / denom) if denom else 0.0
