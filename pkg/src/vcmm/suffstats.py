"""Per-partition sufficient statistics, their aggregation, and the
joint penalized objective evaluated from summaries alone."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    DimensionMismatchError,
    ModelDims,
    ModelParams,
    NonPositiveVarianceError,
    NumericalError,
    Partition,
    realize_penalty,
)
from .spline import TensorSplineBasis, expand_design

CHUNK_ROWS = 4096


@dataclass(frozen=True, eq=False)
class SuffStats:
    """Summary (a, b, C, d, B, H, n) of one partition.

    a = sum y^2, b = Xt'y, C = Xt'Xt, d = Z'y, B = Xt'Z, H = Z'Z where Xt
    is the spline-expanded design.  ``Q`` records the basis size so the
    penalty can be realized blockwise.
    """

    a: float
    b: np.ndarray
    C: np.ndarray
    d: np.ndarray
    B: np.ndarray
    H: np.ndarray
    n: int
    Q: int

    def __post_init__(self):
        pq, q = self.b.shape[0], self.d.shape[0]
        if self.C.shape != (pq, pq):
            raise DimensionMismatchError("C", (pq, pq), self.C.shape)
        if self.B.shape != (pq, q):
            raise DimensionMismatchError("B", (pq, q), self.B.shape)
        if self.H.shape != (q, q):
            raise DimensionMismatchError("H", (q, q), self.H.shape)
        if pq % self.Q:
            raise DimensionMismatchError("Q", f"a divisor of {pq}", self.Q)
        for name in ("b", "C", "d", "B", "H"):
            getattr(self, name).setflags(write=False)
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "n", int(self.n))

    @classmethod
    def zeros(cls, pq: int, q: int, Q: int) -> "SuffStats":
        return cls(0.0, np.zeros(pq), np.zeros((pq, pq)), np.zeros(q), np.zeros((pq, q)), np.zeros((q, q)), 0, Q)

    @property
    def pq(self) -> int:
        return self.b.shape[0]

    @property
    def q(self) -> int:
        return self.d.shape[0]

    def dims(self, K: int = 1) -> ModelDims:
        return ModelDims(p=self.pq // self.Q - 1, Q=self.Q, q=self.q, K=K, N=self.n)

    def gram(self) -> np.ndarray:
        """Stacked Gram matrix [[C, B], [B', H]]."""
        return np.block([[self.C, self.B], [self.B.T, self.H]])

    def __add__(self, other: "SuffStats") -> "SuffStats":
        _check_compatible(self, other)
        return SuffStats(
            self.a + other.a,
            self.b + other.b,
            self.C + other.C,
            self.d + other.d,
            self.B + other.B,
            self.H + other.H,
            self.n + other.n,
            self.Q,
        )

    def residual_ss(self, beta: np.ndarray, alpha: np.ndarray) -> float:
        """||y - Xt beta - Z alpha||^2 expanded through the summaries."""
        return float(
            self.a
            - 2.0 * beta @ self.b
            + beta @ self.C @ beta
            - 2.0 * alpha @ self.d
            + 2.0 * beta @ self.B @ alpha
            + alpha @ self.H @ alpha
        )

    def local_score(self, beta: np.ndarray, alpha: np.ndarray) -> np.ndarray:
        """Unscaled, penalty-free score sigma^2 * s_k: [C b + B a - b ; B'b + H a - d]."""
        return np.concatenate(
            [self.C @ beta + self.B @ alpha - self.b, self.B.T @ beta + self.H @ alpha - self.d]
        )


def _check_compatible(s1: SuffStats, s2: SuffStats) -> None:
    if (s1.pq, s1.q, s1.Q) != (s2.pq, s2.q, s2.Q):
        raise DimensionMismatchError("SuffStats", (s1.pq, s1.q, s1.Q), (s2.pq, s2.q, s2.Q))


@dataclass(frozen=True, eq=False)
class ScoreVector:
    g_beta: np.ndarray
    g_alpha: np.ndarray
    penalized: bool

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.g_beta, self.g_alpha])

    def norm_inf(self) -> float:
        v = self.vector
        return float(np.max(np.abs(v))) if v.size else 0.0


class _Neumaier:
    """Compensated running sum of arrays."""

    def __init__(self, shape):
        self.total = np.zeros(shape)
        self.comp = np.zeros(shape)

    def add(self, x):
        t = self.total + x
        big = np.abs(self.total) >= np.abs(x)
        self.comp += np.where(big, (self.total - t) + x, (x - t) + self.total)
        self.total = t

    def value(self):
        return self.total + self.comp


def compute_local(part: Partition, basis: TensorSplineBasis) -> SuffStats:
    """Sufficient statistics of one partition in a single chunked pass over rows."""
    n, q, Q = part.n, part.q, basis.Q
    pq = (part.p + 1) * Q
    if part.M != basis.M:
        raise DimensionMismatchError("H", f"{basis.M} columns", f"{part.M} columns")
    if n and not (np.all(np.isfinite(part.y)) and np.all(np.isfinite(part.X)) and np.all(np.isfinite(part.Z))):
        raise NumericalError(f"non-finite value in partition {part.partition_id}")
    a = _Neumaier(())
    b = _Neumaier(pq)
    d = _Neumaier(q)
    C = np.zeros((pq, pq))
    B = np.zeros((pq, q))
    Hm = np.zeros((q, q))
    for lo in range(0, n, CHUNK_ROWS):
        hi = min(lo + CHUNK_ROWS, n)
        y = part.y[lo:hi]
        Xt = expand_design(part.X[lo:hi], part.H[lo:hi], basis)
        Z = part.Z[lo:hi]
        a.add(np.sum(y * y))
        b.add(Xt.T @ y)
        d.add(Z.T @ y)
        C += Xt.T @ Xt
        B += Xt.T @ Z
        Hm += Z.T @ Z
    C = 0.5 * (C + C.T)
    Hm = 0.5 * (Hm + Hm.T)
    return SuffStats(float(a.value()), b.value(), C, d.value(), B, Hm, n, Q)


def aggregate(stats: Sequence[SuffStats]) -> SuffStats:
    """Componentwise sum of summaries."""
    stats = list(stats)
    if not stats:
        raise ValueError("aggregate needs at least one SuffStats")
    first = stats[0]
    for s in stats[1:]:
        _check_compatible(first, s)
    return SuffStats(
        float(np.sum([s.a for s in stats])),
        np.sum([s.b for s in stats], axis=0),
        np.sum([s.C for s in stats], axis=0),
        np.sum([s.d for s in stats], axis=0),
        np.sum([s.B for s in stats], axis=0),
        np.sum([s.H for s in stats], axis=0),
        sum(s.n for s in stats),
        first.Q,
    )


def penalty_for(theta: ModelParams, agg: SuffStats) -> np.ndarray:
    return realize_penalty(theta.penalty, agg.dims())


def _check_theta(theta: ModelParams, agg: SuffStats) -> None:
    theta.check_dims(agg.dims())
    if not theta.sigma2_eps > 0:
        raise NonPositiveVarianceError("sigma2_eps must be > 0")


def joint_objective(theta: ModelParams, agg: SuffStats, P: np.ndarray | None = None) -> float:
    """Negative penalized joint log-likelihood, up to additive constants."""
    _check_theta(theta, agg)
    P = penalty_for(theta, agg) if P is None else P
    beta, alpha, s2 = theta.beta, theta.alpha, theta.sigma2_eps
    cov = theta.sigma_alpha
    val = agg.residual_ss(beta, alpha) / (2.0 * s2) + 0.5 * agg.n * np.log(s2)
    val += 0.5 * beta @ P @ beta
    if cov.q:
        val += 0.5 * alpha @ cov.inverse() @ alpha + 0.5 * cov.logdet()
    return float(val)


def gradient(
    theta: ModelParams,
    agg: SuffStats,
    include_penalty: bool = True,
    P: np.ndarray | None = None,
    Sigma_inv: np.ndarray | None = None,
) -> ScoreVector:
    """Gradient of :func:`joint_objective` in (beta, alpha).

    With ``include_penalty=False`` the prior terms are left out; this is
    the node-local convention, and the aggregator adds them exactly once.
    """
    _check_theta(theta, agg)
    s = agg.local_score(theta.beta, theta.alpha) / theta.sigma2_eps
    gb, ga = s[: agg.pq], s[agg.pq :]
    if include_penalty:
        P = penalty_for(theta, agg) if P is None else P
        Sigma_inv = theta.sigma_alpha.inverse() if Sigma_inv is None else Sigma_inv
        gb = gb + P @ theta.beta
        ga = ga + Sigma_inv @ theta.alpha
    return ScoreVector(gb, ga, include_penalty)
