"""Shared domain types, dimension bookkeeping and validation."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class VCMMError(ValueError):
    """Base class for every error raised by the engine."""


class DimensionMismatchError(VCMMError):
    def __init__(self, field_name: str, expected, got):
        self.field = field_name
        super().__init__(f"dimension mismatch in '{field_name}': expected {expected}, got {got}")


class IndexDomainError(VCMMError):
    pass


class NumericalError(VCMMError):
    pass


class SingularSystemError(NumericalError):
    pass


class NonPositiveVarianceError(NumericalError):
    pass


INDEX_DOMAIN = (0.0, 1.0)


@dataclass(frozen=True)
class ModelDims:
    """Dimension bookkeeping for one model.

    ``p`` non-intercept covariates, ``Q`` tensor basis size, ``q`` random
    effect dimension, ``M`` index components, ``K`` partitions and ``N``
    total observations.
    """

    p: int
    Q: int
    q: int
    M: int = 1
    K: int = 1
    N: int = 0

    def __post_init__(self):
        if self.p < 0 or self.q < 0 or self.N < 0:
            raise VCMMError(f"negative dimension in {self}")
        if self.Q < 1 or self.M < 1 or self.K < 1:
            raise VCMMError(f"Q, M and K must be >= 1 in {self}")

    @property
    def pq(self) -> int:
        """Length of the fixed-effect spline coefficient vector, (p+1)Q."""
        return (self.p + 1) * self.Q

    @property
    def d(self) -> int:
        return self.pq + self.q


@dataclass(frozen=True, eq=False)
class Partition:
    y: np.ndarray
    X: np.ndarray
    H: np.ndarray
    Z: np.ndarray
    partition_id: int = 0

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        n = y.shape[0]
        X = _as_2d(self.X, n)
        H = _as_2d(self.H, n)
        Z = _as_2d(self.Z, n)
        for arr in (y, X, H, Z):
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "partition_id", int(self.partition_id))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def M(self) -> int:
        return self.H.shape[1]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    def take(self, rows, partition_id: int | None = None) -> "Partition":
        rows = np.asarray(rows)
        pid = self.partition_id if partition_id is None else partition_id
        return Partition(self.y[rows], self.X[rows], self.H[rows], self.Z[rows], pid)


def _as_2d(a, n: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        # a flat vector is one column when it matches the row count, else empty
        a = a.reshape(n, -1) if a.size else np.zeros((n, 0))
    return np.array(a, dtype=float, copy=True)


def concat_partitions(parts: Sequence[Partition], partition_id: int = 0) -> Partition:
    return Partition(
        np.concatenate([pt.y for pt in parts]),
        np.vstack([pt.X for pt in parts]),
        np.vstack([pt.H for pt in parts]),
        np.vstack([pt.Z for pt in parts]),
        partition_id,
    )


def validate_partition(part: Partition, dims: ModelDims, domain=INDEX_DOMAIN) -> None:
    """Raise if ``part`` violates its invariants against ``dims``."""
    n = part.y.shape[0]
    for name, arr, cols in (("X", part.X, dims.p), ("H", part.H, dims.M), ("Z", part.Z, dims.q)):
        if arr.shape[0] != n:
            raise DimensionMismatchError(name, f"{n} rows", f"{arr.shape[0]} rows")
        if arr.shape[1] != cols:
            raise DimensionMismatchError(name, f"{cols} columns", f"{arr.shape[1]} columns")
    for name, arr in (("y", part.y), ("X", part.X), ("H", part.H), ("Z", part.Z)):
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite value in '{name}' of partition {part.partition_id}")
    lo, hi = domain
    if part.H.size and (part.H.min() < lo or part.H.max() > hi):
        bad = part.H[(part.H < lo) | (part.H > hi)][0]
        raise IndexDomainError(
            f"index value {bad!r} outside basis domain [{lo}, {hi}] in partition {part.partition_id}"
        )


# ---------------------------------------------------------------------------
# Penalty
# ---------------------------------------------------------------------------

PENALTY_KINDS = ("ridge", "second_difference")


@dataclass(frozen=True)
class PenaltySpec:
    """Smoothing penalty P on the spline coefficients.

    ``lam`` is either one weight shared by every coefficient block or a
    sequence with one weight per block (intercept block first).
    """

    kind: str = "ridge"
    lam: float | tuple = 0.0

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise VCMMError(f"unknown penalty kind {self.kind!r}; expected one of {PENALTY_KINDS}")
        lam = self.lam
        if np.ndim(lam):
            lam = tuple(float(v) for v in lam)
            if any(v < 0 for v in lam):
                raise VCMMError("penalty weights must be nonnegative")
        else:
            lam = float(lam)
            if lam < 0:
                raise VCMMError("penalty weight must be nonnegative")
        object.__setattr__(self, "lam", lam)

    def block_weights(self, n_blocks: int) -> np.ndarray:
        if isinstance(self.lam, tuple):
            if len(self.lam) != n_blocks:
                raise DimensionMismatchError("penalty.lam", n_blocks, len(self.lam))
            return np.array(self.lam)
        return np.full(n_blocks, self.lam)


def second_difference(Q: int) -> np.ndarray:
    """The (Q-2) x Q second-difference operator."""
    if Q < 3:
        return np.zeros((0, Q))
    return np.diff(np.eye(Q), n=2, axis=0)


def realize_penalty(spec: PenaltySpec, dims: ModelDims) -> np.ndarray:
    weights = spec.block_weights(dims.p + 1)
    if spec.kind == "ridge":
        block = np.eye(dims.Q)
    else:
        D2 = second_difference(dims.Q)
        block = D2.T @ D2
    P = np.zeros((dims.pq, dims.pq))
    for j, w in enumerate(weights):
        sl = slice(j * dims.Q, (j + 1) * dims.Q)
        P[sl, sl] = w * block
    return P


# ---------------------------------------------------------------------------
# Random-effect covariance
# ---------------------------------------------------------------------------

COV_STRUCTURES = ("isotropic", "block_isotropic", "full")
VARIANCE_FLOOR = 1e-12
FULL_RIDGE_FACTOR = 1e-8


@dataclass(frozen=True, eq=False)
class RandomEffectCov:
    """Structured covariance of the random effects.

    ``values`` holds one variance (isotropic), one variance per block
    (block_isotropic) or the q x q matrix (full).  The full structure adds
    ``ridge`` to the diagonal; by default 1e-8 * trace / q.
    """

    structure: str
    values: np.ndarray
    q: int
    block_sizes: tuple = ()
    ridge: float = 0.0

    def __post_init__(self):
        if self.structure not in COV_STRUCTURES:
            raise VCMMError(f"unknown covariance structure {self.structure!r}")
        vals = np.array(self.values, dtype=float, copy=True)
        if self.structure == "isotropic":
            vals = vals.reshape(1)
            if vals[0] <= 0:
                raise NonPositiveVarianceError("isotropic random-effect variance must be > 0")
        elif self.structure == "block_isotropic":
            sizes = tuple(int(s) for s in self.block_sizes)
            if sum(sizes) != self.q or len(sizes) != vals.size:
                raise DimensionMismatchError("block_sizes", f"sum {self.q} with {vals.size} blocks", sizes)
            if np.any(vals <= 0):
                raise NonPositiveVarianceError("block variances must be > 0")
            object.__setattr__(self, "block_sizes", sizes)
        else:
            if vals.shape != (self.q, self.q):
                raise DimensionMismatchError("sigma_alpha", (self.q, self.q), vals.shape)
            if not np.allclose(vals, vals.T, rtol=1e-10, atol=1e-12):
                raise VCMMError("full random-effect covariance must be symmetric")
            vals = 0.5 * (vals + vals.T)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    # constructors -----------------------------------------------------------
    @classmethod
    def isotropic(cls, variance: float, q: int) -> "RandomEffectCov":
        return cls("isotropic", np.array([variance]), q)

    @classmethod
    def block_isotropic(cls, variances, block_sizes) -> "RandomEffectCov":
        return cls("block_isotropic", np.asarray(variances, dtype=float), int(sum(block_sizes)), tuple(block_sizes))

    @classmethod
    def full(cls, matrix, ridge: float | None = None) -> "RandomEffectCov":
        matrix = np.asarray(matrix, dtype=float)
        q = matrix.shape[0]
        if ridge is None:
            ridge = FULL_RIDGE_FACTOR * np.trace(matrix) / max(q, 1)
        return cls("full", matrix, q, ridge=float(ridge))

    # realized forms ---------------------------------------------------------
    def diagonal(self) -> np.ndarray | None:
        """Per-coordinate variances when the structure is diagonal, else None."""
        if self.structure == "isotropic":
            return np.full(self.q, self.values[0])
        if self.structure == "block_isotropic":
            return np.repeat(self.values, self.block_sizes)
        return None

    def matrix(self) -> np.ndarray:
        diag = self.diagonal()
        if diag is not None:
            return np.diag(diag)
        return self.values + self.ridge * np.eye(self.q)

    def inverse(self) -> np.ndarray:
        diag = self.diagonal()
        if diag is not None:
            return np.diag(1.0 / diag)
        from scipy.linalg import cho_factor, cho_solve

        try:
            factor = cho_factor(self.matrix(), lower=True)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError("random-effect covariance is not positive definite") from exc
        inv = cho_solve(factor, np.eye(self.q))
        return 0.5 * (inv + inv.T)

    def logdet(self) -> float:
        diag = self.diagonal()
        if diag is not None:
            return float(np.sum(np.log(diag)))
        sign, val = np.linalg.slogdet(self.matrix())
        if sign <= 0:
            raise SingularSystemError("random-effect covariance is not positive definite")
        return float(val)

    def n_params(self) -> int:
        return int(self.values.size) if self.structure != "full" else self.q * (self.q + 1) // 2

    def param_vector(self) -> np.ndarray:
        """Flat parameter vector (lower triangle for the full structure)."""
        if self.structure == "full":
            return self.values[np.tril_indices(self.q)]
        return self.values.copy()

    def with_params(self, vec) -> "RandomEffectCov":
        vec = np.asarray(vec, dtype=float)
        if self.structure == "full":
            m = np.zeros((self.q, self.q))
            m[np.tril_indices(self.q)] = vec
            m = m + np.tril(m, -1).T
            return RandomEffectCov("full", m, self.q, ridge=self.ridge)
        return RandomEffectCov(self.structure, vec, self.q, self.block_sizes, self.ridge)

    def project(self, alpha: np.ndarray) -> "RandomEffectCov":
        """Structure-projected estimate from a random-effect vector.

        The rank-one estimate alpha alpha^T / q is never inverted directly:
        it is projected onto the structure (and ridged for ``full``).
        """
        alpha = np.asarray(alpha, dtype=float)
        if self.structure == "isotropic":
            v = max(float(alpha @ alpha) / self.q, VARIANCE_FLOOR)
            return RandomEffectCov.isotropic(v, self.q)
        if self.structure == "block_isotropic":
            bounds = np.cumsum((0,) + self.block_sizes)
            vs = [
                max(float(alpha[lo:hi] @ alpha[lo:hi]) / (hi - lo), VARIANCE_FLOOR)
                for lo, hi in zip(bounds[:-1], bounds[1:])
            ]
            return RandomEffectCov.block_isotropic(vs, self.block_sizes)
        outer = np.outer(alpha, alpha) / self.q
        ridge = max(FULL_RIDGE_FACTOR * np.trace(outer) / self.q, VARIANCE_FLOOR)
        return RandomEffectCov("full", outer, self.q, ridge=ridge)

    def to_dict(self) -> dict:
        return {
            "structure": self.structure,
            "values": self.values.tolist(),
            "q": self.q,
            "block_sizes": list(self.block_sizes),
            "ridge": self.ridge,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RandomEffectCov":
        return cls(d["structure"], np.asarray(d["values"]), int(d["q"]), tuple(d.get("block_sizes", ())), float(d.get("ridge", 0.0)))


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Fixed-effect spline coefficients, random effects and variance components."""

    beta: np.ndarray
    alpha: np.ndarray
    sigma2_eps: float
    sigma_alpha: RandomEffectCov
    penalty: PenaltySpec = field(default_factory=PenaltySpec)

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float, copy=True).reshape(-1)
        alpha = np.array(self.alpha, dtype=float, copy=True).reshape(-1)
        beta.setflags(write=False)
        alpha.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "sigma2_eps", float(self.sigma2_eps))
        if not self.sigma2_eps > 0:
            raise NonPositiveVarianceError(f"sigma2_eps must be > 0, got {self.sigma2_eps}")
        if alpha.shape[0] != self.sigma_alpha.q:
            raise DimensionMismatchError("alpha", self.sigma_alpha.q, alpha.shape[0])

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.beta, self.alpha])

    def check_dims(self, dims: ModelDims) -> None:
        if self.beta.shape[0] != dims.pq:
            raise DimensionMismatchError("beta", dims.pq, self.beta.shape[0])
        if self.alpha.shape[0] != dims.q:
            raise DimensionMismatchError("alpha", dims.q, self.alpha.shape[0])

    def with_theta(self, theta: np.ndarray) -> "ModelParams":
        pq = self.beta.shape[0]
        return ModelParams(theta[:pq], theta[pq:], self.sigma2_eps, self.sigma_alpha, self.penalty)

    @classmethod
    def zeros(cls, pq: int, sigma_alpha: RandomEffectCov, sigma2_eps: float = 1.0, penalty: PenaltySpec | None = None):
        return cls(np.zeros(pq), np.zeros(sigma_alpha.q), sigma2_eps, sigma_alpha, penalty or PenaltySpec())


# ---------------------------------------------------------------------------
# Index scaling and columnar ingestion
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class IndexScaler:
    """Per-margin affine map of raw index variables onto [0, 1]."""

    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def fit(cls, H: np.ndarray) -> "IndexScaler":
        H = np.atleast_2d(np.asarray(H, dtype=float))
        return cls(H.min(axis=0), H.max(axis=0))

    def transform(self, H: np.ndarray) -> np.ndarray:
        span = np.where(self.upper > self.lower, self.upper - self.lower, 1.0)
        return (np.asarray(H, dtype=float) - self.lower) / span


_COLUMN_RE = re.compile(r"^(x|h|z)(\d+)$")


def write_partition_text(part: Partition, path) -> None:
    """Write a partition as comma-separated columns y, x1..xp, h1..hM, z1..zq."""
    header = ["y"] + [f"x{j + 1}" for j in range(part.p)] + [f"h{j + 1}" for j in range(part.M)]
    header += [f"z{j + 1}" for j in range(part.q)]
    data = np.column_stack([part.y, part.X, part.H, part.Z]) if part.n else np.zeros((0, len(header)))
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in data:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_partition_text(path, partition_id: int = 0, scaler: IndexScaler | None = None) -> Partition:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise VCMMError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if not header or header[0] != "y":
        raise VCMMError(f"{path}: first column must be 'y'")
    groups: dict[str, list[int]] = {"x": [], "h": [], "z": []}
    for col, name in enumerate(header[1:], start=1):
        m = _COLUMN_RE.match(name)
        if m is None:
            raise VCMMError(f"{path}: unrecognised column {name!r}")
        groups[m.group(1)].append(col)
    try:
        data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    except ValueError as exc:
        raise VCMMError(f"{path}: malformed numeric data ({exc})") from exc
    H = data[:, groups["h"]]
    if scaler is not None:
        H = scaler.transform(H)
    return Partition(data[:, 0], data[:, groups["x"]], H, data[:, groups["z"]], partition_id)
