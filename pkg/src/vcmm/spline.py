"""Univariate and tensor-product B-spline bases and the expanded design."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from .core import DimensionMismatchError, IndexDomainError, VCMMError


@dataclass(frozen=True, eq=False)
class UnivariateBasis:
    """Clamped B-spline basis on [0, 1].

    The boundary knots 0 and 1 are repeated ``degree + 1`` times, so the
    basis has ``len(interior_knots) + degree + 1`` functions.
    """

    degree: int = 3
    interior_knots: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.degree < 0:
            raise VCMMError("spline degree must be >= 0")
        knots = np.array(self.interior_knots, dtype=float).reshape(-1)
        if knots.size and (np.any(np.diff(knots) < 0) or knots[0] <= 0.0 or knots[-1] >= 1.0):
            raise VCMMError("interior knots must be sorted and lie strictly inside (0, 1)")
        knots.setflags(write=False)
        object.__setattr__(self, "degree", int(self.degree))
        object.__setattr__(self, "interior_knots", knots)
        full = np.concatenate([np.zeros(self.degree + 1), knots, np.ones(self.degree + 1)])
        full.setflags(write=False)
        object.__setattr__(self, "knots", full)

    @classmethod
    def uniform(cls, n_interior: int, degree: int = 3) -> "UnivariateBasis":
        return cls(degree, np.linspace(0.0, 1.0, n_interior + 2)[1:-1])

    @classmethod
    def with_size(cls, n_basis: int, degree: int = 3) -> "UnivariateBasis":
        """Equally spaced interior knots giving exactly ``n_basis`` functions."""
        n_interior = n_basis - degree - 1
        if n_interior < 0:
            raise VCMMError(f"{n_basis} basis functions need degree <= {n_basis - 1}")
        return cls.uniform(n_interior, degree)

    @classmethod
    def quantile(cls, x, n_interior: int, degree: int = 3) -> "UnivariateBasis":
        """Interior knots at empirical quantiles of ``x`` (for skewed index variables)."""
        probs = np.linspace(0.0, 1.0, n_interior + 2)[1:-1]
        knots = np.quantile(np.asarray(x, dtype=float), probs)
        return cls(degree, np.clip(knots, 1e-9, 1 - 1e-9))

    @property
    def size(self) -> int:
        return self.interior_knots.size + self.degree + 1

    def evaluate(self, x) -> np.ndarray:
        """Basis matrix of shape (len(x), size) via the Cox-de Boor recursion."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.size and (np.any(~np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0):
            bad = x[~((x >= 0.0) & (x <= 1.0))][0]
            raise IndexDomainError(f"spline argument {bad!r} outside [0, 1]")
        p, t, nb = self.degree, self.knots, self.size
        # knot span t[i] <= x < t[i+1]; x == 1 falls into the last non-empty span
        span = np.clip(np.searchsorted(t, x, side="right") - 1, p, nb - 1)
        n = x.shape[0]
        vals = np.zeros((n, p + 1))
        vals[:, 0] = 1.0
        left = np.zeros((n, p + 1))
        right = np.zeros((n, p + 1))
        for j in range(1, p + 1):
            left[:, j] = x - t[span + 1 - j]
            right[:, j] = t[span + j] - x
            saved = np.zeros(n)
            for r in range(j):
                denom = right[:, r + 1] + left[:, j - r]
                temp = vals[:, r] / denom
                vals[:, r] = saved + right[:, r + 1] * temp
                saved = left[:, j - r] * temp
            vals[:, j] = saved
        out = np.zeros((n, nb))
        cols = span[:, None] - p + np.arange(p + 1)[None, :]
        np.put_along_axis(out, cols, vals, axis=1)
        return out

    def to_dict(self) -> dict:
        return {"degree": self.degree, "interior_knots": self.interior_knots.tolist()}


def eval_univariate(basis: UnivariateBasis, x: float) -> np.ndarray:
    return basis.evaluate(np.array([x]))[0]


@dataclass(frozen=True, eq=False)
class TensorSplineBasis:
    """Tensor product of univariate bases; the last margin varies fastest.

    ``transform`` (optional, Q x Q) maps the raw tensor evaluations onto an
    orthogonalized basis; coefficients in that basis map back through
    :meth:`raw_coefficients`.
    """

    margins: tuple
    transform: np.ndarray | None = None

    def __post_init__(self):
        margins = tuple(self.margins)
        if not margins:
            raise VCMMError("a tensor basis needs at least one margin")
        object.__setattr__(self, "margins", margins)
        if self.transform is not None:
            T = np.array(self.transform, dtype=float)
            if T.shape != (self.Q, self.Q):
                raise DimensionMismatchError("transform", (self.Q, self.Q), T.shape)
            T.setflags(write=False)
            object.__setattr__(self, "transform", T)

    @classmethod
    def cubic(cls, *sizes: int) -> "TensorSplineBasis":
        return cls(tuple(UnivariateBasis.with_size(s, 3) for s in sizes))

    @property
    def M(self) -> int:
        return len(self.margins)

    @property
    def Q(self) -> int:
        return int(np.prod([m.size for m in self.margins]))

    def raw_evaluate(self, H) -> np.ndarray:
        H = np.asarray(H, dtype=float)
        if H.ndim == 1:
            H = H.reshape(-1, self.M) if self.M > 1 else H.reshape(-1, 1)
        if H.shape[1] != self.M:
            raise DimensionMismatchError("H", f"{self.M} columns", f"{H.shape[1]} columns")
        mats = [m.evaluate(H[:, j]) for j, m in enumerate(self.margins)]
        n = H.shape[0]
        return reduce(lambda a, b: np.einsum("ni,nj->nij", a, b).reshape(n, -1), mats)

    def evaluate(self, H) -> np.ndarray:
        """Basis matrix of shape (n, Q) for index rows ``H`` (n x M)."""
        Phi = self.raw_evaluate(H)
        return Phi if self.transform is None else Phi @ self.transform

    def raw_coefficients(self, gamma: np.ndarray) -> np.ndarray:
        """Map coefficients of this basis back to raw B-spline coefficients."""
        return gamma if self.transform is None else self.transform @ gamma

    def to_dict(self) -> dict:
        d = {"margins": [m.to_dict() for m in self.margins]}
        if self.transform is not None:
            d["transform"] = self.transform.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TensorSplineBasis":
        margins = []
        for m in d["margins"]:
            degree = int(m.get("degree", 3))
            if "interior_knots" in m:
                margins.append(UnivariateBasis(degree, np.asarray(m["interior_knots"], dtype=float)))
            elif "n_interior" in m:
                margins.append(UnivariateBasis.uniform(int(m["n_interior"]), degree))
            elif "n_basis" in m:
                margins.append(UnivariateBasis.with_size(int(m["n_basis"]), degree))
            else:
                raise VCMMError("margin spec needs 'interior_knots', 'n_interior' or 'n_basis'")
        return cls(tuple(margins), d.get("transform"))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "TensorSplineBasis":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def eval_tensor(basis: TensorSplineBasis, h) -> np.ndarray:
    return basis.evaluate(np.asarray(h, dtype=float).reshape(1, -1))[0]


def orthogonalize(basis: TensorSplineBasis, H_sample) -> TensorSplineBasis:
    """Gram-Schmidt the evaluated basis columns on a reference sample.

    The returned basis has columns orthonormal (scaled by sqrt(n)) on the
    sample; its ``transform`` maps coefficients back to the raw basis.
    """
    Phi = basis.raw_evaluate(H_sample)
    _, R = np.linalg.qr(Phi)
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    R = R * signs[:, None]
    T = np.linalg.solve(R, np.eye(R.shape[0])) * np.sqrt(Phi.shape[0])
    return TensorSplineBasis(basis.margins, T)


def expand_design(X, H, basis: TensorSplineBasis) -> np.ndarray:
    """Row r is [Phi(h_r), x_1r Phi(h_r), ..., x_pr Phi(h_r)]."""
    H = np.asarray(H, dtype=float)
    X = np.asarray(X, dtype=float)
    n = H.shape[0]
    if X.ndim == 1:
        X = X.reshape(n, -1) if X.size else np.zeros((n, 0))
    if X.shape[0] != n:
        raise DimensionMismatchError("X", f"{n} rows", f"{X.shape[0]} rows")
    Phi = basis.evaluate(H)
    if X.shape[1] == 0:
        return Phi
    mult = np.column_stack([np.ones(n), X])
    return (mult[:, :, None] * Phi[:, None, :]).reshape(n, -1)
