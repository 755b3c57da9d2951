"""Posterior blocks, blockwise and spectrally stabilized fits, the Gibbs
sampler, the one-step estimator and variance-component updates.

Every routine here works on aggregated :class:`SuffStats` only.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, lapack, solve_triangular

from .core import (
    ModelParams,
    NonPositiveVarianceError,
    RandomEffectCov,
    SingularSystemError,
    VCMMError,
    realize_penalty,
)
from .linalg import SpectralFactors, SvdMode, reconstruction_error, spectral_decompose, stabilized_solve
from .suffstats import SuffStats, aggregate

log = logging.getLogger(__name__)

METHODS = ("direct", "central", "ss", "svd", "onestep", "gibbs")
VARIANCE_UPDATES = ("fixed", "iterate")
VARIANCE_CLAMP = 1e-12
NEGATIVE_VARIANCE_TOL = 1e-10
# reciprocal condition number below which a Cholesky block solve is refused
RCOND_MIN = 1e-13
# with fixed variances a sweep moving no coordinate by more than this
# (relative to max(1, |theta|)) has stalled at rounding level
STALL_STEP = 1e-14


@dataclass(frozen=True)
class GibbsConfig:
    n_iter: int = 20000
    burn_in: int = 1000
    seed: int = 0


@dataclass(frozen=True)
class FitConfig:
    """Estimator settings.

    Block sweeps stop when the gradient infinity-norm reaches ``tol_grad``.
    With ``variance_update="iterate"`` they also stop once a sweep changes
    no coefficient by more than ``tol_param`` (absolute) and no variance
    parameter by more than ``tol_param`` (relative); with fixed variances
    only a rounding-level stall ends the run early.
    """

    method: str = "ss"
    max_iter: int = 50000
    tol_grad: float = 1e-8
    tol_param: float = 1e-10
    variance_update: str = "fixed"
    svd_mode: SvdMode = field(default_factory=SvdMode)
    pivot_node: int = 0
    gibbs: GibbsConfig = field(default_factory=GibbsConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise VCMMError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.variance_update not in VARIANCE_UPDATES:
            raise VCMMError(f"variance_update must be one of {VARIANCE_UPDATES}")
        if self.tol_grad <= 0 or self.tol_param <= 0:
            raise VCMMError("tolerances must be positive")
        if self.max_iter < 1:
            raise VCMMError("max_iter must be >= 1")


@dataclass(frozen=True, eq=False)
class PosteriorBlocks:
    mu_beta: np.ndarray
    mu_alpha: np.ndarray
    V_beta: np.ndarray
    V_alpha: np.ndarray
    V_beta_alpha: np.ndarray

    @property
    def mu(self) -> np.ndarray:
        return np.concatenate([self.mu_beta, self.mu_alpha])

    def precision(self) -> np.ndarray:
        return np.block([[self.V_beta, self.V_beta_alpha], [self.V_beta_alpha.T, self.V_alpha]])


@dataclass(eq=False)
class FitResult:
    theta: ModelParams
    iterations: int
    converged: bool
    objective_trace: np.ndarray
    gradient_norm: float
    method: str
    elapsed: float = 0.0
    last_step: float = float("nan")
    info_matrix: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def standard_errors(self) -> np.ndarray | None:
        if self.info_matrix is None:
            return None
        return np.sqrt(np.diag(np.linalg.inv(self.info_matrix)))

    def to_dict(self) -> dict:
        th = self.theta
        se = self.standard_errors()
        out = {
            "method": self.method,
            "converged": self.converged,
            "iterations": self.iterations,
            "gradient_norm": self.gradient_norm,
            "last_step": self.last_step,
            "elapsed_seconds": self.elapsed,
            "beta": th.beta.tolist(),
            "alpha": th.alpha.tolist(),
            "sigma2_eps": th.sigma2_eps,
            "sigma_alpha": th.sigma_alpha.to_dict(),
            "penalty": {"kind": th.penalty.kind, "lambda": th.penalty.lam},
            "objective_trace": self.objective_trace.tolist(),
        }
        if se is not None:
            out["standard_errors"] = {"beta": se[: th.beta.size].tolist(), "alpha": se[th.beta.size :].tolist()}
        out.update({k: v for k, v in self.extras.items() if _jsonable(v)})
        return out


def _jsonable(v) -> bool:
    return isinstance(v, (int, float, str, bool, list, dict, type(None)))


# ---------------------------------------------------------------------------
# Posterior characterization and curvature
# ---------------------------------------------------------------------------


def posterior_blocks(theta: ModelParams, agg: SuffStats) -> PosteriorBlocks:
    """Gaussian posterior of (beta, alpha) given fixed variance components."""
    theta.check_dims(agg.dims())
    s2 = theta.sigma2_eps
    P = realize_penalty(theta.penalty, agg.dims())
    Vb = agg.C / s2 + P
    Va = agg.H / s2 + theta.sigma_alpha.inverse()
    Vba = agg.B / s2
    prec = np.block([[Vb, Vba], [Vba.T, Va]])
    rhs = np.concatenate([agg.b, agg.d]) / s2
    try:
        factor = cho_factor(prec, lower=True)
    except np.linalg.LinAlgError:
        smallest = float(np.linalg.eigvalsh(prec)[0])
        raise SingularSystemError(f"joint precision is not positive definite (smallest eigenvalue {smallest:.3e})")
    mu = cho_solve(factor, rhs)
    return PosteriorBlocks(mu[: agg.pq], mu[agg.pq :], Vb, Va, Vba)


def fisher_info(agg: SuffStats, theta: ModelParams) -> np.ndarray:
    """Plug-in curvature [[C/s2 + P, B/s2], [B'/s2, H/s2 + Sigma^-1]] of the joint objective."""
    s2 = theta.sigma2_eps
    if not s2 > 0:
        raise NonPositiveVarianceError("sigma2_eps must be > 0")
    P = realize_penalty(theta.penalty, agg.dims())
    info = np.block(
        [[agg.C / s2 + P, agg.B / s2], [agg.B.T / s2, agg.H / s2 + theta.sigma_alpha.inverse()]]
    )
    return 0.5 * (info + info.T)


def update_variance(theta: ModelParams, agg: SuffStats) -> tuple[float, RandomEffectCov]:
    """Residual variance from the summaries and the structure-projected random-effect covariance."""
    if agg.n <= 0:
        raise VCMMError("variance update needs N > 0")
    s2 = agg.residual_ss(theta.beta, theta.alpha) / agg.n
    if s2 < -NEGATIVE_VARIANCE_TOL:
        raise NonPositiveVarianceError(f"negative residual variance {s2:.3e}: summaries are inconsistent")
    if s2 < VARIANCE_CLAMP:
        if s2 < 0:
            warnings.warn(f"residual variance {s2:.3e} clamped to {VARIANCE_CLAMP}", RuntimeWarning, stacklevel=2)
        s2 = VARIANCE_CLAMP
    cov = theta.sigma_alpha.project(theta.alpha) if theta.sigma_alpha.q else theta.sigma_alpha
    return s2, cov


# ---------------------------------------------------------------------------
# Block solvers
# ---------------------------------------------------------------------------


class _CholeskyBlock:
    def __init__(self, A: np.ndarray, name: str):
        self.n = A.shape[0]
        if self.n == 0:
            return
        try:
            self.factor = cho_factor(A, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            raise SingularSystemError(f"block system {name} is singular (Cholesky failed)") from None
        anorm = np.abs(A).sum(axis=0).max()
        rcond, info = lapack.dpocon(self.factor[0], anorm, uplo="L")
        if info != 0 or rcond < RCOND_MIN:
            raise SingularSystemError(f"block system {name} is numerically singular (rcond {rcond:.2e})")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return rhs if self.n == 0 else cho_solve(self.factor, rhs, check_finite=False)


class _SpectralBlock:
    def __init__(self, A: np.ndarray, name: str, mode: SvdMode):
        self.factors: SpectralFactors = spectral_decompose(A, mode)
        self.recon_error = reconstruction_error(A, self.factors) if A.size else 0.0
        if A.shape[0] and self.factors.rank == 0:
            raise SingularSystemError(f"block system {name} has no retained spectral component")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return stabilized_solve(self.factors, rhs)


class _PencilBlock:
    def __init__(self, V: np.ndarray, w: np.ndarray):
        self.V, self.w = V, w

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self.V @ (self.w * (self.V.T @ rhs))


class _Pencil:
    """Exact solves of (C + s P) x = r for any s >= 0 from one factorization.

    With C = L L' and L^-1 P L^-T = W diag(mu) W', V = L^-T W gives
    (C + s P)^-1 = V diag(1 / (1 + s mu)) V'.  Used only when C is safely
    positive definite; otherwise ``usable`` is False and the caller
    refactors C + s P directly.
    """

    RCOND_MIN = 1e-6

    def __init__(self, C: np.ndarray, P: np.ndarray):
        self.usable = False
        if C.shape[0] == 0:
            return
        try:
            L = np.linalg.cholesky(C)
        except np.linalg.LinAlgError:
            return
        rcond, info = lapack.dpocon(L, np.abs(C).sum(axis=0).max(), uplo="L")
        if info != 0 or rcond < self.RCOND_MIN:
            return
        Linv = solve_triangular(L, np.eye(C.shape[0]), lower=True)
        mu, W = np.linalg.eigh(Linv @ P @ Linv.T)
        self.mu = np.clip(mu, 0.0, None)
        self.V = Linv.T @ W
        self.usable = True

    def at(self, s: float) -> _PencilBlock:
        return _PencilBlock(self.V, 1.0 / (1.0 + s * self.mu))


class _State:
    """Variance-dependent quantities shared by a run of sweeps."""

    def __init__(self, agg: SuffStats, P: np.ndarray, s2: float, cov: RandomEffectCov, make_block: Callable, pencil=None):
        self.s2, self.cov = s2, cov
        self.Sinv = cov.inverse() if cov.q else np.zeros((0, 0))
        self.logdet = cov.logdet() if cov.q else 0.0
        self.G = pencil.at(s2) if pencil is not None else make_block(agg.C + s2 * P, "G")
        self.Haug = make_block(agg.H + s2 * self.Sinv, "H_aug")


def _objective(agg: SuffStats, beta, alpha, st: _State, P) -> float:
    val = agg.residual_ss(beta, alpha) / (2.0 * st.s2) + 0.5 * agg.n * np.log(st.s2)
    val += 0.5 * beta @ P @ beta + 0.5 * alpha @ st.Sinv @ alpha + 0.5 * st.logdet
    return float(val)


def _grad_norm(agg: SuffStats, beta, alpha, st: _State, P) -> float:
    score = agg.local_score(beta, alpha) / st.s2
    score[: agg.pq] += P @ beta
    score[agg.pq :] += st.Sinv @ alpha
    return float(np.max(np.abs(score))) if score.size else 0.0


def _sweeps(
    agg: SuffStats, init: ModelParams, cfg: FitConfig, make_block: Callable, method: str, use_pencil: bool = False
) -> FitResult:
    t0 = time.perf_counter()
    init.check_dims(agg.dims())
    P = realize_penalty(init.penalty, agg.dims())
    beta, alpha = init.beta.copy(), init.alpha.copy()
    iterate = cfg.variance_update == "iterate"
    pencil = None
    if use_pencil and iterate:
        # G changes only through s2, so factor the pencil (C, P) once
        pencil = _Pencil(agg.C, P)
        pencil = pencil if pencil.usable else None
    st = _State(agg, P, init.sigma2_eps, init.sigma_alpha, make_block, pencil)
    trace = [_objective(agg, beta, alpha, st, P)]
    converged, step, gnorm, it = False, float("inf"), float("inf"), 0
    for it in range(1, cfg.max_iter + 1):
        beta_new = st.G.solve(agg.b - agg.B @ alpha)
        alpha_new = st.Haug.solve(agg.d - agg.B.T @ beta_new)
        step = float(np.max(np.abs(np.concatenate([beta_new - beta, alpha_new - alpha])), initial=0.0))
        beta, alpha = beta_new, alpha_new
        if iterate:
            cur = ModelParams(beta, alpha, st.s2, st.cov, init.penalty)
            s2, cov = update_variance(cur, agg)
            old = np.concatenate([[st.s2], st.cov.param_vector()])
            new = np.concatenate([[s2], cov.param_vector()])
            step = max(step, float(np.max(np.abs(new - old) / np.maximum(np.abs(old), 1e-300))))
            st = _State(agg, P, s2, cov, make_block, pencil)
        trace.append(_objective(agg, beta, alpha, st, P))
        gnorm = _grad_norm(agg, beta, alpha, st, P)
        if iterate:
            small_step = step <= cfg.tol_param
        else:
            scale = max(1.0, float(np.max(np.abs(beta), initial=0.0)), float(np.max(np.abs(alpha), initial=0.0)))
            small_step = step <= STALL_STEP * scale
        if gnorm <= cfg.tol_grad or small_step:
            converged = True
            break
    theta = ModelParams(beta, alpha, st.s2, st.cov, init.penalty)
    result = FitResult(
        theta=theta,
        iterations=it,
        converged=converged,
        objective_trace=np.array(trace),
        gradient_norm=gnorm,
        method=method,
        elapsed=time.perf_counter() - t0,
        last_step=step,
        info_matrix=fisher_info(agg, theta),
    )
    if isinstance(st.G, _SpectralBlock):
        result.extras.update(
            recon_error_G=st.G.recon_error,
            recon_error_H_aug=st.Haug.recon_error,
            rank_G=st.G.factors.rank,
            rank_H_aug=st.Haug.factors.rank,
        )
    if not converged:
        log.warning("%s fit did not converge in %d sweeps (last step %.2e)", method, it, step)
    return result


def block_fit(agg: SuffStats, init: ModelParams, cfg: FitConfig | None = None) -> FitResult:
    """Alternating conditional-mean updates of beta and alpha from aggregated summaries.

    beta <- (C + s2 P)^-1 (b - B alpha), alpha <- (H + s2 Sigma^-1)^-1 (d - B' beta),
    with the variance components refreshed after each sweep when
    ``cfg.variance_update == "iterate"``.
    """
    cfg = cfg or FitConfig()
    return _sweeps(agg, init, cfg, lambda A, name: _CholeskyBlock(A, name), "ss", use_pencil=True)


def svd_fit(agg: SuffStats, init: ModelParams, cfg: FitConfig | None = None) -> FitResult:
    """:func:`block_fit` with every block solve done through spectral factors of G and H_aug.

    The factors are computed once per variance refresh and reused across sweeps.
    """
    cfg = cfg or FitConfig(method="svd")
    return _sweeps(agg, init, cfg, lambda A, name: _SpectralBlock(A, name, cfg.svd_mode), "svd")


# ---------------------------------------------------------------------------
# One-step estimator
# ---------------------------------------------------------------------------


def pivot_hessian(pivot: SuffStats, theta: ModelParams, scale: float = 1.0) -> np.ndarray:
    """Pivot-node curvature with the data blocks scaled by ``scale`` (N / n_pivot)."""
    s2 = theta.sigma2_eps
    P = realize_penalty(theta.penalty, pivot.dims())
    Sinv = theta.sigma_alpha.inverse() if theta.sigma_alpha.q else np.zeros((0, 0))
    f = scale / s2
    K1 = np.block([[f * pivot.C + P, f * pivot.B], [f * pivot.B.T, f * pivot.H + Sinv]])
    return 0.5 * (K1 + K1.T)


def onestep_fit(local_stats: Sequence[SuffStats], init: ModelParams, cfg: FitConfig | None = None) -> FitResult:
    """One Newton correction from a pivot-node pilot using aggregated scores.

    1. pilot theta0 from a converged block fit on the pivot node alone;
    2. penalty-free node scores at theta0 summed, prior terms added once;
    3. pivot Hessian K1 (data blocks scaled by N / n_pivot);
    4. theta1 = theta0 - K1^-1 g(theta0);
    5. residual variance from the nodes' residual sums at theta1;
    6. random-effect covariance projected from alpha1.
    """
    cfg = cfg or FitConfig(method="onestep")
    t0 = time.perf_counter()
    local_stats = list(local_stats)
    if not 0 <= cfg.pivot_node < len(local_stats):
        raise VCMMError(f"pivot node {cfg.pivot_node} does not exist among {len(local_stats)} nodes")
    pivot = local_stats[cfg.pivot_node]
    if pivot.n == 0:
        raise VCMMError(f"pivot node {cfg.pivot_node} is empty")
    pilot_cfg = replace(cfg, method="ss", tol_grad=min(cfg.tol_grad, 1e-8))
    pilot = block_fit(pivot, init, pilot_cfg)
    theta0 = pilot.theta
    score_sum = np.sum([s.local_score(theta0.beta, theta0.alpha) for s in local_stats], axis=0)
    N = sum(s.n for s in local_stats)
    K1 = pivot_hessian(pivot, theta0, scale=N / pivot.n)
    theta1 = _onestep_step(theta0, score_sum, K1, pivot)
    rss = float(np.sum([s.residual_ss(theta1.beta, theta1.alpha) for s in local_stats]))
    result = finish_onestep(theta0, theta1, rss, N, cfg, pilot)
    result.elapsed = time.perf_counter() - t0
    return result


def _onestep_step(theta0: ModelParams, score_sum: np.ndarray, K1: np.ndarray, ref: SuffStats) -> ModelParams:
    pq = theta0.beta.size
    P = realize_penalty(theta0.penalty, ref.dims())
    Sinv = theta0.sigma_alpha.inverse() if theta0.sigma_alpha.q else np.zeros((0, 0))
    g = score_sum / theta0.sigma2_eps
    g[:pq] += P @ theta0.beta
    g[pq:] += Sinv @ theta0.alpha
    factors = spectral_decompose(K1, "full")
    if factors.rank < K1.shape[0]:
        raise SingularSystemError("pivot Hessian K1 is singular")
    return theta0.with_theta(theta0.theta - stabilized_solve(factors, g))


def finish_onestep(
    theta0: ModelParams, theta1: ModelParams, rss: float, N: int, cfg: FitConfig, pilot: FitResult
) -> FitResult:
    s2, cov = theta1.sigma2_eps, theta1.sigma_alpha
    if cfg.variance_update == "iterate":
        s2 = rss / N
        if s2 < -NEGATIVE_VARIANCE_TOL:
            raise NonPositiveVarianceError(f"negative residual variance {s2:.3e}")
        s2 = max(s2, VARIANCE_CLAMP)
        cov = cov.project(theta1.alpha) if cov.q else cov
    theta = ModelParams(theta1.beta, theta1.alpha, s2, cov, theta1.penalty)
    return FitResult(
        theta=theta,
        iterations=pilot.iterations + 1,
        converged=pilot.converged,
        objective_trace=pilot.objective_trace,
        gradient_norm=pilot.gradient_norm,
        method="onestep",
        last_step=float(np.max(np.abs(theta1.theta - theta0.theta), initial=0.0)),
        extras={"pilot_iterations": pilot.iterations, "pilot_theta": theta0.theta.tolist()},
    )


# ---------------------------------------------------------------------------
# Gibbs sampler
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class GibbsResult:
    draws: np.ndarray
    seed: int

    @property
    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)

    def running_means(self) -> np.ndarray:
        return np.cumsum(self.draws, axis=0) / np.arange(1, self.draws.shape[0] + 1)[:, None]

    def mc_standard_error(self, n_batches: int = 50) -> np.ndarray:
        """Batch-means Monte Carlo standard error of each coordinate's ergodic mean."""
        T = self.draws.shape[0]
        size = T // n_batches
        if size < 1:
            raise ValueError("too few draws for batch means")
        means = self.draws[: size * n_batches].reshape(n_batches, size, -1).mean(axis=1)
        return means.std(axis=0, ddof=1) / np.sqrt(n_batches)


def _chol_lower(V: np.ndarray, name: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        raise SingularSystemError(f"conditional precision {name} is not positive definite") from None


def gibbs_sample(theta_var: ModelParams, agg: SuffStats, cfg: FitConfig | None = None) -> GibbsResult:
    """Alternate exact draws from beta | alpha, y and alpha | beta, y.

    Variance components and penalty come from ``theta_var`` and stay
    fixed; the chain starts at ``theta_var``'s (beta, alpha).
    """
    cfg = cfg or FitConfig(method="gibbs")
    gc = cfg.gibbs
    theta_var.check_dims(agg.dims())
    s2 = theta_var.sigma2_eps
    P = realize_penalty(theta_var.penalty, agg.dims())
    Vb = agg.C / s2 + P
    Va = agg.H / s2 + (theta_var.sigma_alpha.inverse() if agg.q else np.zeros((0, 0)))
    Lb = _chol_lower(Vb, "V_beta")
    La = _chol_lower(Va, "V_alpha") if agg.q else np.zeros((0, 0))
    fb, fa = (Lb, True), (La, True)  # lower Cholesky factors for cho_solve
    rng = np.random.default_rng(gc.seed)
    beta, alpha = theta_var.beta.copy(), theta_var.alpha.copy()
    kept = np.empty((max(gc.n_iter, 0), agg.pq + agg.q))
    for t in range(gc.burn_in + gc.n_iter):
        mean_b = cho_solve(fb, (agg.b - agg.B @ alpha) / s2)
        # L' x = z gives x ~ N(0, V^-1) for V = L L'
        beta = mean_b + _back(Lb, rng.standard_normal(agg.pq))
        if agg.q:
            mean_a = cho_solve(fa, (agg.d - agg.B.T @ beta) / s2)
            alpha = mean_a + _back(La, rng.standard_normal(agg.q))
        if t >= gc.burn_in:
            kept[t - gc.burn_in, : agg.pq] = beta
            kept[t - gc.burn_in, agg.pq :] = alpha
    return GibbsResult(kept, gc.seed)


def _back(L: np.ndarray, z: np.ndarray) -> np.ndarray:
    return solve_triangular(L, z, lower=True, trans="T")


def gibbs_fit(agg: SuffStats, init: ModelParams, cfg: FitConfig) -> FitResult:
    t0 = time.perf_counter()
    chain = gibbs_sample(init, agg, cfg)
    theta = init.with_theta(chain.mean)
    return FitResult(
        theta=theta,
        iterations=cfg.gibbs.burn_in + cfg.gibbs.n_iter,
        converged=True,
        objective_trace=np.zeros(0),
        gradient_norm=float("nan"),
        method="gibbs",
        elapsed=time.perf_counter() - t0,
        info_matrix=fisher_info(agg, theta),
        extras={"mc_standard_error": chain.mc_standard_error().tolist()},
    )


def fit_summaries(local_stats: Sequence[SuffStats], init: ModelParams, cfg: FitConfig) -> FitResult:
    """Dispatch a summary-based method (everything except ``direct``)."""
    if cfg.method == "onestep":
        return onestep_fit(local_stats, init, cfg)
    agg = aggregate(local_stats)
    if cfg.method == "ss":
        return block_fit(agg, init, cfg)
    if cfg.method == "svd":
        return svd_fit(agg, init, cfg)
    if cfg.method == "gibbs":
        return gibbs_fit(agg, init, cfg)
    raise VCMMError(f"method {cfg.method!r} needs raw partitions")
