"""FIR regression, regularized least squares, empirical-Bayes tuning."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.linalg
import scipy.linalg.lapack
import scipy.optimize
import scipy.special

from .kernels import (FAMILIES, NCSI_FAMILIES, KernelSpec, assemble_blocks, assemble_factor,
                      blocks_vector, blocks_vjp, canonical_family, gram, grid_distances,
                      separable_blocks, ncsi_parts, ncsi_parts_vjp, optimizer_box,
                      primitive_vector, to_fo)
from .lti import NoncausalFir

logger = logging.getLogger(__name__)

FD_STEP = 1e-6
FTOL = 1e-8
MAX_ITER = 500
Z_LIMIT = 30.0
JITTER = 1e-10


class InsufficientDataError(ValueError):
    """Not enough samples for the requested FIR window."""


class EstimationError(RuntimeError):
    """Raised when no hyper-parameter start could be evaluated."""


@dataclass(frozen=True)
class RegressionProblem:
    """Linear regression ``Y = Psi theta + V`` for a two-sided FIR window.

    Attributes:
        Y: Outputs ``y(n_c+1), ..., y(N-n_a)`` (length ``m``).
        Psi: ``(m, n)`` regressor; row ``r`` is ``u(t+n_a), ..., u(t-n_c)``
            for ``t = n_c + 1 + r``.
        n_a: Anti-causal order.
        n_c: Causal order.
        N: Number of samples.
        u: Raw input record, kept so narrower windows can be rebuilt.
        y: Raw output record.
    """

    Y: np.ndarray
    Psi: np.ndarray
    n_a: int
    n_c: int
    N: int
    u: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None

    @property
    def m(self) -> int:
        return self.Y.size

    @property
    def n(self) -> int:
        return self.n_a + self.n_c + 1

    @property
    def grid(self) -> np.ndarray:
        return np.arange(-self.n_a, self.n_c + 1)


def build_regression(u, y, n_a: int, n_c: int) -> RegressionProblem:
    """Stack the FIR regression for lags ``-n_a..n_c``."""
    u = np.asarray(u, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if u.size != y.size:
        raise ValueError(f"u has {u.size} samples, y has {y.size}")
    N = u.size
    if N <= n_a + n_c:
        raise InsufficientDataError(f"insufficient data: N={N} <= n_a+n_c={n_a + n_c}")
    n = n_a + n_c + 1
    Psi = np.ascontiguousarray(np.lib.stride_tricks.sliding_window_view(u, n)[:, ::-1])
    Y = y[n_c:N - n_a].copy()
    return RegressionProblem(Y, Psi, n_a, n_c, N, u, y)


def _least_squares_residual(Psi, Y) -> float:
    coef, *_ = np.linalg.lstsq(Psi, Y, rcond=None)
    r = Y - Psi @ coef
    return float(r @ r)


def reduced_orders(prob: RegressionProblem):
    """Symmetrically narrowed orders with ``n' <= floor(m'/2)``."""
    n_a, n_c = prob.n_a, prob.n_c
    while True:
        m = prob.N - n_a - n_c
        if n_a + n_c + 1 <= m // 2:
            return n_a, n_c
        if n_a == 0 and n_c == 0:
            raise InsufficientDataError("no window satisfies n' <= m'/2")
        n_a, n_c = max(n_a - 1, 0), max(n_c - 1, 0)


def estimate_noise_variance(prob: RegressionProblem) -> float:
    """Residual variance of the least-squares FIR fit.

    When ``m < 2 n`` the window is narrowed symmetrically first (see
    :func:`reduced_orders`) so the least-squares fit does not interpolate.
    """
    if prob.m >= 2 * prob.n:
        return _least_squares_residual(prob.Psi, prob.Y) / (prob.m - prob.n)
    n_a, n_c = reduced_orders(prob)
    if prob.u is not None:
        red = build_regression(prob.u, prob.y, n_a, n_c)
        Psi, Y = red.Psi, red.Y
    else:
        cols = np.arange(prob.n_a - n_a, prob.n_a + n_c + 1)
        Psi, Y = prob.Psi[:, cols], prob.Y
    m, n = Y.size, Psi.shape[1]
    if m - n <= 0:
        raise InsufficientDataError("reduced window leaves no degrees of freedom")
    logger.debug("noise variance from reduced window n_a=%d n_c=%d", n_a, n_c)
    return _least_squares_residual(Psi, Y) / (m - n)


def _chol(S: np.ndarray):
    return scipy.linalg.cho_factor(S, lower=True, check_finite=False)


def _inverse_from_factor(cf) -> np.ndarray:
    """Full symmetric inverse from a Cholesky-type factor ``(L, lower)``."""
    factor, lower = cf
    inv, info = scipy.linalg.lapack.dpotri(factor, lower=int(lower))
    if info != 0:
        raise np.linalg.LinAlgError("inverse from Cholesky factor failed")
    tri = np.tril(inv) if lower else np.triu(inv)
    return tri + tri.T - np.diag(np.diag(tri))


def _kernel_matrix(spec: KernelSpec, prob: RegressionProblem) -> np.ndarray:
    return gram(spec, prob.grid)


def rls(prob: RegressionProblem, spec: KernelSpec, sigma2: float) -> NoncausalFir:
    """Regularized estimate ``K Psi^T (Psi K Psi^T + sigma2 I)^-1 Y``."""
    K = _kernel_matrix(spec, prob)
    return NoncausalFir(_rls_theta(prob, K, sigma2), prob.n_a, prob.n_c)


def _rls_theta(prob: RegressionProblem, K: np.ndarray, sigma2: float) -> np.ndarray:
    red = _Reduced.from_problem(prob)
    A, c = red.A, red.c
    for attempt in range(2):
        S = A @ K @ A.T
        S[np.diag_indices_from(S)] += sigma2
        try:
            cf = _chol(S)
            return K @ (A.T @ scipy.linalg.cho_solve(cf, c, check_finite=False))
        except np.linalg.LinAlgError:
            K = K + JITTER * max(np.trace(K), 1e-300) / K.shape[0] * np.eye(K.shape[0])
    raise np.linalg.LinAlgError("regularized system not positive definite after jitter")


def rls_primal(prob: RegressionProblem, spec: KernelSpec, sigma2: float) -> np.ndarray:
    """Normal-equation form ``(Psi^T Psi + sigma2 K^-1)^-1 Psi^T Y`` (needs PD ``K``)."""
    K = _kernel_matrix(spec, prob)
    Kinv = np.linalg.inv(K)
    return np.linalg.solve(prob.Psi.T @ prob.Psi + sigma2 * Kinv, prob.Psi.T @ prob.Y)


def eb_objective(spec: KernelSpec, prob: RegressionProblem, sigma2: float) -> float:
    """``Y^T S^-1 Y + logdet S`` with ``S = Psi K Psi^T + sigma2 I_m`` (output-space form)."""
    K = _kernel_matrix(spec, prob)
    S = prob.Psi @ K @ prob.Psi.T
    S[np.diag_indices_from(S)] += sigma2
    try:
        L = scipy.linalg.cholesky(S, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("EB matrix not positive definite") from exc
    a = scipy.linalg.solve_triangular(L, prob.Y, lower=True, check_finite=False)
    return float(a @ a + 2.0 * np.sum(np.log(np.diag(L))))


@dataclass(frozen=True)
class _Reduced:
    """Data compressed to parameter space when ``m > n``.

    ``A`` replaces ``Psi`` and ``c`` replaces ``Y``; ``resid`` and ``extra``
    account for the orthogonal complement of the regressor columns.
    """

    A: np.ndarray
    c: np.ndarray
    resid: float
    extra: int

    @classmethod
    def from_problem(cls, prob: RegressionProblem) -> "_Reduced":
        if prob.m > prob.n:
            Q, R = np.linalg.qr(prob.Psi, mode="reduced")
            c = Q.T @ prob.Y
            r = prob.Y - Q @ c
            return cls(R, c, float(r @ r), prob.m - prob.n)
        return cls(prob.Psi, prob.Y.copy(), 0.0, 0)


# --- hyper-parameter transforms ------------------------------------------

_LOG_KINDS = {"scale_pos", "spread"}


def _sigmoid(z):
    return scipy.special.expit(z)


def to_box(z: np.ndarray, family: str) -> np.ndarray:
    """Map unconstrained coordinates into the optimizer box."""
    box = optimizer_box(family)
    kinds = FAMILIES[family].kinds
    x = np.empty(len(kinds))
    for i, kind in enumerate(kinds):
        lo, hi = box[i]
        p = _sigmoid(z[i])
        if kind in _LOG_KINDS:
            x[i] = math.exp(math.log(lo) + (math.log(hi) - math.log(lo)) * p)
        else:
            x[i] = lo + (hi - lo) * p
        x[i] = min(max(x[i], lo), hi)
    return x


def from_box(x: np.ndarray, family: str) -> np.ndarray:
    """Inverse of :func:`to_box`."""
    box = optimizer_box(family)
    kinds = FAMILIES[family].kinds
    z = np.empty(len(kinds))
    for i, kind in enumerate(kinds):
        lo, hi = box[i]
        if kind in _LOG_KINDS:
            p = (math.log(x[i]) - math.log(lo)) / (math.log(hi) - math.log(lo))
        else:
            p = (x[i] - lo) / (hi - lo)
        p = min(max(p, 1e-300), 1 - 1e-16)
        z[i] = math.log(p) - math.log1p(-p)
    return np.clip(z, -Z_LIMIT, Z_LIMIT)


class EBObjective:
    """Empirical-Bayes objective on a fixed regression problem.

    Uses the parameter-space form ``resid/s2 + c^T S^-1 c + (m-n) log s2 +
    logdet S`` with ``S = A K A^T + s2 I`` when ``m > n`` (``A`` is the
    triangular QR factor of ``Psi``); otherwise the output-space form.

    The gradient contracts the exact derivative of the objective with
    respect to the kernel (or its factor) with central finite differences of
    the cheap hyper-parameter-to-kernel map.
    """

    def __init__(self, family: str, prob: RegressionProblem, sigma2: float, g0=None):
        self.family = canonical_family(family)
        self.prob = prob
        self.sigma2 = float(sigma2)
        self.g0 = g0
        self.red = _Reduced.from_problem(prob)
        self.const = self.red.resid / self.sigma2 + self.red.extra * math.log(self.sigma2)
        self.factored = self.family in NCSI_FAMILIES
        self._dist = grid_distances(prob.grid)
        if self.factored:
            ii, jj = np.indices((prob.n, prob.n))
            self._lag_index = (ii - jj + prob.n - 1).ravel()
        self.n_evals = 0

    def spec(self, eta) -> KernelSpec:
        return KernelSpec(self.family, eta, g0=self.g0)

    def _block_vector(self, z) -> np.ndarray:
        return blocks_vector(separable_blocks(self.spec(to_box(z, self.family)), self.prob.grid))

    def _primitives(self, z) -> np.ndarray:
        return primitive_vector(*to_fo(self.spec(to_box(z, self.family))))

    def _parts(self, eta):
        nom, unc = to_fo(self.spec(eta))
        return ncsi_parts(nom, unc, -self.prob.n_a, self.prob.n_c)

    def _inner(self, eta):
        """Objective plus the factorization pieces reused by the gradient."""
        A = self.red.A
        if self.factored:
            lags, th, tl, w = self._parts(eta)
            F = A @ assemble_factor(lags, th, tl)
            S = (F * w) @ F.T
        else:
            K = assemble_blocks(separable_blocks(self.spec(eta), self.prob.grid), self._dist)
            F, w = None, None
            S = A @ K @ A.T
        S = 0.5 * (S + S.T)
        S[np.diag_indices_from(S)] += self.sigma2
        try:
            cf = _chol(S)
        except np.linalg.LinAlgError:
            # rounding swamped sigma2; factor [B^T; sigma I] with B B^T = A K A^T instead
            if self.factored:
                B = F * np.sqrt(np.maximum(w, 0.0))
            else:
                lam, V = np.linalg.eigh(0.5 * (K + K.T))
                B = A @ (V * np.sqrt(np.maximum(lam, 0.0)))
            stacked = np.vstack([B.T, math.sqrt(self.sigma2) * np.eye(B.shape[0])])
            R = scipy.linalg.qr(stacked, mode="r", check_finite=False)[0][:B.shape[0]]
            cf = (R, False)
        alpha = scipy.linalg.cho_solve(cf, self.red.c, check_finite=False)
        logdet = 2.0 * float(np.sum(np.log(np.abs(np.diag(cf[0])))))
        value = self.const + float(self.red.c @ alpha) + logdet
        self.n_evals += 1
        return value, cf, alpha, F, w

    def value(self, eta) -> float:
        return self._inner(np.asarray(eta, dtype=float))[0]

    def value_and_grad_z(self, z: np.ndarray):
        """Objective and gradient in unconstrained coordinates."""
        eta = to_box(z, self.family)
        value, cf, alpha, F, w = self._inner(eta)
        Sinv = _inverse_from_factor(cf)
        A = self.red.A
        dim = z.size
        grad = np.zeros(dim)
        h = FD_STEP
        if self.factored:
            # M = S^-1 - alpha alpha^T is the derivative of the objective w.r.t. S
            MF = Sinv @ F - np.outer(alpha, alpha @ F)
            dJ_dF = 2.0 * (A.T @ (MF * w))            # derivative w.r.t. the factor
            dJ_dw = np.einsum("ij,ij->j", F, MF)
            n = self.prob.n
            dJ_dlags = np.bincount(self._lag_index, dJ_dF[:, :n].ravel(), minlength=2 * n - 1)
            nom, unc = to_fo(self.spec(eta))
            d_prim = ncsi_parts_vjp(nom, unc, -self.prob.n_a, self.prob.n_c,
                                    dJ_dlags, dJ_dF[:, n], dJ_dF[:, n + 1], dJ_dw)
            for i in range(dim):
                zp, zm = z.copy(), z.copy()
                zp[i] += h
                zm[i] -= h
                grad[i] = d_prim @ (self._primitives(zp) - self._primitives(zm)) / (2 * h)
        else:
            At_alpha = A.T @ alpha
            dJ_dK = A.T @ (Sinv @ A) - np.outer(At_alpha, At_alpha)
            d_blocks = blocks_vjp(separable_blocks(self.spec(eta), self.prob.grid), dJ_dK, self._dist)
            for i in range(dim):
                zp, zm = z.copy(), z.copy()
                zp[i] += h
                zm[i] -= h
                grad[i] = d_blocks @ (self._block_vector(zp) - self._block_vector(zm)) / (2 * h)
        return value, grad


@dataclass
class LocalRun:
    start_index: int
    start_eta: np.ndarray
    start_objective: float
    final_eta: np.ndarray
    final_objective: float
    iterations: int
    trace: List[float] = field(default_factory=list)
    failed: bool = False


@dataclass
class TuningResult:
    spec: KernelSpec
    objective: float
    runs: List[LocalRun]

    @property
    def n_restarts(self) -> int:
        return len(self.runs)


def _local_run(obj: EBObjective, idx: int, eta0: np.ndarray, keep_trace: bool) -> LocalRun:
    fam = obj.family
    z0 = from_box(eta0, fam)
    eta0 = to_box(z0, fam)
    try:
        f0 = obj.value(eta0)
    except (np.linalg.LinAlgError, ValueError, FloatingPointError):
        return LocalRun(idx, eta0, math.inf, eta0, math.inf, 0, failed=True)
    trace = [f0]
    best = {"f": f0, "z": z0}

    def fun(z):
        try:
            f, g = obj.value_and_grad_z(z)
        except (np.linalg.LinAlgError, ValueError, FloatingPointError):
            return math.inf, np.zeros_like(z)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            return math.inf, np.zeros_like(z)
        if f < best["f"]:
            best["f"], best["z"] = f, z.copy()
        return f, g

    def callback(zk):
        if keep_trace:
            trace.append(obj.value(to_box(zk, fam)))

    with np.errstate(all="ignore"):
        res = scipy.optimize.minimize(
            fun, z0, jac=True, method="L-BFGS-B", callback=callback,
            bounds=[(-Z_LIMIT, Z_LIMIT)] * z0.size,
            options={"maxiter": MAX_ITER, "ftol": FTOL, "gtol": 1e-12, "maxls": 30})
    z_final = res.x if np.isfinite(res.fun) and res.fun <= best["f"] else best["z"]
    eta_final = to_box(z_final, fam)
    f_final = obj.value(eta_final)
    if not f_final <= f0:
        eta_final, f_final = eta0, f0
    return LocalRun(idx, eta0, f0, eta_final, f_final, int(res.nit), trace)


def multistart(family: str, prob: RegressionProblem, sigma2: float, rng_seed,
               g0=None, n_starts: Optional[int] = None, keep_trace: bool = False) -> TuningResult:
    """Minimize the EB objective from ``10 * dim(eta)`` uniform starts in the box.

    Args:
        family: Kernel family.
        prob: Regression problem.
        sigma2: Noise variance (fixed during tuning).
        rng_seed: Seed for the start points.
        g0: True response, for the ``OPTIMAL`` family only.
        n_starts: Override of the number of starts (defaults to ``10 * dim``).
        keep_trace: Record the objective after every accepted step.

    Returns:
        Best specification (lowest objective; ties go to the earliest start)
        together with every local run.
    """
    family = canonical_family(family)
    obj = EBObjective(family, prob, sigma2, g0)
    dim = FAMILIES[family].dim
    if dim == 0:
        spec = obj.spec(np.zeros(0))
        return TuningResult(spec, obj.value(np.zeros(0)), [])
    R = 10 * dim if n_starts is None else int(n_starts)
    box = optimizer_box(family)
    rng = np.random.default_rng(rng_seed)
    starts = rng.uniform(box[:, 0], box[:, 1], size=(R, dim))
    runs = [_local_run(obj, i, starts[i], keep_trace) for i in range(R)]
    ok = [r for r in runs if np.isfinite(r.final_objective)]
    if not ok:
        raise EstimationError("EB objective could not be evaluated at any start")
    best = min(ok, key=lambda r: (r.final_objective, r.start_index))
    return TuningResult(obj.spec(best.final_eta), best.final_objective, runs)


def tune_hyperparameters(family: str, prob: RegressionProblem, sigma2: float, rng_seed,
                         g0=None) -> KernelSpec:
    """Best kernel specification found by :func:`multistart`."""
    return multistart(family, prob, sigma2, rng_seed, g0=g0).spec


@dataclass
class EstimationResult:
    theta_hat: NoncausalFir
    eta_hat: KernelSpec
    sigma2_hat: float
    eb_objective: float
    n_restarts: int
    fit: float = math.nan
    err: float = math.nan

    def to_json(self) -> str:
        return json.dumps({
            "theta_hat": self.theta_hat.to_csv(),
            "family": self.eta_hat.family,
            "eta_hat": self.eta_hat.eta.tolist(),
            "sigma2_hat": self.sigma2_hat,
            "eb_objective": self.eb_objective,
            "n_restarts": self.n_restarts,
            "fit": self.fit,
            "err": self.err,
        })


def identify(u, y, family: str, n_a: int, n_c: int, rng_seed=0, g0=None) -> EstimationResult:
    """Regression, noise variance, EB tuning and regularized estimate in sequence."""
    prob = build_regression(u, y, n_a, n_c)
    sigma2 = estimate_noise_variance(prob)
    tuned = multistart(family, prob, sigma2, rng_seed, g0=g0)
    theta = rls(prob, tuned.spec, sigma2)
    return EstimationResult(theta, tuned.spec, sigma2, tuned.objective, tuned.n_restarts)
