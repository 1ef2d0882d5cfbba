"""Extended semiseparable-plus-diagonal representation of the first-order
simulation-induced kernel and an O(p^2 n) Cholesky factorization.

Generators are stored in scaled form: for ``t > s``

    k(t, s) = sum_j u_j(t) v_j(s) phi_j^(t - s)

with bounded ``u_j, v_j``. The plain generators are ``mu_j(t) = u_j(t)
phi_j^(t - t0)`` and ``nu_j(s) = v_j(s) phi_j^(t0 - s)`` with ``t0`` the first
grid point, which normalizes the exponential part of each ``mu_j`` to one at
its largest value.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .kernels import (KernelSpec, UncertaintyFoParams, NCSI_FAMILIES,
                      _b2, _interval_sum, ncsi_closed_form, to_fo)

logger = logging.getLogger(__name__)

JITTER = 1e-10


class SingularDynamicsError(ValueError):
    """Semiseparable generators need nonzero first-order poles."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Non-positive pivot in a Cholesky factorization."""

    def __init__(self, message, pivot: int):
        super().__init__(message)
        self.pivot = pivot


@dataclass(frozen=True)
class SemisepGenerators:
    """Generators of an extended ``p``-semiseparable plus diagonal matrix.

    Attributes:
        grid: Strictly increasing integer grid of length ``n``.
        u: ``(n, p)`` scaled left generators.
        v: ``(n, p)`` scaled right generators.
        diag: ``(n,)`` diagonal values.
        phi: ``(p,)`` per-generator geometric rates (ones for plain generators).
    """

    grid: np.ndarray
    u: np.ndarray
    v: np.ndarray
    diag: np.ndarray
    phi: Optional[np.ndarray] = None

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.int64).ravel()
        u = np.asarray(self.u, dtype=float).reshape(grid.size, -1)
        v = np.asarray(self.v, dtype=float).reshape(grid.size, -1)
        if u.shape != v.shape:
            raise ValueError("u and v must have the same shape")
        phi = np.ones(u.shape[1]) if self.phi is None else np.asarray(self.phi, dtype=float).ravel()
        if phi.size != u.shape[1]:
            raise ValueError("phi must have one entry per generator")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "diag", np.asarray(self.diag, dtype=float).ravel())
        object.__setattr__(self, "phi", phi)

    @property
    def order(self) -> int:
        return self.u.shape[1]

    @property
    def n(self) -> int:
        return self.grid.size

    @property
    def mu(self) -> np.ndarray:
        """Plain left generators ``(n, p)``; may over/underflow on long grids."""
        e = (self.grid - self.grid[0]).astype(float)[:, None]
        return self.u * np.power(self.phi[None, :], e)

    @property
    def nu(self) -> np.ndarray:
        """Plain right generators ``(n, p)``."""
        e = (self.grid[0] - self.grid).astype(float)[:, None]
        with np.errstate(over="ignore", divide="ignore"):
            return self.v * np.power(self.phi[None, :], e)

    def index(self, t: int) -> int:
        i = int(np.searchsorted(self.grid, t))
        if i >= self.grid.size or self.grid[i] != t:
            raise IndexError(f"{t} is not on the grid")
        return i

    def lower_value(self, i: int, j: int) -> float:
        """Semiseparable formula for grid positions ``i > j`` (no diagonal rule)."""
        d = float(self.grid[i] - self.grid[j])
        return float(np.sum(self.u[i] * self.v[j] * np.power(self.phi, d)))

    def dense(self) -> np.ndarray:
        """Dense matrix, built row by row."""
        n = self.n
        K = np.zeros((n, n))
        for i in range(n):
            d = (self.grid[i] - self.grid[:i]).astype(float)
            K[i, :i] = (self.v[:i] * np.power(self.phi[None, :], d[:, None])) @ self.u[i]
        K = K + K.T
        K[np.diag_indices(n)] = self.diag
        return K


def reconstruct(gen: SemisepGenerators, t: int, s: int) -> float:
    """Value at ``(t, s)``: lower formula for ``t > s``, diagonal for ``t == s``,
    mirrored formula for ``t < s``."""
    i, j = gen.index(t), gen.index(s)
    if i == j:
        return float(gen.diag[i])
    if i > j:
        return gen.lower_value(i, j)
    return gen.lower_value(j, i)


# --- first-order generators ----------------------------------------------

def _forward_sum(x: np.ndarray, r: float, unc: UncertaintyFoParams) -> np.ndarray:
    """``sum_{k >= x} b(k)^2 r^(k - x)`` for ``|r| < 1`` or summable envelope."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    # k in [x, -1]
    hi = np.full_like(x, -1.0)
    L = hi - x + 1
    with np.errstate(over="ignore", invalid="ignore"):
        f_lo = unc.sig_a ** 2 * np.power(unc.lam_a, -np.minimum(x, -1.0))
        f_hi = unc.sig_a ** 2 * unc.lam_a * np.power(r, np.maximum(-1.0 - x, 0.0))
    out += _interval_sum(f_lo, f_hi, r, unc.lam_a, np.maximum(L, 0.0))
    # k = 0
    out += np.where(x <= 0, np.power(r, np.maximum(-x, 0.0)), 0.0)
    # k >= max(x, 1)
    k0 = np.maximum(x, 1.0)
    out += unc.sig_c ** 2 * np.power(unc.lam_c, k0) * np.power(r, k0 - x) / (1.0 - unc.lam_c * r)
    return out


def _backward_sum(x: np.ndarray, r: float, unc: UncertaintyFoParams) -> np.ndarray:
    """``sum_{k <= x} b(k)^2 r^(x - k)``."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    # k in [1, x]
    L = x
    with np.errstate(over="ignore", invalid="ignore"):
        f_lo = unc.sig_c ** 2 * unc.lam_c * np.power(r, np.maximum(x - 1.0, 0.0))
        f_hi = unc.sig_c ** 2 * np.power(unc.lam_c, np.maximum(x, 1.0))
    out += _interval_sum(f_lo, f_hi, unc.lam_c, r, np.maximum(L, 0.0))
    # k = 0
    out += np.where(x >= 0, np.power(r, np.maximum(x, 0.0)), 0.0)
    # k <= min(x, -1)
    k1 = np.minimum(x, -1.0)
    out += unc.sig_a ** 2 * np.power(unc.lam_a, -k1) * np.power(r, x - k1) / (1.0 - unc.lam_a * r)
    return out


def fo_generators(spec: KernelSpec, grid) -> SemisepGenerators:
    """Order-2 generators of a first-order simulation-induced kernel.

    Args:
        spec: ``NCSI-FO`` (or a family reducible to it) with nonzero poles.
        grid: Strictly increasing integer grid.

    Returns:
        Generators with ``diag(t) = k(t, t)``.
    """
    if spec.family not in NCSI_FAMILIES:
        raise ValueError("fo_generators needs a simulation-induced kernel")
    nom, unc = to_fo(spec)
    if nom.a_c == 0.0 or nom.a_a == 0.0:
        raise SingularDynamicsError("singular causal dynamics: semiseparable form unavailable")
    grid = np.asarray(grid, dtype=np.int64).ravel()
    if grid.size > 1 and np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    x = grid.astype(float)
    diag = ncsi_closed_form(nom, unc, grid, grid)
    n = grid.size
    u = np.zeros((n, 2))
    v = np.zeros((n, 2))
    phi = np.array([nom.a_c, nom.a_a])

    if unc.sig_c == 0.0 and unc.sig_a == 0.0:
        # rank one: g0(t) g0(s)
        from .kernels import g0_fo
        g = g0_fo(grid, nom)
        u[:, 0] = g
        v[:, 0] = g
        return SemisepGenerators(grid, u, v, diag, np.array([1.0, 1.0]))

    cc, c0, ca = nom.c_c, nom.c_0, nom.c_a
    ac, aa = nom.a_c, nom.a_a
    beta = _b2(grid, unc)
    # end pieces: k <= s with causal left factor, k >= t with anti-causal right factor
    E = c0 * beta + cc * ac * ac * _backward_sum(x - 1, ac * ac, unc)
    H = c0 * beta + ca * aa * aa * _forward_sum(x + 1, aa * aa, unc)
    if abs(aa) <= abs(ac):
        r = aa / ac
        A = r * _forward_sum(x + 1, r, unc)
        B = _forward_sum(x, r, unc)
        v1 = cc * E + cc * ca * A
        u2 = ca * H - cc * ca * B
    else:
        r = ac / aa
        C = r * _backward_sum(x - 1, r, unc)
        D = _backward_sum(x, r, unc)
        v1 = cc * E - cc * ca * D
        u2 = ca * H + cc * ca * C
    u[:, 0] = 1.0
    v[:, 0] = v1
    u[:, 1] = u2
    v[:, 1] = 1.0
    return SemisepGenerators(grid, u, v, diag, phi)


# --- factorizations -------------------------------------------------------

@dataclass(frozen=True)
class SemisepCholesky:
    """Cholesky factor ``L`` with ``L[i, j] = sum_k u[i,k] w[j,k] phi_k^(t_i-t_j) * l[j]``
    below the diagonal and ``L[i, i] = l[i]``."""

    grid: np.ndarray
    u: np.ndarray
    w: np.ndarray
    phi: np.ndarray
    pivots: np.ndarray
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.grid.size

    def dense(self) -> np.ndarray:
        n = self.n
        L = np.zeros((n, n))
        l = np.sqrt(self.pivots)
        for i in range(n):
            d = (self.grid[i] - self.grid[:i]).astype(float)
            L[i, :i] = ((self.w[:i] * np.power(self.phi[None, :], d[:, None])) @ self.u[i]) * l[:i]
        L[np.diag_indices(n)] = l
        return L

    def logdet(self) -> float:
        return float(np.sum(np.log(self.pivots)))


def _ldl_recursion(grid, u, v, diag, phi):
    n, p = u.shape
    w = np.zeros((n, p))
    D = np.zeros(n)
    S = np.zeros((p, p))
    prev_t = grid[0] if n else 0
    prev_w = np.zeros(p)
    prev_d = 0.0
    for i in range(n):
        f = phi ** float(grid[i] - prev_t)
        S = f[:, None] * (S + prev_d * np.outer(prev_w, prev_w)) * f[None, :]
        Su = S @ u[i]
        d = diag[i] - u[i] @ Su
        if not d > 0.0:
            return None, None, i
        wi = (v[i] - Su) / d
        w[i] = wi
        D[i] = d
        prev_t, prev_w, prev_d = grid[i], wi, d
    return w, D, -1


def structured_cholesky(gen: SemisepGenerators) -> SemisepCholesky:
    """Cholesky factorization in generator form, ``O(p^2 n)`` time, ``O(p n)`` memory.

    A jitter of ``1e-10 * trace / n`` is added to the diagonal when a pivot
    is not positive.
    """
    w, D, bad = _ldl_recursion(gen.grid, gen.u, gen.v, gen.diag, gen.phi)
    jitter = 0.0
    if w is None:
        jitter = JITTER * float(np.sum(gen.diag)) / max(gen.n, 1)
        logger.debug("pivot %d not positive, retrying with jitter %.3g", bad, jitter)
        w, D, bad = _ldl_recursion(gen.grid, gen.u, gen.v, gen.diag + jitter, gen.phi)
        if w is None:
            raise NotPositiveDefiniteError(f"matrix not PD: pivot {bad}", bad)
    return SemisepCholesky(gen.grid, gen.u, w, gen.phi, D, jitter)


def dense_cholesky(matrix) -> np.ndarray:
    """Lower Cholesky factor; raises with the failing pivot index."""
    K = np.asarray(matrix, dtype=float)
    try:
        return scipy.linalg.cholesky(K, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        # LAPACK reports the order of the failing leading minor
        msg = str(exc)
        digits = "".join(ch if ch.isdigit() else " " for ch in msg).split()
        pivot = int(digits[0]) - 1 if digits else -1
        raise NotPositiveDefiniteError(f"matrix not PD: pivot {pivot}", pivot) from exc
