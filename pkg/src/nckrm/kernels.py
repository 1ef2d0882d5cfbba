"""Non-causal kernel families, the simulation-induced first-order kernel in
closed form, its truncated-sum reference, and Gram matrices."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple, Union

import numpy as np

from .lti import NoncausalFir

# Parameter kinds: (domain lo, domain hi, optimizer lo, optimizer hi)
_EPS = 1e-6
FLUSH_REL = 1e-80
KIND_BOUNDS = {
    "scale_pos": (0.0, 1e3, _EPS, 1e3),
    "scale": (-1e3, 1e3, -1e3, 1e3),
    "decay": (0.0, 1.0, _EPS, 1.0 - _EPS),
    "pole": (-1.0, 1.0, -1.0 + _EPS, 1.0 - _EPS),
    "corr": (-1.0, 1.0, -1.0 + _EPS, 1.0 - _EPS),
    "spread": (0.0, 1e3, _EPS, 1e3),
}
# kinds that must stay strictly inside their domain
_OPEN_UPPER = {"decay"}
_OPEN_BOTH = {"pole"}


@dataclass(frozen=True)
class FamilyInfo:
    names: Tuple[str, ...]
    kinds: Tuple[str, ...]

    @property
    def dim(self) -> int:
        return len(self.names)


FAMILIES = {
    "NC-TC": FamilyInfo(("c", "lam_c", "lam_a"), ("scale_pos", "decay", "decay")),
    "NCBD-TC": FamilyInfo(("c", "lam_c", "lam_a"), ("scale_pos", "decay", "decay")),
    "NCBD-TC-mp": FamilyInfo(("c", "lam"), ("scale_pos", "decay")),
    "NCBD-DC": FamilyInfo(("lam_c", "lam_a", "c_c", "c_0", "c_a", "rho_c", "rho_a"),
                          ("decay", "decay", "scale", "scale", "scale", "corr", "corr")),
    "NCBD-DC-mp": FamilyInfo(("lam", "c_c", "c_0", "c_a", "rho_c", "rho_a"),
                             ("decay", "scale", "scale", "scale", "corr", "corr")),
    "NCSI-TC": FamilyInfo(("lam_c", "lam_a", "c_c", "c_0", "c_a"),
                          ("decay", "decay", "scale", "scale", "scale")),
    "NCSI-DC": FamilyInfo(("lam_c", "lam_a", "c_c", "c_0", "c_a", "rho_c", "rho_a"),
                          ("decay", "decay", "scale", "scale", "scale", "corr", "corr")),
    "NCSI-FO": FamilyInfo(("a_c", "a_a", "c_c", "c_0", "c_a", "lam_c", "lam_a", "sig_c", "sig_a"),
                          ("pole", "pole", "scale", "scale", "scale", "decay", "decay",
                           "spread", "spread")),
    "NCSI-FO-mp": FamilyInfo(("a", "c_c", "c_0", "c_a", "lam_c", "lam_a", "sig_c", "sig_a"),
                             ("pole", "scale", "scale", "scale", "decay", "decay",
                              "spread", "spread")),
    "OPTIMAL": FamilyInfo((), ()),
    "DC": FamilyInfo(("c", "lam", "rho"), ("scale_pos", "decay", "corr")),
    "TC": FamilyInfo(("c", "lam"), ("scale_pos", "decay")),
}

NCSI_FAMILIES = ("NCSI-TC", "NCSI-DC", "NCSI-FO", "NCSI-FO-mp")

_ALIASES = {name.replace("-", "").lower(): name for name in FAMILIES}


def canonical_family(name: str) -> str:
    """Map user spellings such as ``ncsifomp`` or ``NCSI-FO-mp`` to the canonical tag."""
    if name in FAMILIES:
        return name
    key = name.replace("-", "").replace("_", "").lower()
    if key in _ALIASES:
        return _ALIASES[key]
    raise KeyError(f"unknown kernel family {name!r}")


class KernelDomainError(ValueError):
    """Hyper-parameter outside its feasible box."""


def domain_box(family: str) -> np.ndarray:
    """Closed feasible box (shape ``(dim, 2)``)."""
    info = FAMILIES[family]
    return np.array([KIND_BOUNDS[k][:2] for k in info.kinds], dtype=float).reshape(-1, 2)


def optimizer_box(family: str) -> np.ndarray:
    """Clipped box used by hyper-parameter tuning (shape ``(dim, 2)``)."""
    info = FAMILIES[family]
    return np.array([KIND_BOUNDS[k][2:] for k in info.kinds], dtype=float).reshape(-1, 2)


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family tag, hyper-parameters and feasible box.

    Attributes:
        family: Canonical family name (see ``FAMILIES``).
        eta: Hyper-parameter vector in the family layout.
        box: ``(dim, 2)`` array of closed bounds; defaults to the domain box.
        g0: True impulse response, only for the ``OPTIMAL`` family.
    """

    family: str
    eta: np.ndarray = None
    box: Optional[np.ndarray] = None
    g0: Optional[NoncausalFir] = None

    def __post_init__(self):
        fam = canonical_family(self.family)
        object.__setattr__(self, "family", fam)
        info = FAMILIES[fam]
        eta = np.zeros(0) if self.eta is None else np.asarray(self.eta, dtype=float).ravel()
        if eta.size != info.dim:
            raise KernelDomainError(
                f"{fam} expects {info.dim} hyper-parameters, got {eta.size}")
        box = domain_box(fam) if self.box is None else np.asarray(self.box, dtype=float).reshape(-1, 2)
        for i, (name, kind) in enumerate(zip(info.names, info.kinds)):
            v = eta[i]
            lo, hi = box[i]
            if not np.isfinite(v) or v < lo or v > hi:
                raise KernelDomainError(f"{fam}: {name}={v!r} outside [{lo:g}, {hi:g}]")
            if kind in _OPEN_UPPER and v >= 1.0:
                raise KernelDomainError(f"{fam}: {name}={v!r} must be < 1")
            if kind in _OPEN_BOTH and abs(v) >= 1.0:
                raise KernelDomainError(f"{fam}: |{name}|={abs(v)!r} must be < 1")
        if fam == "OPTIMAL" and self.g0 is None:
            raise KernelDomainError("OPTIMAL kernel needs the true impulse response g0")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "box", box)

    @property
    def dim(self) -> int:
        return self.eta.size

    def params(self) -> dict:
        return dict(zip(FAMILIES[self.family].names, self.eta.tolist()))

    def with_eta(self, eta) -> "KernelSpec":
        return KernelSpec(self.family, eta, self.box, self.g0)


@dataclass(frozen=True)
class NominalFoParams:
    """First-order two-sided nominal impulse response."""

    a_c: float
    a_a: float
    c_c: float
    c_0: float
    c_a: float

    def __post_init__(self):
        if abs(self.a_c) >= 1 or abs(self.a_a) >= 1:
            raise KernelDomainError("nominal model needs |a_c| < 1 and |a_a| < 1")


@dataclass(frozen=True)
class UncertaintyFoParams:
    """Two-sided exponential envelope of the uncertainty; its value at 0 is 1."""

    lam_c: float
    lam_a: float
    sig_c: float
    sig_a: float

    def __post_init__(self):
        if not (0 <= self.lam_c < 1 and 0 <= self.lam_a < 1):
            raise KernelDomainError("uncertainty decay rates must lie in [0, 1)")
        if self.sig_c < 0 or self.sig_a < 0:
            raise KernelDomainError("uncertainty scales must be non-negative")


def to_fo(spec: KernelSpec) -> Tuple[NominalFoParams, UncertaintyFoParams]:
    """First-order nominal/uncertainty parameters behind any NCSI family."""
    p = spec.params()
    fam = spec.family
    if fam == "NCSI-FO":
        return (NominalFoParams(p["a_c"], p["a_a"], p["c_c"], p["c_0"], p["c_a"]),
                UncertaintyFoParams(p["lam_c"], p["lam_a"], p["sig_c"], p["sig_a"]))
    if fam == "NCSI-FO-mp":
        return (NominalFoParams(p["a"], p["a"], p["c_c"], p["c_0"], p["c_a"]),
                UncertaintyFoParams(p["lam_c"], p["lam_a"], p["sig_c"], p["sig_a"]))
    if fam in ("NCSI-DC", "NCSI-TC"):
        lc, la = p["lam_c"], p["lam_a"]
        if fam == "NCSI-DC":
            rc, ra = p["rho_c"], p["rho_a"]
        else:
            rc, ra = math.sqrt(lc), math.sqrt(la)
        return (NominalFoParams(rc * math.sqrt(lc), ra * math.sqrt(la), p["c_c"], p["c_0"], p["c_a"]),
                UncertaintyFoParams(lc, la, math.sqrt(max(0.0, 1 - rc * rc)),
                                    math.sqrt(max(0.0, 1 - ra * ra))))
    raise ValueError(f"{fam} is not a simulation-induced family")


def g0_fo(t, p: NominalFoParams):
    """Nominal impulse response: ``c_c a_c^t`` (t>0), ``c_0`` (t=0), ``c_a a_a^-t`` (t<0)."""
    t = np.asarray(t)
    ta = np.abs(t).astype(float)
    out = np.where(t > 0, p.c_c * np.power(p.a_c, ta),
                   np.where(t < 0, p.c_a * np.power(p.a_a, ta), p.c_0))
    return out if out.ndim else float(out)


def b_fo(t, p: UncertaintyFoParams):
    """Uncertainty envelope: ``sig_c lam_c^(t/2)``, 1 at zero, ``sig_a lam_a^(-t/2)``."""
    t = np.asarray(t)
    ta = np.abs(t).astype(float)
    out = np.where(t > 0, p.sig_c * np.power(p.lam_c, ta / 2),
                   np.where(t < 0, p.sig_a * np.power(p.lam_a, ta / 2), 1.0))
    return out if out.ndim else float(out)


def _b2(k, p: UncertaintyFoParams) -> np.ndarray:
    """Squared envelope with integer powers (no square roots)."""
    k = np.asarray(k)
    ka = np.abs(k).astype(float)
    return np.where(k > 0, p.sig_c ** 2 * np.power(p.lam_c, ka),
                    np.where(k < 0, p.sig_a ** 2 * np.power(p.lam_a, ka), 1.0))


def ncsi_truncated_oracle(g0: Union[NominalFoParams, Callable], b: Union[UncertaintyFoParams, Callable],
                          t: int, s: int, K_trunc: int = 400) -> Tuple[float, float]:
    """Direct sum ``sum_{|k|<=K} b(k)^2 g0(t-k) g0(s-k)``.

    Args:
        g0: Nominal parameters or a vectorized callable ``g0(k)``.
        b: Uncertainty parameters or a vectorized callable ``b(k)``.
        t: Row index.
        s: Column index.
        K_trunc: Truncation half-width.

    Returns:
        ``(value, tail_bound)``. The bound on the omitted terms is geometric
        when both inputs are parametric and ``K_trunc >= max(|t|, |s|)``;
        otherwise it is ``nan``.
    """
    k = np.arange(-K_trunc, K_trunc + 1)
    gfun = (lambda x: g0_fo(x, g0)) if isinstance(g0, NominalFoParams) else g0
    bfun = (lambda x: b_fo(x, b)) if isinstance(b, UncertaintyFoParams) else b
    bk = np.asarray(bfun(k), dtype=float)
    value = float(np.sum(bk * bk * np.asarray(gfun(t - k)) * np.asarray(gfun(s - k))))
    bound = math.nan
    if isinstance(g0, NominalFoParams) and isinstance(b, UncertaintyFoParams) \
            and K_trunc >= max(abs(t), abs(s)):
        K1 = K_trunc + 1
        aa, ac = abs(g0.a_a), abs(g0.a_c)
        right = (b.sig_c ** 2 * g0.c_a ** 2 * b.lam_c ** K1 * aa ** (2 * K1 - t - s)
                 / (1 - b.lam_c * aa * aa))
        left = (b.sig_a ** 2 * g0.c_c ** 2 * b.lam_a ** K1 * ac ** (2 * K1 + t + s)
                / (1 - b.lam_a * ac * ac))
        bound = float(right + left)
    return value, bound


# --- closed form ----------------------------------------------------------

def _geom(r: float, L: np.ndarray) -> np.ndarray:
    """``sum_{j<L} r^j`` for ``|r| <= 1`` (``L`` may be ``inf`` when ``|r| < 1``)."""
    L = np.asarray(L, dtype=float)
    if r == 0.0:
        return np.ones_like(L)
    if r == 1.0:
        return L.copy()
    if r > 0.0:
        with np.errstate(over="ignore", invalid="ignore"):
            out = -np.expm1(L * math.log(r)) / (1.0 - r)
        return np.where(np.isinf(L), 1.0 / (1.0 - r), out)
    with np.errstate(over="ignore", invalid="ignore"):
        out = (1.0 - np.power(r, np.where(np.isinf(L), 0.0, L))) / (1.0 - r)
    return np.where(np.isinf(L), 1.0 / (1.0 - r), out)


def _interval_sum(f_lo, f_hi, num: float, den: float, L) -> np.ndarray:
    """Sum of a geometric run of ``L`` terms with step ratio ``num/den``.

    The recursion starts from the end where terms are largest so the ratio
    used has magnitude at most one.
    """
    L = np.asarray(L, dtype=float)
    if abs(num) <= abs(den):
        r = num / den if den != 0 else 0.0
        out = f_lo * _geom(r, L)
    else:
        out = f_hi * _geom(den / num, L)
    return np.where(L >= 1, out, 0.0)


def _power_term(coef: float, factors, k) -> np.ndarray:
    val = coef
    for base, alpha, gamma in factors:
        val = val * np.power(base, alpha + gamma * k)
    return val


def _regime_sum(coef, factors, lo, hi):
    """Sum of ``coef * prod base^(alpha + gamma k)`` over ``k in [lo, hi]``."""
    num = 1.0
    den = 1.0
    for base, _, gamma in factors:
        if gamma > 0:
            num *= base ** gamma
        elif gamma < 0:
            den *= base ** (-gamma)
    L = hi - lo + 1
    lo_f = np.where(np.isfinite(lo), lo, hi)
    hi_f = np.where(np.isfinite(hi), hi, lo)
    valid = L >= 1
    lo_f = np.where(valid, lo_f, 0.0)
    hi_f = np.where(valid, hi_f, 0.0)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        f_lo = _power_term(coef, factors, lo_f)
        f_hi = _power_term(coef, factors, hi_f)
        out = _interval_sum(f_lo, f_hi, num, den, np.where(valid, L, 0.0))
    return np.where(valid, out, 0.0)


def ncsi_closed_form(nom: NominalFoParams, unc: UncertaintyFoParams, t, s) -> np.ndarray:
    """Closed-form ``sum_k b(k)^2 g0(t-k) g0(s-k)`` for integer arrays ``t, s``.

    The index line is cut at ``0``, ``s`` and ``t``; on each piece every
    factor is a single exponential, so the piece is a geometric sum.
    """
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    t, s = np.broadcast_arrays(np.maximum(t, s), np.minimum(t, s))
    inf = np.inf
    beta_regimes = [
        (unc.sig_c ** 2, [(unc.lam_c, 0.0, 1)], 1.0, inf),
        (1.0, [], 0.0, 0.0),
        (unc.sig_a ** 2, [(unc.lam_a, 0.0, -1)], -inf, -1.0),
    ]

    def g_regimes(x):
        return [
            (nom.c_c, [(nom.a_c, x, -1)], -inf, x - 1),
            (nom.c_0, [], x, x),
            (nom.c_a, [(nom.a_a, -x, 1)], x + 1, inf),
        ]

    total = np.zeros(t.shape)
    for (cb, fb, lb, hb), (ct, ft, lt, ht), (cs, fs, ls, hs) in itertools.product(
            beta_regimes, g_regimes(t), g_regimes(s)):
        coef = cb * ct * cs
        if coef == 0.0:
            continue
        lo = np.maximum(np.maximum(lb, lt), ls)
        hi = np.minimum(np.minimum(hb, ht), hs)
        if not np.any(hi >= lo):
            continue
        total = total + _regime_sum(coef, fb + ft + fs, lo, hi)
    return total


def ncsi_parts(nom: NominalFoParams, unc: UncertaintyFoParams, t_min: int, t_max: int):
    """Building blocks of :func:`ncsi_factors`.

    Returns:
        ``(lags, tail_hi, tail_lo, w)`` where ``lags[j] = g0(j - n + 1)`` for
        ``j = 0..2n-2``, the two tail columns have length ``n`` and ``w`` holds
        the ``n + 2`` column weights.
    """
    if not t_min <= 0 <= t_max:
        raise ValueError("factorized form needs a grid containing 0")
    n = t_max - t_min + 1
    lags = g0_fo(np.arange(-(n - 1), n), nom)
    grid = np.arange(t_min, t_max + 1)
    w = np.empty(n + 2)
    w[:n] = _b2(grid, unc)
    tail_hi = nom.c_a * np.power(nom.a_a, (t_max + 1 - grid).astype(float))
    w[n] = unc.sig_c ** 2 * unc.lam_c ** (t_max + 1) / (1.0 - unc.lam_c * nom.a_a ** 2)
    tail_lo = nom.c_c * np.power(nom.a_c, (grid - t_min + 1).astype(float))
    w[n + 1] = unc.sig_a ** 2 * unc.lam_a ** (1 - t_min) / (1.0 - unc.lam_a * nom.a_c ** 2)
    top = max(np.abs(lags).max(), np.abs(tail_hi).max(), np.abs(tail_lo).max())
    for arr, ref in ((lags, top), (tail_hi, top), (tail_lo, top), (w, np.abs(w).max())):
        _flush_tiny(arr, ref)
    return lags, tail_hi, tail_lo, w


PRIMITIVES = ("a_c", "a_a", "c_c", "c_0", "c_a", "lam_c", "lam_a", "sig_c", "sig_a")


def primitive_vector(nom: NominalFoParams, unc: UncertaintyFoParams) -> np.ndarray:
    """First-order parameters in :data:`PRIMITIVES` order."""
    return np.array([nom.a_c, nom.a_a, nom.c_c, nom.c_0, nom.c_a,
                     unc.lam_c, unc.lam_a, unc.sig_c, unc.sig_a])


def ncsi_parts_vjp(nom: NominalFoParams, unc: UncertaintyFoParams, t_min: int, t_max: int,
                   d_lags, d_hi, d_lo, d_w) -> np.ndarray:
    """Pull cotangents of :func:`ncsi_parts` outputs back to :data:`PRIMITIVES`.

    Args:
        nom: Nominal parameters.
        unc: Uncertainty parameters.
        t_min: First grid point (``<= 0``).
        t_max: Last grid point (``>= 0``).
        d_lags: Cotangent of ``lags`` (length ``2n - 1``).
        d_hi: Cotangent of ``tail_hi``.
        d_lo: Cotangent of ``tail_lo``.
        d_w: Cotangent of ``w`` (length ``n + 2``).

    Returns:
        Gradient with respect to the nine primitives.
    """
    n = t_max - t_min + 1
    d_lags = np.asarray(d_lags, dtype=float)
    k = np.arange(1, n, dtype=float)
    pos, neg = d_lags[n:], d_lags[:n - 1][::-1]         # lags +k and -k
    grid = np.arange(t_min, t_max + 1)
    e_hi = (t_max + 1 - grid).astype(float)
    e_lo = (grid - t_min + 1).astype(float)
    ac, aa = nom.a_c, nom.a_a
    out = np.zeros(9)
    # nominal branches: lags and the two tail columns
    out[2] = pos @ np.power(ac, k) + d_lo @ np.power(ac, e_lo)
    out[4] = neg @ np.power(aa, k) + d_hi @ np.power(aa, e_hi)
    out[3] = d_lags[n - 1]
    out[0] = nom.c_c * (pos @ (k * np.power(ac, k - 1)) + d_lo @ (e_lo * np.power(ac, e_lo - 1)))
    out[1] = nom.c_a * (neg @ (k * np.power(aa, k - 1)) + d_hi @ (e_hi * np.power(aa, e_hi - 1)))
    # envelope weights on the grid
    wg = d_w[:n]
    kp = grid[grid > 0].astype(float)
    kn = -grid[grid < 0].astype(float)
    dp, dn = wg[grid > 0], wg[grid < 0]
    lc, la, sc, sa = unc.lam_c, unc.lam_a, unc.sig_c, unc.sig_a
    out[7] = 2 * sc * (dp @ np.power(lc, kp))
    out[8] = 2 * sa * (dn @ np.power(la, kn))
    out[5] = sc * sc * (dp @ (kp * np.power(lc, kp - 1)))
    out[6] = sa * sa * (dn @ (kn * np.power(la, kn - 1)))
    # tail weights sig^2 lam^p / (1 - lam a^2)
    for d, lam, sig, a, p_exp, i_lam, i_sig, i_a in (
            (d_w[n], lc, sc, aa, t_max + 1, 5, 7, 1),
            (d_w[n + 1], la, sa, ac, 1 - t_min, 6, 8, 0)):
        q = 1.0 - lam * a * a
        lp = lam ** p_exp
        out[i_sig] += d * 2 * sig * lp / q
        out[i_lam] += d * sig * sig * (p_exp * lam ** (p_exp - 1) * q + lp * a * a) / (q * q)
        out[i_a] += d * sig * sig * lp * 2 * lam * a / (q * q)
    return out


def _flush_tiny(x: np.ndarray, ref: float, rel: float = FLUSH_REL) -> None:
    # subnormal operands make dense products an order of magnitude slower
    x[np.abs(x) < rel * ref] = 0.0


def assemble_factor(lags, tail_hi, tail_lo) -> np.ndarray:
    """``(n, n + 2)`` matrix: Toeplitz block ``g0(t - k)`` plus the two tail columns."""
    n = tail_hi.size
    F = np.empty((n, n + 2))
    # row i, column j holds lag i - j, stored at lags[i - j + n - 1]
    F[:, :n] = np.lib.stride_tricks.sliding_window_view(lags, n)[:, ::-1]
    F[:, n] = tail_hi
    F[:, n + 1] = tail_lo
    return F


def ncsi_factors(nom: NominalFoParams, unc: UncertaintyFoParams, t_min: int, t_max: int):
    """Factorization ``K = F diag(w) F^T`` of the Gram matrix on ``t_min..t_max``.

    Requires ``t_min <= 0 <= t_max``. The first ``n`` columns of ``F`` are the
    Toeplitz matrix ``g0(t - k)`` for ``k`` on the grid; two extra columns
    carry the geometric tails ``k > t_max`` and ``k < t_min`` exactly.

    Returns:
        ``(F, w)`` with ``F`` of shape ``(n, n + 2)``.
    """
    lags, tail_hi, tail_lo, w = ncsi_parts(nom, unc, t_min, t_max)
    return assemble_factor(lags, tail_hi, tail_lo), w


# --- other families -------------------------------------------------------

def _tc_envelope(t, lam_c, lam_a):
    t = np.asarray(t, dtype=float)
    return np.where(t >= 0, np.power(lam_c, np.abs(t)), np.power(lam_a, np.abs(t)))


def _fir_lookup(fir, x):
    # taps outside the stored window are zero
    idx = np.asarray(x) + fir.n_a
    ok = (idx >= 0) & (idx < fir.coeffs.size)
    return np.where(ok, fir.coeffs[np.clip(idx, 0, fir.coeffs.size - 1)], 0.0)


def _eval_pairs(spec: KernelSpec, t: np.ndarray, s: np.ndarray) -> np.ndarray:
    fam = spec.family
    p = spec.params()
    tf = t.astype(float)
    sf = s.astype(float)
    if fam in NCSI_FAMILIES:
        nom, unc = to_fo(spec)
        return ncsi_closed_form(nom, unc, t, s)
    if fam == "NC-TC":
        return p["c"] * np.minimum(_tc_envelope(t, p["lam_c"], p["lam_a"]),
                                   _tc_envelope(s, p["lam_c"], p["lam_a"]))
    if fam in ("NCBD-TC", "NCBD-TC-mp"):
        lc = p.get("lam_c", p.get("lam"))
        la = p.get("lam_a", p.get("lam"))
        env = np.minimum(_tc_envelope(t, lc, la), _tc_envelope(s, lc, la))
        same = ((t >= 0) & (s >= 0)) | ((t < 0) & (s < 0))
        return np.where(same, p["c"] * env, 0.0)
    if fam in ("NCBD-DC", "NCBD-DC-mp"):
        lc = p.get("lam_c", p.get("lam"))
        la = p.get("lam_a", p.get("lam"))
        d = np.abs(tf - sf)
        with np.errstate(invalid="ignore"):
            causal = p["c_c"] ** 2 * np.power(lc, (tf + sf) / 2) * np.power(p["rho_c"], d)
            anti = p["c_a"] ** 2 * np.power(la, -(tf + sf) / 2) * np.power(p["rho_a"], d)
        out = np.where((t >= 1) & (s >= 1), causal, 0.0)
        out = np.where((t <= -1) & (s <= -1), anti, out)
        return np.where((t == 0) & (s == 0), p["c_0"] ** 2, out)
    if fam == "DC":
        return p["c"] * np.power(p["lam"], (tf + sf) / 2) * np.power(p["rho"], np.abs(tf - sf))
    if fam == "TC":
        return p["c"] * np.power(p["lam"], np.maximum(tf, sf))
    if fam == "OPTIMAL":
        return _fir_lookup(spec.g0, t) * _fir_lookup(spec.g0, s)
    raise ValueError(f"unsupported family {fam}")


def evaluate(spec: KernelSpec, t, s):
    """Kernel value ``k(t, s)``; arrays broadcast, arguments are ordered canonically."""
    t = np.asarray(t, dtype=np.int64)
    s = np.asarray(s, dtype=np.int64)
    hi, lo = np.maximum(t, s), np.minimum(t, s)
    out = _eval_pairs(spec, hi, lo)
    return out if np.ndim(out) else float(out)


def gram(spec: KernelSpec, grid) -> np.ndarray:
    """Gram matrix ``M[i, j] = k(grid[i], grid[j])`` for a strictly increasing grid."""
    grid = np.asarray(grid, dtype=np.int64).ravel()
    if grid.size > 1 and np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    contiguous = grid.size == 0 or grid[-1] - grid[0] + 1 == grid.size
    if spec.family in NCSI_FAMILIES and contiguous and grid.size and grid[0] <= 0 <= grid[-1]:
        nom, unc = to_fo(spec)
        F, w = ncsi_factors(nom, unc, int(grid[0]), int(grid[-1]))
        K = (F * w) @ F.T
        return 0.5 * (K + K.T)
    if spec.family not in NCSI_FAMILIES:
        return assemble_blocks(separable_blocks(spec, grid), grid_distances(grid))
    T, S = np.meshgrid(grid, grid, indexing="ij")
    iu = np.triu_indices(grid.size)
    vals = evaluate(spec, T[iu], S[iu])
    K = np.zeros((grid.size, grid.size))
    K[iu] = vals
    K.T[iu] = vals
    return K


def separable_blocks(spec: KernelSpec, grid: np.ndarray) -> list:
    """Gram matrix of a non-simulation-induced family as a sum of simple blocks.

    Each block is either ``("min", scale, env, mask)`` contributing
    ``scale * min(env_i, env_j) * mask_ij`` or ``("prod", scale, h, table)``
    contributing ``scale * h_i h_j * table[|t_i - t_j|]`` (``table=None``
    means all ones). ``mask`` may be ``None``.
    """
    fam = spec.family
    p = spec.params()
    grid = np.asarray(grid, dtype=np.int64)
    g = np.abs(grid).astype(float)
    span = int(grid.max() - grid.min()) + 1 if grid.size else 1

    def table(rho):
        return np.power(rho, np.arange(span, dtype=float))

    if fam in ("NC-TC", "NCBD-TC", "NCBD-TC-mp"):
        lc = p.get("lam_c", p.get("lam"))
        la = p.get("lam_a", p.get("lam"))
        mask = None
        if fam != "NC-TC":
            pos = grid >= 0
            mask = np.equal.outer(pos, pos)
        return [("min", p["c"], _tc_envelope(grid, lc, la), mask)]
    if fam in ("NCBD-DC", "NCBD-DC-mp"):
        lc = p.get("lam_c", p.get("lam"))
        la = p.get("lam_a", p.get("lam"))
        hc = np.where(grid >= 1, np.power(lc, g / 2), 0.0)
        ha = np.where(grid <= -1, np.power(la, g / 2), 0.0)
        return [("prod", p["c_c"] ** 2, hc, table(p["rho_c"])),
                ("prod", p["c_a"] ** 2, ha, table(p["rho_a"])),
                ("prod", p["c_0"] ** 2, (grid == 0).astype(float), None)]
    if fam == "DC":
        return [("prod", p["c"], np.power(p["lam"], grid.astype(float) / 2), table(p["rho"]))]
    if fam == "TC":
        return [("min", p["c"], np.power(p["lam"], grid.astype(float)), None)]
    if fam == "OPTIMAL":
        return [("prod", 1.0, _fir_lookup(spec.g0, grid), None)]
    raise ValueError(f"unsupported family {fam}")


def grid_distances(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.int64)
    return np.abs(grid[:, None] - grid[None, :])


def assemble_blocks(blocks, dist: np.ndarray) -> np.ndarray:
    """Dense Gram matrix from :func:`separable_blocks` output."""
    K = np.zeros(dist.shape)
    for kind, scale, vec, extra in blocks:
        if kind == "min":
            term = np.minimum.outer(vec, vec)
            if extra is not None:
                term = np.where(extra, term, 0.0)
        else:
            term = np.outer(vec, vec)
            if extra is not None:
                term *= extra[dist]
        K += scale * term
    return K


def blocks_vector(blocks) -> np.ndarray:
    """Differentiable block content flattened (scale, vector, table per block)."""
    parts = []
    for kind, scale, vec, extra in blocks:
        parts.append([scale])
        parts.append(vec)
        if kind == "prod" and extra is not None:
            parts.append(extra)
    return np.concatenate(parts)


def blocks_vjp(blocks, G: np.ndarray, dist: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(G * K)`` with respect to :func:`blocks_vector` (``G`` symmetric)."""
    out = []
    for kind, scale, vec, extra in blocks:
        if kind == "min":
            Gm = G if extra is None else np.where(extra, G, 0.0)
            lower = np.less.outer(vec, vec) + 0.5 * np.equal.outer(vec, vec)
            out.append([float(np.sum(Gm * np.minimum.outer(vec, vec)))])
            out.append(2.0 * scale * np.sum(Gm * lower, axis=1))
        else:
            GT = G if extra is None else G * extra[dist]
            Gh = GT @ vec
            out.append([float(vec @ Gh)])
            out.append(2.0 * scale * Gh)
            if extra is not None:
                out.append(scale * np.bincount(dist.ravel(), (G * np.outer(vec, vec)).ravel(),
                                               minlength=extra.size))
    return np.concatenate(out)


def stability_tail(spec: KernelSpec, T: int) -> Tuple[float, float]:
    """Partial absolute sum over ``|t|, |s| <= T`` and its analytic bound.

    The bound is ``(sum_k b(k)^2) * (sum_t |g0(t)|)^2`` over all integers.
    """
    if spec.family not in NCSI_FAMILIES:
        raise ValueError("stability_tail applies to simulation-induced kernels")
    nom, unc = to_fo(spec)
    grid = np.arange(-T, T + 1)
    partial = float(np.abs(gram(spec, grid)).sum())
    sb2 = 1.0 + unc.sig_c ** 2 * unc.lam_c / (1 - unc.lam_c) + unc.sig_a ** 2 * unc.lam_a / (1 - unc.lam_a)
    sg = (abs(nom.c_0) + abs(nom.c_c) * abs(nom.a_c) / (1 - abs(nom.a_c))
          + abs(nom.c_a) * abs(nom.a_a) / (1 - abs(nom.a_a)))
    return partial, sb2 * sg * sg
