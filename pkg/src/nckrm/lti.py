"""Discrete and continuous LTI systems: representation, simulation, ZOH
discretization, non-causal inversion and random test-system generators."""

from __future__ import annotations

import io
import json
import logging
import math
import warnings
from dataclasses import dataclass
from typing import Union

import numpy as np
import scipy.linalg
import scipy.signal
from scipy.special import comb

logger = logging.getLogger(__name__)

#: Default admissibility margin around the unit circle for inversion.
INVERSION_MARGIN = 0.02
#: Annulus margin used by the random 30th-order generator.
GENERATOR_MARGIN = 0.04
#: Relative l1 mass allowed outside the FIR window before warning.
TAIL_TOLERANCE = 1e-3
#: Roots closer than this are treated as one repeated root.
CLUSTER_TOL = 1e-7


class DimensionError(ValueError):
    """Raised when state-space dimensions are inconsistent."""


class NonInvertiblePlantError(ValueError):
    """Raised when a plant has a zero too close to the unit circle."""


class BandwidthUndefinedError(ValueError):
    """Raised when no -3 dB crossing exists in the search range."""


class MatrixExponentialError(ArithmeticError):
    """Raised when the matrix exponential does not produce finite values."""


class RejectionLimitError(RuntimeError):
    """Raised when rejection sampling exceeds its budget."""


class TruncationWarning(UserWarning):
    """FIR window too short to hold the requested share of the l1 mass."""


def _as_complex_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=complex).ravel()
    return arr


def _real_poly(roots: np.ndarray) -> np.ndarray:
    """Monic polynomial (descending powers) with the given roots, real part."""
    coeffs = np.poly(roots) if roots.size else np.array([1.0])
    coeffs = np.atleast_1d(coeffs)
    return np.real(coeffs).astype(float)


@dataclass(frozen=True)
class DiscreteRational:
    """Real-rational transfer function in the forward shift ``q``.

    Stored in zero/pole/gain form: ``gain * prod(q - z) / prod(q - p)``.

    Attributes:
        zeros: Complex zeros, in conjugate pairs.
        poles: Complex poles, in conjugate pairs.
        gain: Leading-coefficient ratio.
        sample_time: Positive float (seconds) or ``"normalized"``.
    """

    zeros: np.ndarray
    poles: np.ndarray
    gain: float
    sample_time: Union[float, str] = "normalized"

    def __post_init__(self):
        z = _as_complex_array(self.zeros)
        p = _as_complex_array(self.poles)
        if z.size > p.size:
            raise ValueError(f"improper system: {z.size} zeros > {p.size} poles")
        if isinstance(self.sample_time, str):
            if self.sample_time != "normalized":
                raise ValueError("sample_time must be positive or 'normalized'")
        elif not self.sample_time > 0:
            raise ValueError("sample_time must be positive")
        object.__setattr__(self, "zeros", z)
        object.__setattr__(self, "poles", p)
        object.__setattr__(self, "gain", float(self.gain))

    @property
    def is_biproper(self) -> bool:
        return self.zeros.size == self.poles.size

    @property
    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles) < 1.0))

    @property
    def is_minimum_phase(self) -> bool:
        return bool(np.all(np.abs(self.zeros) < 1.0))

    def num(self) -> np.ndarray:
        """Numerator coefficients in descending powers of q."""
        return self.gain * _real_poly(self.zeros)

    def den(self) -> np.ndarray:
        """Denominator coefficients in descending powers of q."""
        return _real_poly(self.poles)

    def freqresp(self, omega) -> np.ndarray:
        """Evaluate P(e^{j omega}) at normalized frequencies."""
        e = np.exp(1j * np.asarray(omega, dtype=float))
        return _zpk_eval(self.zeros, self.poles, self.gain, e)

    def filter(self, x) -> np.ndarray:
        """Causal response to ``x`` from zero initial state."""
        x = np.asarray(x, dtype=float)
        if self.zeros.size == 0 and self.poles.size == 0:
            return self.gain * x
        sos = scipy.signal.zpk2sos(self.zeros, self.poles, self.gain)
        return scipy.signal.sosfilt(sos, x)

    def impulse_response(self, length: int) -> np.ndarray:
        """First ``length`` taps of the causal impulse response."""
        x = np.zeros(length)
        x[0] = 1.0
        return self.filter(x)

    def to_dict(self) -> dict:
        return {
            "zeros": [[float(z.real), float(z.imag)] for z in self.zeros],
            "poles": [[float(p.real), float(p.imag)] for p in self.poles],
            "gain": self.gain,
            "sample_time": self.sample_time,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DiscreteRational":
        zeros = [complex(re, im) for re, im in data["zeros"]]
        poles = [complex(re, im) for re, im in data["poles"]]
        return cls(np.array(zeros, dtype=complex), np.array(poles, dtype=complex),
                   data["gain"], data.get("sample_time", "normalized"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "DiscreteRational":
        return cls.from_dict(json.loads(text))


def _zpk_eval(zeros, poles, gain, points) -> np.ndarray:
    points = np.asarray(points, dtype=complex)
    val = np.full(points.shape, gain, dtype=complex)
    for z in zeros:
        val = val * (points - z)
    for p in poles:
        val = val / (points - p)
    return val


@dataclass(frozen=True)
class StateSpaceModel:
    """Single-input single-output state-space model.

    Attributes:
        A: n x n state matrix.
        B: n x 1 input matrix.
        C: 1 x n output matrix.
        D: Scalar feedthrough.
        time_domain: ``"continuous"`` or ``"discrete"``.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: float
    time_domain: str = "discrete"

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionError(f"A must be square, got shape {A.shape}")
        B = np.asarray(self.B, dtype=float).reshape(-1, 1) if np.size(self.B) else np.zeros((n, 1))
        C = np.asarray(self.C, dtype=float).reshape(1, -1) if np.size(self.C) else np.zeros((1, n))
        if B.shape[0] != n:
            raise DimensionError(f"B has {B.shape[0]} rows, A is {n}x{n}")
        if C.shape[1] != n:
            raise DimensionError(f"C has {C.shape[1]} columns, A is {n}x{n}")
        if self.time_domain not in ("continuous", "discrete"):
            raise ValueError("time_domain must be 'continuous' or 'discrete'")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", float(np.asarray(self.D).ravel()[0]))

    @property
    def order(self) -> int:
        return self.A.shape[0]

    def is_stable(self) -> bool:
        eig = np.linalg.eigvals(self.A)
        if self.time_domain == "discrete":
            return bool(np.all(np.abs(eig) < 1.0))
        return bool(np.all(eig.real < 0.0))

    def to_rational(self) -> DiscreteRational:
        """Zero/pole/gain form of a bi-proper discrete model (``D != 0``).

        Zeros are the eigenvalues of ``A - B C / D``, which avoids forming
        high-order polynomials.
        """
        if self.D == 0.0:
            raise ValueError("to_rational requires nonzero feedthrough D")
        poles = np.linalg.eigvals(self.A)
        zeros = np.linalg.eigvals(self.A - self.B @ self.C / self.D)
        return DiscreteRational(zeros, poles, self.D)


def simulate(sys: StateSpaceModel, u, initial_state=None) -> np.ndarray:
    """Simulate a discrete state-space model.

    Args:
        sys: Discrete-time model.
        u: Input sequence.
        initial_state: State at the first sample; zero when omitted.

    Returns:
        Output sequence with the same length as ``u``.
    """
    if sys.time_domain != "discrete":
        raise ValueError("simulate requires a discrete-time model")
    u = np.asarray(u, dtype=float).ravel()
    n = sys.order
    x = np.zeros(n) if initial_state is None else np.asarray(initial_state, dtype=float).ravel()
    if x.size != n:
        raise DimensionError(f"initial_state has dimension {x.size}, expected {n}")
    A, b, c = sys.A, sys.B[:, 0], sys.C[0]
    y = np.empty_like(u)
    for t, ut in enumerate(u):
        y[t] = c @ x + sys.D * ut
        x = A @ x + b * ut
    return y


def zoh_discretize(sys: StateSpaceModel, Ts: float) -> StateSpaceModel:
    """Zero-order-hold equivalent via the augmented matrix exponential."""
    if not Ts > 0:
        raise ValueError("Ts must be positive")
    if sys.time_domain != "continuous":
        raise ValueError("zoh_discretize requires a continuous-time model")
    n = sys.order
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = sys.A * Ts
    aug[:n, n:] = sys.B * Ts
    with np.errstate(all="ignore"):
        E = scipy.linalg.expm(aug)
    if not np.all(np.isfinite(E)):
        raise MatrixExponentialError(
            f"expm failed: ||A*Ts||_1={np.linalg.norm(sys.A * Ts, 1):.3e}, "
            f"||B*Ts||_1={np.linalg.norm(sys.B * Ts, 1):.3e}")
    return StateSpaceModel(E[:n, :n], E[:n, n:], sys.C, sys.D, "discrete")


def _ct_gain(sys: StateSpaceModel, omega) -> np.ndarray:
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    n = sys.order
    M = 1j * omega[:, None, None] * np.eye(n) - sys.A[None]
    rhs = np.broadcast_to(sys.B.astype(complex), (omega.size, n, 1))
    x = np.linalg.solve(M, rhs)
    H = (sys.C[None] @ x)[:, 0, 0] + sys.D
    return np.abs(H)


def bandwidth(sys: StateSpaceModel, w_min: float = 1e-6, w_max: float = 1e9,
              rtol: float = 1e-6, points_per_decade: int = 40) -> float:
    """First frequency (rad/s) where the gain falls 3 dB below DC.

    Args:
        sys: Stable continuous-time model with nonzero DC gain.
        w_min: Lower end of the search range.
        w_max: Upper end of the search range.
        rtol: Relative tolerance of the bisection.
        points_per_decade: Density of the bracketing grid.

    Returns:
        The -3 dB frequency.
    """
    if sys.time_domain != "continuous":
        raise ValueError("bandwidth requires a continuous-time model")
    dc = abs(sys.D - (sys.C @ np.linalg.solve(sys.A, sys.B))[0, 0])
    if dc == 0.0 or not np.isfinite(dc):
        raise BandwidthUndefinedError("bandwidth undefined: zero DC gain")
    level = dc / math.sqrt(2.0)
    decades = math.log10(w_max) - math.log10(w_min)
    grid = np.logspace(math.log10(w_min), math.log10(w_max),
                       int(round(decades * points_per_decade)) + 1)
    below = np.nonzero(_ct_gain(sys, grid) < level)[0]
    if below.size == 0:
        raise BandwidthUndefinedError(
            "bandwidth undefined: no -3 dB crossing in "
            f"[{w_min:g}, {w_max:g}] rad/s")
    i = below[0]
    if i == 0:
        return float(grid[0])
    lo, hi = math.log(grid[i - 1]), math.log(grid[i])
    while hi - lo > rtol * 0.5:
        mid = 0.5 * (lo + hi)
        if _ct_gain(sys, math.exp(mid))[0] < level:
            hi = mid
        else:
            lo = mid
    return math.exp(0.5 * (lo + hi))


@dataclass(frozen=True)
class NoncausalFir:
    """Two-sided finite impulse response ``g(-n_a), ..., g(n_c)``.

    ``coeffs[i]`` holds ``g(i - n_a)``.
    """

    coeffs: np.ndarray
    n_a: int
    n_c: int

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float).ravel()
        if self.n_a < 0 or self.n_c < 0:
            raise ValueError("orders must be non-negative")
        if c.size != self.n_a + self.n_c + 1:
            raise ValueError(
                f"expected {self.n_a + self.n_c + 1} coefficients, got {c.size}")
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "n_a", int(self.n_a))
        object.__setattr__(self, "n_c", int(self.n_c))

    @property
    def lags(self) -> np.ndarray:
        return np.arange(-self.n_a, self.n_c + 1)

    def __call__(self, k: int) -> float:
        if not -self.n_a <= k <= self.n_c:
            raise IndexError(f"lag {k} outside [{-self.n_a}, {self.n_c}]")
        return float(self.coeffs[k + self.n_a])

    def window(self, n_a: int, n_c: int) -> "NoncausalFir":
        """Restrict (or zero-pad) to another window."""
        out = np.zeros(n_a + n_c + 1)
        for k in range(max(-n_a, -self.n_a), min(n_c, self.n_c) + 1):
            out[k + n_a] = self.coeffs[k + self.n_a]
        return NoncausalFir(out, n_a, n_c)

    def apply(self, x) -> np.ndarray:
        """Two-sided convolution ``w(t) = sum_k g(k) x(t - k)`` on the valid range.

        The output index ``j`` corresponds to input index ``j + n_c``.
        """
        return np.convolve(np.asarray(x, dtype=float), self.coeffs, mode="valid")

    def to_csv(self, fmt: str = "%.17g") -> str:
        buf = io.StringIO()
        buf.write("k,g\n")
        for k, g in zip(self.lags, self.coeffs):
            buf.write(f"{k},{fmt % g}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "NoncausalFir":
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        if lines[0].strip() != "k,g":
            raise ValueError("expected header 'k,g'")
        rows = [ln.split(",") for ln in lines[1:]]
        ks = np.array([int(r[0]) for r in rows])
        gs = np.array([float(r[1]) for r in rows])
        if np.any(np.diff(ks) != 1):
            raise ValueError("lags must be consecutive")
        return cls(gs, int(-ks[0]), int(ks[-1]))


def _check_invertible(P: DiscreteRational, margin: float) -> None:
    mags = np.abs(P.zeros)
    bad = (mags >= 1.0 - margin) & (mags <= 1.0 + margin)
    if np.any(bad):
        raise NonInvertiblePlantError(
            f"non-invertible plant: zero magnitude {mags[bad][0]:.6g} inside "
            f"[{1 - margin:g}, {1 + margin:g}]")


def _cluster(roots: np.ndarray, tol: float):
    """Group roots closer than ``tol``; returns (center, multiplicity, members)."""
    remaining = list(range(roots.size))
    clusters = []
    while remaining:
        i = remaining.pop(0)
        members = [i]
        for j in list(remaining):
            if abs(roots[j] - roots[i]) <= tol:
                members.append(j)
                remaining.remove(j)
        clusters.append((roots[members].mean(), len(members), members))
    return clusters


def _taylor_linear_product(shifts: np.ndarray, order: int) -> np.ndarray:
    """Ascending Taylor coefficients of prod(x + shift), truncated at ``order``."""
    out = np.zeros(order, dtype=complex)
    out[0] = 1.0
    for s in shifts:
        nxt = out * s
        nxt[1:] += out[:-1]
        out = nxt
    return out


def _inverse_terms(P: DiscreteRational):
    """Partial fractions of 1/P: direct term and [(root, [A_1..A_m])]."""
    clusters = _cluster(P.zeros, CLUSTER_TOL)
    terms = []
    for center, m, members in clusters:
        others = np.delete(P.zeros, members)
        num = _taylor_linear_product(center - P.poles, m)
        den = P.gain * _taylor_linear_product(center - others, m)
        h = np.zeros(m, dtype=complex)
        for i in range(m):
            acc = num[i] - sum(den[j] * h[i - j] for j in range(1, i + 1))
            h[i] = acc / den[0]
        # coefficient of (q - center)^{-p} is h[m - p]
        amps = [h[m - p] for p in range(1, m + 1)]
        terms.append((center, amps))
    return 1.0 / P.gain, terms


def _evaluate_terms(direct, terms, lags: np.ndarray) -> np.ndarray:
    lags = np.asarray(lags)
    g = np.zeros(lags.shape, dtype=complex)
    g[lags == 0] += direct
    for z, amps in terms:
        for p, A in enumerate(amps, start=1):
            if abs(z) < 1.0:
                mask = lags >= p
                k = lags[mask]
                g[mask] += A * comb(k - 1, p - 1) * z ** (k - p).astype(float)
            else:
                mask = lags <= 0
                j = -lags[mask]
                g[mask] += A * (-1.0) ** p * comb(j + p - 1, p - 1) * z ** (-(p + j)).astype(float)
    return g


def noncausal_inverse_ir(P: DiscreteRational, n_a: int, n_c: int,
                         margin: float = INVERSION_MARGIN,
                         tail_tol: float = TAIL_TOLERANCE) -> NoncausalFir:
    """Two-sided impulse response of ``1/P`` on the window ``[-n_a, n_c]``.

    Zeros of ``P`` inside the unit circle give causal geometric branches,
    zeros outside give anti-causal ones.

    Args:
        P: Bi-proper stable plant.
        n_a: Anti-causal order.
        n_c: Causal order.
        margin: Zeros with magnitude in ``[1-margin, 1+margin]`` are rejected.
        tail_tol: Warn when more than this share of the l1 mass falls
            outside the window.

    Returns:
        The truncated inverse impulse response.
    """
    if not P.is_biproper:
        raise ValueError("plant must be bi-proper")
    if not P.is_stable:
        raise ValueError("plant must be stable")
    _check_invertible(P, margin)
    direct, terms = _inverse_terms(P)
    lags = np.arange(-n_a, n_c + 1)
    g = _evaluate_terms(direct, terms, lags)

    # l1 mass beyond the window, evaluated on an extension long enough for
    # the slowest branch to decay below double precision
    if terms:
        rates = [abs(z) if abs(z) < 1 else 1.0 / abs(z) for z, _ in terms]
        slow = max(rates)
        ext = 1 if slow <= 0 else int(min(200000, math.ceil(-37.0 / math.log(slow)) + 8))
        outer = np.concatenate([np.arange(-n_a - ext, -n_a), np.arange(n_c + 1, n_c + 1 + ext)])
        tail = float(np.sum(np.abs(_evaluate_terms(direct, terms, outer))))
        inside = float(np.sum(np.abs(g)))
        if tail > tail_tol * (inside + tail):
            warnings.warn(
                f"window [-{n_a}, {n_c}] misses {tail / (inside + tail):.3e} of the "
                f"l1 mass (tail estimate {tail:.3e})", TruncationWarning, stacklevel=2)
    return NoncausalFir(np.real(g), n_a, n_c)


def noncausal_inverse_ir_fft_oracle(P: DiscreteRational, half_window: int,
                                    grid_size: int,
                                    margin: float = INVERSION_MARGIN) -> NoncausalFir:
    """Frequency-sampling inverse: inverse DFT of ``1/P(e^{jw})``.

    Args:
        P: Plant without zeros near the unit circle.
        half_window: Returned lags are ``-half_window..half_window``.
        grid_size: Power-of-two number of frequency samples, at least
            ``8 * half_window``.
    """
    if grid_size < 8 * half_window or grid_size & (grid_size - 1):
        raise ValueError("grid_size must be a power of two >= 8*half_window")
    _check_invertible(P, margin)
    w = 2.0 * np.pi * np.arange(grid_size) / grid_size
    G = 1.0 / P.freqresp(w)
    g = np.fft.ifft(G)
    idx = np.arange(-half_window, half_window + 1) % grid_size
    return NoncausalFir(np.real(g[idx]), half_window, half_window)


def d1_system() -> DiscreteRational:
    """Fixed fourth-order non-minimum-phase plant used by data bank D1."""
    num = np.polymul([1.0, -2.035, 1.052], [1.0, -1.844, 0.9391])
    den = np.polymul([1.0, 0.0, 0.0], np.polymul([1.0, -0.9514], [1.0, -0.9511]))
    zeros = np.roots(num)
    zeros = np.where(np.abs(zeros.imag) < 1e-14, zeros.real, zeros)
    return DiscreteRational(zeros, np.roots(den), 1.550)


def _clears_annulus(roots: np.ndarray, margin: float) -> bool:
    mags = np.abs(roots)
    return bool(np.all((mags < 1.0 - margin) | (mags > 1.0 + margin)))


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def random_continuous_model(rng: np.random.Generator, order: int = 30) -> StateSpaceModel:
    """Random stable continuous model with bi-proper feedthrough."""
    M = rng.standard_normal((order, order))
    mu = rng.uniform(0.1, 1.0)
    shift = np.max(np.linalg.eigvals(M).real) + mu
    A = M - shift * np.eye(order)
    B = rng.standard_normal((order, 1))
    C = rng.standard_normal((1, order))
    D = rng.standard_normal()
    while abs(D) < 0.05:
        D = rng.standard_normal()
    return StateSpaceModel(A, B, C, D, "continuous")


def random_system_d2(rng_seed, order: int = 30, margin: float = GENERATOR_MARGIN,
                     max_rejections: int = 10_000) -> DiscreteRational:
    """Random stable, bi-proper, non-minimum-phase plant (data bank D2).

    Draws continuous models, discretizes them at a hundred times their
    bandwidth and keeps the first whose poles and zeros avoid the annulus
    ``1 - margin < |z| < 1 + margin``.
    """
    rng = _rng(rng_seed)
    for attempt in range(max_rejections + 1):
        ct = random_continuous_model(rng, order)
        try:
            bw = bandwidth(ct)
            Ts = 2.0 * np.pi / (100.0 * bw)
            P = zoh_discretize(ct, Ts).to_rational()
        except (BandwidthUndefinedError, MatrixExponentialError, np.linalg.LinAlgError):
            continue
        if (P.is_stable and not P.is_minimum_phase
                and _clears_annulus(P.poles, margin) and _clears_annulus(P.zeros, margin)):
            logger.debug("D2 system accepted after %d rejections", attempt)
            return DiscreteRational(P.zeros, P.poles, P.gain, float(Ts))
    raise RejectionLimitError(
        f"no admissible system after {max_rejections} rejections; "
        "consider relaxing the annulus margin")


def perturb_zeros_d3(sys: DiscreteRational, rng_seed) -> DiscreteRational:
    """Replace the two smallest-magnitude zeros by real zeros in [0.8, 0.9] and [1.1, 1.2].

    The removed pair is either a complex-conjugate pair or two real zeros,
    so the result keeps real coefficients.
    """
    if sys.zeros.size < 2:
        raise ValueError("need at least two zeros")
    rng = _rng(rng_seed)
    zeros = sys.zeros
    order = list(np.argsort(np.abs(zeros), kind="stable"))
    real = [j for j in order if zeros[j].imag == 0]
    first = order[0]
    if zeros[first].imag != 0 or len(real) < 2:
        # smallest conjugate pair
        a = next(j for j in order if zeros[j].imag != 0)
        mate = min((j for j in order if j != a),
                   key=lambda j: abs(zeros[j] - np.conj(zeros[a])))
        drop = [a, mate]
    else:
        # two smallest real zeros; a complex pair in between is skipped
        drop = real[:2]
    z1 = rng.uniform(0.8, 0.9)
    z2 = rng.uniform(1.1, 1.2)
    kept = np.delete(zeros, drop)
    new = np.concatenate([kept, [z1 + 0j, z2 + 0j]])
    return DiscreteRational(new, sys.poles, sys.gain, sys.sample_time)


def random_system_d4(rng_seed) -> DiscreteRational:
    """Fourth-order plant with mirrored zero pairs (data bank D4).

    ``P(q) = (q-0.9)(q-1/0.9)(q-z2)(q-1/z2) / prod_i (q-p_i)`` with ``z2``
    and the four poles uniform on ``[0, 0.9]``.
    """
    rng = _rng(rng_seed)
    z2 = rng.uniform(0.0, 0.9)
    poles = rng.uniform(0.0, 0.9, size=4)
    zeros = np.array([0.9, 1.0 / 0.9, z2, 1.0 / z2])
    return DiscreteRational(zeros.astype(complex), poles.astype(complex), 1.0)
