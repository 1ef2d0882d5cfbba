"""Data banks, FIT/ERR scoring and the Monte-Carlo benchmark runner."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .estimator import identify
from .kernels import canonical_family
from .lti import (DiscreteRational, NoncausalFir, TruncationWarning, d1_system, noncausal_inverse_ir,
                  perturb_zeros_d3, random_system_d2, random_system_d4)

logger = logging.getLogger(__name__)

BANK_IDS = ("D1", "D2", "D3", "D4")
DEFAULT_NMAX = {"D1": 2000, "D2": 700, "D3": 700, "D4": 700}
NOISE_RATIO = 0.1
ERR_LENGTH = 1000
RECORD_HEADER = ("databank", "family", "N", "run", "fit", "err")


class FitUndefinedError(ValueError):
    """The true response is constant on the window."""


class DatabankError(RuntimeError):
    """Problems reading or writing a data bank."""


def default_orders(bank_id: str):
    """Window ``(n_a, n_c)``: 150 taps each side for D1, 50 otherwise."""
    return (150, 150) if bank_id.upper() == "D1" else (50, 50)


@dataclass
class Dataset:
    u: np.ndarray
    y: np.ndarray
    N_max: int
    system_ref: DiscreteRational
    true_inverse: NoncausalFir
    noise_sigma2: float
    seed: int

    def truncate(self, N: int):
        if N > self.N_max:
            raise ValueError(f"N={N} exceeds the {self.N_max} stored samples")
        return self.u[:N], self.y[:N]


@dataclass(frozen=True)
class BenchmarkRecord:
    databank: str
    family: str
    N: int
    run: int
    fit: float
    err: float

    @property
    def failed(self) -> bool:
        return not (np.isfinite(self.fit) and np.isfinite(self.err))


def _true_inverse(P: DiscreteRational, n_a: int, n_c: int) -> NoncausalFir:
    # a truncated tail is expected for lightly damped inverses; scoring uses the window only
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        return noncausal_inverse_ir(P, n_a, n_c)


def simulate_dataset(P: DiscreteRational, N_max: int, n_a: int, n_c: int, seed) -> Dataset:
    """Simulate ``u = P y0`` and ``y = y0 + v`` for a unit-variance white ``y0``.

    ``y0`` starts ``n_c`` samples before ``t = 1`` (zero plant state there)
    and runs ``n_a`` samples past ``N_max`` so every regression row has
    data. The noise variance is a tenth of the sample variance of ``y0`` on
    ``t = 1..N_max``.
    """
    rng = np.random.default_rng(seed)
    y0_full = rng.standard_normal(N_max + n_a + n_c + 1)    # t = -n_c .. N_max + n_a
    u_full = P.filter(y0_full)
    keep = slice(n_c + 1, n_c + 1 + N_max)
    y0, u = y0_full[keep], u_full[keep]
    sigma2 = NOISE_RATIO * float(np.var(y0, ddof=1))
    y = y0 + math.sqrt(sigma2) * rng.standard_normal(N_max)
    return Dataset(u, y, N_max, P, _true_inverse(P, n_a, n_c), sigma2,
                   seed if isinstance(seed, int) else -1)


def fit_metric(g_hat: NoncausalFir, g_true: NoncausalFir) -> float:
    """``100 (1 - ||g0 - g_hat|| / ||g0 - mean(g0)||)`` on a shared window."""
    if (g_hat.n_a, g_hat.n_c) != (g_true.n_a, g_true.n_c):
        raise ValueError("FIT needs identical windows")
    g0 = g_true.coeffs
    den = float(np.sum((g0 - g0.mean()) ** 2))
    if den == 0.0:
        raise FitUndefinedError("FIT undefined: true response is constant")
    num = float(np.sum((g0 - g_hat.coeffs) ** 2))
    return 100.0 * (1.0 - math.sqrt(num / den))


def err_metric(g_hat: NoncausalFir, P: DiscreteRational, L: int = ERR_LENGTH, seed=0) -> float:
    """RMS tracking error of ``P`` driven by ``g_hat`` applied to white noise.

    The reference covers ``t = 1 - 2 n_c - n_a .. L + n_a`` so the
    feedforward signal exists from ``t = 1 - n_c - n_a``; the plant starts
    there from rest and the error is scored on ``t = 1..L``.
    """
    n_a, n_c = g_hat.n_a, g_hat.n_c
    rng = np.random.default_rng(seed)
    r = rng.standard_normal(L + 2 * n_a + 2 * n_c)
    w = g_hat.apply(r)                      # times 1 - n_c - n_a .. L
    e = r[n_c: n_c + w.size] - P.filter(w)
    tail = e[-L:]
    return math.sqrt(float(tail @ tail) / L)


# --- data banks -----------------------------------------------------------

def _system_hash(P: DiscreteRational) -> str:
    return hashlib.sha256(P.to_json().encode()).hexdigest()[:16]


def _child_seeds(seed: int, count: int):
    # two independent 32-bit seeds per dataset: system draw, data draw
    children = np.random.SeedSequence(seed).spawn(count)
    return [tuple(int(x) for x in c.generate_state(2)) for c in children]


def _make_system(bank_id: str, sys_seed: int) -> DiscreteRational:
    if bank_id == "D1":
        return d1_system()
    if bank_id == "D2":
        return random_system_d2(sys_seed)
    if bank_id == "D3":
        return perturb_zeros_d3(random_system_d2(sys_seed), sys_seed + 1)
    if bank_id == "D4":
        return random_system_d4(sys_seed)
    raise ValueError(f"unknown data bank {bank_id!r}")


def _dataset_csv(u: np.ndarray, y: np.ndarray) -> str:
    buf = io.StringIO()
    buf.write("t,u,y\n")
    for t, (a, b) in enumerate(zip(u, y), start=1):
        buf.write(f"{t},{a:.6g},{b:.6g}\n")
    return buf.getvalue()


def make_databank(bank_id: str, n_systems: int, N_max: Optional[int], seed: int, out_dir) -> dict:
    """Generate and persist a data bank.

    Args:
        bank_id: One of ``D1``..``D4`` (case-insensitive).
        n_systems: Number of datasets.
        N_max: Samples per dataset; ``None`` picks 2000 for D1 and 700 otherwise.
        seed: Master seed.
        out_dir: Target directory (created if needed).

    Returns:
        The manifest written to ``manifest.json``.
    """
    bank_id = bank_id.upper()
    if bank_id not in BANK_IDS:
        raise ValueError(f"unknown data bank {bank_id!r}")
    if n_systems < 1:
        raise ValueError("n_systems must be positive")
    N_max = DEFAULT_NMAX[bank_id] if N_max is None else int(N_max)
    n_a, n_c = default_orders(bank_id)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatabankError(f"cannot create {out}: {exc}") from exc
    entries = []
    for i, (sys_seed, data_seed) in enumerate(_child_seeds(seed, n_systems)):
        P = _make_system(bank_id, sys_seed)
        ds = simulate_dataset(P, N_max, n_a, n_c, data_seed)
        stem = f"ds{i:04d}"
        meta = {"system": P.to_dict(), "system_seed": sys_seed, "data_seed": data_seed,
                "noise_sigma2": ds.noise_sigma2, "N_max": N_max}
        _write(out / f"{stem}.json", json.dumps(meta, indent=1) + "\n")
        _write(out / f"{stem}.csv", _dataset_csv(ds.u, ds.y))
        entries.append({"file": stem, "system_seed": sys_seed, "data_seed": data_seed,
                        "system_hash": _system_hash(P)})
    manifest = {"id": bank_id, "seed": seed, "n_systems": n_systems, "N_max": N_max,
                "n_a": n_a, "n_c": n_c, "datasets": entries}
    _write(out / "manifest.json", json.dumps(manifest, indent=1) + "\n")
    return manifest


def _write(path: Path, text: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise DatabankError(f"cannot write {path}: {exc}") from exc


def load_manifest(bank_dir) -> dict:
    path = Path(bank_dir) / "manifest.json"
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DatabankError(f"no data bank at {bank_dir} (missing {path.name})") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise DatabankError(f"cannot read {path}: {exc}") from exc


def load_dataset(bank_dir, index: int, n_a: Optional[int] = None, n_c: Optional[int] = None) -> Dataset:
    """Read dataset ``index``; the true inverse is recomputed on ``[-n_a, n_c]``."""
    bank = Path(bank_dir)
    manifest = load_manifest(bank)
    entry = manifest["datasets"][index]
    stem = entry["file"]
    try:
        meta = json.loads((bank / f"{stem}.json").read_text(encoding="utf-8"))
        data = np.loadtxt(bank / f"{stem}.csv", delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise DatabankError(f"cannot read dataset {stem} in {bank}: {exc}") from exc
    P = DiscreteRational.from_dict(meta["system"])
    d_na, d_nc = manifest["n_a"], manifest["n_c"]
    n_a = d_na if n_a is None else n_a
    n_c = d_nc if n_c is None else n_c
    return Dataset(data[:, 1].copy(), data[:, 2].copy(), int(meta["N_max"]), P,
                   _true_inverse(P, n_a, n_c), float(meta["noise_sigma2"]), int(entry["data_seed"]))


# --- benchmark ------------------------------------------------------------

def _task_seeds(seed: int, run: int):
    est, ref = np.random.SeedSequence([seed, run]).generate_state(2)
    return int(est), int(ref)


def _round6(x: float) -> float:
    # records carry exactly what the %.6g CSV stores
    return float(f"{x:.6g}") if np.isfinite(x) else math.nan


def _run_task(task) -> BenchmarkRecord:
    bank_dir, bank_id, index, family, N, n_a, n_c, seed, L = task
    est_seed, ref_seed = _task_seeds(seed, index)
    try:
        ds = load_dataset(bank_dir, index, n_a, n_c)
        u, y = ds.truncate(N)
        g0 = ds.true_inverse if family == "OPTIMAL" else None
        res = identify(u, y, family, n_a, n_c, rng_seed=est_seed, g0=g0)
        fit = fit_metric(res.theta_hat, ds.true_inverse)
        err = err_metric(res.theta_hat, ds.system_ref, L, ref_seed)
    except Exception as exc:  # a failed run is recorded, never fatal
        logger.warning("run %d %s N=%d failed: %s", index, family, N, exc)
        fit = err = math.nan
    return BenchmarkRecord(bank_id, family, int(N), int(index), _round6(fit), _round6(err))


def resolve_jobs(jobs: Optional[int] = None) -> int:
    """``jobs`` if given, else ``$NCKRM_JOBS``, else the logical core count."""
    if jobs is None:
        env = os.environ.get("NCKRM_JOBS")
        jobs = int(env) if env else (os.cpu_count() or 1)
    if jobs < 1:
        raise ValueError("jobs must be positive")
    return jobs


def tukey_stats(values: Sequence[float]) -> dict:
    """Mean, sample standard deviation and box-plot statistics with 1.5 IQR whiskers."""
    x = np.asarray([v for v in values if np.isfinite(v)], dtype=float)
    if x.size == 0:
        keys = ("mean", "std", "q1", "median", "q3", "whisker_lo", "whisker_hi")
        return {**{k: math.nan for k in keys}, "n_outliers": 0}
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    iqr = q3 - q1
    inside = x[(x >= q1 - 1.5 * iqr) & (x <= q3 + 1.5 * iqr)]
    return {
        "mean": float(x.mean()),
        "std": float(x.std(ddof=1)) if x.size > 1 else 0.0,
        "q1": float(q1), "median": float(med), "q3": float(q3),
        "whisker_lo": float(inside.min()), "whisker_hi": float(inside.max()),
        "n_outliers": int(x.size - inside.size),
    }


def summarize(records: Sequence[BenchmarkRecord]) -> List[dict]:
    """One summary row per ``(family, N)`` in first-seen order."""
    groups: Dict[tuple, List[BenchmarkRecord]] = {}
    for rec in records:
        groups.setdefault((rec.databank, rec.family, rec.N), []).append(rec)
    rows = []
    for (bank, family, N), recs in groups.items():
        ok = [r for r in recs if not r.failed]
        rows.append({
            "databank": bank, "family": family, "N": N,
            "runs": len(recs), "failures": len(recs) - len(ok),
            "fit": tukey_stats([r.fit for r in ok]),
            "err": tukey_stats([r.err for r in ok]),
        })
    return rows


def records_csv(records: Sequence[BenchmarkRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RECORD_HEADER)
    for r in records:
        writer.writerow([r.databank, r.family, r.N, r.run, f"{r.fit:.6g}", f"{r.err:.6g}"])
    return buf.getvalue()


def read_records(path) -> List[BenchmarkRecord]:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [BenchmarkRecord(r["databank"], r["family"], int(r["N"]), int(r["run"]),
                            float(r["fit"]), float(r["err"])) for r in rows]


def run_benchmark(bank_dir, families: Sequence[str], N_values: Sequence[int], mc_runs: int,
                  seed: int = 0, out_dir=None, n_a: Optional[int] = None, n_c: Optional[int] = None,
                  jobs: Optional[int] = None, L: int = ERR_LENGTH):
    """Identify every ``(family, N, run)`` combination and score it.

    Args:
        bank_dir: Data bank directory (see :func:`make_databank`).
        families: Kernel family names.
        N_values: Data lengths; each run uses the first ``N`` samples.
        mc_runs: Number of datasets used, taken from the start of the bank.
        seed: Seed for tuning starts and the ERR reference.
        out_dir: If given, ``records.csv`` and ``summary.json`` are written there.
        n_a: Anti-causal order (bank default when ``None``).
        n_c: Causal order (bank default when ``None``).
        jobs: Worker processes (see :func:`resolve_jobs`).
        L: ERR test length.

    Returns:
        ``(records, summary)``.
    """
    if mc_runs < 1:
        raise ValueError("mc_runs must be positive")
    manifest = load_manifest(bank_dir)
    bank_id = manifest["id"]
    if mc_runs > len(manifest["datasets"]):
        raise DatabankError(f"bank holds {len(manifest['datasets'])} datasets, {mc_runs} requested")
    n_a = manifest["n_a"] if n_a is None else n_a
    n_c = manifest["n_c"] if n_c is None else n_c
    for N in N_values:
        if N > manifest["N_max"]:
            raise ValueError(f"N={N} exceeds N_max={manifest['N_max']}")
    families = [canonical_family(f) for f in families]
    tasks = [(str(bank_dir), bank_id, run, fam, int(N), n_a, n_c, seed, L)
             for fam in families for N in N_values for run in range(mc_runs)]
    jobs = min(resolve_jobs(jobs), len(tasks))
    if jobs == 1:
        records = [_run_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_task, tasks, chunksize=1))
    summary = summarize(records)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "records.csv", records_csv(records))
        _write(out / "summary.json", json.dumps(summary, indent=1) + "\n")
    return records, summary


def format_mean_std(mean: float, std: float, digits: int = 2) -> str:
    """Tabular form ``76.85( 3.33)``: the standard deviation is padded to the mean's width."""
    m = f"{mean:.{digits}f}"
    return f"{m}({std:{len(m)}.{digits}f})"
