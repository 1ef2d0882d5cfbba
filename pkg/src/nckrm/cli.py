"""Command-line entry point: ``nckrm <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import bench
from .kernels import KernelDomainError, KernelSpec, canonical_family, gram
from .semisep import dense_cholesky, fo_generators, structured_cholesky

logger = logging.getLogger("nckrm")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# well-conditioned first-order kernel used for factorization timing
CHOL_BENCH_ETA = (0.99, 0.99, 1.0, 1.0, 1.0, 0.999, 0.999, 1.0, 1.0)


class UsageError(Exception):
    """Bad flag values detected after parsing."""

    usage_shown = False


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        exc = UsageError(message)
        exc.usage_shown = True
        raise exc


def _int_list(text: str):
    try:
        vals = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc
    if not vals:
        raise UsageError("empty integer list")
    return vals


def _float_list(text: str):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


def _families(text):
    names = text if isinstance(text, list) else str(text).split(",")
    try:
        return [canonical_family(n.strip()) for n in names if n.strip()]
    except KeyError as exc:
        raise UsageError(exc.args[0]) from exc


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nckrm", description="Non-causal kernel-based FIR identification benchmarks.")
    p.add_argument("--config", help="JSON file with default flag values (flags win)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    d = sub.add_parser("databank", help="generate a data bank")
    d.add_argument("--id", dest="bank_id")
    d.add_argument("--n", type=int)
    d.add_argument("--nmax", type=int)
    d.add_argument("--seed", type=int)
    d.add_argument("--out")

    b = sub.add_parser("benchmark", help="run the Monte-Carlo benchmark on a data bank")
    b.add_argument("--bank")
    b.add_argument("--families")
    b.add_argument("--N", dest="N_values")
    b.add_argument("--runs", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--out")
    b.add_argument("--na", type=int, dest="n_a")
    b.add_argument("--nc", type=int, dest="n_c")
    b.add_argument("--jobs", type=int)

    k = sub.add_parser("kernel-dump", help="write kernel values on a grid as CSV")
    k.add_argument("--family")
    k.add_argument("--eta")
    k.add_argument("--tmin", type=int)
    k.add_argument("--tmax", type=int)
    k.add_argument("--out")

    c = sub.add_parser("chol-bench", help="time dense and structured Cholesky")
    c.add_argument("--n", dest="sizes")
    c.add_argument("--repeats", type=int)
    c.add_argument("--out")
    p.subcommands = {"databank": d, "benchmark": b, "kernel-dump": k, "chol-bench": c}
    return p


DEFAULTS = {
    "databank": {"seed": 0, "nmax": None},
    "benchmark": {"seed": 0, "runs": 50, "families": "ncsifo", "N_values": None, "jobs": None,
                  "out": None, "n_a": None, "n_c": None},
    "kernel-dump": {"tmin": -20, "tmax": 20, "out": None},
    "chol-bench": {"sizes": "1000,2000,4000,8000", "repeats": 1, "out": None},
}


def _merge_config(args, parser) -> argparse.Namespace:
    # precedence: explicit flag > config file > built-in default
    merged = dict(DEFAULTS.get(args.command, {}))
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError("config must be a JSON object")
        section = cfg.get(args.command, cfg)
        key_map = {"id": "bank_id", "N": "N_values", "n_a": "n_a", "n_c": "n_c", "n": None}
        for key, val in section.items():
            if not isinstance(key, str) or isinstance(val, dict):
                continue
            dest = key_map.get(key, key)
            if key == "n":
                dest = "sizes" if args.command == "chol-bench" else "n"
            merged[dest] = ",".join(map(str, val)) if isinstance(val, list) else val
    for key, val in vars(args).items():
        if val is not None:
            merged[key] = val
    return argparse.Namespace(**merged)


def _emit(text: str, out) -> None:
    if out:
        path = Path(out)
        if path.parent and not path.parent.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_databank(ns) -> int:
    bank_id = str(getattr(ns, "bank_id", "") or "").upper()
    if bank_id not in bench.BANK_IDS:
        raise UsageError(f"--id must be one of d1, d2, d3, d4 (got {bank_id.lower() or 'nothing'})")
    n = getattr(ns, "n", None)
    if n is None or n < 1:
        raise UsageError("--n must be a positive integer")
    if ns.nmax is not None and ns.nmax < 1:
        raise UsageError("--nmax must be positive")
    if not getattr(ns, "out", None):
        raise UsageError("--out is required")
    manifest = bench.make_databank(bank_id, n, ns.nmax, ns.seed, ns.out)
    hashes = {e["system_hash"] for e in manifest["datasets"]}
    print(f"{manifest['id']}: {manifest['n_systems']} datasets, N_max={manifest['N_max']}, "
          f"{len(hashes)} distinct systems -> {ns.out}")
    return EXIT_OK


def cmd_benchmark(ns) -> int:
    if not getattr(ns, "bank", None):
        raise UsageError("--bank is required")
    if ns.runs is None or ns.runs < 1:
        raise UsageError("--runs must be a positive integer")
    if ns.jobs is not None and ns.jobs < 1:
        raise UsageError("--jobs must be positive")
    try:
        manifest = bench.load_manifest(ns.bank)
    except bench.DatabankError as exc:
        raise UsageError(str(exc)) from exc
    families = _families(ns.families)
    N_values = _int_list(ns.N_values) if ns.N_values else [manifest["N_max"]]
    if any(N < 1 for N in N_values):
        raise UsageError("--N values must be positive")
    for name in ("n_a", "n_c"):
        val = getattr(ns, name)
        if val is not None and val < 0:
            raise UsageError(f"--{name.replace('_', '')} must be non-negative")
    records, summary = bench.run_benchmark(ns.bank, families, N_values, ns.runs, ns.seed,
                                           out_dir=ns.out, n_a=ns.n_a, n_c=ns.n_c, jobs=ns.jobs)
    print(f"{'family':<12}{'N':>6}  {'FIT':>14}  {'ERR':>14}  failures")
    for row in summary:
        fit, err = row["fit"], row["err"]
        print(f"{row['family']:<12}{row['N']:>6}  "
              f"{bench.format_mean_std(fit['mean'], fit['std']):>14}  "
              f"{bench.format_mean_std(err['mean'], err['std'], 3):>14}  {row['failures']}")
    return EXIT_OK


def cmd_kernel_dump(ns) -> int:
    if not getattr(ns, "family", None):
        raise UsageError("--family is required")
    family = _families(ns.family)[0]
    eta = _float_list(ns.eta) if getattr(ns, "eta", None) is not None else []
    if ns.tmin > ns.tmax:
        raise UsageError("--tmin must not exceed --tmax")
    if family == "OPTIMAL":
        raise UsageError("the OPTIMAL kernel needs a true response and cannot be dumped")
    try:
        spec = KernelSpec(family, eta)
    except (KernelDomainError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    grid = np.arange(ns.tmin, ns.tmax + 1)
    K = gram(spec, grid)
    buf = io.StringIO()
    buf.write("t,s,k\n")
    for i, t in enumerate(grid):
        for j, s in enumerate(grid):
            buf.write(f"{t},{s},{K[i, j]:.6g}\n")
    _emit(buf.getvalue(), ns.out)
    return EXIT_OK


def chol_timings(sizes, repeats: int = 1, eta=CHOL_BENCH_ETA):
    """Best-of-``repeats`` seconds for dense and structured factorizations.

    The dense timing covers only the factorization of a prebuilt matrix.
    """
    spec = KernelSpec("NCSI-FO", eta)
    rows = []
    for n in sizes:
        grid = np.arange(-(n // 2), n - n // 2)
        gen = fo_generators(spec, grid)
        dense = gen.dense()
        best_d = best_s = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            dense_cholesky(dense)
            best_d = min(best_d, time.perf_counter() - t0)
            t0 = time.perf_counter()
            structured_cholesky(gen)
            best_s = min(best_s, time.perf_counter() - t0)
        del dense
        rows.append((n, "dense", best_d))
        rows.append((n, "structured", best_s))
    return rows


def cmd_chol_bench(ns) -> int:
    sizes = _int_list(ns.sizes)
    if any(n < 1 for n in sizes):
        raise UsageError("--n values must be positive")
    if ns.repeats < 1:
        raise UsageError("--repeats must be positive")
    rows = chol_timings(sizes, ns.repeats)
    text = "n,method,seconds\n" + "".join(f"{n},{m},{s:.6g}\n" for n, m, s in rows)
    _emit(text, ns.out)
    return EXIT_OK


COMMANDS = {
    "databank": cmd_databank,
    "benchmark": cmd_benchmark,
    "kernel-dump": cmd_kernel_dump,
    "chol-bench": cmd_chol_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = None
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        ns = _merge_config(args, parser)
        return COMMANDS[args.command](ns)
    except UsageError as exc:
        if not exc.usage_shown:
            command = getattr(args, "command", None)
            parser.subcommands.get(command, parser).print_usage(sys.stderr)
        print(f"nckrm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:          # --help
        return int(exc.code or 0)
    except Exception as exc:
        print(f"nckrm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
