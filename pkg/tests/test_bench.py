import json
import math
import warnings

import numpy as np
import pytest

from nckrm.bench import (BenchmarkRecord, DatabankError, FitUndefinedError, err_metric,
                         fit_metric, format_mean_std, load_dataset, load_manifest, make_databank,
                         read_records, run_benchmark, simulate_dataset, summarize, tukey_stats)
from nckrm.lti import (DiscreteRational, NoncausalFir, TruncationWarning, d1_system,
                       noncausal_inverse_ir)

IDENTITY = DiscreteRational([], [], 1.0)


# --- datasets ---------------------------------------------------------------------

def test_identity_plant_dataset():
    ds = simulate_dataset(IDENTITY, 2000, 5, 5, seed=0)
    noise = ds.y - ds.u
    assert 0.085 <= np.var(noise, ddof=1) <= 0.115
    assert ds.noise_sigma2 == pytest.approx(0.1 * np.var(ds.u, ddof=1))
    assert ds.u.size == ds.y.size == 2000


def test_dataset_is_seed_deterministic():
    a = simulate_dataset(d1_system(), 300, 150, 150, seed=11)
    b = simulate_dataset(d1_system(), 300, 150, 150, seed=11)
    c = simulate_dataset(d1_system(), 300, 150, 150, seed=12)
    assert np.array_equal(a.u, b.u) and np.array_equal(a.y, b.y)
    assert not np.array_equal(a.y, c.y)


def test_d1_signal_to_noise():
    ratios = []
    for seed in range(5):
        ds = simulate_dataset(d1_system(), 2000, 150, 150, seed=seed)
        ratios.append(np.var(ds.y, ddof=1) / ds.noise_sigma2 - 1)
    assert np.mean(ratios) == pytest.approx(10, rel=0.1)


def test_dataset_output_is_plant_input_relation():
    # y0 drives the plant: P applied to the clean output reproduces u
    P = d1_system()
    ds = simulate_dataset(P, 200, 150, 150, seed=3)
    assert ds.true_inverse.n_a == 150 and ds.true_inverse.n_c == 150
    rng = np.random.default_rng(3)
    y0_full = rng.standard_normal(200 + 301)
    assert np.allclose(P.filter(y0_full)[151:351], ds.u)


# --- metrics ----------------------------------------------------------------------

def test_fit_examples():
    g = NoncausalFir([0.0, 1.0, 0.0], 1, 1)
    assert fit_metric(g, g) == 100.0
    mean = NoncausalFir(np.full(3, 1 / 3), 1, 1)
    assert fit_metric(mean, g) == pytest.approx(0.0, abs=1e-12)
    zero = NoncausalFir(np.zeros(3), 1, 1)
    assert fit_metric(zero, g) == pytest.approx(100 * (1 - math.sqrt(1.5)), abs=1e-12)
    assert fit_metric(zero, g) == pytest.approx(-22.474, abs=1e-3)


def test_fit_errors():
    with pytest.raises(FitUndefinedError, match="FIT undefined"):
        fit_metric(NoncausalFir(np.ones(3), 1, 1), NoncausalFir(np.ones(3), 1, 1))
    with pytest.raises(ValueError):
        fit_metric(NoncausalFir(np.ones(3), 1, 1), NoncausalFir(np.arange(4.0), 1, 2))


def test_fit_padding_invariance():
    P = d1_system()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        # the inverse decays slowly; its taps drop below 1e-9 only past about 850
        g = noncausal_inverse_ir(P, 900, 900)
        wide = noncausal_inverse_ir(P, 1200, 1200)
    rng = np.random.default_rng(0)
    g_hat = NoncausalFir(g.coeffs + 0.05 * rng.standard_normal(g.coeffs.size), 900, 900)
    pad = 300
    assert np.max(np.abs(wide.coeffs[:pad])) < 1e-9
    assert np.max(np.abs(wide.coeffs[-pad:])) < 1e-9
    padded_hat = NoncausalFir(np.concatenate([np.zeros(pad), g_hat.coeffs, np.zeros(pad)]), 1200, 1200)
    assert abs(fit_metric(padded_hat, wide) - fit_metric(g_hat, g)) < 0.05


def test_err_identity_inverse():
    g = NoncausalFir([0.0, 1.0, 0.0], 1, 1)
    assert err_metric(g, IDENTITY, 1000, seed=0) <= 1e-12


def test_err_zero_estimate_is_reference_rms():
    g = NoncausalFir(np.zeros(11), 5, 5)
    val = err_metric(g, d1_system(), 1000, seed=4)
    rng = np.random.default_rng(4)
    r = rng.standard_normal(1000 + 20)
    rms = math.sqrt(np.mean(r[-1005:-5] ** 2))
    assert val == pytest.approx(rms, rel=0.05)
    assert val == pytest.approx(1.0, rel=0.1)


def _stationary_tail_err(P, n):
    # RMS of P applied to the taps the window drops, for a unit white reference
    full = noncausal_inverse_ir(P, 3000, 3000)
    dropped = full.coeffs.copy()
    dropped[3000 - n: 3000 + n + 1] = 0.0
    return math.sqrt(np.sum(np.convolve(P.impulse_response(4000), dropped) ** 2))


def test_err_exact_d1_inverse_matches_truncation_floor():
    P = d1_system()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        prev = math.inf
        for n in (150, 200, 300):
            g = noncausal_inverse_ir(P, n, n)
            vals = [err_metric(g, P, 1000, seed=s) for s in range(3)]
            floor = _stationary_tail_err(P, n)
            assert np.mean(vals) == pytest.approx(floor, rel=0.1)
            assert max(vals) < prev
            prev = min(vals)
        g = noncausal_inverse_ir(P, 600, 600)
    assert err_metric(g, P, 1000, seed=0) <= 1e-5


def test_err_nonnegative_and_zero_only_for_exact():
    rng = np.random.default_rng(1)
    for _ in range(5):
        g = NoncausalFir(rng.normal(size=7), 3, 3)
        assert err_metric(g, IDENTITY, 200, seed=2) > 0


# --- data banks ------------------------------------------------------------------

def test_d1_bank_manifest(tmp_path):
    man = make_databank("d1", 3, 300, 7, tmp_path / "d1")
    assert man["id"] == "D1" and man["n_systems"] == 3 and man["N_max"] == 300
    assert len({e["system_hash"] for e in man["datasets"]}) == 1
    for e in man["datasets"]:
        assert (tmp_path / "d1" / f"{e['file']}.csv").exists()
        assert (tmp_path / "d1" / f"{e['file']}.json").exists()
    assert load_manifest(tmp_path / "d1") == man
    ds = load_dataset(tmp_path / "d1", 1)
    assert ds.u.size == 300
    assert np.allclose(ds.system_ref.zeros, d1_system().zeros)


def test_default_lengths(tmp_path):
    assert make_databank("D4", 1, None, 0, tmp_path / "a")["N_max"] == 700
    assert make_databank("D1", 1, None, 0, tmp_path / "b")["N_max"] == 2000


def test_d4_bank_mirrored_zeros(tmp_path):
    man = make_databank("d4", 5, 100, 3, tmp_path / "d4")
    assert len({e["system_hash"] for e in man["datasets"]}) == 5
    for i in range(5):
        z = load_dataset(tmp_path / "d4", i).system_ref.zeros
        assert np.min(np.abs(z - 0.9)) < 1e-12
        assert np.min(np.abs(z - 1 / 0.9)) < 1e-12


def test_bank_regeneration_is_byte_identical(tmp_path):
    make_databank("d3", 2, 120, 5, tmp_path / "x")
    make_databank("d3", 2, 120, 5, tmp_path / "y")
    for name in ("manifest.json", "ds0000.csv", "ds0000.json", "ds0001.csv", "ds0001.json"):
        assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()


def test_bank_errors(tmp_path):
    with pytest.raises(ValueError):
        make_databank("d9", 1, 10, 0, tmp_path / "z")
    with pytest.raises(DatabankError, match="no data bank"):
        load_manifest(tmp_path / "missing")
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DatabankError, match="file"):
        make_databank("d1", 1, 10, 0, blocker / "sub")


# --- benchmark runner --------------------------------------------------------------

@pytest.fixture(scope="module")
def small_bank(tmp_path_factory):
    path = tmp_path_factory.mktemp("bank") / "d4"
    make_databank("d4", 3, 160, 1, path)
    return path


def test_single_record(small_bank):
    records, summary = run_benchmark(small_bank, ["ncbdtcmp"], [160], 1, n_a=8, n_c=8, jobs=1, L=200)
    assert len(records) == 1 and len(summary) == 1
    rec = records[0]
    assert (rec.databank, rec.family, rec.N, rec.run) == ("D4", "NCBD-TC-mp", 160, 0)
    assert rec.fit <= 100 and rec.err >= 0


def test_benchmark_outputs_consistent(small_bank, tmp_path):
    out = tmp_path / "res"
    records, summary = run_benchmark(small_bank, ["NCBD-TC-mp", "NC-TC"], [100, 160], 3, seed=2,
                                     out_dir=out, n_a=8, n_c=8, jobs=2, L=200)
    assert len(records) == 12 and len(summary) == 4
    assert (out / "records.csv").read_text().splitlines()[0] == "databank,family,N,run,fit,err"
    reread = read_records(out / "records.csv")
    assert reread == records
    emitted = json.loads((out / "summary.json").read_text())
    for row, rec_row in zip(emitted, summarize(reread)):
        for key in ("mean", "std"):
            assert row["fit"][key] == pytest.approx(rec_row["fit"][key], abs=1e-12)
            assert row["err"][key] == pytest.approx(rec_row["err"][key], abs=1e-12)
        fits = [r.fit for r in reread if (r.family, r.N) == (row["family"], row["N"])]
        assert row["fit"]["mean"] == pytest.approx(np.mean(fits), abs=1e-12)
        assert row["fit"]["std"] == pytest.approx(np.std(fits, ddof=1), abs=1e-12)
    # a serial run gives identical records
    serial, _ = run_benchmark(small_bank, ["NCBD-TC-mp", "NC-TC"], [100, 160], 3, seed=2,
                              n_a=8, n_c=8, jobs=1, L=200)
    assert serial == records


def test_benchmark_argument_errors(small_bank):
    with pytest.raises(ValueError):
        run_benchmark(small_bank, ["NC-TC"], [160], 0)
    with pytest.raises(DatabankError):
        run_benchmark(small_bank, ["NC-TC"], [160], 10)
    with pytest.raises(ValueError):
        run_benchmark(small_bank, ["NC-TC"], [5000], 1)


def test_failed_runs_are_counted():
    recs = [BenchmarkRecord("D1", "NC-TC", 100, 0, 50.0, 0.1),
            BenchmarkRecord("D1", "NC-TC", 100, 1, math.nan, math.nan),
            BenchmarkRecord("D1", "NC-TC", 100, 2, 60.0, 0.2)]
    row = summarize(recs)[0]
    assert row["runs"] == 3 and row["failures"] == 1
    assert row["fit"]["mean"] == pytest.approx(55.0)


def test_tukey_statistics():
    x = [1.0, 2.0, 3.0, 4.0, 100.0]
    st = tukey_stats(x)
    assert (st["q1"], st["median"], st["q3"]) == (2.0, 3.0, 4.0)
    assert st["whisker_hi"] == 4.0 and st["whisker_lo"] == 1.0
    assert st["n_outliers"] == 1
    assert st["std"] == pytest.approx(np.std(x, ddof=1))


def test_table_formatting():
    assert format_mean_std(76.85, 3.33) == "76.85( 3.33)"
    assert format_mean_std(49.48, 10.11) == "49.48(10.11)"
    assert format_mean_std(0.087, 0.007, 3) == "0.087(0.007)"
