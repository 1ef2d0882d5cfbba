import json
import subprocess
import sys

import numpy as np
import pytest

from nckrm.cli import main


def _read_csv(path):
    lines = path.read_text(encoding="utf-8").splitlines()
    return lines[0], [ln.split(",") for ln in lines[1:]]


def test_no_subcommand_is_usage_error(capsys):
    assert main([]) == 2


def test_databank_and_invalid_id(tmp_path, capsys):
    out = tmp_path / "d1"
    assert main(["databank", "--id", "d1", "--n", "3", "--nmax", "200", "--seed", "7",
                 "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["n_systems"] == 3 and man["N_max"] == 200
    assert "3 datasets" in capsys.readouterr().out
    assert main(["databank", "--id", "d7", "--n", "3", "--out", str(tmp_path / "x")]) == 2
    assert "usage" in capsys.readouterr().err.lower()
    assert main(["databank", "--id", "d1", "--n", "0", "--out", str(tmp_path / "x")]) == 2


def test_databank_d4_default_length(tmp_path):
    assert main(["databank", "--id", "d4", "--n", "2", "--out", str(tmp_path / "d4")]) == 0
    assert json.loads((tmp_path / "d4" / "manifest.json").read_text())["N_max"] == 700


def test_databank_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        main(["databank", "--id", "d2", "--n", "2", "--nmax", "100", "--seed", "3",
              "--out", str(tmp_path / name)])
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


@pytest.fixture(scope="module")
def bank(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "d4"
    assert main(["databank", "--id", "d4", "--n", "2", "--nmax", "150", "--seed", "1",
                 "--out", str(path)]) == 0
    return path


def test_benchmark_summary_rows(bank, tmp_path, capsys):
    out = tmp_path / "res"
    code = main(["benchmark", "--bank", str(bank), "--families", "nctc,ncbdtcmp", "--N", "100,150",
                 "--runs", "1", "--na", "6", "--nc", "6", "--jobs", "1", "--out", str(out)])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary) == 4
    header, rows = _read_csv(out / "records.csv")
    assert header == "databank,family,N,run,fit,err" and len(rows) == 4
    printed = capsys.readouterr().out
    assert "NC-TC" in printed and "(" in printed
    # a second run reproduces the files byte for byte
    out2 = tmp_path / "res2"
    main(["benchmark", "--bank", str(bank), "--families", "nctc,ncbdtcmp", "--N", "100,150",
          "--runs", "1", "--na", "6", "--nc", "6", "--jobs", "1", "--out", str(out2)])
    for name in ("records.csv", "summary.json"):
        assert (out / name).read_bytes() == (out2 / name).read_bytes()


def test_benchmark_usage_errors(bank, tmp_path):
    assert main(["benchmark", "--bank", str(bank), "--runs", "0"]) == 2
    assert main(["benchmark", "--bank", str(tmp_path / "missing"), "--runs", "1"]) == 2
    assert main(["benchmark", "--bank", str(bank), "--runs", "1", "--families", "bogus"]) == 2
    assert main(["benchmark", "--bank", str(bank), "--runs", "1", "--jobs", "0"]) == 2


def test_config_file_and_flag_precedence(bank, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"benchmark": {"runs": 1, "families": ["nctc"], "N": [120],
                                             "n_a": 5, "n_c": 5, "jobs": 1,
                                             "out": str(tmp_path / "from_cfg")}}))
    assert main(["--config", str(cfg), "benchmark", "--bank", str(bank)]) == 0
    _, rows = _read_csv(tmp_path / "from_cfg" / "records.csv")
    assert [r[1:4] for r in rows] == [["NC-TC", "120", "0"]]
    # explicit flags override the file
    assert main(["--config", str(cfg), "benchmark", "--bank", str(bank), "--N", "150",
                 "--out", str(tmp_path / "flags")]) == 0
    _, rows = _read_csv(tmp_path / "flags" / "records.csv")
    assert [r[2] for r in rows] == ["150"]
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert main(["--config", str(bad), "benchmark", "--bank", str(bank)]) == 2


def test_kernel_dump_tc_style_kernel(tmp_path):
    out = tmp_path / "k.csv"
    assert main(["kernel-dump", "--family", "ncsitc", "--eta", "0.9,0.8,-1,1,1",
                 "--tmin", "-20", "--tmax", "20", "--out", str(out)]) == 0
    header, rows = _read_csv(out)
    assert header == "t,s,k" and len(rows) == 41 ** 2
    vals = np.array([[float(x) for x in r] for r in rows])
    assert (vals[:, 2] < 0).any()
    assert out.read_bytes().count(b"\r") == 0


def test_kernel_dump_nonnegative_nc_tc(tmp_path):
    out = tmp_path / "k.csv"
    assert main(["kernel-dump", "--family", "nctc", "--eta", "1,0.9,0.8", "--out", str(out)]) == 0
    _, rows = _read_csv(out)
    assert len(rows) == 41 ** 2
    assert min(float(r[2]) for r in rows) >= 0


def test_kernel_dump_errors(tmp_path, capsys):
    assert main(["kernel-dump", "--family", "nctc", "--eta", "1,0.9"]) == 2
    assert main(["kernel-dump", "--family", "nctc", "--eta", "1,1.5,0.5"]) == 2
    assert main(["kernel-dump", "--family", "nope", "--eta", "1"]) == 2
    assert main(["kernel-dump", "--family", "nctc", "--eta", "1,0.5,0.5", "--tmin", "3",
                 "--tmax", "1"]) == 2


def test_chol_bench_rows(tmp_path):
    out = tmp_path / "t.csv"
    assert main(["chol-bench", "--n", "100,200,300,400", "--out", str(out)]) == 0
    header, rows = _read_csv(out)
    assert header == "n,method,seconds" and len(rows) == 8
    assert {r[1] for r in rows} == {"dense", "structured"}
    assert main(["chol-bench", "--n", "0"]) == 2
    assert main(["chol-bench", "--n", "10", "--repeats", "0"]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "nckrm", "kernel-dump", "--family", "tc",
                           "--eta", "1,0.5", "--tmin", "1", "--tmax", "2"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert proc.stdout.splitlines() == ["t,s,k", "1,1,0.5", "1,2,0.25", "2,1,0.25", "2,2,0.25"]
