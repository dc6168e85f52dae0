import csv
import io
import subprocess
import sys

import numpy as np
import pytest

from levytree.cli import main
from levytree.vbt import TreeConfig, eval_point


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def split(text):
    header = [l for l in text.splitlines() if l.startswith("#")]
    body = "\n".join(l for l in text.splitlines() if not l.startswith("#"))
    return header, list(csv.reader(io.StringIO(body)))


def test_sample_single_query_at_t0_is_zero(capsys):
    code, out, _ = run(["sample", "--times", "0", "--dim", "2"], capsys)
    assert code == 0
    _, rows = split(out)
    assert rows[0] == ["path", "time", "W0", "W1", "H0", "H1", "K0", "K1"]
    assert [float(v) for v in rows[1][1:]] == [0.0] * 7


def test_sample_matches_library(capsys):
    code, out, _ = run(["sample", "--seed", "0x2a", "--times", "0.3,0.9", "--eps", "0.001"], capsys)
    assert code == 0
    _, rows = split(out)
    y = eval_point(TreeConfig(0.0, 1.0, 0.001, seed=42), np.array([0.3, 0.9]))
    assert float(rows[1][2]) == y.w[0, 0] and float(rows[2][3]) == y.h[1, 0]
    assert float(rows[2][4]) == y.k[1, 0]


def test_sample_mode_none_drops_areas(capsys):
    _, out, _ = run(["sample", "--mode", "none", "--eps", "0.25"], capsys)
    header, rows = split(out)
    assert rows[0] == ["path", "time", "W0"]
    assert len(rows) == 1 + 5
    assert "# mode=none" in header


def test_sample_many_paths(capsys):
    _, out, _ = run(["sample", "--n-seeds", "3", "--times", "0.5"], capsys)
    _, rows = split(out)
    assert [r[0] for r in rows[1:]] == ["0", "1", "2"]
    assert len({r[2] for r in rows[1:]}) == 3


def test_sample_bad_times(capsys):
    code, _, err = run(["sample", "--times", "0.5,1.5"], capsys)
    assert code == 2 and "query times" in err


def test_config_file_reruns_are_identical(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# demo\nseed = 7\nn-seeds = 2\ntimes = 0.1, 0.7\nmode = st\n")
    code1, out1, _ = run(["sample", "--config", str(cfg)], capsys)
    outfile = tmp_path / "out.csv"
    code2, _, _ = run(["sample", "--config", str(cfg), "--out", str(outfile)], capsys)
    assert code1 == code2 == 0
    assert outfile.read_text() == out1
    header, rows = split(out1)
    assert "# seed=7" in header and "# times=0.10000000000000001,0.69999999999999996" in header
    assert rows[0] == ["path", "time", "W0", "H0"]


def test_config_overrides_flags(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("seed = 3\n")
    _, out, _ = run(["sample", "--seed", "9", "--config", str(cfg), "--times", "1"], capsys)
    assert "# seed=3" in out


def test_config_errors(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("colour = blue\n")
    code, _, err = run(["sample", "--config", str(cfg)], capsys)
    assert code == 2 and "colour" in err
    cfg.write_text("mode = sideways\n")
    assert run(["sample", "--config", str(cfg)], capsys)[0] == 2
    assert run(["sample", "--config", str(tmp_path / "missing.cfg")], capsys)[0] == 2
    assert run(["sample", "--eps", "0"], capsys)[0] == 2


def test_validate_needs_enough_seeds(capsys):
    code, _, err = run(["validate", "--n-seeds", "100"], capsys)
    assert code == 2 and "10000" in err


def test_validate_flags_injected_fault(capsys):
    argv = ["validate", "--n-seeds", "10000", "--cond-seeds", "10000", "--cond-dim", "10", "--inject-fault", "flip-k-mean"]
    code, out, err = run(argv, capsys)
    assert code == 1
    assert "FAILED suites: conditional" in err
    assert "on K_su" in err
    assert out.splitlines()[0] == "# command=validate"


@pytest.mark.slow
def test_validate_default_passes(capsys):
    code, out, err = run(["validate"], capsys)
    assert code == 0, err
    _, rows = split(out)
    assert rows[0] == ["suite", "statistic", "empirical", "target", "se", "z", "rule", "pass"]
    assert all(r[-1] == "1" for r in rows[1:])
    suites = {r[0] for r in rows[1:]}
    assert {"moments", "conditional s=0 r=0.3 u=1", "conditional s=0 r=0.5 u=1", "nondyadic joint", "refinement"} <= suites


def test_soc_gbm(capsys):
    code, out, _ = run(["soc", "--model", "gbm", "--n-seeds", "200"], capsys)
    assert code == 0
    header, rows = split(out)
    assert rows[0] == ["solver", "stepping", "parameter", "mean_h", "strong_error", "sup_error", "n_paths", "n_failed"]
    slope = next(l for l in out.splitlines() if l.startswith("# slope gbm="))
    assert float(slope.split("=")[1].split()[0]) == pytest.approx(0.5, abs=0.1)
    assert "# model=gbm" in header


def test_soc_threads_do_not_change_output(capsys):
    a = run(["soc", "--model", "ou", "--n-seeds", "50"], capsys)[1]
    b = run(["soc", "--model", "ou", "--n-seeds", "50", "--threads", "3"], capsys)[1]
    assert a.replace("# threads=1", "") == b.replace("# threads=3", "")


def test_soc_exact_model(capsys):
    _, out, _ = run(["soc", "--model", "integrated-bm", "--n-seeds", "20"], capsys)
    assert "# slope integrated-bm=exact" in out


def test_cir_small_run(capsys):
    argv = ["cir", "--sigma", "0.001", "--n-seeds", "10", "--h-min", str(2.0**-12), "--tols", "0.03,0.01,0.003"]
    code, out, _ = run(argv, capsys)
    assert code == 0
    header, rows = split(out)
    assert "# sigma=0.001" in header and "# h-min=0.000244140625" in header
    assert {r[0] for r in rows[1:]} == {"die-constant", "die-adaptive"}
    assert any(l.startswith("# slope-ratio=") for l in out.splitlines())


def test_cir_rejects_shifted_interval(capsys):
    assert run(["cir", "--t0", "1", "--t1", "2"], capsys)[0] == 2


def test_module_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "levytree", "sample", "--times", "0.5", "--seed", "1"],
        capture_output=True,
        text=True,
        check=True,
    )
    assert proc.stdout.startswith("# command=sample")
