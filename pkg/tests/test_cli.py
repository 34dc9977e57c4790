import io
import math

import pytest

from sixsim import cli
from sixsim.metrics import read_csv


def call(*argv):
    buf = io.StringIO()
    code = cli.main(list(argv), out=buf)
    return code, buf.getvalue()


def test_psuccess_single_point():
    assert call("psuccess", "--fa", "50", "--fb", "50", "--c", "100", "--k", "5") == (0, "0.7627\n")
    assert call("psuccess", "--fa", "100", "--fb", "100", "--k", "5") == (0, "1.0000\n")


def test_psuccess_sweep_csv():
    code, text = call("psuccess", "--sweep", "--step", "50", "--k", "5", "--k", "10")
    assert code == 0
    lines = text.splitlines()
    assert lines[0] == "free_a,free_b,total,k,p_success"
    assert len(lines) == 1 + 2 * 9
    assert "50,50,100,5,0.762695" in lines  # 1 - 0.75**5


def test_psuccess_verify_passes():
    code, text = call("psuccess", "--sweep", "--step", "50", "--verify", "--trials", "100000")
    assert code == 0
    assert text.splitlines()[0].endswith("p_monte_carlo,abs_diff")


def test_psuccess_usage_errors(capsys):
    assert call("psuccess", "--fa", "120", "--fb", "10")[0] == cli.EXIT_USAGE
    assert call("psuccess", "--fa", "10")[0] == cli.EXIT_USAGE
    assert call("psuccess", "--sweep", "--step", "0")[0] == cli.EXIT_USAGE


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["psuccess", "--bogus"])
    assert exc.value.code == cli.EXIT_USAGE


def test_summarize_groups_and_nan(tmp_path):
    f = tmp_path / "s.csv"
    f.write_text("mode,x\nMSF,3\nPB,\nMSF,5\n")
    code, text = call("summarize", str(f), "--metric", "x", "--group-by", "mode")
    assert code == 0
    rows = text.splitlines()
    assert rows[0] == "mode,n,mean,median,p5,p95"
    assert rows[1].startswith("MSF,2,4,4,")
    assert rows[2] == "PB,0,nan,nan,nan,nan"


def test_summarize_single_row(tmp_path):
    f = tmp_path / "s.csv"
    f.write_text("x\n7.5\n")
    _, text = call("summarize", str(f), "--metric", "x")
    assert text.splitlines()[1] == "1,7.5,7.5,7.5,7.5"


def test_summarize_two_point_cdf(tmp_path):
    f = tmp_path / "s.csv"
    f.write_text("x\n2\n1\n")
    dat = tmp_path / "cdf.dat"
    assert call("summarize", str(f), "--metric", "x", "--dat", str(dat))[0] == 0
    assert dat.read_text() == "# all\n1 0.5\n2 1\n"


def test_summarize_missing_column(tmp_path):
    f = tmp_path / "s.csv"
    f.write_text("x\n1\n")
    assert call("summarize", str(f), "--metric", "y")[0] == cli.EXIT_USAGE
    assert call("summarize", str(tmp_path / "none.csv"), "--metric", "x")[0] == cli.EXIT_IO


def test_run_plan_writes_dirs_and_is_repeatable(tmp_path):
    plan = tmp_path / "plan.txt"
    plan.write_text("modes = MSF, PB\nn_nodes = 5\nseeds = 1-2\nduration_minutes = 2\n")
    a, b = tmp_path / "a", tmp_path / "b"
    assert call("run", "--plan", str(plan), "--jobs", "1", "--out", str(a))[0] == 0
    assert call("run", "--plan", str(plan), "--jobs", "1", "--out", str(b))[0] == 0
    dirs = sorted(p.name for p in a.iterdir() if p.is_dir())
    assert len(dirs) == 4
    for d in dirs:
        assert (a / d / "nodes.csv").exists() and (a / d / "packets.csv").exists()
    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()
    rows = read_csv(a / "summary.csv")
    assert sorted((r["mode"], r["seed"]) for r in rows) == [("MSF", "1"), ("MSF", "2"), ("PB", "1"), ("PB", "2")]


def test_run_flags_override_plan(tmp_path):
    code, text = call("run", "--nodes", "4", "--mode", "PB", "--seed", "3", "--duration", "1",
                      "--jobs", "1", "--out", str(tmp_path))
    assert code == 0 and text.startswith("1 runs")
    (row,) = read_csv(tmp_path / "summary.csv")
    assert (row["mode"], row["n_nodes"], row["seed"]) == ("PB", "4", "3")
    assert call("run", "--mode", "TDMA", "--out", str(tmp_path))[0] == cli.EXIT_USAGE


def test_validate_config(tmp_path):
    good = tmp_path / "good.cfg"
    good.write_text("n_nodes = 20\nstack_mode = PB\n")
    code, text = call("validate-config", str(good))
    assert code == 0 and text.startswith("ok: PB n=20")
    bad = tmp_path / "bad.cfg"
    bad.write_text("n_nodes = 0\n")
    assert call("validate-config", str(bad))[0] == cli.EXIT_USAGE
    assert call("validate-config", str(tmp_path / "missing.cfg"))[0] == cli.EXIT_IO


def test_topo_dump_is_seeded(tmp_path):
    _, a = call("topo-dump", "--nodes", "6", "--seed", "4")
    _, b = call("topo-dump", "--nodes", "6", "--seed", "4")
    _, c = call("topo-dump", "--nodes", "6", "--seed", "5")
    assert a == b and a != c
    out = tmp_path / "t.csv"
    assert call("topo-dump", "--nodes", "6", "--seed", "4", "--out", str(out))[0] == 0
    assert out.read_text() == a


def test_summarize_is_idempotent(tmp_path):
    f = tmp_path / "s.csv"
    f.write_text("g,x\na,1\na,2\nb,10\n")
    first = call("summarize", str(f), "--metric", "x", "--group-by", "g")
    assert first == call("summarize", str(f), "--metric", "x", "--group-by", "g")
    p5 = float(first[1].splitlines()[1].split(",")[4])
    assert math.isclose(p5, 1.05)


def test_invariant_violation_exit_code(tmp_path, monkeypatch):
    from sixsim.engine import InvariantViolation

    def boom(configs, workers=None):
        raise InvariantViolation(42, "queue over capacity")

    monkeypatch.setattr(cli.analytics, "run_configs", boom)
    assert call("run", "--nodes", "3", "--duration", "1", "--out", str(tmp_path))[0] == cli.EXIT_INVARIANT
