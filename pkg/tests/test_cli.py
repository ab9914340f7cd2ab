import subprocess
import sys

import pytest

from messplus.cli import main
from messplus.zoo import load_trace


def _only(directory, pattern):
    matches = sorted(directory.glob(pattern))
    assert len(matches) == 1, matches
    return matches[0]


def test_run_writes_outputs(tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    assert main(["synth-trace", "--num-requests", "300", "--seed", "7", "--output", str(trace)]) == 0
    out = tmp_path / "out"
    argv = ["run", "--policy", "mess_plus", "--v", "0.1", "--c", "3", "--alpha", "0.52",
            "--trace", str(trace), "--seed", "7", "--out", str(out)]
    assert main(argv) == 0
    run_dir = _only(out, "run-mess_plus-*")
    assert {p.name for p in run_dir.iterdir()} == {"config.yaml", "report-seed7.json", "steps-seed7.csv"}
    assert (run_dir / "steps-seed7.csv").read_text().splitlines()[0] == \
        "t,p_t,explored,chosen_model,accuracy,energy_joules,queue,latency_seconds"
    assert "mess_plus" in capsys.readouterr().out

    assert main(["report", str(run_dir)]) == 0
    assert "Q(T)/T" in capsys.readouterr().out


def test_global_flags_before_subcommand(tmp_path):
    assert main(["--seed", "1", "--num-requests", "50", "--out", str(tmp_path), "run",
                 "--policy", "largest_only"]) == 0
    assert _only(tmp_path, "run-largest_only-*/report-seed1.json")


def test_synth_trace_empty(tmp_path):
    path = tmp_path / "empty.jsonl"
    assert main(["synth-trace", "--num-requests", "0", "--output", str(path)]) == 0
    assert path.read_text() == "" and load_trace(path) == []


def test_same_command_twice_is_byte_identical(tmp_path):
    out = tmp_path / "out"
    argv = ["run", "--num-requests", "400", "--seed", "3", "--out", str(out)]
    assert main(argv) == 0 and main(argv) == 0
    a, b = sorted(out.glob("run-*/steps-seed3.csv"))
    assert a.read_bytes() == b.read_bytes()


def test_sweeps_write_csvs(tmp_path):
    assert main(["sweep-v", "--grid", "0.1,10", "--seeds", "0-1", "--num-requests", "200",
                 "--out", str(tmp_path), "--save-steps"]) == 0
    d = _only(tmp_path, "sweep-v-*")
    assert (d / "sweep_v.csv").exists() and len(list(d.glob("steps-*.csv"))) == 4
    assert main(["sweep-c", "--grid", "1,3", "--num-requests", "300", "--holdout", "50",
                 "--out", str(tmp_path)]) == 0
    d = _only(tmp_path, "sweep-c-*")
    assert (d / "sweep_c.csv").exists() and (d / "loss_curves.csv").exists()


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("policy: smallest_only\nseeds: [4]\ntrace:\n  num_requests: 30\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert _only(tmp_path, "run-smallest_only-*/report-seed4.json")
    assert main(["run", "--config", str(cfg), "--policy", "largest_only", "--out", str(tmp_path)]) == 0
    assert _only(tmp_path, "run-largest_only-*/report-seed4.json")


@pytest.mark.parametrize("argv", [
    [], ["bogus"], ["run", "--no-such-flag"], ["run", "--policy", "nope"],
    ["run", "--v", "abc"], ["sweep-v", "--grid", "x,y"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert capsys.readouterr().err


def test_runtime_errors_exit_2(tmp_path, capsys):
    assert main(["run", "--trace", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{oops\n")
    assert main(["run", "--trace", str(bad), "--out", str(tmp_path)]) == 2
    assert "line 1" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "messplus.cli", "synth-trace", "--num-requests", "5",
                           "--output", str(tmp_path / "t.jsonl")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert len(load_trace(tmp_path / "t.jsonl")) == 5
