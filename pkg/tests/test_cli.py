import json

import pytest

from vbft.cli import main
from vbft.simnet import dumps


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_run_then_check_honest(tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    assert run_cli(capsys, "run", "--scenario", "honest_f1", "--seed", "1", "--out", str(trace))[0] == 0
    code, out, _ = run_cli(capsys, "check", str(trace))
    assert code == 0
    assert "PASS r_safety" in out and out.strip().endswith("verdict: PASS")


def test_same_seed_gives_identical_files(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for p in (a, b):
        run_cli(capsys, "run", "--scenario", "silent_primary", "--seed", "4", "--out", str(p))
    assert a.read_bytes() == b.read_bytes()


def test_run_to_stdout(capsys):
    code, out, _ = run_cli(capsys, "run", "--scenario", "honest_f1", "--until-height", "2")
    assert code == 0 and json.loads(out.splitlines()[0])["ev"] == "Header"


def test_cap_exceeded_writes_partial_trace(tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    code, _, err = run_cli(
        capsys, "run", "--scenario", "crash", "--until-height", "1000", "--max-events", "300", "--out", str(trace)
    )
    assert code == 1 and "stop condition not reached" in err
    last = json.loads(trace.read_text().splitlines()[-1])
    assert last == {"ev": "Stop", "t": last["t"], "reason": "cap"}


def test_check_fabricated_violation_exits_one(tmp_path, capsys):
    src = tmp_path / "t.jsonl"
    run_cli(capsys, "run", "--scenario", "honest_f1", "--until-height", "3", "--out", str(src))
    recs = [json.loads(line) for line in src.read_text().splitlines()]
    tips = {}
    for r in recs:
        if r["ev"] == "Commit":
            tips[r["node"]] = r
    for node in (0, 1):
        recs.insert(-1, {"ev": "Revoke", "t": 10**6, "step": 0, "node": node, "seq": tips[node]["seq"], "hash": tips[node]["hash"]})
    bad = tmp_path / "bad.jsonl"
    bad.write_text(dumps(recs))
    code, out, _ = run_cli(capsys, "check", str(bad))
    assert code == 1
    line = next(l for l in out.splitlines() if l.startswith("FAIL r_safety"))
    assert "records [" in line


def test_check_equivocation_trace_reports_legal_revocation(tmp_path, capsys):
    from corpus import fuzz_scenario
    from vbft.simnet import run

    trace = tmp_path / "eq.jsonl"
    trace.write_text(dumps(run(fuzz_scenario(1, "Equivocate", 129), 129, until_height=10)))
    code, out, _ = run_cli(capsys, "check", str(trace))
    assert code == 0
    assert "VIOLATED-WITH-EQUIVOCATION" in out and "revocations: 1" in out


def test_check_json(tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    run_cli(capsys, "run", "--scenario", "honest_f2", "--until-height", "2", "--out", str(trace))
    code, out, _ = run_cli(capsys, "check", "--json", str(trace))
    report = json.loads(out)
    assert code == 0 and report["ok"] and {p["name"] for p in report["properties"]} >= {"r_safety", "s_safety"}


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["fly"],
        ["run"],
        ["run", "--scenario", "no_such"],
        ["check", "/nonexistent/trace.jsonl"],
        ["run", "--scenario", "honest_f1", "--seed", "x"],
    ],
)
def test_usage_errors_exit_two(argv, capsys):
    assert main(argv) == 2


def test_malformed_trace_exits_two(tmp_path, capsys):
    p = tmp_path / "junk.jsonl"
    p.write_text("not json\n")
    assert run_cli(capsys, "check", str(p))[0] == 2


def test_invalid_scenario_exits_two(tmp_path, capsys):
    p = tmp_path / "s.yaml"
    p.write_text(
        "n: 5\nf: 1\ngst: 0\ndelta: 10\ntimeout_initial: 80\nbatch_size: 1\nclients: 1\n"
        "requests_per_client: 1\nadversary: []\n"
    )
    code, _, err = run_cli(capsys, "run", "--scenario", str(p))
    assert code == 2 and "n:" in err


def test_sweep_writes_one_trace_per_seed(tmp_path, capsys):
    code, out, _ = run_cli(
        capsys, "sweep", "--scenario", "silent_primary", "--count", "3", "--until-height", "3", "--out", str(tmp_path)
    )
    assert code == 0 and "3/3 seeds passed" in out
    assert sorted(p.name for p in tmp_path.iterdir()) == [f"silent_primary-{s}.jsonl" for s in (1, 2, 3)]


def test_bench_prints_histograms(capsys):
    code, out, _ = run_cli(capsys, "bench", "--scenario", "honest_f1")
    lat = json.loads(out)
    assert code == 0 and lat["commit_depth"] == {"2": lat["commit_depth"]["2"]} and lat["confirm_depth_mode"] == 3


def test_list_shows_bundled(capsys):
    code, out, _ = run_cli(capsys, "list")
    assert code == 0 and "beta_recovery" in out.split()


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
