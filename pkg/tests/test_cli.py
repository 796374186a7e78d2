import json

import pytest

from qdebruijn import analysis
from qdebruijn.cli import (
    CHURN_HEADER, CONVERGE_HEADER, CONVERGE_SCHEMA, ROUTE_HEADER, ROUTE_SCHEMA,
    CsvParseError, UsageError, churn_write_bound, evaluate, main, parse_range,
    read_csv, run_seed,
)


def read(path):
    with open(path, newline="") as fh:
        return read_csv(fh)


def test_parse_range():
    assert parse_range("4,8,16") == [4, 8, 16]
    assert parse_range("1-4, 8") == [1, 2, 3, 4, 8]
    for bad in ("", "0-3", "5-2"):
        with pytest.raises(UsageError):
            parse_range(bad)


def test_run_seed_is_distinct():
    seeds = {run_seed(0, n, r) for n in (4, 8, 16, 32, 64) for r in range(10)}
    assert len(seeds) == 50


def test_churn_write_bound():
    assert churn_write_bound(3, 2, 64) == 3 * 5 * 4 * 8
    assert churn_write_bound(3, 3, 64) == 3 * 5 * 8 * 4


def test_converge_writes_csv_and_report_passes(tmp_path, capsys):
    out = tmp_path / "conv.csv"
    assert main(["converge", "--n-range", "4,8", "--runs", "2", "--out", str(out)]) == 0
    schema, rows = read(out)
    assert schema == CONVERGE_SCHEMA and len(rows) == 4
    assert list(rows[0]) == CONVERGE_HEADER
    assert all(int(r["phases_to_legit"]) >= 0 for r in rows)
    assert main(["report", str(out)]) == 0
    assert capsys.readouterr().out.count("PASS") == 2


def test_converge_parallel_matches_serial(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["converge", "--n-range", "4,8", "--runs", "2", "--out", str(a)])
    main(["converge", "--n-range", "4,8", "--runs", "2", "--workers", "2", "--out", str(b)])
    assert a.read_text() == b.read_text()


def test_converge_unfinished_run_fails_report(tmp_path, capsys):
    out = tmp_path / "conv.csv"
    main(["converge", "--n", "16", "--runs", "1", "--max-phases", "1", "--out", str(out)])
    _, rows = read(out)
    assert rows[0]["phases_to_legit"] == "-1"
    assert main(["report", str(out)]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_env_overrides_default(tmp_path, monkeypatch):
    monkeypatch.setenv("QDEB_RUNS", "3")
    out = tmp_path / "conv.csv"
    main(["converge", "--n", "4", "--out", str(out)])
    assert len(read(out)[1]) == 3
    main(["converge", "--n", "4", "--runs", "1", "--out", str(out)])
    assert len(read(out)[1]) == 1


def test_route_and_report(tmp_path, capsys):
    out = tmp_path / "route.csv"
    assert main(["route", "--n", "32", "--pairs", "200", "--absent", "5", "--out", str(out)]) == 0
    schema, rows = read(out)
    assert schema == ROUTE_SCHEMA and list(rows[0]) == ROUTE_HEADER
    assert len(rows) == 205
    assert all(r["outcome"] == "failure" for r in rows if r["present"] == "0")
    assert main(["report", str(out)]) == 0
    assert capsys.readouterr().out.count("PASS") == 4


def test_route_from_sorted_list(tmp_path):
    out = tmp_path / "route.csv"
    main(["route", "--n", "16", "--pairs", "50", "--start", "sorted_list", "--out", str(out)])
    _, rows = read(out)
    assert all(r["outcome"] == "success" for r in rows if r["present"] == "1")


def test_churn_and_report(tmp_path):
    out = tmp_path / "churn.csv"
    assert main(["churn", "--n", "4", "--out", str(out)]) == 0
    _, rows = read(out)
    assert list(rows[0]) == CHURN_HEADER
    assert len(rows) == 4 and rows[0]["n_new"] == "16"
    assert main(["report", str(out)]) == 0


def test_churn_rejects_other_growth():
    with pytest.raises(SystemExit) as exc:
        main(["churn", "--n", "4", "--growth", "3"])
    assert exc.value.code == 2


@pytest.mark.parametrize("argv", [
    ["converge", "--d", "1"], ["converge", "--c", "2"], ["converge", "--runs", "0"],
    ["converge", "--n-range", "9-3"], ["route", "--pairs", "-1"],
    ["converge", "--workers", "0"], ["converge", "--max-phases", "-4"],
])
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_run_scenario_emits_metrics(tmp_path):
    scen = tmp_path / "small.json"
    scen.write_text(json.dumps({"n": 8, "seed": 2, "topology": "sorted_list",
                                "churn": [{"phase": 3, "join": [100]}]}))
    out = tmp_path / "m.csv"
    assert main(["run", str(scen), "--out", str(out)]) == 0
    schema, rows = read(out)
    assert schema == analysis.METRICS_SCHEMA
    assert rows[0]["scenario"] == "small" and rows[0]["phase"] == "0"
    assert rows[-1]["legitimate"] == "1" and rows[-1]["n"] == "9"
    assert main(["report", str(out)]) == 0


def test_run_async_scenario(tmp_path):
    scen = tmp_path / "a.json"
    scen.write_text(json.dumps({"n": 8, "seed": 1, "scheduler": "async", "max_phases": 400}))
    out = tmp_path / "m.csv"
    main(["run", str(scen), "--out", str(out)])
    _, rows = read(out)
    assert rows[-1]["legitimate"] == "1"


def test_run_bad_scenario_exits_2(tmp_path, capsys):
    scen = tmp_path / "bad.json"
    scen.write_text(json.dumps({"n": 8, "wings": 2}))
    assert main(["run", str(scen)]) == 2
    assert "unknown scenario keys" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.json")]) == 2


@pytest.mark.parametrize("text,line", [
    ("", 1),
    ("n,d\n", 1),
    ("#schema=nope/9\n", 1),
    (f"#schema={CONVERGE_SCHEMA}\n", 2),
    (f"#schema={CONVERGE_SCHEMA}\nn,d\n", 2),
    (f"#schema={CONVERGE_SCHEMA}\n{','.join(CONVERGE_HEADER)}\n1,2,3\n", 3),
    (f"#schema={CONVERGE_SCHEMA}\n{','.join(CONVERGE_HEADER)}\n4,2,3,0,0,1,1,5\n4,2,3,1,0,x,1,5\n", 4),
])
def test_malformed_csv_reports_line(tmp_path, capsys, text, line):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(CsvParseError) as exc:
        schema, rows = read(p)
        evaluate(schema, rows)
    assert exc.value.line == line
    assert main(["report", str(p)]) == 2
    assert f"line {line}" in capsys.readouterr().err


def test_evaluate_shape_check():
    rows = []
    for d, phases in ((2, 30), (3, 20)):
        for run in range(3):
            rows.append(dict(n="32", d=str(d), c="3", run=str(run), seed="0",
                             phases_to_diameter=str(phases), phases_to_legit="50",
                             final_max_degree="20"))
    results = {name: ok for name, ok, _ in evaluate(CONVERGE_SCHEMA, rows)}
    assert results["evaluation shape: d=3 mean phases <= d=2 for n >= 32"]
    for r in rows:
        if r["d"] == "3":
            r["phases_to_diameter"] = "40"
    results = {name: ok for name, ok, _ in evaluate(CONVERGE_SCHEMA, rows)}
    assert not results["evaluation shape: d=3 mean phases <= d=2 for n >= 32"]


def test_route_report_flags_misses():
    rows = [dict(n="8", d="2", c="3", seed="0", search=str(k), source="0", target="1",
                 present="1", outcome="success" if k else "failure", hops="1") for k in range(10)]
    results = {name: ok for name, ok, _ in evaluate(ROUTE_SCHEMA, rows)}
    assert not results["routing: >= 99% of present-target searches succeed"]
    rows[0]["hops"] = "-3"
    with pytest.raises(CsvParseError):
        evaluate(ROUTE_SCHEMA, rows)


def test_module_entry_point():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "qdebruijn", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "converge" in res.stdout
