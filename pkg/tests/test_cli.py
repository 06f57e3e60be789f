import csv
import json

import pytest

from fdsys.cli import SERIES_COLUMNS, bench_rows, main
from fdsys.errors import ValidationError
from fdsys.problemfile import apply_overrides, build, load, save
from fdsys.registry import builtin_document, builtin_names, oracle_y0

REQUIRED_BUILTINS = {"zero", "riccati", "decoupled_identity", "lookback", "asian", "delayed",
                     "incomplete", "counterexample", "bad_lipschitz"}


def run(tmp_path, *argv):
    out = tmp_path / "out"
    code = main([*argv, "--out", str(out)])
    report = json.loads((out / "report.json").read_text()) if (out / "report.json").exists() \
        else None
    return code, report, out


# --- problem files -------------------------------------------------------------------

def test_registry_complete():
    assert REQUIRED_BUILTINS <= set(builtin_names())


@pytest.mark.parametrize("name", sorted(REQUIRED_BUILTINS))
def test_builtins_validate(name):
    lp = load(f"builtin:{name}")
    assert lp.problem.name == name
    assert lp.doc["schema"] == 1


def test_unknown_key_rejected():
    doc = builtin_document("riccati")
    doc["coefficients"]["drift"] = ["0"]
    with pytest.raises(ValidationError, match="coefficients"):
        build(doc)


def test_schema_version_required():
    doc = builtin_document("riccati")
    doc["schema"] = 2
    with pytest.raises(ValidationError):
        build(doc)


def test_expression_count_checked():
    doc = builtin_document("riccati")
    doc["coefficients"]["mu"] = ["-y", "0"]
    with pytest.raises(ValidationError, match="mu"):
        build(doc)


def test_bad_expression_is_validation_error():
    doc = builtin_document("riccati")
    doc["coefficients"]["mu"] = ["-y +"]
    with pytest.raises(ValidationError):
        build(doc)


def test_overrides_do_not_touch_original():
    doc = builtin_document("riccati")
    new = apply_overrides(doc, steps=3, T=2.0, max_len=0.25, x_grid=(0, 1, 5))
    assert doc["horizon"]["steps"] == 8
    assert new["horizon"] == {"T": 2.0, "tau": 0.0, "steps": 3}
    assert new["global"] == {"max_len": 0.25, "x_grid": [0.0, 1.0, 5]}


def test_file_round_trip(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps(builtin_document("delayed")))
    lp = load(str(path))
    assert lp.problem.ops.L3.alpha_z == ((0, 0.5), (-1, 0.5))


def test_missing_file(tmp_path):
    with pytest.raises(ValidationError):
        load(str(tmp_path / "missing.json"))


# --- solve-local ---------------------------------------------------------------------

def test_solve_local_zero(tmp_path):
    code, rep, _ = run(tmp_path, "solve-local", "builtin:zero")
    assert code == 0
    assert rep["result"]["Y0"] == [1.5]


def test_solve_local_riccati(tmp_path):
    code, rep, out = run(tmp_path, "solve-local", "builtin:riccati", "--steps", "12")
    assert code == 0
    assert 0.45 <= rep["result"]["Y0"][0] <= 0.55
    assert rep["problem"]["horizon"]["steps"] == 12


def test_series_csv_matches_json(tmp_path):
    code, rep, out = run(tmp_path, "solve-local", "builtin:riccati")
    with open(out / "series.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == SERIES_COLUMNS
    assert len(rows) == 1 + 9
    for i, row in enumerate(rows[1:]):
        for col, val in zip(SERIES_COLUMNS, row):
            assert float(val) == rep["series"][col][i]


def test_solve_local_counterexample(tmp_path):
    code, rep, _ = run(tmp_path, "solve-local", "builtin:counterexample")
    assert code == 2
    assert rep["status"] == "non-contractive"
    assert rep["picard"]["converged"] is False


def test_invalid_problem_exit(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"schema": 1}))
    code, rep, _ = run(tmp_path, "solve-local", str(path))
    assert code == 3
    assert rep["status"] == "invalid"


def test_numeric_failure_exit(tmp_path):
    doc = builtin_document("zero")
    doc["coefficients"]["mu"] = ["log(x)"]
    path = tmp_path / "p.json"
    path.write_text(json.dumps(doc))
    code, _, _ = run(tmp_path, "solve-local", str(path))
    assert code == 4


def test_dump_nodes(tmp_path):
    code, _, out = run(tmp_path, "solve-local", "builtin:riccati", "--steps", "3",
                       "--dump-nodes")
    assert code == 0
    lines = (out / "nodes.csv").read_text().splitlines()
    assert lines[0] == "level,node,time,X1,Y1,V1"
    assert len(lines) == 1 + 1 + 2 + 4 + 8


def test_dump_nodes_limit(tmp_path):
    code, _, _ = run(tmp_path, "solve-local", "builtin:zero", "--steps", "11", "--dump-nodes")
    assert code == 3


def test_canonical_reports_identical(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for out in (a, b):
        assert main(["check", "builtin:riccati", "--canonical", "--seed", "9",
                     "--out", str(out)]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert "timing" not in json.loads((a / "report.json").read_text())


def test_timing_is_separate(tmp_path):
    _, rep, out = run(tmp_path, "solve-local", "builtin:zero")
    assert set(rep["timing"]) == {"started_utc", "wall_clock_s"}
    assert not [p for p in out.iterdir() if p.name.startswith(".tmp-")]


# --- solve-global --------------------------------------------------------------------

def test_solve_global_riccati(tmp_path):
    code, rep, _ = run(tmp_path, "solve-global", "builtin:riccati", "--T", "2",
                       "--max-len", "0.5")
    assert code == 0
    assert rep["result"]["Y0"][0] == pytest.approx(1 / 3, abs=0.08)
    assert rep["global"]["interfaces_ok"]


def test_solve_global_zero(tmp_path):
    code, rep, _ = run(tmp_path, "solve-global", "builtin:zero", "--T", "4")
    assert code == 0
    assert rep["global"]["interface_mismatches"] == [0.0] * 7


def test_solve_global_narrow_grid(tmp_path):
    code, rep, _ = run(tmp_path, "solve-global", "builtin:riccati", "--x-grid", "0", "0.1", "3")
    assert code == 5
    assert rep["error"]["type"] == "GridOutOfRange"


def test_solve_global_scope(tmp_path):
    code, _, _ = run(tmp_path, "solve-global", "builtin:lookback")
    assert code == 3


# --- check ---------------------------------------------------------------------------

@pytest.mark.parametrize("name,flag,expected", [
    ("riccati", "--a1", 0),
    ("riccati", "--a2", 0),
    ("bad_lipschitz", "--a1", 6),
    ("riccati", "--l1", 0),
    ("riccati", "--ym", 0),
])
def test_check_exit_codes(tmp_path, name, flag, expected):
    code, rep, _ = run(tmp_path, "check", f"builtin:{name}", flag)
    assert code == expected
    assert rep["exit_code"] == expected


def test_check_a2_scope(tmp_path):
    code, _, _ = run(tmp_path, "check", "builtin:counterexample", "--a2")
    assert code == 3


def test_check_increasing_drift_fails(tmp_path):
    doc = builtin_document("riccati")
    doc["coefficients"]["mu"] = ["y"]
    path = tmp_path / "p.json"
    path.write_text(json.dumps(doc))
    code, rep, _ = run(tmp_path, "check", str(path), "--a2")
    assert code == 6
    assert rep["failed"] == ["A2"]


# --- bench and listing ---------------------------------------------------------------

def test_bench_rows():
    rows = {(r["problem"], r["N"]): r for r in bench_rows(["zero", "riccati", "counterexample"])}
    for N in (6, 8, 10, 12):
        assert rows[("zero", N)]["error"] == 0.0
        assert rows[("counterexample", N)]["status"] == "non-contractive"
    assert rows[("riccati", 12)]["error"] <= rows[("riccati", 6)]["error"]


def test_bench_cli(tmp_path, capsys):
    assert main(["bench", "builtin:asian", "--canonical", "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("problem,N,status")
    assert len(lines) == 5
    assert (tmp_path / "bench.csv").exists()


def test_list_builtins(capsys):
    assert main(["list-builtins"]) == 0
    names = [line.split(":")[0] for line in capsys.readouterr().out.splitlines()]
    assert names == builtin_names()


@pytest.mark.parametrize("name", ["zero", "riccati", "asian", "delayed", "decoupled_identity",
                                  "bad_lipschitz"])
def test_builtin_oracles(name):
    rows = bench_rows([name], steps=(6,))
    assert rows[0]["error"] == pytest.approx(0.0, abs=1e-9)
    assert oracle_y0(name) is not None


def test_save_round_trip(tmp_path):
    path = tmp_path / "p.json"
    save(builtin_document("incomplete"), str(path))
    assert load(str(path)).doc == builtin_document("incomplete")
