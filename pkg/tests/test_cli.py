"""Command-line harness: subcommands, artifacts, manifests and exit codes."""
import csv
import hashlib
import json
import os

import pytest

from aimr import cli
from aimr.gradient import NumericalDivergence
from aimr.operators import operator_from_json
from aimr.tensor import tensor_from_json

SMALL = ["--mesh-n", "6", "--max-outer", "3"]


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def check_manifest(outdir):
    with open(os.path.join(outdir, "manifest.json")) as fh:
        man = json.load(fh)
    assert set(man) >= {"config", "config_hash", "seed", "versions", "wall_time", "artifacts"}
    assert man["versions"]["numpy"]
    for name, digest in man["artifacts"].items():
        with open(os.path.join(outdir, name), "rb") as fh:
            assert hashlib.sha256(fh.read()).hexdigest() == digest
    return man


def test_make_problem(tmp_path, capsys):
    out = tmp_path / "mp"
    code, stdout, _ = run(["make-problem", "--kind", "rad2d", "--mesh-n", "6", "--out", str(out)], capsys)
    assert code == cli.EXIT_OK
    desc = json.loads((out / "problem.json").read_text())
    assert desc["dims"] == [25, 72] and desc["operator_rank"] == 3
    a = operator_from_json((out / "operator.json").read_text())
    b = tensor_from_json((out / "rhs.json").read_text())
    assert a.col_dims == (25, 72) and b.dims == (25, 72)
    man = check_manifest(out)
    assert set(man["artifacts"]) == {"problem.json", "operator.json", "rhs.json"}


def test_problem_descriptor_roundtrip(tmp_path, capsys):
    run(["make-problem", "--kind", "identity", "--out", str(tmp_path / "mp")], capsys)
    code, stdout, _ = run(["solve", "--problem", str(tmp_path / "mp" / "problem.json"), "--rank", "1",
                           "--max-outer", "2", "--out", str(tmp_path / "s")], capsys)
    assert code == cli.EXIT_OK
    assert json.loads(stdout)["rank"] >= 1


def test_solve_artifacts(tmp_path, capsys):
    out = tmp_path / "s"
    code, stdout, _ = run(["solve", *SMALL, "--rank", "3", "--oracle", "--out", str(out)], capsys)
    assert code == cli.EXIT_OK
    rows = read_csv(out / "trace.csv")
    man = check_manifest(out)
    assert {r["config_hash"] for r in rows} == {man["config_hash"]}
    # floats carry 17 significant digits
    val = rows[0]["eps_hat"]
    assert float("%.17g" % float(val)) == float(val)
    assert len(val.replace("-", "").replace(".", "").split("e")[0].lstrip("0")) >= 15
    assert float(rows[0]["true_err"]) > 0
    tensor_from_json((out / "solution.json").read_text())


def test_compare_grid(tmp_path, capsys):
    out = tmp_path / "c"
    code, _, _ = run(["compare", *SMALL, "--solver", "aimr-direct,cmr-greedy", "--rank", "2",
                      "--norm", "canonical,weighted", "--out", str(out)], capsys)
    assert code == cli.EXIT_OK
    rows = read_csv(out / "compare.csv")
    assert list(rows[0]) == list(cli.COMPARE_FIELDS)
    assert len(rows) == 4
    assert len({r["config_hash"] for r in rows}) == 4
    for r in rows:
        assert 0 < float(r["err_X_canonical"]) < 1
        assert float(r["qoi_mean_err"]) >= 0
    check_manifest(out)


def test_sweep_writes_cells(tmp_path, capsys):
    out = tmp_path / "w"
    code, _, _ = run(["sweep", *SMALL, "--delta", "0.2,0.05", "--rank", "3", "--out", str(out)], capsys)
    assert code == cli.EXIT_OK
    rows = read_csv(out / "sweep.csv")
    assert [float(r["delta"]) for r in rows] == [0.2, 0.05]
    for r in rows:
        assert (out / ("cell-%s.csv" % r["config_hash"])).exists()
        assert float(r["final_err_rel"]) >= float(r["best_err_rel"]) * (1 - 1e-12)
    man = check_manifest(out)
    assert len(man["artifacts"]) == 3


def test_sweep_deterministic(tmp_path, capsys):
    tables = []
    for name in ("a", "b"):
        out = tmp_path / name
        run(["sweep", *SMALL, "--delta", "0.2", "--rank", "2", "--seed", "5", "--out", str(out)], capsys)
        tables.append((out / "sweep.csv").read_text())
        cell = read_csv(next(p for p in out.iterdir() if p.name.startswith("cell-")))
        tables.append([{k: v for k, v in r.items() if k != "seconds"} for r in cell])
    assert tables[0] == tables[2]
    assert tables[1] == tables[3]


def test_parallel_matches_serial(tmp_path, capsys):
    out = []
    for jobs in ("1", "2"):
        d = tmp_path / jobs
        run(["compare", *SMALL, "--delta", "0.2,0.1", "--rank", "2", "--jobs", jobs, "--out", str(d)], capsys)
        out.append((d / "compare.csv").read_text())
    assert out[0] == out[1]


def test_audit(tmp_path, capsys):
    out = tmp_path / "a"
    code, stdout, _ = run(["audit", "--mesh-n", "6", "--delta", "0", "--rank", "4", "--out", str(out)], capsys)
    assert code == cli.EXIT_OK
    assert json.loads(stdout)["ok"] is True
    rows = read_csv(out / "audit.csv")
    assert len(rows) == 4
    assert all(r["sandwich_ok"] == "true" for r in rows)
    check_manifest(out)


def test_output_root_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("AIMR_OUTPUT_ROOT", str(tmp_path / "root"))
    code, stdout, _ = run(["solve", *SMALL, "--rank", "1"], capsys)
    assert code == cli.EXIT_OK
    outdir = json.loads(stdout)["outdir"]
    assert outdir.startswith(str(tmp_path / "root"))
    assert os.path.exists(os.path.join(outdir, "manifest.json"))


def test_config_file_and_override(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"problem": {"kind": "rad2d", "mesh_n": 6}, "rank": 2, "max_outer": 2}))
    code, stdout, _ = run(["solve", "--config", str(cfg), "--rank", "1", "--out", str(tmp_path / "s")], capsys)
    assert code == cli.EXIT_OK
    assert json.loads(stdout)["rank"] == 1
    man = check_manifest(tmp_path / "s")
    assert man["config"]["max_outer"] == 2


@pytest.mark.parametrize("argv", [
    ["solve", "--solver", "nope"],
    ["solve", "--delta", "1.5"],
    ["solve", "--rank", "0"],
    ["solve", "--norm", "energy"],
    ["solve", "--config", "/nonexistent/cfg.json"],
    ["solve", "--solver", "aimr-greedy", "--delta", "0"],
    ["solve", "--solver", "aimr-direct,cmr-direct"],
    ["audit", "--problem", "HIGHDIM"],
])
def test_config_errors(argv, tmp_path, capsys):
    if "HIGHDIM" in argv:
        p = tmp_path / "hd.json"
        p.write_text(json.dumps({"kind": "highdim", "mesh_n": 6, "degree": 1, "n_modes": 1}))
        argv = [a if a != "HIGHDIM" else str(p) for a in argv]
    code, _, err = run(argv + ["--mesh-n", "6", "--out", str(tmp_path / "o")], capsys)
    assert code == cli.EXIT_CONFIG
    assert json.loads(err.strip().splitlines()[-1])["error"] == "config_error"


def test_guard_exit(tmp_path, capsys):
    code, _, err = run(["audit", "--mesh-n", "60", "--delta", "0", "--rank", "1", "--out", str(tmp_path)], capsys)
    assert code == cli.EXIT_GUARD
    assert json.loads(err)["error"] == "guard_exceeded"


def test_numerical_exit(tmp_path, capsys, monkeypatch):
    def diverge(*a, **k):
        raise NumericalDivergence("iterate norm blew up")
    monkeypatch.setattr(cli, "gradient_solve", diverge)
    code, _, err = run(["solve", *SMALL, "--out", str(tmp_path)], capsys)
    assert code == cli.EXIT_NUMERICAL
    assert json.loads(err)["error"] == "numerical_failure"


def test_failed_audit_exit(tmp_path, capsys, monkeypatch):
    real = cli.greedy_identities_audit

    def flipped(f, corrections, rx):
        return real(f, [c * -1.0 for c in corrections], rx)
    monkeypatch.setattr(cli, "greedy_identities_audit", flipped)
    code, stdout, _ = run(["audit", "--mesh-n", "6", "--delta", "0", "--rank", "2", "--out", str(tmp_path)],
                          capsys)
    assert code == cli.EXIT_NUMERICAL
    assert json.loads(stdout)["ok"] is False


def test_fmt():
    assert cli.fmt(0.1) == "0.10000000000000001"
    assert cli.fmt(3) == "3" and cli.fmt(True) == "true" and cli.fmt("x") == "x"


def test_cell_seed_stable():
    key = {"solver": "aimr-direct", "delta": 0.2, "rank": 3, "norm": "canonical"}
    assert cli.cell_seed(0, key) == cli.cell_seed(0, dict(reversed(list(key.items()))))
    assert cli.cell_seed(0, key) != cli.cell_seed(1, key)
