import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import pytest

from arwlab import __version__
from arwlab.cli import DEFAULTS, dumps, load_schema, main, resolve_config, ConfigError

ROOT = Path(__file__).resolve().parents[1]


def run(argv, capsys):
    code = main(argv)
    return code, capsys.readouterr()


def test_oracle_b1(capsys):
    code, out = run(["oracle", "--lambda", "1"], capsys)
    rep = json.loads(out.out)
    assert code == 0
    assert rep["result"]["origin_occupied_exact"] == "4/7"
    probs = [d["probability"] for d in rep["result"]["distribution"]]
    assert probs == sorted(probs, reverse=True)
    assert rep["version"] == __version__ and rep["config"]["lambda"] == 1.0


def test_oracle_reads_literal(tmp_path, capsys):
    lit = tmp_path / "c.json"
    lit.write_text(json.dumps({"volume": {"dim": 1, "radius": 1}, "sites": {"(0)": 1}}))
    code, out = run(["oracle", "--literal", str(lit)], capsys)
    assert code == 0 and json.loads(out.out)["result"]["origin_occupied"] == pytest.approx(4 / 7)


def test_selftest(capsys):
    code, out = run(["selftest", "--instances", "5"], capsys)
    assert code == 0 and json.loads(out.out)["result"]["pass"]


def test_precedence(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"command": "rhoc", "n": 30, "eps": 0.05}))
    got = resolve_config("rhoc", {"n": 40}, str(cfg))
    assert got["n"] == 40 and got["eps"] == 0.05 and got["tol"] == DEFAULTS["rhoc"]["tol"]


@pytest.mark.parametrize("content,needle", [
    ("{bad", "not valid JSON"),
    ('{"foo": 1}', "not used by"),
    ('{"command": "green"}', "is for command"),
    ('{"n": -3}', "schema violation"),
])
def test_config_errors(tmp_path, content, needle):
    cfg = tmp_path / "run.json"
    cfg.write_text(content)
    with pytest.raises(ConfigError, match=needle):
        resolve_config("rhoc", {}, str(cfg))


def test_exit_codes(tmp_path, capsys):
    assert run(["nonsense"], capsys)[0] == 1
    assert run(["rhoc", "--tol", "-1"], capsys)[0] == 1
    bad = tmp_path / "k.json"
    bad.write_text(json.dumps({"dim": 1, "support": [{"offset": [1], "prob": 0.3}]}))
    code, out = run(["green", "--kernel", str(bad)], capsys)
    assert code == 1 and "InvalidKernel" in out.err
    code, out = run(["curve", "--n", "30", "--rho-grid", "0.9", "--replicas", "100",
                     "--max-topplings", "3"], capsys)
    assert code == 2 and "BudgetFailureRate" in out.err


def test_replay_is_byte_identical(tmp_path, capsys):
    args = ["rhoc", "--n", "15", "--replicas", "100", "--tol", "0.1", "--seed", "3"]
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_carpet_outputs(tmp_path):
    out = tmp_path / "c.jsonl"
    assert main(["carpet", "--lambda", "10", "--r", "2", "--replicas", "30", "--radius", "10",
                 "--out", str(out)]) == 0
    lines = [json.loads(l) for l in out.read_text().splitlines()]
    assert lines[0]["header"]["config"]["r"] == 2
    assert len(lines) == 32 and "summary" in lines[-1]
    text = (tmp_path / "c.csv").read_text().splitlines()
    assert text[0].startswith("# ")
    rows = list(csv.DictReader(io.StringIO("\n".join(text[1:]))))
    assert list(rows[0]) == ["r", "lambda", "ch_prime", "end_reason"] and len(rows) == 30


def test_holes_outputs(tmp_path):
    out, table = tmp_path / "h.jsonl", tmp_path / "summary.csv"
    assert main(["holes", "--lambda", "20", "--replicas", "5", "--radius", "8",
                 "--tracked-radius", "3", "--max-j", "2", "--out", str(out), "--csv", str(table)]) == 0
    assert len(out.read_text().splitlines()) == 6
    rows = list(csv.DictReader(io.StringIO("\n".join(table.read_text().splitlines()[1:]))))
    assert list(rows[0]) == ["j", "x", "hole_rate"] and len(rows) == 2 * 7


def test_sweep_csv_header(tmp_path):
    out = tmp_path / "t.csv"
    assert main(["sweep", "--lambda-grid", "0.5,2", "--n", "10", "--replicas", "100",
                 "--tol", "0.1", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert json.loads(lines[0][2:])["command"] == "sweep"
    assert lines[1].startswith("lambda,rho_hat")


def test_float_format():
    assert dumps(0.1) == "0.10000000000000001"
    assert dumps(1.0) == "1.0"
    assert dumps(float("inf")) == '"inf"'
    assert json.loads(dumps({"a": [1, 2.5, None]}, indent=1)) == {"a": [1, 2.5, None]}


def test_schema_shipped_in_docs():
    doc = json.loads((ROOT / "docs" / "config.schema.json").read_text())
    assert doc == load_schema()


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "arwlab", "rhoc", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0 and "--eps" in res.stdout
