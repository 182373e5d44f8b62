import csv
import json

import pytest

from oddhum.cli import ExperimentConfig, apply_override, main
from oddhum.errors import ConfigError

SMALL = ["--nx", "16", "--nt", "32"]


def _manifest(path):
    return json.loads((path / "manifest.json").read_text())


def test_linear_zero_data(tmp_path):
    assert main(["--mode", "linear", "--out", str(tmp_path), "--delta", "0", *SMALL]) == 0
    man = _manifest(tmp_path)
    assert man["status"] == "ok"
    assert man["diagnostics"]["terminal_linf"] == 0.0
    rows = list(csv.DictReader((tmp_path / "fields" / "h.csv").open()))
    assert all(float(r["value"]) == 0.0 for r in rows)
    assert set(man["versions"]) >= {"oddhum", "numpy", "scipy", "python"}


def test_cascade_with_even_coupling_fails(tmp_path, capsys):
    rc = main(["--mode", "cascade", "--out", str(tmp_path), "--override", "N2=2", *SMALL])
    assert rc != 0
    assert json.loads(capsys.readouterr().err)["error_class"] == "N2_MUST_BE_ODD"
    assert _manifest(tmp_path)["error"]["error_class"] == "N2_MUST_BE_ODD"


def test_constraint_violations_are_named(tmp_path, capsys):
    rc = main(["--mode", "linear", "--out", str(tmp_path), "--override", "exponent_overrides={\"m1\": 5}"])
    assert rc == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error_class"] == "CONSTRAINT_VIOLATION"
    assert any(v.startswith("weight order upper") for v in err["details"]["violations"])


def test_verify_gradient(tmp_path):
    rc = main(["--mode", "verify", "--out", str(tmp_path), "--override", 'verify.checks=["gradient"]', "--override", "verify.trials=5", *SMALL])
    assert rc == 0
    assert _manifest(tmp_path)["diagnostics"]["gradient"]["worst"] <= 1e-6


def test_empty_sweep(tmp_path):
    rc = main(["--mode", "sweep", "--out", str(tmp_path), "--override", "sweep.delta=[]", *SMALL])
    assert rc == 0
    rows = list(csv.reader((tmp_path / "aggregate.csv").open()))
    assert len(rows) == 1


def test_delta_sweep(tmp_path):
    cfg = {"mode": "sweep", "control": {"nx": 16, "nt": 32}, "sweep": {"delta": [1e-1, 1e-2, 1e-3]}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    out = tmp_path / "out"
    assert main(["--config", str(tmp_path / "cfg.json"), "--out", str(out)]) == 0
    assert len(list((out / "points").glob("*/manifest.json"))) == 3
    rows = list(csv.reader((out / "aggregate.csv").open()))
    assert rows[-1][0] == "slope"
    assert float(rows[-1][1]) == pytest.approx(1.0, abs=0.2)


def test_sweep_records_point_failures(tmp_path):
    rc = main(["--mode", "sweep", "--out", str(tmp_path), "--override", "sweep.nx=[16, 2]", "--nt", "32"])
    assert rc == 0
    rows = list(csv.DictReader((tmp_path / "aggregate.csv").open()))
    assert [r["status"] for r in rows] == ["ok", "error"]
    assert rows[1]["error_class"] == "PARAMETER_ERROR"


def test_sweep_is_deterministic(tmp_path):
    args = ["--mode", "sweep", "--override", "sweep.delta=[0.01, 0.001]", *SMALL]
    main([*args, "--out", str(tmp_path / "a")])
    main([*args, "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "aggregate.csv").read_bytes() == (tmp_path / "b" / "aggregate.csv").read_bytes()


def test_manifest_rerun_is_bitwise(tmp_path):
    main(["--mode", "semilinear", "--out", str(tmp_path / "a"), *SMALL])
    main(["--config", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b")])
    a, b = _manifest(tmp_path / "a"), _manifest(tmp_path / "b")
    assert a["diagnostics"] == b["diagnostics"]
    assert (tmp_path / "a" / "fields" / "h.csv").read_bytes() == (tmp_path / "b" / "fields" / "h.csv").read_bytes()


@pytest.mark.parametrize(
    "assignment,expected",
    [("N2=5", ("control", "N2", 5)), ("verify.trials=3", ("verify", "trials", 3)), ("mode=cascade", (None, "mode", "cascade"))],
)
def test_override_parsing(assignment, expected):
    data = {}
    apply_override(data, assignment)
    section, key, value = expected
    assert (data[section] if section else data)[key] == value


@pytest.mark.parametrize("bad", ["N2", "control.N2.x=1"])
def test_override_errors(bad):
    data = {"control": {"N2": 3}}
    with pytest.raises(ConfigError):
        apply_override(data, bad)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"mode": "linear", "colour": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"mode": "dance"}).validate()


def test_bad_config_file(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == 2
