import json
from importlib import resources

import numpy as np
import pytest

from bgfield import __version__
from bgfield.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_OK, ExperimentConfig, main
from bgfield.lattice import ConfigError
from bgfield.operator import KernelOperator, a_n

SMALL_CFG = {
    "lattice": {"L": 3, "L_tp": 81, "L_sp": 9, "n_steps": 2, "spatial_dims": 1, "step": 1},
    "model": {"mu": 0.01, "r_v": 0.01},
    "fields": {"kind": "random", "scale": 0.5},
}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg, indent=1))
    return p


def _packaged(name):
    return str(resources.files("bgfield") / "configs" / name)


def test_constant_config_matches_oracle(tmp_path):
    out = tmp_path / "out"
    assert main(["solve-background", "--config", _packaged("constant.json"), "--out", str(out)]) == EXIT_OK
    rep = json.loads((out / "solve_background.json").read_text())
    checks = {c["name"]: c for c in rep["checks"]}
    assert checks["constant_oracle"]["value"] < 1e-10
    assert rep["version"] == __version__
    assert rep["config_hash"] == ExperimentConfig.load(_packaged("constant.json")).hash
    fits = rep["degree_fits"]
    assert abs(fits["higher"] - 3.0) < 0.05 and abs(fits["remainder"] - 5.0) < 0.1


def test_linear_config_exact(tmp_path):
    out = tmp_path / "out"
    assert main(["solve-background", "--config", _packaged("linear.json"), "--out", str(out)]) == EXIT_OK
    rep = json.loads((out / "solve_background.json").read_text())
    checks = {c["name"]: c for c in rep["checks"]}
    assert checks["linear_gap"]["value"] == 0.0


def test_malformed_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{\n "lattice": {"L": 3,\n  "L_tp": 81\n  "L_sp": 9}\n}\n')
    assert main(["verify", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "line 4" in err


def test_unknown_key_exit_code(tmp_path, capsys):
    cfg = json.loads(json.dumps(SMALL_CFG))
    cfg["model"]["r_vv"] = 0.1
    p = _write(tmp_path, cfg)
    assert main(["verify", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "model.r_vv" in err and "line" in err


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text(json.dumps({"lattice": {"L": 4}}))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text(json.dumps({"lattice": {"step": 5}}))


def _fq_csv(tmp_path, corrupt):
    cfg = ExperimentConfig.from_text(json.dumps(SMALL_CFG))
    unit = cfg.operators().unit
    an = a_n(1.0, 3, 1)
    K = KernelOperator.identity(unit, an)
    K.to_csv(tmp_path / "fq.csv")
    if corrupt:
        lines = (tmp_path / "fq.csv").read_text().splitlines()
        y, x, re, im = lines[3].split(",")
        lines[3] = ",".join([y, x, repr(float(re) * 1.5), im])
        (tmp_path / "fq.csv").write_text("\n".join(lines) + "\n")
    return "fq.csv"


def test_supplied_fq_kernel(tmp_path):
    cfg = json.loads(json.dumps(SMALL_CFG))
    cfg["model"]["fq_file"] = _fq_csv(tmp_path, corrupt=False)
    p = _write(tmp_path, cfg)
    assert main(["solve-background", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_OK


def test_corrupted_fq_kernel_fails_verify(tmp_path, capsys):
    cfg = json.loads(json.dumps(SMALL_CFG))
    cfg["model"]["fq_file"] = _fq_csv(tmp_path, corrupt=True)
    p = _write(tmp_path, cfg)
    assert main(["verify", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CHECK
    assert "eigen_fQ" in capsys.readouterr().out


def test_singular_mass_fails_verify(tmp_path, capsys):
    cfg = json.loads(json.dumps(SMALL_CFG))
    cfg["model"]["mu"] = 1.0
    p = _write(tmp_path, cfg)
    assert main(["verify", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CHECK
    out = capsys.readouterr().out
    assert "FAIL resolvent_margin" in out and "margin" in out


def test_verify_small_passes(tmp_path, capsys):
    p = _write(tmp_path, SMALL_CFG)
    assert main(["verify", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 15


@pytest.mark.parametrize("command,files", [
    ("solve-background", ["solve_background.json", "summary.csv", "phi.csv"]),
    ("derivative", ["derivative.json", "derivative.csv"]),
    ("variation", ["variation.json", "variation.csv"]),
    ("critical", ["critical.json", "psi_hat.csv"]),
])
def test_reports_reproducible(tmp_path, command, files):
    p = _write(tmp_path, SMALL_CFG)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main([command, "--config", str(p), "--out", str(a)]) == EXIT_OK
    assert main([command, "--config", str(p), "--out", str(b), "--threads", "2"]) == EXIT_OK
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f
    rep = json.loads((a / files[0]).read_text())
    assert rep["command"] == command and rep["version"] == __version__
    assert rep["config_hash"] == ExperimentConfig.load(p).hash
    # tabular reports carry the hash; field files keep the plain field format
    for f in files[1:]:
        first = (a / f).read_text().splitlines()[0]
        if f.startswith(("phi", "psi")):
            assert first == "t,x1,x2,x3,re,im"
        else:
            assert first.startswith("# config_hash," + rep["config_hash"])


def test_config_hash_depends_on_content():
    a = ExperimentConfig.from_text(json.dumps(SMALL_CFG))
    cfg = json.loads(json.dumps(SMALL_CFG))
    cfg["model"]["mu"] = 0.02
    b = ExperimentConfig.from_text(json.dumps(cfg))
    c = ExperimentConfig.from_text(json.dumps(SMALL_CFG, indent=4))
    assert a.hash != b.hash and a.hash == c.hash
    assert np.isclose(b.values["model"]["mu"], 0.02)


def test_kernel_file(tmp_path):
    (tmp_path / "V.json").write_text(json.dumps({"pair": [[[0, 1], 0.01]]}))
    cfg = json.loads(json.dumps(SMALL_CFG))
    cfg["model"]["kernel_file"] = "V.json"
    c = ExperimentConfig.load(_write(tmp_path, cfg))
    assert not c.kernel().is_on_site
    assert main(["solve-background", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "o")]) == EXIT_OK
    cfg["model"]["kernel_file"] = "missing.json"
    assert main(["verify", "--config", str(_write(tmp_path, cfg)), "--out", str(tmp_path / "o2")]) == EXIT_CONFIG
