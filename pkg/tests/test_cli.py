from __future__ import annotations

import json

import pytest
import tomli

from cauchylab import __version__
from cauchylab.cli import ConfigError, load_experiment, main

BASE = """
[domain]
fixture = "two-half-cube"
dim = 3

[potentials.q1]
pieces = [{a = 1.0, A = [0.0, 0.0, 0.0]}, {a = -2.0, A = [0.0, 0.0, 0.5]}]

[potentials.q2]
pieces = [{a = 1.0, A = [0.0, 0.0, 0.0]}, {a = -1.5, A = [0.0, 0.0, 0.5]}]

[run]
h = 0.25
m = 3
n_samples = 2
"""


@pytest.fixture
def cfg(tmp_path):
    def write(text=BASE, extra=""):
        path = tmp_path / "exp.toml"
        path.write_text(text + extra)
        return path
    return write


def _config(**run):
    cfg = tomli.loads(BASE)
    cfg["run"].update(run)
    return cfg


@pytest.mark.parametrize("run,field", [
    ({"n_samples": 0}, "run.n_samples"),
    ({"m": -1}, "run.m"),
    ({"h": -0.1}, "run.h"),
    ({"seed": 1.5}, "run.seed"),
    ({"bogus": 1}, "run.bogus"),
    ({"radii": [1, 0]}, "run.radii"),
])
def test_config_errors_name_field(run, field):
    with pytest.raises(ConfigError) as info:
        load_experiment(_config(**run), {})
    assert info.value.path == field


def test_potential_piece_count_checked():
    cfg = _config()
    cfg["potentials"]["q2"]["pieces"].pop()
    with pytest.raises(ConfigError) as info:
        load_experiment(cfg, {})
    assert info.value.path == "potentials.q2.pieces"


def test_missing_domain():
    cfg = _config()
    del cfg["domain"]
    with pytest.raises(ConfigError) as info:
        load_experiment(cfg, {})
    assert info.value.path == "domain"


def test_overrides_take_precedence():
    exp = load_experiment(_config(), {"m": 7, "seed": None})
    assert exp.run["m"] == 7 and exp.run["seed"] == 0


def test_exit_code_2_on_bad_config(cfg, tmp_path, capsys):
    path = cfg(BASE.replace("n_samples = 2", "n_samples = 0"))
    assert main(["sweep", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "run.n_samples" in capsys.readouterr().err


def test_exit_code_2_on_bad_grid(cfg, tmp_path):
    assert main(["forward", str(cfg()), "--h", "0.3", "--out", str(tmp_path / "o")]) == 2


def test_exit_code_2_on_unparsable_toml(cfg, tmp_path):
    assert main(["forward", str(cfg("[domain\n")), "--out", str(tmp_path / "o")]) == 2


def test_forward_writes_provenance(cfg, tmp_path):
    out = tmp_path / "o"
    assert main(["forward", str(cfg()), "--out", str(out)]) == 0
    lines = (out / "forward_field.txt").read_text().splitlines()
    assert lines[0] == '# command: "forward"'
    assert lines[1].startswith("# config_hash:")
    assert f'# version: "{__version__}"' in lines


def test_distance_json(cfg, tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["distance", str(cfg()), "--out", str(out), "--format", "json"]) == 0
    doc = json.loads((out / "distance.json").read_text())
    assert list(doc) == ["provenance", "result"]
    assert doc["provenance"]["grid"]["h"] == 0.25
    assert 0 < doc["result"]["aperture"] <= 1
    printed = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert printed["result"]["aperture"] == doc["result"]["aperture"]


def test_sweep_byte_identical(cfg, tmp_path):
    path = cfg()
    for name in ("a", "b"):
        assert main(["sweep", str(path), "--out", str(tmp_path / name)]) == 0
    for art in ("sweep.csv", "summary.json"):
        assert (tmp_path / "a" / art).read_bytes() == (tmp_path / "b" / art).read_bytes()


def test_seed_override_changes_hash(cfg, tmp_path):
    path = cfg()
    main(["sweep", str(path), "--out", str(tmp_path / "a")])
    main(["sweep", str(path), "--seed", "5", "--out", str(tmp_path / "b")])
    ha = json.loads((tmp_path / "a" / "summary.json").read_text())["provenance"]
    hb = json.loads((tmp_path / "b" / "summary.json").read_text())["provenance"]
    assert ha["config_hash"] != hb["config_hash"] and hb["seed"] == 5


def test_soft_fail_exit_code(cfg, tmp_path):
    path = cfg(extra="iterations = 0\n")
    assert main(["reconstruct", str(path), "--out", str(tmp_path / "o")]) == 3
    assert main(["reconstruct", str(path), "--out", str(tmp_path / "o"), "--soft-fail-ok"]) == 0


def test_green_check(cfg, tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["green-check", str(cfg()), "--out", str(out)]) == 0
    assert "kernel-stack relative error" in capsys.readouterr().out
    doc = json.loads((out / "green_check.json").read_text())
    assert doc["result"]["kernel_stack_rel_err"] <= 1e-8


def test_three_spheres(cfg, tmp_path):
    text = BASE.replace("h = 0.25", "h = 0.125") + "three_spheres_radii = [0.125, 0.25, 0.375]\n"
    out = tmp_path / "o"
    assert main(["three-spheres", str(cfg(text)), "--out", str(out)]) == 0
    res = json.loads((out / "three_spheres.json").read_text())["result"]
    assert 0 < res["tau_min"] <= res["tau_max"] < 1
