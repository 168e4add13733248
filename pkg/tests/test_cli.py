import csv
import json
import math

import pytest
import scipy.constants as sc

from rydflux.cli import EXIT_CONFIG, apply_override, list_scenarios, main
from rydflux.errors import ConfigurationError
from rydflux.scenarios import SCENARIOS, UNITS, get

EXPECTED = {"two_atom_transfer", "crosstalk_sweep", "three_atom_chiral", "hh_ladder_collision",
            "anisotropic_hh_spectra", "edge_transport", "phase_noise", "doppler", "decay_postselect",
            "potential_balance", "hopping_vs_spacing", "power_budget", "floquet_oracle"}


def test_catalog_lists_every_scenario():
    cat = list_scenarios()
    assert {c["name"] for c in cat} == EXPECTED
    for c in cat:
        assert c["figure"] and c["doc"]
        for p in c["params"].values():
            assert p["unit"] in UNITS and p["doc"]


def test_crosstalk_grid_reaches_large_separations():
    sc_ = get("crosstalk_sweep")
    seps = sc_.params["separations"].default
    p = sc_.resolve()
    j = p["target_ratio"] * p["rabi"]
    assert max(seps) / j >= 200 and sum(s / j >= 20 for s in seps) >= 4


def test_list_prints_json(capsys):
    assert main(["list", "--json"]) == 0
    assert len(json.loads(capsys.readouterr().out)) == len(SCENARIOS)


def test_unknown_scenario_exits_with_config_code(tmp_path, capsys):
    assert main(["run", "--scenario", "nope", "--out", str(tmp_path)]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "nope" in err and "two_atom_transfer" in err


@pytest.mark.parametrize("override", ["rabi=\"ten\"", "bogus=1", "samples=2.5", "params.a.b=1"])
def test_bad_overrides_exit_with_config_code(tmp_path, override):
    argv = ["run", "--scenario", "two_atom_transfer", "--out", str(tmp_path), "--override", override]
    assert main(argv) == EXIT_CONFIG


def test_override_paths():
    doc = {}
    apply_override(doc, "params.flux=0.5")
    apply_override(doc, "samples=11")
    apply_override(doc, "seed=3")
    apply_override(doc, "out=some/dir")
    assert doc == {"params": {"flux": 0.5, "samples": 11}, "seed": 3, "out": "some/dir"}
    with pytest.raises(ConfigurationError):
        apply_override(doc, "novalue")


def test_config_file_and_flags(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"scenario": "power_budget", "seed": 1, "params": {"sites": 10}}))
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--override", "sites=100"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["params"]["sites"] == 100 and man["seed"] == 1
    assert set(man["outputs"]) == {"power_budget.csv", "colors.csv"}
    assert man["units"]["rabi_a"] == "2π×MHz"


def test_config_rejects_unknown_keys(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"scenario": "power_budget", "colour": 1}))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_power_budget_table_matches_hand_value(tmp_path):
    assert main(["run", "--scenario", "power_budget", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "power_budget.csv") as fh:
        row = next(csv.DictReader(fh))
    # J = Omega_A sqrt(eps_b) / 4 = 0.25 MHz; four colors at Delta + k delta
    j = 2 * math.pi * 0.25e6
    d = sc.e * sc.physical_constants["Bohr radius"][0]
    total = 0.0
    for k in range(4):
        om2 = 4 * j * (4 * j / 0.01 + k * j / 0.1)
        total += 100 * math.pi * 2e-6 ** 2 / 2 * sc.c * sc.epsilon_0 * (sc.hbar / d) ** 2 * om2 / 2
    assert float(row["J_mhz"]) == 0.25
    assert float(row["total_power_W"]) == pytest.approx(total, rel=1e-10)
    assert float(row["total_power_closed_form_W"]) == pytest.approx(total, rel=1e-10)


def _tables(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.suffix == ".csv"}


def test_runs_are_reproducible(tmp_path):
    argv = ["--scenario", "two_atom_transfer", "--override", "samples=41", "--seed", "7"]
    assert main(["run", "--out", str(tmp_path / "a")] + argv) == 0
    assert main(["run", "--out", str(tmp_path / "b")] + argv) == 0
    assert _tables(tmp_path / "a") == _tables(tmp_path / "b")


def test_trajectories_independent_of_worker_count(tmp_path):
    argv = ["--scenario", "decay_postselect", "--override", "runs=6", "--override", "duration=0.5",
            "--seed", "2"]
    assert main(["run", "--out", str(tmp_path / "a"), "--jobs", "1"] + argv) == 0
    assert main(["run", "--out", str(tmp_path / "b"), "--jobs", "2"] + argv) == 0
    a, b = _tables(tmp_path / "a"), _tables(tmp_path / "b")
    assert a and a == b
