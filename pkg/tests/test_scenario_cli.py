import json
from pathlib import Path

import pytest

from evcosim.cli import main
from evcosim.scenario import (
    ScenarioError,
    apply_overrides,
    bundled_scenario_path,
    load_scenario,
    save_scenario,
    scenario_from_document,
)


def test_bundled_scenario_loads(corridor):
    assert corridor.name == "corridor9"
    assert len(corridor.classes) == 2
    rates = sorted(c.demand_rate for c in corridor.classes)
    assert rates[0] == rates[1]  # 50/50 split of the EV fleet
    assert {c.kind for c in corridor.classes} == {"ev"}
    assert len(corridor.scenario_hash) == 64


def test_zero_charge_option_dropped(corridor):
    for st in corridor.graph.stations.values():
        assert 0.0 not in st.options
        assert st.options == (1.0, 2.0, 3.0)


def test_distance_to_energy_conversion(corridor):
    doc = json.loads(Path(bundled_scenario_path()).read_text())
    doc["transport"]["arcs"][0]["distance_miles"] = 50.0
    scn = scenario_from_document(doc)
    arc_id = doc["transport"]["arcs"][0]["id"]
    assert scn.graph.arc(arc_id).energy == pytest.approx(2.0)


def test_unknown_bus_is_named_error():
    doc = json.loads(Path(bundled_scenario_path()).read_text())
    doc["transport"]["nodes"][1]["bus"] = "nosuchbus"
    with pytest.raises(ScenarioError, match="nosuchbus"):
        scenario_from_document(doc)


def test_parse_error_has_position(tmp_path):
    p = tmp_path / "broken.scn"
    p.write_text('{"format_version": 1,,}')
    with pytest.raises(ScenarioError, match="line 1"):
        load_scenario(p)


def test_missing_section_error(tmp_path):
    p = tmp_path / "empty.scn"
    p.write_text('{"format_version": 1}')
    with pytest.raises(ScenarioError, match="missing section"):
        load_scenario(p)


def test_infeasible_class_rejected():
    doc = json.loads(Path(bundled_scenario_path()).read_text())
    doc["classes"][0]["initial_charge_kwh"] = 0.0
    doc["transport"]["stations"] = [s for s in doc["transport"]["stations"] if not s.get("origin_facility")]
    with pytest.raises(ScenarioError, match="infeasible class"):
        scenario_from_document(doc)


def test_round_trip_identical(tmp_path, corridor):
    out = tmp_path / "copy.scn"
    save_scenario(corridor.document, out)
    again = load_scenario(out)
    assert again.document == corridor.document
    assert again.scenario_hash == corridor.scenario_hash


def test_overrides():
    doc = json.loads(Path(bundled_scenario_path()).read_text())
    new = apply_overrides(doc, {"parameters.alpha": "10.0", "classes.0.demand_rate": "25"})
    scn = scenario_from_document(new)
    assert scn.params.alpha == 10.0
    assert scn.classes[0].demand_rate == 25.0
    with pytest.raises(ScenarioError):
        apply_overrides(doc, {"nosuch.key": "1"})


def test_unknown_parameter_rejected():
    doc = json.loads(Path(bundled_scenario_path()).read_text())
    doc["parameters"]["bogus_knob"] = 1
    with pytest.raises(ScenarioError, match="bogus_knob"):
        scenario_from_document(doc)


def test_cli_enumerate_paths(tmp_path, capsys):
    code = main([
        "enumerate-paths", str(bundled_scenario_path()), "--out-dir", str(tmp_path)
    ])
    assert code == 0
    paths_csv = (tmp_path / "paths.csv").read_text().strip().split("\n")
    assert paths_csv[0] == "class,path_index,arcs,energy_drawn_kwh,min_soc_kwh,max_soc_kwh"
    assert len(paths_csv) > 10
    report = json.loads((tmp_path / "run_report.json").read_text())
    assert report["command"] == "enumerate-paths"
    assert report["metrics"]["classes"] == 2
    assert "enumerate-paths" in capsys.readouterr().out


def test_cli_greedy(tmp_path, capsys):
    code = main(["greedy", str(bundled_scenario_path()), "--out-dir", str(tmp_path)])
    assert code == 0
    out = capsys.readouterr().out
    assert "cycle_period=2" in out
    assert (tmp_path / "trace.csv").exists()


def test_cli_validation_exit_code(tmp_path):
    bad = tmp_path / "bad.scn"
    bad.write_text(json.dumps({"format_version": 1}))
    code = main(["greedy", str(bad), "--out-dir", str(tmp_path / "out")])
    assert code == 3


def test_cli_unknown_command_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate", "x.scn"])
    assert exc.value.code == 2


def test_cli_reserves_requires_k_or_bounds(tmp_path):
    code = main(["reserves", str(bundled_scenario_path()), "--out-dir", str(tmp_path)])
    assert code == 3


def test_cli_social_optimum_outputs(tmp_path, capsys):
    code = main(["social-optimum", str(bundled_scenario_path()), "--out-dir", str(tmp_path)])
    assert code == 0
    so = json.loads((tmp_path / "so.json").read_text())
    assert so["kkt_residual"] <= 1e-6
    disp = (tmp_path / "dispatch.csv").read_text().strip().split("\n")
    assert disp[0] == "bus,g_mwh,price_mwh,binding_lines"
    assert len(disp) == 10
    flows = (tmp_path / "flows.csv").read_text().strip().split("\n")
    assert len(flows) == 1 + 30


def test_cli_nonconvergence_exit_code(tmp_path):
    code = main([
        "dual-decomp", str(bundled_scenario_path()),
        "--alpha", "1e9", "--iters", "400", "--out-dir", str(tmp_path),
    ])
    assert code == 4


def test_cli_infeasible_exit_code(tmp_path):
    code = main([
        "reserves", str(bundled_scenario_path()),
        "--a-k=0.0", "--w-k=-1e9", "--out-dir", str(tmp_path),
    ])
    assert code == 5
