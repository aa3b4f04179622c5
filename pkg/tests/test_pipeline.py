import csv
import json
import subprocess
import sys

import pytest
import yaml

from ctxexposure.cli import main
from ctxexposure.errors import ConfigError, ValidationError
from ctxexposure.pipeline import PipelineConfig, parse_levels, run_pipeline


def tree(d):
    """``{relative path: bytes}`` of every output file except the manifest."""
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


def rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def edit_config(d, **changes):
    cfg = yaml.safe_load((d / "config.yaml").read_text())
    for k, v in changes.items():
        sec, _, key = k.partition("__")
        if key:
            cfg.setdefault(sec, {})[key] = v
        else:
            cfg[sec] = v
    (d / "config.yaml").write_text(yaml.safe_dump(cfg))


@pytest.fixture(scope="module")
def full_run(small_scenario, tmp_path_factory):
    out = tmp_path_factory.mktemp("run1")
    assert main(["run", "--config", str(small_scenario / "config.yaml"), "--out-dir", str(out)]) == 0
    return out


# ------------------------------------------------------------------
# configuration
# ------------------------------------------------------------------


def test_levels():
    assert parse_levels("50:95:1,100") == list(range(50, 96)) + [100]
    assert parse_levels([65, 95]) == [65, 95]
    for bad in ("0", "50:40", "abc", "101"):
        with pytest.raises(ConfigError):
            parse_levels(bad)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"sede": 1})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"kernel": {"bandwith_km": 1.0}})


@pytest.mark.parametrize("doc", [
    {"units": "permille"}, {"threads": 0}, {"stages": ["impute", "plot"]},
    {"kernel": {"bandwidth_km": 4.0}}, {"analysis": {"p_low": 70, "p_high": 60}},
    {"activity": {"gap_min": 0}}, {"grid": {"cell_size_m": -1}},
])
def test_invalid_values_rejected(doc):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(doc)


def test_defaults_carry_published_constants():
    cfg = PipelineConfig.from_dict({})
    assert cfg.kernel.bandwidth_km == 1.165 and cfg.kernel.radius_km == 3.0
    assert cfg.activity.gap_min == 30 and cfg.activity.home_level == 50
    assert (cfg.analysis.p_low, cfg.analysis.p_high) == (40, 60)
    assert cfg.analysis.log_epsilon == 1e-15


def test_digest_ignores_threads_and_paths():
    a = PipelineConfig.from_dict({"threads": 1, "output_dir": "a"})
    b = PipelineConfig.from_dict({"threads": 8, "output_dir": "b", "inputs": {"tests": "x.csv"}})
    c = PipelineConfig.from_dict({"seed": 1})
    assert a.digest() == b.digest() != c.digest()


# ------------------------------------------------------------------
# end to end
# ------------------------------------------------------------------


def test_full_run_outputs(full_run):
    files = tree(full_run)
    for name in ("imputed/status_1.csv", "imputed/status_2.csv", "prevalence_2020.csv", "activity/summary.csv",
                 "activity/spaces.csv", "exposure.csv", "deviation.csv", "analysis/risk.csv",
                 "analysis/clusters.csv", "analysis/coverage.csv", "analysis/design_table.csv",
                 "analysis/ttest.csv", "analysis/overlap_65.csv"):
        assert name in files, name
    man = json.loads((full_run / "manifest.json").read_text())
    assert set(man["outputs"]) == set(files)
    assert [s["name"] for s in man["stages"]] == ["impute", "prevalence", "activity", "exposure", "analyze"]
    assert {"tests", "rates", "fixes", "regions"} <= set(man["inputs"])
    exp = rows(full_run / "exposure.csv")
    assert len(exp) == 24
    assert list(exp[0]) == ["person_id", "e_in", "e_out", "e_overall", "e_home", "fraction_in", "fraction_out", "home"]
    for r in exp:
        for k in ("e_in", "e_out", "e_overall", "e_home"):
            assert r[k] == "" or 0.0 <= float(r[k]) <= 1.0


def test_rerun_with_more_threads_is_byte_identical(small_scenario, full_run, tmp_path):
    out = tmp_path / "run2"
    assert main(["run", "--config", str(small_scenario / "config.yaml"), "--threads", "4",
                 "--out-dir", str(out)]) == 0
    assert tree(out) == tree(full_run)
    m1 = json.loads((full_run / "manifest.json").read_text())
    m2 = json.loads((out / "manifest.json").read_text())
    assert m1["outputs"] == m2["outputs"] and m1["config_hash"] == m2["config_hash"]
    assert (m1["threads"], m2["threads"]) == (1, 4)


def test_other_seed_changes_imputation(small_scenario, full_run, tmp_path):
    out = tmp_path / "run3"
    assert main(["run", "--config", str(small_scenario / "config.yaml"), "--seed", "9",
                 "--stages", "impute", "--out-dir", str(out)]) == 0
    assert (out / "imputed/status_1.csv").read_bytes() != (full_run / "imputed/status_1.csv").read_bytes()


def test_stage_by_stage_matches_full_run(small_scenario, full_run, tmp_path):
    cfg = str(small_scenario / "config.yaml")
    s = str(small_scenario)
    assert main(["impute", "--config", cfg, "--out-dir", str(tmp_path / "a")]) == 0
    assert main(["prevalence", "--config", cfg, "--status", str(tmp_path / "a/imputed"),
                 "--out-dir", str(tmp_path / "b")]) == 0
    assert main(["activity", "--config", cfg, "--fixes", f"{s}/fixes.csv", "--out-dir", str(tmp_path / "c")]) == 0
    assert main(["exposure", "--config", cfg, "--activity-dir", str(tmp_path / "c/activity"),
                 "--prevalence", str(tmp_path / "b/prevalence_2020.csv"), "--out-dir", str(tmp_path / "d")]) == 0
    assert main(["analyze", "risk", "cluster", "coverage", "overlap", "design", "ttest", "maps", "--config", cfg,
                 "--exposure", str(tmp_path / "d/exposure.csv"), "--deviation", str(tmp_path / "d/deviation.csv"),
                 "--activity-dir", str(tmp_path / "c/activity"), "--out-dir", str(tmp_path / "e")]) == 0
    full = tree(full_run)
    pieces = {}
    for part in "abcde":
        pieces.update(tree(tmp_path / part))
    assert set(pieces) == set(full)
    for name in full:
        assert pieces[name] == full[name], name


def test_percent_units_scale_outputs(small_scenario, full_run, tmp_path):
    pct = tmp_path / "pct"
    dp = tmp_path / "dp.csv"
    dp.write_text("district_id,prevalence\n" + "".join(
        f"{r['district_id']},{float(r['prevalence']) * 100!r}\n" for r in rows(small_scenario / "district_prevalence.csv")))
    cfg = PipelineConfig.load(small_scenario / "config.yaml")
    cfg.inputs.district_prevalence = str(dp)
    cfg.output_dir = str(tmp_path / "bad")
    with pytest.raises(ValidationError):  # percent values read as proportions
        run_pipeline(cfg, ["impute", "prevalence", "activity", "exposure"])
    cfg.units = "percent"
    cfg.inputs.district_prevalence = str(dp)
    cfg.output_dir = str(pct)
    run_pipeline(cfg, ["impute", "prevalence", "activity", "exposure"])
    a = {r["person_id"]: r for r in rows(full_run / "exposure.csv")}
    for r in rows(pct / "exposure.csv"):
        for k in ("e_in", "e_out", "e_overall", "e_home"):
            if r[k]:
                assert float(r[k]) == pytest.approx(100 * float(a[r["person_id"]][k]), rel=1e-12)
        assert r["fraction_in"] == a[r["person_id"]]["fraction_in"]


# ------------------------------------------------------------------
# failures
# ------------------------------------------------------------------


def test_missing_column_exits_2_and_names_it(scenario_copy, capsys):
    p = scenario_copy / "homesteads.csv"
    lines = p.read_text().splitlines()
    p.write_text("\n".join(",".join(line.split(",")[:2]) for line in lines) + "\n")
    assert main(["run", "--config", str(scenario_copy / "config.yaml")]) == 2
    err = capsys.readouterr().err
    assert "homesteads.csv" in err and "lat" in err and "row=1" in err and "column=lat" in err and "[prevalence]" in err
    assert not (scenario_copy / "out").exists()


def test_bad_row_is_located(scenario_copy, capsys):
    p = scenario_copy / "fixes.csv"
    lines = p.read_text().splitlines()
    lines[5] = lines[5].replace("T", " at ", 1)
    p.write_text("\n".join(lines) + "\n")
    assert main(["run", "--config", str(scenario_copy / "config.yaml"), "--stages", "activity"]) == 2
    err = capsys.readouterr().err
    assert "timestamp" in err and "row=6" in err and "column=timestamp" in err


def test_compute_failure_exits_3_and_leaves_no_outputs(scenario_copy, capsys):
    # zero incidence makes a negative-then-positive record impossible
    p = scenario_copy / "rates.csv"
    lines = p.read_text().splitlines()
    p.write_text("\n".join([lines[0]] + [",".join(line.split(",")[:4] + ["0.0"]) for line in lines[1:]]) + "\n")
    assert main(["run", "--config", str(scenario_copy / "config.yaml")]) == 3
    assert "[impute]" in capsys.readouterr().err
    assert not (scenario_copy / "out").exists()
    assert not list(scenario_copy.glob(".ctx-run-*"))


def test_failure_keeps_previous_outputs(scenario_copy):
    cfg = str(scenario_copy / "config.yaml")
    assert main(["run", "--config", cfg, "--stages", "impute"]) == 0
    before = tree(scenario_copy / "out")
    (scenario_copy / "district_prevalence.csv").write_text("district_id,prevalence\nD2,0.5\n")
    assert main(["run", "--config", cfg]) == 2
    assert tree(scenario_copy / "out") == before


def test_all_gap_participant_is_skipped_with_warning(scenario_copy, capsys):
    with open(scenario_copy / "fixes.csv", "a", encoding="utf-8") as fh:
        for h in range(0, 10, 2):
            fh.write(f"ZZ_gappy,2020-01-01T{h:02d}:00:00Z,31.83,-28.28\n")
    assert main(["run", "--config", str(scenario_copy / "config.yaml"), "--stages", "activity"]) == 0
    man = json.loads((scenario_copy / "out/manifest.json").read_text())
    assert man["stages"][0]["warnings"] == 1
    assert any("ZZ_gappy" in w for w in man["warnings"])
    summary = {r["person_id"]: r for r in rows(scenario_copy / "out/activity/summary.csv")}
    assert summary["ZZ_gappy"]["status"] == "empty"
    assert summary["ZZ_gappy"]["gap_count"] == "4"
    assert not (scenario_copy / "out/activity/activity_ZZ_gappy.csv").exists()


def test_unknown_config_key_exits_2(scenario_copy, capsys):
    edit_config(scenario_copy, kernel__width=2.0)
    assert main(["run", "--config", str(scenario_copy / "config.yaml")]) == 2
    assert "kernel" in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path):
    assert main(["run", "--config", str(tmp_path / "none.yaml")]) == 2


# ------------------------------------------------------------------
# validate
# ------------------------------------------------------------------


def test_validate_clean_inputs(small_scenario, capsys):
    assert main(["validate", "--config", str(small_scenario / "config.yaml")]) == 0
    out = capsys.readouterr().out
    assert out.count(": ok") == 8


def test_validate_reports_findings(tmp_path, capsys):
    dp = tmp_path / "dp.csv"
    dp.write_text("district_id,prevalence\nD1,1.5\n")
    fx = tmp_path / "fx.csv"
    fx.write_text("person_id,timestamp,lon,lat\na,noon,31.8,-28.3\n")
    assert main(["validate", f"district_prevalence={dp}", f"fixes={fx}", "--json"]) == 2
    report = json.loads(capsys.readouterr().out)
    assert report[str(dp)] == [f"{dp}:2 [prevalence]: expected proportion in [0, 1], got '1.5'"]
    assert report[str(fx)][0].startswith(f"{fx}:2 [timestamp]")
    assert main(["validate", f"district_prevalence={dp}", "--percent"]) == 0


def test_validate_needs_something(capsys):
    assert main(["validate"]) == 2


def test_synth_subcommands(tmp_path):
    cfg = tmp_path / "s.yaml"
    cfg.write_text("n_participants: 30\nn_gps: 2\ndays: 1\n")
    assert main(["synth", "cohort", "--config", str(cfg), "--out-dir", str(tmp_path / "c")]) == 0
    assert main(["synth", "trajectories", "--config", str(cfg), "--out-dir", str(tmp_path / "t")]) == 0
    assert len(rows(tmp_path / "c/participants.csv")) == 30
    assert {r["person_id"] for r in rows(tmp_path / "t/fixes.csv")} == {"G0000", "G0001"}
    assert main(["validate", f"tests={tmp_path / 'c/tests.csv'}", f"fixes={tmp_path / 't/fixes.csv'}"]) == 0


def test_console_script_entry_point():
    r = subprocess.run([sys.executable, "-m", "ctxexposure.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "validate" in r.stdout
