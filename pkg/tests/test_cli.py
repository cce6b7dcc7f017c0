import json

import pytest

from levelkgp.cli import (
    LEVEL_INTERVAL_EDGES,
    _grid_bin,
    build_report,
    cfg_to_shallow_dict,
    level_interval_index,
    main,
    write_report,
)
from levelkgp.config import MasterConfig
from levelkgp.errors import ConfigurationError, InputError
from levelkgp.fitting import DriverReport, FitResult


def _result(state_id, level, success, crit=0.5):
    return FitResult(
        state_id=state_id,
        n_obs=50,
        level=level,
        crit=crit,
        success=success,
        method="sa",
    )


def _report(driver_id, method, results):
    rep = DriverReport(
        driver_id=driver_id, method=method, n_states_observed=len(results)
    )
    rep.results = list(results)
    return rep


# -- binning -------------------------------------------------------------------


def test_level_interval_index_edges():
    assert level_interval_index(0.0) == 0
    assert level_interval_index(0.29) == 0
    assert level_interval_index(0.3) == 1
    assert level_interval_index(1.0) == 4
    assert level_interval_index(2.7) == 13
    assert level_interval_index(3.0) == 13  # top edge is inclusive
    with pytest.raises(InputError):
        level_interval_index(-0.01)
    with pytest.raises(InputError):
        level_interval_index(3.01)


def test_grid_bin_caps_at_last_cell():
    assert _grid_bin(0.0) == 0
    assert _grid_bin(4.9) == 0
    assert _grid_bin(5.0) == 1
    assert _grid_bin(99.9) == 19
    assert _grid_bin(100.0) == 19


# -- report assembly -------------------------------------------------------------


@pytest.fixture
def reports():
    continuous = [
        _report(
            "a",
            "continuous",
            [
                _result(0, 0.4, True),
                _result(1, 1.0, True),
                _result(2, 2.0, False),
            ],
        ),
        _report("b", "continuous", [_result(0, 2.9, True)]),
        _report("c", "continuous", []),  # no eligible states
    ]
    discrete = [
        _report("a", "discrete", [_result(0, 1.0, False)]),
        _report("b", "discrete", [_result(0, 3.0, True)]),
    ]
    return continuous, discrete


def test_build_report_aggregates(reports):
    doc = build_report(*reports)
    assert doc["n_drivers"] == 3
    per = doc["continuous"]["per_driver"]
    assert per["a"] == pytest.approx(200 / 3)
    assert per["b"] == 100.0
    assert per["c"] is None
    assert doc["continuous"]["mean_percent"] == pytest.approx((200 / 3 + 100) / 2)
    assert doc["discrete"]["per_driver"] == {"a": 0.0, "b": 100.0, "c": None}
    assert doc["discrete"]["mean_percent"] == 50.0


def test_build_report_histogram_counts_successes(reports):
    doc = build_report(*reports)
    counts = doc["level_histogram"]["counts"]
    assert sum(counts) == 3  # one per successful continuous fit
    assert counts[1] == 1  # level 0.4
    assert counts[4] == 1  # level 1.0
    assert counts[13] == 1  # level 2.9
    assert doc["level_histogram"]["edges"] == list(LEVEL_INTERVAL_EDGES)
    assert len(doc["fitted_levels"]) == 3
    assert all(set(r) == {"driver_id", "state_id", "level", "crit"} for r in doc["fitted_levels"])


def test_build_report_grid_needs_both_methods(reports):
    doc = build_report(*reports)
    cells = doc["success_grid"]["cells"]
    # driver c lacks percents on both sides, so only a and b land in cells
    assert sum(c["count"] for c in cells) == 2
    assert {(c["discrete_bin"], c["continuous_bin"]) for c in cells} == {
        (0, 13),
        (19, 19),
    }


def test_write_report_files(tmp_path, reports):
    doc = build_report(*reports)
    paths = write_report(doc, tmp_path)
    names = [p.name for p in paths]
    assert names == [
        "summary.json",
        "fig2_success.csv",
        "fig3_grid.csv",
        "fig4_scatter.csv",
        "fig5_intervals.csv",
    ]
    for p in paths:
        assert p.exists()

    parsed = json.loads((tmp_path / "summary.json").read_text())
    assert parsed == doc

    fig2 = (tmp_path / "fig2_success.csv").read_text().splitlines()
    assert fig2[0] == "driver_id,continuous_percent,discrete_percent"
    assert len(fig2) == 1 + 3
    assert fig2[3] == "c,,"  # undefined percents stay empty

    fig4 = (tmp_path / "fig4_scatter.csv").read_text().splitlines()
    assert len(fig4) == 1 + len(doc["fitted_levels"])

    fig5 = (tmp_path / "fig5_intervals.csv").read_text().splitlines()
    shares = [float(line.split(",")[3]) for line in fig5[1:]]
    assert sum(shares) == pytest.approx(1.0)

    fig3 = (tmp_path / "fig3_grid.csv").read_text().splitlines()
    assert len(fig3) == 1 + len(doc["success_grid"]["cells"])


def test_write_report_empty_inputs(tmp_path):
    doc = build_report([], [])
    write_report(doc, tmp_path)
    assert doc["n_drivers"] == 0
    assert doc["continuous"]["mean_percent"] is None
    fig5 = (tmp_path / "fig5_intervals.csv").read_text().splitlines()
    shares = [float(line.split(",")[3]) for line in fig5[1:]]
    assert sum(shares) == 0.0


# -- config loading ----------------------------------------------------------------


def test_master_config_round_trips_through_shallow_dict():
    cfg = MasterConfig()
    again = MasterConfig.from_dict(cfg_to_shallow_dict(cfg))
    assert again == cfg


def test_master_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"seed": 1, "typo_key": 2}))
    with pytest.raises(ConfigurationError):
        MasterConfig.from_json(path)


def test_main_surfaces_config_errors(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"nope": True}))
    code = main(["report", "--config", str(path)])
    assert code == 1
    assert "error:" in capsys.readouterr().err


# -- subcommands --------------------------------------------------------------------


def test_best_response_command(capsys):
    code = main(["best-response", "--coeffs", "0.2,0.5,0.3", "--check"])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["best_response_levels"] == [2]
    assert doc["value"] == 0.5
    assert doc["strategy"] == [0.0, 0.0, 1.0, 0.0]
    assert doc["brute_force"]["value_matches"] is True
    assert doc["brute_force"]["supports_within_set"] is True


def test_best_response_custom_grid(capsys):
    code = main(["best-response", "--coeffs", "1.0,0.0", "--check", "--grid-step", "0.2"])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["best_response_levels"] == [1]
    assert doc["value"] == 1.0


def test_best_response_rejects_bad_coeffs(capsys):
    assert main(["best-response", "--coeffs", "0.5,abc"]) == 1
    assert "error:" in capsys.readouterr().err
    assert main(["best-response", "--coeffs", "0.9,0.3"]) == 1
    assert "error:" in capsys.readouterr().err


def test_ingest_command(tmp_path, capsys):
    csv_path = tmp_path / "t.csv"
    csv_path.write_text(
        "vehicle_id,frame,local_x,local_y,lane_id,velocity\n"
        "1,0,5.55,100.0,1,10.0\n"
        "1,1,5.55,101.0,1,10.0\n"
    )
    out_path = tmp_path / "records.json"
    code = main(
        [
            "ingest",
            "--input",
            str(csv_path),
            "--out",
            str(out_path),
            "--out-dir",
            str(tmp_path),
        ]
    )
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["rows_total"] == 2
    assert doc["n_transitions"] == 1
    saved = json.loads(out_path.read_text())
    assert list(saved) == ["1"]


# -- pipeline -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def smoke_config(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    cfg = {
        "seed": 5,
        "jobs": 2,
        "out_dir": str(root / "out"),
        "rl": {"episodes": 25},
        "env": {"episode_steps": 25},
        "synthesis": {
            "n_states": 2,
            "min_state_visits": 3,
            "drivers": [
                {"driver_id": "da", "level": 1.5, "samples_per_state": 60},
            ],
        },
    }
    path = root / "smoke.json"
    path.write_text(json.dumps(cfg))
    return path, root / "out"


def test_pipeline_smoke(smoke_config, capsys):
    path, out = smoke_config
    code = main(["pipeline", "--config", str(path)])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["stages"] == [
        "train-levels",
        "build-gp",
        "synthesize",
        "ingest",
        "fit-drivers",
        "report",
    ]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_drivers"] == 1
    assert (out / "qtables.json").exists()
    assert (out / "models").is_dir()
    assert (out / "trajectories" / "da.csv").exists()
    assert (out / "ingest_summary.json").exists()


def test_pipeline_no_train_reuses_artifacts(smoke_config, capsys):
    path, out = smoke_config
    before = (out / "summary.json").read_bytes()
    code = main(["pipeline", "--config", str(path), "--no-train"])
    assert code == 0
    capsys.readouterr()
    assert (out / "summary.json").read_bytes() == before


def test_pipeline_no_train_fails_cleanly_without_artifacts(tmp_path, capsys):
    code = main(["pipeline", "--no-train", "--out-dir", str(tmp_path / "none")])
    assert code == 1
    err = capsys.readouterr().err
    assert "train-levels" in err
