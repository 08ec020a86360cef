from __future__ import annotations

import json

import pytest

from timebin.cli import apply_overrides, build_parser, config_overrides, main
from timebin.core.errors import ConfigError
from timebin.importers.scenario import load_scenario
from timebin.services import MANIFEST_NAME


def _only_run_dir(root):
    (run_dir,) = list(root.iterdir())
    return run_dir


def test_global_flags_survive_the_subcommand(tmp_path):
    args = build_parser().parse_args(["--seed", "9", "--threads", "2", "simulate", "a.cfg", "--format", "csv"])

    assert (args.seed, args.threads, args.tag_format) == (9, 2, "csv")
    assert args.command == "simulate"


def test_defaults_when_flags_are_absent():
    args = build_parser().parse_args(["report", "runs/x"])

    assert args.seed is None
    assert args.threads == 1
    assert args.tag_format == "binary"
    assert args.verbose == 0


def test_missing_argument_exits_with_usage_status():
    with pytest.raises(SystemExit) as excinfo:
        main(["simulate"])

    assert excinfo.value.code == 1


def test_override_flags_are_grouped_by_section():
    args = build_parser().parse_args(
        ["pipeline", "a.cfg", "--d-list", "4,12", "--sync-block-len", "20", "--grid-phase", "auto"]
    )

    overrides = config_overrides(args)

    assert overrides == {
        "analysis": {"d_list": "4,12", "grid_phase_ps": "auto"},
        "sync": {"block_len_s": 20.0},
    }


def test_invalid_override_is_a_config_error(quick_scenario):
    config = load_scenario(quick_scenario)

    with pytest.raises(ConfigError, match="analysis.d_list"):
        apply_overrides(config, {"analysis": {"d_list": "1"}})


def test_pipeline_command(tmp_run_root, quick_scenario, capsys):
    status = main(["pipeline", str(quick_scenario), "--out", str(tmp_run_root), "--seed", "5"])

    assert status == 0
    run_dir = _only_run_dir(tmp_run_root)
    assert run_dir.name == "quick_seed5_run001"
    assert (run_dir / "report.csv").exists()
    assert "2 blocks" in capsys.readouterr().out


def test_stage_by_stage_commands(tmp_run_root, quick_scenario, capsys):
    assert main(["simulate", str(quick_scenario), "--out", str(tmp_run_root), "--format", "csv"]) == 0
    run_dir = _only_run_dir(tmp_run_root)

    assert main(["sync", str(run_dir), "--truth-clock"]) == 0
    assert main(["analyze", str(run_dir), "--d-list", "4,6"]) == 0
    assert main(["report", str(run_dir)]) == 0

    assert (run_dir / "bob_synced.csv").exists()
    manifest = json.loads((run_dir / MANIFEST_NAME).read_text(encoding="utf-8"))
    assert manifest["config"]["analysis"]["d_list"] == [4, 6]
    assert manifest["parameters"]["overrides"] == {"analysis": {"d_list": "4,6"}}
    assert "certified" in capsys.readouterr().out


def test_rerunning_a_stage_fails(tmp_run_root, quick_scenario, capsys):
    main(["simulate", str(quick_scenario), "--out", str(tmp_run_root)])
    run_dir = _only_run_dir(tmp_run_root)
    assert main(["sync", str(run_dir), "--truth-clock"]) == 0

    status = main(["sync", str(run_dir)])

    assert status == 1
    assert "already ran" in capsys.readouterr().err


def test_missing_config_creates_no_run_dir(tmp_run_root, tmp_path, capsys):
    status = main(["pipeline", str(tmp_path / "absent.cfg"), "--out", str(tmp_run_root)])

    assert status == 1
    assert not tmp_run_root.exists()
    assert "not found" in capsys.readouterr().err


def test_zero_duration_is_rejected(tmp_run_root, quick_scenario):
    quick_scenario.write_text(
        quick_scenario.read_text(encoding="utf-8").replace("duration_s = 20", "duration_s = 0"), encoding="utf-8"
    )

    assert main(["simulate", str(quick_scenario), "--out", str(tmp_run_root)]) == 1
    assert not tmp_run_root.exists()


def test_threads_must_be_positive(tmp_run_root, quick_scenario):
    assert main(["simulate", str(quick_scenario), "--out", str(tmp_run_root), "--threads", "0"]) == 1


def test_sync_failure_exit_status(tmp_run_root, dark_scenario, capsys):
    status = main(["pipeline", str(dark_scenario), "--out", str(tmp_run_root)])

    assert status == 3
    assert "sync" in capsys.readouterr().err


def test_corrupt_tag_file_exit_status(tmp_run_root, quick_scenario):
    main(["simulate", str(quick_scenario), "--out", str(tmp_run_root)])
    run_dir = _only_run_dir(tmp_run_root)
    (run_dir / "bob.ftag").write_bytes(b"NOPE" + bytes(12))

    assert main(["sync", str(run_dir)]) == 2


def test_sweep_command(tmp_run_root, quick_scenario, capsys):
    status = main(
        ["sweep", str(quick_scenario), "--out", str(tmp_run_root), "--noise-levels", "0,2", "--duration", "10"]
    )

    assert status == 0
    assert "Swept 2 noise levels x 2 dimensions" in capsys.readouterr().out
    run_dir = _only_run_dir(tmp_run_root)
    manifest = json.loads((run_dir / MANIFEST_NAME).read_text(encoding="utf-8"))
    assert manifest["config"]["session"]["duration_s"] == 10.0


def test_pipeline_runs_with_one_seed_write_identical_tables(tmp_run_root, quick_scenario):
    for _ in range(2):
        assert main(["pipeline", str(quick_scenario), "--out", str(tmp_run_root), "--seed", "5"]) == 0

    first, second = sorted(tmp_run_root.iterdir())
    assert (first.name, second.name) == ("quick_seed5_run001", "quick_seed5_run002")
    for name in ("report.csv", "best_dimension.csv", "analysis.csv", "clock_model.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes()
    for path in sorted((first / "ground_truth").iterdir()):
        assert path.read_bytes() == (second / "ground_truth" / path.name).read_bytes()
