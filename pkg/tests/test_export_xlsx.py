import pandas as pd
from openpyxl import load_workbook

from timebin.exporting.xlsx import write_report_workbook
from timebin.schemas import RunManifest, StageRecord


def _make_manifest():
    return RunManifest(
        tool_version="1.4.0",
        command="pipeline",
        seed=7,
        config={"session": {"epoch": 1624496400}},
        parameters={"tag_format": "binary"},
        stages=[StageRecord(name="report", outputs={"report.csv": "ab" * 32}, seconds=0.5)],
    )


def _make_report():
    report = pd.DataFrame(
        {
            "block_id": [0, 0],
            "block_start_s": [0.0, 0.0],
            "d": [4, 36],
            "witness_avg": [1.93, 1.88],
            "key_fraction": [0.61, 0.55],
            "key_rate_bps": [2.5, 1.25],
            "coincidences": [1_200, 1_150],
            "singles_rate_bob": [3_100.0, 3_100.0],
        }
    )
    best = pd.DataFrame({"block_id": [0], "block_start_s": [0.0], "best_d": [4], "key_rate_bps": [2.5], "witness_avg": [1.93]})
    return report, best


def test_workbook_has_three_sheets(tmp_path):
    report, best = _make_report()

    path = write_report_workbook(tmp_path / "report.xlsx", report, best, _make_manifest())

    workbook = load_workbook(path)
    assert workbook.sheetnames == ["Report", "BestDimension", "Manifest"]


def test_best_dimension_sheet_adds_display_rate(tmp_path):
    report, best = _make_report()
    path = write_report_workbook(tmp_path / "report.xlsx", report, best, _make_manifest())

    sheet = pd.read_excel(path, sheet_name="BestDimension")

    assert sheet["key_rate"].tolist() == ["2.50 bit/s"]
    assert sheet["best_d"].tolist() == [4]


def test_manifest_sheet_lists_stages_and_digests(tmp_path):
    report, best = _make_report()
    path = write_report_workbook(tmp_path / "report.xlsx", report, best, _make_manifest())

    sheet = pd.read_excel(path, sheet_name="Manifest")
    values = dict(zip(sheet["field"], sheet["value"].astype(str)))

    assert values["epoch"] == "2021-06-24 01:00:00 UTC"
    assert values["stage.report"] == "ok in 0.50 s"
    assert values["artifact.report.csv"] == "ab" * 32
    assert values["parameter.tag_format"] == "binary"


def test_report_sheet_round_trips(tmp_path):
    report, best = _make_report()
    path = write_report_workbook(tmp_path / "report.xlsx", report, best)

    pd.testing.assert_frame_equal(pd.read_excel(path, sheet_name="Report"), report, check_dtype=False)
