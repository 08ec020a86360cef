from __future__ import annotations

from pathlib import Path
from typing import Optional

import pandas as pd

from timebin.core.formatting import format_epoch, format_rate
from timebin.schemas import RunManifest

REPORT_SHEET = "Report"
BEST_SHEET = "BestDimension"
MANIFEST_SHEET = "Manifest"


def _manifest_df(manifest: RunManifest) -> pd.DataFrame:
    rows = [
        {"field": "tool_version", "value": manifest.tool_version},
        {"field": "command", "value": manifest.command},
        {"field": "seed", "value": manifest.seed},
    ]
    session = manifest.config.get("session", {})
    if "epoch" in session:
        rows.append({"field": "epoch", "value": format_epoch(session["epoch"])})
    for key, value in sorted(manifest.parameters.items()):
        rows.append({"field": f"parameter.{key}", "value": str(value)})
    for stage in manifest.stages:
        rows.append(
            {
                "field": f"stage.{stage.name}",
                "value": f"{stage.status} in {stage.seconds:.2f} s",
            }
        )
        for name, digest in sorted(stage.outputs.items()):
            rows.append({"field": f"artifact.{name}", "value": digest})
    return pd.DataFrame(rows, columns=["field", "value"])


def _best_df(best: pd.DataFrame) -> pd.DataFrame:
    display = best.copy()
    if "key_rate_bps" in display:
        display["key_rate"] = display["key_rate_bps"].apply(format_rate)
    return display


def write_report_workbook(
    path: Path,
    report: pd.DataFrame,
    best: pd.DataFrame,
    manifest: Optional[RunManifest] = None,
) -> Path:
    """Write the report workbook with Report, BestDimension and Manifest sheets."""

    path.parent.mkdir(parents=True, exist_ok=True)
    with pd.ExcelWriter(path, engine="openpyxl") as writer:
        report.to_excel(writer, sheet_name=REPORT_SHEET, index=False)
        _best_df(best).to_excel(writer, sheet_name=BEST_SHEET, index=False)
        manifest_df = _manifest_df(manifest) if manifest is not None else pd.DataFrame(columns=["field", "value"])
        manifest_df.to_excel(writer, sheet_name=MANIFEST_SHEET, index=False)
    return path


__all__ = ["write_report_workbook"]
