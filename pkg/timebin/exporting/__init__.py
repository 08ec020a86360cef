"""Report export helpers."""

from .xlsx import write_report_workbook

__all__ = ["write_report_workbook"]
