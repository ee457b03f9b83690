"""Report serialization: canonical JSON, long-form CSV, plain-text table."""

from __future__ import annotations

import csv
import io
import json
from importlib import resources
from pathlib import Path
from typing import Any, Literal, Optional, Union

from .scenario import METRICS, STATES, ComparisonReport, ScenarioReport

Format = Literal["json", "csv", "table"]
FORMATS: tuple[Format, ...] = ("json", "csv", "table")


def load_schema() -> dict[str, Any]:
    return json.loads(resources.files("hibersim.harness").joinpath("report_schema.json").read_text())


def to_json(report: Union[ScenarioReport, ComparisonReport]) -> str:
    return json.dumps(report.to_dict(), indent=2) + "\n"


def _csv_rows(report: ScenarioReport) -> list[list[Any]]:
    rows = []
    for state in STATES:
        metrics = report.states[state]
        for metric in METRICS:
            rows.append([state, metric, getattr(metrics, metric)])
    return rows


def to_csv(report: Union[ScenarioReport, ComparisonReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if isinstance(report, ComparisonReport):
        writer.writerow(["mode", "state", "metric", "value"])
        for sub in (report.pagefault, report.reap):
            writer.writerows([sub.mode, *row] for row in _csv_rows(sub))
    else:
        writer.writerow(["state", "metric", "value"])
        writer.writerows(_csv_rows(report))
    return buf.getvalue()


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _table(report: ScenarioReport) -> list[str]:
    width = max(map(len, METRICS))
    lines = [f"scenario {report.name}  mode={report.mode}  seed={report.seed}"]
    lines.append(" " * width + "".join(f"{s:>14}" for s in STATES))
    for metric in METRICS:
        cells = "".join(f"{_fmt(getattr(report.states[s], metric)):>14}" for s in STATES)
        lines.append(f"{metric:<{width}}{cells}")
    for name, value in report.ratios.items():
        lines.append(f"{name} = {_fmt(value)}")
    return lines


def to_table(report: Union[ScenarioReport, ComparisonReport]) -> str:
    if isinstance(report, ComparisonReport):
        lines = _table(report.pagefault) + [""] + _table(report.reap) + [""]
        lines.append(f"hibernate latency pagefault/reap = {_fmt(report.hibernate_latency_ratio)}")
        if report.swap_in_latency_ratio is not None:
            lines.append(f"swap-in latency pagefault/reap = {_fmt(report.swap_in_latency_ratio)}")
    else:
        lines = _table(report)
    return "\n".join(lines) + "\n"


_RENDERERS = {"json": to_json, "csv": to_csv, "table": to_table}


def render(report: Union[ScenarioReport, ComparisonReport], fmt: Format = "json") -> str:
    try:
        return _RENDERERS[fmt](report)
    except KeyError:
        raise ValueError(f"unknown report format {fmt!r}") from None


def emit_report(
    report: Union[ScenarioReport, ComparisonReport],
    fmt: Format = "json",
    path: Optional[Union[str, Path]] = None,
) -> str:
    """Render ``report``; write it to ``path`` when given.  Returns the text."""
    text = render(report, fmt)
    if path is not None:
        Path(path).write_text(text)
    return text
