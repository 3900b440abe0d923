"""Run reports as versioned CSV, markdown tables and JSON summaries."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .trainer import RunReport

CSV_HEADER = "# laln-report v1"
COLUMNS = ("method", "task", "role", "stage", "metric", "value")
ABLATION_COLUMNS = ("sweep", "value", "mode", "trainable_params", "novel_psnr", "novel_ssim", "pre_psnr", "pre_ssim")
COUNT_METRICS = ("trainable_params", "total_params")


class ReportError(ValueError):
    pass


def _num(x: float) -> str:
    # repr round-trips exactly, so equal runs give byte-identical files
    return repr(float(x))


def report_rows(report: RunReport) -> list[tuple]:
    rows = []
    for stage, per_task in report.metrics.items():
        for task, (ps, ss) in per_task.items():
            role = report.role(task)
            rows.append((report.method, task, role, stage, "psnr", _num(ps)))
            rows.append((report.method, task, role, stage, "ssim", _num(ss)))
    rows.append((report.method, "all", "-", "after", "trainable_params", str(report.trainable_params)))
    rows.append((report.method, "all", "-", "after", "total_params", str(report.total_params)))
    return rows


def _csv_text(header_cols, rows) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header_cols)
    w.writerows(rows)
    return buf.getvalue()


def report_csv(report: RunReport) -> str:
    return _csv_text(COLUMNS, report_rows(report))


@dataclass
class ParsedRun:
    """What a report CSV says about one run."""

    source: str
    method: str
    pretrain_tasks: tuple[str, ...]
    novel: str
    cells: dict[tuple[str, str], tuple[float, float]]  # (stage, task) -> (psnr, ssim)
    trainable_params: int
    total_params: int

    def tasks(self) -> list[str]:
        return list(self.pretrain_tasks) + ([self.novel] if self.novel else [])


def parse_report_csv(text: str, source: str = "<string>") -> ParsedRun:
    lines = text.splitlines()
    if not lines or lines[0].strip() != CSV_HEADER:
        raise ReportError(f"{source}: first line must be {CSV_HEADER!r}")
    rows = list(csv.reader(lines[1:]))
    if not rows or tuple(rows[0]) != COLUMNS:
        raise ReportError(f"{source}: expected columns {','.join(COLUMNS)}")
    methods, pre, novel = set(), [], []
    metrics: dict[tuple[str, str], dict[str, float]] = {}
    counts = {}
    for lineno, row in enumerate(rows[1:], start=3):
        if len(row) != len(COLUMNS):
            raise ReportError(f"{source}:{lineno}: expected {len(COLUMNS)} fields, got {len(row)}")
        method, task, role, stage, metric, value = row
        methods.add(method)
        try:
            val = float(value)
        except ValueError:
            raise ReportError(f"{source}:{lineno}: value {value!r} is not a number") from None
        if not math.isfinite(val):
            raise ReportError(f"{source}:{lineno}: non-finite value")
        if metric in COUNT_METRICS:
            counts[metric] = int(val)
            continue
        if metric not in ("psnr", "ssim"):
            raise ReportError(f"{source}:{lineno}: unknown metric {metric!r}")
        if role == "novel":
            if task not in novel:
                novel.append(task)
        elif role == "pretrained":
            if task not in pre:
                pre.append(task)
        else:
            raise ReportError(f"{source}:{lineno}: unknown role {role!r}")
        metrics.setdefault((stage, task), {})[metric] = val
    if len(methods) != 1:
        raise ReportError(f"{source}: expected one method, found {sorted(methods)}")
    if len(novel) > 1:
        raise ReportError(f"{source}: more than one novel task {novel}")
    cells = {}
    for key, m in metrics.items():
        if set(m) != {"psnr", "ssim"}:
            raise ReportError(f"{source}: stage {key[0]!r} task {key[1]!r} lacks psnr or ssim")
        cells[key] = (m["psnr"], m["ssim"])
    for metric in COUNT_METRICS:
        if metric not in counts:
            raise ReportError(f"{source}: missing {metric} row")
    return ParsedRun(
        source, methods.pop(), tuple(pre), novel[0] if novel else "", cells, counts["trainable_params"], counts["total_params"]
    )


def parse_report(report: RunReport) -> ParsedRun:
    return parse_report_csv(report_csv(report))


def check_compatible(runs: list[ParsedRun]) -> None:
    """All runs must share pre-training tasks and novel task."""
    ref = runs[0]
    bad = [r for r in runs[1:] if set(r.pretrain_tasks) != set(ref.pretrain_tasks) or r.novel != ref.novel]
    if bad:
        lines = [f"  {r.source}: pre-trained={','.join(r.pretrain_tasks)} novel={r.novel or '-'}" for r in [ref] + bad]
        raise ReportError("task sets differ across runs:\n" + "\n".join(lines))


def _cell(run: ParsedRun, task: str, stage: str = "after") -> str:
    if (stage, task) not in run.cells:
        return "-"
    ps, ss = run.cells[(stage, task)]
    return f"{ps:.2f}/{ss:.3f}"


def markdown_table(runs: list[ParsedRun], stage: str = "after") -> str:
    """Rows are methods; columns are pre-trained tasks then the novel task (PSNR/SSIM)."""
    if not runs:
        raise ReportError("no runs to tabulate")
    check_compatible(runs)
    ref = runs[0]
    tasks = ref.tasks()
    head = ["Method", "Trainable params"] + [f"{t} (novel)" if t == ref.novel else t for t in tasks]
    head.append("Pre-task mean PSNR")
    out = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for run in runs:
        pct = 100.0 * run.trainable_params / run.total_params if run.total_params else 0.0
        pre = [run.cells[(stage, t)][0] for t in run.pretrain_tasks if (stage, t) in run.cells]
        mean = f"{np.mean(pre):.2f}" if pre else "-"
        cells = [run.method, f"{run.trainable_params:,} ({pct:.2f}%)"] + [_cell(run, t, stage) for t in tasks] + [mean]
        out.append("| " + " | ".join(cells) + " |")
    return "\n".join(out) + "\n"


def summary(report: RunReport) -> dict:
    """JSON-ready summary, including curves and wall-clock."""
    return {
        "method": report.method,
        "pretrain_tasks": list(report.pretrain_tasks),
        "novel": report.novel,
        "metrics": {st: {t: {"psnr": v[0], "ssim": v[1]} for t, v in per.items()} for st, per in report.metrics.items()},
        "trainable_params": report.trainable_params,
        "total_params": report.total_params,
        "config": report.config,
        "curves": report.curves,
        "wall_clock_s": report.wall_clock,
    }


def write_run(report: RunReport, out_dir) -> dict[str, Path]:
    """Write ``report.csv``, ``report.md`` and ``summary.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "report.csv", "md": out / "report.md", "json": out / "summary.json"}
    paths["csv"].write_text(report_csv(report))
    paths["md"].write_text(markdown_table([parse_report(report)]))
    paths["json"].write_text(json.dumps(summary(report), indent=2) + "\n")
    return paths


def load_run(path) -> ParsedRun:
    """Read a run directory (or a report CSV path directly)."""
    path = Path(path)
    if path.is_dir():
        path = path / "report.csv"
    try:
        text = path.read_text()
    except OSError as exc:
        raise ReportError(f"{path}: cannot read ({exc.strerror})") from None
    return parse_report_csv(text, str(path))


def ablation_row(sweep: str, value: str, report: RunReport) -> tuple:
    after = report.metrics["after"]
    pre = [after[t] for t in report.pretrain_tasks]
    return (
        sweep,
        value,
        report.config["mode"],
        str(report.trainable_params),
        _num(after[report.novel][0]),
        _num(after[report.novel][1]),
        _num(np.mean([p[0] for p in pre])),
        _num(np.mean([p[1] for p in pre])),
    )


def ablation_csv(rows: list[tuple]) -> str:
    return _csv_text(ABLATION_COLUMNS, rows)
