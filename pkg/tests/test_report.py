import json

import pytest

from loralign import report as rep
from loralign.report import ReportError, check_compatible, markdown_table, parse_report, parse_report_csv, report_csv
from loralign.trainer import RunReport

TASKS = ("fog", "rain", "snow")


def make_report(method="lora", novel="raindrop", pre=TASKS, shift=0.0):
    kinds = list(pre) + [novel]
    metrics = {
        stage: {t: (20.0 + i + shift + off, 0.8 + 0.01 * i) for i, t in enumerate(kinds)}
        for stage, off in (("input", -3.0), ("before", 0.0), ("after", 1.0 / 3.0))
    }
    return RunReport(method, tuple(pre), novel, metrics, 6144, 37328, {"l1": [0.1, 0.05]}, {"mode": method}, 1.5)


def test_csv_layout():
    text = report_csv(make_report())
    lines = text.splitlines()
    assert lines[0] == "# laln-report v1"
    assert lines[1] == "method,task,role,stage,metric,value"
    # 3 stages x 4 tasks x 2 metrics, plus two parameter-count rows
    assert len(lines) == 2 + 24 + 2
    assert "lora,raindrop,novel,after,psnr,23.333333333333332" in lines
    assert lines[-2:] == ["lora,all,-,after,trainable_params,6144", "lora,all,-,after,total_params,37328"]


def test_csv_roundtrip():
    r = make_report()
    parsed = parse_report(r)
    assert parsed.method == "lora" and parsed.pretrain_tasks == TASKS and parsed.novel == "raindrop"
    assert parsed.trainable_params == 6144 and parsed.total_params == 37328
    for stage, per in r.metrics.items():
        for task, val in per.items():
            assert parsed.cells[(stage, task)] == val


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda t: t.replace("# laln-report v1", "# laln-report v2"), "first line"),
        (lambda t: t.replace("method,task", "meth,task"), "columns"),
        (lambda t: t.replace(",psnr,2", ",psnr,x2", 1), "not a number"),
        (lambda t: t.replace(",psnr,2", ",psnr,nan,", 1), "fields"),
        (lambda t: t.replace(",ssim,", ",lpips,", 1), "unknown metric"),
        (lambda t: t.replace("pretrained", "other", 1), "unknown role"),
        (lambda t: "\n".join(l for l in t.splitlines() if "total_params" not in l), "total_params"),
    ],
)
def test_malformed_csv_names_file(mutate, match):
    with pytest.raises(ReportError, match=match) as exc:
        parse_report_csv(mutate(report_csv(make_report())), "runs/x/report.csv")
    assert "runs/x/report.csv" in str(exc.value)


def test_markdown_single_and_four_rows():
    runs = [parse_report(make_report(m, shift=i)) for i, m in enumerate(["pretrained", "full", "lora", "lora-a"])]
    one = markdown_table(runs[:1]).splitlines()
    assert len(one) == 3
    assert one[0] == "| Method | Trainable params | fog | rain | snow | raindrop (novel) | Pre-task mean PSNR |"
    assert one[2] == "| pretrained | 6,144 (16.46%) | 20.33/0.800 | 21.33/0.810 | 22.33/0.820 | 23.33/0.830 | 21.33 |"
    four = markdown_table(runs).splitlines()
    assert len(four) == 6
    assert [row.split(" | ")[0] for row in four[2:]] == ["| pretrained", "| full", "| lora", "| lora-a"]


def test_mismatched_task_sets_listed():
    a = parse_report_csv(report_csv(make_report()), "a.csv")
    b = parse_report_csv(report_csv(make_report(novel="fog", pre=("rain", "snow", "raindrop"))), "b.csv")
    with pytest.raises(ReportError, match="task sets differ") as exc:
        check_compatible([a, b])
    assert "a.csv" in str(exc.value) and "b.csv" in str(exc.value) and "novel=fog" in str(exc.value)
    with pytest.raises(ReportError):
        markdown_table([])


def test_write_and_load_run(tmp_path):
    r = make_report()
    paths = rep.write_run(r, tmp_path / "run")
    assert sorted(p.name for p in (tmp_path / "run").iterdir()) == ["report.csv", "report.md", "summary.json"]
    assert rep.load_run(tmp_path / "run").cells == parse_report(r).cells
    summary = json.loads(paths["json"].read_text())
    assert summary["wall_clock_s"] == 1.5 and summary["curves"]["l1"] == [0.1, 0.05]
    with pytest.raises(ReportError, match="cannot read"):
        rep.load_run(tmp_path / "missing")


def test_ablation_csv():
    rows = [rep.ablation_row("rank", str(r), make_report(shift=r)) for r in (2, 4)]
    lines = rep.ablation_csv(rows).splitlines()
    assert lines[0] == "# laln-report v1"
    assert lines[1] == ",".join(rep.ABLATION_COLUMNS)
    assert lines[2].startswith(f"rank,2,lora,6144,25.333333333333332,{0.8 + 0.03!r},")
    assert len(lines) == 4
