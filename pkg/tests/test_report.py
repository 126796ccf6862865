import csv
import math

import pytest

from jointseg.metrics import write_metrics_csv
from jointseg.report import load_metrics, render_report, summarize


def _rows(stage, values):
    return [
        {
            "subject_id": f"s{i}",
            "class_name": "white_matter",
            "dice": f"{v:.6f}",
            "hd95": f"{v * 2:.6f}" if i % 2 == 0 else None,
            "stage": stage,
        }
        for i, v in enumerate(values)
    ]


@pytest.fixture
def metrics_dir(tmp_path):
    d = tmp_path / "metrics"
    d.mkdir()
    write_metrics_csv(d / "a_metrics.csv", _rows("pretrained", [0.8, 0.9, 0.85]))
    write_metrics_csv(d / "b_metrics.csv", _rows("joint", [0.91, 0.93]))
    with open(d / "adaptation_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "step", "inner_loss"])
        for s in range(2):
            for k in range(4):
                w.writerow([f"s{s}", k, 1.0 - 0.1 * k])
    return d


def test_empty_dir_reports_no_data(tmp_path):
    out = tmp_path / "report"
    (tmp_path / "metrics").mkdir()
    written = render_report(tmp_path / "metrics", out)
    assert len(written) == 1
    assert "no_data" in written[0]
    assert "nothing to report" in open(written[0]).read()


def test_summary_matches_independent_recomputation(metrics_dir, tmp_path):
    written = render_report(metrics_dir, tmp_path / "rep")
    summary_path = next(p for p in written if p.endswith(".csv"))

    # independent recomputation straight from the raw CSVs
    raw = []
    for name in ("a_metrics.csv", "b_metrics.csv"):
        with open(metrics_dir / name) as fh:
            raw.extend(csv.DictReader(fh))
    by_stage = {}
    for row in raw:
        by_stage.setdefault(row["stage"], []).append(float(row["dice"]))

    with open(summary_path) as fh:
        summary = {r["stage"]: r for r in csv.DictReader(fh)}
    for stage, dices in by_stage.items():
        mean = sum(dices) / len(dices)
        var = sum((d - mean) ** 2 for d in dices) / (len(dices) - 1)
        assert float(summary[stage]["dice_mean"]) == pytest.approx(mean, abs=1e-9)
        assert float(summary[stage]["dice_std"]) == pytest.approx(math.sqrt(var), abs=1e-9)
        assert int(summary[stage]["n"]) == len(dices)


def test_figures_rendered(metrics_dir, tmp_path):
    written = render_report(metrics_dir, tmp_path / "rep")
    pngs = [p for p in written if p.endswith(".png")]
    assert len(pngs) == 2  # dice bars + adaptation traces
    for p in pngs:
        assert open(p, "rb").read(8).startswith(b"\x89PNG")


def test_deterministic_file_names(metrics_dir, tmp_path):
    w1 = render_report(metrics_dir, tmp_path / "r1")
    w2 = render_report(metrics_dir, tmp_path / "r2")
    assert [p.split("/")[-1] for p in w1] == [p.split("/")[-1] for p in w2]


def test_missing_hd95_excluded_not_zeroed(metrics_dir, tmp_path):
    df = load_metrics(metrics_dir)
    s = summarize(df)
    sel = s[s["stage"] == "pretrained"].iloc[0]
    # only rows 0 and 2 carry hd95 (1.6, 1.7): mean excludes the missing one
    assert sel["hd95_mean"] == pytest.approx((1.6 + 1.7) / 2, abs=1e-9)
