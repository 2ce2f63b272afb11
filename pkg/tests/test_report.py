import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from hccnet.metrics import aggregate_runs, cumulative_gain_mae, reliability
from hccnet.report import (
    CSV_COLUMNS,
    SchemaMismatchError,
    comparison_table,
    emit_report,
    format_table,
    read_metrics_json,
    write_metrics_json,
)

SVG = "{http://www.w3.org/2000/svg}"


def run(seed, **kw):
    base = dict(seed=seed, accuracy=0.5, precision=0.4, recall=0.6, f1=0.48, auroc=0.7, auprc=0.5,
                ece=0.1, mce=0.2, brier=0.2, flags=[])
    base.update(kw)
    return base


def report(label, **kw):
    return aggregate_runs([run(s, **kw) for s in range(3)], label=label)


def relative_cells(text, metric):
    header, *rows = [line.split("\t") for line in text.splitlines()]
    row = next(r for r in rows if r[0] == metric)
    return {h: v for h, v in zip(header, row) if h.endswith("_rel_change")}


class TestEmit:
    def test_files_and_structure(self, tmp_path):
        rep = aggregate_runs([run(0, auroc=0.9), run(1, auroc=0.6), run(2, auprc=float("nan"))], "finetune")
        calib = reliability([0.05, 0.12, 0.18, 0.55, 0.93], [0, 0, 1, 1, 1])
        gains = {"auroc": cumulative_gain_mae([r["auroc"] for r in rep.runs])}
        files = emit_report(rep, gains, calib, tmp_path)
        assert {p.name for p in files.values()} == {"metrics.json", "metrics.csv", "reliability.svg", "gain.svg"}

        back = read_metrics_json(files["json"])
        assert back.mean["auroc"] == rep.mean["auroc"] and back.label == "finetune"
        assert np.isnan(back.runs[2]["auprc"]) and np.isnan(back.mean["auprc"])

        rows = list(csv.reader(open(files["csv"])))
        assert tuple(rows[0]) == CSV_COLUMNS
        assert len(rows) - 1 == len(rep.runs)

        bars = ET.parse(files["reliability"]).getroot().findall(f"{SVG}rect")
        assert len(bars) == int((calib.counts > 0).sum()) == 4
        legend = [t.text for t in ET.parse(files["reliability"]).getroot().iter(f"{SVG}text")]
        assert any("ECE" in (t or "") for t in legend)
        lines = ET.parse(files["gain"]).getroot().findall(f"{SVG}polyline")
        assert len(lines) == 1

    def test_json_round_trip_equal(self, tmp_path):
        rep = report("baseline")
        back = read_metrics_json(write_metrics_json(rep, tmp_path / "m.json"))
        assert back.to_dict() == rep.to_dict()

    def test_schema_mismatch(self, tmp_path):
        p = write_metrics_json(report("x"), tmp_path / "m.json")
        doc = json.loads(p.read_text())
        doc["schema_version"] = 99
        p.write_text(json.dumps(doc))
        with pytest.raises(SchemaMismatchError):
            read_metrics_json(p)


class TestComparison:
    def test_identical_reports(self):
        text = format_table(comparison_table(report("baseline"), [report("finetune")]))
        assert relative_cells(text, "auroc") == {"finetune_rel_change": "+0.0%"}

    def test_relative_increase(self):
        text = format_table(comparison_table(report("baseline", auprc=0.2), [report("finetune", auprc=0.5)]))
        assert relative_cells(text, "auprc") == {"finetune_rel_change": "+150.0%"}

    def test_zero_baseline_undefined(self):
        text = format_table(comparison_table(report("baseline", recall=0.0), [report("finetune", recall=0.3)]))
        assert relative_cells(text, "recall") == {"finetune_rel_change": "undefined"}
