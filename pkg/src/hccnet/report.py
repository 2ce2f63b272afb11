"""Report files: metrics.json / metrics.csv plus reliability and gain SVG diagrams."""

from __future__ import annotations

import csv
import json
import math
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .metrics import METRIC_NAMES, BinnedCalibration, GainCurve, MetricsReport, relative_change

CSV_COLUMNS = ("seed",) + METRIC_NAMES
SCHEMA_VERSION = 1


class SchemaMismatchError(ValueError):
    pass


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _restore(obj):
    if obj is None:
        return float("nan")
    if isinstance(obj, dict):
        return {k: (_restore(v) if k in METRIC_NAMES else v) for k, v in obj.items()}
    return obj


def write_metrics_json(report: MetricsReport, path, extra: Optional[dict] = None) -> Path:
    doc = report.to_dict()
    if extra:
        doc.update(extra)
    path = Path(path)
    path.write_text(json.dumps(_clean(doc), indent=2, sort_keys=True))
    return path


def read_metrics_json(path) -> MetricsReport:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaMismatchError(f"{path}: schema {doc.get('schema_version')}, expected {SCHEMA_VERSION}")
    doc["runs"] = [_restore(r) for r in doc["runs"]]
    doc["aggregate"]["mean"] = _restore(doc["aggregate"]["mean"])
    doc["aggregate"]["std"] = _restore(doc["aggregate"]["std"])
    return MetricsReport.from_dict(doc)


def write_metrics_csv(report: MetricsReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for run in report.runs:
            w.writerow([run.get("seed")] + [_fmt(run[m]) for m in METRIC_NAMES])
    return path


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


# ---------------------------------------------------------------------------
# SVG

_W, _H, _PAD = 360, 360, 40


def _svg_root(title: str) -> ET.Element:
    root = ET.Element(
        "svg", xmlns="http://www.w3.org/2000/svg", width=str(_W), height=str(_H),
        viewBox=f"0 0 {_W} {_H}",
    )
    ET.SubElement(root, "title").text = title
    return root


def _xy(x: float, y: float) -> tuple[float, float]:
    span = _W - 2 * _PAD
    return _PAD + x * span, _H - _PAD - y * span


def _axes(root: ET.Element, xlabel: str, ylabel: str) -> None:
    x0, y0 = _xy(0, 0)
    x1, y1 = _xy(1, 1)
    ET.SubElement(root, "line", x1=f"{x0}", y1=f"{y0}", x2=f"{x1}", y2=f"{y0}", stroke="black")
    ET.SubElement(root, "line", x1=f"{x0}", y1=f"{y0}", x2=f"{x0}", y2=f"{y1}", stroke="black")
    ET.SubElement(root, "text", x=f"{(x0 + x1) / 2}", y=f"{_H - 8}", **{"text-anchor": "middle"}).text = xlabel
    ET.SubElement(
        root, "text", x="12", y=f"{(y0 + y1) / 2}",
        transform=f"rotate(-90 12 {(y0 + y1) / 2})", **{"text-anchor": "middle"},
    ).text = ylabel
    ET.SubElement(root, "line", x1=f"{x0}", y1=f"{y0}", x2=f"{x1}", y2=f"{y1}",
                  stroke="#999", **{"stroke-dasharray": "4 3", "class": "identity"})


def _write_svg(root: ET.Element, path) -> Path:
    path = Path(path)
    ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=True)
    return path


def reliability_svg(calib: BinnedCalibration, path, label: str = "") -> Path:
    """One bar per occupied bin: bin position on x, empirical accuracy as height."""
    root = _svg_root(f"Reliability diagram {label}".strip())
    _axes(root, "confidence", "accuracy")
    width = 1.0 / calib.n_bins
    for b in range(calib.n_bins):
        if calib.counts[b] == 0:
            continue
        x0, ytop = _xy(b * width, calib.accuracy[b])
        x1, ybase = _xy((b + 1) * width, 0.0)
        ET.SubElement(
            root, "rect", x=f"{x0:.2f}", y=f"{ytop:.2f}", width=f"{x1 - x0:.2f}",
            height=f"{ybase - ytop:.2f}", fill="#4a7bd0", stroke="white",
            **{"class": "bar", "data-count": str(int(calib.counts[b]))},
        )
    ET.SubElement(root, "text", x=f"{_PAD + 8}", y=f"{_PAD}", **{"class": "legend"}).text = (
        f"{label} ECE = {100 * calib.ece:.1f}%".strip()
    )
    return _write_svg(root, path)


def gain_svg(curves: Mapping[str, GainCurve], path) -> Path:
    """Cumulative gain of sorted per-run metrics against the identity line."""
    root = _svg_root("Cumulative gain")
    _axes(root, "run fraction", "normalised cumulative gain")
    palette = ["#4a7bd0", "#d0644a", "#3a9a5b", "#8a5ad0", "#c09a2a"]
    for k, (name, curve) in enumerate(curves.items()):
        pts = [_xy(0, 0)] + [_xy(e, o) for e, o in zip(curve.expected, curve.observed)]
        ET.SubElement(
            root, "polyline", points=" ".join(f"{x:.2f},{y:.2f}" for x, y in pts), fill="none",
            stroke=palette[k % len(palette)], **{"class": "gain", "data-metric": name},
        )
        ET.SubElement(root, "text", x=f"{_PAD + 8}", y=f"{_PAD + 14 * k}",
                      fill=palette[k % len(palette)]).text = f"{name}: MAE {curve.mae:.3f}"
    return _write_svg(root, path)


def emit_report(
    report: MetricsReport,
    gain_curves: Mapping[str, GainCurve],
    calib: BinnedCalibration,
    out_dir,
) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    extra = {
        "gain_mae": {k: c.mae for k, c in gain_curves.items()},
        "reliability": calib.to_dict(),
    }
    return {
        "json": write_metrics_json(report, out / "metrics.json", extra),
        "csv": write_metrics_csv(report, out / "metrics.csv"),
        "reliability": reliability_svg(calib, out / "reliability.svg", report.label),
        "gain": gain_svg(gain_curves, out / "gain.svg"),
    }


def comparison_table(baseline: MetricsReport, others: Sequence[MetricsReport]) -> list[dict]:
    """Per-metric means with relative change of each report against ``baseline``."""
    rows = []
    for m in METRIC_NAMES:
        row = {"metric": m, baseline.label or "baseline": baseline.mean[m]}
        for i, rep in enumerate(others):
            name = rep.label or f"report{i + 1}"
            row[name] = rep.mean[m]
            row[f"{name}_rel_change"] = relative_change(baseline.mean[m], rep.mean[m])
        rows.append(row)
    return rows


def format_table(rows: list[dict]) -> str:
    cols = list(rows[0])
    lines = ["\t".join(cols)]
    for r in rows:
        cells = []
        for c in cols:
            v = r[c]
            if c.endswith("_rel_change"):
                cells.append("undefined" if v is None else f"{100 * v:+.1f}%")
            elif isinstance(v, float):
                cells.append("nan" if math.isnan(v) else f"{v:.4f}")
            else:
                cells.append(str(v))
        lines.append("\t".join(cells))
    return "\n".join(lines)
