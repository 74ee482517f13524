"""Deterministic SVG bar charts (with a CSV twin) for evaluation reports."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

from .core import FormatError

METRIC_ORDER = ("mde", "chamfer", "emd")
PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860")


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise FormatError(f"{where}: expected a finite number")
    return float(value)


def _metric_block(block, where: str) -> dict:
    if not isinstance(block, dict):
        raise FormatError(f"{where}: expected an object")
    per_clip = block.get("per_clip", [])
    if not isinstance(per_clip, list):
        raise FormatError(f"{where}.per_clip: expected a list")
    clips = [_number(v, f"{where}.per_clip[{i}]") for i, v in enumerate(per_clip)]
    if not clips:
        return {"mean": None, "std": None, "n": 0}
    mean = _number(block.get("mean"), f"{where}.mean")
    std = _number(block.get("std", 0.0), f"{where}.std")
    return {"mean": mean, "std": std, "n": len(clips)}


def parse_report(report) -> dict[str, dict[str, dict]]:
    """Normalize a report to ``{method: {metric: {mean, std, n}}}``.

    Accepts a single evaluation report (``{"method": .., "metrics": {..}}``), a bare metric
    summary (``{"mde": {..}, ..}``) or a comparison (``{"methods": {name: metrics}}``).
    """
    if not isinstance(report, dict):
        raise FormatError("report: expected an object")
    if "methods" in report:
        methods = report["methods"]
        prefix = "methods"
        if not isinstance(methods, dict):
            raise FormatError("methods: expected an object")
    elif "metrics" in report:
        name = report.get("method", "model")
        if not isinstance(name, str):
            raise FormatError("method: expected a string")
        methods = {name: report["metrics"]}
        prefix = None
    else:
        methods = {"model": report}
        prefix = None
    out = {}
    for name, metrics in methods.items():
        where = f"{prefix}.{name}" if prefix else "metrics"
        if not isinstance(metrics, dict):
            raise FormatError(f"{where}: expected an object")
        out[name] = {m: _metric_block(b, f"{where}.{m}") for m, b in metrics.items()}
    return out


def _metric_names(parsed) -> list[str]:
    seen = {m for metrics in parsed.values() for m in metrics}
    return [m for m in METRIC_ORDER if m in seen] + sorted(seen - set(METRIC_ORDER))


def report_csv(parsed) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "metric", "mean", "std", "n"])
    for method in parsed:
        for metric in _metric_names(parsed):
            cell = parsed[method].get(metric, {"mean": None, "std": None, "n": 0})
            writer.writerow([method, metric,
                             "" if cell["mean"] is None else repr(cell["mean"]),
                             "" if cell["std"] is None else repr(cell["std"]), cell["n"]])
    return buf.getvalue()


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def report_svg(parsed, title: str = "Rollout error") -> str:
    metrics = _metric_names(parsed)
    methods = list(parsed)
    bars = [(mi, method, metric, parsed[method].get(metric))
            for gi, metric in enumerate(metrics) for mi, method in enumerate(methods)]
    bars = [b for b in bars if b[3] is not None and b[3]["n"] > 0]
    width, height = 640, 360
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">\n'
            f'<rect width="{width}" height="{height}" fill="#ffffff"/>\n'
            f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>\n')
    if not bars:
        return head + (f'<text class="placeholder" x="{width / 2:.0f}" y="{height / 2:.0f}" '
                       'text-anchor="middle" fill="#666666">no data</text>\n</svg>\n')
    left, right, top, bottom = 60.0, 20.0, 40.0, 60.0
    plot_w, plot_h = width - left - right, height - top - bottom
    ymax = max(b[3]["mean"] + b[3]["std"] for b in bars) or 1.0
    ymax *= 1.1
    group_w = plot_w / len(metrics)
    bar_w = group_w * 0.8 / len(methods)
    parts = [head]
    parts.append(f'<line x1="{_fmt(left)}" y1="{_fmt(top + plot_h)}" x2="{_fmt(left + plot_w)}" '
                 f'y2="{_fmt(top + plot_h)}" stroke="#000000"/>\n')
    parts.append(f'<line x1="{_fmt(left)}" y1="{_fmt(top)}" x2="{_fmt(left)}" '
                 f'y2="{_fmt(top + plot_h)}" stroke="#000000"/>\n')
    for tick in range(5):
        v = ymax * tick / 4
        y = top + plot_h - plot_h * tick / 4
        parts.append(f'<text x="{_fmt(left - 6)}" y="{_fmt(y + 4)}" text-anchor="end">{v:.3f}</text>\n')
    parts.append(f'<text x="14" y="{_fmt(top + plot_h / 2)}" text-anchor="middle" '
                 f'transform="rotate(-90 14 {_fmt(top + plot_h / 2)})">error [m]</text>\n')
    for gi, metric in enumerate(metrics):
        cx = left + group_w * (gi + 0.5)
        parts.append(f'<text x="{_fmt(cx)}" y="{_fmt(top + plot_h + 18)}" '
                     f'text-anchor="middle">{metric.upper()}</text>\n')
    for mi, method, metric, cell in bars:
        gi = metrics.index(metric)
        x = left + group_w * gi + group_w * 0.1 + bar_w * mi
        h = plot_h * cell["mean"] / ymax
        y = top + plot_h - h
        cx = x + bar_w / 2
        y_hi = top + plot_h - plot_h * (cell["mean"] + cell["std"]) / ymax
        y_lo = top + plot_h - plot_h * max(cell["mean"] - cell["std"], 0.0) / ymax
        color = PALETTE[mi % len(PALETTE)]
        parts.append(
            f'<g class="bar" data-method="{method}" data-metric="{metric}">'
            f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(bar_w)}" height="{_fmt(h)}" fill="{color}"/>'
            f'<line x1="{_fmt(cx)}" y1="{_fmt(y_hi)}" x2="{_fmt(cx)}" y2="{_fmt(y_lo)}" stroke="#000000"/>'
            f'<line x1="{_fmt(cx - bar_w / 4)}" y1="{_fmt(y_hi)}" x2="{_fmt(cx + bar_w / 4)}" '
            f'y2="{_fmt(y_hi)}" stroke="#000000"/></g>\n')
    for mi, method in enumerate(methods):
        x = left + 10 + 120 * mi
        y = height - 18
        parts.append(f'<rect x="{_fmt(x)}" y="{_fmt(y - 10)}" width="10" height="10" '
                     f'fill="{PALETTE[mi % len(PALETTE)]}"/>'
                     f'<text x="{_fmt(x + 14)}" y="{_fmt(y)}">{method}</text>\n')
    parts.append("</svg>\n")
    return "".join(parts)


def plot_report(report, out_svg) -> tuple[Path, Path]:
    """Write ``out_svg`` and a CSV twin next to it; ``report`` is a dict or a JSON path."""
    if not isinstance(report, dict):
        try:
            report = json.loads(Path(report).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"report: {exc.msg} at byte {exc.pos}") from None
    parsed = parse_report(report)
    out_svg = Path(out_svg)
    out_svg.parent.mkdir(parents=True, exist_ok=True)
    out_csv = out_svg.with_suffix(".csv")
    out_svg.write_text(report_svg(parsed), encoding="utf-8")
    out_csv.write_text(report_csv(parsed), encoding="utf-8")
    return out_svg, out_csv
