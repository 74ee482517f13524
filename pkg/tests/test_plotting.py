import json

import pytest

from pgnd.core import FormatError
from pgnd.plotting import parse_report, plot_report, report_csv, report_svg

BLOCK = {"mean": 0.05, "std": 0.01, "per_clip": [0.04, 0.06]}


def test_accepts_all_report_shapes():
    bare = parse_report({"mde": BLOCK})
    single = parse_report({"method": "grid", "metrics": {"mde": BLOCK}})
    many = parse_report({"methods": {"grid": {"mde": BLOCK}, "particle": {"mde": BLOCK}}})
    assert bare == {"model": {"mde": {"mean": 0.05, "std": 0.01, "n": 2}}}
    assert list(single) == ["grid"]
    assert list(many) == ["grid", "particle"]


def test_errors_name_the_field():
    with pytest.raises(FormatError, match=r"methods\.grid\.mde\.mean"):
        parse_report({"methods": {"grid": {"mde": {"mean": "x", "per_clip": [1.0]}}}})
    with pytest.raises(FormatError, match="per_clip"):
        parse_report({"mde": {"mean": 1.0, "per_clip": 3}})
    with pytest.raises(FormatError):
        parse_report([1, 2])


def test_csv_and_svg():
    parsed = parse_report({"methods": {"grid": {"mde": BLOCK, "chamfer": BLOCK},
                                       "particle": {"mde": BLOCK}}})
    rows = report_csv(parsed).splitlines()
    assert rows[0] == "method,metric,mean,std,n"
    assert "grid,mde,0.05,0.01,2" in rows
    assert "particle,chamfer,,,0" in rows
    svg = report_svg(parsed)
    assert svg.count('class="bar"') == 3
    assert svg == report_svg(parsed)


def test_empty_report_draws_placeholder():
    svg = report_svg(parse_report({"mde": {"per_clip": []}}))
    assert "no data" in svg and 'class="bar"' not in svg


def test_plot_report_writes_twins(tmp_path):
    src = tmp_path / "r.json"
    src.write_text(json.dumps({"mde": BLOCK}))
    svg, csv = plot_report(src, tmp_path / "out" / "r.svg")
    assert svg.read_text().startswith("<svg")
    assert csv.suffix == ".csv" and csv.read_text().startswith("method,")
