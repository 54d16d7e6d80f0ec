import xml.etree.ElementTree as ET

import pandas as pd
import pytest

from mfirl.exceptions import ContractViolationError
from mfirl.plots import SVG_NS, chart_title, line_chart_svg, log_series, write_line_chart

NS = {"svg": SVG_NS}


def test_one_polyline_per_series():
    svg = line_chart_svg({"seed0": ([1, 2, 3], [0.5, 0.2, 0.1]), "seed1": ([1, 2, 3], [0.4, 0.3, 0.3])}, title="virus")
    root = ET.fromstring(svg)
    lines = root.findall("svg:polyline", NS)
    assert len(lines) == 2
    assert [line.find("svg:title", NS).text for line in lines] == ["seed0", "seed1"]
    assert len(root.findall("svg:line", NS)) == 2
    assert len(lines[0].get("points").split()) == 3


def test_non_finite_points_dropped():
    svg = line_chart_svg({"a": ([1, 2, 3], [1.0, float("nan"), 2.0])})
    line = ET.fromstring(svg).find("svg:polyline", NS)
    assert len(line.get("points").split()) == 2


def test_constant_series_stays_on_canvas():
    svg = line_chart_svg({"flat": ([0, 1], [3.0, 3.0])}, width=200, height=100)
    for pair in ET.fromstring(svg).find("svg:polyline", NS).get("points").split():
        x, y = map(float, pair.split(","))
        assert 0 <= x <= 200 and 0 <= y <= 100


def test_mismatched_lengths():
    with pytest.raises(ContractViolationError):
        line_chart_svg({"a": ([1, 2], [1.0])})


def test_log_series_and_file(tmp_path):
    frames = {"seed0": pd.DataFrame({"iter": [1, 2], "disc_objective": [-1.3, -1.2]}), "seed1": pd.DataFrame({"iter": [1]})}
    series = log_series(frames, "disc_objective")
    assert series == {"seed0": ([1, 2], [-1.3, -1.2])}
    path = write_line_chart(tmp_path / "charts" / "disc.svg", series, title=chart_title("disc_objective", "virus"))
    root = ET.parse(path).getroot()
    assert root.find("svg:title", NS).text == "virus disc_objective"
