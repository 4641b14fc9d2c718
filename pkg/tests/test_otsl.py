import random

import pytest
from hypothesis import given, settings, strategies as st

from splitmerge.otsl import (
    HtmlCell,
    HtmlTable,
    OTSLError,
    SpanCell,
    all_c,
    grid_from_string,
    grid_to_string,
    html_to_otsl,
    is_valid,
    otsl_to_spans,
    repair_otsl,
    spans_to_html,
    validate_otsl,
)

from oracles import all_grids, random_valid_grid, valid_grids

SHAPES = [(r, c) for r in (1, 2) for c in (1, 2, 3)] + [(3, 1), (3, 2)]


# ---------------------------------------------------------------------------
# validation


def test_canonical_span_is_valid():
    assert validate_otsl(grid_from_string("CL/UX")) == []


def test_u_in_first_row_reported():
    violations = validate_otsl(grid_from_string("UC/CC"))
    assert any("first row" in v for v in violations)


@pytest.mark.parametrize("text", ["L", "X", "CU", "CX/CC", "CL/CU", "CL/UC", "CLC/UCU", "CL/XX"])
def test_invalid_examples(text):
    assert not is_valid(grid_from_string(text))


def test_ragged_and_empty_grids():
    assert validate_otsl([]) == ["empty grid"]
    assert validate_otsl([["C", "C"], ["C"]])
    assert validate_otsl([["C", "Q"]])


@pytest.mark.parametrize("shape", SHAPES)
def test_validator_matches_tiling_oracle(shape):
    oracle = set(valid_grids(*shape))
    for grid in all_grids(*shape):
        key = tuple("".join(row) for row in grid)
        assert is_valid(grid) == (key in oracle), key


# ---------------------------------------------------------------------------
# repair


def test_repair_examples():
    assert repair_otsl(grid_from_string("UC/CC")) == grid_from_string("CC/CC")
    assert repair_otsl(grid_from_string("CL/UC")) == grid_from_string("CL/CC")
    assert repair_otsl(grid_from_string("XL/LU")) == grid_from_string("CL/CC")


@pytest.mark.parametrize("shape", SHAPES)
def test_repair_total_idempotent_and_identity_on_valid(shape):
    for grid in all_grids(*shape):
        fixed = repair_otsl(grid)
        assert is_valid(fixed), (grid, fixed)
        assert repair_otsl(fixed) == fixed
        if is_valid(grid):
            assert fixed == grid


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 6).flatmap(lambda r: st.integers(1, 6).flatmap(
    lambda c: st.lists(st.lists(st.sampled_from("CLUX"), min_size=c, max_size=c), min_size=r, max_size=r))))
def test_repair_always_valid_random(grid):
    fixed = repair_otsl(grid)
    assert is_valid(fixed)
    assert repair_otsl(fixed) == fixed


def test_repair_only_demotes_to_c():
    rng = random.Random(3)
    for _ in range(500):
        grid = [[rng.choice("CLUX") for _ in range(4)] for _ in range(4)]
        fixed = repair_otsl(grid)
        for r in range(4):
            for c in range(4):
                # the single forced change is an X that completes a kept U rectangle
                assert fixed[r][c] in (grid[r][c], "C", "X")


# ---------------------------------------------------------------------------
# spans and HTML


def test_spans_examples():
    spans = otsl_to_spans(grid_from_string("CL/UX"))
    assert spans.cells == [SpanCell(0, 0, 2, 2)]
    spans = otsl_to_spans(grid_from_string("CL/CC"))
    assert spans.cells == [SpanCell(0, 0, 1, 2), SpanCell(1, 0, 1, 1), SpanCell(1, 1, 1, 1)]
    assert spans.cover == [[0, 0], [1, 2]]
    assert len(otsl_to_spans(all_c(3, 4)).cells) == 12


def test_spans_reject_invalid():
    with pytest.raises(OTSLError):
        otsl_to_spans(grid_from_string("CU"))


def test_spans_to_html_layout():
    table = spans_to_html(otsl_to_spans(all_c(2, 2)), ["a", "b", "c", "d"])
    assert [[c.content for c in row] for row in table.rows] == [["a", "b"], ["c", "d"]]
    table = spans_to_html(otsl_to_spans(grid_from_string("CL/CC")), ["h", "x", "y"])
    assert table.to_html() == '<table><tr><td colspan="2">h</td></tr><tr><td>x</td><td>y</td></tr></table>'
    with pytest.raises(OTSLError):
        spans_to_html(otsl_to_spans(all_c(1, 2)), ["only one"])


def test_html_escaping():
    table = spans_to_html(otsl_to_spans(all_c(1, 1)), ["a<b & c"])
    assert table.to_html() == "<table><tr><td>a&lt;b &amp; c</td></tr></table>"


def test_html_to_otsl_examples():
    assert html_to_otsl(HtmlTable([[HtmlCell(2, 2)], []])) == grid_from_string("CL/UX")
    assert html_to_otsl(HtmlTable([[HtmlCell(), HtmlCell(), HtmlCell()]])) == [["C", "C", "C"]]


def test_html_to_otsl_errors():
    with pytest.raises(OTSLError):  # overlap: the rowspan pushes into a full row
        html_to_otsl(HtmlTable([[HtmlCell(2, 1), HtmlCell()], [HtmlCell(), HtmlCell(1, 2)]]))
    with pytest.raises(OTSLError):  # ragged rows
        html_to_otsl(HtmlTable([[HtmlCell(), HtmlCell()], [HtmlCell()]]))
    with pytest.raises(OTSLError):  # rowspan past the end
        html_to_otsl(HtmlTable([[HtmlCell(3, 1)], []]))
    with pytest.raises(OTSLError):
        html_to_otsl(HtmlTable([]))


def _round_trip(grid):
    spans = otsl_to_spans(grid)
    contents = [f"c{i}" for i in range(len(spans.cells))]
    return html_to_otsl(spans_to_html(spans, contents))


@pytest.mark.parametrize("shape", [(r, c) for r in (1, 2, 3) for c in (1, 2, 3)])
def test_round_trip_exhaustive(shape):
    for key in valid_grids(*shape):
        grid = [list(row) for row in key]
        assert _round_trip(grid) == grid


def test_round_trip_random_large():
    rng = random.Random(0)
    for _ in range(1000):
        grid = random_valid_grid(rng, rng.randint(1, 10), rng.randint(1, 10))
        assert is_valid(grid)
        assert _round_trip(grid) == grid


def test_tiling_area_sums():
    rng = random.Random(1)
    for _ in range(200):
        r, c = rng.randint(1, 8), rng.randint(1, 8)
        spans = otsl_to_spans(random_valid_grid(rng, r, c))
        assert sum(cell.rowspan * cell.colspan for cell in spans.cells) == r * c


def test_string_helpers():
    assert grid_to_string(grid_from_string("CLC/UXC")) == "CLC/UXC"
