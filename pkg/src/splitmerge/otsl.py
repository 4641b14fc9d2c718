"""OTSL grids: grammar checks, repair, span resolution and HTML conversion.

A grid is a list of rows, each row a list of single-letter tokens drawn from
``C`` (new cell), ``L`` (merge left), ``U`` (merge up) and ``X`` (merge left
and up).
"""

from __future__ import annotations

import html
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

TOKENS = ("C", "L", "U", "X")
TOKEN_INDEX = {t: i for i, t in enumerate(TOKENS)}

Grid = List[List[str]]


class OTSLError(ValueError):
    """Raised when a grid or HTML table cannot be converted."""


@dataclass(frozen=True)
class SpanCell:
    top: int
    left: int
    rowspan: int = 1
    colspan: int = 1

    @property
    def bottom(self) -> int:
        return self.top + self.rowspan

    @property
    def right(self) -> int:
        return self.left + self.colspan


@dataclass
class SpanMap:
    n_rows: int
    n_cols: int
    cells: List[SpanCell]
    cover: List[List[int]]

    def owner(self, r: int, c: int) -> int:
        return self.cover[r][c]


@dataclass
class HtmlCell:
    rowspan: int = 1
    colspan: int = 1
    content: str = ""


@dataclass
class HtmlTable:
    rows: List[List[HtmlCell]] = field(default_factory=list)

    def to_html(self) -> str:
        parts = ["<table>"]
        for row in self.rows:
            parts.append("<tr>")
            for cell in row:
                attrs = ""
                if cell.rowspan > 1:
                    attrs += f' rowspan="{cell.rowspan}"'
                if cell.colspan > 1:
                    attrs += f' colspan="{cell.colspan}"'
                parts.append(f"<td{attrs}>{html.escape(cell.content, quote=False)}</td>")
            parts.append("</tr>")
        parts.append("</table>")
        return "".join(parts)


def grid_shape(grid: Sequence[Sequence[str]]) -> tuple:
    n_rows = len(grid)
    n_cols = len(grid[0]) if n_rows else 0
    return n_rows, n_cols


def validate_otsl(grid: Sequence[Sequence[str]]) -> List[str]:
    """Return the list of grammar violations; an empty list means valid."""
    violations: List[str] = []
    n_rows, n_cols = grid_shape(grid)
    if n_rows == 0 or n_cols == 0:
        return ["empty grid"]
    for r, row in enumerate(grid):
        if len(row) != n_cols:
            violations.append(f"row {r} has {len(row)} tokens, expected {n_cols}")
    if violations:
        return violations

    for r in range(n_rows):
        for c in range(n_cols):
            tok = grid[r][c]
            left = grid[r][c - 1] if c > 0 else None
            up = grid[r - 1][c] if r > 0 else None
            where = f"({r},{c})"
            if tok not in TOKEN_INDEX:
                violations.append(f"{where}: unknown token {tok!r}")
                continue
            if tok in ("U", "X") and r == 0:
                violations.append(f"{where}: {tok} in first row has no upper neighbor")
            if tok in ("L", "X") and c == 0:
                violations.append(f"{where}: {tok} in first column has no left neighbor")
            if tok == "L" and left is not None and left not in ("L", "C"):
                violations.append(f"{where}: L after {left}")
            if tok == "U" and up is not None and up not in ("U", "C"):
                violations.append(f"{where}: U below {up}")
            if tok == "X":
                if left is not None and left not in ("X", "U"):
                    violations.append(f"{where}: X after {left}")
                if up is not None and up not in ("X", "L"):
                    violations.append(f"{where}: X below {up}")
    if violations:
        return violations

    # local rules hold; every C must now open a filled rectangle
    claimed = [[False] * n_cols for _ in range(n_rows)]
    for r in range(n_rows):
        for c in range(n_cols):
            if grid[r][c] != "C":
                continue
            width, height = _extent(grid, r, c)
            for rr in range(r, r + height):
                for cc in range(c, c + width):
                    want = _expected_token(rr - r, cc - c)
                    if grid[rr][cc] != want:
                        violations.append(
                            f"({rr},{cc}): expected {want} inside cell opened at ({r},{c})"
                        )
                    elif claimed[rr][cc]:
                        violations.append(f"({rr},{cc}): claimed by two cells")
                    claimed[rr][cc] = True
    for r in range(n_rows):
        for c in range(n_cols):
            if not claimed[r][c]:
                violations.append(f"({r},{c}): not covered by any rectangular cell")
    return violations


def is_valid(grid: Sequence[Sequence[str]]) -> bool:
    return not validate_otsl(grid)


def _extent(grid: Sequence[Sequence[str]], r: int, c: int) -> tuple:
    n_rows, n_cols = grid_shape(grid)
    width = 1
    while c + width < n_cols and grid[r][c + width] == "L":
        width += 1
    height = 1
    while r + height < n_rows and grid[r + height][c] == "U":
        height += 1
    return width, height


def _expected_token(dr: int, dc: int) -> str:
    if dr == 0:
        return "C" if dc == 0 else "L"
    return "U" if dc == 0 else "X"


def repair_otsl(grid: Sequence[Sequence[str]]) -> Grid:
    """Make a grid valid by demoting offending tokens to ``C``.

    Cells are visited in row-major order.  Each token is checked against the
    already repaired cells above and to its left.  A ``U`` is only kept when
    the whole width of the cell above it continues into this row as ``X``;
    otherwise the cell above is closed and the ``U`` becomes ``C``.
    """
    n_rows, n_cols = grid_shape(grid)
    out: Grid = [[("C" if t not in TOKEN_INDEX else t) for t in row] for row in grid]
    # owner_left[r][c]: left column of the cell owning (r, c); owner_right: exclusive right edge
    owner_left = [[0] * n_cols for _ in range(n_rows)]
    owner_right = [[0] * n_cols for _ in range(n_rows)]

    for r in range(n_rows):
        for c in range(n_cols):
            tok = out[r][c]
            left_tok = out[r][c - 1] if c > 0 else None
            above_left = owner_left[r - 1][c] if r > 0 else None
            above_right = owner_right[r - 1][c] if r > 0 else None

            if r > 0 and c > above_left:
                # inside the width of the cell above, right of its first column
                continues = out[r][above_left] == "U"
                if continues:
                    # only X keeps the rectangle; anything else was ruled out when
                    # the U was accepted
                    tok = "X"
                elif tok not in ("C", "L") or (tok == "L" and left_tok not in ("C", "L")):
                    tok = "C"
            else:
                allowed = {"C"}
                if c > 0 and left_tok in ("C", "L"):
                    allowed.add("L")
                if r > 0 and c == above_left:
                    tail = [grid[r][cc] for cc in range(c + 1, above_right)]
                    if all(t == "X" for t in tail):
                        allowed.add("U")
                if tok not in allowed:
                    tok = "C"
            out[r][c] = tok

            if tok == "C":
                owner_left[r][c] = c
                width = 1
                while c + width < n_cols and grid[r][c + width] == "L":
                    width += 1
                owner_right[r][c] = c + width  # provisional; shrinks if an L is demoted
            elif tok == "L":
                owner_left[r][c] = owner_left[r][c - 1]
            else:  # U or X inherit the cell above
                owner_left[r][c] = above_left
                owner_right[r][c] = above_right
        # fix the right edges of cells opened in this row now that L's are final
        c = 0
        while c < n_cols:
            if out[r][c] == "C":
                end = c + 1
                while end < n_cols and out[r][end] == "L":
                    end += 1
                for cc in range(c, end):
                    owner_right[r][cc] = end
                c = end
            else:
                c += 1
    return out


def otsl_to_spans(grid: Sequence[Sequence[str]]) -> SpanMap:
    violations = validate_otsl(grid)
    if violations:
        raise OTSLError("invalid OTSL grid: " + "; ".join(violations[:3]))
    n_rows, n_cols = grid_shape(grid)
    cells: List[SpanCell] = []
    cover = [[-1] * n_cols for _ in range(n_rows)]
    for r in range(n_rows):
        for c in range(n_cols):
            if grid[r][c] != "C":
                continue
            width, height = _extent(grid, r, c)
            idx = len(cells)
            cells.append(SpanCell(r, c, height, width))
            for rr in range(r, r + height):
                for cc in range(c, c + width):
                    cover[rr][cc] = idx
    return SpanMap(n_rows, n_cols, cells, cover)


def spans_to_html(spans: SpanMap, contents: Optional[Sequence[str]] = None) -> HtmlTable:
    if contents is None:
        contents = [""] * len(spans.cells)
    if len(contents) != len(spans.cells):
        raise OTSLError(f"{len(contents)} contents for {len(spans.cells)} cells")
    rows: List[List[HtmlCell]] = [[] for _ in range(spans.n_rows)]
    # cells are created in row-major order of their top-left corner
    for cell, text in zip(spans.cells, contents):
        rows[cell.top].append(HtmlCell(cell.rowspan, cell.colspan, text))
    return HtmlTable(rows)


def html_to_otsl(table: HtmlTable) -> Grid:
    """Rebuild the token grid from an HTML span lattice."""
    occupied: dict = {}
    n_rows = len(table.rows)
    for r, row in enumerate(table.rows):
        c = 0
        for cell in row:
            while (r, c) in occupied:
                c += 1
            if cell.rowspan < 1 or cell.colspan < 1:
                raise OTSLError(f"row {r}: non-positive span")
            for dr in range(cell.rowspan):
                for dc in range(cell.colspan):
                    key = (r + dr, c + dc)
                    if key in occupied:
                        raise OTSLError(f"overlapping spans at {key}")
                    occupied[key] = _expected_token(dr, dc)
            c += cell.colspan
    if not occupied:
        raise OTSLError("table has no cells")
    height = max(r for r, _ in occupied) + 1
    if height > n_rows:
        raise OTSLError("rowspan extends past the last row")
    n_cols = max(c for _, c in occupied) + 1
    grid = [[occupied.get((r, c)) for c in range(n_cols)] for r in range(n_rows)]
    for r, row in enumerate(grid):
        if any(t is None for t in row):
            raise OTSLError(f"row {r} does not cover all {n_cols} columns")
    return grid


def html_to_spans(table: HtmlTable) -> SpanMap:
    """Span map whose cell order matches the HTML cell order."""
    return otsl_to_spans(html_to_otsl(table))


def grid_from_string(text: str) -> Grid:
    """Parse ``"CL/UX"`` style shorthand (rows separated by ``/``)."""
    return [list(row) for row in text.split("/")]


def grid_to_string(grid: Sequence[Sequence[str]]) -> str:
    return "/".join("".join(row) for row in grid)


def all_c(n_rows: int, n_cols: int) -> Grid:
    return [["C"] * n_cols for _ in range(n_rows)]
