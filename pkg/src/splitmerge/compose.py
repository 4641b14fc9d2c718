"""Place OCR text blocks into resolved cells and serialize the table."""

from __future__ import annotations

from bisect import bisect_right
from typing import Dict, List, Sequence

import numpy as np

from .data_io import TextBlock
from .otsl import SpanMap, spans_to_html
from .split_model import GridGeometry


def _locate(value: float, bounds: Sequence[float]) -> int:
    """Index i with bounds[i] <= value < bounds[i+1], or -1 outside."""
    i = bisect_right(bounds, value) - 1
    if i < 0 or i >= len(bounds) - 1:
        return -1
    return i


def locate_cell(x: float, y: float, grid: GridGeometry) -> tuple:
    """Grid cell holding a point; points outside snap to the nearest cell center."""
    r = _locate(y, grid.row_bounds)
    c = _locate(x, grid.col_bounds)
    if r >= 0 and c >= 0:
        return r, c
    boxes = grid.boxes()
    cx = (boxes[:, 0] + boxes[:, 2]) / 2.0
    cy = (boxes[:, 1] + boxes[:, 3]) / 2.0
    k = int(np.argmin((cx - x) ** 2 + (cy - y) ** 2))
    return divmod(k, grid.n_cols)


def assign_text(blocks: Sequence[TextBlock], grid: GridGeometry, spans: SpanMap) -> List[str]:
    """Per-cell content strings, in the cell order of ``spans``."""
    buckets: Dict[int, List[TextBlock]] = {}
    for block in blocks:
        x, y = block.center
        r, c = locate_cell(x, y, grid)
        buckets.setdefault(spans.cover[r][c], []).append(block)
    contents = []
    for k in range(len(spans.cells)):
        found = sorted(buckets.get(k, []), key=lambda b: (b.center[1], b.center[0]))
        contents.append(" ".join(b.text for b in found))
    return contents


def emit_table(spans: SpanMap, contents: Sequence[str]) -> str:
    return spans_to_html(spans, contents).to_html()
