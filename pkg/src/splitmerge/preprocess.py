"""Image canonicalization and ground-truth label derivation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image

from .data_io import AnnotationRecord
from .otsl import Grid, OTSLError, html_to_otsl, html_to_spans
from .split_model import GridGeometry, extract_grid, runs

DEFAULT_SIZE = 960
MIN_SEPARATOR_WIDTH = 5
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class UnusableRecordError(ValueError):
    """The annotation cannot produce consistent training labels."""


@dataclass
class CanonicalImage:
    pixels: np.ndarray  # (size, size, 3) float32 in [0, 1]
    scale: float
    pad: Tuple[int, int]  # (right, bottom)
    source_size: Tuple[int, int]  # (h, w)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    @property
    def content_size(self) -> Tuple[int, int]:
        """(h, w) of the resized, unpadded region."""
        return self.size - self.pad[1], self.size - self.pad[0]


@dataclass
class SeparatorMask:
    row_labels: np.ndarray  # (H,) uint8, 1 = split line
    col_labels: np.ndarray  # (W,) uint8


@dataclass
class GridLabels:
    otsl: Grid
    grid: GridGeometry


def resize_and_pad(image: np.ndarray, target: int = DEFAULT_SIZE) -> CanonicalImage:
    """Scale the longer side to ``target`` and pad right/bottom with white."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"cannot canonicalize image of shape {arr.shape}")
    if arr.shape[2] == 4:
        arr = arr[:, :, :3]
    h, w = arr.shape[:2]
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)

    scale = target / max(h, w)
    new_h = min(target, max(1, int(round(h * scale))))
    new_w = min(target, max(1, int(round(w * scale))))
    if (new_h, new_w) != (h, w):
        arr = np.asarray(Image.fromarray(arr).resize((new_w, new_h), Image.BILINEAR))

    pixels = np.ones((target, target, 3), dtype=np.float32)
    pixels[:new_h, :new_w] = arr.astype(np.float32) / 255.0
    return CanonicalImage(pixels, scale, (target - new_w, target - new_h), (h, w))


def normalize(pixels: np.ndarray) -> np.ndarray:
    """Per-channel standardization, returned channel-first."""
    mean = np.asarray(IMAGENET_MEAN, dtype=np.float32)
    std = np.asarray(IMAGENET_STD, dtype=np.float32)
    return ((pixels - mean) / std).transpose(2, 0, 1).astype(np.float32)


def map_to_canonical(bbox: Sequence[float], c: CanonicalImage) -> Tuple[float, float, float, float]:
    content_h, content_w = c.content_size
    x0, y0, x1, y1 = (float(v) * c.scale for v in bbox)
    return (
        min(max(x0, 0.0), content_w),
        min(max(y0, 0.0), content_h),
        min(max(x1, 0.0), content_w),
        min(max(y1, 0.0), content_h),
    )


def map_to_source(bbox: Sequence[float], c: CanonicalImage) -> Tuple[float, float, float, float]:
    return tuple(float(v) / c.scale for v in bbox)


def widen_separator(interval: Tuple[float, float], min_width: float = MIN_SEPARATOR_WIDTH,
                    axis_len: float = DEFAULT_SIZE) -> Tuple[float, float]:
    """Grow a split interval about its midpoint to ``min_width``.

    The grown interval is shifted, never shrunk, to stay inside
    ``[0, axis_len]``.
    """
    if min_width > axis_len:
        raise ValueError(f"min_width {min_width} exceeds axis length {axis_len}")
    start, end = interval
    if not 0 <= start <= end <= axis_len:
        raise ValueError(f"interval {interval} outside [0, {axis_len}]")
    if end - start >= min_width:
        return start, end
    mid = (start + end) / 2.0
    start, end = mid - min_width / 2.0, mid + min_width / 2.0
    if start < 0:
        start, end = 0.0, float(min_width)
    elif end > axis_len:
        start, end = axis_len - float(min_width), float(axis_len)
    return start, end


def widen_line_runs(labels: np.ndarray, min_width: int = MIN_SEPARATOR_WIDTH) -> np.ndarray:
    """Apply :func:`widen_separator` to every split run of a line-label vector."""
    out = labels.copy()
    n = len(labels)
    for s, e in runs(labels, 1):
        if e - s + 1 >= min_width:
            continue
        a, _ = widen_separator((float(s), float(e + 1)), min_width, n)
        start = int(math.floor(a))
        out[start:start + min_width] = 1
    return out


def _line_span(lo: float, hi: float, n: int) -> Tuple[int, int]:
    return max(0, int(math.floor(lo))), min(n - 1, int(math.ceil(hi)))


def _axis_labels(intervals: List[Tuple[int, float, float]], n_bands: int, n: int,
                 axis: str, min_width: int) -> np.ndarray:
    """Split labels for one axis from (band index, lo, hi) content intervals."""
    covered = np.zeros(n, dtype=np.uint8)
    spans = []
    for band, lo, hi in intervals:
        a, b = _line_span(lo, hi, n)
        covered[a:b + 1] = 1
        spans.append((band, a, b))
    labels = (1 - covered).astype(np.uint8)

    bands = runs(labels, 0)
    if len(bands) != n_bands:
        raise UnusableRecordError(
            f"{axis}: {len(bands)} content bands for {n_bands} structural {axis}s"
        )
    for band, a, b in spans:
        s, e = bands[band]
        if a < s or b > e:
            raise UnusableRecordError(f"{axis} {band}: content crosses a separator")

    labels = widen_line_runs(labels, min_width)
    if len(runs(labels, 0)) != n_bands:
        raise UnusableRecordError(f"{axis}: widening swallowed a content band")
    return labels


def derive_separator_mask(record: AnnotationRecord, c: CanonicalImage,
                          min_width: int = MIN_SEPARATOR_WIDTH) -> SeparatorMask:
    """Ground-truth split lines from cell bounding boxes.

    A pixel line is a split line when no cell box crosses it.  Cells that
    span several rows are left out of the row labels (they straddle row
    separators by construction) and likewise for columns.
    """
    try:
        spans = html_to_spans(record.to_table())
    except OTSLError as exc:
        raise UnusableRecordError(str(exc)) from None
    rows, cols = [], []
    for cell, ann in zip(spans.cells, record.cells):
        if ann.bbox is None:
            continue
        x0, y0, x1, y1 = map_to_canonical(ann.bbox, c)
        if cell.rowspan == 1:
            rows.append((cell.top, y0, y1))
        if cell.colspan == 1:
            cols.append((cell.left, x0, x1))
    size = c.size
    return SeparatorMask(
        _axis_labels(rows, spans.n_rows, size, "row", min_width),
        _axis_labels(cols, spans.n_cols, size, "column", min_width),
    )


def derive_grid_labels(record: AnnotationRecord, mask: SeparatorMask) -> GridLabels:
    try:
        otsl = html_to_otsl(record.to_table())
    except OTSLError as exc:
        raise UnusableRecordError(str(exc)) from None
    grid = extract_grid(mask.row_labels, mask.col_labels)
    if (grid.n_rows, grid.n_cols) != (len(otsl), len(otsl[0])):
        raise UnusableRecordError(
            f"mask grid {grid.n_rows}x{grid.n_cols} vs structure {len(otsl)}x{len(otsl[0])}"
        )
    return GridLabels(otsl, grid)
