"""End-to-end recognition: image and text blocks in, HTML out."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .compose import assign_text, emit_table
from .data_io import TextBlock
from .merge_model import MergeModel, OverCapacityError, logits_to_grid
from .otsl import Grid, all_c, otsl_to_spans, repair_otsl
from .preprocess import CanonicalImage, SeparatorMask, map_to_canonical, normalize, resize_and_pad
from .split_model import (
    EmptyTableError,
    GridGeometry,
    SplitModel,
    downsample_labels,
    extract_grid,
    reclassify_by_text,
    upsample_2x,
)

logger = logging.getLogger(__name__)

TIMING_KEYS = ("resize", "split", "merge", "match", "html")
EMPTY_TABLE = "<table></table>"


@dataclass
class Recognition:
    image_id: str
    html: str
    otsl: Optional[Grid]
    grid: Optional[Dict[str, List[float]]]  # source-image pixels
    timings: Dict[str, float]
    flags: List[str] = field(default_factory=list)

    @property
    def total_time(self) -> float:
        return sum(self.timings.values())

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "html": self.html,
            "grid": self.grid,
            "otsl": ["".join(row) for row in self.otsl] if self.otsl is not None else None,
            "timings": self.timings,
            "flags": self.flags,
        }


# ---------------------------------------------------------------------------
# stages


class ModelSplitStage:
    """Split probabilities at half resolution from a trained model."""

    def __init__(self, model: SplitModel, device: str = "cpu"):
        self.model = model.to(device).eval()
        self.device = device

    def __call__(self, canon: CanonicalImage, image_id: str) -> Tuple[np.ndarray, np.ndarray]:
        x = torch.from_numpy(normalize(canon.pixels)).unsqueeze(0).to(self.device)
        rows, cols = self.model.predict(x)
        return rows[0], cols[0]


class ModelMergeStage:
    def __init__(self, model: MergeModel, device: str = "cpu"):
        self.model = model.to(device).eval()
        self.device = device

    def __call__(self, canon: CanonicalImage, grid: GridGeometry, image_id: str) -> Grid:
        self.model.encoder.check_capacity(grid.n_rows, grid.n_cols)
        x = torch.from_numpy(normalize(canon.pixels)).unsqueeze(0).to(self.device)
        with torch.no_grad():
            return logits_to_grid(self.model(x, [grid])[0])


class OracleSplitStage:
    """Replays ground-truth separator masks as certain probabilities."""

    def __init__(self, masks: Mapping[str, SeparatorMask]):
        self.masks = masks

    def __call__(self, canon: CanonicalImage, image_id: str) -> Tuple[np.ndarray, np.ndarray]:
        mask = self.masks[image_id]
        return (downsample_labels(mask.row_labels).astype(np.float32),
                downsample_labels(mask.col_labels).astype(np.float32))


class OracleMergeStage:
    """Replays ground-truth OTSL grids."""

    def __init__(self, grids: Mapping[str, Grid]):
        self.grids = grids

    def __call__(self, canon: CanonicalImage, grid: GridGeometry, image_id: str) -> Grid:
        return [list(row) for row in self.grids[image_id]]


# ---------------------------------------------------------------------------


def _canonical_blocks(blocks: Sequence[TextBlock], canon: CanonicalImage) -> List[TextBlock]:
    """Blocks in canonical pixels; blocks clipped to nothing are dropped."""
    out = []
    for b in blocks:
        x0, y0, x1, y1 = map_to_canonical(b.bbox, canon)
        if x1 > x0 and y1 > y0:
            out.append(TextBlock((x0, y0, x1, y1), b.text))
        else:
            logger.debug("dropping text block outside the image: %r", b.text)
    return out


class Recognizer:
    """Runs split, merge, repair and text placement on one image at a time."""

    def __init__(self, split_stage, merge_stage, image_size: int = 960, threshold: float = 0.5,
                 max_cells: int = 640):
        self.split_stage = split_stage
        self.merge_stage = merge_stage
        self.image_size = image_size
        self.threshold = threshold
        self.max_cells = max_cells

    def recognize(self, image: np.ndarray, blocks: Optional[Sequence[TextBlock]] = None,
                  image_id: str = "") -> Recognition:
        timings = {k: 0.0 for k in TIMING_KEYS}
        flags: List[str] = []
        if blocks is None:
            flags.append("no_text_blocks")
            blocks = []

        t0 = time.perf_counter()
        canon = resize_and_pad(image, self.image_size)
        canon_blocks = _canonical_blocks(blocks, canon)
        t1 = time.perf_counter()
        timings["resize"] = t1 - t0

        try:
            grid = self._split(canon, canon_blocks, image_id)
        except EmptyTableError as exc:
            timings["split"] = time.perf_counter() - t1
            logger.warning("%s: %s", image_id, exc)
            return Recognition(image_id, EMPTY_TABLE, None, None, timings, flags + ["empty_table"])
        t2 = time.perf_counter()
        timings["split"] = t2 - t1

        if grid.n_rows * grid.n_cols > self.max_cells:
            raw: Grid = all_c(grid.n_rows, grid.n_cols)
            flags.append("over_capacity")
        else:
            try:
                raw = self.merge_stage(canon, grid, image_id)
            except OverCapacityError:
                raw = all_c(grid.n_rows, grid.n_cols)
                flags.append("over_capacity")
        otsl = repair_otsl(raw)
        if otsl != raw:
            flags.append("repaired")
        spans = otsl_to_spans(otsl)
        t3 = time.perf_counter()
        timings["merge"] = t3 - t2

        contents = assign_text(canon_blocks, grid, spans)
        t4 = time.perf_counter()
        timings["match"] = t4 - t3

        html = emit_table(spans, contents)
        timings["html"] = time.perf_counter() - t4
        return Recognition(image_id, html, otsl, grid.scaled(1.0 / canon.scale).to_dict(), timings, flags)

    def _split(self, canon: CanonicalImage, blocks: Sequence[TextBlock], image_id: str) -> GridGeometry:
        row_p, col_p = self.split_stage(canon, image_id)
        rows = upsample_2x((np.asarray(row_p) > self.threshold).astype(np.uint8))
        cols = upsample_2x((np.asarray(col_p) > self.threshold).astype(np.uint8))
        if blocks:
            rows = reclassify_by_text(rows, [b.center[1] for b in blocks])
            cols = reclassify_by_text(cols, [b.center[0] for b in blocks])
        return extract_grid(rows, cols)
