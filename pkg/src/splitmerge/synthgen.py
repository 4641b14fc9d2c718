"""Deterministic synthetic tables with complete ground truth.

Text is drawn as dark glyph rectangles by default (``render="font"`` uses
Pillow's built-in font).  Every sample is laid out at canonical scale: the
longer image side equals ``image_size`` so canonicalization only pads.
"""

from __future__ import annotations

import json
import logging
import math
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .data_io import AnnotatedCell, AnnotationRecord, TextBlock, classify_complexity, table_to_structure, write_jsonl
from .otsl import Grid, HtmlTable, SpanCell, SpanMap, spans_to_html
from .preprocess import SeparatorMask
from .split_model import GridGeometry

logger = logging.getLogger(__name__)

ALPHABET = string.ascii_letters + string.digits + "$%.,()-"
WORD_GAP = 4
LINE_GAP = 2


@dataclass
class SynthSpec:
    rows: Tuple[int, int] = (3, 10)
    cols: Tuple[int, int] = (2, 6)
    span_prob: float = 0.35
    max_spans: int = 3
    empty_prob: float = 0.1
    ruling_prob: float = 0.4
    font_height: Tuple[int, int] = (6, 9)
    row_gap: Tuple[int, int] = (6, 12)
    col_gap: Tuple[int, int] = (8, 18)
    margin: Tuple[int, int] = (6, 12)
    chars_per_word: Tuple[int, int] = (1, 6)
    words_per_cell: Tuple[int, int] = (1, 2)
    glyph_width: Tuple[int, int] = (2, 5)
    image_size: int = 320
    render: str = "glyph"
    seed: int = 0

    def __post_init__(self):
        for name in ("span_prob", "empty_prob", "ruling_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("rows", "cols", "font_height", "row_gap", "col_gap", "margin",
                     "chars_per_word", "words_per_cell", "glyph_width"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 1:
                raise ValueError(f"{name} range {lo}..{hi} is empty")
            setattr(self, name, (int(lo), int(hi)))
        if min(self.row_gap[0], self.margin[0]) < 6:
            raise ValueError("gaps and margins must be at least 6 px")
        if self.render not in ("glyph", "font"):
            raise ValueError(f"unknown render mode {self.render!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        return cls(**data)


@dataclass
class SynthSample:
    image_id: str
    image: np.ndarray
    mask: SeparatorMask
    grid: GridGeometry
    otsl: Grid
    html: str
    blocks: List[TextBlock]
    record: AnnotationRecord
    contents: List[str] = field(default_factory=list)


@dataclass
class _Word:
    text: str
    widths: List[int]

    @property
    def width(self) -> int:
        return sum(self.widths) + len(self.widths) - 1


class _Retry(Exception):
    pass


def _rand(rng: np.random.Generator, bounds: Tuple[int, int]) -> int:
    return int(rng.integers(bounds[0], bounds[1] + 1))


class _GlyphMetrics:
    """Character widths; random rectangles or measured font advances."""

    def __init__(self, spec: SynthSpec):
        self.spec = spec
        self.fonts: Dict[int, ImageFont.ImageFont] = {}

    def font(self, height: int):
        if height not in self.fonts:
            self.fonts[height] = ImageFont.load_default(size=height + 2)
        return self.fonts[height]

    def word(self, rng: np.random.Generator, n_chars: int, height: int) -> _Word:
        chars = "".join(rng.choice(list(ALPHABET), size=n_chars))
        if self.spec.render == "font":
            font = self.font(height)
            widths = [max(2, int(math.ceil(font.getlength(ch)))) for ch in chars]
        else:
            widths = [_rand(rng, self.spec.glyph_width) for _ in chars]
        return _Word(chars, widths)

    def words_for_width(self, rng: np.random.Generator, width: int, height: int) -> List[_Word]:
        """Words whose glyphs fill exactly ``width`` pixels."""
        if width < 3:
            raise _Retry
        words: List[_Word] = []
        used = 0
        while True:
            n = _rand(rng, self.spec.chars_per_word)
            w = self.word(rng, n, height)
            gap = WORD_GAP if words else 0
            if used + gap + w.width >= width:
                remaining = width - used - gap
                if remaining < 2 and words:
                    # stretch the last glyph to close the row exactly
                    last = words[-1]
                    last.widths[-1] += width - used
                    return words
                widths, total = [], 0
                for ch_w in w.widths:
                    step = ch_w if not widths else ch_w + 1
                    if total + step > remaining:
                        break
                    widths.append(ch_w)
                    total += step
                if not widths:
                    widths, total = [remaining], remaining
                widths[-1] += remaining - total
                words.append(_Word(w.text[: len(widths)], widths))
                return words
            words.append(w)
            used += gap + w.width


def _structure(rng: np.random.Generator, spec: SynthSpec, n_rows: int, n_cols: int) -> List[SpanCell]:
    owner = -np.ones((n_rows, n_cols), dtype=int)
    spans: List[Tuple[int, int, int, int]] = []
    for _ in range(spec.max_spans):
        if rng.random() >= spec.span_prob:
            continue
        h = int(rng.integers(1, 3))
        w = int(rng.integers(1, 4))
        if h == 1 and w == 1:
            w = 2
        if h > n_rows or w > n_cols:
            continue
        top = int(rng.integers(0, n_rows - h + 1))
        left = int(rng.integers(0, n_cols - w + 1))
        if (owner[top:top + h, left:left + w] >= 0).any():
            continue
        owner[top:top + h, left:left + w] = len(spans)
        spans.append((top, left, h, w))
    cells = []
    for r in range(n_rows):
        for c in range(n_cols):
            k = owner[r, c]
            if k < 0:
                cells.append(SpanCell(r, c, 1, 1))
            else:
                top, left, h, w = spans[k]
                if (r, c) == (top, left):
                    cells.append(SpanCell(top, left, h, w))
    return cells


def _distribute(total: int, slots: int) -> List[int]:
    base, extra = divmod(total, slots)
    return [base + (1 if i < extra else 0) for i in range(slots)]


def _bounds_from_bands(bands: Sequence[Tuple[int, int]], n: int) -> List[float]:
    """Cell boundaries at the middle of the blank runs around content bands."""
    out = [(bands[0][0] - 1) / 2.0 if bands[0][0] > 0 else 0.0]
    for (_, e), (s, _) in zip(bands[:-1], bands[1:]):
        lo, hi = e + 1, s - 1
        out.append(float((lo + hi) // 2))
    last = bands[-1][1]
    out.append((last + 1 + n - 1) / 2.0 if last < n - 1 else float(n))
    return out


def _attempt(rng: np.random.Generator, spec: SynthSpec, metrics: _GlyphMetrics, image_id: str) -> SynthSample:
    S = spec.image_size
    n_rows = _rand(rng, spec.rows)
    n_cols = _rand(rng, spec.cols)
    cells = _structure(rng, spec, n_rows, n_cols)
    empty = [c.rowspan == 1 and c.colspan == 1 and rng.random() < spec.empty_prob for c in cells]

    # every row and column needs a non-empty unit cell to define its band
    for r in range(n_rows):
        if not any(c.top == r and c.rowspan == 1 and c.colspan == 1 and not e for c, e in zip(cells, empty)):
            raise _Retry
    for col in range(n_cols):
        if not any(c.left == col and c.rowspan == 1 and c.colspan == 1 and not e for c, e in zip(cells, empty)):
            raise _Retry

    font_h = [_rand(rng, spec.font_height) for _ in range(n_rows)]
    unit_words: Dict[int, List[_Word]] = {}
    col_w = [0] * n_cols
    for k, cell in enumerate(cells):
        if empty[k] or cell.rowspan != 1 or cell.colspan != 1:
            continue
        words = [metrics.word(rng, _rand(rng, spec.chars_per_word), font_h[cell.top])
                 for _ in range(_rand(rng, spec.words_per_cell))]
        unit_words[k] = words
        width = sum(w.width for w in words) + WORD_GAP * (len(words) - 1)
        col_w[cell.left] = max(col_w[cell.left], width)
    slot_h = [h + 2 for h in font_h]  # baseline jitter of 0..2 px

    row_gaps = [_rand(rng, spec.margin)] + [_rand(rng, spec.row_gap) for _ in range(n_rows - 1)] + [_rand(rng, spec.margin)]
    col_gaps = [_rand(rng, spec.margin)] + [_rand(rng, spec.col_gap) for _ in range(n_cols - 1)] + [_rand(rng, spec.margin)]
    height = sum(slot_h) + sum(row_gaps)
    width = sum(col_w) + sum(col_gaps)
    if max(height, width) > S:
        raise _Retry
    if height >= width:
        row_gaps = [g + d for g, d in zip(row_gaps, _distribute(S - height, len(row_gaps)))]
        height = S
    else:
        col_gaps = [g + d for g, d in zip(col_gaps, _distribute(S - width, len(col_gaps)))]
        width = S

    ys, y = [], 0
    for r in range(n_rows):
        y += row_gaps[r]
        ys.append(y)
        y += slot_h[r]
    xs, x = [], 0
    for c in range(n_cols):
        x += col_gaps[c]
        xs.append(x)
        x += col_w[c]

    # glyph boxes per cell, inclusive pixel coordinates
    glyphs: List[List[Tuple[int, int, int, int]]] = [[] for _ in cells]
    words_out: List[List[Tuple[str, Tuple[int, int, int, int]]]] = [[] for _ in cells]

    def place_line(k: int, words: List[_Word], x0: int, y0: int, h: int) -> None:
        cx = x0
        for w in words:
            start = cx
            for gw in w.widths:
                glyphs[k].append((cx, y0, cx + gw - 1, y0 + h - 1))
                cx += gw + 1
            words_out[k].append((w.text, (start, y0, cx - 2, y0 + h - 1)))
            cx += WORD_GAP - 1

    for k, cell in enumerate(cells):
        if empty[k]:
            continue
        r0, c0 = cell.top, cell.left
        r1, c1 = cell.bottom - 1, cell.right - 1
        h = font_h[r0]
        if cell.colspan == 1 and cell.rowspan == 1:
            words = unit_words[k]
            line_w = sum(w.width for w in words) + WORD_GAP * (len(words) - 1)
            align = rng.integers(0, 3)
            slack = col_w[c0] - line_w
            x0 = xs[c0] + (0 if align == 0 else slack if align == 1 else slack // 2)
            place_line(k, words, x0, ys[r0] + int(rng.integers(0, 3)), h)
            continue
        # spanning cell: text crosses every internal separator of its rectangle
        if cell.colspan > 1:
            a = int(rng.integers(xs[c0], xs[c0] + col_w[c0]))
            b = int(rng.integers(xs[c1], xs[c1] + col_w[c1]))
        else:
            a, b = xs[c0], xs[c0] + col_w[c0] - 1
            if b - a > 4:
                a += int(rng.integers(0, (b - a) // 3 + 1))
        line_width = b - a + 1
        if cell.rowspan == 1:
            words = metrics.words_for_width(rng, line_width, h)
            place_line(k, words, a, ys[r0] + int(rng.integers(0, 3)), h)
            continue
        band_end = ys[r0] + slot_h[r0] - 1
        band_start = ys[r1]
        pitch = h + LINE_GAP
        need = band_start - band_end + 3
        n_lines = max(2, int(math.ceil((need + LINE_GAP) / pitch)))
        block = n_lines * pitch - LINE_GAP
        top = int(round((band_end + band_start) / 2.0 - block / 2.0))
        top = max(top, ys[r0])
        if top + block - 1 > ys[r1] + slot_h[r1] - 1 or top > band_end - 1 or top + block - 1 < band_start + 1:
            raise _Retry
        for i in range(n_lines):
            place_line(k, metrics.words_for_width(rng, line_width, h), a, top + i * pitch, h)

    spans = SpanMap(n_rows, n_cols, cells, [[-1] * n_cols for _ in range(n_rows)])
    for idx, cell in enumerate(cells):
        for r in range(cell.top, cell.bottom):
            for c in range(cell.left, cell.right):
                spans.cover[r][c] = idx

    # ground-truth bands straight from the layout
    row_bands, col_bands = [], []
    for r in range(n_rows):
        boxes = [g for k, c in enumerate(cells) if c.top == r and c.rowspan == 1 for g in glyphs[k]]
        row_bands.append((min(b[1] for b in boxes), max(b[3] for b in boxes)))
    for col in range(n_cols):
        boxes = [g for k, c in enumerate(cells) if c.left == col and c.colspan == 1 for g in glyphs[k]]
        col_bands.append((min(b[0] for b in boxes), max(b[2] for b in boxes)))
    row_labels = np.ones(S, dtype=np.uint8)
    col_labels = np.ones(S, dtype=np.uint8)
    for s, e in row_bands:
        row_labels[s:e + 1] = 0
    for s, e in col_bands:
        col_labels[s:e + 1] = 0
    grid = GridGeometry(_bounds_from_bands(row_bands, S), _bounds_from_bands(col_bands, S))

    image = _render(rng, spec, metrics, height, width, cells, glyphs, words_out, font_h, grid, spans)

    contents, ann_cells, blocks = [], [], []
    for k, cell in enumerate(cells):
        ordered = sorted(words_out[k], key=lambda t: ((t[1][1] + t[1][3]) / 2, (t[1][0] + t[1][2]) / 2))
        text = " ".join(t for t, _ in ordered)
        contents.append(text)
        if glyphs[k]:
            box = (min(g[0] for g in glyphs[k]), min(g[1] for g in glyphs[k]),
                   max(g[2] for g in glyphs[k]), max(g[3] for g in glyphs[k]))
            ann_cells.append(AnnotatedCell(list(text), tuple(float(v) for v in box)))
        else:
            ann_cells.append(AnnotatedCell([], None))
        blocks.extend(TextBlock(tuple(float(v) for v in b), t) for t, b in ordered)

    table: HtmlTable = spans_to_html(spans, contents)
    tokens, _ = table_to_structure(table)
    otsl = [[None] * n_cols for _ in range(n_rows)]
    for cell in cells:
        for r in range(cell.top, cell.bottom):
            for c in range(cell.left, cell.right):
                dr, dc = r - cell.top, c - cell.left
                otsl[r][c] = ("C" if dc == 0 else "L") if dr == 0 else ("U" if dc == 0 else "X")
    record = AnnotationRecord(image_id, f"images/{image_id}.png", tokens, ann_cells, "train")
    record.extra["complexity"] = classify_complexity(record)
    return SynthSample(image_id, image, SeparatorMask(row_labels, col_labels), grid, otsl,
                       table.to_html(), blocks, record, contents)


def _render(rng, spec, metrics, height, width, cells, glyphs, words_out, font_h, grid, spans) -> np.ndarray:
    img = Image.new("RGB", (width, height), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    if rng.random() < spec.ruling_prob:
        shade = int(rng.integers(60, 170))
        color = (shade, shade, shade)
        style = "grid" if rng.random() < 0.5 else "rules"
        rb = [int(round(v)) for v in grid.row_bounds]
        cb = [int(round(v)) for v in grid.col_bounds]
        rb[-1] = min(rb[-1], height - 1)
        cb[-1] = min(cb[-1], width - 1)
        if style == "grid":
            for cell in cells:
                x0, x1 = cb[cell.left], cb[cell.right]
                y0, y1 = rb[cell.top], rb[cell.bottom]
                draw.rectangle([x0, y0, x1, y1], outline=color)
        else:
            header_rows = max(c.bottom for c in cells if c.top == 0)
            for y in (rb[0], rb[header_rows], rb[-1]):
                draw.line([cb[0], y, cb[-1], y], fill=color)
    for k, cell in enumerate(cells):
        if not glyphs[k]:
            continue
        ink = int(rng.integers(0, 90))
        if spec.render == "font":
            h = font_h[cell.top]
            for text, (x0, y0, _, _) in words_out[k]:
                draw.text((x0, y0 - 1), text, fill=(ink, ink, ink), font=metrics.font(h))
        else:
            for g in glyphs[k]:
                draw.rectangle(list(g), fill=(ink, ink, ink))
    return np.asarray(img, dtype=np.uint8).copy()


def generate_table(spec: SynthSpec, seed: int, image_id: Optional[str] = None) -> SynthSample:
    """One sample; identical (spec, seed) pairs give identical output."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, seed]))
    metrics = _GlyphMetrics(spec)
    image_id = image_id or f"synth_{spec.seed}_{seed:06d}"
    for _ in range(200):
        try:
            return _attempt(rng, spec, metrics, image_id)
        except _Retry:
            continue
    raise RuntimeError(f"could not lay out a table for seed {seed}; widen the SynthSpec ranges")


def generate_corpus(spec: SynthSpec, n: int, out_dir, split: str = "train", offset: int = 0) -> dict:
    """Write ``n`` samples as images/, annotations.jsonl and text_blocks.jsonl."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    annotations, text_blocks = [], []
    counts = {"simple": 0, "complex": 0}
    for i in range(n):
        sample = generate_table(spec, offset + i, image_id=f"{split}_{offset + i:06d}")
        Image.fromarray(sample.image).save(out / sample.record.image_path)
        sample.record.split_tag = split
        annotations.append(sample.record.to_json())
        text_blocks.append({
            "image_id": sample.image_id,
            "blocks": [{"bbox": list(b.bbox), "text": b.text} for b in sample.blocks],
        })
        counts[sample.record.extra["complexity"]] += 1
    write_jsonl(out / "annotations.jsonl", annotations)
    write_jsonl(out / "text_blocks.jsonl", text_blocks)
    manifest = {
        "n": n,
        "split": split,
        "offset": offset,
        "spec": asdict(spec),
        "counts": counts,
        "annotations": "annotations.jsonl",
        "text_blocks": "text_blocks.jsonl",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    logger.info("wrote %d samples to %s", n, out)
    return manifest
