"""Annotation and OCR text-block loading plus corpus bookkeeping."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

from .otsl import HtmlCell, HtmlTable, OTSLError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
SPLITS = ("train", "val", "test")

_SPAN_RE = re.compile(r'(rowspan|colspan)\s*=\s*"?(\d+)"?')


class AnnotationError(ValueError):
    """A single annotation line could not be turned into a record."""

    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        prefix = f"line {line_no}: " if line_no is not None else ""
        super().__init__(prefix + message)


@dataclass
class AnnotatedCell:
    tokens: List[str]
    bbox: Optional[Tuple[float, float, float, float]] = None

    @property
    def text(self) -> str:
        return "".join(self.tokens)

    @property
    def is_empty(self) -> bool:
        return self.bbox is None


@dataclass
class AnnotationRecord:
    image_id: str
    image_path: str
    structure_tokens: List[str]
    cells: List[AnnotatedCell]
    split_tag: str = "train"
    extra: Dict[str, object] = field(default_factory=dict)

    def to_table(self) -> HtmlTable:
        """Structure tokens plus cell contents as an :class:`HtmlTable`."""
        return structure_to_table(self.structure_tokens, [c.text for c in self.cells])

    def to_html(self) -> str:
        return self.to_table().to_html()

    def to_json(self) -> dict:
        cells = []
        for cell in self.cells:
            item: dict = {"tokens": list(cell.tokens)}
            if cell.bbox is not None:
                item["bbox"] = [float(v) for v in cell.bbox]
            cells.append(item)
        out = {
            "filename": self.image_path,
            "imgid": self.image_id,
            "split": self.split_tag,
            "html": {"structure": {"tokens": list(self.structure_tokens)}, "cells": cells},
        }
        out.update(self.extra)
        return out


@dataclass(frozen=True)
class TextBlock:
    bbox: Tuple[float, float, float, float]
    text: str

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate text block bbox {self.bbox}")

    @property
    def center(self) -> Tuple[float, float]:
        x0, y0, x1, y1 = self.bbox
        return (x0 + x1) / 2.0, (y0 + y1) / 2.0


@dataclass(frozen=True)
class DatasetSplitStats:
    n_simple: int = 0
    n_complex: int = 0

    @property
    def n_total(self) -> int:
        return self.n_simple + self.n_complex


def _td_openings(tokens: Sequence[str]) -> int:
    return sum(1 for t in tokens if t in ("<td>", "<td"))


def record_from_json(obj: dict, line_no: Optional[int] = None,
                     image_root: Optional[Path] = None) -> AnnotationRecord:
    try:
        structure = obj["html"]["structure"]["tokens"]
        raw_cells = obj["html"]["cells"]
        filename = obj["filename"]
    except (KeyError, TypeError) as exc:
        raise AnnotationError(f"missing field {exc}", line_no) from None
    if not structure:
        raise AnnotationError("empty structure tokens", line_no)

    cells = []
    for i, raw in enumerate(raw_cells):
        tokens = list(raw.get("tokens", []))
        bbox = raw.get("bbox")
        if bbox is not None:
            if len(bbox) != 4:
                raise AnnotationError(f"cell {i}: bbox needs 4 values", line_no)
            x0, y0, x1, y1 = (float(v) for v in bbox)
            if not (x0 < x1 and y0 < y1):
                raise AnnotationError(f"cell {i}: degenerate bbox {bbox}", line_no)
            bbox = (x0, y0, x1, y1)
        elif tokens:
            raise AnnotationError(f"cell {i}: content without bbox", line_no)
        cells.append(AnnotatedCell(tokens, bbox))

    n_slots = _td_openings(structure)
    if n_slots != len(cells):
        raise AnnotationError(f"{len(cells)} cells for {n_slots} structure slots", line_no)

    split = obj.get("split", "train")
    if split not in SPLITS:
        raise AnnotationError(f"unknown split {split!r}", line_no)
    image_id = str(obj.get("imgid", Path(filename).stem))
    image_path = filename
    if image_root is not None and not Path(filename).is_absolute():
        image_path = str(image_root / filename)
    known = {"filename", "imgid", "split", "html"}
    extra = {k: v for k, v in obj.items() if k not in known}
    return AnnotationRecord(image_id, image_path, list(structure), cells, split, extra)


def load_annotations(path: PathLike, lenient: bool = False,
                     image_root: Optional[PathLike] = None) -> Iterator[AnnotationRecord]:
    """Stream records from a PubTabNet/FinTabNet style JSONL file.

    Image paths are resolved against ``image_root`` (default: the directory
    holding the annotation file).  Malformed lines raise
    :class:`AnnotationError` unless ``lenient`` is set, in which case they
    are logged and skipped.
    """
    path = Path(path)
    root = Path(image_root) if image_root is not None else path.parent
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                yield record_from_json(obj, line_no, root)
            except (json.JSONDecodeError, AnnotationError) as exc:
                if not isinstance(exc, AnnotationError):
                    exc = AnnotationError(f"invalid JSON: {exc.msg}", line_no)
                if not lenient:
                    raise exc
                logger.warning("skipping %s: %s", path.name, exc)


def structure_to_table(tokens: Sequence[str], contents: Sequence[str]) -> HtmlTable:
    """Assemble structure tokens and per-cell strings into an HtmlTable.

    ``thead``/``tbody`` wrappers are dropped.
    """
    rows: List[List[HtmlCell]] = []
    contents = list(contents)
    k = 0
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok == "<tr>":
            rows.append([])
        elif tok in ("<td>", "<td"):
            attrs = ""
            if tok == "<td":
                i += 1
                while i < len(tokens) and tokens[i] != ">":
                    attrs += tokens[i]
                    i += 1
            spans = {m.group(1): int(m.group(2)) for m in _SPAN_RE.finditer(attrs)}
            if not rows:
                raise OTSLError("cell outside of a row")
            text = contents[k] if k < len(contents) else ""
            k += 1
            rows[-1].append(HtmlCell(spans.get("rowspan", 1), spans.get("colspan", 1), text))
        i += 1
    return HtmlTable(rows)


def table_to_structure(table: HtmlTable) -> Tuple[List[str], List[str]]:
    """Inverse of :func:`structure_to_table` (no thead/tbody emitted)."""
    tokens = ["<tbody>"]
    contents = []
    for row in table.rows:
        tokens.append("<tr>")
        for cell in row:
            if cell.rowspan == 1 and cell.colspan == 1:
                tokens.append("<td>")
            else:
                tokens.append("<td")
                if cell.rowspan > 1:
                    tokens.append(f' rowspan="{cell.rowspan}"')
                if cell.colspan > 1:
                    tokens.append(f' colspan="{cell.colspan}"')
                tokens.append(">")
            tokens.append("</td>")
            contents.append(cell.content)
        tokens.append("</tr>")
    tokens.append("</tbody>")
    return tokens, contents


def classify_complexity(record: AnnotationRecord) -> str:
    for tok in record.structure_tokens:
        for m in _SPAN_RE.finditer(tok):
            if int(m.group(2)) > 1:
                return "complex"
    return "simple"


def audit_counts(records: Iterable[AnnotationRecord]) -> DatasetSplitStats:
    n_simple = n_complex = 0
    for rec in records:
        if classify_complexity(rec) == "complex":
            n_complex += 1
        else:
            n_simple += 1
    return DatasetSplitStats(n_simple, n_complex)


def weighted_score(groups: Sequence[Tuple[float, int]]) -> float:
    """Count-weighted mean of per-group scores."""
    if not groups:
        raise ValueError("weighted_score needs at least one group")
    total = 0
    acc = 0.0
    for score, count in groups:
        if count <= 0:
            raise ValueError(f"group count must be positive, got {count}")
        acc += score * count
        total += count
    return acc / total


def _parse_block(obj: dict) -> TextBlock:
    bbox = obj.get("bbox")
    if bbox is None or len(bbox) != 4:
        raise ValueError(f"text block needs a 4-value bbox: {obj!r}")
    return TextBlock(tuple(float(v) for v in bbox), str(obj.get("text", "")))


def load_text_block_index(path: PathLike) -> Dict[str, List[TextBlock]]:
    """Read ``{image_id, blocks: [...]}`` lines into a mapping."""
    index: Dict[str, List[TextBlock]] = {}
    with Path(path).open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                blocks = [_parse_block(b) for b in obj.get("blocks", [])]
            except ValueError as exc:  # includes JSONDecodeError
                raise AnnotationError(str(exc), line_no) from None
            index.setdefault(str(obj.get("image_id", "")), []).extend(blocks)
    return index


def load_text_blocks(path: PathLike, image_id: Optional[str] = None) -> List[TextBlock]:
    """Read text blocks in file order.

    Lines may be bare blocks (``{bbox, text}``) or grouped
    (``{image_id, blocks}``); with ``image_id`` only that group is returned.
    """
    out: List[TextBlock] = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if "blocks" in obj:
                    if image_id is not None and str(obj.get("image_id")) != image_id:
                        continue
                    out.extend(_parse_block(b) for b in obj["blocks"])
                else:
                    out.append(_parse_block(obj))
            except ValueError as exc:
                raise AnnotationError(str(exc), line_no) from None
    return out


def write_jsonl(path: PathLike, rows: Iterable[dict]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with path.open("w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, ensure_ascii=False) + "\n")
            n += 1
    return n


def read_jsonl(path: PathLike) -> List[dict]:
    with Path(path).open("r", encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]
