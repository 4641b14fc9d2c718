"""TEDS / TEDS-Struc / exact-match accuracy and corpus reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence

from apted import APTED, Config
from lxml import etree, html as lxml_html
from rapidfuzz.distance import Levenshtein

from .data_io import weighted_score

# FP32 peak throughput used to compare published FPS figures
GPU_TFLOPS = {"V100": 15.7, "A100": 19.5, "TITAN Xp": 12.1}

BUCKETS = ("simple", "complex", "all")


class TableNode:
    __slots__ = ("tag", "colspan", "rowspan", "content", "children")

    def __init__(self, tag: str, colspan: int = 1, rowspan: int = 1, content: str = "",
                 children: Optional[List["TableNode"]] = None):
        self.tag = tag
        self.colspan = colspan
        self.rowspan = rowspan
        self.content = content
        self.children = children or []

    def size(self) -> int:
        return 1 + sum(ch.size() for ch in self.children)

    def bracket(self) -> str:
        if self.tag == "td":
            label = f"td:{self.rowspan}x{self.colspan}:{self.content}"
        else:
            label = self.tag
        return "{" + label + "".join(ch.bracket() for ch in self.children) + "}"

    def __repr__(self) -> str:
        return self.bracket()


class TedsConfig(Config):
    valuecls = float

    def __init__(self, structure_only: bool = False):
        self.structure_only = structure_only

    def rename(self, node1: TableNode, node2: TableNode) -> float:
        return rename_cost(node1, node2, self.structure_only)

    def children(self, node: TableNode) -> List[TableNode]:
        return node.children


def rename_cost(a: TableNode, b: TableNode, structure_only: bool = False) -> float:
    if a.tag != b.tag or a.colspan != b.colspan or a.rowspan != b.rowspan:
        return 1.0
    if a.tag == "td" and not structure_only and (a.content or b.content):
        return Levenshtein.normalized_distance(a.content, b.content)
    return 0.0


def _collapse(text: str) -> str:
    return " ".join(text.split())


def _span(el, name: str) -> int:
    try:
        return max(1, int(el.get(name, "1")))
    except ValueError:
        return 1


def _convert(el) -> TableNode:
    tag = el.tag
    if tag in ("td", "th"):
        return TableNode("td", _span(el, "colspan"), _span(el, "rowspan"), _collapse("".join(el.itertext())))
    node = TableNode(tag)
    for child in el:
        if not isinstance(child.tag, str):
            continue
        if child.tag in ("thead", "tbody", "tfoot"):
            node.children.extend(_convert(gc) for gc in child if isinstance(gc.tag, str))
        elif child.tag in ("tr", "td", "th"):
            node.children.append(_convert(child))
    return node


def parse_table(markup: str) -> TableNode:
    """Canonical table tree: thead/tbody/tfoot dropped, th read as td, text collapsed."""
    if not markup or not markup.strip():
        raise ValueError("empty HTML")
    try:
        doc = lxml_html.fromstring(markup)
    except (etree.ParserError, ValueError) as exc:
        raise ValueError(f"unparseable HTML: {exc}") from None
    table = doc if doc.tag == "table" else doc.find(".//table")
    if table is None:
        raise ValueError("no <table> element")
    return _convert(table)


def tree_edit_distance(t1: TableNode, t2: TableNode, structure_only: bool = False) -> float:
    return APTED(t1, t2, TedsConfig(structure_only)).compute_edit_distance()


def teds_trees(t1: TableNode, t2: TableNode, structure_only: bool = False) -> float:
    n = max(t1.size(), t2.size())
    # the distance can exceed n for very dissimilar trees; keep the score in [0, 1]
    return max(0.0, 1.0 - tree_edit_distance(t1, t2, structure_only) / n)


def teds(pred: str, gt: str, structure_only: bool = False) -> float:
    """Tree-edit-distance similarity between two HTML tables; 0 if either fails to parse."""
    try:
        t_pred, t_gt = parse_table(pred), parse_table(gt)
    except ValueError:
        return 0.0
    return teds_trees(t_pred, t_gt, structure_only)


@dataclass
class TedsResult:
    teds: float
    teds_struct: float
    exact: bool
    error: Optional[str] = None


def evaluate_pair(pred: str, gt: str) -> TedsResult:
    try:
        t_gt = parse_table(gt)
    except ValueError as exc:
        return TedsResult(0.0, 0.0, False, f"ground truth: {exc}")
    try:
        t_pred = parse_table(pred)
    except ValueError as exc:
        return TedsResult(0.0, 0.0, False, f"prediction: {exc}")
    exact = t_pred.bracket() == t_gt.bracket()
    if exact:
        return TedsResult(1.0, 1.0, True)
    return TedsResult(teds_trees(t_pred, t_gt), teds_trees(t_pred, t_gt, True), False)


def structure_exact(pred: str, gt: str) -> bool:
    """Structural equality, ignoring cell contents."""
    try:
        return teds(pred, gt, structure_only=True) == 1.0
    except ValueError:
        return False


def accuracy(results: Sequence[TedsResult]) -> float:
    if not results:
        return 0.0
    return sum(1 for r in results if r.exact) / len(results)


def corpus_report(results: Sequence[TedsResult], tags: Sequence[str]) -> Dict[str, Dict[str, float]]:
    """Per-bucket means of TEDS, TEDS-Struc and accuracy (fractions)."""
    if len(results) != len(tags):
        raise ValueError("one complexity tag per result is required")
    report: Dict[str, Dict[str, float]] = {}
    for bucket in ("simple", "complex"):
        chosen = [r for r, t in zip(results, tags) if t == bucket]
        if chosen:
            report[bucket] = _summarize(chosen)
    parts = [v for v in report.values()]
    if parts:
        report["all"] = {
            key: weighted_score([(p[key], p["count"]) for p in parts])
            for key in ("teds", "teds_struct", "accuracy")
        }
        report["all"]["count"] = sum(p["count"] for p in parts)
    return report


def _summarize(results: Sequence[TedsResult]) -> Dict[str, float]:
    n = len(results)
    return {
        "teds": sum(r.teds for r in results) / n,
        "teds_struct": sum(r.teds_struct for r in results) / n,
        "accuracy": accuracy(results),
        "count": n,
    }


def report_to_csv(report: Dict[str, Dict[str, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["bucket", "count", "teds", "teds_struct", "accuracy"])
    for bucket in BUCKETS:
        if bucket in report:
            row = report[bucket]
            writer.writerow([bucket, int(row["count"]), f"{row['teds']:.6f}",
                             f"{row['teds_struct']:.6f}", f"{row['accuracy']:.6f}"])
    return buf.getvalue()


def report_to_json(report: Dict[str, Dict[str, float]]) -> str:
    return json.dumps(report, indent=2, sort_keys=True)


def format_report(report: Dict[str, Dict[str, float]]) -> str:
    lines = [f"{'bucket':<8} {'count':>6} {'TEDS':>7} {'TEDS-S':>7} {'Acc':>7}"]
    for bucket in BUCKETS:
        if bucket in report:
            row = report[bucket]
            lines.append(f"{bucket:<8} {int(row['count']):>6} {100 * row['teds']:>7.2f} "
                         f"{100 * row['teds_struct']:>7.2f} {100 * row['accuracy']:>7.2f}")
    return "\n".join(lines)


def adjusted_fps(fps: float, image_size_from: float, image_size_to: float,
                 flops_from: float, flops_to: float) -> float:
    """Rescale a throughput figure for pixel count and device compute."""
    for v in (fps, image_size_from, image_size_to, flops_from, flops_to):
        if v <= 0:
            raise ValueError("adjusted_fps inputs must be positive")
    return fps * (flops_to / flops_from) * (image_size_from / image_size_to) ** 2


def results_to_rows(ids: Iterable[str], results: Iterable[TedsResult]) -> List[dict]:
    return [{"image_id": i, **asdict(r)} for i, r in zip(ids, results)]
