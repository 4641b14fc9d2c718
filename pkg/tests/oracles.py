"""Independent reference implementations used only by the tests.

None of these import from the package; they restate each rule from its
definition in the most direct (slow) way.
"""

from __future__ import annotations

import math
import random
from functools import lru_cache
from itertools import product
from typing import FrozenSet, List, Tuple

import numpy as np


# ---------------------------------------------------------------------------
# OTSL: enumerate rectangle tilings


def _tilings(n_rows: int, n_cols: int):
    """Every partition of the grid into axis-aligned rectangles."""

    def rec(covered: FrozenSet[Tuple[int, int]], rects: Tuple):
        free = [(r, c) for r in range(n_rows) for c in range(n_cols) if (r, c) not in covered]
        if not free:
            yield rects
            return
        r0, c0 = free[0]  # row-major first free cell must be a rectangle's top-left
        for h in range(1, n_rows - r0 + 1):
            for w in range(1, n_cols - c0 + 1):
                cells = {(r0 + dr, c0 + dc) for dr in range(h) for dc in range(w)}
                if cells & covered:
                    continue
                yield from rec(covered | cells, rects + ((r0, c0, h, w),))

    yield from rec(frozenset(), ())


def tiling_tokens(n_rows: int, n_cols: int, rects) -> Tuple[str, ...]:
    grid = [[""] * n_cols for _ in range(n_rows)]
    for r0, c0, h, w in rects:
        for dr in range(h):
            for dc in range(w):
                if dr == 0 and dc == 0:
                    tok = "C"
                elif dr == 0:
                    tok = "L"
                elif dc == 0:
                    tok = "U"
                else:
                    tok = "X"
                grid[r0 + dr][c0 + dc] = tok
    return tuple("".join(row) for row in grid)


def valid_grids(n_rows: int, n_cols: int) -> dict:
    """Map from token grid (tuple of row strings) to its rectangle list."""
    return {tiling_tokens(n_rows, n_cols, t): t for t in _tilings(n_rows, n_cols)}


def random_valid_grid(rng: random.Random, n_rows: int, n_cols: int):
    """Random rectangle tiling grown greedily from the first free cell."""
    free = [[True] * n_cols for _ in range(n_rows)]
    rects = []
    for r in range(n_rows):
        for c in range(n_cols):
            if not free[r][c]:
                continue
            max_w = 0
            while c + max_w < n_cols and free[r][c + max_w]:
                max_w += 1
            w = rng.randint(1, max_w) if rng.random() < 0.4 else 1
            h = rng.randint(1, n_rows - r) if rng.random() < 0.4 else 1
            while any(not free[r + dr][c + dc] for dr in range(h) for dc in range(w)):
                h -= 1
            for dr in range(h):
                for dc in range(w):
                    free[r + dr][c + dc] = False
            rects.append((r, c, h, w))
    return [list(row) for row in tiling_tokens(n_rows, n_cols, rects)]


def all_grids(n_rows: int, n_cols: int):
    for toks in product("CLUX", repeat=n_rows * n_cols):
        yield [list(toks[r * n_cols:(r + 1) * n_cols]) for r in range(n_rows)]


# ---------------------------------------------------------------------------
# tree edit distance: textbook recursion over ordered forests


def levenshtein(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def label_cost(a, b, structure_only: bool) -> float:
    """Labels are (tag, colspan, rowspan, content)."""
    if a[:3] != b[:3]:
        return 1.0
    if a[0] == "td" and not structure_only and (a[3] or b[3]):
        return levenshtein(a[3], b[3]) / max(len(a[3]), len(b[3]))
    return 0.0


def forest_size(forest) -> int:
    return sum(1 + forest_size(children) for _, children in forest)


def forest_distance(f1, f2, structure_only: bool = False) -> float:
    """Edit distance between ordered forests of (label, children) trees."""

    @lru_cache(maxsize=None)
    def d(a, b):
        if not a and not b:
            return 0.0
        if not a:
            return float(forest_size(b))
        if not b:
            return float(forest_size(a))
        (la, ca), (lb, cb) = a[-1], b[-1]
        return min(
            d(a[:-1] + ca, b) + 1.0,  # delete rightmost root of a
            d(a, b[:-1] + cb) + 1.0,  # insert rightmost root of b
            d(ca, cb) + d(a[:-1], b[:-1]) + label_cost(la, lb, structure_only),
        )

    return d(f1, f2)


def teds_oracle(t1, t2, structure_only: bool = False) -> float:
    n = max(forest_size((t1,)), forest_size((t2,)))
    return max(0.0, 1.0 - forest_distance((t1,), (t2,), structure_only) / n)


# ---------------------------------------------------------------------------
# bilinear RoI pooling, sampled point by point


def _bilinear(fmap: np.ndarray, y: float, x: float) -> np.ndarray:
    """Sample (C, H, W) at (y, x); zero outside [-1, H] x [-1, W], edges clamped."""
    _, h, w = fmap.shape
    if y < -1.0 or y > h or x < -1.0 or x > w:
        return np.zeros(fmap.shape[0])
    y, x = max(y, 0.0), max(x, 0.0)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    if y0 >= h - 1:
        y0 = y1 = h - 1
        y = float(y0)
    else:
        y1 = y0 + 1
    if x0 >= w - 1:
        x0 = x1 = w - 1
        x = float(x0)
    else:
        x1 = x0 + 1
    ly, lx = y - y0, x - x0
    return ((1 - ly) * (1 - lx) * fmap[:, y0, x0] + (1 - ly) * lx * fmap[:, y0, x1]
            + ly * (1 - lx) * fmap[:, y1, x0] + ly * lx * fmap[:, y1, x1])


def roi_align_oracle(fmap: np.ndarray, box, out: int = 7, scale: float = 0.25,
                     sampling: int = 2) -> np.ndarray:
    """Aligned RoIAlign of one box on a (C, H, W) map -> (C, out, out)."""
    x0, y0, x1, y1 = (v * scale - 0.5 for v in box)
    bin_h, bin_w = (y1 - y0) / out, (x1 - x0) / out
    result = np.zeros((fmap.shape[0], out, out))
    for i in range(out):
        for j in range(out):
            acc = np.zeros(fmap.shape[0])
            for si in range(sampling):
                for sj in range(sampling):
                    y = y0 + (i + (si + 0.5) / sampling) * bin_h
                    x = x0 + (j + (sj + 0.5) / sampling) * bin_w
                    acc += _bilinear(fmap, y, x)
            result[:, i, j] = acc / sampling ** 2
    return result


# ---------------------------------------------------------------------------
# axis projection and focal loss


def row_projection_oracle(fmap: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """(B, C, H, W) with softmax(weights) over W -> (B, H, C), by explicit loops."""
    e = np.exp(weights - weights.max())
    w = e / e.sum()
    b, c, h, width = fmap.shape
    out = np.zeros((b, h, c))
    for bi in range(b):
        for hi in range(h):
            for ci in range(c):
                out[bi, hi, ci] = sum(w[k] * fmap[bi, ci, hi, k] for k in range(width))
    return out


def focal_loss_numpy(logits: np.ndarray, target: np.ndarray, gamma: float, alpha: float = 1.0) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    lp = logp[np.arange(len(target)), target]
    return float(np.mean(-alpha * (1 - np.exp(lp)) ** gamma * lp))


def central_difference(fn, x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Five-point central stencil; error O(eps^4) keeps roundoff near 1e-13."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        def at(k):
            y = x.copy()
            y[idx] += k * eps
            return fn(y)

        grad[idx] = (at(-2) - 8 * at(-1) + 8 * at(1) - at(2)) / (12 * eps)
    return grad


# ---------------------------------------------------------------------------
# separator labels by direct projection


def projection_labels(intervals: List[Tuple[float, float]], n: int) -> np.ndarray:
    """1 where no interval [lo, hi] touches the pixel line."""
    labels = np.ones(n, dtype=np.uint8)
    for lo, hi in intervals:
        labels[int(math.floor(lo)):int(math.ceil(hi)) + 1] = 0
    return labels
