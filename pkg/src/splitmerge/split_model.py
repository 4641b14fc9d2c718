"""Row/column splitting: line labeling network and grid extraction."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import SplitBackbone

ArrayLike = Union[np.ndarray, Sequence[float]]


class EmptyTableError(ValueError):
    """No content band was found along an axis."""


# ---------------------------------------------------------------------------
# line-label post-processing


def runs(labels: ArrayLike, value: int) -> List[Tuple[int, int]]:
    """Maximal runs of ``value`` as inclusive ``(start, end)`` pairs."""
    arr = np.asarray(labels).astype(np.int64) == value
    if not arr.any():
        return []
    padded = np.concatenate([[False], arr, [False]])
    diff = np.diff(padded.astype(np.int8))
    starts = np.flatnonzero(diff == 1)
    ends = np.flatnonzero(diff == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def upsample_2x(labels: ArrayLike) -> np.ndarray:
    return np.repeat(np.asarray(labels), 2)


def reclassify_by_text(labels: ArrayLike, centers: Iterable[float]) -> np.ndarray:
    """Turn every non-split run without a projected text center into split."""
    out = np.array(labels, dtype=np.uint8, copy=True)
    n = len(out)
    hit = np.zeros(n, dtype=bool)
    for c in centers:
        i = int(math.floor(c))
        if 0 <= i < n:
            hit[i] = True
    for s, e in runs(out, 0):
        if not hit[s:e + 1].any():
            out[s:e + 1] = 1
    return out


@dataclass
class GridGeometry:
    """Cell boundaries; ``row_bounds`` has R+1 entries, ``col_bounds`` C+1."""

    row_bounds: List[float]
    col_bounds: List[float]

    @property
    def n_rows(self) -> int:
        return len(self.row_bounds) - 1

    @property
    def n_cols(self) -> int:
        return len(self.col_bounds) - 1

    @property
    def row_seps(self) -> List[float]:
        return self.row_bounds[1:-1]

    @property
    def col_seps(self) -> List[float]:
        return self.col_bounds[1:-1]

    def cell_box(self, r: int, c: int) -> Tuple[float, float, float, float]:
        return (self.col_bounds[c], self.row_bounds[r], self.col_bounds[c + 1], self.row_bounds[r + 1])

    def boxes(self) -> np.ndarray:
        """All cell boxes, row-major, as an (R*C, 4) array of x0, y0, x1, y1."""
        xs = np.asarray(self.col_bounds, dtype=np.float64)
        ys = np.asarray(self.row_bounds, dtype=np.float64)
        x0, y0 = np.meshgrid(xs[:-1], ys[:-1])
        x1, y1 = np.meshgrid(xs[1:], ys[1:])
        return np.stack([x0, y0, x1, y1], axis=-1).reshape(-1, 4)

    def span_box(self, top: int, left: int, rowspan: int, colspan: int) -> Tuple[float, float, float, float]:
        return (self.col_bounds[left], self.row_bounds[top],
                self.col_bounds[left + colspan], self.row_bounds[top + rowspan])

    def scaled(self, factor: float) -> "GridGeometry":
        return GridGeometry([v * factor for v in self.row_bounds], [v * factor for v in self.col_bounds])

    def to_dict(self) -> Dict[str, List[float]]:
        return {"row_bounds": list(self.row_bounds), "col_bounds": list(self.col_bounds)}


def _axis_bounds(labels: ArrayLike, axis: str) -> List[float]:
    labels = np.asarray(labels)
    n = len(labels)
    bands = runs(labels, 0)
    if not bands:
        raise EmptyTableError(f"no {axis} content band found")
    first, last = bands[0][0], bands[-1][1]
    bounds = [(first - 1) / 2.0 if first > 0 else 0.0]
    for (_, end), (start, _) in zip(bands[:-1], bands[1:]):
        # midpoint of the split run [end+1, start-1], rounded half-down
        bounds.append(float(math.floor((end + start) / 2.0)))
    bounds.append((last + n) / 2.0 if last < n - 1 else float(n))
    return bounds


def extract_grid(row_labels: ArrayLike, col_labels: ArrayLike) -> GridGeometry:
    return GridGeometry(_axis_bounds(row_labels, "row"), _axis_bounds(col_labels, "column"))


# ---------------------------------------------------------------------------
# losses


def focal_loss(p: torch.Tensor, gamma: float = 2.0, alpha: Union[float, torch.Tensor] = 1.0) -> torch.Tensor:
    """Mean of ``alpha * (1 - p)**gamma * -log(p)`` over true-class probabilities."""
    if torch.any(p <= 0):
        raise ValueError("focal loss needs strictly positive probabilities")
    return (alpha * (1.0 - p) ** gamma * -torch.log(p)).mean()


def focal_loss_from_logits(logits: torch.Tensor, target: torch.Tensor, gamma: float = 2.0,
                           alpha: Union[float, torch.Tensor] = 1.0,
                           mask: torch.Tensor | None = None) -> torch.Tensor:
    """Focal loss over the last dim of ``logits``; ``mask`` drops positions."""
    logp = F.log_softmax(logits, dim=-1).gather(-1, target.unsqueeze(-1)).squeeze(-1)
    p = logp.exp()
    if isinstance(alpha, torch.Tensor):
        alpha = alpha.to(logits)[target]
    loss = alpha * (1.0 - p) ** gamma * -logp
    if mask is None:
        return loss.mean()
    mask = mask.to(loss.dtype)
    return (loss * mask).sum() / mask.sum().clamp_min(1.0)


def focal_loss_grad(logits: np.ndarray, target: np.ndarray, gamma: float = 2.0,
                    alpha: float = 1.0) -> np.ndarray:
    """Closed-form gradient of the mean focal loss w.r.t. ``logits`` (N, K)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=-1, keepdims=True)
    n = logits.shape[0]
    p = probs[np.arange(n), target]
    # dL/dp for L = -alpha (1-p)^g log p
    focus = gamma * (1 - p) ** (gamma - 1) * np.log(p) if gamma > 0 else 0.0
    dldp = alpha * (focus - (1 - p) ** gamma / p)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), target] = 1.0
    dpdz = p[:, None] * (onehot - probs)
    return dldp[:, None] * dpdz / n


def split_loss(out: Dict[str, torch.Tensor], row_target: torch.Tensor, col_target: torch.Tensor,
               gamma: float = 2.0, alpha: float = 1.0) -> torch.Tensor:
    """Row term plus column term, each averaged over its lines."""
    return (focal_loss_from_logits(out["row_logits"], row_target, gamma, alpha)
            + focal_loss_from_logits(out["col_logits"], col_target, gamma, alpha))


# ---------------------------------------------------------------------------
# network


class AxisProjection(nn.Module):
    """Learnable weighted average across one spatial axis."""

    def __init__(self, length: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(length))

    def normalized(self) -> torch.Tensor:
        return torch.softmax(self.weight, dim=0)

    def forward(self, fmap: torch.Tensor, axis: str) -> torch.Tensor:
        w = self.normalized()
        if axis == "row":
            return torch.einsum("bchw,w->bhc", fmap, w)
        return torch.einsum("bchw,h->bwc", fmap, w)


def project_global(fmap: torch.Tensor, proj: AxisProjection, axis: str) -> torch.Tensor:
    return proj(fmap, axis)


def extract_local(fmap: torch.Tensor, reduce: nn.Conv2d, axis: str) -> torch.Tensor:
    """Halve the orthogonal axis by average pooling, then 1x1 conv to one channel."""
    if axis == "row":
        pooled = F.avg_pool2d(fmap, kernel_size=(1, 2))
        return reduce(pooled).squeeze(1)
    pooled = F.avg_pool2d(fmap, kernel_size=(2, 1))
    return reduce(pooled).squeeze(1).transpose(1, 2)


def build_axis_sequence(global_feats: torch.Tensor, local_feats: torch.Tensor) -> torch.Tensor:
    if global_feats.shape[:-1] != local_feats.shape[:-1]:
        raise ValueError(f"length mismatch: {tuple(global_feats.shape)} vs {tuple(local_feats.shape)}")
    return torch.cat([global_feats, local_feats], dim=-1)


class SequenceEncoder(nn.Module):
    """Transformer encoder with learned 1-D positional embeddings."""

    def __init__(self, dim: int, max_len: int, layers: int = 3, heads: int = 8,
                 ffn_dim: int = 2048, dropout: float = 0.1):
        super().__init__()
        self.max_len = max_len
        self.pos = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        layer = nn.TransformerEncoderLayer(dim, heads, ffn_dim, dropout, batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        length = seq.shape[1]
        if length > self.max_len:
            raise ValueError(f"sequence length {length} exceeds maximum {self.max_len}")
        return self.encoder(seq + self.pos[:length])


class SplitModel(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        size = cfg.image_size
        ch = cfg.split_fpn_channels
        self.backbone = SplitBackbone(size, ch)
        half = size // 2
        dim = ch + size // 4
        self.row_proj = AxisProjection(half)
        self.col_proj = AxisProjection(half)
        self.row_local = nn.Conv2d(ch, 1, 1)
        self.col_local = nn.Conv2d(ch, 1, 1)
        self.row_encoder = SequenceEncoder(dim, half, cfg.encoder_layers, cfg.heads, cfg.ffn_dim, cfg.dropout)
        self.col_encoder = SequenceEncoder(dim, half, cfg.encoder_layers, cfg.heads, cfg.ffn_dim, cfg.dropout)
        self.row_head = nn.Linear(dim, 2)
        self.col_head = nn.Linear(dim, 2)

    def axis_sequences(self, fmap: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        rows = build_axis_sequence(project_global(fmap, self.row_proj, "row"),
                                   extract_local(fmap, self.row_local, "row"))
        cols = build_axis_sequence(project_global(fmap, self.col_proj, "col"),
                                   extract_local(fmap, self.col_local, "col"))
        return rows, cols

    def forward(self, images: torch.Tensor) -> Dict[str, torch.Tensor]:
        fmap = self.backbone(images)
        rows, cols = self.axis_sequences(fmap)
        return {
            "row_logits": self.row_head(self.row_encoder(rows)),
            "col_logits": self.col_head(self.col_encoder(cols)),
        }

    @torch.no_grad()
    def predict(self, images: torch.Tensor) -> Tuple[np.ndarray, np.ndarray]:
        """Split probabilities at half resolution, (B, H/2) and (B, W/2)."""
        out = self(images)
        return (classify_lines(out["row_logits"]).cpu().numpy(),
                classify_lines(out["col_logits"]).cpu().numpy())


def classify_lines(logits: torch.Tensor) -> torch.Tensor:
    """Probability of the split class from 2-class logits."""
    return torch.softmax(logits, dim=-1)[..., 1]


def downsample_labels(labels: np.ndarray) -> np.ndarray:
    """Full-resolution line labels to half resolution (split only if both lines are)."""
    labels = np.asarray(labels)
    return np.minimum(labels[0::2], labels[1::2])
