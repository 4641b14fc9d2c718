"""Grid-cell OTSL classification."""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from torchvision.ops import roi_align

from .backbone import MergeBackbone
from .otsl import TOKENS, Grid
from .split_model import GridGeometry, focal_loss, focal_loss_from_logits


class OverCapacityError(ValueError):
    """The grid has more cells (or rows/columns) than the encoder accepts."""


def cell_boxes(grid: GridGeometry) -> torch.Tensor:
    boxes = torch.as_tensor(grid.boxes(), dtype=torch.float32)
    if ((boxes[:, 2] - boxes[:, 0]) <= 0).any() or ((boxes[:, 3] - boxes[:, 1]) <= 0).any():
        raise ValueError("grid contains a zero-area cell")
    return boxes


def pool_cells(fmap: torch.Tensor, grids: Sequence[GridGeometry], roi_size: int = 7,
               stride: int = 4) -> torch.Tensor:
    """RoIAlign every grid cell; returns (sum R*C, channels, roi, roi).

    ``fmap`` is (B, C, h, w) with one grid per batch item.  Boxes are in
    canonical pixels and scaled by ``1/stride``.
    """
    boxes = [cell_boxes(g).to(fmap.device, fmap.dtype) for g in grids]
    return roi_align(fmap, boxes, output_size=roi_size, spatial_scale=1.0 / stride,
                     sampling_ratio=2, aligned=True)


def pool_grid(fmap: torch.Tensor, grid: GridGeometry, roi_size: int = 7, stride: int = 4) -> torch.Tensor:
    """Single-image pooling shaped (R, C, roi, roi, channels)."""
    if fmap.dim() == 3:
        fmap = fmap.unsqueeze(0)
    pooled = pool_cells(fmap, [grid], roi_size, stride)
    return pooled.permute(0, 2, 3, 1).reshape(grid.n_rows, grid.n_cols, roi_size, roi_size, -1)


class CellProjector(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(x.flatten(1))))


class GridEncoder(nn.Module):
    """Transformer encoder over R*C cells with row/column embeddings."""

    def __init__(self, dim: int, layers: int = 3, heads: int = 8, ffn_dim: int = 2048,
                 dropout: float = 0.1, max_cells: int = 640, max_rows: int = 160, max_cols: int = 160):
        super().__init__()
        if dim % 2:
            raise ValueError("encoder dimension must be even")
        self.max_cells = max_cells
        self.row_embed = nn.Embedding(max_rows, dim // 2)
        self.col_embed = nn.Embedding(max_cols, dim // 2)
        nn.init.normal_(self.row_embed.weight, std=0.02)
        nn.init.normal_(self.col_embed.weight, std=0.02)
        layer = nn.TransformerEncoderLayer(dim, heads, ffn_dim, dropout, batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)

    def check_capacity(self, n_rows: int, n_cols: int) -> None:
        if n_rows * n_cols > self.max_cells:
            raise OverCapacityError(f"{n_rows}x{n_cols} grid exceeds {self.max_cells} cells")
        if n_rows > self.row_embed.num_embeddings or n_cols > self.col_embed.num_embeddings:
            raise OverCapacityError(f"{n_rows}x{n_cols} grid exceeds positional tables")

    def position(self, n_rows: int, n_cols: int) -> torch.Tensor:
        device = self.row_embed.weight.device
        rows = torch.arange(n_rows, device=device).repeat_interleave(n_cols)
        cols = torch.arange(n_cols, device=device).repeat(n_rows)
        return torch.cat([self.row_embed(rows), self.col_embed(cols)], dim=-1)

    def forward(self, seqs: Sequence[torch.Tensor], shapes: Sequence[Tuple[int, int]]) -> List[torch.Tensor]:
        """Encode a batch of variable-length cell sequences."""
        for r, c in shapes:
            self.check_capacity(r, c)
        longest = max(r * c for r, c in shapes)
        dim = seqs[0].shape[-1]
        batch = seqs[0].new_zeros(len(seqs), longest, dim)
        pad = torch.ones(len(seqs), longest, dtype=torch.bool, device=batch.device)
        for i, (seq, (r, c)) in enumerate(zip(seqs, shapes)):
            batch[i, : r * c] = seq + self.position(r, c)
            pad[i, : r * c] = False
        out = self.encoder(batch, src_key_padding_mask=pad)
        return [out[i, : r * c] for i, (r, c) in enumerate(shapes)]


class MergeModel(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.backbone = MergeBackbone(cfg.image_size, cfg.merge_fpn_channels, pretrained=cfg.pretrained)
        roi_dim = cfg.roi_size * cfg.roi_size * cfg.merge_fpn_channels
        self.project = CellProjector(roi_dim, cfg.mlp_dim, cfg.merge_dim)
        self.encoder = GridEncoder(cfg.merge_dim, cfg.merge_layers, cfg.heads, cfg.ffn_dim, cfg.dropout,
                                   cfg.max_cells, cfg.max_rows, cfg.max_cols)
        self.head = nn.Linear(cfg.merge_dim, len(TOKENS))

    def forward(self, images: torch.Tensor, grids: Sequence[GridGeometry]) -> List[torch.Tensor]:
        """Per-image logits shaped (R, C, 4)."""
        for g in grids:
            self.encoder.check_capacity(g.n_rows, g.n_cols)
        fmap = self.backbone(images)
        # roi_align returns (C, roi, roi) per cell; flatten channel-last to match pool_grid
        pooled = pool_cells(fmap, grids, self.cfg.roi_size, self.backbone.stride).permute(0, 2, 3, 1)
        feats = self.project(pooled)
        seqs, shapes, start = [], [], 0
        for g in grids:
            n = g.n_rows * g.n_cols
            seqs.append(feats[start:start + n])
            shapes.append((g.n_rows, g.n_cols))
            start += n
        encoded = self.encoder(seqs, shapes)
        return [self.head(e).view(r, c, len(TOKENS)) for e, (r, c) in zip(encoded, shapes)]

    @torch.no_grad()
    def predict(self, images: torch.Tensor, grids: Sequence[GridGeometry]) -> List[Grid]:
        return [logits_to_grid(lg) for lg in self(images, grids)]


def logits_to_grid(logits: torch.Tensor) -> Grid:
    idx = logits.argmax(dim=-1).cpu().numpy()
    return [[TOKENS[i] for i in row] for row in idx]


def grid_to_targets(grid: Grid) -> torch.Tensor:
    return torch.as_tensor(np.vectorize(TOKENS.index)(np.asarray(grid)), dtype=torch.long)


def merge_loss(logits: Sequence[torch.Tensor], targets: Sequence[torch.Tensor], gamma: float = 2.0,
               alpha: float = 1.0) -> torch.Tensor:
    """Focal loss averaged over the cells of each table, then over the batch."""
    losses = [focal_loss_from_logits(lg.reshape(-1, lg.shape[-1]), t.reshape(-1), gamma, alpha)
              for lg, t in zip(logits, targets)]
    return torch.stack(losses).mean()


def focal_loss_merge(p: torch.Tensor, gamma: float = 2.0, alpha: float = 1.0) -> torch.Tensor:
    """Mean focal loss over the true-class probabilities of all grid cells."""
    return focal_loss(p.reshape(-1), gamma, alpha)
