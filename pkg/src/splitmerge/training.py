"""Training loops for the split and merge models."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

from .config import ModelConfig, OptimConfig
from .data_io import AnnotationRecord, load_annotations
from .merge_model import MergeModel, grid_to_targets, merge_loss
from .otsl import TOKENS
from .preprocess import (
    UnusableRecordError,
    derive_grid_labels,
    derive_separator_mask,
    normalize,
    resize_and_pad,
)
from .split_model import GridGeometry, SplitModel, downsample_labels, split_loss

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class DivergenceError(RuntimeError):
    """Loss or gradients became non-finite; ``checkpoint`` is the last good one."""

    def __init__(self, message: str, checkpoint: Optional[str] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


# ---------------------------------------------------------------------------
# optimizer helpers


def poly_lr(step: int, total_steps: int, base_lr: float, power: float = 0.9) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 - step / total_steps) ** power


def clip_gradients(params: Iterable[torch.nn.Parameter], max_norm: float = 0.5) -> float:
    """Scale gradients to a global L2 norm of at most ``max_norm``; returns the norm before clipping."""
    params = [p for p in params if p.grad is not None]
    try:
        norm = torch.nn.utils.clip_grad_norm_(params, max_norm, error_if_nonfinite=True)
    except RuntimeError as exc:
        raise DivergenceError(f"non-finite gradient: {exc}") from None
    return float(norm)


def make_optimizer(model: torch.nn.Module, cfg: OptimConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                             weight_decay=cfg.weight_decay)


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


# ---------------------------------------------------------------------------
# data


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


@dataclass
class TableItem:
    record: AnnotationRecord
    row_labels: np.ndarray
    col_labels: np.ndarray
    otsl: List[List[str]]
    grid: GridGeometry


class TableDataset(Dataset):
    """Annotated table corpus with split and merge targets.

    Labels are derived once at construction; records that cannot give
    consistent labels are skipped and counted in ``skipped``.
    """

    def __init__(self, corpus_dir, image_size: int, annotations: str = "annotations.jsonl",
                 lenient: bool = False, limit: Optional[int] = None):
        self.root = Path(corpus_dir)
        self.image_size = image_size
        self.items: List[TableItem] = []
        self.skipped: Dict[str, str] = {}
        for record in load_annotations(self.root / annotations, lenient=lenient, image_root=self.root):
            if limit is not None and len(self.items) >= limit:
                break
            try:
                self.items.append(self._label(record))
            except (UnusableRecordError, OSError) as exc:
                self.skipped[record.image_id] = str(exc)
                logger.warning("skipping %s: %s", record.image_id, exc)

    def _label(self, record: AnnotationRecord) -> TableItem:
        canon = resize_and_pad(load_image(record.image_path), self.image_size)
        mask = derive_separator_mask(record, canon)
        labels = derive_grid_labels(record, mask)
        return TableItem(record, mask.row_labels, mask.col_labels, labels.otsl, labels.grid)

    def __len__(self) -> int:
        return len(self.items)

    def image_tensor(self, i: int) -> torch.Tensor:
        canon = resize_and_pad(load_image(self.items[i].record.image_path), self.image_size)
        return torch.from_numpy(normalize(canon.pixels))

    def __getitem__(self, i: int) -> dict:
        item = self.items[i]
        return {
            "image": self.image_tensor(i),
            "row_target": torch.from_numpy(downsample_labels(item.row_labels).astype(np.int64)),
            "col_target": torch.from_numpy(downsample_labels(item.col_labels).astype(np.int64)),
            "grid": item.grid,
            "otsl": grid_to_targets(item.otsl),
        }


def collate(batch: Sequence[dict]) -> dict:
    return {
        "image": torch.stack([b["image"] for b in batch]),
        "row_target": torch.stack([b["row_target"] for b in batch]),
        "col_target": torch.stack([b["col_target"] for b in batch]),
        "grid": [b["grid"] for b in batch],
        "otsl": [b["otsl"] for b in batch],
    }


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic per-epoch permutation."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(dataset: TableDataset, batch_size: int, seed: int, epoch: int, skip: int = 0):
    """Collated batches of one epoch, optionally skipping the first ``skip`` batches."""
    order = epoch_order(len(dataset), seed, epoch)
    for start in range(skip * batch_size, len(order), batch_size):
        yield collate([dataset[int(i)] for i in order[start:start + batch_size]])


# ---------------------------------------------------------------------------
# metrics accumulated during training


class LineCounts:
    """Precision/recall of the split class over pixel lines."""

    def __init__(self):
        self.tp = self.fp = self.fn = 0

    def update(self, logits: torch.Tensor, target: torch.Tensor) -> None:
        pred = logits.argmax(-1)
        self.tp += int(((pred == 1) & (target == 1)).sum())
        self.fp += int(((pred == 1) & (target == 0)).sum())
        self.fn += int(((pred == 0) & (target == 1)).sum())

    def summary(self) -> Dict[str, float]:
        precision = self.tp / max(self.tp + self.fp, 1)
        recall = self.tp / max(self.tp + self.fn, 1)
        return {"precision": precision, "recall": recall}


class TokenCounts:
    """Per-class accuracy over OTSL tokens."""

    def __init__(self):
        self.correct = np.zeros(len(TOKENS), dtype=np.int64)
        self.total = np.zeros(len(TOKENS), dtype=np.int64)

    def update(self, logits: torch.Tensor, target: torch.Tensor) -> None:
        pred = logits.argmax(-1).reshape(-1).cpu().numpy()
        tgt = target.reshape(-1).cpu().numpy()
        np.add.at(self.total, tgt, 1)
        np.add.at(self.correct, tgt[pred == tgt], 1)

    def summary(self) -> Dict[str, float]:
        out = {f"acc_{t}": (self.correct[i] / self.total[i] if self.total[i] else float("nan"))
               for i, t in enumerate(TOKENS)}
        out["acc_all"] = self.correct.sum() / max(self.total.sum(), 1)
        return out


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class TrainState:
    kind: str
    step: int = 0
    epoch: int = 0
    total_steps: int = 0
    best_metric: Optional[float] = None
    seed: int = 0
    checkpoint: Optional[str] = None
    history: List[dict] = field(default_factory=list)


def save_checkpoint(path, model: torch.nn.Module, optimizer, state: TrainState,
                    optim_cfg: OptimConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "kind": state.kind,
        "model_config": model.cfg.to_dict(),
        "optim_config": optim_cfg.to_dict(),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "state": asdict(state),
        "torch_rng": torch.get_rng_state(),
    }
    tmp = path.with_suffix(".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def _write_manifest(out_dir: Path, state: TrainState, model_cfg: ModelConfig, optim_cfg: OptimConfig) -> None:
    manifest = {
        "kind": state.kind,
        "epochs_done": state.epoch,
        "step": state.step,
        "latest": state.checkpoint,
        "checkpoints": sorted(p.name for p in out_dir.glob("*.ckpt")),
        "model_config": model_cfg.to_dict(),
        "optim_config": optim_cfg.to_dict(),
        "history": state.history,
    }
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2))


def read_checkpoint(path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)


def resolve_checkpoint(path) -> Path:
    """Accept a checkpoint file or a run directory (uses the manifest's latest)."""
    path = Path(path)
    if path.is_dir():
        manifest = path / MANIFEST
        if not manifest.exists():
            raise FileNotFoundError(f"no {MANIFEST} in {path}")
        latest = json.loads(manifest.read_text()).get("latest")
        if not latest:
            raise FileNotFoundError(f"{path} has no finished epoch")
        return path / latest
    if not path.exists():
        raise FileNotFoundError(path)
    return path


def load_model(path, device: str = "cpu", image_size: Optional[int] = None,
               max_cells: Optional[int] = None) -> torch.nn.Module:
    """Rebuild a split or merge model from a checkpoint, in eval mode."""
    ckpt = read_checkpoint(resolve_checkpoint(path))
    cfg = ModelConfig.from_dict(ckpt["model_config"])
    if image_size is not None and image_size != cfg.image_size:
        raise ValueError(f"checkpoint was trained at {cfg.image_size}px, not {image_size}px")
    if max_cells is not None:
        cfg.max_cells = max_cells
    cls = SplitModel if ckpt["kind"] == "split" else MergeModel
    model = cls(cfg)
    model.load_state_dict(ckpt["model"])
    return model.to(device).eval()


# ---------------------------------------------------------------------------
# loops


StepFn = Callable[[torch.nn.Module, dict, object], torch.Tensor]


def _split_step(model: SplitModel, batch: dict, counts: LineCounts) -> torch.Tensor:
    out = model(batch["image"])
    counts.update(out["row_logits"].detach(), batch["row_target"])
    counts.update(out["col_logits"].detach(), batch["col_target"])
    return split_loss(out, batch["row_target"], batch["col_target"], model.cfg.gamma)


def _merge_step(model: MergeModel, batch: dict, counts: TokenCounts) -> torch.Tensor:
    logits = model(batch["image"], batch["grid"])
    for lg, t in zip(logits, batch["otsl"]):
        counts.update(lg.detach(), t)
    return merge_loss(logits, batch["otsl"], model.cfg.gamma)


def _to_device(batch: dict, device: str) -> dict:
    out = dict(batch)
    for key in ("image", "row_target", "col_target"):
        out[key] = batch[key].to(device)
    out["otsl"] = [t.to(device) for t in batch["otsl"]]
    return out


def _run(kind: str, dataset: TableDataset, model_cfg: ModelConfig, optim_cfg: OptimConfig,
         out_dir, epochs: int, scheduled: bool, resume: Optional[str], device: str,
         max_steps: Optional[int], on_step: Optional[Callable[[int, float], None]]) -> TrainState:
    if len(dataset) == 0:
        raise ValueError("training corpus has no usable records")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(optim_cfg.seed)
    model = (SplitModel if kind == "split" else MergeModel)(model_cfg).to(device)
    optimizer = make_optimizer(model, optim_cfg)
    steps_per_epoch = math.ceil(len(dataset) / optim_cfg.batch_size)
    state = TrainState(kind, total_steps=steps_per_epoch * epochs, seed=optim_cfg.seed)

    if resume is not None:
        ckpt = read_checkpoint(resolve_checkpoint(resume))
        if ckpt["kind"] != kind:
            raise ValueError(f"cannot resume {kind} training from a {ckpt['kind']} checkpoint")
        model.load_state_dict(ckpt["model"])
        optimizer.load_state_dict(ckpt["optimizer"])
        torch.set_rng_state(ckpt["torch_rng"])
        state = TrainState(**ckpt["state"])
        state.total_steps = steps_per_epoch * epochs

    step_fn: StepFn = _split_step if kind == "split" else _merge_step
    last_good = state.checkpoint
    model.train()
    while state.epoch < epochs:
        counts = LineCounts() if kind == "split" else TokenCounts()
        losses = []
        started = time.perf_counter()
        # a run stopped by max_steps may resume partway through an epoch
        done = state.step - state.epoch * steps_per_epoch
        stopped = False
        for batch in batches(dataset, optim_cfg.batch_size, optim_cfg.seed, state.epoch, skip=done):
            if max_steps is not None and state.step >= max_steps:
                stopped = True
                break
            if scheduled:
                lr = poly_lr(min(state.step, state.total_steps), state.total_steps, optim_cfg.lr,
                             optim_cfg.poly_power)
                for group in optimizer.param_groups:
                    group["lr"] = lr
            loss = step_fn(model, _to_device(batch, device), counts)
            if not torch.isfinite(loss):
                raise DivergenceError(f"{kind} loss became {loss.item()} at step {state.step}", last_good)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            try:
                clip_gradients(model.parameters(), optim_cfg.clip_norm)
            except DivergenceError as exc:
                raise DivergenceError(str(exc), last_good) from None
            optimizer.step()
            state.step += 1
            losses.append(loss.item())
            if on_step is not None:
                on_step(state.step, losses[-1])
        if stopped:
            if losses:
                ckpt_path = out_dir / f"step_{state.step}.ckpt"
                state.checkpoint = ckpt_path.name
                save_checkpoint(ckpt_path, model, optimizer, state, optim_cfg)
                _write_manifest(out_dir, state, model_cfg, optim_cfg)
            break
        if not losses:
            break
        state.epoch += 1
        record = {"epoch": state.epoch, "step": state.step, "loss": float(np.mean(losses)),
                  "seconds": time.perf_counter() - started, **counts.summary()}
        state.history.append(record)
        logger.info("%s epoch %d: %s", kind, state.epoch,
                    ", ".join(f"{k}={v:.4g}" for k, v in record.items() if isinstance(v, float)))
        ckpt_path = out_dir / f"epoch_{state.epoch}.ckpt"
        state.checkpoint = ckpt_path.name
        save_checkpoint(ckpt_path, model, optimizer, state, optim_cfg)
        _write_manifest(out_dir, state, model_cfg, optim_cfg)
        last_good = str(ckpt_path)
    return state


def train_split(dataset: TableDataset, model_cfg: ModelConfig, optim_cfg: OptimConfig, out_dir,
                epochs: Optional[int] = None, resume: Optional[str] = None, device: str = "cpu",
                max_steps: Optional[int] = None,
                on_step: Optional[Callable[[int, float], None]] = None) -> TrainState:
    """Split model: AdamW, constant lr unless ``split_schedule == "poly"``."""
    return _run("split", dataset, model_cfg, optim_cfg, out_dir, epochs or optim_cfg.epochs_split,
                optim_cfg.split_schedule == "poly", resume, device, max_steps, on_step)


def train_merge(dataset: TableDataset, model_cfg: ModelConfig, optim_cfg: OptimConfig, out_dir,
                epochs: Optional[int] = None, resume: Optional[str] = None, device: str = "cpu",
                max_steps: Optional[int] = None,
                on_step: Optional[Callable[[int, float], None]] = None) -> TrainState:
    """Merge model on ground-truth grids with poly lr decay."""
    return _run("merge", dataset, model_cfg, optim_cfg, out_dir, epochs or optim_cfg.epochs_merge,
                True, resume, device, max_steps, on_step)
