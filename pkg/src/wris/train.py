"""Training loops for both steps, with per-epoch checkpoints and exact resume."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import load_checkpoint, pack_training_state, save_checkpoint, unpack_training_state
from .config import RunConfig, from_dict
from .data import (
    VOCAB_FILE,
    AnnotationRecord,
    ExpressionIndex,
    ImageStore,
    TrainBatch,
    count_training_pairs,
    iterate_training_batches,
    load_dataset,
)
from .encoders import Tokenizer
from .model import ResponseModel, step1_loss

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]


def make_optimizer(params, config: RunConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)


def poly_lr(base_lr: float, step: int, total_steps: int, power: float) -> float:
    return base_lr * (1.0 - min(step, total_steps) / max(total_steps, 1)) ** power


def _set_lr(opt: torch.optim.Optimizer, config: RunConfig, step: int, total: int) -> None:
    lr = config.lr if config.lr_schedule == "constant" else poly_lr(config.lr, step, total, config.poly_power)
    for g in opt.param_groups:
        g["lr"] = lr


def tokenizer_for(root: str | Path, records: Sequence[AnnotationRecord]) -> Tokenizer:
    vocab = Path(root) / VOCAB_FILE
    if vocab.exists():
        return Tokenizer.load(vocab)
    return Tokenizer.from_texts(t for r in records for t in r.expressions)


def _steps_per_epoch(n_items: int, batch: int) -> int:
    return math.ceil(n_items / batch)


def train_step1(
    config: RunConfig,
    data_root: str | Path,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    records: Sequence[AnnotationRecord] | None = None,
    stop_after_epoch: int | None = None,
) -> tuple[ResponseModel, History]:
    """Train the response model; writes ``step1_epoch{e}.ckpt`` and ``step1.ckpt`` when ``out_dir`` is set."""
    config.validate()
    torch.manual_seed(config.seed)
    if records is None:
        records = load_dataset(data_root, split="train")
    if not records:
        raise TrainingError("no training records")
    index = ExpressionIndex(records)
    store = ImageStore(data_root)
    tokenizer = tokenizer_for(data_root, records)
    model = ResponseModel(config, tokenizer)
    opt = make_optimizer(model.parameters(), config)
    history = History()
    start_epoch = 0
    if resume is not None:
        start_epoch, history = _restore(resume, model, opt, config, "step1")
    total = config.epochs * _steps_per_epoch(count_training_pairs(records), config.batch)
    step = start_epoch * _steps_per_epoch(count_training_pairs(records), config.batch)
    last = config.epochs if stop_after_epoch is None else min(config.epochs, stop_after_epoch)
    for epoch in range(start_epoch, last):
        model.train()
        totals = np.zeros(3)
        n_batches = 0
        for batch in iterate_training_batches(records, store, config.batch, config.N, config.K, config.seed, epoch, index):
            _set_lr(opt, config, step, total)
            loss, l_cls, l_cal = step1_loss(model, batch, return_parts=True)
            if not torch.isfinite(loss):
                _dump_nan(out_dir, "step1", epoch, batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            totals += [loss.item(), l_cls.item(), l_cal.item()]
            n_batches += 1
        mean = totals / max(n_batches, 1)
        entry = {"epoch": epoch, "loss": mean[0], "l_cls": mean[1], "l_cal": mean[2]}
        history.epochs.append(entry)
        logger.info("step1 epoch %d: loss %.4f (cls %.4f, cal %.4f)", epoch, *mean)
        if out_dir is not None:
            _save(Path(out_dir) / f"step1_epoch{epoch}.ckpt", model, opt, config, "step1", epoch, history, tokenizer)
    if out_dir is not None:
        _save(Path(out_dir) / "step1.ckpt", model, None, config, "step1", last - 1, history, tokenizer)
    return model, history


def _dump_nan(out_dir, kind: str, epoch: int, batch) -> None:
    ids = batch.ids
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / f"{kind}_nan_dump.json").write_text(json.dumps({"epoch": epoch, "batch_ids": ids}))
    raise TrainingError(f"non-finite {kind} loss at epoch {epoch}; batch ids: {ids}")


def _save(path, model, opt, config, kind, epoch, history, tokenizer) -> None:
    extra = {"epoch": epoch, "history": history.epochs, "vocab": tokenizer.itos}
    save_checkpoint(path, pack_training_state(model, opt), config.to_dict(), kind, extra)


def _restore(path, model, opt, config: RunConfig, kind: str) -> tuple[int, History]:
    tensors, header = load_checkpoint(path)
    if header["kind"] != kind:
        raise TrainingError(f"{path} is a {header['kind']} checkpoint, expected {kind}")
    if header["config"] != config.to_dict():
        raise TrainingError("resume config differs from the checkpoint snapshot")
    unpack_training_state(tensors, model, opt)
    extra = header["extra"]
    return extra["epoch"] + 1, History(list(extra["history"]))


def load_step1(path: str | Path) -> ResponseModel:
    tensors, header = load_checkpoint(path)
    if header["kind"] != "step1":
        raise TrainingError(f"{path} is not a Step-1 checkpoint")
    config = from_dict(header["config"])
    tokenizer = Tokenizer(w for w in header["extra"]["vocab"][2:])
    model = ResponseModel(config, tokenizer)
    unpack_training_state(tensors, model, None)
    model.eval()
    return model


# ------------------------------------------------------------------ step 2


@dataclass
class SegItem:
    image_id: str
    object_id: str
    image: torch.Tensor
    text: str
    target: torch.Tensor  # (H, W) bool pseudo mask


def load_pseudo_targets(
    pseudo_dir: str | Path, records: Sequence[AnnotationRecord]
) -> dict[tuple[str, str], torch.Tensor]:
    """Non-degenerate pseudo masks keyed by (image_id, object_id)."""
    from .pseudo_labels import pseudo_mask_path, read_pseudo_index
    from PIL import Image

    wanted = {(r.image_id, r.object_id) for r in records}
    targets = {}
    for entry in read_pseudo_index(pseudo_dir):
        key = (entry["image_id"], entry["object_id"])
        if entry["degenerate"] or key not in wanted:
            continue
        arr = np.array(Image.open(pseudo_mask_path(pseudo_dir, *key)).convert("1"), dtype=bool)
        targets[key] = torch.from_numpy(arr)
    return targets


def iterate_segmentation_batches(records, store, targets, batch_size: int, seed: int, epoch: int):
    rng = np.random.default_rng([seed, epoch, 2])
    pairs = [(rec, t) for rec in records if (rec.image_id, rec.object_id) in targets for t in rec.expressions]
    order = rng.permutation(len(pairs))
    for start in range(0, len(order), batch_size):
        chunk = [pairs[i] for i in order[start : start + batch_size]]
        yield [SegItem(r.image_id, r.object_id, store.get(r), t, targets[(r.image_id, r.object_id)]) for r, t in chunk]


def train_step2(
    config: RunConfig,
    data_root: str | Path,
    pseudo_dir: str | Path,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    records: Sequence[AnnotationRecord] | None = None,
    stop_after_epoch: int | None = None,
):
    """Train the segmentor on pseudo labels with cross-entropy; same optimiser settings as Step-1."""
    from .segmentor import SegmentationModel, ce_loss

    config.validate()
    torch.manual_seed(config.seed)
    if records is None:
        records = load_dataset(data_root, split="train")
    targets = load_pseudo_targets(pseudo_dir, records)
    if not targets:
        raise TrainingError("no usable (non-degenerate) pseudo labels")
    store = ImageStore(data_root)
    tokenizer = tokenizer_for(data_root, records)
    model = SegmentationModel(config, tokenizer)
    opt = make_optimizer(model.parameters(), config)
    history = History()
    start_epoch = 0
    if resume is not None:
        start_epoch, history = _restore(resume, model, opt, config, "step2")
    n_pairs = sum(len(r.expressions) for r in records if (r.image_id, r.object_id) in targets)
    per_epoch = _steps_per_epoch(n_pairs, config.batch)
    total, step = config.epochs * per_epoch, start_epoch * per_epoch
    last = config.epochs if stop_after_epoch is None else min(config.epochs, stop_after_epoch)
    for epoch in range(start_epoch, last):
        model.train()
        losses = []
        for items in iterate_segmentation_batches(records, store, targets, config.batch, config.seed, epoch):
            _set_lr(opt, config, step, total)
            images = torch.stack([it.image for it in items])
            target = torch.stack([it.target for it in items])
            loss = ce_loss(model(images, [it.text for it in items]), target)
            if not torch.isfinite(loss):
                _dump_nan(out_dir, "step2", epoch, _IdBatch([f"{it.image_id}/{it.object_id}" for it in items]))
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            losses.append(loss.item())
        entry = {"epoch": epoch, "loss": float(np.mean(losses))}
        history.epochs.append(entry)
        logger.info("step2 epoch %d: loss %.4f", epoch, entry["loss"])
        if out_dir is not None:
            _save(Path(out_dir) / f"step2_epoch{epoch}.ckpt", model, opt, config, "step2", epoch, history, tokenizer)
    if out_dir is not None:
        _save(Path(out_dir) / "step2.ckpt", model, None, config, "step2", last - 1, history, tokenizer)
    return model, history


@dataclass
class _IdBatch:
    ids: list[str]


def load_step2(path: str | Path):
    from .segmentor import SegmentationModel

    tensors, header = load_checkpoint(path)
    if header["kind"] != "step2":
        raise TrainingError(f"{path} is not a Step-2 checkpoint")
    config = from_dict(header["config"])
    model = SegmentationModel(config, Tokenizer(header["extra"]["vocab"][2:]))
    unpack_training_state(tensors, model, None)
    model.eval()
    return model
