"""End-to-end helpers shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import AnnotationRecord, ExpressionIndex, ImageStore, load_mask
from .metrics import aggregate_results, evaluate_sample, hit_rate, point_m
from .model import ResponseModel
from .pseudo_labels import PseudoLabel, cumulative_scores, select_map, to_pseudo_mask
from .response import sample_negatives

logger = logging.getLogger(__name__)


@dataclass
class Step1Eval:
    ranking_accuracy: float
    point_m: float
    count: int


@torch.no_grad()
def evaluate_step1(
    model: ResponseModel,
    data_root: str | Path,
    records: Sequence[AnnotationRecord],
    n_negatives: int = 7,
    seed: int = 1234,
    batch: int = 32,
) -> Step1Eval:
    """Held-out ranking accuracy and PointM of the positive response map.

    Every (object, expression) pair is a query; a ranking hit means the
    positive's score beats all ``n_negatives`` negatives drawn from other images.
    """
    model.eval()
    index = ExpressionIndex(records)
    store = ImageStore(data_root)
    rng = np.random.default_rng(seed)
    pairs = [(rec, text) for rec in records for text in rec.expressions]
    ranks, points = [], []
    for start in range(0, len(pairs), batch):
        chunk = pairs[start : start + batch]
        images = torch.stack([store.get(rec) for rec, _ in chunk])
        texts = []
        for rec, text in chunk:
            negs, _ = sample_negatives(index, rec.image_id, n_negatives, rng)
            texts += [text, *negs]
        out = model(images, model.tokens(texts))
        y = out.scores
        ranks += (y[:, 0:1] > y[:, 1:]).all(dim=1).tolist() if n_negatives else [True] * len(chunk)
        maps = out.maps()[:, 0].double().numpy()
        for (rec, _), m in zip(chunk, maps):
            points.append(point_m(m, load_mask(data_root, rec)))
    return Step1Eval(hit_rate(ranks), hit_rate(points), len(pairs))


@torch.no_grad()
def pseudo_label_for(
    model: ResponseModel,
    image: torch.Tensor,
    rec: AnnotationRecord,
    threshold: float,
    min_component_px: int,
    prms: bool = True,
    rng: np.random.Generator | None = None,
) -> PseudoLabel:
    """Pseudo label for one object from all of its expressions.

    With ``prms`` the map with the highest cumulative score wins; otherwise a
    uniformly random map is taken (baseline used to measure the selection gain).
    """
    texts = list(rec.expressions)
    maps = model.response_maps(image.unsqueeze(0).expand(len(texts), -1, -1, -1), texts)
    if prms:
        scores = cumulative_scores(image, maps, model.tokens(texts), model.bundle, model.config.epsilon_clamp, model.config.rescale_mode)
        idx, chosen = select_map(scores, maps)
    else:
        rng = rng or np.random.default_rng()
        scores = np.zeros(len(texts))
        idx = int(rng.integers(len(texts)))
        chosen = maps[idx]
    mask, degenerate = to_pseudo_mask(chosen.double().numpy(), threshold, min_component_px, tuple(image.shape[-2:]))
    return PseudoLabel(rec.image_id, rec.object_id, mask, idx, [float(s) for s in scores], threshold, degenerate)


def generate_pseudo_labels(
    model: ResponseModel,
    data_root: str | Path,
    records: Sequence[AnnotationRecord],
    threshold: float | None = None,
    min_component_px: int | None = None,
    prms: bool = True,
    seed: int = 0,
) -> list[PseudoLabel]:
    cfg = model.config
    threshold = cfg.threshold if threshold is None else threshold
    min_px = cfg.min_component_px if min_component_px is None else min_component_px
    store = ImageStore(data_root)
    rng = np.random.default_rng(seed)
    model.eval()
    return [pseudo_label_for(model, store.get(rec), rec, threshold, min_px, prms, rng) for rec in records]


def pseudo_label_iou(data_root: str | Path, records: Sequence[AnnotationRecord], labels: Sequence[PseudoLabel]) -> float:
    """Mean IoU of pseudo masks against GT (evaluation only)."""
    by_key = {(r.image_id, r.object_id): r for r in records}
    results = [
        evaluate_sample(f"{p.image_id}/{p.object_id}", p.mask, load_mask(data_root, by_key[(p.image_id, p.object_id)]), by_key[(p.image_id, p.object_id)].gt_box)
        for p in labels
    ]
    return aggregate_results(results).mean_iou


@torch.no_grad()
def evaluate_segmentor(model, data_root: str | Path, records: Sequence[AnnotationRecord], batch: int = 32):
    """Metrics of Step-2 predictions against GT, one sample per (object, expression)."""
    from .segmentor import predict_mask, target_probability_map

    model.eval()
    store = ImageStore(data_root)
    pairs = [(rec, text) for rec in records for text in rec.expressions]
    results = []
    for start in range(0, len(pairs), batch):
        chunk = pairs[start : start + batch]
        logits = model(torch.stack([store.get(r) for r, _ in chunk]), [t for _, t in chunk])
        masks = predict_mask(logits).numpy()
        probs = target_probability_map(logits)
        for (rec, text), m, p in zip(chunk, masks, probs):
            results.append(evaluate_sample(f"{rec.image_id}/{rec.object_id}/{text}", m, load_mask(data_root, rec), rec.gt_box, p))
    return aggregate_results(results)


@torch.no_grad()
def evaluate_response_masks(model: ResponseModel, data_root: str | Path, records: Sequence[AnnotationRecord], batch: int = 32):
    """Metrics of thresholded Step-1 response maps, one sample per (object, expression)."""
    cfg = model.config
    model.eval()
    store = ImageStore(data_root)
    pairs = [(rec, text) for rec in records for text in rec.expressions]
    results = []
    for start in range(0, len(pairs), batch):
        chunk = pairs[start : start + batch]
        images = torch.stack([store.get(r) for r, _ in chunk])
        maps = model.response_maps(images, [t for _, t in chunk]).double().numpy()
        for (rec, text), img, r in zip(chunk, images, maps):
            mask, _ = to_pseudo_mask(r, cfg.threshold, cfg.min_component_px, tuple(img.shape[-2:]))
            results.append(evaluate_sample(f"{rec.image_id}/{rec.object_id}/{text}", mask, load_mask(data_root, rec), rec.gt_box, r))
    return aggregate_results(results)


def evaluate_pseudo_dir(pseudo_dir: str | Path, data_root: str | Path, records: Sequence[AnnotationRecord]):
    """Metrics of exported pseudo masks (one per object) against GT."""
    from PIL import Image

    from .pseudo_labels import pseudo_mask_path, read_pseudo_index

    by_key = {(r.image_id, r.object_id): r for r in records}
    results = []
    for entry in read_pseudo_index(pseudo_dir):
        rec = by_key.get((entry["image_id"], entry["object_id"]))
        if rec is None:
            continue
        mask = np.array(Image.open(pseudo_mask_path(pseudo_dir, rec.image_id, rec.object_id)).convert("1"), dtype=bool)
        results.append(evaluate_sample(f"{rec.image_id}/{rec.object_id}", mask, load_mask(data_root, rec), rec.gt_box))
    return aggregate_results(results)
