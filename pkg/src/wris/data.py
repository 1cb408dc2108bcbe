"""Annotation records, the on-disk dataset format and the synthetic shapes generator.

Layout of a dataset root::

    annotations.jsonl     one object per line: image_id, image, object_id,
                          expressions, mask, bbox [x_min, y_min, x_max, y_max], split
    vocab.txt             optional word list for the toy tokenizer
    images/, masks/       referenced files (paths relative to the root)

Training code only ever sees :class:`TrainItem` objects, which carry no mask or
box; ground truth is read lazily and only by evaluation.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from .calibration import SameImageNegatives, sample_same_image_negatives
from .response import sample_negatives

logger = logging.getLogger(__name__)

ANNOTATION_FILE = "annotations.jsonl"
VOCAB_FILE = "vocab.txt"


class DatasetError(ValueError):
    pass


@dataclass
class AnnotationRecord:
    image_id: str
    image_path: str
    object_id: str
    expressions: list[str]
    gt_mask_path: str | None = None
    gt_box: tuple[int, int, int, int] | None = None
    split: str = "train"

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "image": self.image_path,
            "object_id": self.object_id,
            "expressions": list(self.expressions),
            "mask": self.gt_mask_path,
            "bbox": list(self.gt_box) if self.gt_box is not None else None,
            "split": self.split,
        }


def _parse_record(obj: dict, lineno: int) -> AnnotationRecord:
    if not isinstance(obj, dict):
        raise DatasetError(f"line {lineno}: record is not an object")
    for key in ("image_id", "image", "object_id", "expressions"):
        if key not in obj:
            raise DatasetError(f"line {lineno}: missing key {key!r}")
    exprs = obj["expressions"]
    if not isinstance(exprs, list) or not exprs or not all(isinstance(e, str) and e.strip() for e in exprs):
        raise DatasetError(f"line {lineno}: record needs at least one non-empty expression")
    bbox = obj.get("bbox")
    if bbox is not None:
        if len(bbox) != 4 or bbox[0] > bbox[2] or bbox[1] > bbox[3]:
            raise DatasetError(f"line {lineno}: bad bbox {bbox!r}")
        bbox = tuple(int(b) for b in bbox)
    return AnnotationRecord(
        image_id=str(obj["image_id"]),
        image_path=str(obj["image"]),
        object_id=str(obj["object_id"]),
        expressions=list(exprs),
        gt_mask_path=obj.get("mask"),
        gt_box=bbox,
        split=str(obj.get("split", "train")),
    )


def load_dataset(root: str | Path, split: str | None = None, check_files: bool = True) -> list[AnnotationRecord]:
    """Read and validate ``annotations.jsonl``; masks are not opened here."""
    root = Path(root)
    path = root / ANNOTATION_FILE
    if not path.exists():
        raise DatasetError(f"{path} does not exist")
    records = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            rec = _parse_record(obj, lineno)
            if check_files and not (root / rec.image_path).exists():
                raise DatasetError(f"line {lineno}: missing image file {rec.image_path}")
            if split is None or rec.split == split:
                records.append(rec)
    if not records:
        logger.warning("no records in %s (split=%s)", path, split)
    return records


def write_dataset(root: str | Path, records: Sequence[AnnotationRecord]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with (root / ANNOTATION_FILE).open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def load_image(root: str | Path, rec_or_path) -> torch.Tensor:
    """(3, H, W) float tensor in [0, 1]."""
    rel = rec_or_path.image_path if isinstance(rec_or_path, AnnotationRecord) else rec_or_path
    arr = np.array(Image.open(Path(root) / rel).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def load_mask(root: str | Path, rec: AnnotationRecord) -> np.ndarray:
    if rec.gt_mask_path is None:
        raise DatasetError(f"record {rec.image_id}/{rec.object_id} has no mask")
    path = Path(root) / rec.gt_mask_path
    if not path.exists():
        raise DatasetError(f"missing mask file {path}")
    return np.asarray(Image.open(path).convert("1"), dtype=bool)


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(mask, dtype=bool)).convert("1").save(path, optimize=False)


def rle_decode(counts: Sequence[int], height: int, width: int) -> np.ndarray:
    """Uncompressed COCO-style run-length counts (column-major, starting with zeros)."""
    flat = np.zeros(height * width, dtype=bool)
    pos, value = 0, False
    for c in counts:
        flat[pos : pos + c] = value
        pos += c
        value = not value
    if pos != height * width:
        raise DatasetError(f"run lengths cover {pos} pixels, expected {height * width}")
    return flat.reshape(width, height).T


def rle_encode(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=bool).T.reshape(-1)
    counts, value, run = [], False, 0
    for px in flat:
        if px == value:
            run += 1
        else:
            counts.append(run)
            value, run = px, 1
    counts.append(run)
    return counts


def import_refer_annotations(refs: Sequence[dict], *args, **kwargs) -> list[AnnotationRecord]:
    """Stub adapter for REFER-style benchmark annotations (not shipped).

    Field mapping: ``image_id`` -> image_id, ``file_name`` -> image,
    ``ann_id`` -> object_id, ``sentences[*].sent`` -> expressions,
    COCO ``segmentation`` (RLE, decode with :func:`rle_decode`) -> mask,
    COCO ``bbox`` [x, y, w, h] -> [x, y, x + w - 1, y + h - 1], ``split`` -> split.
    """
    raise NotImplementedError("benchmark dataset conversion is not part of this package")


# ------------------------------------------------------------------ index


@dataclass(frozen=True)
class Expression:
    image_id: str
    object_id: str
    text: str


class ExpressionIndex:
    """Expressions keyed by image and object, used by the negative samplers."""

    def __init__(self, records: Sequence[AnnotationRecord]):
        self.entries: list[Expression] = []
        self.by_image: dict[str, list[Expression]] = {}
        for rec in records:
            for text in rec.expressions:
                e = Expression(rec.image_id, rec.object_id, text)
                self.entries.append(e)
                self.by_image.setdefault(rec.image_id, []).append(e)
        self.image_ids = sorted(self.by_image)
        self.pool_cache: dict = {}

    def image_texts(self, image_id: str) -> list[str]:
        return [e.text for e in self.by_image.get(image_id, [])]


# --------------------------------------------------------------- synthetic

COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "purple": (0.6, 0.15, 0.8),
}
SHAPES = ("circle", "square", "triangle")


@dataclass
class SyntheticSceneSpec:
    canvas: int = 64
    min_objects: int = 1
    max_objects: int = 3
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = tuple(COLORS)
    min_size: int = 14
    max_size: int = 24
    grid: int = 4  # placement jitter cells per axis
    positional: bool = True
    max_retries: int = 50
    background: float = 0.45
    seed: int = 0

    def validate(self) -> "SyntheticSceneSpec":
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise DatasetError(f"shapes must be drawn from {SHAPES}")
        if not self.colors or any(c not in COLORS for c in self.colors):
            raise DatasetError(f"colors must be drawn from {tuple(COLORS)}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise DatasetError("need 1 <= min_objects <= max_objects")
        if self.max_objects > len(self.shapes) * len(self.colors):
            raise DatasetError("more objects than distinct color/shape combinations")
        if not 2 <= self.min_size <= self.max_size < self.canvas:
            raise DatasetError("need 2 <= min_size <= max_size < canvas")
        return self


def rasterize(shape: str, cx: float, cy: float, size: float, canvas: int) -> np.ndarray:
    """Boolean mask sampled at pixel centres; ``size`` is diameter / side / base."""
    ys, xs = np.mgrid[0:canvas, 0:canvas] + 0.5
    r = size / 2
    if shape == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r**2
    if shape == "square":
        return (np.abs(xs - cx) <= r) & (np.abs(ys - cy) <= r)
    if shape == "triangle":
        # apex up, base at the bottom, height == base
        top, bottom = cy - r, cy + r
        t = (ys - top) / size  # 0 at apex, 1 at base
        return (ys >= top) & (ys <= bottom) & (np.abs(xs - cx) <= t * r)
    raise DatasetError(f"unknown shape {shape!r}")


def shape_area(shape: str, size: float) -> float:
    return {"circle": math.pi * (size / 2) ** 2, "square": size**2, "triangle": size**2 / 2}[shape]


def shape_perimeter(shape: str, size: float) -> float:
    return {"circle": math.pi * size, "square": 4 * size, "triangle": size * (1 + math.sqrt(5))}[shape]


def describe(color: str, shape: str, cx: float, cy: float, canvas: int, positional: bool) -> list[str]:
    base = f"{color} {shape}"
    if not positional:
        return [base]
    horiz = "left" if cx < canvas / 2 else "right"
    vert = "top" if cy < canvas / 2 else "bottom"
    return [base, f"{base} on the {horiz}", f"{base} on the {vert}"]


def _place_scene(spec: SyntheticSceneSpec, rng: np.random.Generator):
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    combos = [(c, s) for c in spec.colors for s in spec.shapes]
    chosen = rng.choice(len(combos), size=n_obj, replace=False)
    objects = []
    occupied = np.zeros((spec.canvas, spec.canvas), dtype=bool)
    for ci in chosen:
        color, shape = combos[ci]
        for _ in range(spec.max_retries):
            size = int(rng.integers(spec.min_size, spec.max_size + 1))
            r = size / 2
            cx = float(rng.uniform(r + 1, spec.canvas - r - 1))
            cy = float(rng.uniform(r + 1, spec.canvas - r - 1))
            mask = rasterize(shape, cx, cy, size, spec.canvas)
            # keep a 2px gap so objects stay separate components
            grown = np.zeros_like(mask)
            ys, xs = np.nonzero(mask)
            grown[max(ys.min() - 2, 0) : ys.max() + 3, max(xs.min() - 2, 0) : xs.max() + 3] = True
            if not (grown & occupied).any():
                occupied |= mask
                objects.append((color, shape, cx, cy, size, mask))
                break
        else:
            return None
    return objects


def _bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def generate_synthetic(
    spec: SyntheticSceneSpec, out_dir: str | Path, splits: dict[str, int]
) -> tuple[list[AnnotationRecord], int]:
    """Render scenes for each split into ``out_dir``.

    Returns (records, skipped_scene_count). Deterministic under ``spec.seed``.
    """
    spec.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    records: list[AnnotationRecord] = []
    skipped = 0
    counter = 0
    for split, n_images in splits.items():
        for _ in range(n_images):
            image_id = f"{counter:05d}"
            counter += 1
            objects = _place_scene(spec, rng)
            if objects is None:
                skipped += 1
                continue
            canvas = np.full((spec.canvas, spec.canvas, 3), spec.background, dtype=np.float32)
            multi = len(objects) > 1
            for k, (color, shape, cx, cy, size, mask) in enumerate(objects):
                canvas[mask] = COLORS[color]
                mask_rel = f"masks/{image_id}_{k}.png"
                save_mask(out / mask_rel, mask)
                records.append(
                    AnnotationRecord(
                        image_id=image_id,
                        image_path=f"images/{image_id}.png",
                        object_id=str(k),
                        expressions=describe(color, shape, cx, cy, spec.canvas, spec.positional and multi),
                        gt_mask_path=mask_rel,
                        gt_box=_bbox(mask),
                        split=split,
                    )
                )
            Image.fromarray((canvas * 255).round().astype(np.uint8)).save(out / f"images/{image_id}.png")
    write_dataset(out, records)
    words = sorted({w for c in spec.colors for w in c.split()} | set(spec.shapes) | {"on", "the", "left", "right", "top", "bottom"})
    (out / VOCAB_FILE).write_text("\n".join(words) + "\n")
    return records, skipped


def dataset_digest(root: str | Path) -> str:
    """SHA-256 over every file under ``root`` (relative path + bytes)."""
    h = hashlib.sha256()
    root = Path(root)
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


# --------------------------------------------------------------- batches


@dataclass
class TrainItem:
    """One training sample; deliberately has no mask or box."""

    image_id: str
    object_id: str
    image: torch.Tensor
    positive: str
    negatives: list[str]
    same_image: SameImageNegatives
    resampled: bool = False


@dataclass
class TrainBatch:
    items: list[TrainItem]

    @property
    def images(self) -> torch.Tensor:
        return torch.stack([it.image for it in self.items])

    @property
    def ids(self) -> list[str]:
        return [f"{it.image_id}/{it.object_id}" for it in self.items]

    def labels(self) -> torch.Tensor:
        z = torch.zeros(len(self.items), 1 + len(self.items[0].negatives))
        z[:, 0] = 1
        return z


class ImageStore:
    """In-memory cache of decoded images (read-only once filled)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._cache: dict[str, torch.Tensor] = {}

    def get(self, rec: AnnotationRecord) -> torch.Tensor:
        img = self._cache.get(rec.image_path)
        if img is None:
            img = load_image(self.root, rec)
            self._cache[rec.image_path] = img
        return img


def iterate_training_batches(
    records: Sequence[AnnotationRecord],
    store: ImageStore,
    batch_size: int,
    n: int,
    k: int,
    seed: int,
    epoch: int,
    index: ExpressionIndex | None = None,
) -> Iterator[TrainBatch]:
    """One epoch of shuffled batches; every annotated expression is one positive.

    The order depends only on (seed, epoch), so resuming at an epoch boundary
    reproduces the same stream.
    """
    index = index or ExpressionIndex(records)
    rng = np.random.default_rng([seed, epoch])
    pairs = [(rec, text) for rec in records for text in rec.expressions]
    order = rng.permutation(len(pairs))
    batch: list[TrainItem] = []
    for i in order:
        rec, positive = pairs[i]
        negatives, resampled = sample_negatives(index, rec.image_id, n, rng)
        same = sample_same_image_negatives(index, rec.image_id, rec.object_id, k, rng)
        batch.append(TrainItem(rec.image_id, rec.object_id, store.get(rec), positive, negatives, same, resampled))
        if len(batch) == batch_size:
            yield TrainBatch(batch)
            batch = []
    if batch:
        yield TrainBatch(batch)


def count_training_pairs(records: Sequence[AnnotationRecord]) -> int:
    return sum(len(r.expressions) for r in records)
