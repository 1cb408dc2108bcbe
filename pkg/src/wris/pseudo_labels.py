"""Positive response map selection and response-map -> pseudo mask conversion."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from .calibration import masked_embed, rescale
from .data import save_mask
from .encoders import EncoderBundle, TokenBatch

INDEX_FILE = "index.jsonl"


@dataclass
class PseudoLabel:
    image_id: str
    object_id: str
    mask: np.ndarray  # (H_I, W_I) bool
    winning_index: int
    cumulative_scores: list[float]
    threshold_used: float
    degenerate: bool

    def index_record(self) -> dict:
        return {
            "image_id": self.image_id,
            "object_id": self.object_id,
            "winning_index": self.winning_index,
            "threshold": self.threshold_used,
            "degenerate": self.degenerate,
        }


@torch.no_grad()
def cumulative_scores(
    image: torch.Tensor,
    maps: torch.Tensor,
    tokens: TokenBatch,
    bundle: EncoderBundle,
    eps: float = 1e-6,
    mode: str = "affine",
) -> np.ndarray:
    """Cumulative score of each map: rescaled similarity of the image masked by
    map t to every expression m, summed over m, for t = 0..M-1.

    ``image`` is (3, H, W); ``maps`` is (M, h, w); ``tokens`` holds the M expressions.
    """
    m = maps.shape[0]
    if len(tokens) != m:
        raise ValueError(f"{m} maps but {len(tokens)} expressions")
    region, _ = masked_embed(image.unsqueeze(0).expand(m, -1, -1, -1), maps, bundle, frozen=True)
    text = bundle.text_embed(tokens)
    s_raw = region @ text.T  # (t, m), both sides unit-norm
    return rescale(s_raw, eps, mode).sum(dim=1).double().numpy()


def argmax_first(scores: Sequence[float]) -> int:
    """Index of the maximum; the lowest index wins ties."""
    return int(np.argmax(np.asarray(scores)))


def select_map(scores: Sequence[float], maps: Sequence) -> tuple[int, object]:
    idx = argmax_first(scores)
    return idx, maps[idx]


def to_pseudo_mask(
    r: np.ndarray | torch.Tensor,
    threshold: float,
    min_component_px: int,
    image_size: tuple[int, int],
) -> tuple[np.ndarray, bool]:
    """Normalize to [0, 1], up-sample, threshold, drop small components.

    Returns (mask, degenerate). Constant maps and maps whose mask ends up empty
    are degenerate.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    r = torch.as_tensor(np.asarray(r, dtype=np.float64))
    lo, hi = r.min(), r.max()
    if not bool(hi > lo):
        return np.zeros(image_size, dtype=bool), True
    norm = (r - lo) / (hi - lo)
    up = torch.nn.functional.interpolate(norm[None, None], size=tuple(image_size), mode="bilinear", align_corners=False)
    mask = up[0, 0].numpy() >= threshold
    mask = remove_small_components(mask, min_component_px)
    return mask, not mask.any()


def remove_small_components(mask: np.ndarray, min_px: int) -> np.ndarray:
    """Drop 4-connected components with fewer than ``min_px`` pixels."""
    if min_px <= 1 or not mask.any():
        return mask
    labels, n = ndimage.label(mask)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    keep = sizes >= min_px
    keep[0] = False
    return keep[labels]


def write_pseudo_labels(out_dir: str | Path, labels: Sequence[PseudoLabel]) -> None:
    """1-bit PNG per label plus ``index.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / INDEX_FILE).open("w") as fh:
        for lab in labels:
            save_mask(out / f"{lab.image_id}_{lab.object_id}.png", lab.mask)
            fh.write(json.dumps(lab.index_record(), sort_keys=True) + "\n")


def read_pseudo_index(pseudo_dir: str | Path) -> list[dict]:
    path = Path(pseudo_dir) / INDEX_FILE
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def pseudo_mask_path(pseudo_dir: str | Path, image_id: str, object_id: str) -> Path:
    return Path(pseudo_dir) / f"{image_id}_{object_id}.png"
