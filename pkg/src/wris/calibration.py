"""Masked-region scoring and the calibration loss.

A positive response map is turned into a soft mask, the masked image is
encoded by the bundle's global visual path and compared to text embeddings.
The scoring pass runs with the encoder parameters frozen, so the loss
back-propagates into the response map only.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .encoders import EncoderBundle, TokenBatch
from .response import eligible_negatives

DEGENERATE_RANGE = 1e-12


@dataclass
class MatchScore:
    s_raw: torch.Tensor  # cosine similarity in [-1, 1]
    s_prob: torch.Tensor  # rescaled into (eps, 1 - eps)
    degenerate: torch.Tensor  # (B,) bool, all-constant response map


@dataclass
class SameImageNegatives:
    queries: list[str]
    supplemented_from_global: int


def minmax_normalize(r: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-map min-max scaling over the last two axes.

    A constant map has no range; it is read as already normalized and clipped
    to [0, 1] (all-ones keeps the image, all-zeros blacks it out) and flagged.
    """
    flat = r.flatten(-2)
    lo = flat.amin(dim=-1, keepdim=True)
    hi = flat.amax(dim=-1, keepdim=True)
    span = hi - lo
    degenerate = (span <= DEGENERATE_RANGE).squeeze(-1)
    out = torch.where(span > DEGENERATE_RANGE, (flat - lo) / span.clamp_min(DEGENERATE_RANGE), flat.clamp(0.0, 1.0))
    return out.view_as(r), degenerate


def upsample(r: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear up-sampling of (B, h, w) maps to (B, *size)."""
    return F.interpolate(r.unsqueeze(1), size=size, mode="bilinear", align_corners=False).squeeze(1)


def rescale(s_raw: torch.Tensor, eps: float = 1e-6, mode: str = "affine", sigmoid_scale: float = 10.0) -> torch.Tensor:
    if mode == "affine":
        s = (s_raw + 1) / 2
    elif mode == "sigmoid":
        s = torch.sigmoid(sigmoid_scale * s_raw)
    else:
        raise ValueError(f"unknown rescale mode {mode!r}")
    return s.clamp(eps, 1 - eps)


@contextmanager
def frozen_parameters(module: torch.nn.Module, enabled: bool = True):
    """Run a block with the module's parameters excluded from autograd.

    Inputs that require grad still receive gradients. Not thread-safe.
    """
    if not enabled:
        yield
        return
    saved = [(p, p.requires_grad) for p in module.parameters()]
    for p, _ in saved:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


def masked_embed(image: torch.Tensor, r_p: torch.Tensor, bundle: EncoderBundle, frozen: bool = True):
    """Global embedding of image * up(minmax(r_p)); image (B, 3, H, W), r_p (B, h, w)."""
    mask, degenerate = minmax_normalize(r_p)
    mask = upsample(mask, tuple(image.shape[-2:]))
    masked = image * mask.unsqueeze(1)
    with frozen_parameters(bundle, frozen):
        return bundle.global_embed(masked), degenerate


def text_scores(
    region: torch.Tensor,
    text: torch.Tensor,
    eps: float = 1e-6,
    mode: str = "affine",
    sigmoid_scale: float = 10.0,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Cosine of region embeddings (B, C) against text embeddings (B, Q, C)."""
    s_raw = F.cosine_similarity(region.unsqueeze(1), text, dim=-1, eps=1e-12)
    return s_raw, rescale(s_raw, eps, mode, sigmoid_scale)


def masked_similarity(
    image: torch.Tensor,
    r_p: torch.Tensor,
    tokens: TokenBatch,
    bundle: EncoderBundle,
    eps: float = 1e-6,
    mode: str = "affine",
    frozen: bool = True,
    sigmoid_scale: float = 10.0,
) -> MatchScore:
    """Score each masked image against its own group of Q expressions.

    ``tokens`` holds B*Q expressions, image-major. Returns (B, Q) scores.
    """
    region, degenerate = masked_embed(image, r_p, bundle, frozen)
    b = image.shape[0]
    with frozen_parameters(bundle, frozen):
        text = bundle.text_embed(tokens).view(b, -1, region.shape[-1])
    s_raw, s_prob = text_scores(region, text, eps, mode, sigmoid_scale)
    return MatchScore(s_raw, s_prob, degenerate)


def calibration_loss_from_scores(
    s_pos: torch.Tensor, s_neg: torch.Tensor, use_pos: bool = True, use_neg: bool = True
) -> torch.Tensor:
    """-(log s_pos + sum_k log(1 - s_neg_k)), averaged over the batch.

    ``s_pos`` is (B,), ``s_neg`` is (B, K). The flags drop either term.
    """
    loss = torch.zeros_like(s_pos)
    if use_pos:
        loss = loss - torch.log(s_pos)
    if use_neg:
        loss = loss - torch.log1p(-s_neg).sum(dim=-1)
    return loss.mean()


def calibration_loss(
    image: torch.Tensor,
    r_p: torch.Tensor,
    tokens: TokenBatch,
    bundle: EncoderBundle,
    eps: float = 1e-6,
    mode: str = "affine",
    frozen: bool = True,
    use_pos: bool = True,
    use_neg: bool = True,
    sigmoid_scale: float = 10.0,
) -> torch.Tensor:
    """Calibration loss; ``tokens`` holds 1+K expressions per image, positive first."""
    score = masked_similarity(image, r_p, tokens, bundle, eps, mode, frozen, sigmoid_scale)
    return calibration_loss_from_scores(score.s_prob[:, 0], score.s_prob[:, 1:], use_pos, use_neg)


def sample_same_image_negatives(
    index,
    anchor_image_id: str,
    anchor_object_id: str,
    k: int,
    rng: np.random.Generator,
) -> SameImageNegatives:
    """Expressions of other objects in the anchor image, topped up from other images."""
    pool = [e.text for e in index.by_image[anchor_image_id] if e.object_id != anchor_object_id]
    if len(pool) >= k:
        picks = rng.choice(len(pool), size=k, replace=False)
        return SameImageNegatives([pool[i] for i in picks], 0)
    missing = k - len(pool)
    queries = [pool[i] for i in rng.permutation(len(pool))]
    global_pool = eligible_negatives(index, anchor_image_id)
    if not global_pool:
        raise ValueError(f"cannot supplement same-image negatives for {anchor_image_id!r}")
    picks = rng.choice(len(global_pool), size=missing, replace=len(global_pool) < missing)
    return SameImageNegatives(queries + [global_pool[i] for i in picks], missing)
