"""Text-to-image response maps, image-level scores and the classification loss."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

Psi = Callable[[torch.Tensor], torch.Tensor]


class LogitScale(nn.Module):
    """Learnable log-temperature, initialised to ln(1/tau) and clamped at ln(max)."""

    def __init__(self, init_tau: float = 0.07, max_scale: float = 100.0):
        super().__init__()
        self.log_scale = nn.Parameter(torch.tensor(math.log(1.0 / init_tau)))
        self.max_log = math.log(max_scale)

    def forward(self) -> torch.Tensor:
        return self.log_scale.clamp(max=self.max_log)


def response(v_hat: torch.Tensor, l_hat: torch.Tensor, log_scale: torch.Tensor | float) -> torch.Tensor:
    """R[b, i, j] = exp(log_scale) * <v_hat[b, j, i], l_hat[b, j]>.

    ``v_hat`` is either (B, P, C), shared by all queries, or (B, J, P, C) with
    one prompted grid per query. ``l_hat`` is (B, J, C). Returns (B, P, J).
    """
    if v_hat.shape[-1] != l_hat.shape[-1]:
        raise ValueError(f"channel mismatch: {v_hat.shape[-1]} vs {l_hat.shape[-1]}")
    scale = torch.exp(torch.as_tensor(log_scale, dtype=v_hat.dtype))
    if v_hat.dim() == 3:
        dots = torch.einsum("bpc,bjc->bpj", v_hat, l_hat)
    else:
        dots = torch.einsum("bjpc,bjc->bpj", v_hat, l_hat)
    return scale * dots


def aggregate(r: torch.Tensor, psi: Psi | None = None) -> torch.Tensor:
    """y_j = max_i R[i, j] + mean_i R[i, j] + psi(R[:, j]); pixels on axis -2."""
    y = r.amax(dim=-2) + r.mean(dim=-2)
    if psi is not None:
        y = y + psi(r)
    return y


def classification_loss(y: torch.Tensor, z: torch.Tensor, focal_gamma: float = 0.0) -> torch.Tensor:
    """Binary cross-entropy over the 1+N query logits, averaged over queries (and batch).

    Uses log sigma(y) = -softplus(-y) and log(1 - sigma(y)) = -softplus(y).
    ``focal_gamma > 0`` multiplies each term by (1 - p_t)^gamma.
    """
    if y.shape != z.shape:
        raise ValueError(f"logits {tuple(y.shape)} and labels {tuple(z.shape)} differ in shape")
    z = z.to(y.dtype)
    per_query = z * F.softplus(-y) + (1 - z) * F.softplus(y)
    if focal_gamma > 0:
        p_t = torch.exp(-per_query)
        per_query = (1 - p_t) ** focal_gamma * per_query
    return per_query.mean()


def check_labels(z: torch.Tensor) -> None:
    """Every row of ``z`` must hold exactly one positive."""
    positives = (z == 1).sum(dim=-1)
    if not bool((positives == 1).all()):
        raise ValueError("each query batch needs exactly one positive label")


# ------------------------------------------------------------------- sampling


def _token_set(text: str) -> frozenset[str]:
    return frozenset(text.lower().split())


def overlaps(candidate: str, anchors: Sequence[str]) -> bool:
    """True when ``candidate`` refines or generalises one of ``anchors``.

    "red circle" vs "red circle on the left" overlap; such a pair can describe
    the same object, so it never serves as a negative.
    """
    c = _token_set(candidate)
    return any(c <= a or a <= c for a in map(_token_set, anchors))


def eligible_negatives(index, anchor_image_id: str, exclude_overlapping: bool = True) -> list[str]:
    key = (anchor_image_id, exclude_overlapping)
    cached = index.pool_cache.get(key)
    if cached is not None:
        return cached
    anchors = index.image_texts(anchor_image_id)
    pool = [e.text for e in index.entries if e.image_id != anchor_image_id]
    if exclude_overlapping:
        pool = [t for t in pool if not overlaps(t, anchors)]
    index.pool_cache[key] = pool
    return pool


def sample_negatives(
    index,
    anchor_image_id: str,
    n: int,
    rng: np.random.Generator,
    exclude_overlapping: bool = True,
) -> tuple[list[str], bool]:
    """Draw ``n`` expressions annotated to other images.

    Returns the expressions and a flag that is True when the eligible pool was
    smaller than ``n`` and the draw fell back to sampling with replacement.
    """
    if n == 0:
        return [], False
    if len(index.image_ids) < 2:
        raise ValueError("negative sampling needs expressions from at least two images")
    pool = eligible_negatives(index, anchor_image_id, exclude_overlapping)
    if not pool:
        raise ValueError(f"no eligible negative expressions for image {anchor_image_id!r}")
    replace = len(pool) < n
    picks = rng.choice(len(pool), size=n, replace=replace)
    return [pool[i] for i in picks], replace
