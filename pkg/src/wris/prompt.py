"""Bilateral prompting: cross-modal attention residuals for visual and text features.

Shapes used throughout (batched over B images, J queries per image, P = H*W pixels):

    v       (B, P, C)     projected, normalized visual features
    l       (B, J, C)     projected, normalized query embeddings
    attn_l  (B, J, P)     per query, a distribution over pixels
    attn_v  (B, J, P)     per (query, pixel) weight, see ``attn_v_axis``
    v_prime (B, J, P, C)  text-guided visual residual, one grid per query
    l_prime (B, J, C)     visually enriched text residual

Each (image, query) pair is prompted independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn


class PromptShapeError(ValueError):
    pass


class PromptParameters(nn.Module):
    """Six D x D matrices plus the fixed mixing weights alpha and beta."""

    NAMES = ("w1_v", "w2_v", "w3_v", "w1_l", "w2_l", "w3_l")

    def __init__(
        self,
        dim: int,
        alpha: float = 0.1,
        beta: float = 0.1,
        attn_v_axis: str = "query",
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if attn_v_axis not in ("query", "pixel"):
            raise ValueError(f"attn_v_axis must be 'query' or 'pixel', got {attn_v_axis!r}")
        self.dim = dim
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.attn_v_axis = attn_v_axis
        bound = 1.0 / math.sqrt(dim)
        for name in self.NAMES:
            w = torch.empty(dim, dim).uniform_(-bound, bound, generator=generator)
            self.register_parameter(name, nn.Parameter(w))


@dataclass
class PromptOutput:
    v_hat: torch.Tensor  # (B, J, P, C), not re-normalized
    l_hat: torch.Tensor  # (B, J, C), not re-normalized
    attn_l: torch.Tensor
    attn_v: torch.Tensor


def _check(v: torch.Tensor, l: torch.Tensor, dim: int) -> None:
    if v.dim() != 3 or l.dim() != 3:
        raise PromptShapeError(f"expected v (B, P, C) and l (B, J, C), got {tuple(v.shape)}, {tuple(l.shape)}")
    if v.shape[0] != l.shape[0] or v.shape[-1] != dim or l.shape[-1] != dim:
        raise PromptShapeError(f"shape mismatch: v {tuple(v.shape)}, l {tuple(l.shape)}, dim={dim}")


def attention_maps(v: torch.Tensor, l: torch.Tensor, p: PromptParameters) -> tuple[torch.Tensor, torch.Tensor]:
    _check(v, l, p.dim)
    scale = math.sqrt(p.dim)
    # (V W1_v)(L W2_l)^T, laid out query-major: (B, J, P)
    logits_l = torch.einsum("bpc,bjc->bjp", v @ p.w1_v, l @ p.w2_l) / scale
    # (L W1_l)(V W2_v)^T: (B, J, P)
    logits_v = torch.einsum("bjc,bpc->bjp", l @ p.w1_l, v @ p.w2_v) / scale
    if not (torch.isfinite(logits_l).all() and torch.isfinite(logits_v).all()):
        raise FloatingPointError("non-finite attention logits")
    attn_l = logits_l.softmax(dim=-1)
    if p.attn_v_axis == "query":
        # one query per pair: the softmax runs over a singleton axis
        attn_v = logits_v.unsqueeze(-1).softmax(dim=-1).squeeze(-1)
    else:
        attn_v = logits_v.softmax(dim=-1)
    return attn_l, attn_v


def prompt_residuals(
    v: torch.Tensor, l: torch.Tensor, attn_l: torch.Tensor, attn_v: torch.Tensor, p: PromptParameters
) -> tuple[torch.Tensor, torch.Tensor]:
    _check(v, l, p.dim)
    b, n_pix, _ = v.shape
    n_q = l.shape[1]
    if attn_l.shape != (b, n_q, n_pix) or attn_v.shape != (b, n_q, n_pix):
        raise PromptShapeError("attention maps do not match the feature shapes")
    l_prime = attn_l @ (v @ p.w3_v)
    v_prime = attn_v.unsqueeze(-1) * (l @ p.w3_l).unsqueeze(2)
    return v_prime, l_prime


def apply_prompt(
    v: torch.Tensor,
    l: torch.Tensor,
    v_prime: torch.Tensor,
    l_prime: torch.Tensor,
    alpha: float,
    beta: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """v_hat = v + alpha * v', l_hat = l + beta * l' (v broadcast over queries)."""
    if v_prime.dim() == 4:
        v = v.unsqueeze(1)
    if v.shape[-1] != v_prime.shape[-1] or l.shape != l_prime.shape:
        raise PromptShapeError("prompt residuals do not match the features")
    return v + alpha * v_prime, l + beta * l_prime


def bilateral_prompt(
    v: torch.Tensor,
    l: torch.Tensor,
    p: PromptParameters,
    enable_t2v: bool = True,
    enable_v2t: bool = True,
) -> PromptOutput:
    """Full prompt. ``enable_t2v=False`` zeroes alpha, ``enable_v2t=False`` zeroes beta."""
    attn_l, attn_v = attention_maps(v, l, p)
    v_prime, l_prime = prompt_residuals(v, l, attn_l, attn_v, p)
    alpha = p.alpha if enable_t2v else 0.0
    beta = p.beta if enable_v2t else 0.0
    v_hat, l_hat = apply_prompt(v, l, v_prime, l_prime, alpha, beta)
    return PromptOutput(v_hat, l_hat, attn_l, attn_v)
