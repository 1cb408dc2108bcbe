"""Step-2 segmentation network: conv encoder, gated cross-attention text fusion on
the last three stages, and a U-shaped decoder with skip connections.

Logits are laid out channel-first, (B, 2, H_I, W_I), class 0 = background.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import TokenBatch, ToyTextEncoder, Tokenizer, _coord_channels, tokenize


def _block(c_in: int, c_out: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1), nn.GroupNorm(4, c_out), nn.GELU())


class CrossAttentionFusion(nn.Module):
    """Pixels attend over word features; the result is added back through a gate.

    The gate starts at zero, so an untrained fusion stage is the identity.
    """

    def __init__(self, vis_dim: int, text_dim: int, attn_dim: int = 32):
        super().__init__()
        self.q = nn.Linear(vis_dim, attn_dim, bias=False)
        self.k = nn.Linear(text_dim, attn_dim, bias=False)
        self.v = nn.Linear(text_dim, vis_dim, bias=False)
        self.gate = nn.Parameter(torch.zeros(()))
        self.attn_dim = attn_dim

    def forward(self, x: torch.Tensor, words: torch.Tensor, word_mask: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        pix = x.flatten(2).transpose(1, 2)  # (B, HW, C)
        logits = self.q(pix) @ self.k(words).transpose(1, 2) / math.sqrt(self.attn_dim)
        logits = logits.masked_fill(~word_mask.unsqueeze(1), float("-inf"))
        fused = logits.softmax(dim=-1) @ self.v(words)  # (B, HW, C)
        return x + self.gate * fused.transpose(1, 2).reshape(b, c, h, w)


class Segmentor(nn.Module):
    def __init__(self, vocab_size: int, width: int = 16, text_dim: int = 64, t_max: int = 20):
        super().__init__()
        w = width
        self.t_max = t_max
        self.text = ToyTextEncoder(vocab_size, text_dim)
        self.stem = _block(5, w)
        self.stages = nn.ModuleList([_block(w, 2 * w, 2), _block(2 * w, 4 * w, 2), _block(4 * w, 4 * w, 2)])
        self.fusions = nn.ModuleList([CrossAttentionFusion(c, text_dim) for c in (2 * w, 4 * w, 4 * w)])
        self.up = nn.ModuleList([_block(8 * w, 2 * w), _block(4 * w, w), _block(2 * w, w)])
        self.head = nn.Conv2d(w, 2, 1)

    def forward(self, images: torch.Tensor, tokens: TokenBatch) -> torch.Tensor:
        words = self.text.token_features(tokens)
        x = self.stem(torch.cat([images, _coord_channels(images)], dim=1))
        skips = [x]
        for stage, fusion in zip(self.stages, self.fusions):
            x = fusion(stage(x), words, tokens.mask)
            skips.append(x)
        for up, skip in zip(self.up, reversed(skips[:-1])):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = up(torch.cat([x, skip], dim=1))
        return self.head(x)

    def set_gates(self, value: float) -> None:
        with torch.no_grad():
            for f in self.fusions:
                f.gate.fill_(value)


class SegmentationModel(nn.Module):
    """Segmentor plus the tokenizer and config it was built with."""

    def __init__(self, config, tokenizer: Tokenizer):
        super().__init__()
        self.config = config
        self.tokenizer = tokenizer
        torch.manual_seed(config.seed)
        self.net = Segmentor(len(tokenizer), width=config.seg_width, text_dim=config.text_dim, t_max=config.T_max)

    def tokens(self, texts: list[str]) -> TokenBatch:
        return tokenize(self.tokenizer, texts, self.config.T_max)

    def forward(self, images: torch.Tensor, texts_or_tokens) -> torch.Tensor:
        tokens = texts_or_tokens if isinstance(texts_or_tokens, TokenBatch) else self.tokens(texts_or_tokens)
        return self.net(images, tokens)


def probabilities(logits: torch.Tensor) -> torch.Tensor:
    return logits.softmax(dim=1)


def ce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel two-class cross-entropy; ``target`` is (B, H, W) binary."""
    if logits.shape[0] != target.shape[0] or logits.shape[-2:] != target.shape[-2:]:
        raise ValueError(f"logits {tuple(logits.shape)} do not match target {tuple(target.shape)}")
    return F.cross_entropy(logits, target.long())


def predict_mask(logits: torch.Tensor) -> torch.Tensor:
    """Argmax over classes; exact ties go to background."""
    return logits[:, 1] > logits[:, 0]


def target_probability_map(logits: torch.Tensor) -> np.ndarray:
    return probabilities(logits)[:, 1].detach().double().numpy()
