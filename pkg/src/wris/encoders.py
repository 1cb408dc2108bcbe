"""Visual/text encoders, the shared projector and channel-wise L2 normalization.

The toy backbones are small randomly initialised networks; anything that
implements :class:`VisualBackbone` / :class:`TextBackbone` can be dropped into an
:class:`EncoderBundle` instead (see :func:`register_adapter`).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12
PAD_ID = 0
UNK_ID = 1


class EncodingError(ValueError):
    """Bad encoder input: wrong image size, empty token sequence, channel mismatch."""


# --------------------------------------------------------------------------- text


class Tokenizer:
    """Whitespace tokenizer over a fixed vocabulary (id 0 = pad, id 1 = unk)."""

    def __init__(self, words: Iterable[str]):
        self.itos = ["<pad>", "<unk>"]
        for w in words:
            if w not in self.itos:
                self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Tokenizer":
        words = sorted({w for t in texts for w in t.lower().split()})
        return cls(words)

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        words = [w.strip() for w in Path(path).read_text().splitlines()]
        return cls(w for w in words if w and w not in ("<pad>", "<unk>"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n")

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(w, UNK_ID) for w in text.lower().split()]


@dataclass
class TokenBatch:
    """Padded token ids for J expressions."""

    ids: torch.Tensor  # (J, T) long
    mask: torch.Tensor  # (J, T) bool, True on real tokens
    truncated: torch.Tensor  # (J,) bool

    def __len__(self) -> int:
        return self.ids.shape[0]

    def select(self, index) -> "TokenBatch":
        return TokenBatch(self.ids[index], self.mask[index], self.truncated[index])

    @staticmethod
    def cat(batches: Sequence["TokenBatch"]) -> "TokenBatch":
        width = max(b.ids.shape[1] for b in batches)
        ids = torch.cat([F.pad(b.ids, (0, width - b.ids.shape[1]), value=PAD_ID) for b in batches])
        mask = torch.cat([F.pad(b.mask, (0, width - b.mask.shape[1]), value=False) for b in batches])
        return TokenBatch(ids, mask, torch.cat([b.truncated for b in batches]))


def make_token_batch(sequences: Sequence[Sequence[int]], t_max: int, vocab_size: int | None = None) -> TokenBatch:
    """Pad id lists into a batch, truncating anything longer than ``t_max``."""
    if not sequences:
        raise EncodingError("no token sequences given")
    for seq in sequences:
        if len(seq) == 0:
            raise EncodingError("empty token sequence")
        if vocab_size is not None and any(not 0 <= t < vocab_size for t in seq):
            raise EncodingError("token id outside vocabulary")
    truncated = torch.tensor([len(s) > t_max for s in sequences])
    if truncated.any():
        logger.warning("%d expression(s) truncated to %d tokens", int(truncated.sum()), t_max)
    width = min(max(len(s) for s in sequences), t_max)
    ids = torch.full((len(sequences), width), PAD_ID, dtype=torch.long)
    for row, seq in enumerate(sequences):
        seq = list(seq)[:t_max]
        ids[row, : len(seq)] = torch.tensor(seq, dtype=torch.long)
    return TokenBatch(ids, ids != PAD_ID, truncated)


def tokenize(tokenizer: Tokenizer, texts: Sequence[str], t_max: int) -> TokenBatch:
    return make_token_batch([tokenizer.encode(t) for t in texts], t_max, len(tokenizer))


# ----------------------------------------------------------------------- backbones


class VisualBackbone(nn.Module):
    """Image (B, 3, H_I, W_I) -> features (B, C_v, H_I/s, W_I/s)."""

    out_dim: int
    downsample: int


class TextBackbone(nn.Module):
    """Token batch -> per-token features (J, T, C_l); pooled = masked mean."""

    out_dim: int

    def token_features(self, tokens: TokenBatch) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, tokens: TokenBatch) -> torch.Tensor:
        feats = self.token_features(tokens)
        mask = tokens.mask.unsqueeze(-1).to(feats.dtype)
        return (feats * mask).sum(1) / mask.sum(1).clamp_min(1.0)


def _coord_channels(x: torch.Tensor) -> torch.Tensor:
    b, _, h, w = x.shape
    ys = torch.linspace(-1.0, 1.0, h, dtype=x.dtype, device=x.device)
    xs = torch.linspace(-1.0, 1.0, w, dtype=x.dtype, device=x.device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy]).expand(b, 2, h, w)


class ToyVisualEncoder(VisualBackbone):
    """Strided conv stack: log2(s) stride-2 stages and a stride-1 head.

    Two coordinate channels are appended to the RGB input so position words
    ("on the left") have something to bind to.
    """

    def __init__(self, out_dim: int, downsample: int, width: int = 32):
        super().__init__()
        n_down = int(round(math.log2(downsample)))
        if 2**n_down != downsample:
            raise EncodingError(f"toy encoder needs a power-of-two down-sample ratio, got {downsample}")
        self.out_dim = out_dim
        self.downsample = downsample
        layers: list[nn.Module] = []
        c_in = 5
        for i in range(n_down):
            c_out = min(width * 2**i, 128)
            layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), nn.GroupNorm(8, c_out), nn.GELU()]
            c_in = c_out
        layers += [nn.Conv2d(c_in, out_dim, 3, padding=1, bias=False)]
        self.net = nn.Sequential(*layers)
        self.patch = nn.Conv2d(5, out_dim, downsample, stride=downsample, bias=False)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        x = torch.cat([image, _coord_channels(image)], dim=1)
        return self.net(x) + self.patch(x)


class ToyTextEncoder(TextBackbone):
    """Embedding table -> linear head, mean-pooled over real tokens."""

    def __init__(self, vocab_size: int, out_dim: int, embed_dim: int = 64):
        super().__init__()
        self.out_dim = out_dim
        self.embed = nn.Embedding(vocab_size, embed_dim, padding_idx=PAD_ID)
        self.head = nn.Linear(embed_dim, out_dim, bias=False)

    def token_features(self, tokens: TokenBatch) -> torch.Tensor:
        return self.head(self.embed(tokens.ids))

    def forward(self, tokens: TokenBatch) -> torch.Tensor:
        # pool before the head: same result for a linear head, cheaper
        mask = tokens.mask.unsqueeze(-1).to(self.embed.weight.dtype)
        pooled = (self.embed(tokens.ids) * mask).sum(1) / mask.sum(1).clamp_min(1.0)
        return self.head(pooled)


_ADAPTERS: dict[str, Callable[..., tuple[VisualBackbone, TextBackbone]]] = {}


def register_adapter(name: str, factory: Callable[..., tuple[VisualBackbone, TextBackbone]]) -> None:
    """Register a factory returning (visual, text) backbones for ``encoder="adapter"``.

    The factory receives the run config and the vocabulary size.
    """
    _ADAPTERS[name] = factory


# ------------------------------------------------------------------------ bundle


def l2_normalize(x: torch.Tensor, dim: int = -1, eps: float = NORM_EPS) -> tuple[torch.Tensor, torch.Tensor]:
    """Channel-wise L2 normalization with a floor on the denominator.

    Returns the normalized tensor and a boolean "degenerate" flag per vector
    (norm below the floor; such vectors come back as zeros).
    """
    norm = x.norm(dim=dim, keepdim=True)
    degenerate = (norm < eps).squeeze(dim)
    return x / norm.clamp_min(eps), degenerate


@dataclass
class Projected:
    visual: torch.Tensor  # (B, H, W, D)
    text: torch.Tensor  # (J, D)
    visual_degenerate: torch.Tensor  # (B, H, W) bool
    text_degenerate: torch.Tensor  # (J,) bool


class EncoderBundle(nn.Module):
    """Backbones plus the two projection matrices into the shared embedding space."""

    def __init__(self, visual: VisualBackbone, text: TextBackbone, hidden_dim: int):
        super().__init__()
        self.visual = visual
        self.text = text
        self.hidden_dim = hidden_dim
        self.proj_v = nn.Linear(visual.out_dim, hidden_dim, bias=False)
        self.proj_l = nn.Linear(text.out_dim, hidden_dim, bias=False)

    @property
    def downsample(self) -> int:
        return self.visual.downsample

    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        """(B, 3, H_I, W_I) -> raw spatial features (B, H_I/s, W_I/s, C_v)."""
        if image.dim() == 3:
            image = image.unsqueeze(0)
        if image.dim() != 4 or image.shape[1] != 3:
            raise EncodingError(f"expected (B, 3, H, W) image, got {tuple(image.shape)}")
        s = self.downsample
        h, w = image.shape[-2:]
        if h <= 0 or w <= 0 or h % s or w % s:
            raise EncodingError(f"image size {h}x{w} is not divisible by the down-sample ratio {s}")
        if not torch.isfinite(image).all():
            raise EncodingError("image contains non-finite values")
        return self.visual(image).permute(0, 2, 3, 1)

    def encode_text(self, tokens: TokenBatch) -> torch.Tensor:
        """Token batch -> one pooled embedding per expression, (J, C_l)."""
        if len(tokens) == 0 or not tokens.mask.any(dim=1).all():
            raise EncodingError("empty token sequence")
        return self.text(tokens)

    def project_normalize(self, raw_visual: torch.Tensor, raw_text: torch.Tensor) -> Projected:
        if not (torch.isfinite(raw_visual).all() and torch.isfinite(raw_text).all()):
            raise EncodingError("raw features contain non-finite values")
        v, v_deg = l2_normalize(self.proj_v(raw_visual))
        l, l_deg = l2_normalize(self.proj_l(raw_text))
        return Projected(v, l, v_deg, l_deg)

    def features(self, image: torch.Tensor, tokens: TokenBatch) -> Projected:
        return self.project_normalize(self.encode_image(image), self.encode_text(tokens))

    def global_embed(self, image: torch.Tensor) -> torch.Tensor:
        """Spatial mean of the backbone output, projected and normalized: (B, D)."""
        pooled = self.encode_image(image).mean(dim=(1, 2))
        return l2_normalize(self.proj_v(pooled))[0]

    def text_embed(self, tokens: TokenBatch) -> torch.Tensor:
        return l2_normalize(self.proj_l(self.encode_text(tokens)))[0]


def build_bundle(config, vocab_size: int) -> EncoderBundle:
    """Construct the encoder bundle named by ``config.encoder`` under ``config.seed``."""
    torch.manual_seed(config.seed)
    if config.encoder == "toy":
        visual: VisualBackbone = ToyVisualEncoder(config.visual_dim, config.downsample)
        text: TextBackbone = ToyTextEncoder(vocab_size, config.text_dim)
    else:
        if not _ADAPTERS:
            raise EncodingError("encoder='adapter' but no adapter is registered (see register_adapter)")
        factory = next(iter(_ADAPTERS.values()))
        visual, text = factory(config, vocab_size)
        if visual.downsample != config.downsample:
            raise EncodingError("adapter down-sample ratio disagrees with config")
    return EncoderBundle(visual, text, config.hidden_dim)
