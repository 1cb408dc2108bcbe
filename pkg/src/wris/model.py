"""Step-1 network: encoders + bilateral prompt + response maps, and its loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .calibration import calibration_loss
from .config import RunConfig
from .encoders import EncoderBundle, TokenBatch, Tokenizer, build_bundle, tokenize
from .prompt import PromptParameters, bilateral_prompt
from .response import LogitScale, aggregate, check_labels, classification_loss, response


@dataclass
class Step1Output:
    responses: torch.Tensor  # (B, P, J)
    scores: torch.Tensor  # (B, J)
    grid: tuple[int, int]

    def maps(self) -> torch.Tensor:
        """Responses as (B, J, h, w)."""
        b, _, j = self.responses.shape
        return self.responses.permute(0, 2, 1).reshape(b, j, *self.grid)


class ResponseModel(nn.Module):
    def __init__(self, config: RunConfig, tokenizer: Tokenizer):
        super().__init__()
        self.config = config
        self.tokenizer = tokenizer
        self.bundle: EncoderBundle = build_bundle(config, len(tokenizer))
        gen = torch.Generator().manual_seed(config.seed + 1)
        self.prompt = PromptParameters(config.hidden_dim, config.alpha, config.beta, config.attn_v_axis, generator=gen)
        self.logit_scale = LogitScale(config.temperature_init, config.temperature_max)

    def tokens(self, texts: list[str]) -> TokenBatch:
        return tokenize(self.tokenizer, texts, self.config.T_max)

    def forward(self, images: torch.Tensor, tokens: TokenBatch) -> Step1Output:
        """``tokens`` holds J expressions per image, image-major (B*J rows)."""
        b = images.shape[0]
        feats = self.bundle.features(images, tokens)
        _, h, w, c = feats.visual.shape
        v = feats.visual.reshape(b, h * w, c)
        l = feats.text.reshape(b, -1, c)
        out = bilateral_prompt(v, l, self.prompt, self.config.enable_t2v, self.config.enable_v2t)
        r = response(out.v_hat, out.l_hat, self.logit_scale())
        y = aggregate(r, psi=None)
        return Step1Output(r, y, (h, w))

    @torch.no_grad()
    def response_maps(self, images: torch.Tensor, texts: list[str]) -> torch.Tensor:
        """Response map of every image against its own expression: (B, h, w)."""
        out = self(images, self.tokens(texts))
        return out.maps()[:, 0]


def step1_loss(model: ResponseModel, batch, return_parts: bool = False):
    """Weighted classification loss plus calibration loss for one :class:`~wris.data.TrainBatch`."""
    cfg = model.config
    images = batch.images
    texts = [t for it in batch.items for t in [it.positive, *it.negatives]]
    out = model(images, model.tokens(texts))
    z = batch.labels().to(out.scores.dtype)
    check_labels(z)
    focal = cfg.focal_gamma if cfg.psi_mode == "focal" else 0.0
    l_cls = classification_loss(out.scores, z, focal_gamma=focal)
    cal_texts = [t for it in batch.items for t in [it.positive, *it.same_image.queries]]
    r_p = out.maps()[:, 0]
    l_cal = calibration_loss(
        images,
        r_p,
        model.tokens(cal_texts),
        model.bundle,
        eps=cfg.epsilon_clamp,
        mode=cfg.rescale_mode,
        use_pos=cfg.use_pos_term,
        use_neg=cfg.use_neg_term,
        sigmoid_scale=cfg.sigmoid_scale,
    )
    total = cfg.lambda_cls * l_cls + l_cal
    if return_parts:
        return total, l_cls.detach(), l_cal.detach()
    return total
