"""Finite-difference gradient suite (float64, central differences, step 1e-5, rel. err < 1e-4)."""

import pytest
import torch

import gradcheck
from wris.calibration import calibration_loss
from wris.encoders import EncoderBundle, ToyTextEncoder, ToyVisualEncoder, make_token_batch
from wris.prompt import PromptParameters, apply_prompt, attention_maps, prompt_residuals
from wris.response import aggregate, classification_loss, response
from wris.segmentor import Segmentor, ce_loss

D = torch.float64


def _features(b, n_pix, n_q, c, seed):
    g = torch.Generator().manual_seed(seed)
    v = torch.nn.functional.normalize(torch.randn(b, n_pix, c, generator=g, dtype=D), dim=-1).requires_grad_()
    l = torch.nn.functional.normalize(torch.randn(b, n_q, c, generator=g, dtype=D), dim=-1).requires_grad_()
    return v, l


def prompt_case(axis="query", seed=0):
    c = 4
    p = PromptParameters(c, 0.1, 0.1, axis, generator=torch.Generator().manual_seed(seed)).to(D)
    v, l = _features(2, 9, 3, c, seed + 1)
    alpha = torch.tensor(0.1, dtype=D, requires_grad=True)
    beta = torch.tensor(0.1, dtype=D, requires_grad=True)
    g = torch.Generator().manual_seed(seed + 2)
    wv = torch.randn(2, 3, 9, c, generator=g, dtype=D)
    wl = torch.randn(2, 3, c, generator=g, dtype=D)

    def fn():
        attn_l, attn_v = attention_maps(v, l, p)
        v_prime, l_prime = prompt_residuals(v, l, attn_l, attn_v, p)
        v_hat, l_hat = apply_prompt(v, l, v_prime, l_prime, alpha, beta)
        return (v_hat * wv).sum() + (l_hat * wl).sum()

    tensors = {name: getattr(p, name) for name in p.NAMES}
    tensors.update(v=v, l=l, alpha=alpha, beta=beta)
    return fn, tensors


def response_loss_case(seed=0):
    c = 4
    p = PromptParameters(c, 0.1, 0.1, generator=torch.Generator().manual_seed(seed)).to(D)
    v, l = _features(2, 16, 4, c, seed + 1)
    log_scale = torch.tensor(1.2, dtype=D, requires_grad=True)
    z = torch.zeros(2, 4, dtype=D)
    z[:, 0] = 1

    def fn():
        attn_l, attn_v = attention_maps(v, l, p)
        v_prime, l_prime = prompt_residuals(v, l, attn_l, attn_v, p)
        v_hat, l_hat = apply_prompt(v, l, v_prime, l_prime, p.alpha, p.beta)
        return classification_loss(aggregate(response(v_hat, l_hat, log_scale)), z)

    tensors = {name: getattr(p, name) for name in p.NAMES}
    tensors.update(v=v, l=l, log_scale=log_scale)
    return fn, tensors


def calibration_case(seed=0):
    torch.manual_seed(seed)
    bundle = EncoderBundle(ToyVisualEncoder(8, 8), ToyTextEncoder(12, 8), 8).to(D)
    g = torch.Generator().manual_seed(seed)
    image = torch.rand(1, 3, 16, 16, generator=g, dtype=D)
    r_p = torch.randn(1, 4, 4, generator=g, dtype=D).requires_grad_()
    tokens = make_token_batch([[2, 3], [4, 5], [6]], 20)

    def fn():
        return calibration_loss(image, r_p, tokens, bundle)

    return fn, {"r_p": r_p}


def segmentor_case(seed=0):
    torch.manual_seed(seed)
    net = Segmentor(12, width=4, text_dim=8).to(D)
    net.set_gates(0.3)
    g = torch.Generator().manual_seed(seed)
    image = torch.rand(1, 3, 16, 16, generator=g, dtype=D)
    target = torch.rand(1, 16, 16, generator=g) < 0.4
    tokens = make_token_batch([[2, 3, 4]], 20)

    def fn():
        return ce_loss(net(image, tokens), target)

    named = dict(net.named_parameters())
    keep = ["head.weight", "head.bias", "up.2.0.weight", "fusions.2.gate", "fusions.2.q.weight", "stages.0.0.weight", "text.embed.weight"]
    return fn, {k: named[k] for k in keep}


CASES = {
    "prompt_query_axis": lambda: prompt_case("query"),
    "prompt_pixel_axis": lambda: prompt_case("pixel"),
    "response_aggregate_cls": response_loss_case,
    "calibration_through_upsample": calibration_case,
    "segmentor_ce": segmentor_case,
}


@pytest.mark.parametrize("name", list(CASES))
def test_finite_differences(name):
    fn, tensors = CASES[name]()
    errors = gradcheck.check(fn, tensors, max_entries=40)
    bad = {k: e for k, e in errors.items() if not e < gradcheck.REL_TOL}
    assert not bad, f"relative errors above {gradcheck.REL_TOL}: {bad}"
