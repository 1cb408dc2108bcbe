"""Central finite differences against autograd, in double precision."""

import torch

STEP = 1e-5
REL_TOL = 1e-4


def numeric_grad(fn, t: torch.Tensor, entries=None) -> torch.Tensor:
    """d fn / d t by central differences; ``entries`` limits which flat indices are probed."""
    grad = torch.zeros_like(t)
    flat, gflat = t.data.view(-1), grad.view(-1)
    for i in range(flat.numel()) if entries is None else entries:
        orig = flat[i].item()
        flat[i] = orig + STEP
        plus = fn().item()
        flat[i] = orig - STEP
        minus = fn().item()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * STEP)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """Tensor-wise ||a - b|| / max(||a||, ||b||)."""
    denom = max(a.norm().item(), b.norm().item(), 1e-30)
    return (a - b).norm().item() / denom


def check(fn, tensors: dict, max_entries: int | None = None, seed: int = 0) -> dict:
    """Relative error per named tensor; autograd vs. numeric on the probed entries."""
    for t in tensors.values():
        t.grad = None
    fn().backward()
    gen = torch.Generator().manual_seed(seed)
    errors = {}
    for name, t in tensors.items():
        auto = t.grad.detach().clone()
        entries = None
        if max_entries is not None and t.numel() > max_entries:
            entries = torch.randperm(t.numel(), generator=gen)[:max_entries].tolist()
        with torch.no_grad():
            num = numeric_grad(fn, t, entries)
        if entries is not None:
            mask = torch.zeros(t.numel(), dtype=torch.bool)
            mask[entries] = True
            auto = auto.view(-1)[mask]
            num = num.view(-1)[mask]
        errors[name] = relative_error(auto, num)
    return errors
