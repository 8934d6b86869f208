"""Reverse-mode differentiation helpers on top of torch autograd.

Tensors are plain ``torch.Tensor``.  A parameter is frozen when its
``requires_grad`` flag is off; :func:`grad` reports an exact zero tensor for it.
"""
from __future__ import annotations

import hashlib
from collections.abc import Callable, Mapping

import torch
from torch import nn


class NonFiniteError(FloatingPointError):
    pass


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


def grad(params: Mapping[str, torch.Tensor] | nn.Module, output: torch.Tensor, create_graph: bool = False):
    """Gradient of a scalar ``output`` with respect to every named parameter.

    Frozen parameters (``requires_grad`` off) get zero tensors.
    """
    if isinstance(params, nn.Module):
        params = dict(params.named_parameters())
    if output.numel() != 1:
        raise ValueError(f"grad needs a scalar output, got shape {tuple(output.shape)}")
    check_finite(output.detach(), "forward output")
    live = [(k, p) for k, p in params.items() if p.requires_grad]
    grads = torch.autograd.grad(
        output.reshape(()), [p for _, p in live], allow_unused=True, create_graph=create_graph
    ) if live else []
    out = {k: torch.zeros_like(p) for k, p in params.items()}
    for (k, p), g in zip(live, grads):
        if g is not None:
            out[k] = g
    return out


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def tensor_hash(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


def parameter_hashes(module: nn.Module) -> dict[str, str]:
    return {k: tensor_hash(p) for k, p in module.named_parameters()}


def finite_difference_grad(fn: Callable[[], torch.Tensor], x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central differences of scalar ``fn()`` with respect to ``x`` (perturbed in place)."""
    # fn runs with autograd on: some objectives differentiate internally (gradient penalties)
    g = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), g.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(fn().detach())
        flat[i] = orig - eps
        lo = float(fn().detach())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def gradcheck(fn: Callable[[], torch.Tensor], tensors: Mapping[str, torch.Tensor], eps: float = 1e-6) -> float:
    """Largest relative error between autograd and central differences over ``tensors``.

    Relative error is |a - n| / max(1, |a|, |n|) per entry; tensors should be float64.
    """
    analytic = grad(dict(tensors), fn())
    worst = 0.0
    for k, t in tensors.items():
        numeric = finite_difference_grad(fn, t, eps)
        a = analytic[k]
        denom = torch.clamp(torch.maximum(a.abs(), numeric.abs()), min=1.0)
        worst = max(worst, float(((a - numeric).abs() / denom).max()))
    return worst
