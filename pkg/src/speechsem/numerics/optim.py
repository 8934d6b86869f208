"""Adam with bias correction, as a pure step function and a thin module wrapper."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .core import NonFiniteError


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: dict, hyper: AdamHyper = AdamHyper()):
    """One Adam update.  Returns (new params, new state); inputs are not modified.

    ``state`` holds ``t`` plus first/second moments ``m``/``v`` keyed like ``params``.
    """
    t = state.get("t", 0) + 1
    m_old, v_old = state.get("m", {}), state.get("v", {})
    new_p, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {k}")
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {k}")
        m = hyper.beta1 * m_old.get(k, torch.zeros_like(p)) + (1 - hyper.beta1) * g
        v = hyper.beta2 * v_old.get(k, torch.zeros_like(p)) + (1 - hyper.beta2) * g * g
        m_hat = m / (1 - hyper.beta1 ** t)
        v_hat = v / (1 - hyper.beta2 ** t)
        new_p[k] = p - hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps)
        m_new[k], v_new[k] = m, v
    return new_p, {"t": t, "m": m_new, "v": v_new}


class Adam:
    """Applies :func:`adam_step` in place to the trainable parameters of a module."""

    def __init__(self, named_params, hyper: AdamHyper | None = None, **kw):
        self.params = {k: p for k, p in named_params if p.requires_grad}
        self.hyper = hyper or AdamHyper(**kw)
        self.state: dict = {}

    def step(self, grads: dict):
        current = {k: p.detach() for k, p in self.params.items()}
        new, self.state = adam_step(current, {k: grads[k].detach() for k in self.params}, self.state, self.hyper)
        with torch.no_grad():
            for k, p in self.params.items():
                p.copy_(new[k])
