"""Neural building blocks: 1-D convolution, multihead attention, layer norm."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def conv_out_len(t: int, width: int, stride: int = 1, padding: int = 0) -> int:
    return (t + 2 * padding - width) // stride + 1


def conv1d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None, stride: int = 1, padding: int = 0):
    """Time convolution over ``x`` of shape (T, D) or (B, T, D).

    ``weight`` has shape (D_out, D, width).  Output is (T', D_out) or (B, T', D_out)
    with T' = floor((T + 2*padding - width) / stride) + 1.
    """
    width = weight.shape[-1]
    if width < 1:
        raise ValueError("kernel width must be >= 1")
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    if conv_out_len(x.shape[1], width, stride, padding) < 1:
        raise ValueError(f"input of length {x.shape[1]} too short for width {width}")
    if x.shape[2] != weight.shape[1]:
        raise ValueError(f"input width {x.shape[2]} != kernel input width {weight.shape[1]}")
    y = F.conv1d(x.transpose(1, 2), weight, bias, stride=stride, padding=padding).transpose(1, 2)
    return y.squeeze(0) if squeeze else y


class Conv1d(nn.Module):
    def __init__(self, d_in, d_out, width, stride=1, padding=0, dtype=torch.float32):
        super().__init__()
        self.stride, self.padding = stride, padding
        bound = 1 / math.sqrt(d_in * width)
        self.weight = nn.Parameter(torch.empty(d_out, d_in, width, dtype=dtype).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(d_out, dtype=dtype).uniform_(-bound, bound))

    @property
    def width(self) -> int:
        return self.weight.shape[-1]

    def forward(self, x):
        return conv1d(x, self.weight, self.bias, self.stride, self.padding)


def layer_norm(x, weight=None, bias=None, eps: float = 1e-5):
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def multihead_attention(
    query: torch.Tensor,
    key_value: torch.Tensor,
    heads: int,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    w_o: torch.Tensor,
    b_q=None, b_k=None, b_v=None, b_o=None,
    key_padding_mask: torch.Tensor | None = None,
    causal: bool = False,
):
    """Scaled dot-product attention with ``heads`` heads.

    query (B, Tq, Dq), key_value (B, Tk, Dkv); projections are stored as
    (D_out, D_in) like ``nn.Linear``.  ``key_padding_mask`` (B, Tk) is True at
    padded keys.  Returns (output (B, Tq, D), weights (B, H, Tq, Tk)).
    """
    squeeze = query.dim() == 2
    if squeeze:
        query, key_value = query.unsqueeze(0), key_value.unsqueeze(0)
    d = w_q.shape[0]
    if d % heads:
        raise ValueError(f"model width {d} not divisible by {heads} heads")
    if w_q.shape[1] != query.shape[-1] or w_k.shape[1] != key_value.shape[-1]:
        raise ValueError("projection input widths do not match query/key widths")
    b, tq, tk = query.shape[0], query.shape[1], key_value.shape[1]
    dh = d // heads
    q = F.linear(query, w_q, b_q).view(b, tq, heads, dh).transpose(1, 2)
    k = F.linear(key_value, w_k, b_k).view(b, tk, heads, dh).transpose(1, 2)
    v = F.linear(key_value, w_v, b_v).view(b, tk, heads, dh).transpose(1, 2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    if key_padding_mask is not None:
        scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
    if causal:
        mask = torch.ones(tq, tk, dtype=torch.bool).triu(1)
        scores = scores.masked_fill(mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    out = (weights @ v).transpose(1, 2).reshape(b, tq, d)
    out = F.linear(out, w_o, b_o)
    if squeeze:
        return out.squeeze(0), weights.squeeze(0)
    return out, weights


class MultiheadAttention(nn.Module):
    def __init__(self, d_model, heads, kv_dim=None, zero_value=False, dtype=torch.float32):
        super().__init__()
        kv_dim = d_model if kv_dim is None else kv_dim
        self.heads = heads
        self.q = nn.Linear(d_model, d_model, dtype=dtype)
        self.k = nn.Linear(kv_dim, d_model, dtype=dtype)
        self.v = nn.Linear(kv_dim, d_model, dtype=dtype)
        self.o = nn.Linear(d_model, d_model, dtype=dtype)
        if zero_value:
            # v and the output bias at zero give a zero readout; o stays random so v still gets gradient
            nn.init.zeros_(self.v.weight)
            nn.init.zeros_(self.v.bias)
            nn.init.zeros_(self.o.bias)
        self.last_weights = None

    def forward(self, query, key_value, key_padding_mask=None, causal=False):
        out, w = multihead_attention(
            query, key_value, self.heads,
            self.q.weight, self.k.weight, self.v.weight, self.o.weight,
            self.q.bias, self.k.bias, self.v.bias, self.o.bias,
            key_padding_mask=key_padding_mask, causal=causal,
        )
        self.last_weights = w
        return out
