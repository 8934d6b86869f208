"""Connectionist temporal classification: forward-algorithm loss and greedy decoding."""
from __future__ import annotations

from collections.abc import Sequence

import torch

_NEG = -1e30  # stands in for log(0); keeps logsumexp gradients finite


def ctc_min_frames(target: Sequence[int]) -> int:
    """Fewest frames that can emit ``target``: one per label plus a blank between repeats."""
    target = list(target)
    return len(target) + sum(a == b for a, b in zip(target, target[1:]))


def ctc_feasible(n_frames: int, target: Sequence[int]) -> bool:
    return n_frames >= ctc_min_frames(target)


def ctc_loss_batch(log_probs, targets, input_lengths, target_lengths, blank: int = -1):
    """Per-example CTC negative log likelihood.

    log_probs: (B, T, C) log-softmax outputs; targets: (B, L) padded label ids.
    Returns (losses (B,), feasible (B,) bool).  Infeasible examples get +inf.
    """
    b, t_max, c = log_probs.shape
    blank = blank % c
    targets = torch.as_tensor(targets, dtype=torch.long).reshape(b, -1)
    input_lengths = torch.as_tensor(input_lengths, dtype=torch.long)
    target_lengths = torch.as_tensor(target_lengths, dtype=torch.long)
    l_max = targets.shape[1]
    s_max = 2 * l_max + 1
    ext = torch.full((b, s_max), blank, dtype=torch.long)
    if l_max:
        ext[:, 1::2] = targets
    # s-2 transition allowed onto a label that differs from the label two back
    skip = torch.zeros(b, s_max, dtype=torch.bool)
    if s_max > 2:
        skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    feasible = torch.tensor([
        ctc_feasible(int(input_lengths[i]), targets[i, : int(target_lengths[i])].tolist()) for i in range(b)
    ])
    valid_s = torch.arange(s_max)[None, :] < (2 * target_lengths + 1)[:, None]

    emit = log_probs.gather(2, ext[:, None, :].expand(b, t_max, s_max))  # (B, T, S)
    neg = log_probs.new_full((b, s_max), _NEG)
    alpha = neg.clone()
    alpha[:, 0] = emit[:, 0, 0]
    if s_max > 1:
        alpha[:, 1] = emit[:, 0, 1]
    alpha = torch.where(valid_s, alpha, neg)
    final = alpha
    for t in range(1, t_max):
        prev1 = torch.cat([neg[:, :1], alpha[:, :-1]], dim=1)
        prev2 = torch.cat([neg[:, :2], alpha[:, :-2]], dim=1)[:, :s_max]
        prev2 = torch.where(skip, prev2, neg)
        new = torch.logsumexp(torch.stack([alpha, prev1, prev2]), dim=0) + emit[:, t]
        new = torch.where(valid_s, new, neg)
        active = (t < input_lengths)[:, None]
        alpha = torch.where(active, new, alpha)
    final = alpha
    last = 2 * target_lengths  # index of trailing blank
    end_blank = final.gather(1, last[:, None]).squeeze(1)
    end_label = final.gather(1, (last - 1).clamp(min=0)[:, None]).squeeze(1)
    end_label = torch.where(target_lengths > 0, end_label, torch.full_like(end_label, _NEG))
    ll = torch.logaddexp(end_blank, end_label)
    losses = torch.where(feasible, -ll, torch.full_like(ll, float("inf")))
    return losses, feasible


def ctc_loss(logits: torch.Tensor, target: Sequence[int], blank: int = -1) -> torch.Tensor:
    """CTC loss of one (T, V+1) logit matrix against ``target``; +inf when no alignment exists."""
    log_probs = torch.log_softmax(logits, dim=-1)
    target = list(target)
    padded = torch.tensor([target], dtype=torch.long) if target else torch.zeros(1, 0, dtype=torch.long)
    losses, _ = ctc_loss_batch(log_probs[None], padded, [logits.shape[0]], [len(target)], blank)
    return losses[0]


def ctc_greedy_decode(logits: torch.Tensor, blank: int = -1) -> list[int]:
    """Best-path decoding: argmax per frame, merge repeats, drop blanks."""
    blank = blank % logits.shape[-1]
    out, prev = [], None
    for k in logits.argmax(-1).tolist():
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out
