"""Tiny denoising encoder-decoder language model over the subword vocabulary.

Pretraining reconstructs a sentence from a corrupted copy (masked tokens,
deleted spans).  Downstream only the encoder is used; its last layer gives one
embedding per subword.  Adapters can be slotted after each encoder
feed-forward block and are the only trainable part once added.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .numerics import Adam, MultiheadAttention, NonFiniteError, grad

log = logging.getLogger(__name__)

N_SPECIAL = 5  # PAD, BOS, EOS, MASK, SEP follow the subword ids


def special_ids(n_subwords: int) -> dict[str, int]:
    return {name: n_subwords + i for i, name in enumerate(("pad", "bos", "eos", "mask", "sep"))}


@dataclass
class DenoiseConfig:
    mask_rate: float = 0.15
    deletion_rate: float = 0.1
    span_max: int = 2  # deleted span lengths are uniform on 1..span_max
    epochs: int = 20
    layers: int = 2
    heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    lr: float = 1e-3
    batch_size: int = 32

    def __post_init__(self):
        if not (0 <= self.mask_rate < 1 and 0 <= self.deletion_rate < 1):
            raise ValueError("corruption rates must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiseConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown lm config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdapterConfig:
    bottleneck_dim: int = 8

    def __post_init__(self):
        if self.bottleneck_dim < 1:
            raise ValueError("bottleneck_dim must be >= 1")


@dataclass
class SemanticSequence:
    embeddings: torch.Tensor  # L x D_m
    token_ids: list[int]


class Adapter(nn.Module):
    """h + up(relu(down(layernorm(h)))), with ``up`` zeroed so it starts as the identity."""

    def __init__(self, d_model, bottleneck):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.down = nn.Linear(d_model, bottleneck)
        self.up = nn.Linear(bottleneck, d_model)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, h):
        return h + self.up(torch.relu(self.down(self.norm(h))))


class FeedForward(nn.Module):
    def __init__(self, d_model, d_ff):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = nn.Linear(d_ff, d_model)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, d_model, heads, d_ff):
        super().__init__()
        self.attn = MultiheadAttention(d_model, heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff)
        self.norm2 = nn.LayerNorm(d_model)
        self.adapter: Adapter | None = None

    def forward(self, x, pad_mask):
        x = self.norm1(x + self.attn(x, x, key_padding_mask=pad_mask))
        h = self.ff(x)
        if self.adapter is not None:
            h = self.adapter(h)
        return self.norm2(x + h)


class DecoderLayer(nn.Module):
    def __init__(self, d_model, heads, d_ff):
        super().__init__()
        self.self_attn = MultiheadAttention(d_model, heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.cross_attn = MultiheadAttention(d_model, heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff)
        self.norm3 = nn.LayerNorm(d_model)

    def forward(self, y, memory, mem_pad_mask):
        y = self.norm1(y + self.self_attn(y, y, causal=True))
        y = self.norm2(y + self.cross_attn(y, memory, key_padding_mask=mem_pad_mask))
        return self.norm3(y + self.ff(y))


def sinusoid(n_pos, d):
    pos = torch.arange(n_pos, dtype=torch.float32)[:, None]
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float32) * (-math.log(10000.0) / d))
    pe = torch.zeros(n_pos, d)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)
    return pe


class DenoisingLM(nn.Module):
    MAX_LEN = 512

    def __init__(self, n_subwords: int, config: DenoiseConfig):
        super().__init__()
        self.n_subwords = n_subwords
        self.ids = special_ids(n_subwords)
        self.vocab_size = n_subwords + N_SPECIAL
        d = config.d_model
        self.d_model = d
        self.embed = nn.Embedding(self.vocab_size, d)
        self.register_buffer("pos", sinusoid(self.MAX_LEN, d), persistent=False)
        self.encoder = nn.ModuleList([EncoderLayer(d, config.heads, config.d_ff) for _ in range(config.layers)])
        self.decoder = nn.ModuleList([DecoderLayer(d, config.heads, config.d_ff) for _ in range(config.layers)])
        self.lm_head = nn.Linear(d, self.vocab_size)

    def _embed(self, tokens):
        return self.embed(tokens) * math.sqrt(self.d_model) + self.pos[: tokens.shape[1]]

    def encode_batch(self, tokens, pad_mask):
        x = self._embed(tokens)
        for layer in self.encoder:
            x = layer(x, pad_mask)
        return x

    def forward(self, src, src_pad, tgt_in):
        memory = self.encode_batch(src, src_pad)
        y = self._embed(tgt_in)
        for layer in self.decoder:
            y = layer(y, memory, src_pad)
        return self.lm_head(y)

    def pad(self, seqs):
        n = max(1, max(len(s) for s in seqs))
        out = torch.full((len(seqs), n), self.ids["pad"], dtype=torch.long)
        for i, s in enumerate(seqs):
            out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
        return out, out == self.ids["pad"]

    def has_adapters(self) -> bool:
        return any(layer.adapter is not None for layer in self.encoder)


# ---------------------------------------------------------------- corruption & pretraining

def corrupt(tokens, config: DenoiseConfig, rng: np.random.Generator, mask_id: int) -> list[int]:
    out: list[int] = []
    i = 0
    while i < len(tokens):
        if config.deletion_rate and rng.random() < config.deletion_rate:
            i += int(rng.integers(1, config.span_max + 1))
            continue
        out.append(mask_id if config.mask_rate and rng.random() < config.mask_rate else tokens[i])
        i += 1
    return out or [mask_id]


def _batch_loss(model: DenoisingLM, originals, corrupted):
    ids = model.ids
    src, src_pad = model.pad(corrupted)
    tgt_in, _ = model.pad([[ids["bos"]] + list(s) for s in originals])
    tgt_out, tgt_pad = model.pad([list(s) + [ids["eos"]] for s in originals])
    logits = model(src, src_pad, tgt_in)
    nll = F.cross_entropy(logits.reshape(-1, model.vocab_size), tgt_out.reshape(-1), reduction="none")
    keep = ~tgt_pad.reshape(-1)
    pred = logits.argmax(-1).reshape(-1)
    return nll[keep].sum(), int(keep.sum()), int((pred[keep] == tgt_out.reshape(-1)[keep]).sum())


def evaluate_lm(model: DenoisingLM, text, config: DenoiseConfig, seed: int = 0) -> dict[str, float]:
    """Reconstruction perplexity and teacher-forced token accuracy under fixed-seed corruption."""
    rng = np.random.default_rng(seed)
    total_nll, total_tok, correct = 0.0, 0, 0
    with torch.no_grad():
        for i in range(0, len(text), 64):
            chunk = text[i:i + 64]
            corrupted = [corrupt(s, config, rng, model.ids["mask"]) for s in chunk]
            nll, n, c = _batch_loss(model, chunk, corrupted)
            total_nll += float(nll.detach())
            total_tok += n
            correct += c
    return {"perplexity": math.exp(total_nll / total_tok), "token_accuracy": correct / total_tok}


def unigram_perplexity(train_text, eval_text, vocab: int) -> float:
    """Add-one unigram model (with an end-of-sentence token) perplexity on ``eval_text``."""
    counts = np.ones(vocab + 1)
    for s in train_text:
        for w in s:
            counts[w] += 1
        counts[vocab] += 1
    logp = np.log(counts / counts.sum())
    nll = sum(-logp[w] for s in eval_text for w in s) + len(eval_text) * -logp[vocab]
    n = sum(len(s) + 1 for s in eval_text)
    return float(math.exp(nll / n))


def pretrain_lm(text, n_subwords: int, config: DenoiseConfig | None = None, seed: int = 0, dev_text=None,
                log_sink=None):
    """Train a :class:`DenoisingLM` on ``text``; returns (model, per-epoch log records)."""
    config = config or DenoiseConfig()
    if not text:
        raise ValueError("empty text corpus")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = DenoisingLM(n_subwords, config)
    opt = Adam(model.named_parameters(), lr=config.lr)
    records = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(text))
        total_nll, total_tok = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            chunk = [text[j] for j in order[i:i + config.batch_size]]
            corrupted = [corrupt(s, config, rng, model.ids["mask"]) for s in chunk]
            nll, n, _ = _batch_loss(model, chunk, corrupted)
            loss = nll / n
            if not torch.isfinite(loss):
                raise NonFiniteError(f"LM loss diverged at epoch {epoch}")
            opt.step(grad(model, loss))
            total_nll += float(nll.detach())
            total_tok += n
        rec = {"epoch": epoch, "train_perplexity": round(math.exp(total_nll / total_tok), 6)}
        if dev_text:
            ev = evaluate_lm(model, dev_text, config, seed)
            rec["dev_perplexity"] = round(ev["perplexity"], 6)
            rec["dev_token_accuracy"] = round(ev["token_accuracy"], 6)
        records.append(rec)
        log.info("lm epoch %d %s", epoch, rec)
        if log_sink is not None:
            log_sink.write(json.dumps(rec) + "\n")
    return model, records


# ---------------------------------------------------------------- downstream interface

def add_adapters(model: DenoisingLM, config: AdapterConfig | None = None) -> DenoisingLM:
    """Insert an adapter after every encoder feed-forward block; freeze everything else."""
    config = config or AdapterConfig()
    for p in model.parameters():
        p.requires_grad_(False)
    for layer in model.encoder:
        layer.adapter = Adapter(model.d_model, config.bottleneck_dim)
    return model


def adapter_param_count(d_model: int, bottleneck: int, layers: int) -> int:
    return layers * (2 * d_model * bottleneck + bottleneck + d_model + 2 * d_model)


def encode(tokens, model: DenoisingLM) -> SemanticSequence:
    """Final encoder layer output, one row per token."""
    tokens = list(tokens)
    for t in tokens:
        if not 0 <= t < model.vocab_size:
            raise KeyError(f"token id {t} outside the vocabulary")
    if not tokens:
        return SemanticSequence(torch.zeros(0, model.d_model), [])
    src, pad = model.pad([tokens])
    return SemanticSequence(model.encode_batch(src, pad)[0], tokens)


def encode_many(token_lists, model: DenoisingLM) -> list[torch.Tensor]:
    """Batched :func:`encode`; empty inputs give (0, D) tensors."""
    nonempty = [i for i, t in enumerate(token_lists) if len(t)]
    out = [torch.zeros(0, model.d_model) for _ in token_lists]
    if nonempty:
        src, pad = model.pad([token_lists[i] for i in nonempty])
        enc = model.encode_batch(src, pad)
        for row, i in enumerate(nonempty):
            out[i] = enc[row, : len(token_lists[i])]
    return out


def frame_token_index(frame_alignment, n_tokens: int, n_frames: int) -> list[int]:
    """Token index feeding every frame of the upsampled sequence.

    Unaligned frames (-1) take the nearest preceding token, leading ones the first
    token.  Without an alignment tokens are spread evenly over the frames.
    """
    if frame_alignment is None:
        return [min(n_tokens - 1, f * n_tokens // n_frames) for f in range(n_frames)]
    if len(frame_alignment) != n_frames:
        raise ValueError(f"alignment covers {len(frame_alignment)} frames, expected {n_frames}")
    idx, prev = [], 0
    for a in frame_alignment:
        if a is not None and a >= 0:
            if a >= n_tokens:
                raise ValueError(f"alignment refers to token {a} of {n_tokens}")
            prev = a
        idx.append(prev)
    return idx


def upsample(semantic: torch.Tensor, frame_alignment, n_frames: int) -> tuple[torch.Tensor, bool]:
    """Repeat token embeddings to frame rate.  Returns (T x D, degenerate flag for empty input)."""
    if semantic.shape[0] == 0:
        return semantic.new_zeros(n_frames, semantic.shape[1]), True
    idx = frame_token_index(frame_alignment, semantic.shape[0], n_frames)
    return semantic[torch.as_tensor(idx, dtype=torch.long)], False
