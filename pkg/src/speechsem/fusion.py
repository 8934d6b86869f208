"""Combining acoustic frames with semantic embeddings of the decoded subwords.

Every variant starts from a :class:`Prepared` item: the acoustic frames, the
subwords the frozen bridge decoded from them, and the frame alignment of those
subwords.  :class:`FusedModel` turns a batch of prepared items into one padded
sequence per item; task heads sit on top.

Variants
    acoustic_only  frames only
    ssp_base       upsampled semantic embeddings only
    ssp_plus_r     frames concatenated with upsampled semantic embeddings
    ssp_plus_ra    frames concatenated with attention over the semantic sequence
    ssp_plus_ap    semantic embeddings at token rate, LM adapters trainable
    ssp_tune       ssp_plus_ra with LM adapters trainable
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .bridge import Generator, generate
from .lm import AdapterConfig, DenoisingLM, add_adapters, encode_many, upsample
from .numerics import MultiheadAttention, freeze
from .wfst import Transducer, decode

VARIANTS = ("acoustic_only", "ssp_base", "ssp_plus_r", "ssp_plus_ra", "ssp_plus_ap", "ssp_tune")
_USES_LM = {"ssp_base", "ssp_plus_r", "ssp_plus_ra", "ssp_plus_ap", "ssp_tune"}
_ATTENTION = {"ssp_plus_ra", "ssp_tune"}
_ADAPTERS = {"ssp_plus_ap", "ssp_tune"}


class UnknownVariantError(ValueError):
    pass


@dataclass
class Prepared:
    features: torch.Tensor  # T x D
    tokens: list[int]  # decoded subword ids (LM vocabulary)
    frame_alignment: list[int]  # per frame, index into tokens or -1
    no_path: bool = False
    frame_offset: int = 0  # first frame of the answerable region (QA passages)
    token_offset: int = 0

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


def prepare(features, generator: Generator, lexicon: Transducer) -> Prepared:
    """Run the frozen bridge: generator lattice, then lexicon decoding."""
    res = decode(generate(features, generator), lexicon)
    feats = torch.as_tensor(np.asarray(features), dtype=torch.float32)
    return Prepared(feats, list(res.subwords), list(res.frame_alignment), res.no_path)


def oracle_prepared(features, subwords, frame_alignment) -> Prepared:
    """A prepared item built from gold transcripts, bypassing the bridge."""
    feats = torch.as_tensor(np.asarray(features), dtype=torch.float32)
    return Prepared(feats, list(subwords), list(frame_alignment))


def join_question(question: Prepared, passage: Prepared, sep_id: int) -> Prepared:
    """Question, one separator frame/token, then the passage, as a single item."""
    d = question.features.shape[1]
    feats = torch.cat([question.features, question.features.new_zeros(1, d), passage.features])
    nq = len(question.tokens)
    tokens = question.tokens + [sep_id] + passage.tokens
    align = list(question.frame_alignment) + [nq]
    align += [a + nq + 1 if a >= 0 else -1 for a in passage.frame_alignment]
    return Prepared(feats, tokens, align, question.no_path or passage.no_path,
                    frame_offset=question.n_frames + 1, token_offset=nq + 1)


def pad_sequences(seqs: list[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([s.shape[0] for s in seqs], dtype=torch.long)
    n = max(1, int(lengths.max()))
    out = seqs[0].new_zeros(len(seqs), n, seqs[0].shape[1])
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
    return out, lengths


def fuse_concat(z_e: torch.Tensor, z_m_up: torch.Tensor) -> torch.Tensor:
    """[Z_E | U(Z_M)] row by row."""
    if z_e.shape[:-1] != z_m_up.shape[:-1]:
        raise ValueError(f"frame counts differ: {tuple(z_e.shape)} vs {tuple(z_m_up.shape)}")
    return torch.cat([z_e, z_m_up], -1)


def fuse_attention(z_e: torch.Tensor, z_m: torch.Tensor, attn: MultiheadAttention) -> tuple[torch.Tensor, bool]:
    """[Z_E | MHA(Z_E, Z_M, Z_M)] for one item.  Empty Z_M gives a zero attention branch and flag True."""
    if z_m.shape[0] == 0:
        return torch.cat([z_e, torch.zeros_like(z_e)], -1), True
    return torch.cat([z_e, attn(z_e[None], z_m[None])[0]], -1), False


class FusedModel(nn.Module):
    """Frozen bridge generator and LM plus the variant's trainable fusion parts.

    The generator is held only so that parameter hashes and counts cover it;
    bridge inference happens once in :func:`prepare`.
    """

    def __init__(self, variant: str, generator: Generator | None, lm: DenoisingLM | None, d_acoustic: int,
                 heads: int = 4, adapter: AdapterConfig | None = None, token_level: bool = False):
        super().__init__()
        if variant not in VARIANTS:
            raise UnknownVariantError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
        if variant in _USES_LM and lm is None:
            raise ValueError(f"variant {variant} needs a pretrained LM")
        self.variant = variant
        self.d_acoustic = d_acoustic
        # adapter outputs stay at token rate only when asked (span QA); otherwise they are upsampled
        self.token_level = token_level and variant == "ssp_plus_ap"
        self.generator = generator
        if generator is not None:
            freeze(generator)
        self.lm = lm if variant in _USES_LM else None
        if self.lm is not None:
            freeze(self.lm)
            if variant in _ADAPTERS:
                add_adapters(self.lm, adapter)
        self.attn = None
        if variant in _ATTENTION:
            if d_acoustic % heads:
                raise ValueError(f"acoustic width {d_acoustic} not divisible by {heads} heads")
            self.attn = MultiheadAttention(d_acoustic, heads, kv_dim=self.lm.d_model, zero_value=True)
        self._cache: dict[tuple[int, ...], torch.Tensor] = {}

    @property
    def level(self) -> str:
        return "token" if self.token_level else "frame"

    @property
    def out_dim(self) -> int:
        if self.variant == "acoustic_only":
            return self.d_acoustic
        if self.variant in ("ssp_base", "ssp_plus_ap"):
            return self.lm.d_model
        if self.variant == "ssp_plus_r":
            return self.d_acoustic + self.lm.d_model
        return 2 * self.d_acoustic

    def trainable_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def semantic(self, batch: list[Prepared]) -> list[torch.Tensor]:
        """One L x D_m tensor per item; empty decodes give a single zero row."""
        token_lists = [tuple(p.tokens) for p in batch]
        live = self.variant in _ADAPTERS
        if live:
            enc = encode_many([list(t) for t in token_lists], self.lm)
        else:
            missing = sorted({t for t in token_lists if t not in self._cache})
            if missing:
                with torch.no_grad():  # one at a time so cached values never depend on batch mates
                    for t in missing:
                        self._cache[t] = encode_many([list(t)], self.lm)[0]
            enc = [self._cache[t] for t in token_lists]
        return [e if e.shape[0] else e.new_zeros(1, self.lm.d_model) for e in enc]

    @staticmethod
    def _has_tokens(batch):
        return torch.tensor([bool(p.tokens) for p in batch])

    def forward(self, batch: list[Prepared]) -> tuple[torch.Tensor, torch.Tensor]:
        """Padded fused sequences (B x L x out_dim) and their lengths."""
        if self.variant == "acoustic_only":
            return pad_sequences([p.features for p in batch])
        z_m = self.semantic(batch)
        if self.token_level:
            return pad_sequences(z_m)
        if self.attn is None:
            ups = [upsample(z, p.frame_alignment if p.tokens else None, p.n_frames)[0] for z, p in zip(z_m, batch)]
            if self.variant in ("ssp_base", "ssp_plus_ap"):
                return pad_sequences(ups)
            return pad_sequences([fuse_concat(p.features, u) for p, u in zip(batch, ups)])
        z_e, lengths = pad_sequences([p.features for p in batch])
        mem, mem_len = pad_sequences(z_m)
        key_pad = torch.arange(mem.shape[1])[None, :] >= mem_len[:, None]
        read = self.attn(z_e, mem, key_padding_mask=key_pad) * self._has_tokens(batch)[:, None, None]
        return torch.cat([z_e, read], -1), lengths


def assemble_model(variant: str, generator: Generator | None, lm: DenoisingLM | None, d_acoustic: int,
                   heads: int = 4, adapter: AdapterConfig | None = None, token_level: bool = False) -> FusedModel:
    return FusedModel(variant, generator, lm, d_acoustic, heads, adapter, token_level)


def trainable_registry(*modules: nn.Module) -> dict[str, list[str]]:
    """Names of trainable tensors per top-level group, for logging and freezing checks."""
    out: dict[str, list[str]] = {}
    for module in modules:
        for name, p in module.named_parameters():
            if p.requires_grad:
                out.setdefault(name.split(".")[0], []).append(name)
    return out
