"""Unsupervised phoneme generator trained adversarially against unpaired text.

The generator is a small CNN over acoustic frames.  A CNN discriminator tells
one-hot phoneme sequences spelled from unpaired text apart from the
generator's (segment-pooled) output distributions.  Training minimises

    L_gan + lambda * L_gp + gamma * L_sp + eta * L_pd + delta * L_ss

over the generator and maximises the adversarial part over the discriminator.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import CorpusBundle, LanguageSpec, Utterance
from .numerics import Adam, Conv1d, NonFiniteError, conv_out_len, grad, kmeans
from .numerics.kmeans import assign_clusters
from .wfst import PhonemeLattice

log = logging.getLogger(__name__)


class BridgeDivergence(NonFiniteError):
    pass


@dataclass
class GanConfig:
    gp_weight: float = 1.5          # lambda
    smooth_weight: float = 0.05     # gamma
    diversity_weight: float = 0.5   # eta
    recon_weight: float = 0.0       # delta
    k_clusters: int = 8
    steps: int = 2000
    batch_size: int = 32
    gen_lr: float = 1e-3
    disc_lr: float = 1e-3
    disc_updates: int = 1
    gen_hidden: int = 64
    gen_width: int = 3
    gen_stride: int = 1
    gen_padding: int = 1
    disc_hidden: int = 64
    disc_width: int = 3
    gp_mode: str = "exact"          # "exact" double backward or "fd" central differences
    gp_fd_eps: float = 1e-3
    generator_loss: str = "nonsaturating"
    straight_through: bool = True   # discriminator sees hard one-hot segments, gradients flow through softmax
    segment_by: str = "clusters"    # "clusters": runs of k-means ids; "argmax": runs of the generator's argmax
    kmeans_iters: int = 25
    eval_every: int = 250

    def __post_init__(self):
        for name in ("gp_weight", "smooth_weight", "diversity_weight", "recon_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.k_clusters < 2:
            raise ValueError("k_clusters must be >= 2")
        if self.gp_mode not in ("exact", "fd"):
            raise ValueError(f"unknown gp_mode {self.gp_mode}")
        if self.segment_by not in ("clusters", "argmax"):
            raise ValueError(f"unknown segment_by {self.segment_by}")
        if self.generator_loss not in ("nonsaturating", "minimax"):
            raise ValueError(f"unknown generator_loss {self.generator_loss}")

    @classmethod
    def from_dict(cls, d: dict) -> "GanConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown gan config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- networks

def _mask(lengths, t_max) -> torch.Tensor:
    return torch.arange(t_max)[None, :] < torch.as_tensor(lengths)[:, None]


def pad_batch(seqs, dtype=torch.float32):
    lengths = [len(s) for s in seqs]
    out = torch.zeros(len(seqs), max(lengths), np.asarray(seqs[0]).shape[-1], dtype=dtype)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(np.asarray(s), dtype=dtype)
    return out, torch.tensor(lengths)


class Generator(nn.Module):
    """conv -> ReLU -> linear phoneme logits (or one linear conv when ``hidden`` is 0),
    plus the cluster head used only in training."""

    def __init__(self, d_in, n_phonemes, k_clusters, hidden=64, width=3, stride=1, padding=1, dtype=torch.float32):
        super().__init__()
        # hidden=0: a single linear convolution straight to phoneme logits
        self.conv = Conv1d(d_in, hidden or n_phonemes, width, stride, padding, dtype=dtype)
        self.out = nn.Linear(hidden, n_phonemes, dtype=dtype) if hidden else None
        self.aux = nn.Linear(n_phonemes, k_clusters, dtype=dtype)

    @property
    def receptive_field(self) -> int:
        return self.conv.width

    def out_lengths(self, lengths):
        c = self.conv
        return torch.tensor([conv_out_len(int(t), c.width, c.stride, c.padding) for t in lengths])

    def forward(self, x, lengths=None):
        """Phoneme logits (B, T', K) for frames (B, T, D)."""
        if lengths is not None:
            x = x * _mask(lengths, x.shape[1])[..., None]
        h = self.conv(x)
        return h if self.out is None else self.out(torch.relu(h))

    def stride_map(self, n_frames: int) -> list[tuple[int, int]]:
        """Frames owned by each output step; a partition of [0, n_frames)."""
        c = self.conv
        n = conv_out_len(n_frames, c.width, c.stride, c.padding)
        spans = [(min(i * c.stride, n_frames), min((i + 1) * c.stride, n_frames)) for i in range(n)]
        spans[-1] = (spans[-1][0], n_frames)
        return spans


class Discriminator(nn.Module):
    """Three-layer CNN over phoneme distributions; returns one logit per sequence (mean over time)."""

    def __init__(self, n_phonemes, hidden=64, width=3, dtype=torch.float32):
        super().__init__()
        pad = width // 2
        self.c1 = Conv1d(n_phonemes, hidden, width, 1, pad, dtype=dtype)
        self.c2 = Conv1d(hidden, hidden, width, 1, pad, dtype=dtype)
        self.c3 = Conv1d(hidden, 1, width, 1, pad, dtype=dtype)

    def forward(self, x, lengths):
        m = _mask(lengths, x.shape[1])[..., None].to(x.dtype)
        h = F.leaky_relu(self.c1(x * m), 0.2) * m
        h = F.leaky_relu(self.c2(h), 0.2) * m
        h = self.c3(h) * m
        return h.sum((1, 2)) / m.sum((1, 2))

    def prob(self, x, lengths):
        return torch.sigmoid(self(x, lengths))


# ---------------------------------------------------------------- segment pooling

def segment_pool(probs, lengths, labels=None):
    """Mean-pool runs of equal label so the discriminator sees one step per segment.

    Runs are taken over ``labels`` (B, T) when given (e.g. cluster ids), else
    over the argmax of ``probs``.  Returns (pooled (B, S, K), segment counts).
    """
    b, t, k = probs.shape
    mask = _mask(lengths, t)
    arg = probs.argmax(-1) if labels is None else torch.as_tensor(labels)[:, :t]
    change = torch.ones_like(arg, dtype=torch.long)
    change[:, 1:] = (arg[:, 1:] != arg[:, :-1]).long()
    seg = torch.cumsum(change, 1) - 1
    seg = torch.where(mask, seg, torch.zeros_like(seg))
    n_seg = torch.where(mask, seg, torch.full_like(seg, -1)).max(1).values + 1
    s_max = int(n_seg.max())
    onehot = F.one_hot(seg, s_max).to(probs.dtype) * mask[..., None].to(probs.dtype)  # (B, T, S)
    counts = onehot.sum(1).clamp(min=1)
    pooled = onehot.transpose(1, 2) @ probs / counts[..., None]
    return pooled, n_seg


# ---------------------------------------------------------------- loss terms

def gan_value(p_real, p_fake, clamp: float = 1e-7) -> torch.Tensor:
    """E[log C(real)] + E[log(1 - C(fake))] from discriminator probabilities."""
    for name, p in (("real", p_real), ("fake", p_fake)):
        if not torch.isfinite(p).all() or (p < 0).any() or (p > 1).any():
            raise ValueError(f"discriminator {name} outputs outside (0, 1)")
    p_real = p_real.clamp(clamp, 1 - clamp)
    p_fake = p_fake.clamp(clamp, 1 - clamp)
    return torch.log(p_real).mean() + torch.log1p(-p_fake).mean()


def loss_gan(disc, real, real_lengths, fake, fake_lengths) -> torch.Tensor:
    """E[log C(real)] + E[log(1 - C(fake))], computed from logits for stability."""
    return F.logsigmoid(disc(real, real_lengths)).mean() + F.logsigmoid(-disc(fake, fake_lengths)).mean()


def _truncate_pairs(real, real_lengths, fake, fake_lengths):
    n = torch.minimum(torch.as_tensor(real_lengths), torch.as_tensor(fake_lengths))
    t = int(n.max())
    m = _mask(n, t)[..., None].to(real.dtype)
    return real[:, :t] * m, fake[:, :t] * m, n


def loss_gradient_penalty(disc, real, real_lengths, fake, fake_lengths, mu, mode="exact", fd_eps=1e-3):
    """Batch mean of (||d logit / d input|| - 1)^2 at mu*fake + (1-mu)*real.

    Each real/fake pair is cut to the shorter of the two lengths.  ``mode="fd"``
    replaces the input gradient by central differences (still differentiable in
    the discriminator's parameters).
    """
    real_t, fake_t, n = _truncate_pairs(real, real_lengths, fake, fake_lengths)
    mu = torch.as_tensor(mu, dtype=real.dtype)
    if mu.dim() == 1:
        mu = mu[:, None, None]
    mixed = mu * fake_t + (1 - mu) * real_t
    if mode == "exact":
        if not mixed.requires_grad:
            mixed = mixed.detach().requires_grad_(True)
        out = disc(mixed, n)
        (g,) = torch.autograd.grad(out.sum(), mixed, create_graph=True)
    else:
        g = _fd_input_grad(disc, mixed.detach(), n, fd_eps)
    if not torch.isfinite(g).all():
        raise NonFiniteError("non-finite discriminator input gradient")
    norm = torch.linalg.vector_norm(g.flatten(1), dim=1)
    return ((norm - 1) ** 2).mean()


def _fd_input_grad(disc, x, lengths, eps):
    b, t, k = x.shape
    m = _mask(lengths, t)
    cols = []
    for i in range(t):
        for j in range(k):
            e = torch.zeros_like(x)
            e[:, i, j] = eps
            cols.append((disc(x + e, lengths) - disc(x - e, lengths)) / (2 * eps))
    g = torch.stack(cols, 1).view(b, t, k)
    return g * m[..., None]


def loss_smoothness(probs, lengths=None) -> torch.Tensor:
    """Sum over consecutive steps of ||p_t - p_{t+1}||^2, averaged over the batch.

    Accepts a single (T, K) distribution sequence or a padded batch.
    """
    if probs.dim() == 2:
        probs = probs[None]
        lengths = [probs.shape[1]]
    if probs.shape[1] < 2:
        return probs.sum() * 0
    diff = (probs[:, 1:] - probs[:, :-1]).pow(2).sum(-1)
    pair_mask = _mask(torch.as_tensor(lengths) - 1, probs.shape[1] - 1).to(probs.dtype)
    return (diff * pair_mask).sum(1).mean()


def loss_diversity(probs, lengths=None) -> torch.Tensor:
    """Mean over the batch of -H(time-averaged distribution); minimising it spreads phoneme usage."""
    if probs.dim() == 2:
        probs = probs[None]
        lengths = [probs.shape[1]]
    m = _mask(lengths, probs.shape[1])[..., None].to(probs.dtype)
    avg = (probs * m).sum(1) / m.sum(1)
    ent = -(avg * torch.log(avg.clamp(min=1e-12))).sum(-1)
    return -ent.mean()


def loss_reconstruction(aux_head, features, clusters, lengths=None) -> torch.Tensor:
    """-sum_t log P(cluster_t | features_t) per sequence, averaged over the batch."""
    if features.dim() == 2:
        features = features[None]
        clusters = torch.as_tensor(clusters)[None]
        lengths = [features.shape[1]]
    clusters = torch.as_tensor(clusters, dtype=torch.long)
    if clusters.shape != features.shape[:2]:
        raise ValueError(f"cluster targets {tuple(clusters.shape)} misaligned with features {tuple(features.shape[:2])}")
    logp = torch.log_softmax(aux_head(features), -1)
    nll = -logp.gather(-1, clusters.clamp(min=0)[..., None]).squeeze(-1)
    m = _mask(lengths, features.shape[1]).to(nll.dtype)
    return (nll * m).sum(1).mean()


# ---------------------------------------------------------------- data helpers

def text_to_onehot(words, spec: LanguageSpec) -> np.ndarray:
    """Phoneme one-hot rows for a sentence, with back-to-back repeats merged."""
    phones = spec.expand(words)
    phones = [p for i, p in enumerate(phones) if i == 0 or p != phones[i - 1]]
    return np.eye(spec.n_phonemes, dtype=np.float32)[phones]


def step_targets(values: np.ndarray, spans) -> np.ndarray:
    """Majority vote of per-frame integer ``values`` inside each step's frame span (ties -> smallest)."""
    out = np.empty(len(spans), dtype=np.int64)
    for i, (lo, hi) in enumerate(spans):
        out[i] = np.bincount(values[lo:hi]).argmax()
    return out


@dataclass
class TrainBatch:
    feats: torch.Tensor
    feat_lengths: torch.Tensor
    clusters: torch.Tensor
    text: torch.Tensor
    text_lengths: torch.Tensor
    interp_coeff: float


# ---------------------------------------------------------------- inference

def generate(features, generator: Generator) -> PhonemeLattice:
    x = torch.as_tensor(np.asarray(features), dtype=next(generator.parameters()).dtype)
    if x.shape[0] < 1 or conv_out_len(x.shape[0], generator.conv.width, generator.conv.stride, generator.conv.padding) < 1:
        raise ValueError(f"input of {x.shape[0]} frames shorter than the generator receptive field")
    with torch.no_grad():
        lp = torch.log_softmax(generator(x[None])[0], -1)
    return PhonemeLattice(lp.double().numpy(), generator.stride_map(x.shape[0]))


def phoneme_error_rate(generator: Generator, utterances: list[Utterance]) -> float:
    """Fraction of generator steps whose argmax differs from the majority gold phoneme of its frames."""
    wrong = total = 0
    for u in utterances:
        lat = generate(u.features, generator)
        gold = step_targets(u.frame_phonemes(), lat.stride_map)
        wrong += int((lat.log_probs.argmax(1) != gold).sum())
        total += len(gold)
    return wrong / total


def oracle_lattice(u: Utterance, n_phonemes: int) -> PhonemeLattice:
    """Frame-rate one-hot lattice of the gold phonemes."""
    lat = PhonemeLattice.from_labels(u.frame_phonemes(), n_phonemes)
    return lat


# ---------------------------------------------------------------- training

class BridgeTrainer:
    def __init__(self, corpus: CorpusBundle, config: GanConfig, seed: int = 0):
        self.corpus, self.cfg, self.seed = corpus, config, seed
        spec = corpus.spec
        torch.manual_seed(seed)
        self.gen = Generator(spec.feature_dim, spec.n_phonemes, config.k_clusters, config.gen_hidden,
                             config.gen_width, config.gen_stride, config.gen_padding)
        self.disc = Discriminator(spec.n_phonemes, config.disc_hidden, config.disc_width)
        self.rng = np.random.default_rng(seed)
        frames = np.concatenate([u.features for u in corpus.train])
        self.centroids, _, self.kmeans_history = kmeans(frames, config.k_clusters, config.kmeans_iters, seed)
        self.clusters = []
        for u in corpus.train:
            per_frame = assign_clusters(u.features, self.centroids)
            self.clusters.append(step_targets(per_frame, self.gen.stride_map(u.n_frames)))
        self.text = [text_to_onehot(w, spec) for w in corpus.unpaired_text]
        self.g_opt = Adam(self.gen.named_parameters(), lr=config.gen_lr, beta1=0.5, beta2=0.98)
        self.d_opt = Adam(self.disc.named_parameters(), lr=config.disc_lr, beta1=0.5, beta2=0.98)

    def sample_batch(self) -> TrainBatch:
        bs = self.cfg.batch_size
        ai = self.rng.integers(len(self.corpus.train), size=bs)
        ti = self.rng.integers(len(self.text), size=bs)
        feats, flen = pad_batch([self.corpus.train[i].features for i in ai])
        cl = torch.full((bs, int(self.gen.out_lengths(flen).max())), -1, dtype=torch.long)
        for r, i in enumerate(ai):
            cl[r, : len(self.clusters[i])] = torch.as_tensor(self.clusters[i])
        text, tlen = pad_batch([self.text[i] for i in ti])
        return TrainBatch(feats, flen, cl, text, tlen, float(self.rng.uniform()))

    def losses(self, batch: TrainBatch, detach_fake: bool = False) -> dict[str, torch.Tensor]:
        logits = self.gen(batch.feats, batch.feat_lengths)
        glen = self.gen.out_lengths(batch.feat_lengths)
        probs = torch.softmax(logits, -1) * _mask(glen, logits.shape[1])[..., None]
        fake, flen = segment_pool(probs, glen, batch.clusters if self.cfg.segment_by == "clusters" else None)
        if self.cfg.straight_through:
            hard = F.one_hot(fake.argmax(-1), fake.shape[-1]).to(fake.dtype) * _mask(flen, fake.shape[1])[..., None]
            fake = hard + fake - fake.detach()
        if detach_fake:
            fake = fake.detach()
        return {
            "probs": probs,
            "fake": fake,
            "fake_lengths": flen,
            "gan": loss_gan(self.disc, batch.text, batch.text_lengths, fake, flen),
            "sp": loss_smoothness(probs, glen),
            "pd": loss_diversity(probs, glen),
            "ss": loss_reconstruction(self.gen.aux, probs, batch.clusters, glen),
        }

    def objective(self, batch: TrainBatch) -> dict[str, float]:
        """All five terms and the weighted total on ``batch`` (no parameter updates)."""
        L = self.losses(batch)
        gp = loss_gradient_penalty(self.disc, batch.text, batch.text_lengths, L["fake"].detach(),
                                   L["fake_lengths"], batch.interp_coeff, self.cfg.gp_mode, self.cfg.gp_fd_eps)
        c = self.cfg
        terms = {k: float(v.detach()) for k, v in (("gan", L["gan"]), ("gp", gp), ("sp", L["sp"]), ("pd", L["pd"]),
                                                   ("ss", L["ss"]))}
        terms["total"] = (terms["gan"] + c.gp_weight * terms["gp"] + c.smooth_weight * terms["sp"]
                          + c.diversity_weight * terms["pd"] + c.recon_weight * terms["ss"])
        return terms

    def disc_step(self, batch: TrainBatch) -> dict[str, float]:
        L = self.losses(batch, detach_fake=True)
        gp = loss_gradient_penalty(self.disc, batch.text, batch.text_lengths, L["fake"], L["fake_lengths"],
                                   batch.interp_coeff, self.cfg.gp_mode, self.cfg.gp_fd_eps)
        d_loss = -L["gan"] + self.cfg.gp_weight * gp
        self._check(d_loss, "discriminator loss")
        self.d_opt.step(grad(self.disc, d_loss))
        return {"gan": float(L["gan"].detach()), "gp": float(gp.detach())}

    def gen_step(self, batch: TrainBatch) -> dict[str, float]:
        c = self.cfg
        L = self.losses(batch)
        if c.generator_loss == "nonsaturating":
            adv = -F.logsigmoid(self.disc(L["fake"], L["fake_lengths"])).mean()
        else:
            adv = F.logsigmoid(-self.disc(L["fake"], L["fake_lengths"])).mean()
        g_loss = adv + c.smooth_weight * L["sp"] + c.diversity_weight * L["pd"] + c.recon_weight * L["ss"]
        self._check(g_loss, "generator loss")
        self.g_opt.step(grad(self.gen, g_loss))
        return {"sp": float(L["sp"].detach()), "pd": float(L["pd"].detach()), "ss": float(L["ss"].detach()),
                "g_adv": float(adv.detach())}

    def _check(self, value, what):
        if not torch.isfinite(value):
            raise BridgeDivergence(f"{what} is {float(value)}; lower learning rates or the gradient-penalty weight")

    def train(self, log_sink=None) -> list[dict]:
        c = self.cfg
        records = []
        for step in range(1, c.steps + 1):
            for _ in range(c.disc_updates):
                d = self.disc_step(self.sample_batch())
            g = self.gen_step(self.sample_batch())
            rec = {"step": step, "gan": d["gan"], "gp": d["gp"], "sp": g["sp"], "pd": g["pd"], "ss": g["ss"],
                   "g_adv": g["g_adv"]}
            if c.eval_every and (step % c.eval_every == 0 or step == c.steps):
                rec["dev_per"] = phoneme_error_rate(self.gen, self.corpus.dev)
                log.info("bridge step %d dev PER %.3f", step, rec["dev_per"])
            rec = {k: (round(v, 6) if isinstance(v, float) else v) for k, v in rec.items()}
            records.append(rec)
            if log_sink is not None:
                log_sink.write(json.dumps(rec) + "\n")
        return records


def train_bridge(corpus: CorpusBundle, config: GanConfig | None = None, seed: int = 0, log_sink=None):
    """Returns (trainer with trained generator/aux/discriminator, per-step log records)."""
    config = config or GanConfig()
    if not corpus.unpaired_text:
        raise ValueError("unpaired text corpus is empty")
    trainer = BridgeTrainer(corpus, config, seed)
    records = trainer.train(log_sink)
    return trainer, records


class BridgeModel(nn.Module):
    """Container for checkpointing: ``gen`` (incl. ``gen.aux``) and ``disc``.

    Only ``gen.conv`` and ``gen.out`` are used at inference; the cluster head and
    discriminator are training-only.
    """

    INFERENCE_PREFIXES = ("gen.conv", "gen.out")

    def __init__(self, gen: Generator, disc: Discriminator):
        super().__init__()
        self.gen, self.disc = gen, disc


def bridge_from_config(spec: LanguageSpec, config: GanConfig) -> BridgeModel:
    gen = Generator(spec.feature_dim, spec.n_phonemes, config.k_clusters, config.gen_hidden,
                    config.gen_width, config.gen_stride, config.gen_padding)
    return BridgeModel(gen, Discriminator(spec.n_phonemes, config.disc_hidden, config.disc_width))
