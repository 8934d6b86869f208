"""Downstream heads, metrics and the fine-tuning loop.

Four tasks: intent classification (``ic``), slot filling (``sf``), entity
tagging (``ner``, slot spans with one collapsed label) and spoken question
answering (``sqa``).  Tagging is CTC over subwords interleaved with span
start/end markers.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import CorpusBundle, QAExample, Utterance
from .fusion import FusedModel, Prepared, join_question
from .lm import frame_token_index
from .numerics import Adam, AdamHyper, ctc_greedy_decode, ctc_loss_batch, grad

log = logging.getLogger(__name__)

TASKS = ("ic", "sf", "ner", "sqa")
TOKEN_REPEAT = 3  # token-rate inputs are stretched so tag CTC has room for span markers


class UnknownTaskError(ValueError):
    pass


@dataclass
class FinetuneConfig:
    steps: int = 600
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ic_hidden: int = 64
    tag_hidden: int = 128
    eval_every: int = 0  # 0: evaluate on dev only at the end

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("steps >= 0, batch_size >= 1 and lr > 0 required")

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown task config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- metrics

def edit_distance(a, b) -> int:
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def metric_wer(hyp, ref) -> float:
    """Edit distance over reference length; an empty reference scores 0 only for an empty hypothesis."""
    ref, hyp = list(ref), list(hyp)
    if not ref:
        return 0.0 if not hyp else float(len(hyp))
    return edit_distance(hyp, ref) / len(ref)


def corpus_wer(hyps, refs) -> float:
    errors = sum(edit_distance(h, r) for h, r in zip(hyps, refs))
    return errors / max(1, sum(len(r) for r in refs))


def metric_slot_f1(pred, gold) -> float:
    """Micro F1 over multisets of (label, start, end); 1.0 when both are empty."""
    from collections import Counter

    p, g = Counter(pred), Counter(gold)
    tp = sum((p & g).values())
    n_p, n_g = sum(p.values()), sum(g.values())
    if n_p == 0 and n_g == 0:
        return 1.0
    return 2 * tp / (n_p + n_g)


def metric_ff1_aos(pred: tuple[int, int] | None, gold: tuple[int, int]) -> tuple[float, float]:
    """Frame-overlap F1 and Jaccard overlap score of inclusive frame spans."""
    gs, ge = gold
    if ge < gs:
        raise ValueError(f"gold span {gold} is empty")
    if pred is None or pred[1] < pred[0]:
        return 0.0, 0.0
    ps, pe = pred
    inter = max(0, min(pe, ge) - max(ps, gs) + 1)
    if inter == 0:
        return 0.0, 0.0
    p = inter / (pe - ps + 1)
    r = inter / (ge - gs + 1)
    union = (pe - ps + 1) + (ge - gs + 1) - inter
    return 2 * p * r / (p + r), inter / union


def best_span(start: np.ndarray, end: np.ndarray, lo: int = 0, hi: int | None = None) -> tuple[int, int]:
    """argmax of start[s] + end[e] over lo <= s <= e < hi; ties go to the smallest (s, e)."""
    hi = len(start) if hi is None else hi
    if hi <= lo:
        raise ValueError("empty candidate range")
    s = np.asarray(start[lo:hi], dtype=np.float64)
    e = np.asarray(end[lo:hi], dtype=np.float64)
    scores = s[:, None] + e[None, :]
    scores[np.tril_indices(len(s), -1)] = -np.inf
    i, j = divmod(int(np.argmax(scores)), len(s))
    return lo + i, lo + j


# ---------------------------------------------------------------- tag sequences

def tag_vocab(n_subwords: int, n_labels: int) -> int:
    """Subwords, then a start and end marker per label; the CTC blank comes last."""
    return n_subwords + 2 * n_labels


def spans_from_bio(tags) -> list[tuple[str, int, int]]:
    spans, cur = [], None
    for i, t in enumerate(list(tags) + ["O"]):
        if cur is not None and not (t.startswith("I-") and t[2:] == cur[0]):
            spans.append((cur[0], cur[1], i - 1))
            cur = None
        if t.startswith("B-") or (t.startswith("I-") and cur is None):
            cur = (t[2:], i)
    return spans


def tag_target(words, spans, labels: list[str], n_subwords: int) -> list[int]:
    starts = {s: lab for lab, s, _ in spans}
    ends = {e: lab for lab, _, e in spans}
    out = []
    for i, w in enumerate(words):
        if i in starts:
            out.append(n_subwords + 2 * labels.index(starts[i]))
        out.append(int(w))
        if i in ends:
            out.append(n_subwords + 2 * labels.index(ends[i]) + 1)
    return out


def parse_tags(seq, labels: list[str], n_subwords: int) -> tuple[list[int], list[tuple[str, int, int]]]:
    """Inverse of :func:`tag_target`; unmatched markers are dropped."""
    words, spans, open_ = [], [], None
    for k in seq:
        if k < n_subwords:
            words.append(int(k))
            continue
        lab, is_end = labels[(k - n_subwords) // 2], (k - n_subwords) % 2 == 1
        if not is_end:
            open_ = (lab, len(words))
        elif open_ is not None and open_[0] == lab and len(words) > open_[1]:
            spans.append((lab, open_[1], len(words) - 1))
            open_ = None
    return words, spans


def task_labels(task: str, n_slots: int) -> list[str]:
    return ["ENT"] if task == "ner" else [str(k) for k in range(n_slots)]


def _gold_spans(u: Utterance, task: str):
    spans = spans_from_bio(u.slots)
    return [("ENT", s, e) for _, s, e in spans] if task == "ner" else spans


# ---------------------------------------------------------------- heads

class ICHead(nn.Module):
    """Sum-pool over time, then a one-hidden-layer MLP to intent logits."""

    def __init__(self, d_in, n_classes, hidden=64):
        super().__init__()
        self.fc1 = nn.Linear(d_in, hidden)
        self.fc2 = nn.Linear(hidden, n_classes)

    def pool(self, z, lengths):
        m = (torch.arange(z.shape[1])[None, :] < lengths[:, None]).to(z.dtype)
        return (z * m[..., None]).sum(1)

    def forward(self, z, lengths):
        return self.fc2(torch.relu(self.fc1(self.pool(z, lengths))))


class TagHead(nn.Module):
    def __init__(self, d_in, n_out, hidden=128):
        super().__init__()
        self.gru = nn.GRU(d_in, hidden, batch_first=True)
        self.out = nn.Linear(hidden, n_out + 1)

    def forward(self, z, lengths):
        h, _ = self.gru(z)
        return torch.log_softmax(self.out(h), -1)


class SpanHead(nn.Module):
    def __init__(self, d_in):
        super().__init__()
        self.proj = nn.Linear(d_in, 2)

    def forward(self, z, lengths):
        se = self.proj(z)
        return se[..., 0], se[..., 1]


def make_head(task: str, d_in: int, n_classes: int, config: FinetuneConfig) -> nn.Module:
    if task == "ic":
        return ICHead(d_in, n_classes, config.ic_hidden)
    if task in ("sf", "ner"):
        return TagHead(d_in, n_classes, config.tag_hidden)
    if task == "sqa":
        return SpanHead(d_in)
    raise UnknownTaskError(f"unknown task {task!r}; expected one of {', '.join(TASKS)}")


# ---------------------------------------------------------------- examples

@dataclass
class Example:
    item: Prepared
    intent: int = -1
    words: list[int] = field(default_factory=list)
    spans: list[tuple[str, int, int]] = field(default_factory=list)
    target: list[int] = field(default_factory=list)
    answer: tuple[int, int] | None = None  # inclusive passage frames


def build_examples(task: str, items: list[Prepared], sources, n_subwords: int, n_slots: int) -> list[Example]:
    """Pair prepared items with gold labels.  For ``sqa`` ``items`` are already joined question+passage."""
    labels = task_labels(task, n_slots)
    out = []
    for p, src in zip(items, sources):
        if task == "sqa":
            out.append(Example(p, answer=tuple(src.answer_frames)))
        elif task == "ic":
            out.append(Example(p, intent=src.intent))
        else:
            spans = _gold_spans(src, task)
            out.append(Example(p, words=list(src.subwords), spans=spans,
                               target=tag_target(src.subwords, spans, labels, n_subwords)))
    return out


def qa_items(qa: list[QAExample], prepare_fn, sep_id: int) -> list[Prepared]:
    return [join_question(prepare_fn(q.question.features), prepare_fn(q.passage.features), sep_id) for q in qa]


# ---------------------------------------------------------------- training

@dataclass
class EvalReport:
    task: str
    variant: str
    seed: int
    metrics: dict[str, float]
    trainable_params: int
    total_params: int
    steps: int
    trajectory: list[dict] = field(default_factory=list)

    @property
    def trainable_fraction(self) -> float:
        return self.trainable_params / max(1, self.total_params)

    def to_json(self) -> dict:
        d = asdict(self)
        d["trainable_fraction"] = self.trainable_fraction
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


class Finetuner:
    def __init__(self, model: FusedModel, task: str, n_classes: int, n_subwords: int, n_slots: int,
                 config: FinetuneConfig | None = None, seed: int = 0):
        if task not in TASKS:
            raise UnknownTaskError(f"unknown task {task!r}; expected one of {', '.join(TASKS)}")
        self.model, self.task, self.cfg, self.seed = model, task, config or FinetuneConfig(), seed
        self.n_subwords, self.labels = n_subwords, task_labels(task, n_slots)
        torch.manual_seed(seed)
        n_out = tag_vocab(n_subwords, len(self.labels)) if task in ("sf", "ner") else n_classes
        self.head = make_head(task, model.out_dim, n_out, self.cfg)
        self.params = dict(self.trainable_named_parameters())
        hyper = AdamHyper(self.cfg.lr, self.cfg.beta1, self.cfg.beta2, self.cfg.eps)
        self.opt = Adam(self.params.items(), hyper)
        self.rng = np.random.default_rng(seed)

    def trainable_named_parameters(self):
        out = [("fusion." + n, p) for n, p in self.model.trainable_named_parameters()]
        return out + [("head." + n, p) for n, p in self.head.named_parameters()]

    def param_counts(self) -> tuple[int, int]:
        total = sum(p.numel() for p in self.model.parameters()) + sum(p.numel() for p in self.head.parameters())
        return sum(p.numel() for p in self.params.values()), total

    def registry(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {}
        for name in self.params:
            if name.startswith("head."):
                g = "head"
            elif ".adapter." in name:
                g = "adapters"
            elif name.startswith("fusion.attn."):
                g = "attention"
            else:
                g = "other"
            groups.setdefault(g, []).append(name)
        return groups

    # -- forward pieces

    def _inputs(self, batch: list[Example]):
        z, lengths = self.model([ex.item for ex in batch])
        if self.task in ("sf", "ner") and self.model.level == "token":
            z = z.repeat_interleave(TOKEN_REPEAT, 1)
            lengths = lengths * TOKEN_REPEAT
        return z, lengths

    def _span_range(self, ex: Example) -> tuple[int, int]:
        p = ex.item
        if self.model.level == "token":
            return p.token_offset, max(len(p.tokens), p.token_offset + 1)
        return p.frame_offset, p.n_frames

    def _span_target(self, ex: Example) -> tuple[int, int] | None:
        p = ex.item
        s, e = ex.answer
        if self.model.level == "frame":
            return p.frame_offset + s, p.frame_offset + e
        if len(p.tokens) <= p.token_offset:
            return None
        idx = frame_token_index(p.frame_alignment, len(p.tokens), p.n_frames)
        ts, te = idx[p.frame_offset + s], idx[p.frame_offset + e]
        if ts < p.token_offset or te < ts:
            return None
        return ts, te

    def loss(self, batch: list[Example]) -> torch.Tensor:
        z, lengths = self._inputs(batch)
        if self.task == "ic":
            logits = self.head(z, lengths)
            return F.cross_entropy(logits, torch.tensor([ex.intent for ex in batch]))
        if self.task in ("sf", "ner"):
            lp = self.head(z, lengths)
            tl = [len(ex.target) for ex in batch]
            tgt = torch.zeros(len(batch), max(1, max(tl)), dtype=torch.long)
            for i, ex in enumerate(batch):
                tgt[i, : tl[i]] = torch.tensor(ex.target, dtype=torch.long)
            losses, ok = ctc_loss_batch(lp, tgt, lengths.tolist(), tl)
            if not ok.any():
                return z.sum() * 0
            return losses[ok].sum() / len(batch)
        start, end = self.head(z, lengths)
        terms = []
        for i, ex in enumerate(batch):
            tgt = self._span_target(ex)
            if tgt is None:
                continue
            lo, hi = self._span_range(ex)
            terms.append(F.cross_entropy(start[i, lo:hi][None], torch.tensor([tgt[0] - lo]))
                         + F.cross_entropy(end[i, lo:hi][None], torch.tensor([tgt[1] - lo])))
        if not terms:
            return z.sum() * 0
        return torch.stack(terms).sum() / len(batch)

    def predict(self, examples: list[Example], batch_size: int = 32) -> list:
        out = []
        with torch.no_grad():
            for i in range(0, len(examples), batch_size):
                batch = examples[i: i + batch_size]
                z, lengths = self._inputs(batch)
                if self.task == "ic":
                    out += self.head(z, lengths).argmax(-1).tolist()
                elif self.task in ("sf", "ner"):
                    lp = self.head(z, lengths)
                    for r, ex in enumerate(batch):
                        seq = ctc_greedy_decode(lp[r, : int(lengths[r])])
                        out.append(parse_tags(seq, self.labels, self.n_subwords))
                else:
                    start, end = self.head(z, lengths)
                    for r, ex in enumerate(batch):
                        out.append(self._predict_span(ex, start[r].numpy(), end[r].numpy()))
        return out

    def _predict_span(self, ex: Example, start, end) -> tuple[int, int] | None:
        p = ex.item
        lo, hi = self._span_range(ex)
        s, e = best_span(start, end, lo, hi)
        if self.model.level == "frame":
            return s - p.frame_offset, e - p.frame_offset
        frames = [f - p.frame_offset for f in range(p.frame_offset, p.n_frames) if s <= p.frame_alignment[f] <= e]
        return (min(frames), max(frames)) if frames else None

    def evaluate(self, examples: list[Example]) -> dict[str, float]:
        preds = self.predict(examples)
        if self.task == "ic":
            return {"accuracy": float(np.mean([p == ex.intent for p, ex in zip(preds, examples)]))}
        if self.task in ("sf", "ner"):
            pred_spans = [(i, *s) for i, (_, spans) in enumerate(preds) for s in spans]
            gold_spans = [(i, *s) for i, ex in enumerate(examples) for s in ex.spans]
            key = "slot_f1" if self.task == "sf" else "f1"
            return {key: metric_slot_f1(pred_spans, gold_spans),
                    "wer": corpus_wer([w for w, _ in preds], [ex.words for ex in examples])}
        scores = [metric_ff1_aos(p, ex.answer) for p, ex in zip(preds, examples)]
        return {"ff1": float(np.mean([s[0] for s in scores])), "aos": float(np.mean([s[1] for s in scores]))}

    def train(self, train: list[Example], dev: list[Example], log_sink=None) -> list[dict]:
        c = self.cfg
        records, order, pos = [], np.array([], dtype=int), 0
        for step in range(1, c.steps + 1):
            if pos + c.batch_size > len(order):
                order, pos = self.rng.permutation(len(train)), 0
            batch = [train[i] for i in order[pos: pos + c.batch_size]]
            pos += c.batch_size
            loss = self.loss(batch)
            self.opt.step(grad(self.params, loss))
            rec = {"step": step, "loss": round(float(loss.detach()), 6)}
            if c.eval_every and step % c.eval_every == 0 and step != c.steps:
                rec["dev"] = {k: round(v, 6) for k, v in self.evaluate(dev).items()}
            records.append(rec)
            if log_sink is not None:
                log_sink.write(json.dumps(rec) + "\n")
        return records


def finetune(model: FusedModel, task: str, train: list[Example], dev: list[Example], n_classes: int,
             n_subwords: int, n_slots: int, config: FinetuneConfig | None = None, seed: int = 0,
             log_sink=None) -> tuple[Finetuner, EvalReport]:
    """Train the head and the variant's trainable parts; report dev metrics."""
    tuner = Finetuner(model, task, n_classes, n_subwords, n_slots, config, seed)
    records = tuner.train(train, dev, log_sink)
    n_train, n_total = tuner.param_counts()
    report = EvalReport(task, model.variant, seed, tuner.evaluate(dev), n_train, n_total, tuner.cfg.steps,
                        [r for r in records if "dev" in r])
    return tuner, report


def pooled_embeddings(model: FusedModel, items: list[Prepared]) -> np.ndarray:
    """Sum-pooled fused representation per item (for inspection and probing)."""
    with torch.no_grad():
        z, lengths = model(items)
        m = (torch.arange(z.shape[1])[None, :] < lengths[:, None]).to(z.dtype)
        return (z * m[..., None]).sum(1).numpy()


def corpus_sources(bundle: CorpusBundle, task: str, split: str):
    return bundle.qa[split] if task == "sqa" else bundle.splits[split]
