"""Weighted transducers over the tropical semiring, for phoneme-lattice to subword decoding.

Labels are non-negative ints; ``EPS`` marks an epsilon label.  Weights are
costs (-log probabilities) combined with (min, +).
"""
from __future__ import annotations

import heapq
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

EPS = -1


class NoPathError(RuntimeError):
    pass


@dataclass(frozen=True)
class Arc:
    src: int
    dst: int
    ilabel: int
    olabel: int
    weight: float


class Transducer:
    def __init__(self, n_states: int = 0, start: int = 0, isyms=None, osyms=None):
        self.n_states = n_states
        self.start = start
        self.finals: dict[int, float] = {}
        self.arcs: list[Arc] = []
        self.isyms = None if isyms is None else frozenset(isyms)
        self.osyms = None if osyms is None else frozenset(osyms)
        self._out: dict[int, list[Arc]] | None = None

    def add_state(self) -> int:
        self.n_states += 1
        return self.n_states - 1

    def add_arc(self, src, dst, ilabel, olabel, weight=0.0):
        weight = float(weight)
        if not math.isfinite(weight):
            raise ValueError("arc weights must be finite")
        self.arcs.append(Arc(src, dst, ilabel, olabel, weight))
        self._out = None

    def set_final(self, state, weight=0.0):
        self.finals[state] = float(weight)

    def out_arcs(self, state) -> list[Arc]:
        if self._out is None:
            self._out = defaultdict(list)
            for a in self.arcs:
                self._out[a.src].append(a)
        return self._out.get(state, [])

    def input_alphabet(self) -> set[int]:
        return {a.ilabel for a in self.arcs if a.ilabel != EPS}

    def output_alphabet(self) -> set[int]:
        return {a.olabel for a in self.arcs if a.olabel != EPS}

    # ---- text format: "src dst in out weight" per arc, "state weight" per final
    def to_text(self) -> str:
        def lab(x):
            return "<eps>" if x == EPS else str(x)

        ordered = [a for a in self.arcs if a.src == self.start] + [a for a in self.arcs if a.src != self.start]
        lines = [f"{a.src} {a.dst} {lab(a.ilabel)} {lab(a.olabel)} {a.weight!r}" for a in ordered]
        finals = sorted(self.finals.items(), key=lambda kv: kv[0] != self.start)
        lines += [f"{s} {w!r}" for s, w in finals]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Transducer":
        def lab(x):
            return EPS if x == "<eps>" else int(x)

        t = cls()
        start = None
        top = -1
        for line in text.splitlines():
            parts = line.split()
            if not parts:
                continue
            if len(parts) == 5:
                src, dst = int(parts[0]), int(parts[1])
                t.arcs.append(Arc(src, dst, lab(parts[2]), lab(parts[3]), float(parts[4])))
                top = max(top, src, dst)
            elif len(parts) == 2:
                s = int(parts[0])
                t.finals[s] = float(parts[1])
                top = max(top, s)
            else:
                raise ValueError(f"bad transducer line: {line!r}")
            if start is None:
                start = int(parts[0])
        t.start = 0 if start is None else start
        t.n_states = top + 1
        return t

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "Transducer":
        with open(path) as fh:
            return cls.from_text(fh.read())


def compile_lexicon(lexicon: dict[int, tuple[int, ...]], silence: int | None = None, phonemes=None) -> Transducer:
    """Closure of the lexicon: phoneme strings that split into entries map to the entries' subwords.

    The subword label sits on the first phoneme arc of each entry.  State 0 is
    the start, state 1 the (final) word boundary.  With ``silence`` set, that
    phoneme may appear any number of times before or between words.
    ``phonemes`` declares the full input alphabet when some phonemes spell no entry.
    """
    if not lexicon:
        raise ValueError("empty lexicon")
    phones = {p for seq in lexicon.values() for p in seq} | set(phonemes or ())
    isyms = phones | ({silence} if silence is not None else set())
    t = Transducer(n_states=2, start=0, isyms=isyms, osyms=set(lexicon))
    t.set_final(1)
    for word in sorted(lexicon):
        seq = lexicon[word]
        if not seq:
            raise ValueError(f"subword {word} has an empty spelling")
        nxt = 1 if len(seq) == 1 else t.add_state()
        for src in (0, 1):
            t.add_arc(src, nxt, seq[0], word)
        cur = nxt
        for i, p in enumerate(seq[1:], start=1):
            nxt = 1 if i == len(seq) - 1 else t.add_state()
            t.add_arc(cur, nxt, p, EPS)
            cur = nxt
    if silence is not None:
        for s in (0, 1):
            t.add_arc(s, s, silence, EPS)
    return t


@dataclass
class PhonemeLattice:
    log_probs: np.ndarray  # T' x K_p, rows log-normalised
    stride_map: list[tuple[int, int]]  # generator step -> [start, end) input frames

    @property
    def n_steps(self) -> int:
        return self.log_probs.shape[0]

    @property
    def n_frames(self) -> int:
        return self.stride_map[-1][1]

    @classmethod
    def from_labels(cls, labels, n_classes: int) -> "PhonemeLattice":
        """One-hot lattice (log 0 entries are -inf), one step per label."""
        lp = np.full((len(labels), n_classes), -np.inf)
        lp[np.arange(len(labels)), labels] = 0.0
        return cls(lp, [(i, i + 1) for i in range(len(labels))])


class LatticeAcceptor(Transducer):
    """Layered machine over generator steps with repeat collapsing.

    Input label: the phoneme emitted at a step.  Output label: that phoneme, or
    epsilon when it repeats the previous step's phoneme.  State ``(t, q)`` means
    ``t`` steps consumed with ``q`` emitted last.
    """

    def __init__(self, n_steps: int, n_classes: int):
        super().__init__(n_states=1 + n_steps * n_classes, start=0, isyms=range(n_classes), osyms=range(n_classes))
        self.n_steps = n_steps
        self.n_classes = n_classes

    def state(self, t: int, q: int) -> int:
        return 1 + (t - 1) * self.n_classes + q

    def step_of(self, state: int) -> int:
        return 0 if state == 0 else (state - 1) // self.n_classes + 1


def lattice_from_logits(lattice: PhonemeLattice) -> LatticeAcceptor:
    lp = np.asarray(lattice.log_probs, dtype=np.float64)
    n_steps, k = lp.shape
    acc = LatticeAcceptor(n_steps, k)
    prev_states = [(0, None)]
    for t in range(1, n_steps + 1):
        row = lp[t - 1]
        for src, prev in prev_states:
            for q in range(k):
                if not np.isfinite(row[q]):
                    continue
                acc.add_arc(src, acc.state(t, q), q, EPS if q == prev else q, -float(row[q]) + 0.0)
        prev_states = [(acc.state(t, q), q) for q in range(k)]
    for s, _ in prev_states:
        acc.set_final(s)
    return acc


def compose(a: Transducer, b: Transducer) -> Transducer:
    """Epsilon-aware composition a∘b (a's outputs feed b's inputs), built from reachable pairs.

    Epsilon interleavings are not filtered; duplicates only add equal-weight
    alternative paths, which (min, +) path search tolerates.
    """
    a_out = a.osyms if a.osyms is not None else frozenset(a.output_alphabet())
    b_in = b.isyms if b.isyms is not None else frozenset(b.input_alphabet())
    if not set(a_out) <= set(b_in):
        raise ValueError(f"alphabet mismatch: {sorted(set(a_out) - set(b_in))} not accepted by the right operand")
    b_index: dict[tuple[int, int], list[Arc]] = defaultdict(list)
    for arc in b.arcs:
        b_index[(arc.src, arc.ilabel)].append(arc)

    c = Transducer(isyms=a.isyms, osyms=b.osyms)
    ids: dict[tuple[int, int], int] = {}
    c.pair_of: list[tuple[int, int]] = []

    def sid(pair):
        if pair not in ids:
            ids[pair] = c.add_state()
            c.pair_of.append(pair)
            queue.append(pair)
        return ids[pair]

    queue: list[tuple[int, int]] = []
    c.start = sid((a.start, b.start))
    head = 0
    while head < len(queue):
        sa, sb = queue[head]
        head += 1
        src = ids[(sa, sb)]
        if sa in a.finals and sb in b.finals:
            c.set_final(src, a.finals[sa] + b.finals[sb])
        for arc in a.out_arcs(sa):
            if arc.olabel == EPS:
                c.add_arc(src, sid((arc.dst, sb)), arc.ilabel, EPS, arc.weight)
            else:
                for barc in b_index.get((sb, arc.olabel), ()):
                    c.add_arc(src, sid((arc.dst, barc.dst)), arc.ilabel, barc.olabel, arc.weight + barc.weight)
        for barc in b_index.get((sb, EPS), ()):
            c.add_arc(src, sid((sa, barc.dst)), EPS, barc.olabel, barc.weight)
    return c


def _topological_order(t: Transducer) -> list[int] | None:
    indeg = [0] * t.n_states
    for a in t.arcs:
        indeg[a.dst] += 1
    order = [s for s in range(t.n_states) if indeg[s] == 0]
    head = 0
    while head < len(order):
        s = order[head]
        head += 1
        for a in t.out_arcs(s):
            indeg[a.dst] -= 1
            if indeg[a.dst] == 0:
                order.append(a.dst)
    return order if len(order) == t.n_states else None


@dataclass
class DecodeResult:
    subwords: list[int]
    path_weight: float
    alignment: list[int]  # per generator step: index into subwords, -1 for silence/unaligned
    path: list[Arc] = field(default_factory=list, repr=False)
    no_path: bool = False
    frame_alignment: list[int] | None = None  # alignment projected onto input frames

    @property
    def inputs(self) -> list[int]:
        return [a.ilabel for a in self.path if a.ilabel != EPS]


def shortest_path(t: Transducer) -> DecodeResult:
    """Minimum-weight accepting path.

    Ties on weight go to the lexicographically smaller output prefix at each
    state, which is deterministic but not a global string order when output
    lengths differ.  Acyclic machines use a topological sweep (any weights);
    cyclic ones use Dijkstra and need non-negative weights.
    """
    best: dict[int, tuple[float, tuple[int, ...]]] = {t.start: (0.0, ())}
    back: dict[int, Arc] = {}
    order = _topological_order(t)
    if order is not None:
        for s in order:
            if s not in best:
                continue
            w, out = best[s]
            for a in t.out_arcs(s):
                cand = (w + a.weight, out + ((a.olabel,) if a.olabel != EPS else ()))
                if a.dst not in best or cand < best[a.dst]:
                    best[a.dst] = cand
                    back[a.dst] = a
    else:
        if any(a.weight < 0 for a in t.arcs):
            raise ValueError("cyclic machine with negative weights")
        done: set[int] = set()
        heap = [(0.0, (), t.start)]
        while heap:
            w, out, s = heapq.heappop(heap)
            if s in done or (w, out) != best.get(s):
                continue
            done.add(s)
            for a in t.out_arcs(s):
                cand = (w + a.weight, out + ((a.olabel,) if a.olabel != EPS else ()))
                if a.dst not in done and (a.dst not in best or cand < best[a.dst]):
                    best[a.dst] = cand
                    back[a.dst] = a
                    heapq.heappush(heap, (cand[0], cand[1], a.dst))
    finals = [(best[s][0] + fw, best[s][1], s) for s, fw in t.finals.items() if s in best]
    if not finals:
        raise NoPathError("no accepting path")
    weight, out, s = min(finals)
    path = []
    while s != t.start:
        arc = back[s]
        path.append(arc)
        s = arc.src
    path.reverse()
    return DecodeResult(list(out), weight, _step_alignment(path), path)


def _step_alignment(path: list[Arc], silence: int | None = None) -> list[int]:
    align, word = [], -1
    for a in path:
        if a.olabel != EPS:
            word += 1
        if a.ilabel == EPS:
            continue
        align.append(-1 if a.ilabel == silence else word)
    return align


def decode(lattice: PhonemeLattice, lex: Transducer, silence: int | None = None) -> DecodeResult:
    """Best subword sequence for a phoneme lattice; on failure returns an empty result with ``no_path``."""
    acceptor = lattice_from_logits(lattice)
    composed = compose(acceptor, lex)
    try:
        res = shortest_path(composed)
    except NoPathError:
        return DecodeResult([], math.inf, [-1] * lattice.n_steps, [], True, [-1] * lattice.n_frames)
    res.alignment = _step_alignment(res.path, silence)
    frames = [0] * lattice.n_frames
    for step, (lo, hi) in enumerate(lattice.stride_map):
        for f in range(lo, hi):
            frames[f] = res.alignment[step]
    res.frame_alignment = frames
    return res


def phoneme_string(lattice: PhonemeLattice) -> tuple[list[int], float]:
    """Best collapsed phoneme string of a lattice on its own (no lexicon)."""
    res = shortest_path(lattice_from_logits(lattice))
    return [a.olabel for a in res.path if a.olabel != EPS], res.path_weight
