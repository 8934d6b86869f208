"""Brute-force reference implementations used by the tests.

Each oracle is deliberately naive (loops, exhaustive enumeration) and shares
no code with the package.
"""
from __future__ import annotations

import itertools
import math
from functools import lru_cache

import numpy as np


# ---------------------------------------------------------------- CTC

def ctc_collapse(path, blank):
    out, prev = [], None
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return tuple(out)


@lru_cache(maxsize=None)
def ctc_path_groups(T: int, C: int) -> dict:
    """collapsed label tuple -> array of every length-T path (over C symbols, blank = C-1) collapsing to it."""
    groups: dict[tuple, list] = {}
    for path in itertools.product(range(C), repeat=T):
        groups.setdefault(ctc_collapse(path, C - 1), []).append(path)
    return {k: np.array(v, dtype=np.int64) for k, v in groups.items()}


def ctc_enumerate(log_probs: np.ndarray, target) -> float:
    """-log sum over paths collapsing to ``target`` of prod_t p_t(path_t); +inf if none."""
    T, C = log_probs.shape
    paths = ctc_path_groups(T, C).get(tuple(target))
    if paths is None:
        return math.inf
    scores = log_probs[np.arange(T)[None, :], paths].sum(1)
    m = scores.max()
    return float(-(m + np.log(np.exp(scores - m).sum())))


# ---------------------------------------------------------------- layers

def conv1d_loop(x, w, b, stride=1, padding=0):
    """x (T, D), w (Dout, D, width)."""
    T, D = x.shape
    d_out, _, width = w.shape
    xp = np.zeros((T + 2 * padding, D))
    xp[padding: padding + T] = x
    n = (T + 2 * padding - width) // stride + 1
    y = np.zeros((n, d_out))
    for t in range(n):
        for o in range(d_out):
            acc = b[o] if b is not None else 0.0
            for j in range(width):
                for d in range(D):
                    acc += w[o, d, j] * xp[t * stride + j, d]
            y[t, o] = acc
    return y


def mha_loop(q, kv, heads, wq, wk, wv, wo, bq, bk, bv, bo):
    """Per-head loop attention for single sequences q (Tq, Dq), kv (Tk, Dk)."""
    Q = q @ wq.T + bq
    K = kv @ wk.T + bk
    V = kv @ wv.T + bv
    d = wq.shape[0]
    dh = d // heads
    out = np.zeros((q.shape[0], d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(q.shape[0]):
            scores = [float(Q[i, sl] @ K[j, sl]) / math.sqrt(dh) for j in range(kv.shape[0])]
            m = max(scores)
            e = [math.exp(s - m) for s in scores]
            z = sum(e)
            for j in range(kv.shape[0]):
                out[i, sl] += e[j] / z * V[j, sl]
    return out @ wo.T + bo


# ---------------------------------------------------------------- clustering

def best_two_partition(points):
    """Exhaustive minimum within-cluster sum of squares over all 2-partitions."""
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    best, best_labels = math.inf, None
    for mask in range(1, 2 ** (n - 1)):
        labels = np.array([(mask >> i) & 1 for i in range(n)])
        cost = sum(((x[labels == c] - x[labels == c].mean(0)) ** 2).sum() for c in (0, 1))
        if cost < best - 1e-12:
            best, best_labels = cost, labels
    return best, best_labels


# ---------------------------------------------------------------- sequences and spans

def edit_distance_enum(a, b) -> int:
    """Minimum edit cost by exploring every edit path (exponential; tiny inputs only)."""
    a, b = tuple(a), tuple(b)

    def rec(i, j):
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        return min(rec(i + 1, j) + 1, rec(i, j + 1) + 1, rec(i + 1, j + 1) + (a[i] != b[j]))

    return rec(0, 0)


def best_span_enum(start, end, lo, hi):
    best, arg = -math.inf, None
    for s in range(lo, hi):
        for e in range(s, hi):
            v = start[s] + end[e]
            if v > best:
                best, arg = v, (s, e)
    return arg


def span_scores_enum(pred, gold):
    """FF1 and Jaccard from explicit frame sets."""
    if pred is None:
        return 0.0, 0.0
    P = set(range(pred[0], pred[1] + 1))
    G = set(range(gold[0], gold[1] + 1))
    inter = len(P & G)
    if not inter:
        return 0.0, 0.0
    p, r = inter / len(P), inter / len(G)
    return 2 * p * r / (p + r), inter / len(P | G)


# ---------------------------------------------------------------- lexicon decoding

def segmentations(phones, lexicon):
    """Every way to split ``phones`` into lexicon entries; yields subword tuples."""
    inv: dict[tuple, list[int]] = {}
    for w, spelling in lexicon.items():
        inv.setdefault(tuple(spelling), []).append(w)

    def rec(i):
        if i == len(phones):
            yield ()
            return
        for j in range(i + 1, len(phones) + 1):
            for w in inv.get(tuple(phones[i:j]), []):
                for rest in rec(j):
                    yield (w,) + rest

    yield from rec(0)


def collapse_runs(labels):
    out = []
    for k in labels:
        if not out or out[-1] != k:
            out.append(k)
    return tuple(out)


def brute_force_decode(log_probs, lexicon):
    """Joint minimum over per-step phoneme choices and lexicon segmentations.

    The path cost is the sum of -log p over steps; the step labels collapse
    (repeated neighbours merge) into the phoneme string that must segment into
    lexicon entries.  Returns (best weight, best subword tuples at that weight).
    """
    T, K = log_probs.shape
    best_w, best_outs = math.inf, set()
    for labels in itertools.product(range(K), repeat=T):
        w = -sum(log_probs[t, k] for t, k in enumerate(labels))
        if not math.isfinite(w) or w > best_w + 1e-9:
            continue
        outs = set(segmentations(collapse_runs(labels), lexicon))
        if not outs:
            continue
        if w < best_w - 1e-9:
            best_w, best_outs = w, outs
        else:
            best_outs |= outs
    return best_w, best_outs


def enumerate_paths(arcs, start, finals, max_len=64):
    """Every accepting path of a small acyclic machine as (weight, inputs, outputs).

    ``arcs`` are (src, dst, ilabel, olabel, weight) tuples; label -1 is epsilon.
    """
    out_arcs: dict[int, list] = {}
    for a in arcs:
        out_arcs.setdefault(a[0], []).append(a)
    found = []

    def rec(s, w, ins, outs, depth):
        if depth > max_len:
            raise RuntimeError("machine is not acyclic")
        if s in finals:
            found.append((w + finals[s], tuple(ins), tuple(outs)))
        for _, dst, il, ol, aw in out_arcs.get(s, ()):
            rec(dst, w + aw, ins + ([il] if il != -1 else []), outs + ([ol] if ol != -1 else []), depth + 1)

    rec(start, 0.0, [], [], 0)
    return found
