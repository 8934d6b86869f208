import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speechsem.wfst import (
    EPS,
    NoPathError,
    PhonemeLattice,
    Transducer,
    compile_lexicon,
    compose,
    decode,
    lattice_from_logits,
    phoneme_string,
    shortest_path,
)

from oracles import brute_force_decode, collapse_runs, enumerate_paths, segmentations


def _arcs(t):
    return [(a.src, a.dst, a.ilabel, a.olabel, a.weight) for a in t.arcs]


def _linear(phones, isyms):
    t = Transducer(n_states=1, isyms=isyms, osyms=isyms)
    cur = 0
    for p in phones:
        nxt = t.add_state()
        t.add_arc(cur, nxt, p, p)
        cur = nxt
    t.set_final(cur)
    return t


def _random_lattice(rng, steps, k):
    logits = rng.normal(size=(steps, k)) * 2
    lp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    return PhonemeLattice(lp, [(i, i + 1) for i in range(steps)])


def _random_lexicon(rng, k_p, k_s, max_len=3):
    lex, seen = {}, set()
    while len(lex) < k_s:
        seq = tuple(int(x) for x in rng.integers(k_p, size=int(rng.integers(1, max_len + 1))))
        if seq not in seen:
            seen.add(seq)
            lex[len(lex)] = seq
    return lex


# ---------------------------------------------------------------- lexicon

def test_single_unit_entry_closure():
    lex = compile_lexicon({0: (1,)})
    for n in range(1, 6):
        outs = {o for _, _, o in enumerate_paths(_arcs(compose(_linear([1] * n, {1}), lex)), 0, _finals(compose(_linear([1] * n, {1}), lex)))}
        assert outs == {(0,) * n}


def _finals(t):
    return dict(t.finals)


def _accepted_outputs(phones, lex_t, isyms):
    c = compose(_linear(phones, isyms), lex_t)
    return {o for _, _, o in enumerate_paths(_arcs(c), c.start, _finals(c))}


def test_two_word_segmentation():
    lex = {0: (1, 2), 1: (2,)}
    assert _accepted_outputs([1, 2, 2], compile_lexicon(lex), {1, 2}) == {(0, 1)}


def test_lexicon_acceptance_matches_segmentation_oracle():
    lex = {0: (0,), 1: (0, 1), 2: (1, 2, 0), 3: (2, 2), 4: (1,)}
    lex_t = compile_lexicon(lex)
    for n in range(1, 5):
        for phones in itertools.product(range(3), repeat=n):
            assert _accepted_outputs(list(phones), lex_t, {0, 1, 2}) == set(segmentations(phones, lex)), phones


def test_empty_lexicon():
    with pytest.raises(ValueError):
        compile_lexicon({})


def test_silence_between_words():
    lex_t = compile_lexicon({0: (1,), 1: (2,)}, silence=3)
    assert _accepted_outputs([3, 1, 3, 3, 2, 3], lex_t, {1, 2, 3}) == {(0, 1)}


def test_text_format_roundtrip(tmp_path):
    t = compile_lexicon({0: (1, 2), 1: (2,), 2: (0, 1, 2)}, silence=3)
    t.set_final(2, 0.1 + 0.2)
    t.save(tmp_path / "lex.fst")
    again = Transducer.load(tmp_path / "lex.fst")
    assert again.to_text() == t.to_text()
    assert sorted(_arcs(again)) == sorted(_arcs(t))
    assert again.finals == t.finals


# ---------------------------------------------------------------- lattice acceptor

def test_onehot_lattice_collapses():
    lat = PhonemeLattice.from_labels([1, 1, 2], 3)
    phones, w = phoneme_string(lat)
    assert phones == [1, 2] and w == 0.0


def test_uniform_single_step_weights():
    acc = lattice_from_logits(PhonemeLattice(np.full((1, 4), -math.log(4)), [(0, 1)]))
    assert len(acc.arcs) == 4
    assert all(abs(a.weight - math.log(4)) < 1e-12 for a in acc.arcs)


def test_acceptor_is_layered():
    acc = lattice_from_logits(_random_lattice(np.random.default_rng(0), 4, 3))
    assert all(acc.step_of(a.dst) == acc.step_of(a.src) + 1 for a in acc.arcs)


@pytest.mark.parametrize("seed", range(5))
def test_best_phoneme_string_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    lat = _random_lattice(rng, 3, 3)
    best = min(
        (-sum(lat.log_probs[t, k] for t, k in enumerate(labels)), collapse_runs(labels))
        for labels in itertools.product(range(3), repeat=3)
    )
    phones, w = phoneme_string(lat)
    assert abs(w - best[0]) < 1e-9 and tuple(phones) == best[1]


# ---------------------------------------------------------------- composition

def test_compose_single_word():
    lat = PhonemeLattice.from_labels([1, 2], 3)
    res = decode(lat, compile_lexicon({0: (1, 2)}, phonemes=range(3)))
    assert res.subwords == [0] and res.path_weight == 0.0


def test_compose_empty_intersection():
    lat = PhonemeLattice.from_labels([2, 1], 3)
    lex = compile_lexicon({0: (1, 2)}, phonemes=range(3))
    c = compose(lattice_from_logits(lat), lex)
    with pytest.raises(NoPathError):
        shortest_path(c)
    res = decode(lat, lex)
    assert res.no_path and res.subwords == [] and len(res.frame_alignment) == 2


def test_compose_alphabet_mismatch():
    with pytest.raises(ValueError):
        compose(lattice_from_logits(PhonemeLattice.from_labels([0, 3], 4)), compile_lexicon({0: (0,)}))


@pytest.mark.parametrize("seed", range(4))
def test_composition_language_matches_cross_product(seed):
    rng = np.random.default_rng(seed)
    k, steps = 3, 4
    lex = _random_lexicon(rng, k, 4)
    acc = lattice_from_logits(_random_lattice(rng, steps, k))
    c = compose(acc, compile_lexicon(lex, phonemes=range(k)))
    got = {(i, o) for _, i, o in enumerate_paths(_arcs(c), c.start, _finals(c))}
    want = set()
    for labels in itertools.product(range(k), repeat=steps):
        for out in segmentations(collapse_runs(labels), lex):
            want.add((labels, out))
    assert got == want


# ---------------------------------------------------------------- shortest path

def test_shortest_path_single_and_two_paths():
    t = Transducer(n_states=3)
    t.add_arc(0, 1, 0, 5, 0.25)
    t.add_arc(1, 2, 1, EPS, 0.5)
    t.set_final(2)
    r = shortest_path(t)
    assert r.subwords == [5] and r.path_weight == 0.75
    t.add_arc(0, 2, 2, 6, 2.0)
    t.add_arc(0, 2, 3, 7, 1.0)
    r = shortest_path(t)
    assert r.path_weight == 0.75
    t.add_arc(0, 2, 3, 8, 0.5)
    assert shortest_path(t).subwords == [8]


def test_shortest_path_tie_is_lexicographic():
    t = Transducer(n_states=2)
    for o in (4, 2, 3):
        t.add_arc(0, 1, 0, o, 1.0)
    t.set_final(1)
    assert shortest_path(t).subwords == [2]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 20))
def test_shortest_path_matches_enumeration(seed, n):
    rng = np.random.default_rng(seed)
    t = Transducer(n_states=n)
    for _ in range(int(rng.integers(n, 3 * n))):
        a, b = sorted(rng.choice(n, size=2, replace=False))
        t.add_arc(int(a), int(b), int(rng.integers(3)), int(rng.integers(-1, 3)), float(rng.normal()))
    for s in rng.choice(n, size=int(rng.integers(1, 3)), replace=False):
        t.set_final(int(s), float(rng.uniform()))
    paths = enumerate_paths(_arcs(t), t.start, _finals(t))
    if not paths:
        with pytest.raises(NoPathError):
            shortest_path(t)
        return
    best_w = min(p[0] for p in paths)
    r = shortest_path(t)
    assert abs(r.path_weight - best_w) < 1e-9
    assert tuple(r.subwords) in {p[2] for p in paths if abs(p[0] - best_w) < 1e-9}
    assert abs(sum(a.weight for a in r.path) + t.finals[r.path[-1].dst if r.path else t.start] - r.path_weight) < 1e-9


def test_cyclic_machine_uses_dijkstra():
    t = Transducer(n_states=2)
    t.add_arc(0, 1, 0, 1, 1.0)
    t.add_arc(1, 0, 0, 2, 1.0)
    t.add_arc(0, 0, 1, EPS, 0.5)
    t.set_final(1)
    r = shortest_path(t)
    assert r.subwords == [1] and r.path_weight == 1.0


# ---------------------------------------------------------------- decode

def test_decode_gold_onehot_roundtrip():
    from speechsem.corpus import build_language, generate_corpus

    spec = build_language(3)
    bundle = generate_corpus(spec, {"train": 6, "dev": 6, "test": 6, "text_only": 6}, noise_std=0.0)
    lex = compile_lexicon(spec.lexicon, phonemes=spec.phonemes)
    for u in bundle.dev:
        res = decode(PhonemeLattice.from_labels(u.frame_phonemes(), spec.n_phonemes), lex)
        assert res.subwords == u.subwords and res.path_weight == 0.0
        assert len(res.alignment) == u.n_frames


@pytest.mark.parametrize("seed", range(30))
def test_decode_matches_brute_force(seed):
    rng = np.random.default_rng(1000 + seed)
    k_p, k_s, steps = int(rng.integers(2, 5)), int(rng.integers(2, 6)), int(rng.integers(1, 7))
    lex = _random_lexicon(rng, k_p, k_s)
    lat = _random_lattice(rng, steps, k_p)
    lp = lat.log_probs
    res = decode(lat, compile_lexicon(lex, phonemes=range(k_p)))
    best_w, outs = brute_force_decode(lp, lex)
    if not outs:
        assert res.no_path
        return
    assert abs(res.path_weight - best_w) < 1e-6
    assert tuple(res.subwords) in outs
    if len(outs) == 1:
        assert tuple(res.subwords) == next(iter(outs))
    # alignment covers every step, and word indices are monotone and complete
    assert len(res.alignment) == steps
    assert res.alignment == sorted(res.alignment)
    assert set(res.alignment) == set(range(len(res.subwords)))


def test_decode_not_worse_than_gold_path():
    rng = np.random.default_rng(5)
    lex = {0: (0, 1), 1: (2,), 2: (1, 0)}
    labels = [0, 0, 1, 2, 2, 1, 0]
    lp = np.log(np.full((7, 3), 0.1) + 0.7 * np.eye(3)[labels] + rng.uniform(0, 0.05, (7, 3)))
    lp -= np.log(np.exp(lp).sum(1, keepdims=True))
    res = decode(PhonemeLattice(lp, [(i, i + 1) for i in range(7)]), compile_lexicon(lex))
    gold_w = -sum(lp[t, k] for t, k in enumerate(labels))
    assert res.path_weight <= gold_w + 1e-12


def test_frame_alignment_projects_through_stride():
    lat = PhonemeLattice(np.log(np.eye(2)[[0, 1]]), [(0, 2), (2, 5)])
    res = decode(lat, compile_lexicon({0: (0,), 1: (1,)}))
    assert res.frame_alignment == [0, 0, 1, 1, 1]
