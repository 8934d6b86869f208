"""Synthetic phonetic language, simulated encoder features and labelled task data.

The language is a small lexicon of subwords spelled with phonemes, plus an
intent grammar.  Intents come in pairs that use the same two keywords in
opposite orders, so a bag of phonemes (which is all a sum-pooled acoustic
representation can see) cannot tell the members of a pair apart.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FILLER = "filler"
SLOT = "slot"
WORD = "word"

DEFAULT_SIZES = {"n_phonemes": 8, "n_subwords": 20, "n_intents": 6, "n_slots": 2}
VALUES_PER_SLOT = 3
LENGTH_WEIGHTS = (0.15, 0.4, 0.3, 0.15)  # lexicon entry lengths 1..4
# K is the intent's keyword pair, S a slot value, F a filler.  Two fillers per
# template keep every template's fill count large, so excluding the audio
# sentences from the text corpus removes a negligible, unbiased share.
_TEMPLATE_SHAPES = (
    ("F", "K", "F", "S"),
    ("K", "F", "S", "F"),
    ("F", "K", "S", "F"),
    ("F", "S", "K", "F"),
    ("S", "F", "K", "F"),
)


class LanguageConstructionError(ValueError):
    pass


@dataclass
class LanguageSpec:
    phonemes: list[int]
    subwords: list[int]
    lexicon: dict[int, tuple[int, ...]]
    # intent -> list of templates; a template item is (WORD, id), (SLOT, k) or (FILLER, -1)
    intent_grammar: dict[int, list[list[tuple[str, int]]]]
    intent_keywords: dict[int, tuple[int, ...]]
    slot_values: dict[int, list[int]]
    fillers: list[int]
    prototypes: np.ndarray  # n_phonemes x feature_dim
    seed: int
    d_min: int = 2
    d_max: int = 5

    @property
    def n_phonemes(self) -> int:
        return len(self.phonemes)

    @property
    def n_subwords(self) -> int:
        return len(self.subwords)

    @property
    def n_intents(self) -> int:
        return len(self.intent_grammar)

    @property
    def n_slots(self) -> int:
        return len(self.slot_values)

    @property
    def feature_dim(self) -> int:
        return self.prototypes.shape[1]

    def slot_of(self, subword: int) -> int | None:
        for k, values in self.slot_values.items():
            if subword in values:
                return k
        return None

    def expand(self, subwords) -> list[int]:
        out: list[int] = []
        for s in subwords:
            if s not in self.lexicon:
                raise KeyError(f"unknown subword {s}")
            out.extend(self.lexicon[s])
        return out

    def boundary_safe(self, subwords) -> bool:
        """True if no word ends with the phoneme the next word starts with."""
        return all(self.lexicon[a][-1] != self.lexicon[b][0] for a, b in zip(subwords, subwords[1:]))

    def to_json(self) -> dict:
        return {
            "phonemes": self.phonemes,
            "subwords": self.subwords,
            "lexicon": {str(k): list(v) for k, v in self.lexicon.items()},
            "intent_grammar": {
                str(i): [[list(item) for item in tpl] for tpl in tpls] for i, tpls in self.intent_grammar.items()
            },
            "intent_keywords": {str(k): list(v) for k, v in self.intent_keywords.items()},
            "slot_values": {str(k): v for k, v in self.slot_values.items()},
            "fillers": self.fillers,
            "prototypes": self.prototypes.tolist(),
            "seed": self.seed,
            "d_min": self.d_min,
            "d_max": self.d_max,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LanguageSpec":
        return cls(
            phonemes=list(obj["phonemes"]),
            subwords=list(obj["subwords"]),
            lexicon={int(k): tuple(v) for k, v in obj["lexicon"].items()},
            intent_grammar={
                int(i): [[(item[0], int(item[1])) for item in tpl] for tpl in tpls]
                for i, tpls in obj["intent_grammar"].items()
            },
            intent_keywords={int(k): tuple(v) for k, v in obj["intent_keywords"].items()},
            slot_values={int(k): list(v) for k, v in obj["slot_values"].items()},
            fillers=list(obj["fillers"]),
            prototypes=np.asarray(obj["prototypes"], dtype=np.float64),
            seed=int(obj["seed"]),
            d_min=int(obj["d_min"]),
            d_max=int(obj["d_max"]),
        )


def count_spellings(n_phonemes: int, max_len: int = 4) -> int:
    """Number of phoneme strings of length 1..max_len with no phoneme repeated back to back."""
    return sum(n_phonemes * (n_phonemes - 1) ** (n - 1) for n in range(1, max_len + 1))


def _sample_lexicon(rng: np.random.Generator, n_phonemes: int, n_subwords: int) -> dict[int, tuple[int, ...]]:
    # skewed phoneme usage makes the unigram statistics informative for the GAN
    weights = 1.0 / np.arange(1, n_phonemes + 1) ** 0.7
    weights = weights[rng.permutation(n_phonemes)]
    weights /= weights.sum()
    seen: set[tuple[int, ...]] = set()
    lexicon: dict[int, tuple[int, ...]] = {}
    for s in range(n_subwords):
        for _ in range(1000):
            length = int(rng.choice(4, p=LENGTH_WEIGHTS)) + 1
            seq: list[int] = []
            while len(seq) < length:
                p = int(rng.choice(n_phonemes, p=weights))
                if not seq or seq[-1] != p:
                    seq.append(p)
            # prefix-free: a concatenation of entries then splits back into words one way only
            if not any(tuple(seq[: len(e)]) == e or e[: len(seq)] == tuple(seq) for e in seen):
                break
        else:
            raise LanguageConstructionError("could not draw a unique lexicon entry")
        seen.add(tuple(seq))
        lexicon[s] = tuple(seq)
    return lexicon


def build_language(
    seed: int,
    sizes: dict | None = None,
    feature_dim: int = 16,
    d_min: int = 2,
    d_max: int = 5,
    intent_mode: str = "order",
) -> LanguageSpec:
    """Sample a language.

    ``intent_mode="order"`` pairs intents that share two keywords and differ
    only in their order, so no bag-of-frames statistic separates them.
    ``"bag"`` gives every intent its own keywords.
    """
    if intent_mode not in ("order", "bag"):
        raise LanguageConstructionError(f"unknown intent_mode {intent_mode!r}")
    sizes = {**DEFAULT_SIZES, **(sizes or {})}
    n_p, n_s = sizes["n_phonemes"], sizes["n_subwords"]
    n_i, n_slots = sizes["n_intents"], sizes["n_slots"]
    if n_p < 4 or n_s < 8 or n_i < 2 or n_slots < 1:
        raise LanguageConstructionError(f"sizes too small: {sizes}")
    if count_spellings(n_p) < n_s:
        raise LanguageConstructionError(
            f"{n_p} phonemes give only {count_spellings(n_p)} spellings for {n_s} subwords"
        )
    n_pairs = (n_i + 1) // 2 if intent_mode == "order" else n_i
    n_keywords = 2 * n_pairs
    n_fillers = n_s - n_keywords - VALUES_PER_SLOT * n_slots
    if n_fillers < 2:
        raise LanguageConstructionError(f"{n_s} subwords cannot hold keywords, slot values and fillers")
    if not 1 <= d_min <= d_max:
        raise LanguageConstructionError("durations must satisfy 1 <= d_min <= d_max")

    rng = np.random.default_rng(seed)
    subwords = list(range(n_s))
    keywords = subwords[:n_keywords]
    slot_values = {
        k: subwords[n_keywords + VALUES_PER_SLOT * k: n_keywords + VALUES_PER_SLOT * (k + 1)] for k in range(n_slots)
    }
    fillers = subwords[n_keywords + VALUES_PER_SLOT * n_slots:]

    for _ in range(200):
        lexicon = _sample_lexicon(rng, n_p, n_s)
        # both keyword orders must be pronounceable without a merged boundary
        if all(
            lexicon[keywords[2 * j]][-1] != lexicon[keywords[2 * j + 1]][0]
            and lexicon[keywords[2 * j + 1]][-1] != lexicon[keywords[2 * j]][0]
            for j in range(n_pairs)
        ):
            break
    else:
        raise LanguageConstructionError("no boundary-safe keyword lexicon found")

    grammar: dict[int, list[list[tuple[str, int]]]] = {}
    intent_keywords: dict[int, tuple[int, ...]] = {}
    for j in range(n_pairs):
        a, b = keywords[2 * j], keywords[2 * j + 1]
        shapes = rng.choice(len(_TEMPLATE_SHAPES), size=2, replace=False)
        slot_types = rng.integers(0, n_slots, size=2)
        orders = ((a, b), (b, a)) if intent_mode == "order" else ((a, b),)
        for member, order in enumerate(orders):
            intent = len(orders) * j + member
            if intent >= n_i:
                break
            templates = []
            for shape_idx, slot_k in zip(shapes, slot_types):
                tpl: list[tuple[str, int]] = []
                for sym in _TEMPLATE_SHAPES[int(shape_idx)]:
                    if sym == "K":
                        tpl.extend((WORD, w) for w in order)
                    elif sym == "S":
                        tpl.append((SLOT, int(slot_k)))
                    else:
                        tpl.append((FILLER, -1))
                templates.append(tpl)
            grammar[intent] = templates
            intent_keywords[intent] = order

    prototypes = rng.standard_normal((n_p, feature_dim))
    return LanguageSpec(
        phonemes=list(range(n_p)),
        subwords=subwords,
        lexicon=lexicon,
        intent_grammar=grammar,
        intent_keywords=intent_keywords,
        slot_values=slot_values,
        fillers=fillers,
        prototypes=prototypes,
        seed=int(seed),
        d_min=d_min,
        d_max=d_max,
    )


def synthesize_features(
    phonemes,
    spec: LanguageSpec,
    noise_std: float,
    seed,
    d_min: int | None = None,
    d_max: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Simulated frozen-encoder output: each phoneme holds its prototype for a random duration.

    Returns (frames T x D float32, per-frame index into ``phonemes``).
    """
    phonemes = list(phonemes)
    if not phonemes:
        raise ValueError("empty phoneme sequence")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    for p in phonemes:
        if not 0 <= p < spec.n_phonemes:
            raise KeyError(f"unknown phoneme {p}")
    d_min = spec.d_min if d_min is None else d_min
    d_max = spec.d_max if d_max is None else d_max
    rng = np.random.default_rng(seed)
    durations = rng.integers(d_min, d_max + 1, size=len(phonemes))
    alignment = np.repeat(np.arange(len(phonemes)), durations)
    frames = spec.prototypes[np.asarray(phonemes)[alignment]]
    if noise_std > 0:
        frames = frames + noise_std * rng.standard_normal(frames.shape)
    return frames.astype(np.float32), alignment


@dataclass
class Utterance:
    features: np.ndarray
    phonemes: list[int]
    subwords: list[int]
    frame_alignment: np.ndarray  # per-frame index into phonemes
    intent: int | None = None
    slots: list[str] | None = None

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    def frame_phonemes(self) -> np.ndarray:
        return np.asarray(self.phonemes)[self.frame_alignment]

    def word_frame_spans(self, spec: LanguageSpec) -> list[tuple[int, int]]:
        """Inclusive frame span of every subword."""
        spans = []
        start_ph = 0
        for s in self.subwords:
            n = len(spec.lexicon[s])
            frames = np.nonzero((self.frame_alignment >= start_ph) & (self.frame_alignment < start_ph + n))[0]
            spans.append((int(frames[0]), int(frames[-1])))
            start_ph += n
        return spans


@dataclass
class QAExample:
    question: Utterance
    passage: Utterance
    answer_frames: tuple[int, int]  # inclusive
    answer_tokens: tuple[int, int]  # inclusive, subword positions in the passage


@dataclass
class CorpusBundle:
    spec: LanguageSpec
    splits: dict[str, list[Utterance]]
    unpaired_text: list[list[int]]
    qa: dict[str, list[QAExample]] = field(default_factory=dict)
    noise_std: float = 0.1

    @property
    def train(self):
        return self.splits["train"]

    @property
    def dev(self):
        return self.splits["dev"]

    @property
    def test(self):
        return self.splits["test"]


def _fill(template, spec: LanguageSpec, rng: np.random.Generator) -> tuple[list[int], list[str]]:
    words, tags = [], []
    for kind, arg in template:
        if kind == WORD:
            words.append(arg)
            tags.append("O")
        elif kind == SLOT:
            words.append(int(rng.choice(spec.slot_values[arg])))
            tags.append(f"B-{arg}")
        else:
            words.append(int(rng.choice(spec.fillers)))
            tags.append("O")
    return words, tags


def sample_sentence(spec: LanguageSpec, rng: np.random.Generator, intent: int | None = None):
    """Draw (intent, subwords, slot tags), rejecting fills that merge a word boundary."""
    for _ in range(1000):
        i = int(rng.integers(spec.n_intents)) if intent is None else intent
        templates = spec.intent_grammar[i]
        tpl = templates[int(rng.integers(len(templates)))]
        words, tags = _fill(tpl, spec, rng)
        if spec.boundary_safe(words):
            return i, words, tags
    raise LanguageConstructionError(f"intent {intent} cannot produce a boundary-safe sentence")


def text_side(seed: int, words) -> bool:
    """Seeded hash partition of sentence types: True for the unpaired-text side.

    Audio sentences are drawn from the other side only, which keeps the two
    corpora disjoint while leaving both unbiased samples of the grammar.
    """
    digest = hashlib.sha256(json.dumps([int(seed), [int(w) for w in words]]).encode()).digest()
    return digest[0] & 1 == 1


def _child_rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *path]))


def _make_utterance(spec, words, tags, intent, noise_std, seed_path) -> Utterance:
    phonemes = spec.expand(words)
    feats, align = synthesize_features(phonemes, spec, noise_std, np.random.SeedSequence(seed_path))
    return Utterance(feats, phonemes, list(words), align, intent, list(tags))


SPLITS = ("train", "dev", "test")


def generate_corpus(
    spec: LanguageSpec,
    counts: dict | None = None,
    noise_std: float = 0.1,
    seed: int | None = None,
) -> CorpusBundle:
    """Labelled splits, SQA examples and a disjoint unpaired text corpus.

    ``counts`` keys: train, dev, test, text_only, and optionally qa_train/qa_dev/qa_test.
    """
    counts = {"train": 600, "dev": 150, "test": 150, "text_only": 2000, **(counts or {})}
    for key in ("train", "dev", "test", "text_only"):
        if counts[key] < 1:
            raise ValueError(f"count {key} must be >= 1")
    seed = spec.seed if seed is None else seed
    splits: dict[str, list[Utterance]] = {}
    for si, name in enumerate(SPLITS):
        rng = _child_rng(seed, 1, si)
        n = counts[name]
        # round-robin intents so every split covers every intent
        intents = [k % spec.n_intents for k in range(n)]
        intents = [intents[k] for k in rng.permutation(n)]
        utts = []
        for k, intent in enumerate(intents):
            for _ in range(10_000):
                _, words, tags = sample_sentence(spec, rng, intent)
                if not text_side(seed, words):
                    break
            else:
                raise LanguageConstructionError(f"intent {intent} has no sentences on the audio side")
            utts.append(_make_utterance(spec, words, tags, intent, noise_std, [seed, 2, si, k]))
        splits[name] = utts

    rng = _child_rng(seed, 3)
    text: list[list[int]] = []
    attempts = 0
    while len(text) < counts["text_only"]:
        attempts += 1
        if attempts > 200 * counts["text_only"]:
            raise LanguageConstructionError("grammar too small for a disjoint text corpus")
        _, words, _ = sample_sentence(spec, rng)
        if text_side(seed, words):
            text.append(words)

    qa: dict[str, list[QAExample]] = {}
    for si, name in enumerate(SPLITS):
        n = counts.get(f"qa_{name}", max(1, counts[name] // 3))
        rng = _child_rng(seed, 4, si)
        qa[name] = [_make_qa(spec, rng, noise_std, [seed, 5, si, k]) for k in range(n)]
    return CorpusBundle(spec, splits, text, qa, noise_std)


def _make_qa(spec: LanguageSpec, rng, noise_std, seed_path) -> QAExample:
    n_parts = int(rng.integers(min(3, spec.n_intents), min(6, spec.n_intents) + 1))
    while True:
        intents = rng.permutation(spec.n_intents)[:n_parts]
        parts = [sample_sentence(spec, rng, int(i))[1] for i in intents]
        words = [w for p in parts for w in p]
        if spec.boundary_safe(words):
            break
    answer = int(rng.integers(n_parts))
    tok_start = sum(len(p) for p in parts[:answer])
    tok_end = tok_start + len(parts[answer]) - 1
    passage = _make_utterance(spec, words, ["O"] * len(words), None, noise_std, seed_path + [0])
    q_words = list(spec.intent_keywords[int(intents[answer])])
    question = _make_utterance(spec, q_words, ["O"] * len(q_words), None, noise_std, seed_path + [1])
    spans = passage.word_frame_spans(spec)
    return QAExample(question, passage, (spans[tok_start][0], spans[tok_end][1]), (tok_start, tok_end))


# ---------------------------------------------------------------- serialization

def _write_tensors(path: Path, arrays: list[np.ndarray]) -> dict:
    blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    path.write_bytes(blob)
    return {
        "file": path.name,
        "dtype": "float32-le",
        "shapes": [list(a.shape) for a in arrays],
        "sha256": hashlib.sha256(blob).hexdigest(),
    }


def _read_tensors(root: Path, entry: dict) -> list[np.ndarray]:
    flat = np.frombuffer((root / entry["file"]).read_bytes(), dtype="<f4")
    out, pos = [], 0
    for shape in entry["shapes"]:
        n = int(np.prod(shape))
        out.append(flat[pos:pos + n].reshape(shape).astype(np.float32))
        pos += n
    return out


def _utt_record(u: Utterance) -> dict:
    return {
        "phonemes": u.phonemes,
        "subwords": u.subwords,
        "frame_alignment": u.frame_alignment.tolist(),
        "intent": u.intent,
        "slots": u.slots,
    }


def _utt_from(rec: dict, feats: np.ndarray) -> Utterance:
    return Utterance(
        feats, rec["phonemes"], rec["subwords"], np.asarray(rec["frame_alignment"]), rec["intent"], rec["slots"]
    )


def save_corpus(bundle: CorpusBundle, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps(bundle.spec.to_json(), sort_keys=True))
    manifest = {"noise_std": bundle.noise_std, "tensors": {}}
    with open(out / "labels.jsonl", "w") as fh:
        for name, utts in bundle.splits.items():
            manifest["tensors"][name] = _write_tensors(out / f"{name}.f32", [u.features for u in utts])
            for k, u in enumerate(utts):
                fh.write(json.dumps({"kind": "utterance", "split": name, "index": k, **_utt_record(u)}) + "\n")
        for name, exs in bundle.qa.items():
            manifest["tensors"][f"qa_{name}_question"] = _write_tensors(
                out / f"qa_{name}_question.f32", [e.question.features for e in exs]
            )
            manifest["tensors"][f"qa_{name}_passage"] = _write_tensors(
                out / f"qa_{name}_passage.f32", [e.passage.features for e in exs]
            )
            for k, e in enumerate(exs):
                fh.write(json.dumps({
                    "kind": "qa", "split": name, "index": k,
                    "question": _utt_record(e.question), "passage": _utt_record(e.passage),
                    "answer_frames": list(e.answer_frames), "answer_tokens": list(e.answer_tokens),
                }) + "\n")
    with open(out / "text.txt", "w") as fh:
        for words in bundle.unpaired_text:
            fh.write(" ".join(map(str, words)) + "\n")
    (out / "tensors.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def load_corpus(path) -> CorpusBundle:
    root = Path(path)
    spec = LanguageSpec.from_json(json.loads((root / "spec.json").read_text()))
    manifest = json.loads((root / "tensors.json").read_text())
    tensors = {k: _read_tensors(root, v) for k, v in manifest["tensors"].items()}
    splits: dict[str, list[Utterance]] = {}
    qa: dict[str, list[QAExample]] = {}
    with open(root / "labels.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            name, k = rec["split"], rec["index"]
            if rec["kind"] == "utterance":
                splits.setdefault(name, []).append(_utt_from(rec, tensors[name][k]))
            else:
                qa.setdefault(name, []).append(QAExample(
                    _utt_from(rec["question"], tensors[f"qa_{name}_question"][k]),
                    _utt_from(rec["passage"], tensors[f"qa_{name}_passage"][k]),
                    tuple(rec["answer_frames"]),
                    tuple(rec["answer_tokens"]),
                ))
    text = [[int(x) for x in line.split()] for line in (root / "text.txt").read_text().splitlines()]
    return CorpusBundle(spec, splits, text, qa, manifest["noise_std"])
