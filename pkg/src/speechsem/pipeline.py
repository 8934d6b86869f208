"""Stage orchestration: corpus, LM pretraining, bridge training, fine-tuning, ablation.

Each stage writes into ``<output_dir>/<stage>/<key>/`` where the key hashes
the stage's config section, seed and the output hashes of its inputs.  A
finished stage leaves ``DONE.json``; asking for it again reuses the directory,
so every variant of an ablation shares one corpus, LM and bridge.  Every
stage that runs appends one line to ``manifest.jsonl``.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import shutil
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .bridge import BridgeModel, bridge_from_config, generate, oracle_lattice, phoneme_error_rate, train_bridge
from .config import ExperimentConfig, dump_config
from .corpus import CorpusBundle, build_language, generate_corpus, load_corpus, save_corpus
from .fusion import VARIANTS, FusedModel, Prepared, assemble_model, join_question
from .lm import N_SPECIAL, AdapterConfig, DenoisingLM, pretrain_lm, special_ids
from .numerics import load_into, save_checkpoint
from .tasks import EvalReport, Finetuner, build_examples, corpus_wer, finetune, pooled_embeddings
from .wfst import compile_lexicon, decode

log = logging.getLogger(__name__)


class MissingStageError(RuntimeError):
    pass


class CorpusMismatchError(ValueError):
    pass


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def dir_hash(path) -> str:
    """Hash over relative file names and contents, ignoring DONE.json."""
    root = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file() and p.name != "DONE.json"):
        h.update(str(f.relative_to(root)).encode())
        h.update(hashlib.sha256(f.read_bytes()).digest())
    return h.hexdigest()


@dataclass
class StageRecord:
    stage: str
    key: str
    seed: int
    inputs: dict
    outputs: dict
    wall_clock_s: float

    def to_json(self) -> dict:
        return {"stage": self.stage, "key": self.key, "seed": self.seed, "inputs": self.inputs,
                "outputs": self.outputs, "wall_clock_s": round(self.wall_clock_s, 3)}


class Workspace:
    def __init__(self, cfg: ExperimentConfig, config_text: str | None = None):
        self.cfg = cfg
        self.root = Path(cfg.output_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "config.txt").write_text(config_text if config_text is not None else dump_config(cfg))
        self._corpus: CorpusBundle | None = None
        self._decoded: dict[str, dict] = {}

    # ------------------------------------------------------------ bookkeeping

    def append_manifest(self, record: StageRecord):
        with open(self.root / "manifest.jsonl", "a") as fh:
            fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")

    def manifest(self) -> list[dict]:
        path = self.root / "manifest.jsonl"
        return [json.loads(line) for line in path.read_text().splitlines()] if path.exists() else []

    def _stage_dir(self, stage: str, key: str) -> Path:
        return self.root / stage / key

    @staticmethod
    def _done(path: Path) -> dict | None:
        f = path / "DONE.json"
        return json.loads(f.read_text()) if f.exists() else None

    def _finish(self, stage, key, path: Path, inputs: dict, seed: int, started: float, extra=None) -> dict:
        out = {"output_hash": dir_hash(path), "inputs": inputs, **(extra or {})}
        (path / "DONE.json").write_text(json.dumps(out, indent=1, sort_keys=True))
        self.append_manifest(StageRecord(stage, key, seed, inputs, {"dir": str(path), "hash": out["output_hash"]},
                                         time.time() - started))
        return out

    @staticmethod
    def _fresh(path: Path):
        if path.exists():
            shutil.rmtree(path)
        path.mkdir(parents=True)

    # ------------------------------------------------------------ corpus

    def corpus_key(self) -> str:
        return self.cfg.section_hash("corpus")[:16]

    def corpus_dir(self) -> Path:
        return self._stage_dir("corpus", self.corpus_key())

    def gen_corpus(self) -> dict:
        path = self.corpus_dir()
        done = self._done(path)
        if done:
            return done
        started = time.time()
        c = self.cfg.corpus
        sizes = {"n_phonemes": c.n_phonemes, "n_subwords": c.n_subwords, "n_intents": c.n_intents,
                 "n_slots": c.n_slots}
        spec = build_language(c.seed, sizes, c.feature_dim, c.d_min, c.d_max, c.intent_mode)
        counts = {"train": c.train, "dev": c.dev, "test": c.test, "text_only": c.text_only}
        bundle = generate_corpus(spec, counts, c.noise_std, c.seed)
        self._fresh(path)
        save_corpus(bundle, path)
        self._corpus = bundle
        return self._finish("corpus", self.corpus_key(), path, {"config": self.cfg.section_hash("corpus")},
                            c.seed, started)

    def corpus_hash(self) -> str:
        done = self._done(self.corpus_dir())
        if not done:
            raise MissingStageError("corpus missing; run gen-corpus first")
        return done["output_hash"]

    def corpus(self) -> CorpusBundle:
        self.corpus_hash()
        if self._corpus is None:
            self._corpus = load_corpus(self.corpus_dir())
        return self._corpus

    # ------------------------------------------------------------ LM

    def lm_key(self) -> str:
        return _digest([self.corpus_hash(), self.cfg.section_hash("lm"), self.cfg.seed])[:16]

    def train_lm(self) -> dict:
        path = self._stage_dir("lm", self.lm_key())
        done = self._done(path)
        if done:
            return done
        started = time.time()
        bundle = self.corpus()
        self._fresh(path)
        sink = io.StringIO()
        model, _ = pretrain_lm(bundle.unpaired_text, bundle.spec.n_subwords, self.cfg.lm, self.cfg.seed,
                               dev_text=[u.subwords for u in bundle.dev], log_sink=sink)
        (path / "log.jsonl").write_text(sink.getvalue())
        save_checkpoint(path / "checkpoint", model, {"n_subwords": bundle.spec.n_subwords})
        return self._finish("lm", self.lm_key(), path, {"corpus": self.corpus_hash()}, self.cfg.seed, started)

    def lm_done(self) -> dict:
        done = self._done(self._stage_dir("lm", self.lm_key()))
        if not done:
            raise MissingStageError("lm checkpoint missing; run train-lm first")
        return done

    def load_lm(self) -> DenoisingLM:
        self.lm_done()
        model = DenoisingLM(self.corpus().spec.n_subwords, self.cfg.lm)
        load_into(model, self._stage_dir("lm", self.lm_key()) / "checkpoint")
        return model

    # ------------------------------------------------------------ bridge

    def bridge_key(self) -> str:
        return _digest([self.corpus_hash(), self.cfg.section_hash("gan"), self.cfg.seed])[:16]

    def train_bridge(self) -> dict:
        path = self._stage_dir("bridge", self.bridge_key())
        done = self._done(path)
        if done:
            return done
        started = time.time()
        bundle = self.corpus()
        self._fresh(path)
        sink = io.StringIO()
        trainer, records = train_bridge(bundle, self.cfg.gan, self.cfg.seed, log_sink=sink)
        (path / "log.jsonl").write_text(sink.getvalue())
        model = BridgeModel(trainer.gen, trainer.disc)
        save_checkpoint(path / "checkpoint", model, {"inference": list(BridgeModel.INFERENCE_PREFIXES),
                                                     "training_only": ["gen.aux", "disc"]})
        compile_lexicon(bundle.spec.lexicon, phonemes=bundle.spec.phonemes).save(path / "lexicon.fst")
        dev_per = phoneme_error_rate(trainer.gen, bundle.dev)
        (path / "dev_per.json").write_text(json.dumps({"dev_per": dev_per}))
        return self._finish("bridge", self.bridge_key(), path, {"corpus": self.corpus_hash()}, self.cfg.seed,
                            started, {"dev_per": dev_per})

    def bridge_done(self) -> dict:
        done = self._done(self._stage_dir("bridge", self.bridge_key()))
        if not done:
            raise MissingStageError("bridge checkpoint missing; run train-bridge first")
        return done

    def load_bridge(self) -> BridgeModel:
        self.bridge_done()
        model = bridge_from_config(self.corpus().spec, self.cfg.gan)
        load_into(model, self._stage_dir("bridge", self.bridge_key()) / "checkpoint")
        return model

    # ------------------------------------------------------------ decoded bridge outputs

    def _decode_cache_path(self) -> Path:
        return self.root / "decoded" / self.bridge_key()

    def decoded(self, group: str) -> list[dict]:
        """Bridge decodes of one group ("train", "qa_dev", ...), cached on disk."""
        if group in self._decoded:
            return self._decoded[group]
        path = self._decode_cache_path() / f"{group}.jsonl"
        if not path.exists():
            bundle, gen = self.corpus(), self.load_bridge().gen
            lex = compile_lexicon(bundle.spec.lexicon, phonemes=bundle.spec.phonemes)
            if group.startswith("qa_"):
                feats = [f for q in bundle.qa[group[3:]] for f in (q.question.features, q.passage.features)]
            else:
                feats = [u.features for u in bundle.splits[group]]
            lines = []
            for f in feats:
                res = decode(generate(f, gen), lex)
                lines.append(json.dumps({"tokens": res.subwords, "alignment": res.frame_alignment,
                                         "no_path": res.no_path}))
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_text("\n".join(lines) + "\n")
            tmp.replace(path)
        self._decoded[group] = [json.loads(line) for line in path.read_text().splitlines()]
        return self._decoded[group]

    def prepared(self, task: str, split: str) -> tuple[list[Prepared], list]:
        bundle = self.corpus()
        if task == "sqa":
            dec = self.decoded(f"qa_{split}")
            sep = special_ids(bundle.spec.n_subwords)["sep"]
            items = []
            for k, q in enumerate(bundle.qa[split]):
                pq = _prepared_from(q.question.features, dec[2 * k])
                pp = _prepared_from(q.passage.features, dec[2 * k + 1])
                items.append(join_question(pq, pp, sep))
            return items, bundle.qa[split]
        dec = self.decoded(split)
        utts = bundle.splits[split]
        return [_prepared_from(u.features, d) for u, d in zip(utts, dec)], utts

    # ------------------------------------------------------------ fine-tuning

    def _components(self, variant: str) -> tuple[nn.Module, DenoisingLM | None]:
        gen = self.load_bridge().gen
        lm = self.load_lm() if variant != "acoustic_only" else None
        return gen, lm

    def _assemble(self, variant: str, seed: int, task: str) -> FusedModel:
        gen, lm = self._components(variant)
        torch.manual_seed(seed)
        return assemble_model(variant, gen, lm, self.corpus().spec.feature_dim, self.cfg.fusion.heads,
                              AdapterConfig(self.cfg.fusion.adapter_bottleneck), token_level=task == "sqa")

    def finetune_key(self, variant: str, task: str, seed: int) -> str:
        ups = [self.corpus_hash(), self.bridge_done()["output_hash"]]
        if variant != "acoustic_only":
            ups.append(self.lm_done()["output_hash"])
        return _digest([ups, variant, task, seed, self.cfg.section_hash("fusion", "task", "optimizer")])[:16]

    def finetune_dir(self, variant: str, task: str, seed: int) -> Path:
        return self._stage_dir("finetune", f"{variant}-{task}-s{seed}-{self.finetune_key(variant, task, seed)}")

    def _n_classes(self, task: str) -> int:
        return self.corpus().spec.n_intents

    def _examples(self, task: str, split: str):
        items, sources = self.prepared(task, split)
        spec = self.corpus().spec
        return build_examples(task, items, sources, spec.n_subwords, spec.n_slots)

    def _tuner(self, variant, task, seed) -> Finetuner:
        spec = self.corpus().spec
        return Finetuner(self._assemble(variant, seed, task), task, self._n_classes(task), spec.n_subwords, spec.n_slots,
                         self.cfg.finetune_config(), seed)

    def finetune(self, variant: str | None = None, task: str | None = None, seed: int | None = None) -> dict:
        variant = variant or self.cfg.model.variant
        task = task or self.cfg.task.name
        seed = self.cfg.seed if seed is None else seed
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        self.bridge_done()
        if variant != "acoustic_only":
            self.lm_done()
        path = self.finetune_dir(variant, task, seed)
        done = self._done(path)
        if done:
            return json.loads((path / "report.json").read_text())
        started = time.time()
        spec = self.corpus().spec
        train_ex, dev_ex = self._examples(task, "train"), self._examples(task, "dev")
        model = self._assemble(variant, seed, task)
        self._fresh(path)
        sink = io.StringIO()
        tuner, report = finetune(model, task, train_ex, dev_ex, self._n_classes(task), spec.n_subwords,
                                 spec.n_slots, self.cfg.finetune_config(), seed, log_sink=sink)
        (path / "log.jsonl").write_text(sink.getvalue())
        self._write_eval(path, tuner, report, dev_ex, "dev")
        (path / "registry.json").write_text(json.dumps(tuner.registry(), indent=1, sort_keys=True))
        save_checkpoint(path / "checkpoint", nn.ModuleDict({"fusion": tuner.model, "head": tuner.head}),
                        {"variant": variant, "task": task, "seed": seed}, trainable_only=True)
        inputs = {"corpus": self.corpus_hash(), "bridge": self.bridge_done()["output_hash"]}
        if variant != "acoustic_only":
            inputs["lm"] = self.lm_done()["output_hash"]
        self._finish("finetune", path.name, path, inputs, seed, started)
        return report.to_json()

    def _write_eval(self, path: Path, tuner: Finetuner, report: EvalReport, examples, split: str):
        name = "report.json" if split == "dev" else f"eval_{split}.json"
        (path / name).write_text(report.dumps() + "\n")
        preds = tuner.predict(examples)
        with open(path / f"predictions_{split}.jsonl", "w") as fh:
            for i, p in enumerate(preds):
                fh.write(json.dumps({"index": i, "prediction": _jsonable(p)}) + "\n")
        if tuner.task == "ic":
            pooled = pooled_embeddings(tuner.model, [ex.item for ex in examples])
            (path / f"pooled_{split}.f32").write_bytes(pooled.astype("<f4").tobytes())
            (path / f"pooled_{split}.json").write_text(json.dumps(
                {"shape": list(pooled.shape), "dtype": "float32-le", "labels": [ex.intent for ex in examples]}))

    def evaluate(self, variant: str | None = None, task: str | None = None, seed: int | None = None,
                 split: str = "test") -> dict:
        variant = variant or self.cfg.model.variant
        task = task or self.cfg.task.name
        seed = self.cfg.seed if seed is None else seed
        path = self.finetune_dir(variant, task, seed)
        done = self._done(path)
        if not done:
            raise MissingStageError(f"finetune checkpoint missing for {variant}/{task}/seed {seed}; run finetune first")
        if done["inputs"]["corpus"] != self.corpus_hash():
            raise CorpusMismatchError("finetune checkpoint was trained on a different corpus")
        tuner = self._tuner(variant, task, seed)
        load_into(nn.ModuleDict({"fusion": tuner.model, "head": tuner.head}), path / "checkpoint", strict=False)
        examples = self._examples(task, split)
        n_train, n_total = tuner.param_counts()
        report = EvalReport(task, variant, seed, tuner.evaluate(examples), n_train, n_total, 0)
        if split != "dev":
            self._write_eval(path, tuner, report, examples, split)
        return report.to_json()

    # ------------------------------------------------------------ ablation

    def ablate(self, variants=None, seeds=None, task: str | None = None) -> dict:
        variants = list(variants or self.cfg.ablate.variants)
        seeds = list(self.cfg.ablate.seeds if seeds is None else seeds)
        task = task or self.cfg.task.name
        for stage in (self.gen_corpus, self.train_bridge):
            stage()
        if any(v != "acoustic_only" for v in variants):
            self.train_lm()
        runs = {v: [self.finetune(v, task, s) for s in seeds] for v in variants}
        table = ablation_table(runs)
        key = _digest([variants, seeds, task, [self.finetune_key(v, task, s) for v in variants for s in seeds]])[:16]
        path = self._stage_dir("ablate", key)
        path.mkdir(parents=True, exist_ok=True)
        (path / "table.json").write_text(json.dumps(table, indent=1, sort_keys=True) + "\n")
        (path / "table.csv").write_text(table_csv(table))
        return table

    # ------------------------------------------------------------ inspection

    def decode_report(self, split: str = "dev", oracle: bool = False) -> dict:
        bundle = self.corpus()
        utts = bundle.splits[split]
        lex = compile_lexicon(bundle.spec.lexicon, phonemes=bundle.spec.phonemes)
        if oracle:
            lattices = [oracle_lattice(u, bundle.spec.n_phonemes) for u in utts]
            wrong = sum(int((lat.log_probs.argmax(1) != u.frame_phonemes()).sum()) for lat, u in zip(lattices, utts))
            per = wrong / sum(u.n_frames for u in utts)
        else:
            gen = self.load_bridge().gen
            lattices = [generate(u.features, gen) for u in utts]
            per = phoneme_error_rate(gen, utts)
        hyps = [decode(lat, lex).subwords for lat in lattices]
        return {"split": split, "oracle": oracle, "n": len(utts), "per": per,
                "wer": corpus_wer(hyps, [u.subwords for u in utts])}


def _prepared_from(features, rec: dict) -> Prepared:
    return Prepared(torch.as_tensor(np.asarray(features), dtype=torch.float32), list(rec["tokens"]),
                    list(rec["alignment"]), bool(rec["no_path"]))


def _jsonable(p):
    if isinstance(p, tuple):
        return [_jsonable(x) for x in p]
    if isinstance(p, list):
        return [_jsonable(x) for x in p]
    return p


def ablation_table(runs: dict[str, list[dict]]) -> list[dict]:
    """One row per variant x metric: mean and sample standard deviation over seeds."""
    rows = []
    for variant, reports in runs.items():
        for metric in sorted(reports[0]["metrics"]):
            values = [r["metrics"][metric] for r in reports]
            rows.append({
                "variant": variant,
                "metric": metric,
                "mean": statistics.fmean(values),
                "std": statistics.stdev(values) if len(values) > 1 else None,
                "n": len(values),
                "seeds": [r["seed"] for r in reports],
                "values": values,
                "trainable_fraction": reports[0]["trainable_fraction"],
            })
    return rows


def table_csv(rows: list[dict]) -> str:
    lines = ["variant,metric,mean,std,n,trainable_fraction"]
    for r in rows:
        std = "" if r["std"] is None else f"{r['std']:.6f}"
        lines.append(f"{r['variant']},{r['metric']},{r['mean']:.6f},{std},{r['n']},{r['trainable_fraction']:.6f}")
    return "\n".join(lines) + "\n"


__all__ = ["Workspace", "MissingStageError", "CorpusMismatchError", "ablation_table", "table_csv", "dir_hash",
           "N_SPECIAL"]
