"""Experiment configuration.

The file format is one ``section.key = value`` assignment per line, where the
value is a JSON literal.  Top-level keys (``seed``, ``output_dir``) have no
section.  ``#`` starts a comment line.  Every key has a default; unknown keys
are rejected.  Example::

    seed = 1
    corpus.noise_std = 0.05
    gan.steps = 2000
    model.variant = "ssp_tune"
    ablate.variants = ["acoustic_only", "ssp_tune"]
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .bridge import GanConfig
from .lm import DenoiseConfig
from .tasks import FinetuneConfig


class ConfigError(ValueError):
    pass


@dataclass
class CorpusConfig:
    seed: int = 0
    n_phonemes: int = 8
    n_subwords: int = 20
    n_intents: int = 6
    n_slots: int = 2
    feature_dim: int = 16
    d_min: int = 2
    d_max: int = 5
    intent_mode: str = "order"
    noise_std: float = 0.1
    train: int = 600
    dev: int = 150
    test: int = 150
    text_only: int = 2000


@dataclass
class ModelConfig:
    variant: str = "ssp_tune"


@dataclass
class FusionConfig:
    heads: int = 4
    adapter_bottleneck: int = 8


@dataclass
class TaskConfig:
    name: str = "ic"
    steps: int = 600
    batch_size: int = 16
    lr: float = 1e-3
    ic_hidden: int = 64
    tag_hidden: int = 128
    eval_every: int = 0


@dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AblateConfig:
    variants: list = field(default_factory=lambda: ["acoustic_only", "ssp_base", "ssp_plus_r", "ssp_plus_ra",
                                                    "ssp_plus_ap", "ssp_tune"])
    seeds: list = field(default_factory=lambda: [0, 1, 2])


SECTIONS = {
    "corpus": CorpusConfig,
    "gan": GanConfig,
    "lm": DenoiseConfig,
    "model": ModelConfig,
    "fusion": FusionConfig,
    "task": TaskConfig,
    "optimizer": OptimizerConfig,
    "ablate": AblateConfig,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    lm: DenoiseConfig = field(default_factory=DenoiseConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def finetune_config(self) -> FinetuneConfig:
        t, o = self.task, self.optimizer
        return FinetuneConfig(t.steps, t.batch_size, t.lr, o.beta1, o.beta2, o.eps, t.ic_hidden, t.tag_hidden,
                              t.eval_every)

    def to_dict(self) -> dict:
        return asdict(self)

    def section_hash(self, *names: str) -> str:
        """Stable digest of the named sections (or top-level keys)."""
        d = self.to_dict()
        blob = json.dumps({n: d[n] for n in names}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def _check_type(key: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {json.dumps(value)}")
    return value


def parse_config(text: str) -> ExperimentConfig:
    values: dict[str, dict] = {name: {} for name in SECTIONS}
    top: dict = {}
    top_defaults = {"seed": 0, "output_dir": ""}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, rhs = (part.strip() for part in line.partition("="))
        try:
            value = json.loads(rhs)
        except json.JSONDecodeError as e:
            raise ConfigError(f"line {lineno}: value of {key} is not a JSON literal ({e.msg})") from None
        if "." not in key:
            if key not in top_defaults:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            top[key] = _check_type(key, value, top_defaults[key])
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        defaults = {f.name: getattr(SECTIONS[section](), f.name) for f in fields(SECTIONS[section])}
        if name not in defaults:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[section][name] = _check_type(key, value, defaults[name])
    try:
        sections = {name: cls(**values[name]) for name, cls in SECTIONS.items()}
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return ExperimentConfig(**top, **sections)


def load_config(path) -> tuple[ExperimentConfig, str]:
    """Parsed config plus the original text (echoed verbatim into run directories)."""
    text = Path(path).read_text()
    return parse_config(text), text


def dump_config(cfg: ExperimentConfig) -> str:
    """Every key with its current value, in the file format."""
    d = cfg.to_dict()
    lines = [f"seed = {json.dumps(d['seed'])}", f"output_dir = {json.dumps(d['output_dir'])}"]
    for section in SECTIONS:
        for k, v in d[section].items():
            lines.append(f"{section}.{k} = {json.dumps(v)}")
    return "\n".join(lines) + "\n"
