"""Flat run configuration and the shared generate/split/augment/train pipeline.

A run config is a UTF-8 text file of ``key = value`` lines (``#`` starts a
comment). Values are Python literals; ``true``/``false``/``none`` are also
accepted. Keys are dotted: ``synth.*``, ``augment.*``, ``model.*``,
``train.*``, ``split.*``, ``data.standardize`` and the root ``seed``.

Per-module seeds are never set directly. They are derived from the root seed
with :func:`gwanomaly.seeding.derive_seed` under the module name.
"""
from __future__ import annotations

import ast
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .augment import AugmentPlan, augment_dataset
from .dataio import LabeledDataset, SplitSpec, SynthConfig, generate_synthetic, split, standardize
from .errors import ConfigError
from .model import ModelCheckpoint, ModelConfig, build_model
from .seeding import derive_seed
from .trainer import TrainConfig, TrainHistory, train

_SECTIONS = {"synth": SynthConfig, "model": ModelConfig, "train": TrainConfig, "split": SplitSpec}
_HIDDEN = {"seed", "checkpoint_path", "history_path"}
_AUGMENT_KEYS = {"enabled": False, "n_values": (3, 5, 10), "count_per_n": 0, "ratio": None,
                 "include_originals": True}
_WORDS = {"true": True, "false": False, "none": None, "null": None}


def allowed_keys() -> list[str]:
    keys = ["seed", "data.standardize"]
    for sec, cls in _SECTIONS.items():
        keys += [f"{sec}.{f.name}" for f in fields(cls) if f.name not in _HIDDEN]
    keys += [f"augment.{k}" for k in _AUGMENT_KEYS]
    return sorted(keys)


def parse_value(key: str, text: str):
    text = text.strip()
    if text.lower() in _WORDS:
        return _WORDS[text.lower()]
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        raise ConfigError(f"{key}: cannot parse value {text!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        out[key] = parse_value(key, value)
    return out


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        out[key.strip()] = parse_value(key.strip(), value)
    return out


@dataclass
class RunConfig:
    """Typed view of a flat config; ``flat`` keeps the resolved key/value pairs."""
    seed: int = 0
    flat: dict = field(default_factory=dict)

    @classmethod
    def from_flat(cls, values: dict) -> "RunConfig":
        known = set(allowed_keys())
        for key in values:
            if key not in known:
                raise ConfigError(f"unknown config key: {key}")
        seed = values.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError(f"seed: must be a non-negative integer, got {seed!r}")
        cfg = cls(seed, dict(values))
        # build every section once so bad values surface before any work starts
        cfg.synth(), cfg.model(), cfg.train(), cfg.split(), cfg.augment()
        return cfg

    def _section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.flat.items() if k.startswith(prefix)}

    def _build(self, name: str, **extra):
        cls = _SECTIONS[name]
        kwargs = self._section(name)
        try:
            return cls(**kwargs, **extra)
        except ConfigError as exc:
            raise ConfigError(f"{name}: {exc}") from None
        except (TypeError, ValueError) as exc:
            bad = ", ".join(f"{name}.{k}" for k in kwargs) or name
            raise ConfigError(f"invalid value among {bad}: {exc}") from None

    def synth(self) -> SynthConfig:
        return self._build("synth", seed=derive_seed(self.seed, "synth"))

    def model(self) -> ModelConfig:
        return self._build("model", seed=derive_seed(self.seed, "model"))

    def train(self) -> TrainConfig:
        return self._build("train", seed=derive_seed(self.seed, "train"))

    def split(self) -> SplitSpec:
        return self._build("split", seed=derive_seed(self.seed, "split"))

    @property
    def standardize(self) -> bool:
        return bool(self.flat.get("data.standardize", False))

    @property
    def augment_enabled(self) -> bool:
        return bool(self._augment_values()["enabled"])

    @property
    def augment_ratio(self) -> Optional[float]:
        return self._augment_values()["ratio"]

    def _augment_values(self) -> dict:
        return {**_AUGMENT_KEYS, **self._section("augment")}

    def augment(self) -> AugmentPlan:
        v = self._augment_values()
        try:
            return AugmentPlan(tuple(v["n_values"]), v["count_per_n"], derive_seed(self.seed, "augment"),
                               bool(v["include_originals"]))
        except ConfigError as exc:
            raise ConfigError(f"augment: {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"augment: {exc}") from None

    def derived_seeds(self) -> dict:
        return {name: derive_seed(self.seed, name) for name in ("synth", "split", "augment", "model", "train")}

    def resolved(self) -> dict:
        """Every allowed key with its effective value (defaults filled in)."""
        out = {"seed": self.seed, "data.standardize": self.standardize}
        for name in _SECTIONS:
            obj = getattr(self, name)()
            for f in fields(obj):
                if f.name not in _HIDDEN:
                    out[f"{name}.{f.name}"] = _plain(getattr(obj, f.name))
        for k, v in self._augment_values().items():
            out[f"augment.{k}"] = _plain(v)
        return dict(sorted(out.items()))

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in self.resolved().items())


def _plain(v):
    if isinstance(v, list):
        return tuple(_plain(x) for x in v)
    if isinstance(v, tuple):
        return tuple(_plain(x) for x in v)
    return v


def load_run_config(path=None, overrides: Optional[dict] = None, env_seed: Optional[str] = None) -> RunConfig:
    """File values, then ``env_seed`` (the GW_SEED variable), then explicit overrides."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values = parse_config_text(p.read_text(encoding="utf-8"), str(p))
    if env_seed not in (None, ""):
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"GW_SEED must be an integer, got {env_seed!r}") from None
    values.update(overrides or {})
    return RunConfig.from_flat(values)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_record(path, command: str, cfg: RunConfig, inputs=(), outputs=()) -> Path:
    """JSON record with the resolved config, seeds and SHA-256 of every input/output file."""
    record = {
        "command": command,
        "root_seed": cfg.seed,
        "derived_seeds": cfg.derived_seeds(),
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.resolved().items()},
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
    }
    path = Path(path)
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# pipeline steps
# ---------------------------------------------------------------------------

def prepare(dataset: LabeledDataset, cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Optional standardization, split, then augmentation of the training part only."""
    if cfg.standardize:
        dataset = LabeledDataset(standardize(dataset.x), dataset.y, dataset.class_names,
                                 dataset.class_ids, dataset.meta)
    tr, va, te = split(dataset, cfg.split())
    if cfg.augment_enabled:
        tr = augment_dataset(tr, cfg.augment(), cfg.augment_ratio)
    return tr, va, te


def train_run(dataset: LabeledDataset, cfg: RunConfig, checkpoint_path=None, history_path=None,
              max_epochs: Optional[int] = None):
    """Split/augment ``dataset``, train a fresh model and return ``(ckpt, history, test_set)``."""
    tr, va, te = prepare(dataset, cfg)
    tcfg = cfg.train()
    if max_epochs is not None:
        tcfg.max_epochs = int(max_epochs)
    tcfg.checkpoint_path = None if checkpoint_path is None else str(checkpoint_path)
    tcfg.history_path = None if history_path is None else str(history_path)
    model = build_model(cfg.model())
    meta = {"run_config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.resolved().items()},
            "standardize": cfg.standardize,
            "split": {"train": cfg.split().train, "val": cfg.split().val, "test": cfg.split().test,
                      "seed": cfg.split().seed},
            "train_size": len(tr), "val_size": len(va), "test_size": len(te)}
    ckpt, history = train(model, tr, va, tcfg, meta)
    return ckpt, history, te


def synthetic_run(cfg: RunConfig, checkpoint_path=None, history_path=None) -> tuple[ModelCheckpoint, TrainHistory, LabeledDataset]:
    dataset, _ = generate_synthetic(cfg.synth())
    return train_run(dataset, cfg, checkpoint_path, history_path)
