"""Residual-difference classifier: configuration, forward pass and checkpoints.

Architecture::

    (B, 200, 2) -> transpose -> stem [Conv -> BN -> ReLU -> MaxPool]
               -> residual-difference blocks -> [max | mean] pooling -> Dense(2)

Checkpoint container (``.gwck``), all integers little-endian::

    b"GWCK" | u16 version=1 | u32 entry count
    entry:  u16 name length | UTF-8 name | u8 rank | rank x u64 dims | f32 payload
    trailer: u32 CRC32 over the concatenated entry payloads

Non-array state (config, epoch, best validation loss, optimizer
hyperparameters) travels as UTF-8 JSON in the ``meta.json`` entry, one byte
per f32 element.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .errors import ConfigError, CorruptCheckpointError, FormatError, ShapeError
from .layers import (BatchNorm1dLayer, Conv1dLayer, DenseLayer, ResidualDifferenceBlock,
                     global_pool_head, maxpool1d, same_out_len, softmax)

CHECKPOINT_MAGIC = b"GWCK"
CHECKPOINT_VERSION = 1
META_ENTRY = "meta.json"


@dataclass
class ModelConfig:
    input_len: int = 200
    input_channels: int = 2
    stem: tuple = (32, 7, 2)  # (channels, kernel, pool window)
    blocks: tuple = ((32, 3, 1), (64, 3, 2), (128, 3, 2))  # (out_channels, kernel, stride)
    head_hidden: Optional[int] = None
    num_classes: int = 2
    post_block_relu: bool = True
    seed: int = 0

    def __post_init__(self):
        self.stem = tuple(int(v) for v in self.stem)
        self.blocks = tuple(tuple(int(v) for v in b) for b in self.blocks)
        if self.num_classes != 2:
            raise ConfigError("num_classes must be 2 (background vs. signal)")
        if self.input_len != 200 or self.input_channels != 2:
            raise ConfigError("input must be 200 time steps x 2 detectors")
        if len(self.stem) != 3 or min(self.stem) < 1:
            raise ConfigError(f"stem must be three positive ints, got {self.stem}")
        for b in self.blocks:
            if len(b) != 3 or min(b) < 1:
                raise ConfigError(f"block spec must be (channels, kernel, stride) > 0, got {b}")
        if self.head_hidden is not None and self.head_hidden < 1:
            raise ConfigError("head_hidden must be positive when given")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stem"] = list(self.stem)
        d["blocks"] = [list(b) for b in self.blocks]
        return d

    @classmethod
    def desk(cls, width: int = 16, **kwargs) -> "ModelConfig":
        """Same topology at reduced width; about 3 s per epoch on 4,200 samples on one core."""
        w = int(width)
        return cls(stem=(w, 7, 2), blocks=((w, 3, 1), (2 * w, 3, 2), (4 * w, 3, 2)), **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


class Model:
    """The full classifier. Build it with :func:`build_model`."""

    def __init__(self, config: ModelConfig, precision: str = "single"):
        self.config = config
        self.precision = precision
        rng = np.random.default_rng(config.seed)
        ch, k, pool = config.stem
        self.stem_conv = Conv1dLayer(config.input_channels, ch, k, 1, "same", rng, precision)
        self.stem_bn = BatchNorm1dLayer(ch, precision=precision)
        self.stem_pool = pool
        self.blocks = []
        in_ch = ch
        for out_ch, kb, stride in config.blocks:
            self.blocks.append(ResidualDifferenceBlock(in_ch, out_ch, kb, stride,
                                                       config.post_block_relu, rng, precision))
            in_ch = out_ch
        self.hidden = None
        if config.head_hidden:
            self.hidden = DenseLayer(2 * in_ch, config.head_hidden, rng, precision)
            self.head = DenseLayer(config.head_hidden, config.num_classes, rng, precision)
        else:
            self.head = DenseLayer(2 * in_ch, config.num_classes, rng, precision)

    def _modules(self):
        mods = {"stem.conv": self.stem_conv, "stem.bn": self.stem_bn}
        for i, blk in enumerate(self.blocks):
            mods[f"block{i}"] = blk
        if self.hidden is not None:
            mods["head.hidden"] = self.hidden
        mods["head"] = self.head
        return mods

    def named_parameters(self) -> dict[str, DiffArray]:
        return {f"{m}.{n}": p for m, mod in self._modules().items() for n, p in mod.parameters().items()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"{m}.{n}": b for m, mod in self._modules().items() for n, b in mod.buffers().items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {n: p.data.copy() for n, p in self.named_parameters().items()}
        state.update({n: b.copy() for n, b in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets = {n: p.data for n, p in self.named_parameters().items()}
        targets.update(self.named_buffers())
        missing = sorted(set(targets) - set(state))
        if missing:
            raise CorruptCheckpointError(f"missing parameter(s): {', '.join(missing[:5])}")
        for name, dst in targets.items():
            src = np.asarray(state[name])
            if src.shape != dst.shape:
                raise ConfigError(f"{name}: shape {src.shape} does not match model {dst.shape}")
            dst[...] = src

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def forward(self, x, mode: str = "eval") -> DiffArray:
        """Logits (batch, 2) for input shaped (batch, 200, 2)."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        train = mode == "train"
        if not isinstance(x, DiffArray):
            x = DiffArray(np.asarray(x), precision=self.precision)
        cfg = self.config
        if x.ndim != 3 or x.shape[1:] != (cfg.input_len, cfg.input_channels):
            raise ShapeError(f"expected (batch, {cfg.input_len}, {cfg.input_channels}), got {x.shape}")
        h = ad.transpose(x, (0, 2, 1))
        h = ad.relu(self.stem_bn(self.stem_conv(h, train), train))
        h = maxpool1d(h, self.stem_pool, self.stem_pool)
        for blk in self.blocks:
            h = blk(h, train)
        h = global_pool_head(h)
        if self.hidden is not None:
            h = ad.relu(self.hidden(h, train))
        return self.head(h, train)

    __call__ = forward

    def predict_proba(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Eval-mode probability of the signal class for every sample."""
        x = np.asarray(x)
        out = np.empty(len(x), dtype=np.float64)
        for start in range(0, len(x), batch_size):
            probs = softmax(self.forward(x[start:start + batch_size], "eval")).data
            out[start:start + batch_size] = probs[:, 1]
        return out


def predict_labels(logits) -> np.ndarray:
    """argmax over the two logits; exact ties go to background (0)."""
    z = logits.data if isinstance(logits, DiffArray) else np.asarray(logits)
    return (z[:, 1] > z[:, 0]).astype(np.int64)


def _check_chain(config: ModelConfig) -> None:
    ch, k, pool = config.stem
    length = config.input_len
    if length < k:
        raise ConfigError(f"stem kernel {k} longer than input {length}")
    if length < pool:
        raise ConfigError(f"stem pool {pool} longer than input {length}")
    length = (length - pool) // pool + 1
    for i, (_, kb, stride) in enumerate(config.blocks):
        if length < kb:
            raise ConfigError(f"block{i}: length {length} fell below kernel size {kb}")
        length = same_out_len(length, stride)


def build_model(config: Optional[ModelConfig] = None, precision: str = "single") -> Model:
    config = ModelConfig() if config is None else config
    _check_chain(config)
    return Model(config, precision)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class ModelCheckpoint:
    config: ModelConfig
    params: dict  # parameters and batch-norm buffers by name
    optim: dict = field(default_factory=dict)  # arrays, stored under "optim."
    epoch: int = 0
    best_val_loss: float = math.inf
    meta: dict = field(default_factory=dict)  # free-form run metadata

    def to_model(self, precision: str = "single") -> Model:
        model = build_model(self.config, precision)
        model.load_state_dict(self.params)
        return model


def checkpoint_from_model(model: Model, optim: Optional[dict] = None, epoch: int = 0,
                          best_val_loss: float = math.inf, meta: Optional[dict] = None) -> ModelCheckpoint:
    return ModelCheckpoint(model.config, model.state_dict(), dict(optim or {}), epoch,
                           best_val_loss, dict(meta or {}))


def load_into(model: Model, ckpt: ModelCheckpoint) -> None:
    """Copy checkpoint weights into ``model``; configs must agree."""
    if ckpt.config.to_dict() | {"seed": 0} != model.config.to_dict() | {"seed": 0}:
        raise ConfigError("checkpoint was produced by a different model configuration")
    model.load_state_dict(ckpt.params)


def _pack_entry(name: str, arr: np.ndarray) -> tuple[bytes, bytes]:
    raw = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f4")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head, arr.tobytes(order="C")


def save_checkpoint(obj: Union[Model, ModelCheckpoint], path) -> Path:
    ckpt = checkpoint_from_model(obj) if isinstance(obj, Model) else obj
    meta = {
        "config": ckpt.config.to_dict(),
        "epoch": int(ckpt.epoch),
        "best_val_loss": float(ckpt.best_val_loss),
        "meta": ckpt.meta,
    }
    entries = [(META_ENTRY, np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), np.uint8))]
    entries += sorted(ckpt.params.items())
    entries += sorted((f"optim.{k}", v) for k, v in ckpt.optim.items())
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(entries))]
    crc = 0
    for name, arr in entries:
        head, payload = _pack_entry(name, arr)
        crc = zlib.crc32(payload, crc)
        parts += [head, payload]
    parts.append(struct.pack("<I", crc & 0xFFFFFFFF))
    path = Path(path)
    path.write_bytes(b"".join(parts))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> ModelCheckpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    r = _Reader(buf)
    r.take(4)
    version, count = r.unpack("<HI")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    arrays = {}
    crc = 0
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptCheckpointError("entry name is not valid UTF-8") from None
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}Q")
        payload = r.take(4 * int(np.prod(dims, dtype=np.int64)))
        crc = zlib.crc32(payload, crc)
        if name in arrays:
            raise CorruptCheckpointError(f"duplicate entry {name!r}")
        arrays[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    (stored,) = r.unpack("<I")
    if r.pos != len(buf):
        raise CorruptCheckpointError("trailing bytes after checkpoint trailer")
    if stored != crc & 0xFFFFFFFF:
        raise CorruptCheckpointError("checkpoint CRC mismatch")
    if META_ENTRY not in arrays:
        raise CorruptCheckpointError("checkpoint has no meta.json entry")
    try:
        meta = json.loads(arrays.pop(META_ENTRY).astype(np.uint8).tobytes().decode("utf-8"))
    except (ValueError, UnicodeDecodeError):
        raise CorruptCheckpointError("meta.json entry is not valid JSON") from None
    config = ModelConfig.from_dict(meta["config"])
    optim = {k[len("optim."):]: v for k, v in arrays.items() if k.startswith("optim.")}
    params = {k: v for k, v in arrays.items() if not k.startswith("optim.")}
    expected = build_model(config).state_dict()
    missing = sorted(set(expected) - set(params))
    if missing:
        raise CorruptCheckpointError(f"missing parameter(s): {', '.join(missing[:5])}")
    for name, arr in expected.items():
        if params[name].shape != arr.shape:
            raise CorruptCheckpointError(f"{name}: stored shape {params[name].shape} != {arr.shape}")
    return ModelCheckpoint(config, params, optim, int(meta["epoch"]), float(meta["best_val_loss"]),
                           meta.get("meta", {}))
