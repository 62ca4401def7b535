"""Datasets: the GWAD container, class manifests, synthetic data, splits and batches.

GWAD layout (little-endian)::

    b"GWAD" | u16 version=1 | u8 dtype (0 = f32) | u8 rank | rank x u64 dims
    | row-major payload | u32 CRC32 of the payload

A manifest is a UTF-8 text file with one ``class_name<TAB>path<TAB>label``
line per class file; relative paths resolve against the manifest's folder.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, CorruptFileError, DomainError, FormatError, ShapeError
from .seeding import derive_seed

SAMPLE_LEN = 200
N_DETECTORS = 2
SAMPLE_SHAPE = (SAMPLE_LEN, N_DETECTORS)
SAMPLE_RATE = 4096.0
CLASS_NAMES = ("background", "bbh", "sglf")
CLASS_LABELS = {"background": 0, "bbh": 1, "sglf": 1}

GWAD_MAGIC = b"GWAD"
GWAD_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4")}


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class LabeledDataset:
    """Samples ``x`` (N, 200, 2) with binary labels ``y``.

    ``class_ids`` indexes into ``class_names`` and records which source class
    (background, bbh, sglf, ...) each sample came from.
    """
    x: np.ndarray
    y: np.ndarray
    class_names: tuple = ("background", "signal")
    class_ids: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if self.x.ndim != 3 or self.x.shape[1:] != SAMPLE_SHAPE:
            if not (self.x.size == 0 and self.x.ndim >= 1):
                raise ShapeError(f"samples must be (N, {SAMPLE_LEN}, {N_DETECTORS}), got {self.x.shape}")
            self.x = self.x.reshape((0,) + SAMPLE_SHAPE)
        if len(self.x) != len(self.y):
            raise ShapeError(f"{len(self.x)} samples but {len(self.y)} labels")
        if self.y.size and not np.all((self.y == 0) | (self.y == 1)):
            raise DomainError("labels must be 0 or 1")
        self.class_names = tuple(self.class_names)
        if self.class_ids is None:
            self.class_ids = self.y.copy() if len(self.class_names) == 2 else np.zeros(len(self.y), np.int64)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        if len(self.class_ids) != len(self.y):
            raise ShapeError("class_ids length differs from labels")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.x[idx], self.y[idx], self.class_names, self.class_ids[idx], dict(self.meta))

    def label_counts(self) -> dict[int, int]:
        return {0: int(np.sum(self.y == 0)), 1: int(np.sum(self.y == 1))}

    def by_class(self) -> dict[str, "LabeledDataset"]:
        return {name: self.subset(np.flatnonzero(self.class_ids == i))
                for i, name in enumerate(self.class_names) if np.any(self.class_ids == i)}


def concat_datasets(parts: list[LabeledDataset]) -> LabeledDataset:
    """Concatenate datasets, reconciling class name tables by name."""
    if not parts:
        raise DomainError("nothing to concatenate")
    names: list[str] = []
    for p in parts:
        for n in p.class_names:
            if n not in names:
                names.append(n)
    ids = [np.array([names.index(p.class_names[i]) for i in p.class_ids], dtype=np.int64) for p in parts]
    return LabeledDataset(
        np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]),
        tuple(names), np.concatenate(ids) if ids else None, dict(parts[0].meta),
    )


def standardize(x: np.ndarray) -> np.ndarray:
    """Per-sample, per-detector zero mean / unit variance; constant channels are only centered."""
    x = np.asarray(x, dtype=np.float32)
    mu = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True)
    return ((x - mu) / np.where(sd > 0, sd, 1.0)).astype(np.float32)


# ---------------------------------------------------------------------------
# GWAD container
# ---------------------------------------------------------------------------

def write_gwad(path, array: np.ndarray) -> Path:
    arr = np.asarray(array, dtype="<f4")
    if not np.all(np.isfinite(arr)):
        raise DomainError("GWAD payload must be finite")
    payload = np.ascontiguousarray(arr).tobytes()
    header = GWAD_MAGIC + struct.pack("<HBB", GWAD_VERSION, 0, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    path = Path(path)
    path.write_bytes(header + payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    return path


def read_gwad(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != GWAD_MAGIC:
        raise FormatError(f"{path}: not a GWAD file (bad magic)")
    if len(buf) < 8:
        raise CorruptFileError(f"{path}: truncated header")
    version, code, rank = struct.unpack_from("<HBB", buf, 4)
    if version != GWAD_VERSION:
        raise FormatError(f"{path}: unsupported GWAD version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unsupported dtype code {code}")
    dims_end = 8 + 8 * rank
    if len(buf) < dims_end:
        raise CorruptFileError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    dtype = _DTYPE_CODES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) != dims_end + nbytes + 4:
        raise CorruptFileError(
            f"{path}: header declares {nbytes} payload bytes, file holds {len(buf) - dims_end - 4}")
    payload = buf[dims_end:dims_end + nbytes]
    (crc,) = struct.unpack_from("<I", buf, dims_end + nbytes)
    if crc != zlib.crc32(payload) & 0xFFFFFFFF:
        raise CorruptFileError(f"{path}: CRC mismatch")
    return np.frombuffer(payload, dtype=dtype).astype(np.float32).reshape(dims)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    class_name: str
    path: Path
    label: int


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"manifest not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected class<TAB>path<TAB>label")
        name, file, label = parts
        try:
            label = int(label)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: label {label!r} is not an integer") from None
        if label not in (0, 1):
            raise FormatError(f"{path}:{lineno}: label must be 0 or 1")
        file = Path(file)
        entries.append(ManifestEntry(name, file if file.is_absolute() else path.parent / file, label))
    return entries


def write_manifest(path, entries: list[ManifestEntry]) -> Path:
    path = Path(path)
    lines = []
    for e in entries:
        p = Path(e.path)
        try:
            p = p.resolve().relative_to(path.parent.resolve())
        except ValueError:
            pass
        lines.append(f"{e.class_name}\t{p.as_posix()}\t{int(e.label)}\n")
    path.write_text("".join(lines), encoding="utf-8")
    return path


def load_manifest(path) -> LabeledDataset:
    """Concatenate every class file of a manifest into one dataset (manifest order)."""
    entries = read_manifest(path)
    if not entries:
        raise FormatError(f"{path}: empty manifest")
    xs, ys, ids = [], [], []
    names = tuple(e.class_name for e in entries)
    for i, e in enumerate(entries):
        if not Path(e.path).is_file():
            raise FormatError(f"class file not found: {e.path}")
        arr = read_gwad(e.path)
        if arr.size == 0:
            arr = arr.reshape((0,) + SAMPLE_SHAPE)
        if arr.ndim != 3 or arr.shape[1:] != SAMPLE_SHAPE:
            raise ShapeError(f"{e.path}: expected (N, 200, 2), got {arr.shape}")
        xs.append(arr)
        ys.append(np.full(len(arr), e.label, np.int64))
        ids.append(np.full(len(arr), i, np.int64))
    return LabeledDataset(np.concatenate(xs), np.concatenate(ys), names, np.concatenate(ids))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Stand-in generator for whitened two-detector strain windows.

    Amplitudes are in units of the noise standard deviation. Time shifts are
    in samples; frequencies in Hz at ``sample_rate``.
    """
    n_background: int = 1000
    n_bbh: int = 1000
    n_sglf: int = 1000
    noise_std: float = 1.0
    sample_rate: float = SAMPLE_RATE
    bbh_f_start: tuple = (40.0, 80.0)
    bbh_f_end: tuple = (250.0, 500.0)
    bbh_envelope_power: float = 2.0
    bbh_amplitude: tuple = (1.5, 3.0)  # calibrated: desk model lands near AUC 0.99, not 1.0
    sglf_freq: tuple = (30.0, 120.0)
    sglf_tau: tuple = (0.004, 0.010)
    sglf_amplitude: tuple = (1.5, 3.0)
    det2_ratio: tuple = (0.6, 1.0)
    det2_shift: tuple = (-40, 40)
    seed: int = 0

    def __post_init__(self):
        for name in ("bbh_f_start", "bbh_f_end", "bbh_amplitude", "sglf_freq", "sglf_tau",
                     "sglf_amplitude", "det2_ratio", "det2_shift"):
            val = getattr(self, name)
            if isinstance(val, (int, float)):
                val = (val, val)
            val = tuple(float(v) for v in val)
            if len(val) != 2 or val[0] > val[1]:
                raise ConfigError(f"{name} must be a (low, high) pair, got {val}")
            setattr(self, name, val)
        for name in ("n_background", "n_bbh", "n_sglf"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be >= 0")
            setattr(self, name, int(getattr(self, name)))
        nyquist = self.sample_rate / 2.0
        for name in ("bbh_f_start", "bbh_f_end", "sglf_freq"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi >= nyquist:
                raise ConfigError(f"{name} must lie in (0, {nyquist}) Hz, got {(lo, hi)}")
        if self.bbh_f_start[1] > self.bbh_f_end[0]:
            raise ConfigError("bbh chirp must rise: bbh_f_start above bbh_f_end")
        if self.sglf_tau[0] <= 0:
            raise ConfigError("sglf_tau must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if min(self.bbh_amplitude + self.sglf_amplitude + self.det2_ratio) < 0:
            raise ConfigError("amplitudes and ratios must be >= 0")

    def counts(self) -> dict[str, int]:
        return {"background": self.n_background, "bbh": self.n_bbh, "sglf": self.n_sglf}

    def to_dict(self) -> dict:
        return asdict(self)


def sample_times(sample_rate: float = SAMPLE_RATE, n: int = SAMPLE_LEN) -> np.ndarray:
    return np.arange(n) / sample_rate


def chirp_waveform(t, amplitude, f0, f1, phase, power, duration):
    """Linear chirp from ``f0`` to ``f1`` over ``duration`` with envelope ``A (t/T)^power``.

    Evaluated only for ``t >= 0``; earlier times are silent.
    """
    k = (f1 - f0) / duration
    tc = np.clip(t, 0.0, None)
    env = amplitude * (tc / duration) ** power
    return np.where(t >= 0, env * np.sin(2 * np.pi * (f0 * t + 0.5 * k * t * t) + phase), 0.0)


def sine_gaussian(t, amplitude, freq, phase, t0, tau):
    return amplitude * np.sin(2 * np.pi * freq * t + phase) * np.exp(-((t - t0) ** 2) / (2 * tau ** 2))


def _uniform(rng, pair, size):
    lo, hi = pair
    return rng.uniform(lo, hi, size) if hi > lo else np.full(size, lo)


def _draw_injection(kind: str, rng: np.random.Generator, n: int, cfg: SynthConfig) -> dict:
    common = {
        "ratio": _uniform(rng, cfg.det2_ratio, n),
        "shift": rng.integers(int(cfg.det2_shift[0]), int(cfg.det2_shift[1]) + 1, n),
        "phase": rng.uniform(0.0, 2 * np.pi, n),
    }
    if kind == "bbh":
        common.update(amplitude=_uniform(rng, cfg.bbh_amplitude, n),
                      f0=_uniform(rng, cfg.bbh_f_start, n), f1=_uniform(rng, cfg.bbh_f_end, n))
    else:
        T = SAMPLE_LEN / cfg.sample_rate
        common.update(amplitude=_uniform(rng, cfg.sglf_amplitude, n),
                      freq=_uniform(rng, cfg.sglf_freq, n), tau=_uniform(rng, cfg.sglf_tau, n),
                      t0=rng.uniform(0.3 * T, 0.7 * T, n))
    return common


def injection_waveforms(kind: str, params: dict, cfg: SynthConfig) -> np.ndarray:
    """Noiseless (n, 200, 2) injections for the drawn ``params``."""
    t = sample_times(cfg.sample_rate)[None, :]
    T = SAMPLE_LEN / cfg.sample_rate
    col = {k: np.asarray(v, dtype=np.float64)[:, None] for k, v in params.items()}
    t2 = t - col["shift"] / cfg.sample_rate
    if kind == "bbh":
        def wave(tt):
            return chirp_waveform(tt, col["amplitude"], col["f0"], col["f1"], col["phase"],
                                  cfg.bbh_envelope_power, T)
    elif kind == "sglf":
        def wave(tt):
            return sine_gaussian(tt, col["amplitude"], col["freq"], col["phase"], col["t0"], col["tau"])
    else:
        raise ValueError(f"unknown injection kind {kind!r}")
    return np.stack([wave(t), col["ratio"] * wave(t2)], axis=-1)


def generate_synthetic(config: Optional[SynthConfig] = None) -> tuple[LabeledDataset, dict]:
    """Build background / BBH-proxy / SGLF samples.

    Returns the concatenated dataset (background, bbh, sglf in that order) and
    a dict with the per-class float32 arrays plus the drawn injection
    parameters under ``"<class>_params"``.
    """
    cfg = SynthConfig() if config is None else config
    raw: dict = {}
    for ci, name in enumerate(CLASS_NAMES):
        n = cfg.counts()[name]
        rng = np.random.default_rng(derive_seed(cfg.seed, f"synth.{name}"))
        if name == "background":
            signal = np.zeros((n,) + SAMPLE_SHAPE)
        else:
            params = _draw_injection(name, rng, n, cfg)
            raw[f"{name}_params"] = params
            signal = injection_waveforms(name, params, cfg) if n else np.zeros((0,) + SAMPLE_SHAPE)
        noise = rng.standard_normal((n,) + SAMPLE_SHAPE) * cfg.noise_std
        raw[name] = (signal + noise).astype(np.float32)
    ds = LabeledDataset(
        np.concatenate([raw[n] for n in CLASS_NAMES]),
        np.concatenate([np.full(cfg.counts()[n], CLASS_LABELS[n], np.int64) for n in CLASS_NAMES]),
        CLASS_NAMES,
        np.concatenate([np.full(cfg.counts()[n], i, np.int64) for i, n in enumerate(CLASS_NAMES)]),
        {"synth": cfg.to_dict()},
    )
    return ds, raw


# ---------------------------------------------------------------------------
# splitting and batching
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    train: float = 0.70
    val: float = 0.10
    test: float = 0.20
    seed: int = 0

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0 or not math.isclose(self.train + self.val + self.test, 1.0):
            raise ConfigError("split fractions must be non-negative and sum to 1")


def split_indices(labels: np.ndarray, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stratified, seeded permutation cut into contiguous train/val/test pieces.

    Each label's samples are shuffled and spread evenly through the global
    order (by fractional rank within the label), so every contiguous piece
    keeps the label ratio up to rounding. Sizes: ``floor(train * N)``,
    ``floor(val * N)``, remainder to test.
    """
    labels = np.asarray(labels)
    n = len(labels)
    rng = np.random.default_rng(derive_seed(spec.seed, "split"))
    keys = np.empty(n)
    for lab in np.unique(labels):
        members = np.flatnonzero(labels == lab)
        members = members[rng.permutation(len(members))]
        keys[members] = (np.arange(len(members)) + 0.5) / len(members)
    tiebreak = rng.permutation(n)
    order = np.lexsort((tiebreak, keys))
    n_train = math.floor(spec.train * n + 1e-9)
    n_val = math.floor(spec.val * n + 1e-9)
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


def split(dataset: LabeledDataset, spec: Optional[SplitSpec] = None):
    spec = SplitSpec() if spec is None else spec
    if len(dataset) < 10:
        raise DomainError("need at least 10 samples to split")
    tr, va, te = split_indices(dataset.y, spec)
    return dataset.subset(tr), dataset.subset(va), dataset.subset(te)


def epoch_permutation(n: int, epoch_seed: int) -> np.ndarray:
    return np.random.default_rng(epoch_seed).permutation(n)


def batches(dataset: LabeledDataset, batch_size: int, epoch_seed: Optional[int]) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(x, y)`` minibatches over a fresh permutation; ``epoch_seed=None`` keeps order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = np.arange(n) if epoch_seed is None else epoch_permutation(n, epoch_seed)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.x[idx], dataset.y[idx]
