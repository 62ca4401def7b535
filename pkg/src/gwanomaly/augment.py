"""Within-class averaging augmentation.

A new sample is the componentwise arithmetic mean of ``n`` samples drawn
with replacement from one class. Averaging shrinks white noise by a factor
``sqrt(n)`` while coherent injected structure survives, so class identity is
kept.

Two presets cover the ambiguous count accounting of the original setup:
``FULL_PLAN_PER_N`` draws 200,000 samples for *each* n (600,000 per class),
``FULL_PLAN_TOTAL`` splits 200,000 across the three n values so that with
100,000 originals a class totals 300,000.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .dataio import SAMPLE_SHAPE, LabeledDataset, concat_datasets
from .errors import ConfigError, DomainError, ShapeError
from .seeding import derive_seed

_CHUNK = 2048


@dataclass
class AugmentPlan:
    n_values: tuple = (3, 5, 10)
    count_per_n: Union[int, tuple] = 0  # one count for every n, or one per n
    seed: int = 0
    include_originals: bool = True

    def __post_init__(self):
        self.n_values = tuple(int(n) for n in self.n_values)
        if any(n < 1 for n in self.n_values):
            raise ConfigError("every n must be >= 1")
        if isinstance(self.count_per_n, (list, tuple)):
            self.count_per_n = tuple(int(c) for c in self.count_per_n)
            if len(self.count_per_n) != len(self.n_values):
                raise ConfigError("count_per_n needs one entry per n value")
        else:
            self.count_per_n = int(self.count_per_n)
        if min(self.counts(), default=0) < 0:
            raise ConfigError("counts must be >= 0")

    def counts(self) -> list[int]:
        if isinstance(self.count_per_n, tuple):
            return list(self.count_per_n)
        return [self.count_per_n] * len(self.n_values)

    @property
    def total(self) -> int:
        return sum(self.counts())

    @classmethod
    def from_total(cls, total: int, n_values: Sequence[int] = (3, 5, 10), **kwargs) -> "AugmentPlan":
        """Split ``total`` as evenly as possible over ``n_values`` (earlier n get the remainder)."""
        k = len(n_values)
        base, extra = divmod(int(total), k)
        return cls(tuple(n_values), tuple(base + (i < extra) for i in range(k)), **kwargs)


FULL_PLAN_PER_N = AugmentPlan((3, 5, 10), 200_000)
FULL_PLAN_TOTAL = AugmentPlan.from_total(200_000, (3, 5, 10))


def average_signals(signals) -> np.ndarray:
    """Componentwise mean of a list (or stacked array) of 200x2 samples."""
    if len(signals) == 0:
        raise DomainError("cannot average an empty list of signals")
    shapes = {np.shape(s) for s in signals}
    if len(shapes) != 1:
        raise ShapeError(f"signals have differing shapes: {sorted(shapes)}")
    if shapes.pop() != SAMPLE_SHAPE:
        raise ShapeError(f"signals must be {SAMPLE_SHAPE}")
    stack = np.asarray(signals, dtype=np.float64)
    return stack.mean(axis=0).astype(np.float32)


def draw_indices(n_sources: int, n: int, count: int, seed: int) -> np.ndarray:
    """(count, n) source indices drawn with replacement for mean size ``n``."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(n),)))
    return rng.integers(0, n_sources, size=(count, n))


def _class_array(class_data) -> tuple[np.ndarray, int, tuple, int]:
    if isinstance(class_data, LabeledDataset):
        if len(class_data) == 0:
            raise DomainError("cannot augment an empty class")
        labels = np.unique(class_data.y)
        ids = np.unique(class_data.class_ids)
        if labels.size != 1 or ids.size != 1:
            raise DomainError("augment_class needs data from a single class")
        return class_data.x, int(labels[0]), class_data.class_names, int(ids[0])
    x = np.asarray(class_data, dtype=np.float32)
    if len(x) == 0:
        raise DomainError("cannot augment an empty class")
    return x, None, None, 0


def augment_class(class_data, plan: AugmentPlan, label: int = None) -> LabeledDataset:
    """Generate ``plan.counts()`` averaged samples for each n, in plan order.

    ``class_data`` is a single-class LabeledDataset or a bare (M, 200, 2)
    array, in which case ``label`` must be given.
    """
    x, ds_label, names, cid = _class_array(class_data)
    if ds_label is None:
        if label is None:
            raise DomainError("label required when augmenting a bare array")
        ds_label, names = int(label), ("background", "signal")
        cid = int(label)
    if x.ndim != 3 or x.shape[1:] != SAMPLE_SHAPE:
        raise ShapeError(f"class data must be (M, 200, 2), got {x.shape}")
    out = []
    for n, count in zip(plan.n_values, plan.counts()):
        idx = draw_indices(len(x), n, count, plan.seed)
        block = np.empty((count,) + SAMPLE_SHAPE, np.float32)
        for start in range(0, count, _CHUNK):
            sel = idx[start:start + _CHUNK]
            block[start:start + len(sel)] = x[sel].astype(np.float64).mean(axis=1)
        out.append(block)
    xs = np.concatenate(out) if out else np.empty((0,) + SAMPLE_SHAPE, np.float32)
    return LabeledDataset(xs, np.full(len(xs), ds_label, np.int64), names,
                          np.full(len(xs), cid, np.int64), {"augment_plan": plan.counts()})


def merge_augmented(original: LabeledDataset, augmented: list[LabeledDataset]) -> LabeledDataset:
    """Originals first, then each augmented set in the given order."""
    for part in augmented:
        if part.x.shape[1:] != original.x.shape[1:] or part.y.ndim != original.y.ndim:
            raise ShapeError("augmented data does not match the original sample/label shapes")
    if not augmented:
        return original
    return concat_datasets([original, *augmented])


def augment_dataset(dataset: LabeledDataset, plan: AugmentPlan, ratio: float = None) -> LabeledDataset:
    """Augment every source class separately and merge (originals kept if the plan says so).

    Each class gets its own sub-seed so classes do not share draw patterns.
    With ``ratio`` the plan's counts are replaced per class by
    ``round(ratio * class_size)`` split over ``plan.n_values``.
    """
    if ratio is not None and ratio < 0:
        raise ConfigError("augmentation ratio must be >= 0")
    parts = []
    for name, subset in dataset.by_class().items():
        seed = derive_seed(plan.seed, f"augment.{name}")
        if ratio is None:
            sub_plan = AugmentPlan(plan.n_values, plan.count_per_n, seed, plan.include_originals)
        else:
            sub_plan = AugmentPlan.from_total(round(ratio * len(subset)), plan.n_values, seed=seed,
                                              include_originals=plan.include_originals)
        parts.append(augment_class(subset, sub_plan))
    if plan.include_originals:
        return merge_augmented(dataset, parts)
    if not parts:
        return dataset.subset([])
    return concat_datasets(parts)
