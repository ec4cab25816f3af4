"""Joint optimization of the embedding and the representatives.

Batches are class-balanced (M classes, D instances each, the default) or
image groups (all ROIs of one image, for detection-style data). The fit loop
is fully deterministic given the seed: sampling, initialization and update
order all flow from named substreams.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node, backward, zero_grads
from .data import BACKGROUND_LABEL, Dataset, FeatureRecord
from .errors import ConfigError, DatasetError, TrainingDiverged
from .head import BACKGROUND, MixtureHead
from .rng import substream


@dataclass
class BatchSpec:
    classes_per_batch: int = 12
    instances_per_class: int = 4
    strategy: str = "class_balanced"  # "class_balanced" | "image_group"

    def __post_init__(self):
        if self.classes_per_batch < 2:
            raise ConfigError(f"classes_per_batch must be >= 2, got {self.classes_per_batch}")
        if self.instances_per_class < 1:
            raise ConfigError(f"instances_per_class must be >= 1, got {self.instances_per_class}")
        if self.strategy not in ("class_balanced", "image_group"):
            raise ConfigError(f"unknown batch strategy {self.strategy!r}")


@dataclass
class TrainConfig:
    iterations: int
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    epsilon: float = 1e-8
    seed: int = 0
    eval_every: int = 0  # 0 disables the hook

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")


class SGD:
    """Momentum SGD. Weight decay touches only the 'decay' group."""

    def __init__(self, groups: dict, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.groups = {name: list(params) for name, params in groups.items()}
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self._velocity: dict[int, np.ndarray] = {}

    def step(self) -> None:
        for name, params in self.groups.items():
            decay = self.weight_decay if name == "decay" else 0.0
            for p in params:
                if p.grad is None:
                    continue
                g = p.grad + decay * p.value if decay else p.grad
                v = self._velocity.get(id(p))
                v = g if v is None else self.momentum * v + g
                self._velocity[id(p)] = v
                p.value = p.value - self.lr * v


class Adam:
    def __init__(self, groups: dict, lr: float, betas=(0.9, 0.999), epsilon: float = 1e-8,
                 weight_decay: float = 0.0):
        self.groups = {name: list(params) for name, params in groups.items()}
        self.lr = float(lr)
        self.b1, self.b2 = float(betas[0]), float(betas[1])
        self.epsilon = float(epsilon)
        self.weight_decay = float(weight_decay)
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}
        self._t = 0

    def step(self) -> None:
        self._t += 1
        bc1 = 1.0 - self.b1**self._t
        bc2 = 1.0 - self.b2**self._t
        for name, params in self.groups.items():
            decay = self.weight_decay if name == "decay" else 0.0
            for p in params:
                if p.grad is None:
                    continue
                g = p.grad + decay * p.value if decay else p.grad
                m = self._m.get(id(p), np.zeros_like(p.value))
                v = self._v.get(id(p), np.zeros_like(p.value))
                m = self.b1 * m + (1.0 - self.b1) * g
                v = self.b2 * v + (1.0 - self.b2) * g * g
                self._m[id(p)], self._v[id(p)] = m, v
                p.value = p.value - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)


def make_optimizer(head: MixtureHead, config: TrainConfig):
    groups = head.parameter_groups()
    if config.optimizer == "sgd":
        return SGD(groups, config.lr, config.momentum, config.weight_decay)
    return Adam(groups, config.lr, config.betas, config.epsilon, config.weight_decay)


# ---------------------------------------------------------------------------
# batch assembly


def training_pool(dataset: Dataset, include_background: bool) -> list[FeatureRecord]:
    """Records eligible for training: train split (or untagged), never the
    unseen group."""
    pool = []
    for rec in dataset:
        if rec.group == "unseen":
            continue
        if rec.split not in (None, "train"):
            continue
        if rec.is_background and not include_background:
            continue
        pool.append(rec)
    if not pool:
        raise DatasetError("no training records after filtering")
    return pool


def sample_batch(records: list[FeatureRecord], spec: BatchSpec, rng) -> list[FeatureRecord]:
    """One training batch, deterministic under the rng state.

    class_balanced: M distinct classes, D instances each (with replacement
    when a class is short). image_group: every ROI of one sampled image.
    """
    if spec.strategy == "image_group":
        images: dict[str, list[FeatureRecord]] = {}
        for rec in records:
            if rec.image_id is None:
                raise DatasetError(f"record {rec.id} has no image_id (needed for image_group batches)")
            images.setdefault(rec.image_id, []).append(rec)
        image_ids = sorted(images)
        picked = image_ids[int(rng.integers(0, len(image_ids)))]
        return list(images[picked])

    by_class: dict[str, list[FeatureRecord]] = {}
    for rec in records:
        if not rec.is_background:
            by_class.setdefault(rec.label, []).append(rec)
    class_ids = sorted(by_class)
    if len(class_ids) < spec.classes_per_batch:
        raise DatasetError(
            f"dataset has {len(class_ids)} classes, batch needs {spec.classes_per_batch}"
        )
    chosen = rng.choice(len(class_ids), size=spec.classes_per_batch, replace=False)
    batch: list[FeatureRecord] = []
    for ci in chosen:
        members = by_class[class_ids[int(ci)]]
        replace = len(members) < spec.instances_per_class
        idx = rng.choice(len(members), size=spec.instances_per_class, replace=replace)
        batch.extend(members[int(i)] for i in idx)
    return batch


def batch_arrays(batch: list[FeatureRecord], label_to_index: dict[str, int]):
    X = np.stack([rec.features for rec in batch])
    labels = []
    for rec in batch:
        if rec.is_background:
            labels.append(BACKGROUND)
        else:
            try:
                labels.append(label_to_index[rec.label])
            except KeyError:
                raise DatasetError(f"record {rec.id} has label {rec.label!r} outside the class map") from None
    return X, labels


# ---------------------------------------------------------------------------
# steps and the fit loop


def train_step(head: MixtureHead, batch: list[FeatureRecord], label_to_index: dict[str, int],
               optimizer, iteration: int = 0) -> dict:
    """One update. Returns the loss components; raises on divergence."""
    X, labels = batch_arrays(batch, label_to_index)
    loss, parts = head.total_loss(X, labels, update_stats=True)
    if not np.isfinite(parts["total"]):
        raise TrainingDiverged(
            f"non-finite loss {parts['total']}", iteration, [rec.id for rec in batch]
        )
    params = head.parameters()
    zero_grads(params)
    backward(loss)
    optimizer.step()
    return parts


@dataclass
class TrainResult:
    head: MixtureHead
    trace: list[dict] = field(default_factory=list)

    def losses(self) -> np.ndarray:
        return np.array([row["total"] for row in self.trace])


def class_index_map(dataset: Dataset) -> dict[str, int]:
    """Canonical label -> index map over trainable (seen) classes."""
    classes = [c for c in dataset.classes() if not dataset.select(label=c, group="unseen")]
    return {label: i for i, label in enumerate(classes)}


def fit(head: MixtureHead, dataset: Dataset, config: TrainConfig, spec: BatchSpec,
        hook=None) -> TrainResult:
    """Run the optimization loop; reproducible bit-for-bit from the seed."""
    include_bg = head.task_mode == "detection"
    pool = training_pool(dataset, include_background=include_bg)
    label_map = class_index_map(dataset)
    if len(label_map) != head.mixture.num_classes:
        raise ConfigError(
            f"head expects {head.mixture.num_classes} classes, dataset provides {len(label_map)}"
        )
    optimizer = make_optimizer(head, config)
    rng = substream(config.seed, "sampler")
    head.set_mode("train")
    result = TrainResult(head=head)
    for it in range(config.iterations):
        batch = sample_batch(pool, spec, rng)
        parts = train_step(head, batch, label_map, optimizer, iteration=it)
        parts["iteration"] = it
        result.trace.append(parts)
        if hook is not None and config.eval_every > 0 and (it + 1) % config.eval_every == 0:
            head.set_mode("eval")
            hook(it, head)
            head.set_mode("train")
    head.set_mode("eval")
    return result


def write_loss_trace(trace: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "ce", "margin", "total"])
        for row in trace:
            writer.writerow([row["iteration"], repr(row["ce"]), repr(row["margin"]), repr(row["total"])])
