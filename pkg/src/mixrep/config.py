"""One declarative run configuration covering head, trainer, episodes, and
evaluation. Defaults follow the reference setup: sigma 0.5, 3 modes per class
for classification heads and 5 for detection, 12x4 class-balanced batches,
wide classification widths (2048, 1024) vs detection (1024, 1024, 256), 500
episodes of 10 queries per class, IoU 0.7 support selection."""

import dataclasses
import json
from dataclasses import dataclass

from .data import SynthConfig
from .episodes import EpisodeSpec
from .errors import ConfigError
from .head import EmbeddingConfig, MixtureConfig
from .training import BatchSpec, TrainConfig

CLASSIFICATION_WIDTHS = (2048, 1024)
DETECTION_WIDTHS = (1024, 1024, 256)


@dataclass
class RunConfig:
    task_mode: str = "classification"
    seed: int = 0

    # head; widths and modes fall back to the task-mode defaults above
    input_dim: int | None = None
    layer_widths: tuple | None = None
    modes_per_class: int | None = None
    sigma: float = 0.5
    margin: float = 0.5
    posterior_mode: str = "normalized"
    final_l2_normalize: bool = True
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5

    # trainer
    iterations: int = 500
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    classes_per_batch: int = 12
    instances_per_class: int = 4
    batch_strategy: str = "class_balanced"

    # episodes
    shots: int = 1
    ways: int = 5
    queries_per_class: int = 10
    episode_count: int = 500
    class_pool: str = "unseen"
    background_queries: int = 0
    max_shots: int = 10
    finetune_steps: int = 50
    finetune_lr: float = 0.01

    # evaluation
    support_iou: float = 0.7
    match_iou: float = 0.5
    recall_ks: tuple = (10, 100)

    # synthetic data generation (synth-data command)
    synth: SynthConfig | None = None

    def __post_init__(self):
        if self.task_mode not in ("classification", "detection"):
            raise ConfigError(
                f"task_mode must be 'classification' or 'detection', got {self.task_mode!r}"
            )
        if self.layer_widths is not None:
            self.layer_widths = tuple(int(w) for w in self.layer_widths)
        self.recall_ks = tuple(int(k) for k in self.recall_ks)
        if any(k < 1 for k in self.recall_ks):
            raise ConfigError(f"recall_ks must be >= 1, got {self.recall_ks}")
        for name in ("support_iou", "match_iou"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1], got {v}")
        if self.finetune_steps < 0:
            raise ConfigError("finetune_steps must be >= 0")

    # ---- resolved values -------------------------------------------------

    def resolved_widths(self) -> tuple:
        if self.layer_widths is not None:
            return self.layer_widths
        return CLASSIFICATION_WIDTHS if self.task_mode == "classification" else DETECTION_WIDTHS

    def resolved_modes(self) -> int:
        if self.modes_per_class is not None:
            return int(self.modes_per_class)
        return 3 if self.task_mode == "classification" else 5

    def embedding_config(self, input_dim: int | None = None) -> EmbeddingConfig:
        dim = self.input_dim if input_dim is None else input_dim
        if dim is None:
            raise ConfigError("input_dim is not set and no dataset provided it")
        return EmbeddingConfig(
            input_dim=int(dim),
            layer_widths=self.resolved_widths(),
            final_l2_normalize=self.final_l2_normalize,
            bn_momentum=self.bn_momentum,
            bn_epsilon=self.bn_epsilon,
        )

    def mixture_config(self, num_classes: int) -> MixtureConfig:
        return MixtureConfig(
            num_classes=num_classes,
            modes_per_class=self.resolved_modes(),
            sigma=self.sigma,
            margin=self.margin,
            posterior_mode=self.posterior_mode,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations,
            optimizer=self.optimizer,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            seed=self.seed,
        )

    def batch_spec(self) -> BatchSpec:
        return BatchSpec(
            classes_per_batch=self.classes_per_batch,
            instances_per_class=self.instances_per_class,
            strategy=self.batch_strategy,
        )

    def episode_spec(self, shots: int | None = None) -> EpisodeSpec:
        return EpisodeSpec(
            shots=self.shots if shots is None else int(shots),
            ways=self.ways,
            queries_per_class=self.queries_per_class,
            episode_count=self.episode_count,
            seed=self.seed,
            class_pool=self.class_pool,
            background_queries=self.background_queries,
            max_shots=self.max_shots,
        )

    # ---- wire form ---------------------------------------------------------

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "synth":
                value = None if value is None else dataclasses.asdict(value)
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError(f"config must be a JSON object, got {type(doc).__name__}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        doc = dict(doc)
        synth = doc.pop("synth", None)
        if synth is not None:
            if not isinstance(synth, dict):
                raise ConfigError("synth section must be an object")
            try:
                synth = SynthConfig(**synth)
            except TypeError as e:
                raise ConfigError(f"bad synth section: {e}") from None
        try:
            return cls(synth=synth, **doc)
        except TypeError as e:
            raise ConfigError(f"bad config value: {e}") from None


def load_run_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg}, line {e.lineno})") from None
    return RunConfig.from_dict(doc)


def write_resolved_config(config: RunConfig, path) -> None:
    """Log the fully resolved run config; feeding the file back reproduces
    the run bit-exactly."""
    doc = config.to_dict()
    doc["layer_widths"] = list(config.resolved_widths())
    doc["modes_per_class"] = config.resolved_modes()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")
