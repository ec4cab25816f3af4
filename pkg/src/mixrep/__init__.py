"""Distance-based recognition with per-class mixture representatives.

The embedding network and the representatives train jointly against a
distance posterior; held-out classes are then handled episodically from a
handful of examples, with an explicit background posterior for open-set
rejection."""

from .autodiff import Node, backward, finite_difference_check, zero_grads
from .config import RunConfig, load_run_config, write_resolved_config
from .data import (
    BACKGROUND_LABEL,
    Dataset,
    FeatureRecord,
    SynthConfig,
    load_dataset,
    save_dataset,
    synth_dataset,
)
from .episodes import (
    Episode,
    EpisodeSpec,
    episode_finetune,
    episode_ground_truth,
    generate_episodes,
    load_episodes,
    replace_representatives,
    run_episode,
    save_episodes,
    score_queries,
    select_support_rois,
)
from .errors import ConfigError, DatasetError, MixrepError, ShapeError, TrainingDiverged
from .head import (
    BACKGROUND,
    EmbeddingConfig,
    EmbeddingNet,
    HeadOutput,
    MixtureConfig,
    MixtureHead,
    Representatives,
    load_checkpoint,
    save_checkpoint,
)
from .metrics import (
    DetectionRecord,
    GroundTruthBox,
    PRCurve,
    attribute_neighborhood_precision,
    average_precision,
    classification_error,
    iou,
    load_detections,
    load_ground_truth,
    map_over_episodes,
    match_detections,
    per_class_ap,
    pr_curve,
    recall_at_k,
    save_detections,
    save_ground_truth,
)
from .rng import substream
from .training import (
    Adam,
    BatchSpec,
    SGD,
    TrainConfig,
    TrainResult,
    class_index_map,
    fit,
    make_optimizer,
    sample_batch,
    train_step,
    write_loss_trace,
)

__version__ = "0.1.0"
