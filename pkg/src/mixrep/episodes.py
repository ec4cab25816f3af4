"""Episodic few-shot evaluation: build episodes from held-out classes, swap
class representatives for support embeddings, optionally fine-tune, score.

Episode sampling is arranged so that one seed pins the whole benchmark for
every shot count at once: class choice, query choice, and distractor choice
never look at the number of shots, and the support draw gets its own
substream keyed by it. Running 1-, 5-, and 10-shot against the same seed
therefore scores identical query sets.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import BACKGROUND_LABEL, Dataset, FeatureRecord
from .errors import ConfigError, DatasetError
from .head import MixtureConfig, MixtureHead, Representatives
from .metrics import DetectionRecord, GroundTruthBox, iou
from .rng import substream
from .training import SGD

SCHEMA_VERSION = 1

# additive squared-distance penalty that retires a padding mode: exp(-1e8)
# underflows to exactly 0, so padded slots never win or leak mass
PAD_PENALTY = 1e8


@dataclass
class EpisodeSpec:
    """Benchmark shape. max_shots bounds the shot counts the episode file
    must stay valid for; classes need queries_per_class + max_shots items."""

    shots: int
    ways: int
    queries_per_class: int = 10
    episode_count: int = 500
    seed: int = 0
    class_pool: str = "unseen"  # "seen" | "unseen"
    background_queries: int = 0
    max_shots: int = 10

    def __post_init__(self):
        if self.shots < 1:
            raise ConfigError(f"shots must be >= 1, got {self.shots}")
        if self.ways < 1:
            raise ConfigError(f"ways must be >= 1, got {self.ways}")
        if self.shots > self.max_shots:
            raise ConfigError(f"shots {self.shots} exceeds max_shots {self.max_shots}")
        if self.queries_per_class < 1:
            raise ConfigError("queries_per_class must be >= 1")
        if self.episode_count < 1:
            raise ConfigError("episode_count must be >= 1")
        if self.class_pool not in ("seen", "unseen"):
            raise ConfigError(f"class_pool must be 'seen' or 'unseen', got {self.class_pool!r}")
        if self.background_queries < 0:
            raise ConfigError("background_queries must be >= 0")


@dataclass
class Episode:
    episode_id: int
    class_ids: list[str]
    support: dict[str, list[FeatureRecord]]
    queries: list[FeatureRecord]

    def __post_init__(self):
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ConfigError("episode classes must be distinct")
        if set(self.support) != set(self.class_ids):
            raise ConfigError("support classes must match class_ids")
        sizes = {len(v) for v in self.support.values()}
        if len(sizes) != 1 or 0 in sizes:
            raise ConfigError(f"support must hold the same shot count per class, got {sizes}")
        overlap = self.support_ids() & {q.id for q in self.queries}
        if overlap:
            raise ConfigError(f"support and query items overlap: {sorted(overlap)[:5]}")

    def support_ids(self) -> set:
        return {r.id for recs in self.support.values() for r in recs}

    def query_ids(self) -> list[str]:
        return [q.id for q in self.queries]


def _pool_classes(dataset: Dataset, class_pool: str) -> dict[str, list[FeatureRecord]]:
    by_class: dict[str, list[FeatureRecord]] = {}
    for rec in dataset:
        if rec.is_background:
            continue
        tagged_unseen = rec.group == "unseen"
        if (class_pool == "unseen") != tagged_unseen:
            continue
        by_class.setdefault(rec.label, []).append(rec)
    return {label: sorted(recs, key=lambda r: r.id) for label, recs in by_class.items()}


def generate_episodes(dataset: Dataset, spec: EpisodeSpec) -> list[Episode]:
    """Sample spec.episode_count episodes from the chosen class pool.

    Classes too small for queries_per_class + max_shots items are skipped
    with a warning; running out of classes is an error. Pure function of
    (dataset, spec): the rng substreams are derived from spec.seed alone.
    """
    by_class = _pool_classes(dataset, spec.class_pool)
    need = spec.queries_per_class + spec.max_shots
    eligible = sorted(label for label, recs in by_class.items() if len(recs) >= need)
    skipped = sorted(set(by_class) - set(eligible))
    if skipped:
        warnings.warn(f"skipping classes with fewer than {need} items: {skipped}")
    if len(eligible) < spec.ways:
        raise DatasetError(
            f"{spec.ways}-way episodes need {spec.ways} usable classes, have {len(eligible)}"
        )
    bg_pool = sorted((r for r in dataset if r.is_background), key=lambda r: r.id)
    if spec.background_queries > len(bg_pool):
        raise DatasetError(
            f"episodes need {spec.background_queries} background queries, "
            f"dataset has {len(bg_pool)}"
        )

    episodes = []
    for i in range(spec.episode_count):
        rng = substream(spec.seed, "episode", i, "classes")
        picked = rng.choice(len(eligible), size=spec.ways, replace=False)
        classes = [eligible[int(j)] for j in picked]

        rng = substream(spec.seed, "episode", i, "queries")
        queries: list[FeatureRecord] = []
        query_ids: dict[str, set] = {}
        for label in classes:
            recs = by_class[label]
            idx = rng.choice(len(recs), size=spec.queries_per_class, replace=False)
            chosen = [recs[int(j)] for j in idx]
            queries.extend(chosen)
            query_ids[label] = {r.id for r in chosen}
        if spec.background_queries:
            rng = substream(spec.seed, "episode", i, "background")
            idx = rng.choice(len(bg_pool), size=spec.background_queries, replace=False)
            queries.extend(bg_pool[int(j)] for j in idx)

        rng = substream(spec.seed, "episode", i, "support", spec.shots)
        support: dict[str, list[FeatureRecord]] = {}
        for label in classes:
            rest = [r for r in by_class[label] if r.id not in query_ids[label]]
            idx = rng.choice(len(rest), size=spec.shots, replace=False)
            support[label] = [rest[int(j)] for j in idx]

        episodes.append(Episode(i, classes, support, queries))
    return episodes


def select_support_rois(candidates, gt_boxes, iou_threshold: float = 0.7):
    """Pick support ROIs for each annotated object.

    Every candidate whose best overlap reaches the threshold is kept (several
    may pass for one object), labeled with that object's class. An object no
    candidate reaches falls back to its single best-overlap candidate, so
    each object contributes at least one ROI.
    """
    candidates = list(candidates)
    gt_boxes = list(gt_boxes)
    if not candidates:
        raise DatasetError("no candidate rois")
    if not gt_boxes:
        raise DatasetError("no ground-truth boxes")
    for rec in candidates:
        if rec.box is None:
            raise DatasetError(f"candidate {rec.id} has no box")

    overlaps = np.array([[iou(rec.box, gt.box) for gt in gt_boxes] for rec in candidates])
    selected: list[FeatureRecord] = []
    covered = [False] * len(gt_boxes)
    for ci, rec in enumerate(candidates):
        gi = int(np.argmax(overlaps[ci]))
        if overlaps[ci, gi] >= iou_threshold:
            selected.append(rec.relabeled(gt_boxes[gi].class_id))
            covered[gi] = True
    for gi, got in enumerate(covered):
        if not got:
            ci = int(np.argmax(overlaps[:, gi]))
            selected.append(candidates[ci].relabeled(gt_boxes[gi].class_id))
    return selected


# ---------------------------------------------------------------------------
# representative replacement


@dataclass
class RepresentativeSwap:
    """Undo token: restores the trained mixture bit-exactly."""

    head: MixtureHead
    saved_representatives: Representatives
    saved_mixture: MixtureConfig
    saved_mask: np.ndarray | None
    restored: bool = field(default=False)

    def restore(self) -> None:
        if self.restored:
            return
        self.head.representatives = self.saved_representatives
        self.head.mixture = self.saved_mixture
        self.head.distance_mask = self.saved_mask
        self.restored = True


def replace_representatives(head: MixtureHead, embeddings_per_class) -> RepresentativeSwap:
    """Install support embeddings as the mixture, one mode per embedding.

    embeddings_per_class: one (k_c, dim) array per episode class, ragged k_c
    allowed (several ROIs may represent one object). Shorter classes are
    padded with retired modes. Returns a swap token whose restore() brings
    back the trained representatives.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in embeddings_per_class]
    if not arrays:
        raise ConfigError("no episode classes")
    dim = head.embedding.config.output_dim
    for c, a in enumerate(arrays):
        if a.ndim != 2 or a.shape[1] != dim or a.shape[0] == 0:
            raise ConfigError(
                f"class {c}: support embeddings must be (k, {dim}) with k >= 1, got {a.shape}"
            )
    modes = max(a.shape[0] for a in arrays)
    values = np.zeros((len(arrays), modes, dim))
    mask = np.zeros((len(arrays), modes))
    for c, a in enumerate(arrays):
        values[c, : a.shape[0]] = a
        mask[c, a.shape[0]:] = PAD_PENALTY

    swap = RepresentativeSwap(head, head.representatives, head.mixture, head.distance_mask)
    mix = head.mixture
    head.mixture = MixtureConfig(
        num_classes=len(arrays),
        modes_per_class=modes,
        sigma=mix.sigma,
        margin=mix.margin,
        posterior_mode=mix.posterior_mode,
    )
    head.representatives = Representatives(len(arrays), modes, dim, values=values)
    head.distance_mask = mask if np.any(mask) else None
    return swap


def support_embeddings(head: MixtureHead, episode: Episode) -> list[np.ndarray]:
    """Embed each class's support set with the current net (eval mode)."""
    head.set_mode("eval")
    return [
        head.embedding.embed_batch(np.stack([r.features for r in episode.support[label]]))
        for label in episode.class_ids
    ]


# ---------------------------------------------------------------------------
# episode fine-tuning


@dataclass
class FinetuneResult:
    losses: list[float]
    kept_step: int


def episode_finetune(head: MixtureHead, episode: Episode, steps: int,
                     lr: float = 0.01) -> FinetuneResult:
    """Adapt the last embedding layer and the installed representatives to
    the support set; every other parameter is untouched and batch-norm stays
    in eval mode. Keeps the best-loss iterate, so the final support loss
    never exceeds the initial one.
    """
    if steps < 0:
        raise ConfigError(f"steps must be >= 0, got {steps}")
    if steps == 0:
        return FinetuneResult([], 0)
    X = np.stack([r.features for label in episode.class_ids for r in episode.support[label]])
    labels = [i for i, label in enumerate(episode.class_ids) for _ in episode.support[label]]
    head.set_mode("eval")
    tuned = head.embedding.last_layer_parameters() + [head.representatives.weight]
    optimizer = SGD({"no_decay": tuned}, lr=lr, momentum=0.0)

    losses = []
    best = (np.inf, 0, None)
    for step in range(steps + 1):
        loss, parts = head.total_loss(X, labels, update_stats=False)
        value = parts["total"]
        losses.append(value)
        if value < best[0]:
            best = (value, step, [p.value.copy() for p in tuned])
        if step == steps:
            break
        ad.zero_grads(head.parameters())
        ad.backward(loss)
        optimizer.step()
    if losses[-1] > best[0]:
        for p, v in zip(tuned, best[2]):
            p.value = v.copy()
        kept = best[1]
    else:
        kept = steps
    return FinetuneResult(losses, kept)


# ---------------------------------------------------------------------------
# scoring


def score_queries(head: MixtureHead, queries, episode_id: int, class_ids) -> list[DetectionRecord]:
    """One detection record per query: best-mode class posterior as the
    score, background label when the background posterior beats every class.
    Queries are scored independently, so order never matters."""
    head.set_mode("eval")
    records = []
    for j, rec in enumerate(queries):
        out = head.score(rec.features)
        per_class = out.mode_probs.max(axis=1)
        pred = int(np.argmax(per_class))
        top = float(per_class[pred])
        bg = 1.0 - float(per_class.max())
        if bg > top:
            class_id, score = BACKGROUND_LABEL, bg
        else:
            class_id, score = class_ids[pred], top
        records.append(DetectionRecord(
            episode_id=episode_id,
            image_id=rec.image_id if rec.image_id is not None else rec.id,
            box=rec.box if rec.box is not None else (0.0, 0.0, 1.0, 1.0),
            class_id=class_id,
            score=min(1.0, max(0.0, score)),
            record_id=f"e{episode_id:05d}-q{j:04d}-{rec.id}",
        ))
    return records


def run_episode(head: MixtureHead, episode: Episode, finetune_steps: int = 0,
                finetune_lr: float = 0.01) -> list[DetectionRecord]:
    """Full episode pass against a base model, leaving it bit-exactly intact:
    swap in support representatives, optionally fine-tune, score queries,
    restore everything."""
    swap = replace_representatives(head, support_embeddings(head, episode))
    tuned = head.embedding.last_layer_parameters()
    saved = [p.value.copy() for p in tuned]
    try:
        if finetune_steps:
            episode_finetune(head, episode, finetune_steps, finetune_lr)
        return score_queries(head, episode.queries, episode.episode_id, episode.class_ids)
    finally:
        for p, v in zip(tuned, saved):
            p.value = v
        swap.restore()


def episode_ground_truth(episode: Episode) -> list[GroundTruthBox]:
    """Ground truth for the foreground queries of one episode."""
    boxes = []
    for rec in episode.queries:
        if rec.is_background:
            continue
        boxes.append(GroundTruthBox(
            episode_id=episode.episode_id,
            image_id=rec.image_id if rec.image_id is not None else rec.id,
            box=rec.box if rec.box is not None else (0.0, 0.0, 1.0, 1.0),
            class_id=rec.label,
        ))
    return boxes


# ---------------------------------------------------------------------------
# episode files: JSON Lines, one episode per line

def save_episodes(episodes, spec: EpisodeSpec, path) -> None:
    header = {
        "schema_version": SCHEMA_VERSION,
        "kind": "episodes",
        "spec": {
            "shots": spec.shots,
            "ways": spec.ways,
            "queries_per_class": spec.queries_per_class,
            "episode_count": spec.episode_count,
            "seed": spec.seed,
            "class_pool": spec.class_pool,
            "background_queries": spec.background_queries,
            "max_shots": spec.max_shots,
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for ep in episodes:
            fh.write(json.dumps({
                "episode_id": ep.episode_id,
                "class_ids": ep.class_ids,
                "support_item_ids": [r.id for label in ep.class_ids for r in ep.support[label]],
                "query_item_ids": ep.query_ids(),
            }) + "\n")


def load_episodes(path, dataset: Dataset) -> tuple[list[Episode], EpisodeSpec]:
    """Rebuild episodes from ids against the dataset they were drawn from."""
    spec = None
    episodes = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as e:
                raise DatasetError(f"invalid JSON: {e.msg}", line_no) from None
            if "kind" in obj:
                if episodes or line_no != 1:
                    raise DatasetError("header line must come first", line_no)
                if obj.get("kind") != "episodes":
                    raise DatasetError(f"expected kind 'episodes', got {obj.get('kind')!r}", line_no)
                if obj.get("schema_version") != SCHEMA_VERSION:
                    raise DatasetError(
                        f"unsupported schema_version {obj.get('schema_version')!r}", line_no
                    )
                try:
                    spec = EpisodeSpec(**obj["spec"])
                except (KeyError, TypeError) as e:
                    raise DatasetError(f"bad episode spec: {e}", line_no) from None
                continue
            if spec is None:
                raise DatasetError("missing header line", line_no)
            try:
                support_recs = [dataset.by_id[i] for i in obj["support_item_ids"]]
                queries = [dataset.by_id[i] for i in obj["query_item_ids"]]
                class_ids = list(obj["class_ids"])
                episode_id = int(obj["episode_id"])
            except KeyError as e:
                raise DatasetError(f"unknown id or missing key {e.args[0]!r}", line_no) from None
            support: dict[str, list[FeatureRecord]] = {c: [] for c in class_ids}
            for rec in support_recs:
                if rec.label not in support:
                    raise DatasetError(
                        f"support item {rec.id} has label {rec.label!r} outside the episode", line_no
                    )
                support[rec.label].append(rec)
            episodes.append(Episode(episode_id, class_ids, support, queries))
    if spec is None:
        raise DatasetError("missing header line")
    return episodes, spec
