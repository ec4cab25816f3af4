"""Embedding network plus per-class mixture representatives.

The head embeds inputs onto the unit sphere, measures Euclidean distances to
N*K learnable mode centers ("representatives"), turns distances into Gaussian
mode probabilities, and derives open-set class/background posteriors. Training
combines a cross-entropy term on the posterior with a hinge that enforces a
margin between the closest correct-class mode and the closest wrong-class
mode.

Everything differentiable is built from autodiff primitives; quantities the
primitives do not provide directly (square root, division, row selection) are
composed from exp/log and constant selector matmuls.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Node
from .errors import ConfigError, PosteriorUnderflowError, ShapeError
from .rng import substream

BACKGROUND = -1  # label sentinel for clutter items (detection mode only)

PROB_FLOOR = 1e-12
DIST_SQ_FLOOR = 1e-12  # squared-distance clamp inside the margin loss


@dataclass
class EmbeddingConfig:
    """Widths and switches of the embedding stack.

    All layers are affine; every layer except the last is followed by batch
    norm and ReLU, the last is linear, and the output is projected to the
    unit sphere unless `final_l2_normalize` is off. The last width is the
    embedding dimension.
    """

    input_dim: int
    layer_widths: tuple
    final_l2_normalize: bool = True
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        self.layer_widths = tuple(int(w) for w in self.layer_widths)
        self.input_dim = int(self.input_dim)
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be positive, got {self.input_dim}")
        if not self.layer_widths or any(w < 1 for w in self.layer_widths):
            raise ConfigError(f"layer_widths must be positive, got {self.layer_widths}")

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]


@dataclass
class MixtureConfig:
    num_classes: int
    modes_per_class: int = 3
    sigma: float = 0.5
    margin: float = 0.5
    posterior_mode: str = "normalized"  # "max" | "normalized"

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.modes_per_class < 1:
            raise ConfigError(f"modes_per_class must be >= 1, got {self.modes_per_class}")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if not self.margin > 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if self.posterior_mode not in ("max", "normalized"):
            raise ConfigError(f"posterior_mode must be 'max' or 'normalized', got {self.posterior_mode!r}")


class EmbeddingNet:
    """Affine stack with BN+ReLU on all but the last layer.

    Hidden layers carry no bias (the BN shift plays that role); the last
    layer has one so a dead-ReLU input still embeds to a usable direction.
    """

    def __init__(self, config: EmbeddingConfig, seed: int = 0):
        self.config = config
        self.weights: list[Node] = []
        self.gammas: list[Node] = []
        self.betas: list[Node] = []
        self.bn_states: list[BatchNormState] = []
        self.mode = "train"

        widths = [config.input_dim, *config.layer_widths]
        last = len(config.layer_widths) - 1
        for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
            rng = substream(seed, "init", "layer", i)
            std = np.sqrt(2.0 / fan_in) if i < last else np.sqrt(1.0 / fan_in)
            self.weights.append(
                ad.parameter(rng.normal(0.0, std, size=(fan_in, fan_out)), f"layers.{i}.weight")
            )
            if i < last:
                self.gammas.append(ad.parameter(np.ones(fan_out), f"layers.{i}.gamma"))
                self.betas.append(ad.parameter(np.zeros(fan_out), f"layers.{i}.beta"))
                self.bn_states.append(
                    BatchNormState.create(fan_out, config.bn_momentum, config.bn_epsilon)
                )
        rng = substream(seed, "init", "layer", last, "bias")
        self.last_bias = ad.parameter(
            rng.normal(0.0, 0.01, size=config.output_dim), f"layers.{last}.bias"
        )

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode
        for st in self.bn_states:
            st.mode = mode

    def forward(self, X, update_stats: bool = True) -> Node:
        """Batch forward: (B, input_dim) -> (B, e), rows unit-norm."""
        h = X if isinstance(X, Node) else ad.constant(np.asarray(X, dtype=np.float64))
        if h.value.ndim != 2 or h.value.shape[1] != self.config.input_dim:
            raise ShapeError(
                "embed", (h.value.shape,), f"expected (batch, {self.config.input_dim})"
            )
        if not np.all(np.isfinite(h.value)):
            raise ValueError("embed: non-finite input")
        last = len(self.weights) - 1
        for i, w in enumerate(self.weights):
            h = ad.matmul(h, w)
            if i == last:
                h = ad.add(h, self.last_bias)
            else:
                h = ad.batch_norm(
                    h,
                    self.gammas[i],
                    self.betas[i],
                    self.bn_states[i],
                    update_stats=update_stats and self.mode == "train",
                )
                h = ad.relu(h)
        if self.config.final_l2_normalize:
            h = ad.l2_normalize(h)
        return h

    def embed(self, x) -> Node:
        """One input vector (input_dim,) -> embedding (e,)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise ShapeError("embed", (x.shape,), "expected a single vector")
        row = self.forward(x.reshape(1, -1), update_stats=False)
        return ad.reduce_sum(row, axis=0)

    def embed_batch(self, X) -> np.ndarray:
        """Plain-array convenience: (B, input_dim) -> (B, e) values."""
        return self.forward(X, update_stats=False).value

    def parameters(self) -> list[Node]:
        params: list[Node] = []
        for i, w in enumerate(self.weights):
            params.append(w)
            if i < len(self.gammas):
                params.extend([self.gammas[i], self.betas[i]])
        params.append(self.last_bias)
        return params

    def last_layer_parameters(self) -> list[Node]:
        return [self.weights[-1], self.last_bias]


class Representatives:
    """N*K mode centers stored as the weight row of an affine map fed the
    constant scalar 1, so materializing them is a forward pass that
    reproduces the stored values exactly and trains like any other layer."""

    def __init__(self, num_classes: int, modes_per_class: int, dim: int, values=None, seed: int = 0):
        self.num_classes = int(num_classes)
        self.modes_per_class = int(modes_per_class)
        self.dim = int(dim)
        shape = (self.num_classes, self.modes_per_class, self.dim)
        if values is None:
            rng = substream(seed, "init", "representatives")
            # std 0.01 keeps initial centers near the origin, so distances
            # from unit-norm embeddings start O(1)
            values = rng.normal(0.0, 0.01, size=shape)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != shape:
            raise ShapeError("representatives", (values.shape,), f"expected {shape}")
        if not np.all(np.isfinite(values)):
            raise ConfigError("representatives must be finite")
        self.weight = ad.parameter(values.reshape(1, -1).copy(), "representatives.weight")

    def materialize(self) -> Node:
        """Forward pass of the constant-1 affine layer: flat (1, N*K*dim)."""
        return ad.matmul(ad.constant(np.ones((1, 1))), self.weight)

    def values(self) -> np.ndarray:
        return self.weight.value.reshape(
            self.num_classes, self.modes_per_class, self.dim
        ).copy()

    def set_values(self, values) -> None:
        values = np.asarray(values, dtype=np.float64)
        shape = (self.num_classes, self.modes_per_class, self.dim)
        if values.shape != shape:
            raise ShapeError("representatives", (values.shape,), f"expected {shape}")
        self.weight.value = values.reshape(1, -1).copy()
        self.weight.grad = None


# ---------------------------------------------------------------------------
# posterior and loss ops (Node in, Node out; plain arrays are wrapped)


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else ad.constant(np.asarray(x, dtype=np.float64))


def _sqrt(node: Node) -> Node:
    # exp(0.5 log x); exactly 0 at x = 0
    return ad.exp(ad.scale(ad.log(node), 0.5))


def clamp_min(node: Node, floor: float) -> Node:
    return ad.add(ad.relu(ad.add(node, ad.constant(-float(floor)))), ad.constant(float(floor)))


def distance_matrix(embedding, representatives) -> Node:
    """Euclidean distances from one embedded point to every mode center.

    `representatives` may be a Representatives object, an (N, K, e) tensor,
    or any target form pairwise_sq_dist accepts. Output entries are >= 0 and
    exactly 0 where the embedding coincides with a center.
    """
    e = _wrap(embedding)
    if isinstance(representatives, Representatives):
        d2 = ad.pairwise_sq_dist(
            e,
            representatives.materialize(),
            representatives.num_classes,
            representatives.modes_per_class,
        )
    else:
        d2 = ad.pairwise_sq_dist(e, _wrap(representatives))
    return _sqrt(d2)


def mode_probabilities(distances, sigma: float) -> Node:
    """Isotropic-Gaussian mode likelihoods exp(-d^2 / (2 sigma^2)), in (0, 1]."""
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    d = _wrap(distances)
    if np.any(d.value < 0):
        raise ValueError("distances must be nonnegative")
    return ad.exp(ad.scale(ad.square(d), -1.0 / (2.0 * float(sigma) ** 2)))


def class_posterior_max(probs) -> Node:
    """Per-class posterior as the best mode: row max of the (N, K) table."""
    p = _wrap(probs)
    if p.value.ndim != 2:
        raise ShapeError("class_posterior_max", (p.value.shape,), "expected (N, K)")
    return ad.reduce_max(p, axis=1)


def class_posterior_normalized(probs) -> Node:
    """Softer posterior: per-class probability mass over total mass.

    Sums to 1 within 1e-9. Division is composed as exp(log a - log b), both
    arguments strictly positive away from total underflow.
    """
    p = _wrap(probs)
    if p.value.ndim != 2:
        raise ShapeError("class_posterior_normalized", (p.value.shape,), "expected (N, K)")
    if np.all(p.value < 1e-300):
        raise PosteriorUnderflowError(
            f"all mode probabilities below 1e-300 (max {p.value.max():.3e})"
        )
    row_mass = ad.matmul(p, ad.constant(np.ones(p.value.shape[1])))
    total = ad.reduce_sum(p)
    return ad.exp(ad.add(ad.log(row_mass), ad.negate(ad.log(total))))


def background_posterior(probs) -> Node:
    """Open-set lower bound: 1 minus the single best mode probability."""
    p = _wrap(probs)
    return ad.add(ad.constant(1.0), ad.negate(ad.reduce_max(p)))


def margin_loss(distances, true_class: int, margin: float) -> Node:
    """Hinge between the closest correct-class mode and the closest
    wrong-class mode: relu(min_true - min_wrong + margin).

    `distances` is the (N, K) matrix; `true_class` is a 0-based row index.
    """
    d = _wrap(distances)
    if d.value.ndim != 2:
        raise ShapeError("margin_loss", (d.value.shape,), "expected (N, K)")
    n = d.value.shape[0]
    if not 0 <= true_class < n:
        raise ValueError(f"true_class {true_class} out of range for {n} classes")
    if n < 2:
        raise ValueError("margin_loss needs a competing class (N >= 2)")
    pick = np.zeros(n)
    pick[true_class] = 1.0
    drop = np.delete(np.eye(n), true_class, axis=0)
    d_true = ad.reduce_min(ad.matmul(ad.constant(pick), d))
    d_wrong = ad.reduce_min(ad.matmul(ad.constant(drop), d))
    return ad.relu(ad.add(ad.add(d_true, ad.negate(d_wrong)), ad.constant(float(margin))))


def cross_entropy_loss(class_posterior, background_post, label: int) -> Node:
    """Negative log probability of the true label.

    With `background_post` None the posterior vector is taken as already
    normalized and the label must be a foreground class. Otherwise the
    (N+1)-way distribution is formed by renormalizing [class_posterior,
    background_post] to sum 1 (argmax preserved), and `label` may be
    BACKGROUND. Probabilities are floored at 1e-12 inside the log.
    """
    post = _wrap(class_posterior)
    if post.value.ndim != 1:
        raise ShapeError("cross_entropy_loss", (post.value.shape,), "expected (N,)")
    n = post.value.shape[0]

    def pick_class(lbl):
        if not 0 <= lbl < n:
            raise ValueError(f"label {lbl} out of range for {n} classes")
        sel = np.zeros(n)
        sel[lbl] = 1.0
        return ad.matmul(ad.constant(sel), post)

    if background_post is None:
        if label == BACKGROUND:
            raise ValueError("background label requires a background posterior")
        picked = pick_class(label)
        return ad.negate(ad.log(clamp_min(picked, PROB_FLOOR)))

    bg = _wrap(background_post)
    total = ad.add(ad.reduce_sum(post), bg)
    picked = bg if label == BACKGROUND else pick_class(label)
    ratio = ad.exp(ad.add(ad.log(picked), ad.negate(ad.log(total))))
    return ad.negate(ad.log(clamp_min(ratio, PROB_FLOOR)))


# ---------------------------------------------------------------------------
# the combined head


@dataclass
class HeadOutput:
    """Everything the head says about one input."""

    embedding: np.ndarray
    distances: np.ndarray
    mode_probs: np.ndarray
    class_posterior: np.ndarray
    background_posterior: float
    predicted_class: int
    is_background: bool


class MixtureHead:
    """Embedding network joined with trainable mixture representatives.

    `task_mode` selects the cross-entropy route: "classification" uses the
    normalized posterior (no background), "detection" renormalizes the
    max-mode posteriors together with the background term.
    """

    def __init__(
        self,
        embedding_config: EmbeddingConfig,
        mixture_config: MixtureConfig,
        task_mode: str = "classification",
        seed: int = 0,
    ):
        if task_mode not in ("classification", "detection"):
            raise ConfigError(f"task_mode must be 'classification' or 'detection', got {task_mode!r}")
        self.embedding = EmbeddingNet(embedding_config, seed=seed)
        self.mixture = mixture_config
        self.representatives = Representatives(
            mixture_config.num_classes,
            mixture_config.modes_per_class,
            embedding_config.output_dim,
            seed=seed,
        )
        self.task_mode = task_mode
        # optional (N, K) additive squared-distance offsets; large entries
        # retire padding modes without changing live ones
        self.distance_mask: np.ndarray | None = None

    @property
    def mode(self) -> str:
        return self.embedding.mode

    def set_mode(self, mode: str) -> None:
        self.embedding.set_mode(mode)

    def parameters(self) -> list[Node]:
        return self.embedding.parameters() + [self.representatives.weight]

    def named_parameters(self) -> dict[str, Node]:
        return {p.name: p for p in self.parameters()}

    def parameter_groups(self) -> dict[str, list[Node]]:
        """Weight decay applies to affine weights/bias only, never to BN
        affine parameters or the representatives."""
        decay = [w for w in self.embedding.weights] + [self.embedding.last_bias]
        no_decay = (
            list(self.embedding.gammas)
            + list(self.embedding.betas)
            + [self.representatives.weight]
        )
        return {"decay": decay, "no_decay": no_decay}

    def _squared_distances(self, emb_node: Node) -> Node:
        reps = self.representatives
        d2 = ad.pairwise_sq_dist(
            emb_node, reps.materialize(), reps.num_classes, reps.modes_per_class
        )
        if self.distance_mask is not None:
            d2 = ad.add(d2, ad.constant(self.distance_mask))
        return d2

    def total_loss(self, X, labels, update_stats: bool = True):
        """Mean over the batch of (cross-entropy + margin hinge).

        Background-labeled items (detection mode) contribute cross-entropy
        only. Returns (scalar Node, {"ce", "margin", "total"} floats).
        """
        X = np.asarray(X, dtype=np.float64)
        labels = [int(l) for l in labels]
        if X.ndim != 2 or X.shape[0] != len(labels) or not labels:
            raise ShapeError("total_loss", (X.shape,), f"need one row per label ({len(labels)})")
        n_classes = self.mixture.num_classes
        batch = len(labels)
        E = self.embedding.forward(X, update_stats=update_stats)
        inv_two_sigma_sq = -1.0 / (2.0 * self.mixture.sigma**2)

        ce_total: Node | None = None
        margin_total: Node | None = None
        for i, label in enumerate(labels):
            sel = np.zeros(batch)
            sel[i] = 1.0
            emb = ad.matmul(ad.constant(sel), E)
            d2 = self._squared_distances(emb)
            probs = ad.exp(ad.scale(d2, inv_two_sigma_sq))
            if self.task_mode == "classification":
                if label == BACKGROUND:
                    raise ValueError("background labels require detection mode")
                ce = cross_entropy_loss(class_posterior_normalized(probs), None, label)
            else:
                ce = cross_entropy_loss(
                    class_posterior_max(probs), background_posterior(probs), label
                )
            ce_total = ce if ce_total is None else ad.add(ce_total, ce)
            if label != BACKGROUND and n_classes >= 2:
                dist = _sqrt(clamp_min(d2, DIST_SQ_FLOOR))
                hinge = margin_loss(dist, label, self.mixture.margin)
                margin_total = hinge if margin_total is None else ad.add(margin_total, hinge)

        loss = ce_total if margin_total is None else ad.add(ce_total, margin_total)
        loss = ad.scale(loss, 1.0 / batch)
        parts = {
            "ce": float(ce_total.value) / batch,
            "margin": (float(margin_total.value) / batch) if margin_total is not None else 0.0,
            "total": float(loss.value),
        }
        return loss, parts

    # -- inference ---------------------------------------------------------

    def score_embedding(self, embedding) -> HeadOutput:
        """Open-set scores for one already-embedded point."""
        emb = np.asarray(embedding, dtype=np.float64)
        d2 = self._squared_distances(ad.constant(emb))
        dist = _sqrt(d2)
        probs = mode_probabilities(dist, self.mixture.sigma)
        max_post = class_posterior_max(probs).value
        bg = float(background_posterior(probs).value)
        if self.mixture.posterior_mode == "normalized":
            post = class_posterior_normalized(probs).value
        else:
            post = max_post
        pred = int(np.argmax(post))  # ties to the lowest index
        return HeadOutput(
            embedding=emb,
            distances=dist.value,
            mode_probs=probs.value,
            class_posterior=post,
            background_posterior=bg,
            predicted_class=pred,
            is_background=bool(bg > max_post.max()),
        )

    def score(self, x) -> HeadOutput:
        """Embed one raw input (eval-style forward) and score it."""
        return self.score_embedding(self.embedding.embed(x).value)

    def score_batch(self, X) -> list[HeadOutput]:
        # items are scored one by one: scores must not depend on which other
        # queries share the batch, down to the last bit
        X = np.asarray(X, dtype=np.float64)
        return [self.score(x) for x in X]


# ---------------------------------------------------------------------------
# checkpoints: versioned JSON, float64 arrays as base64, bit-exact round trip

CHECKPOINT_VERSION = 1


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(d["data"]), dtype="<f8")
    return raw.reshape(d["shape"]).astype(np.float64, copy=True)


def save_checkpoint(head: MixtureHead, path) -> None:
    emb = head.embedding.config
    mix = head.mixture
    doc = {
        "schema_version": CHECKPOINT_VERSION,
        "kind": "checkpoint",
        "task_mode": head.task_mode,
        "embedding": {
            "input_dim": emb.input_dim,
            "layer_widths": list(emb.layer_widths),
            "final_l2_normalize": emb.final_l2_normalize,
            "bn_momentum": emb.bn_momentum,
            "bn_epsilon": emb.bn_epsilon,
        },
        "mixture": {
            "num_classes": mix.num_classes,
            "modes_per_class": mix.modes_per_class,
            "sigma": mix.sigma,
            "margin": mix.margin,
            "posterior_mode": mix.posterior_mode,
        },
        "params": {name: _encode_array(p.value) for name, p in head.named_parameters().items()},
        "bn_running": [
            {"mean": _encode_array(st.running_mean), "var": _encode_array(st.running_var)}
            for st in head.embedding.bn_states
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> MixtureHead:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("kind") != "checkpoint":
        raise ConfigError(f"not a checkpoint file: {path}")
    if doc.get("schema_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('schema_version')}")
    head = MixtureHead(
        EmbeddingConfig(**doc["embedding"]),
        MixtureConfig(**doc["mixture"]),
        task_mode=doc["task_mode"],
    )
    named = head.named_parameters()
    if set(named) != set(doc["params"]):
        raise ConfigError("checkpoint parameter names do not match the rebuilt head")
    for name, node in named.items():
        arr = _decode_array(doc["params"][name])
        if arr.shape != node.value.shape:
            raise ConfigError(f"checkpoint shape mismatch for {name}")
        node.value = arr
    for st, stored in zip(head.embedding.bn_states, doc["bn_running"]):
        st.running_mean = _decode_array(stored["mean"])
        st.running_var = _decode_array(stored["var"])
    return head
