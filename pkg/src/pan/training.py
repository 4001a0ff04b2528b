"""Objective assembly, pair sampling, Adam, and the trainers.

Training minimizes, over balanced samples of linked and unlinked pairs,

    BCE(e_ij, p) + lambda * masked mean BCE(pairwise attribute labels, rho prefix)

with the attribute term dropped entirely when lambda is 0, no supervision is
configured, or every label is masked — so those runs are bit-identical to the
unsupervised run under the same seed.

Everything here is deterministic given (dataset, configs, seed): all sampling
goes through labelled streams from :mod:`pan.rng`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import csm as csm_mod
from .attributes import AttributeTable, FA_CHOICES, label_dimension, pair_label_matrix
from .encoders import (
    EncoderSpec,
    EncoderWeights,
    SimilarityGraph,
    drop_edges,
    dropout_masks_for_epoch,
    encode,
    encode_on_tape,
    init_encoder_weights,
    normalize_adjacency,
)
from .errors import ContractError, DimensionError, NumericError, SamplingError
from .rng import derive_seed, generator

TRAIN_MODES = ("single_batch", "minibatch")
VAL_METRICS = ("pair_accuracy", "pair_auc", "fewshot")


@dataclass(frozen=True)
class TrainConfig:
    lambda_: float = 1.0
    learning_rate: float = 0.001
    epochs: int = 200
    mode: str = "single_batch"
    batch_size: int = 96
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    fa: str = "or"
    validation_every: int = 10
    val_metric: str | None = None  # resolved from the dataset task when None
    pairs_per_epoch: int | None = None  # per-class cap; None means every edge

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ContractError(f"lambda must be nonnegative, got {self.lambda_}")
        if self.learning_rate <= 0:
            raise ContractError("learning rate must be positive")
        if self.epochs < 0:
            raise ContractError("epoch count must be nonnegative")
        if self.mode not in TRAIN_MODES:
            raise ContractError(f"unknown training mode {self.mode!r}")
        if self.batch_size < 1:
            raise ContractError("batch size must be >= 1")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractError("Adam betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ContractError("Adam eps must be positive")
        if self.fa not in FA_CHOICES:
            raise ContractError(f"unknown attribute combination {self.fa!r}")
        if self.validation_every < 1:
            raise ContractError("validation_every must be >= 1")
        if self.val_metric is not None and self.val_metric not in VAL_METRICS:
            raise ContractError(f"unknown validation metric {self.val_metric!r}")
        if self.pairs_per_epoch is not None and self.pairs_per_epoch < 1:
            raise ContractError("pairs_per_epoch must be >= 1")


@dataclass(frozen=True)
class PairSample:
    i: int
    j: int
    label: int  # ground-truth similarity e_ij

    def __post_init__(self):
        if self.i == self.j:
            raise ContractError(f"pair ({self.i}, {self.j}) has identical endpoints")


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def total_loss(e, p, pair_labels, pair_mask, rho, lam: float) -> float:
    """Reference per-pair objective value (non-taped).

    ``rho`` may be longer than the labels; only the prefix is supervised.
    The attribute term is exactly 0 when lam == 0 or the mask is all zero.
    """
    if lam < 0:
        raise ContractError(f"lambda must be nonnegative, got {lam}")
    rho = np.asarray(rho, dtype=np.float64).ravel()
    labels = np.asarray(pair_labels, dtype=np.float64).ravel()
    mask = np.asarray(pair_mask, dtype=np.float64).ravel()
    if labels.shape != mask.shape:
        raise DimensionError(f"labels {labels.shape} and mask {mask.shape} differ")
    if rho.size < labels.size:
        raise DimensionError(
            f"rho has {rho.size} conditions but labels need {labels.size}"
        )
    link = float(ad.bce_values(np.array([[float(p)]]), np.array([[float(e)]]))[0, 0])
    if lam == 0.0 or not mask.any():
        return link
    prefix = rho[: labels.size].reshape(1, -1)
    attr = ad.masked_bce_mean(prefix, labels.reshape(1, -1), mask.reshape(1, -1)).item()
    return link + lam * attr


# ---------------------------------------------------------------------------
# pair sampling
# ---------------------------------------------------------------------------

def _sample_pair_arrays(
    g: SimilarityGraph, count_per_class: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(i, j, e) arrays with count_per_class positives then as many negatives."""
    total = g.n * (g.n - 1) // 2
    if g.num_edges == 0:
        raise SamplingError("graph has no edges to sample positives from")
    if g.num_edges == total:
        raise SamplingError("graph is complete; no negative pairs exist")
    edges = np.array(g.edges, dtype=np.int64)
    pos = edges[rng.integers(0, len(edges), size=count_per_class)]

    density = g.num_edges / total
    if density > 0.7:
        non_edges = np.array(
            [
                (i, j)
                for i in range(g.n)
                for j in range(i + 1, g.n)
                if (i, j) not in g.edge_set
            ],
            dtype=np.int64,
        )
        neg = non_edges[rng.integers(0, len(non_edges), size=count_per_class)]
    else:
        chunks = []
        needed = count_per_class
        while needed > 0:
            draw = max(2 * needed, 64)
            a = rng.integers(0, g.n, size=draw)
            b = rng.integers(0, g.n, size=draw)
            lo, hi = np.minimum(a, b), np.maximum(a, b)
            keep = [
                (i, j)
                for i, j in zip(lo.tolist(), hi.tolist())
                if i != j and (i, j) not in g.edge_set
            ]
            chunks.extend(keep[:needed])
            needed = count_per_class - len(chunks)
        neg = np.array(chunks, dtype=np.int64)

    i = np.concatenate([pos[:, 0], neg[:, 0]])
    j = np.concatenate([pos[:, 1], neg[:, 1]])
    e = np.concatenate(
        [np.ones(count_per_class, dtype=np.int64), np.zeros(count_per_class, dtype=np.int64)]
    )
    return i, j, e


def sample_pairs(g: SimilarityGraph, count_per_class: int, seed: int) -> list[PairSample]:
    """Equal numbers of positive (uniform over edges) and negative pairs."""
    rng = generator(seed, "pair-sampling")
    i, j, e = _sample_pair_arrays(g, count_per_class, rng)
    return [PairSample(int(a), int(b), int(lbl)) for a, b, lbl in zip(i, j, e)]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def adam_init(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
    )


def adam_step(
    params: dict[str, np.ndarray],
    grads,
    state: AdamState,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(
                f"gradient for {name} has shape {g.shape}, parameter is {p.shape}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= learning_rate * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------

def _pair_index_arrays(pairs) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(list(pairs), dtype=np.int64)
    if arr.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return arr[:, 0], arr[:, 1]


@dataclass
class ModelBundle:
    encoder_spec: EncoderSpec
    encoder_weights: EncoderWeights
    csm_params: csm_mod.CsmParameters
    csm_config: csm_mod.CsmConfig

    def copy(self) -> "ModelBundle":
        return ModelBundle(
            self.encoder_spec,
            self.encoder_weights.copy(),
            self.csm_params.copy(),
            self.csm_config,
        )

    def trainable_params(self) -> dict[str, np.ndarray]:
        out = dict(self.encoder_weights.as_dict())
        out.update(self.csm_params.as_dict())
        return out

    def encode_all(
        self, features: np.ndarray, graph_context: SimilarityGraph | None = None
    ) -> np.ndarray:
        """Evaluation-mode encoding; a GCN without context sees self-loops only."""
        features = ad.as_matrix(features)
        if self.encoder_spec.kind == "gcn":
            graph = graph_context or SimilarityGraph(features.shape[0])
            return encode(self.encoder_spec, features, graph=graph, weights=self.encoder_weights)
        return encode(self.encoder_spec, features, weights=self.encoder_weights)

    def pair_scores(
        self, pairs, features, graph_context: SimilarityGraph | None = None
    ) -> np.ndarray:
        h = self.encode_all(features, graph_context)
        idx_i, idx_j = _pair_index_arrays(pairs)
        diff = np.abs(h[idx_i] - h[idx_j])
        return csm_mod.csm_pair_scores(diff, self.csm_params, self.csm_config)

    def pair_conditions(
        self, pairs, features, graph_context: SimilarityGraph | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """(rho, omega) matrices for a batch of pairs."""
        h = self.encode_all(features, graph_context)
        idx_i, idx_j = _pair_index_arrays(pairs)
        diff = np.abs(h[idx_i] - h[idx_j])
        p = self.csm_params
        rho = ad.sigmoid_values(diff @ p.w1 + p.b1)
        omega = ad.row_softmax_values(diff @ p.w2 + p.b2)
        return rho, omega


def init_model(
    encoder_spec: EncoderSpec, csm_config: csm_mod.CsmConfig, d_in: int, seed: int
) -> ModelBundle:
    weights = init_encoder_weights(encoder_spec, d_in, seed)
    d_out = encoder_spec.output_dim(d_in)
    params = csm_mod.init_params(d_out, csm_config.m, seed)
    return ModelBundle(encoder_spec, weights, params, csm_config)


# ---------------------------------------------------------------------------
# shared training scaffolding
# ---------------------------------------------------------------------------

@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_metric: float | None


@dataclass
class TrainResult:
    model: ModelBundle
    history: list[HistoryRow] = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float | None = None


def _split_key(splits: dict, names: tuple[str, ...]) -> str | None:
    for name in names:
        if name in splits:
            return name
    return None


def _local_graph(graph: SimilarityGraph, indices: np.ndarray) -> SimilarityGraph:
    position = {int(v): k for k, v in enumerate(indices)}
    edges = [
        (position[i], position[j])
        for i, j in graph.edges
        if i in position and j in position
    ]
    return SimilarityGraph(len(indices), edges)


def _balanced_eval_pairs(
    graph: SimilarityGraph, indices: np.ndarray, seed: int, cap: int = 2000
):
    """Balanced (pairs, labels) within one split, or None when impossible."""
    local = _local_graph(graph, indices)
    total = local.n * (local.n - 1) // 2
    if local.num_edges == 0 or local.num_edges == total:
        return None
    rng = generator(seed, "balanced-eval-pairs")
    edges = np.array(local.edges, dtype=np.int64)
    if len(edges) > cap:
        edges = edges[rng.choice(len(edges), size=cap, replace=False)]
    count = len(edges)
    i_neg, j_neg, _ = _sample_pair_arrays(local, count, rng)
    neg = np.stack([i_neg[count:], j_neg[count:]], axis=1)
    local_pairs = np.concatenate([edges, neg])
    labels = np.concatenate([np.ones(count), np.zeros(count)])
    return indices[local_pairs], labels


def _resolve_val_metric(config: TrainConfig, task: str | None) -> str:
    if config.val_metric is not None:
        return config.val_metric
    return "fewshot" if task == "fewshot_clusters" else "pair_accuracy"


class _Validator:
    """Scores a model on the validation split with the configured metric."""

    def __init__(self, bundle, config: TrainConfig):
        self.metric = _resolve_val_metric(config, getattr(bundle, "task", None))
        self.features = bundle.features
        self.pairs = None
        self.labels = None
        self.episodes = None
        splits = bundle.splits
        val_key = _split_key(splits, ("val",))
        if val_key is None:
            return
        val_idx = np.asarray(splits[val_key], dtype=np.int64)
        if self.metric == "fewshot":
            from .data import build_episodes  # deferred: avoids import at module load

            categories = getattr(bundle, "categories", None)
            if categories is None:
                self.metric = "pair_accuracy"
            else:
                try:
                    self.episodes = build_episodes(
                        bundle, n_way=5, k_shot=5, n_query=8, count=20,
                        seed=derive_seed(config.seed, "val-episodes"), split=val_key,
                    )
                    return
                except Exception:
                    self.metric = "pair_accuracy"
        sampled = _balanced_eval_pairs(
            bundle.graph, val_idx, derive_seed(config.seed, "val-pairs")
        )
        if sampled is not None:
            self.pairs, self.labels = sampled

    def __call__(self, model: ModelBundle) -> float | None:
        if self.episodes is not None:
            from .evaluation import few_shot_accuracy

            return few_shot_accuracy(model, self.episodes, self.features).value
        if self.pairs is None:
            return None
        scores = model.pair_scores(self.pairs, self.features)
        if self.metric == "pair_auc":
            from .evaluation import mann_whitney_auc

            return mann_whitney_auc(scores[self.labels == 1], scores[self.labels == 0])
        return float(((scores >= 0.5) == (self.labels == 1)).mean())


def _epoch_batches(n_pairs: int, config: TrainConfig, rng) -> list[np.ndarray]:
    order = np.arange(n_pairs)
    if config.mode == "single_batch":
        return [order]
    rng.shuffle(order)
    return [
        order[start : start + config.batch_size]
        for start in range(0, n_pairs, config.batch_size)
    ]


# ---------------------------------------------------------------------------
# PAN trainer
# ---------------------------------------------------------------------------

def train_pan(
    bundle,
    encoder_spec: EncoderSpec,
    csm_config: csm_mod.CsmConfig,
    config: TrainConfig,
    attribute_table: AttributeTable | None = None,
) -> TrainResult:
    """Train the conditional-similarity model on a dataset bundle.

    ``attribute_table`` overrides the bundle's table (for example a label
    randomization); by default the bundle's own attributes are used whenever
    the configuration calls for supervision.
    """
    features = ad.as_matrix(bundle.features)
    n, d = features.shape
    table = attribute_table if attribute_table is not None else getattr(bundle, "attributes", None)

    supervised_count = csm_config.supervised_count
    if supervised_count > 0:
        if table is None:
            raise ContractError("supervised or hybrid training requires an attribute table")
        expected = label_dimension(table.m, config.fa)
        if supervised_count != expected:
            raise ContractError(
                f"supervised condition count {supervised_count} does not match the "
                f"{config.fa} label dimension {expected}"
            )

    train_key = _split_key(bundle.splits, ("train", "base"))
    if train_key is None:
        raise ContractError("bundle has no train/base split")
    train_idx = np.asarray(bundle.splits[train_key], dtype=np.int64)
    local = _local_graph(bundle.graph, train_idx)
    global_graph = bundle.graph.subgraph_edges(train_idx)

    model = init_model(encoder_spec, csm_config, d, config.seed)
    params = model.trainable_params()
    state = adam_init(params)
    validator = _Validator(bundle, config)

    history: list[HistoryRow] = []
    best_metric: float | None = None
    best_epoch = 0
    best_params = {k: v.copy() for k, v in params.items()}
    count_per_class = local.num_edges
    if config.pairs_per_epoch is not None:
        count_per_class = min(count_per_class, config.pairs_per_epoch)

    for epoch in range(1, config.epochs + 1):
        pair_rng = generator(config.seed, "pairs", epoch)
        li, lj, e = _sample_pair_arrays(local, count_per_class, pair_rng)
        gi, gj = train_idx[li], train_idx[lj]

        if encoder_spec.kind == "gcn":
            g_epoch = global_graph
            if encoder_spec.edge_dropout_p > 0.0:
                g_epoch = drop_edges(
                    global_graph,
                    encoder_spec.edge_dropout_p,
                    derive_seed(config.seed, "edge-drop", epoch),
                )
            a_hat_values = normalize_adjacency(g_epoch)
        else:
            a_hat_values = None

        labels = mask = None
        if supervised_count > 0 and config.lambda_ > 0.0:
            labels, mask = pair_label_matrix(table, gi, gj, config.fa)

        batch_rng = generator(config.seed, "batch-order", epoch)
        batches = _epoch_batches(len(e), config, batch_rng)
        epoch_loss = 0.0
        for step, batch in enumerate(batches):
            if batch.size == 0:
                continue
            tape = ad.Tape()
            tensors = {k: tape.parameter(v, k) for k, v in params.items()}
            masks = (
                dropout_masks_for_epoch(
                    encoder_spec, n, derive_seed(config.seed, "layer-drop", epoch, step)
                )
                if encoder_spec.kind == "gcn"
                else None
            )
            a_hat = tape.constant(a_hat_values) if a_hat_values is not None else None
            h = encode_on_tape(
                encoder_spec, tape, tape.constant(features), tensors, a_hat, masks
            )
            hi = ad.gather_rows(h, gi[batch])
            hj = ad.gather_rows(h, gj[batch])
            rho, p = csm_mod.csm_on_tape(tape, hi, hj, tensors, csm_config)
            loss = ad.bce_mean(p, e[batch].reshape(-1, 1).astype(np.float64))
            if labels is not None and mask[batch].any():
                rho_sup = (
                    ad.slice_cols(rho, 0, supervised_count)
                    if supervised_count < csm_config.m
                    else rho
                )
                attr_term = ad.masked_bce_mean(rho_sup, labels[batch], mask[batch])
                loss = ad.add(loss, ad.scale(attr_term, config.lambda_))
            grads = ad.backward(tape, loss)
            adam_step(
                params, grads, state, config.learning_rate,
                config.beta1, config.beta2, config.eps,
            )
            epoch_loss += loss.item() * batch.size
        epoch_loss /= len(e)
        if not np.isfinite(epoch_loss):
            raise NumericError(f"non-finite training loss at epoch {epoch}")

        val_value = None
        if epoch % config.validation_every == 0 or epoch == config.epochs:
            val_value = validator(model)
            if val_value is not None and (best_metric is None or val_value > best_metric):
                best_metric = val_value
                best_epoch = epoch
                best_params = {k: v.copy() for k, v in params.items()}
        history.append(HistoryRow(epoch, epoch_loss, val_value))

    if best_metric is None:
        best_params = params
        best_epoch = config.epochs
    best = model.copy()
    best_refs = best.trainable_params()
    for name, value in best_params.items():
        best_refs[name][:] = value
    return TrainResult(model=best, history=history, best_epoch=best_epoch, best_metric=best_metric)


# ---------------------------------------------------------------------------
# baseline: triplet-trained embedding + link classifier
# ---------------------------------------------------------------------------

@dataclass
class SiameseModel:
    """Linear embedding trained with a triplet loss, plus a dense link head."""

    embed_w: np.ndarray   # d x e
    link_w: np.ndarray    # e x 1
    link_b: np.ndarray    # 1 x 1

    def embed(self, features: np.ndarray) -> np.ndarray:
        return ad.as_matrix(features) @ self.embed_w

    def pair_scores(self, pairs, features, graph_context=None) -> np.ndarray:
        h = self.embed(features)
        idx_i, idx_j = _pair_index_arrays(pairs)
        diff = np.abs(h[idx_i] - h[idx_j])
        return ad.sigmoid_values(diff @ self.link_w + self.link_b)[:, 0]


def _sample_triplets(
    local: SimilarityGraph, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All positive pairs as (anchor, positive), one random unlinked negative each."""
    if local.num_edges == 0:
        raise SamplingError("no linked pairs to build triplets from")
    edges = np.array(local.edges, dtype=np.int64)
    anchors, positives = edges[:, 0], edges[:, 1]
    negatives = np.empty(len(edges), dtype=np.int64)
    for row, a in enumerate(anchors.tolist()):
        for _ in range(200):
            k = int(rng.integers(0, local.n))
            if k != a and not local.has_edge(a, k):
                negatives[row] = k
                break
        else:
            raise SamplingError(f"node {a} has no unlinked partner for a negative")
    return anchors, positives, negatives


def _l2_rows(tape: ad.Tape, a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    diff = ad.subtract(a, b)
    sq = ad.row_sum(ad.multiply(diff, diff))
    # tiny floor keeps the sqrt differentiable when two rows coincide
    floor = tape.constant(np.full(sq.shape, 1e-12))
    return ad.sqrt_entries(ad.add(sq, floor))


def train_siamese_baseline(
    bundle, margin: float, config: TrainConfig, embed_dim: int | None = None
) -> SiameseModel:
    """Triplet-loss embedding over frozen features, then a logistic link head."""
    if margin < 0:
        raise ContractError(f"margin must be nonnegative, got {margin}")
    features = ad.as_matrix(bundle.features)
    n, d = features.shape
    e_dim = embed_dim or d
    train_key = _split_key(bundle.splits, ("train", "base"))
    train_idx = np.asarray(bundle.splits[train_key], dtype=np.int64)
    local = _local_graph(bundle.graph, train_idx)
    if local.num_edges == 0:
        raise SamplingError("training split has no linked pairs")

    init_rng = generator(config.seed, "siamese-init")
    bound = 1.0 / np.sqrt(d)
    params = {"embed_w": init_rng.uniform(-bound, bound, size=(d, e_dim))}
    state = adam_init(params)
    x_train = features[train_idx]

    for epoch in range(1, config.epochs + 1):
        rng = generator(config.seed, "triplets", epoch)
        a_idx, p_idx, n_idx = _sample_triplets(local, rng)
        tape = ad.Tape()
        w = tape.parameter(params["embed_w"], "embed_w")
        emb = ad.matmul(tape.constant(x_train), w)
        anc = ad.gather_rows(emb, a_idx)
        pos = ad.gather_rows(emb, p_idx)
        neg = ad.gather_rows(emb, n_idx)
        d_pos = _l2_rows(tape, anc, pos)
        d_neg = _l2_rows(tape, anc, neg)
        margins = tape.constant(np.full(d_pos.shape, float(margin)))
        loss = ad.mean_all(ad.relu(ad.add(ad.subtract(d_pos, d_neg), margins)))
        grads = ad.backward(tape, loss)
        adam_step(params, grads, state, config.learning_rate,
                  config.beta1, config.beta2, config.eps)
        if not np.isfinite(loss.item()):
            raise NumericError(f"non-finite triplet loss at epoch {epoch}")

    # stage 2: frozen embedding, logistic link prediction on |f_i - f_j|
    emb_all = features @ params["embed_w"]
    head = {
        "link_w": generator(config.seed, "link-init").uniform(
            -1.0 / np.sqrt(e_dim), 1.0 / np.sqrt(e_dim), size=(e_dim, 1)
        ),
        "link_b": np.zeros((1, 1)),
    }
    head_state = adam_init(head)
    count = local.num_edges
    for epoch in range(1, config.epochs + 1):
        rng = generator(config.seed, "link-pairs", epoch)
        li, lj, e = _sample_pair_arrays(local, count, rng)
        gi, gj = train_idx[li], train_idx[lj]
        diff = np.abs(emb_all[gi] - emb_all[gj])
        tape = ad.Tape()
        w = tape.parameter(head["link_w"], "link_w")
        b = tape.parameter(head["link_b"], "link_b")
        logits = ad.add_row(ad.matmul(tape.constant(diff), w), b)
        loss = ad.bce_mean(ad.sigmoid(logits), e.reshape(-1, 1).astype(np.float64))
        grads = ad.backward(tape, loss)
        adam_step(head, grads, head_state, config.learning_rate,
                  config.beta1, config.beta2, config.eps)
    return SiameseModel(params["embed_w"], head["link_w"], head["link_b"])


# ---------------------------------------------------------------------------
# baseline: hard-parameter-sharing multitask
# ---------------------------------------------------------------------------

@dataclass
class MultitaskModel:
    encoder_spec: EncoderSpec
    encoder_weights: EncoderWeights
    link_w: np.ndarray
    link_b: np.ndarray
    attr_w: np.ndarray | None = None
    attr_b: np.ndarray | None = None

    def encode_all(self, features: np.ndarray) -> np.ndarray:
        features = ad.as_matrix(features)
        if self.encoder_spec.kind == "gcn":
            return encode(
                self.encoder_spec, features,
                graph=SimilarityGraph(features.shape[0]), weights=self.encoder_weights,
            )
        return encode(self.encoder_spec, features, weights=self.encoder_weights)

    def pair_scores(self, pairs, features, graph_context=None) -> np.ndarray:
        h = self.encode_all(features)
        idx_i, idx_j = _pair_index_arrays(pairs)
        diff = np.abs(h[idx_i] - h[idx_j])
        return ad.sigmoid_values(diff @ self.link_w + self.link_b)[:, 0]

    def attribute_scores(self, features: np.ndarray) -> np.ndarray:
        if self.attr_w is None:
            raise ContractError("model was trained without an attribute head")
        h = self.encode_all(features)
        return ad.sigmoid_values(h @ self.attr_w + self.attr_b)


def train_multitask_baseline(
    bundle, config: TrainConfig, encoder_spec: EncoderSpec | None = None
) -> MultitaskModel:
    """Shared encoder; link head on |h_i - h_j| plus a per-image attribute head.

    The attribute loss is weighted by lambda and skipped entirely when lambda
    is 0 or the bundle has no attributes, which makes those runs bit-identical
    to a link-only model under the same seed.
    """
    features = ad.as_matrix(bundle.features)
    n, d = features.shape
    spec = encoder_spec or EncoderSpec(kind="mlp", layer_dims=(d,))
    table = getattr(bundle, "attributes", None)
    train_key = _split_key(bundle.splits, ("train", "base"))
    train_idx = np.asarray(bundle.splits[train_key], dtype=np.int64)
    local = _local_graph(bundle.graph, train_idx)

    weights = init_encoder_weights(spec, d, config.seed)
    h_dim = spec.output_dim(d)
    params = dict(weights.as_dict())
    params["link_w"] = generator(config.seed, "link-init").uniform(
        -1.0 / np.sqrt(h_dim), 1.0 / np.sqrt(h_dim), size=(h_dim, 1)
    )
    params["link_b"] = np.zeros((1, 1))
    use_attrs = table is not None and config.lambda_ > 0.0
    if table is not None:
        # drawn from its own stream so presence never shifts the link-path init
        params["attr_w"] = generator(config.seed, "attr-head-init").uniform(
            -1.0 / np.sqrt(h_dim), 1.0 / np.sqrt(h_dim), size=(h_dim, table.m)
        )
        params["attr_b"] = np.zeros((1, table.m))
    state = adam_init(params)
    count = local.num_edges
    if count == 0:
        raise SamplingError("training split has no linked pairs")

    for epoch in range(1, config.epochs + 1):
        rng = generator(config.seed, "pairs", epoch)
        li, lj, e = _sample_pair_arrays(local, count, rng)
        gi, gj = train_idx[li], train_idx[lj]
        tape = ad.Tape()
        tensors = {k: tape.parameter(v, k) for k, v in params.items()}
        h = encode_on_tape(spec, tape, tape.constant(features), tensors, None, None)
        hi = ad.gather_rows(h, gi)
        hj = ad.gather_rows(h, gj)
        diff = ad.absolute(ad.subtract(hi, hj))
        logits = ad.add_row(ad.matmul(diff, tensors["link_w"]), tensors["link_b"])
        loss = ad.bce_mean(ad.sigmoid(logits), e.reshape(-1, 1).astype(np.float64))
        if use_attrs and table.mask[train_idx].any():
            h_train = ad.gather_rows(h, train_idx)
            attr_logits = ad.add_row(
                ad.matmul(h_train, tensors["attr_w"]), tensors["attr_b"]
            )
            attr_loss = ad.masked_bce_mean(
                ad.sigmoid(attr_logits), table.values[train_idx], table.mask[train_idx]
            )
            loss = ad.add(loss, ad.scale(attr_loss, config.lambda_))
        grads = ad.backward(tape, loss)
        adam_step(params, grads, state, config.learning_rate,
                  config.beta1, config.beta2, config.eps)
        if not np.isfinite(loss.item()):
            raise NumericError(f"non-finite multitask loss at epoch {epoch}")

    enc_weights = EncoderWeights(
        spec.kind,
        [params[f"enc_w{k}"] for k in range(len(weights.weights))],
        [params[f"enc_b{k}"] for k in range(len(weights.biases))],
    )
    return MultitaskModel(
        spec, enc_weights, params["link_w"], params["link_b"],
        params.get("attr_w"), params.get("attr_b"),
    )


# ---------------------------------------------------------------------------
# baseline: per-image attribute prediction, then a pair classifier
# ---------------------------------------------------------------------------

@dataclass
class AttrSimilarityModel:
    """The lossy two-stage pipeline: per-image attributes, then a dense pair head."""

    attr_w: np.ndarray | None   # None when ground-truth attributes are fed through
    attr_b: np.ndarray | None
    pair_w: np.ndarray          # 2m x 1
    pair_b: np.ndarray
    true_probs: np.ndarray | None = None

    def attribute_probs(self, features: np.ndarray) -> np.ndarray:
        if self.true_probs is not None:
            return self.true_probs
        return ad.sigmoid_values(ad.as_matrix(features) @ self.attr_w + self.attr_b)

    def pair_scores(self, pairs, features, graph_context=None) -> np.ndarray:
        probs = self.attribute_probs(features)
        idx_i, idx_j = _pair_index_arrays(pairs)
        stacked = np.concatenate([probs[idx_i], probs[idx_j]], axis=1)
        return ad.sigmoid_values(stacked @ self.pair_w + self.pair_b)[:, 0]


def train_attr_similarity_baseline(
    bundle, config: TrainConfig, use_true_attributes: bool = False
) -> AttrSimilarityModel:
    """Stage 1 predicts attributes per image; stage 2 maps the concatenated
    attribute vectors of a pair to a similarity logit."""
    features = ad.as_matrix(bundle.features)
    table = getattr(bundle, "attributes", None)
    if table is None:
        raise ContractError("attribute-similarity baseline requires an attribute table")
    n, d = features.shape
    train_key = _split_key(bundle.splits, ("train", "base"))
    train_idx = np.asarray(bundle.splits[train_key], dtype=np.int64)
    local = _local_graph(bundle.graph, train_idx)
    if local.num_edges == 0:
        raise SamplingError("training split has no linked pairs")

    attr_w = attr_b = None
    if use_true_attributes:
        probs = np.where(table.mask == 1.0, table.values, 0.5)
    else:
        stage1 = {
            "attr_w": generator(config.seed, "attr-stage1-init").uniform(
                -1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=(d, table.m)
            ),
            "attr_b": np.zeros((1, table.m)),
        }
        s1_state = adam_init(stage1)
        x_train = features[train_idx]
        v_train = table.values[train_idx]
        m_train = table.mask[train_idx]
        for epoch in range(1, config.epochs + 1):
            tape = ad.Tape()
            w = tape.parameter(stage1["attr_w"], "attr_w")
            b = tape.parameter(stage1["attr_b"], "attr_b")
            logits = ad.add_row(ad.matmul(tape.constant(x_train), w), b)
            loss = ad.masked_bce_mean(ad.sigmoid(logits), v_train, m_train)
            grads = ad.backward(tape, loss)
            adam_step(stage1, grads, s1_state, config.learning_rate,
                      config.beta1, config.beta2, config.eps)
        attr_w, attr_b = stage1["attr_w"], stage1["attr_b"]
        probs = ad.sigmoid_values(features @ attr_w + attr_b)

    m2 = 2 * table.m
    stage2 = {
        "pair_w": generator(config.seed, "attr-stage2-init").uniform(
            -1.0 / np.sqrt(m2), 1.0 / np.sqrt(m2), size=(m2, 1)
        ),
        "pair_b": np.zeros((1, 1)),
    }
    s2_state = adam_init(stage2)
    count = local.num_edges
    for epoch in range(1, config.epochs + 1):
        rng = generator(config.seed, "pairs", epoch)
        li, lj, e = _sample_pair_arrays(local, count, rng)
        gi, gj = train_idx[li], train_idx[lj]
        stacked = np.concatenate([probs[gi], probs[gj]], axis=1)
        tape = ad.Tape()
        w = tape.parameter(stage2["pair_w"], "pair_w")
        b = tape.parameter(stage2["pair_b"], "pair_b")
        logits = ad.add_row(ad.matmul(tape.constant(stacked), w), b)
        loss = ad.bce_mean(ad.sigmoid(logits), e.reshape(-1, 1).astype(np.float64))
        grads = ad.backward(tape, loss)
        adam_step(stage2, grads, s2_state, config.learning_rate,
                  config.beta1, config.beta2, config.eps)
    return AttrSimilarityModel(
        attr_w, attr_b, stage2["pair_w"], stage2["pair_b"],
        true_probs=probs if use_true_attributes else None,
    )


# ---------------------------------------------------------------------------
# checkpoint and history files
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "pan-checkpoint-v1"


def model_to_dict(model: ModelBundle) -> dict:
    spec = model.encoder_spec
    return {
        "format": CHECKPOINT_FORMAT,
        "encoder": {
            "kind": spec.kind,
            "layer_dims": list(spec.layer_dims),
            "activation": spec.activation,
            "num_layers": spec.num_layers,
            "hidden_dim": spec.hidden_dim,
            "layer_dropout_p": spec.layer_dropout_p,
            "edge_dropout_p": spec.edge_dropout_p,
            "weights": [csm_mod.matrix_to_hex(w) for w in model.encoder_weights.weights],
            "biases": [csm_mod.matrix_to_hex(b) for b in model.encoder_weights.biases],
        },
        "csm": {
            **csm_mod.params_to_dict(model.csm_params),
            "relevance_enabled": model.csm_config.relevance_enabled,
        },
    }


def model_from_dict(obj: dict) -> ModelBundle:
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"unknown checkpoint format {obj.get('format')!r}")
    enc = obj["encoder"]
    spec = EncoderSpec(
        kind=enc["kind"],
        layer_dims=tuple(enc["layer_dims"]),
        activation=enc["activation"],
        num_layers=enc["num_layers"],
        hidden_dim=enc["hidden_dim"],
        layer_dropout_p=enc["layer_dropout_p"],
        edge_dropout_p=enc["edge_dropout_p"],
    )
    weights = EncoderWeights(
        enc["kind"],
        [csm_mod.matrix_from_hex(w) for w in enc["weights"]],
        [csm_mod.matrix_from_hex(b) for b in enc["biases"]],
    )
    params = csm_mod.params_from_dict(obj["csm"])
    cfg = csm_mod.CsmConfig(m=params.m, relevance_enabled=obj["csm"]["relevance_enabled"])
    return ModelBundle(spec, weights, params, cfg)


def save_checkpoint(path, model: ModelBundle) -> None:
    blob = json.dumps(model_to_dict(model), sort_keys=True, indent=1)
    Path(path).write_text(blob + "\n")


def load_checkpoint(path) -> ModelBundle:
    return model_from_dict(json.loads(Path(path).read_text()))


def write_history_csv(path, history: list[HistoryRow]) -> None:
    lines = ["epoch,train_loss,val_metric"]
    for row in history:
        val = "" if row.val_metric is None else repr(row.val_metric)
        lines.append(f"{row.epoch},{repr(row.train_loss)},{val}")
    Path(path).write_text("\n".join(lines) + "\n")
