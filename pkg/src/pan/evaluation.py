"""End-task metrics: pair scoring, fill-in-the-blank, set compatibility AUC,
episodic few-shot accuracy, retrieval recall@k, attribute mAP, and the
attribute rank report.

All metrics are read-only over immutable models and features. Ties break
toward the lowest index everywhere. Models are anything exposing
``pair_scores(pairs, features, graph_context=None) -> array``; condition-level
metrics additionally need ``pair_conditions``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attributes import AttributeTable, pair_label_matrix
from .encoders import SimilarityGraph
from .errors import ContractError

INTERVAL_Z = 1.96


@dataclass(frozen=True)
class FitbQuestion:
    question_items: tuple[int, ...]
    candidates: tuple[int, ...]
    answer_index: int

    def __post_init__(self):
        object.__setattr__(self, "question_items", tuple(int(i) for i in self.question_items))
        object.__setattr__(self, "candidates", tuple(int(i) for i in self.candidates))
        if not self.candidates:
            raise ContractError("a question needs at least one candidate")
        if not 0 <= self.answer_index < len(self.candidates):
            raise ContractError(
                f"answer index {self.answer_index} invalid for {len(self.candidates)} candidates"
            )
        if set(self.question_items) & set(self.candidates):
            raise ContractError("question items and candidates must be disjoint")


@dataclass(frozen=True)
class Episode:
    support: tuple[tuple[int, ...], ...]      # per-class support indices
    query: tuple[tuple[int, int], ...]        # (item index, class position)

    def __post_init__(self):
        flat = [i for cls in self.support for i in cls]
        if len(set(flat)) != len(flat):
            raise ContractError("support sets overlap across classes")
        q_items = [q for q, _ in self.query]
        if set(q_items) & set(flat):
            raise ContractError("queries must be disjoint from supports")

    @property
    def n_way(self) -> int:
        return len(self.support)


@dataclass
class MetricReport:
    name: str
    value: float
    interval: tuple[float, float] | None = None
    count: int = 0
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"metric": self.name, "value": self.value, "count": self.count}
        if self.interval is not None:
            out["interval_low"], out["interval_high"] = self.interval
        if self.detail:
            out["detail"] = self.detail
        return out


def score_pairs(model, pairs, features, graph_context: SimilarityGraph | None = None) -> np.ndarray:
    """Similarity scores for explicit pairs; thin dispatch to the model."""
    return np.asarray(model.pair_scores(pairs, features, graph_context), dtype=np.float64)


# ---------------------------------------------------------------------------
# fill in the blank
# ---------------------------------------------------------------------------

def fitb_accuracy(model, questions: list[FitbQuestion], features) -> MetricReport:
    """Candidate score is the sum of its pair scores with every question item;
    the argmax candidate (lowest index on ties) answers the question.

    With a graph encoder, edges among the question items provide the context.
    """
    if not questions:
        raise ContractError("need at least one question")
    n_items = np.asarray(features).shape[0]
    correct = 0
    for q in questions:
        pairs = [(qi, oj) for oj in q.candidates for qi in q.question_items]
        context = SimilarityGraph(
            n_items,
            [
                (a, b)
                for ai, a in enumerate(q.question_items)
                for b in q.question_items[ai + 1 :]
            ],
        )
        if pairs:
            scores = score_pairs(model, pairs, features, context)
            per_candidate = scores.reshape(len(q.candidates), len(q.question_items)).sum(axis=1)
        else:
            per_candidate = np.zeros(len(q.candidates))
        if int(np.argmax(per_candidate)) == q.answer_index:
            correct += 1
    return MetricReport("fitb_accuracy", correct / len(questions), None, len(questions))


# ---------------------------------------------------------------------------
# set compatibility
# ---------------------------------------------------------------------------

def set_score(model, items, features) -> float:
    """Mean pair score over all unordered item pairs of one set."""
    items = list(items)
    if len(items) < 2:
        raise ContractError(f"a set needs at least two items, got {len(items)}")
    pairs = [(a, b) for k, a in enumerate(items) for b in items[k + 1 :]]
    return float(score_pairs(model, pairs, features).mean())


def mann_whitney_auc(pos_scores, neg_scores) -> float:
    """Rank-based AUC with ties counted half; equals the pairwise count."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ContractError("AUC needs at least one score on each side")
    merged = np.concatenate([pos, neg])
    order = np.argsort(merged, kind="stable")
    ranks = np.empty(merged.size, dtype=np.float64)
    sorted_vals = merged[order]
    start = 0
    while start < merged.size:
        stop = start
        while stop + 1 < merged.size and sorted_vals[stop + 1] == sorted_vals[start]:
            stop += 1
        ranks[order[start : stop + 1]] = 0.5 * (start + stop) + 1.0  # average rank
        start = stop + 1
    rank_sum = ranks[: pos.size].sum()
    u = rank_sum - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def compatibility_auc(model, positive_sets, negative_sets, features) -> MetricReport:
    pos = np.array([set_score(model, s, features) for s in positive_sets])
    neg = np.array([set_score(model, s, features) for s in negative_sets])
    value = mann_whitney_auc(pos, neg)
    return MetricReport("compatibility_auc", value, None, len(pos) + len(neg))


# ---------------------------------------------------------------------------
# few-shot episodes
# ---------------------------------------------------------------------------

def episode_accuracy(model, episode: Episode, features) -> float:
    """Per query: class score is the mean edge probability to that class's
    supports; argmax class wins, lowest class index on ties."""
    pairs = [
        (q, s)
        for q, _ in episode.query
        for support_class in episode.support
        for s in support_class
    ]
    scores = score_pairs(model, pairs, features)
    shots = [len(c) for c in episode.support]
    per_query = scores.reshape(len(episode.query), sum(shots))
    correct = 0
    for row, (_, true_class) in zip(per_query, episode.query):
        offset = 0
        class_scores = []
        for k in shots:
            class_scores.append(row[offset : offset + k].mean())
            offset += k
        if int(np.argmax(class_scores)) == true_class:
            correct += 1
    return correct / len(episode.query)


def few_shot_accuracy(model, episodes: list[Episode], features) -> MetricReport:
    if not episodes:
        raise ContractError("need at least one episode")
    accs = np.array([episode_accuracy(model, ep, features) for ep in episodes])
    value = float(accs.mean())
    interval = None
    if len(accs) > 1:
        half = float(INTERVAL_Z * accs.std(ddof=1) / math.sqrt(len(accs)))
        interval = (value - half, value + half)
    return MetricReport("fewshot_accuracy", value, interval, len(episodes))


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------

def recall_at_k(
    query_features,
    gallery_features,
    query_labels,
    gallery_labels,
    k: int,
    model=None,
) -> MetricReport:
    """Fraction of queries with a same-label gallery item in the top k.

    Ranking is by model pair score when a model is given, else by negative
    Euclidean distance; ties prefer the lower gallery index.
    """
    query_features = np.asarray(query_features, dtype=np.float64)
    gallery_features = np.asarray(gallery_features, dtype=np.float64)
    query_labels = np.asarray(query_labels)
    gallery_labels = np.asarray(gallery_labels)
    n_q, n_g = query_features.shape[0], gallery_features.shape[0]
    if n_g == 0:
        raise ContractError("gallery is empty")
    if not 1 <= k <= n_g:
        raise ContractError(f"k={k} outside [1, {n_g}]")
    if model is not None:
        stacked = np.concatenate([query_features, gallery_features])
        pairs = [(qi, n_q + gj) for qi in range(n_q) for gj in range(n_g)]
        scores = score_pairs(model, pairs, stacked).reshape(n_q, n_g)
    else:
        d2 = ((query_features[:, None, :] - gallery_features[None, :, :]) ** 2).sum(axis=2)
        scores = -np.sqrt(d2)
    hits = 0
    for qi in range(n_q):
        top = np.argsort(-scores[qi], kind="stable")[:k]
        if np.any(gallery_labels[top] == query_labels[qi]):
            hits += 1
    return MetricReport(f"recall_at_{k}", hits / n_q, None, n_q)


# ---------------------------------------------------------------------------
# attribute mAP and rank report
# ---------------------------------------------------------------------------

def average_precision(scores, labels) -> float:
    """AP with ranking ties broken toward the lower index."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    positives = ranked.sum()
    if positives == 0:
        raise ContractError("average precision is undefined without positives")
    hits = 0
    total = 0.0
    for rank, rel in enumerate(ranked, start=1):
        if rel == 1.0:
            hits += 1
            total += hits / rank
    return float(total / positives)


def attribute_map(model, pairs, attribute_table: AttributeTable, fa: str, features) -> MetricReport:
    """Mean AP of condition scores against pairwise attribute labels.

    Attributes lacking both a positive and a negative labelled pair are
    excluded from the mean and flagged in the detail payload.
    """
    idx = np.asarray(list(pairs), dtype=np.int64)
    rho, _ = model.pair_conditions(idx, features)
    labels, mask = pair_label_matrix(attribute_table, idx[:, 0], idx[:, 1], fa)
    n_attr = labels.shape[1]
    if rho.shape[1] < n_attr:
        raise ContractError(
            f"model has {rho.shape[1]} conditions but labels need {n_attr}"
        )
    per_attr: list[float] = []
    skipped: list[int] = []
    for a in range(n_attr):
        keep = mask[:, a] == 1.0
        y = labels[keep, a]
        if keep.sum() == 0 or y.sum() == 0 or y.sum() == keep.sum():
            skipped.append(a)
            per_attr.append(float("nan"))
            continue
        per_attr.append(average_precision(rho[keep, a], y))
    included = [v for v in per_attr if not math.isnan(v)]
    if not included:
        raise ContractError("no attribute had both positive and negative labelled pairs")
    value = float(np.mean(included))
    return MetricReport(
        "attribute_map", value, None, len(idx),
        detail={"per_attribute_ap": per_attr, "skipped_attributes": skipped},
    )


def _rank_matrix(scores: np.ndarray) -> np.ndarray:
    """Per row, rank 1 for the highest score; ties go to the lower index."""
    order = np.argsort(-scores, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(scores.shape[0])[:, None]
    ranks[rows, order] = np.arange(1, scores.shape[1] + 1)[None, :]
    return ranks.astype(np.float64)


def attribute_rank_report(runs, pairs, features) -> list[dict]:
    """Mean and spread of per-attribute ranks across training runs.

    Ranks are computed per pair both by relevance weight and by contribution
    (condition score times relevance), averaged over pairs within each run,
    then summarized across runs.
    """
    if not runs:
        raise ContractError("need at least one run")
    m = runs[0].csm_config.m
    for run in runs:
        if run.csm_config.m != m:
            raise ContractError(
                f"runs disagree on condition count: {run.csm_config.m} != {m}"
            )
    idx = np.asarray(list(pairs), dtype=np.int64)
    by_relevance = []
    by_contribution = []
    for run in runs:
        rho, omega = run.pair_conditions(idx, features)
        by_relevance.append(_rank_matrix(omega).mean(axis=0))
        by_contribution.append(_rank_matrix(rho * omega).mean(axis=0))
    rel = np.stack(by_relevance)
    con = np.stack(by_contribution)
    rows = []
    for a in range(m):
        rows.append(
            {
                "attribute": a,
                "mean_rank_relevance": float(rel[:, a].mean()),
                "sd_rank_relevance": float(rel[:, a].std()),
                "mean_rank_contribution": float(con[:, a].mean()),
                "sd_rank_contribution": float(con[:, a].std()),
            }
        )
    return rows


# ---------------------------------------------------------------------------
# balanced pair accuracy over a whole split
# ---------------------------------------------------------------------------

def balanced_pair_accuracy(
    model, features, graph: SimilarityGraph, indices, threshold: float = 0.5
) -> MetricReport:
    """Class-balanced accuracy over every within-split pair.

    Positives and negatives are weighted equally as classes (half each), so
    the number equals the mean of true-positive and true-negative rates and
    carries no sampling noise.
    """
    indices = np.asarray(indices, dtype=np.int64)
    pos_pairs, neg_pairs = [], []
    for a_pos, a in enumerate(indices.tolist()):
        for b in indices.tolist()[a_pos + 1 :]:
            (pos_pairs if graph.has_edge(a, b) else neg_pairs).append((a, b))
    if not pos_pairs or not neg_pairs:
        raise ContractError("split needs both linked and unlinked pairs")
    pos_scores = score_pairs(model, pos_pairs, features)
    neg_scores = score_pairs(model, neg_pairs, features)
    tpr = float((pos_scores >= threshold).mean())
    tnr = float((neg_scores < threshold).mean())
    value = 0.5 * (tpr + tnr)
    return MetricReport(
        "balanced_pair_accuracy", value, None, len(pos_pairs) + len(neg_pairs),
        detail={"true_positive_rate": tpr, "true_negative_rate": tnr},
    )
