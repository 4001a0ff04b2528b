"""Dataset bundles, synthetic generators with exact oracles, question and
episode builders, and bundle file I/O.

The compatibility generator realizes the information-loss scenario: every
positive attribute carries a hidden manifestation realized as a distinct
feature-space direction, two items link iff they share at least one attribute
and every shared attribute agrees in manifestation. Binary presence alone
cannot resolve manifestations, and the generator reports the exact best
accuracy any presence-only classifier can reach, by enumeration.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attributes import AttributeTable, read_attribute_csv, write_attribute_csv
from .encoders import (
    SimilarityGraph,
    read_feature_file,
    write_feature_file,
)
from .errors import BundleFormatError, ContractError, GenerationError
from .evaluation import Episode, FitbQuestion
from .rng import generator

TASK_KINDS = ("compatibility_manifestation", "fewshot_clusters", "linear_separable")
BUNDLE_FORMAT = "pan-bundle-v1"


@dataclass(frozen=True)
class SyntheticSpec:
    n_items: int
    d: int
    m_attributes: int
    noise_sd: float = 0.05
    task_kind: str = "compatibility_manifestation"
    manifestation_count: int = 2
    attr_density: float = 0.5
    n_classes: int = 20
    cluster_separation: float = 10.0
    hamming_threshold: int = 1

    def __post_init__(self):
        for name in ("n_items", "d", "m_attributes", "manifestation_count", "n_classes"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.noise_sd < 0:
            raise ContractError("noise_sd must be nonnegative")
        if self.task_kind not in TASK_KINDS:
            raise ContractError(f"unknown task kind {self.task_kind!r}")
        if not 0.0 < self.attr_density < 1.0:
            raise ContractError("attr_density must lie strictly between 0 and 1")


@dataclass
class DatasetBundle:
    features: np.ndarray
    graph: SimilarityGraph
    splits: dict[str, np.ndarray]
    attributes: AttributeTable | None = None
    categories: np.ndarray | None = None
    sets: dict[str, list[list[int]]] | None = None
    task: str | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        n = self.features.shape[0]
        if self.graph.n != n:
            raise ContractError(f"graph has {self.graph.n} nodes, features have {n}")
        seen: dict[int, str] = {}
        split_of: dict[int, str] = {}
        for name, idx in self.splits.items():
            idx = np.asarray(idx, dtype=np.int64)
            self.splits[name] = idx
            for i in idx.tolist():
                if not 0 <= i < n:
                    raise ContractError(f"split {name!r} index {i} out of range")
                if i in seen:
                    raise ContractError(
                        f"index {i} appears in splits {seen[i]!r} and {name!r}"
                    )
                seen[i] = name
                split_of[i] = name
        for i, j in self.graph.edges:
            if split_of.get(i) != split_of.get(j):
                raise ContractError(
                    f"edge ({i}, {j}) crosses splits "
                    f"{split_of.get(i)!r} and {split_of.get(j)!r}"
                )
        if self.attributes is not None and self.attributes.n != n:
            raise ContractError(
                f"attribute table has {self.attributes.n} rows, features have {n}"
            )
        if self.categories is not None:
            self.categories = np.asarray(self.categories, dtype=np.int64)
            if self.categories.shape != (n,):
                raise ContractError("categories must be one label per item")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def presence_bayes_accuracy(
    values: np.ndarray, graph: SimilarityGraph, indices
) -> float:
    """Exact ceiling for any classifier seeing only binary presence vectors.

    Considers every within-split pair with positives and negatives weighted
    equally as classes; for each unordered presence configuration the optimal
    decision takes the heavier side, so the result is
    0.5 * sum over configurations of max(pos_share, neg_share).
    """
    indices = [int(i) for i in indices]
    buckets: dict = {}
    n_pos = n_neg = 0
    for a_pos, a in enumerate(indices):
        row_a = tuple(values[a].astype(int).tolist())
        for b in indices[a_pos + 1 :]:
            row_b = tuple(values[b].astype(int).tolist())
            key = (row_a, row_b) if row_a <= row_b else (row_b, row_a)
            pos = graph.has_edge(a, b)
            cnt = buckets.setdefault(key, [0, 0])
            cnt[0 if pos else 1] += 1
            if pos:
                n_pos += 1
            else:
                n_neg += 1
    if n_pos == 0 or n_neg == 0:
        raise GenerationError("split lacks linked or unlinked pairs")
    acc = 0.0
    for pos, neg in buckets.values():
        acc += max(pos / n_pos, neg / n_neg)
    return 0.5 * acc


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def _orthonormal_columns(rng: np.random.Generator, d: int, k: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, k)))
    return q * np.sign(np.diag(r))[None, :]


def _round_to_f32(x: np.ndarray) -> np.ndarray:
    # generated features survive the float32 feature-file round trip exactly
    return x.astype(np.float32).astype(np.float64)


def _assign_splits(n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    order = rng.permutation(n)
    n_train = int(round(0.6 * n))
    n_val = int(round(0.2 * n))
    return {
        "train": np.sort(order[:n_train]),
        "val": np.sort(order[n_train : n_train + n_val]),
        "test": np.sort(order[n_train + n_val :]),
    }


def _within_split_edges(edges, splits) -> list[tuple[int, int]]:
    split_of = {}
    for name, idx in splits.items():
        for i in np.asarray(idx).tolist():
            split_of[i] = name
    return [e for e in edges if split_of.get(e[0]) == split_of.get(e[1])]


def _sample_positive_sets(
    graph: SimilarityGraph, indices, rng: np.random.Generator, count: int
) -> list[list[int]]:
    """Mutually-linked item sets of size 2..5, grown greedily from a random edge."""
    pool = set(int(i) for i in indices)
    local_edges = [e for e in graph.edges if e[0] in pool and e[1] in pool]
    if not local_edges:
        return []
    sets: list[list[int]] = []
    attempts = 0
    while len(sets) < count and attempts < 20 * count:
        attempts += 1
        i, j = local_edges[rng.integers(0, len(local_edges))]
        members = [i, j]
        target = int(rng.integers(2, 6))
        while len(members) < target:
            candidates = [
                c
                for c in pool
                if c not in members and all(graph.has_edge(c, m) for m in members)
            ]
            if not candidates:
                break
            members.append(int(candidates[rng.integers(0, len(candidates))]))
        sets.append(sorted(members))
    return sets


def gen_compatibility_manifestation(
    spec: SyntheticSpec, seed: int
) -> tuple[DatasetBundle, dict]:
    """Items with binary attributes whose positive entries carry a hidden
    manifestation; pairs link iff some attribute is shared and all shared
    attributes agree in manifestation."""
    if spec.manifestation_count < 2 and spec.task_kind == "compatibility_manifestation":
        pass  # a single manifestation is a legal degenerate case
    m, v, d, n = spec.m_attributes, spec.manifestation_count, spec.d, spec.n_items
    if m * v > d:
        raise ContractError(
            f"need m_attributes * manifestation_count <= d, got {m} * {v} > {d}"
        )
    rng = generator(seed, "gen-compat")
    values = (rng.random((n, m)) < spec.attr_density).astype(np.float64)
    manifest = rng.integers(0, v, size=(n, m))
    directions = _orthonormal_columns(rng, d, m * v)
    feats = np.zeros((n, d))
    for k in range(m):
        cols = directions[:, k * v + manifest[:, k]]  # d x n
        feats += values[:, k : k + 1] * cols.T
    feats += spec.noise_sd * rng.normal(size=(n, d))
    feats = _round_to_f32(feats)

    present = values.astype(bool)
    edges = []
    for i in range(n - 1):
        shared = present[i] & present[i + 1 :]
        agree = (manifest[i] == manifest[i + 1 :]) | ~shared
        link = shared.any(axis=1) & agree.all(axis=1)
        for off in np.nonzero(link)[0]:
            edges.append((i, int(i + 1 + off)))

    splits = _assign_splits(n, rng)
    kept = _within_split_edges(edges, splits)
    graph = SimilarityGraph(n, kept)
    categories = rng.integers(0, 4, size=n)
    table = AttributeTable(values, np.ones_like(values))
    sets = {
        name: _sample_positive_sets(graph, idx, generator(seed, "sets", name), max(8, len(idx) // 5))
        for name, idx in splits.items()
    }
    bundle = DatasetBundle(
        feats, graph, splits, table, categories, sets, task=spec.task_kind
    )
    report = {
        "task": spec.task_kind,
        "n_items": n,
        "edge_count": graph.num_edges,
        "total_edges_before_split_filter": len(edges),
        "presence_bayes_accuracy": {
            name: presence_bayes_accuracy(values, graph, idx)
            for name, idx in splits.items()
        },
    }
    return bundle, report


def gen_fewshot_clusters(spec: SyntheticSpec, seed: int) -> tuple[DatasetBundle, dict]:
    """Gaussian class clusters with per-class attribute signatures; links join
    same-class items. Some attribute pairs are mutually exclusive by design."""
    c, d, m = spec.n_classes, spec.d, spec.m_attributes
    if c > d:
        raise GenerationError(f"need n_classes <= d for separated centers, got {c} > {d}")
    if c < 3:
        raise GenerationError("need at least 3 classes to form base/val/novel splits")
    rng = generator(seed, "gen-fewshot")
    scale = spec.cluster_separation * spec.noise_sd * np.sqrt(d)
    if scale == 0.0:
        scale = 1.0  # zero noise: any positive separation keeps classes distinct
    centers = _orthonormal_columns(rng, d, c).T * scale

    per_class = spec.n_items // c
    counts = [per_class + (1 if k < spec.n_items % c else 0) for k in range(c)]
    labels = np.concatenate([np.full(cnt, k, dtype=np.int64) for k, cnt in enumerate(counts)])
    n = len(labels)
    feats = centers[labels] + spec.noise_sd * rng.normal(size=(n, d))
    feats = _round_to_f32(feats)

    signatures = np.zeros((c, m))
    for k in range(c):
        for t in range(m // 2):  # exclusive pair (2t, 2t+1): exactly one is on
            signatures[k, 2 * t + int(rng.integers(0, 2))] = 1.0
        for a in range(2 * (m // 2), m):
            signatures[k, a] = float(rng.integers(0, 2))
    table = AttributeTable(signatures[labels], np.ones((n, m)))

    class_order = rng.permutation(c)
    n_base = max(1, int(round(0.5 * c)))
    n_val = max(1, (c - n_base) // 2)
    groups = {
        "base": class_order[:n_base],
        "val": class_order[n_base : n_base + n_val],
        "novel": class_order[n_base + n_val :],
    }
    splits = {
        name: np.sort(np.concatenate([np.nonzero(labels == k)[0] for k in classes]))
        for name, classes in groups.items()
    }
    edges = []
    for k in range(c):
        members = np.nonzero(labels == k)[0].tolist()
        edges.extend(
            (members[a], members[b])
            for a in range(len(members))
            for b in range(a + 1, len(members))
        )
    bundle = DatasetBundle(
        feats, SimilarityGraph(n, edges), splits, table, labels, None, task=spec.task_kind
    )
    report = {
        "task": spec.task_kind,
        "n_items": n,
        "n_classes": c,
        "classes_per_split": {k: len(val) for k, val in groups.items()},
        "center_separation": float(scale * np.sqrt(2.0)),
    }
    return bundle, report


def gen_linear_separable(spec: SyntheticSpec, seed: int) -> tuple[DatasetBundle, dict]:
    """Attributes embedded linearly in features; pairs link iff their attribute
    vectors differ in at most hamming_threshold positions."""
    n, d, m = spec.n_items, spec.d, spec.m_attributes
    if m > d:
        raise ContractError(f"need m_attributes <= d, got {m} > {d}")
    rng = generator(seed, "gen-linear")
    values = (rng.random((n, m)) < spec.attr_density).astype(np.float64)
    basis = _orthonormal_columns(rng, d, m)
    feats = _round_to_f32(values @ basis.T + spec.noise_sd * rng.normal(size=(n, d)))
    edges = []
    for i in range(n - 1):
        hamming = np.abs(values[i] - values[i + 1 :]).sum(axis=1)
        for off in np.nonzero(hamming <= spec.hamming_threshold)[0]:
            edges.append((i, int(i + 1 + off)))
    splits = _assign_splits(n, rng)
    graph = SimilarityGraph(n, _within_split_edges(edges, splits))
    table = AttributeTable(values, np.ones_like(values))
    bundle = DatasetBundle(
        feats, graph, splits, table, np.zeros(n, dtype=np.int64), None, task=spec.task_kind
    )
    report = {
        "task": spec.task_kind,
        "n_items": n,
        "edge_count": graph.num_edges,
        "presence_bayes_accuracy": {
            name: presence_bayes_accuracy(values, graph, idx)
            for name, idx in splits.items()
        },
    }
    return bundle, report


def generate(spec: SyntheticSpec, seed: int) -> tuple[DatasetBundle, dict]:
    if spec.task_kind == "compatibility_manifestation":
        return gen_compatibility_manifestation(spec, seed)
    if spec.task_kind == "fewshot_clusters":
        return gen_fewshot_clusters(spec, seed)
    return gen_linear_separable(spec, seed)


# ---------------------------------------------------------------------------
# questions, negative sets, episodes
# ---------------------------------------------------------------------------

def build_fitb_questions(
    outfit_sets, num_choices: int, categories, seed: int, pool
) -> list[FitbQuestion]:
    """One question per set: drop one item as the answer, add same-category
    distractors drawn from the pool."""
    if num_choices < 1:
        raise ContractError("num_choices must be >= 1")
    categories = np.asarray(categories, dtype=np.int64)
    rng = generator(seed, "fitb-questions")
    pool = [int(p) for p in pool]
    questions = []
    for outfit in outfit_sets:
        outfit = [int(i) for i in outfit]
        if len(outfit) < 2:
            continue
        answer = outfit[int(rng.integers(0, len(outfit)))]
        question_items = tuple(i for i in outfit if i != answer)
        cat = categories[answer]
        eligible = [p for p in pool if categories[p] == cat and p not in outfit]
        if len(eligible) < num_choices - 1:
            raise GenerationError(
                f"not enough category-{cat} distractors: need {num_choices - 1}, "
                f"have {len(eligible)}"
            )
        picks = rng.choice(len(eligible), size=num_choices - 1, replace=False)
        candidates = [answer] + [eligible[int(p)] for p in picks]
        order = rng.permutation(num_choices)
        shuffled = [candidates[int(k)] for k in order]
        questions.append(
            FitbQuestion(question_items, tuple(shuffled), shuffled.index(answer))
        )
    return questions


def resample_negative_sets(positive_sets, categories, seed: int, pool) -> list[list[int]]:
    """Corrupt each positive set by swapping >= 1 items for same-category ones."""
    categories = np.asarray(categories, dtype=np.int64)
    rng = generator(seed, "negative-sets")
    pool = [int(p) for p in pool]
    out = []
    for outfit in positive_sets:
        outfit = [int(i) for i in outfit]
        replace_count = int(rng.integers(1, len(outfit) + 1))
        positions = rng.choice(len(outfit), size=replace_count, replace=False)
        corrupted = list(outfit)
        for pos in positions.tolist():
            cat = categories[outfit[pos]]
            eligible = [p for p in pool if categories[p] == cat and p not in corrupted]
            if not eligible:
                raise GenerationError(f"no category-{cat} replacement available")
            corrupted[pos] = eligible[int(rng.integers(0, len(eligible)))]
        out.append(corrupted)
    return out


def build_episodes(
    bundle: DatasetBundle,
    n_way: int,
    k_shot: int,
    n_query: int,
    count: int,
    seed: int,
    split: str = "novel",
) -> list[Episode]:
    """Uniformly sampled N-way K-shot tasks with disjoint supports and queries."""
    if min(n_way, k_shot, n_query, count) < 1:
        raise ContractError("episode parameters must all be >= 1")
    if bundle.categories is None:
        raise ContractError("episode construction needs per-item class labels")
    if split not in bundle.splits:
        raise ContractError(f"bundle has no split {split!r}")
    idx = np.asarray(bundle.splits[split], dtype=np.int64)
    labels = bundle.categories[idx]
    per_class = {int(k): idx[labels == k] for k in np.unique(labels)}
    eligible = sorted(k for k, items in per_class.items() if len(items) >= k_shot + n_query)
    if len(eligible) < n_way:
        raise GenerationError(
            f"need {n_way} classes with >= {k_shot + n_query} items in {split!r}, "
            f"have {len(eligible)}"
        )
    rng = generator(seed, "episodes")
    episodes = []
    for _ in range(count):
        chosen = rng.choice(len(eligible), size=n_way, replace=False)
        support, query = [], []
        for position, class_pos in enumerate(chosen.tolist()):
            items = per_class[eligible[class_pos]]
            draw = rng.choice(len(items), size=k_shot + n_query, replace=False)
            picked = items[draw]
            support.append(tuple(int(i) for i in picked[:k_shot]))
            query.extend((int(i), position) for i in picked[k_shot:])
        episodes.append(Episode(tuple(support), tuple(query)))
    return episodes


# ---------------------------------------------------------------------------
# bundle I/O
# ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_bundle(directory, bundle: DatasetBundle) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_feature_file(directory / "features.bin", bundle.features)
    with (directory / "edges.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j"])
        for i, j in bundle.graph.edges:
            writer.writerow([i, j])
    (directory / "splits.json").write_text(
        json.dumps({k: v.tolist() for k, v in bundle.splits.items()}, sort_keys=True) + "\n"
    )
    files = ["features.bin", "edges.csv", "splits.json"]
    if bundle.attributes is not None:
        write_attribute_csv(directory / "attributes.csv", bundle.attributes)
        files.append("attributes.csv")
        if bundle.attributes.confidence is not None:
            files.append("confidence.csv")
    if bundle.categories is not None:
        with (directory / "categories.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["item_id", "category"])
            for i, cat in enumerate(bundle.categories.tolist()):
                writer.writerow([i, cat])
        files.append("categories.csv")
    if bundle.sets is not None:
        (directory / "sets.json").write_text(json.dumps(bundle.sets, sort_keys=True) + "\n")
        files.append("sets.json")
    manifest = {
        "format": BUNDLE_FORMAT,
        "n": bundle.n,
        "d": bundle.d,
        "m": None if bundle.attributes is None else bundle.attributes.m,
        "task": bundle.task,
        "files": {name: _sha256(directory / name) for name in files},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def load_bundle(directory) -> DatasetBundle:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise BundleFormatError(f"{manifest_path} does not exist")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != BUNDLE_FORMAT:
        raise BundleFormatError(f"unknown bundle format {manifest.get('format')!r}")
    for name, digest in manifest["files"].items():
        path = directory / name
        if not path.exists():
            raise BundleFormatError(f"{path} listed in manifest but missing")
        actual = _sha256(path)
        if actual != digest:
            raise BundleFormatError(f"{path}: hash {actual} != manifest {digest}")

    features = read_feature_file(directory / "features.bin")
    n = features.shape[0]
    if n != manifest["n"] or features.shape[1] != manifest["d"]:
        raise BundleFormatError(
            f"feature file is {features.shape}, manifest says "
            f"({manifest['n']}, {manifest['d']})"
        )
    edges = []
    with (directory / "edges.csv").open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["i", "j"]:
            raise BundleFormatError(f"{directory / 'edges.csv'}: bad header {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                i, j = int(row[0]), int(row[1])
            except (ValueError, IndexError) as exc:
                raise BundleFormatError(
                    f"{directory / 'edges.csv'}:{lineno}: {exc}"
                ) from exc
            if not (0 <= i < n and 0 <= j < n):
                raise BundleFormatError(
                    f"{directory / 'edges.csv'}:{lineno}: index out of range for n={n}"
                )
            edges.append((i, j))
    splits = {
        k: np.asarray(v, dtype=np.int64)
        for k, v in json.loads((directory / "splits.json").read_text()).items()
    }
    attributes = None
    if (directory / "attributes.csv").exists():
        attributes = read_attribute_csv(
            directory / "attributes.csv", directory / "confidence.csv"
        )
        if attributes.n != n:
            raise BundleFormatError(
                f"attribute table has {attributes.n} rows, features have {n}"
            )
    categories = None
    if (directory / "categories.csv").exists():
        with (directory / "categories.csv").open(newline="") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            categories = np.array([int(row[1]) for row in reader], dtype=np.int64)
        if len(categories) != n:
            raise BundleFormatError(
                f"categories file has {len(categories)} rows, features have {n}"
            )
    sets = None
    if (directory / "sets.json").exists():
        sets = json.loads((directory / "sets.json").read_text())
    try:
        return DatasetBundle(
            features, SimilarityGraph(n, edges), splits, attributes, categories,
            sets, task=manifest.get("task"),
        )
    except ContractError as exc:
        raise BundleFormatError(f"{directory}: {exc}") from exc
