"""Feature heads over precomputed features: identity, MLP, and a graph
convolutional encoder with symmetric adjacency normalization, inverted layer
dropout, and per-epoch edge dropout.

Feature files are little-endian binary: magic ``PANF``, u32 item count, u32
feature dimension, then n*d float32 values (widened to float64 on load). A CSV
alternative uses header ``item_id, f_0..f_{d-1}``.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import BundleFormatError, ContractError, DimensionError
from .rng import generator

FEATURE_MAGIC = b"PANF"


class SimilarityGraph:
    """Undirected graph over n nodes; edges are unordered index pairs, no self-edges."""

    __slots__ = ("n", "edge_set", "_sorted")

    def __init__(self, n: int, edges=()):
        if n < 1:
            raise ContractError(f"graph needs at least one node, got n={n}")
        self.n = int(n)
        edge_set = set()
        for i, j in edges:
            i, j = int(i), int(j)
            if i == j:
                raise ContractError(f"self-edge ({i}, {i}) is not allowed")
            if not (0 <= i < n and 0 <= j < n):
                raise IndexError(f"edge ({i}, {j}) out of range for {n} nodes")
            edge_set.add((min(i, j), max(i, j)))
        self.edge_set = frozenset(edge_set)
        self._sorted = None

    @property
    def edges(self) -> list[tuple[int, int]]:
        if self._sorted is None:
            self._sorted = sorted(self.edge_set)
        return self._sorted

    @property
    def num_edges(self) -> int:
        return len(self.edge_set)

    def has_edge(self, i: int, j: int) -> bool:
        return (min(i, j), max(i, j)) in self.edge_set

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        for i, j in self.edge_set:
            a[i, j] = 1.0
            a[j, i] = 1.0
        return a

    def subgraph_edges(self, keep) -> "SimilarityGraph":
        """Same node set, only edges with both endpoints in ``keep``."""
        keep = set(int(k) for k in keep)
        return SimilarityGraph(
            self.n, [e for e in self.edges if e[0] in keep and e[1] in keep]
        )

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SimilarityGraph)
            and self.n == other.n
            and self.edge_set == other.edge_set
        )

    def __repr__(self) -> str:
        return f"SimilarityGraph(n={self.n}, edges={self.num_edges})"


def normalize_adjacency(g: SimilarityGraph) -> np.ndarray:
    """Symmetric renormalization with self-loops: D^{-1/2} (A + I) D^{-1/2}.

    Computed from an outer product of the inverse square-root degrees so the
    result is bit-exactly symmetric. An edgeless graph maps to the identity.
    """
    a = g.adjacency() + np.eye(g.n)
    inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    return np.outer(inv_sqrt, inv_sqrt) * a


def drop_edges(g: SimilarityGraph, p: float, seed: int) -> SimilarityGraph:
    """Remove each edge independently with probability p; deterministic in seed."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"edge dropout probability must be in [0, 1), got {p}")
    edges = g.edges
    rng = generator(seed, "edge-dropout")
    keep = rng.random(len(edges)) >= p
    return SimilarityGraph(g.n, [e for e, k in zip(edges, keep) if k])


# ---------------------------------------------------------------------------
# encoder specifications and weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "identity"                  # identity | mlp | gcn
    layer_dims: tuple[int, ...] = ()        # mlp output dims, last is the embedding
    activation: str = "relu"                # relu | linear, hidden layers only
    num_layers: int = 2                     # gcn
    hidden_dim: int = 16                    # gcn, output dim of every layer
    layer_dropout_p: float = 0.0
    edge_dropout_p: float = 0.0

    def __post_init__(self):
        if self.kind not in ("identity", "mlp", "gcn"):
            raise ContractError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "mlp" and not self.layer_dims:
            raise ContractError("mlp encoder needs at least one layer dim")
        if self.kind == "gcn" and self.num_layers < 1:
            raise ContractError("gcn encoder needs num_layers >= 1")
        if self.activation not in ("relu", "linear"):
            raise ContractError(f"unknown activation {self.activation!r}")
        for p in (self.layer_dropout_p, self.edge_dropout_p):
            if not 0.0 <= p < 1.0:
                raise ContractError(f"dropout probability must be in [0, 1), got {p}")

    def output_dim(self, d_in: int) -> int:
        if self.kind == "identity":
            return d_in
        if self.kind == "mlp":
            return self.layer_dims[-1]
        return self.hidden_dim


@dataclass
class EncoderWeights:
    kind: str
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)  # mlp only

    def copy(self) -> "EncoderWeights":
        return EncoderWeights(
            self.kind,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def as_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for idx, w in enumerate(self.weights):
            out[f"enc_w{idx}"] = w
        for idx, b in enumerate(self.biases):
            out[f"enc_b{idx}"] = b
        return out


def init_encoder_weights(spec: EncoderSpec, d_in: int, seed: int) -> EncoderWeights:
    """Per-layer uniform(+-1/sqrt(fan_in)) weights; zero biases for the MLP."""
    rng = generator(seed, "encoder-init")
    if spec.kind == "identity":
        return EncoderWeights("identity")
    weights, biases = [], []
    fan_in = d_in
    if spec.kind == "mlp":
        for dim in spec.layer_dims:
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, dim)))
            biases.append(np.zeros((1, dim)))
            fan_in = dim
        return EncoderWeights("mlp", weights, biases)
    for _ in range(spec.num_layers):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, spec.hidden_dim)))
        fan_in = spec.hidden_dim
    return EncoderWeights("gcn", weights)


def _act_values(x: np.ndarray, activation: str) -> np.ndarray:
    return np.maximum(x, 0.0) if activation == "relu" else x


def encode(
    spec: EncoderSpec,
    x: np.ndarray,
    graph: SimilarityGraph | None = None,
    weights: EncoderWeights | None = None,
    training: bool = False,
    seed: int = 0,
) -> np.ndarray:
    """Encode a full feature matrix.

    Evaluation mode (training=False) applies no dropout and ignores the seed.
    In training mode each GCN layer output gets inverted dropout with scale
    1/(1-p); edge dropout is the training loop's concern (see drop_edges), so
    the graph passed here is used as-is.
    """
    x = ad.as_matrix(x)
    if spec.kind == "identity":
        return x
    if weights is None:
        raise ContractError(f"{spec.kind} encoder needs weights")
    if spec.kind == "mlp":
        h = x
        last = len(weights.weights) - 1
        for idx, (w, b) in enumerate(zip(weights.weights, weights.biases)):
            h = h @ w + b
            if idx < last:
                h = _act_values(h, spec.activation)
        return h
    if graph is None:
        raise ContractError("gcn encoder requires a similarity graph")
    if graph.n != x.shape[0]:
        raise DimensionError(f"graph has {graph.n} nodes but features have {x.shape[0]} rows")
    a_hat = normalize_adjacency(graph)
    h = x
    for idx, w in enumerate(weights.weights):
        h = _act_values((a_hat @ h) @ w, spec.activation)
        if training and spec.layer_dropout_p > 0.0:
            keep = 1.0 - spec.layer_dropout_p
            mask = generator(seed, "layer-dropout", idx).random(h.shape) < keep
            h = h * (mask / keep)
    return h


def dropout_masks_for_epoch(
    spec: EncoderSpec, shape_rows: int, seed: int
) -> list[np.ndarray] | None:
    """Pre-scaled inverted-dropout masks, one per GCN layer, or None."""
    if spec.kind != "gcn" or spec.layer_dropout_p <= 0.0:
        return None
    keep = 1.0 - spec.layer_dropout_p
    masks = []
    for idx in range(spec.num_layers):
        mask = generator(seed, "layer-dropout", idx).random((shape_rows, spec.hidden_dim)) < keep
        masks.append(mask / keep)
    return masks


def encode_on_tape(
    spec: EncoderSpec,
    tape: ad.Tape,
    x: ad.Tensor,
    params: dict[str, ad.Tensor],
    a_hat: ad.Tensor | None = None,
    dropout_masks: list[np.ndarray] | None = None,
) -> ad.Tensor:
    """Taped mirror of encode(); identical op order, so values match bit-for-bit."""
    if spec.kind == "identity":
        return x
    if spec.kind == "mlp":
        h = x
        last = sum(1 for k in params if k.startswith("enc_w")) - 1
        for idx in range(last + 1):
            h = ad.add_row(ad.matmul(h, params[f"enc_w{idx}"]), params[f"enc_b{idx}"])
            if idx < last and spec.activation == "relu":
                h = ad.relu(h)
        return h
    if a_hat is None:
        raise ContractError("gcn encoder requires a normalized adjacency")
    h = x
    for idx in range(spec.num_layers):
        h = ad.matmul(ad.matmul(a_hat, h), params[f"enc_w{idx}"])
        if spec.activation == "relu":
            h = ad.relu(h)
        if dropout_masks is not None:
            h = ad.multiply(h, tape.constant(dropout_masks[idx]))
    return h


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------

def write_feature_file(path, features: np.ndarray) -> None:
    features = ad.as_matrix(features)
    n, d = features.shape
    payload = features.astype("<f4").tobytes()
    with Path(path).open("wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", n, d))
        fh.write(payload)


def read_feature_file(path) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != FEATURE_MAGIC:
        raise BundleFormatError(f"{path}: bad magic {blob[:4]!r}, expected {FEATURE_MAGIC!r}")
    if len(blob) < 12:
        raise BundleFormatError(f"{path}: header truncated at {len(blob)} bytes")
    n, d = struct.unpack("<II", blob[4:12])
    expected = 12 + 4 * n * d
    if len(blob) != expected:
        raise BundleFormatError(
            f"{path}: expected {expected} bytes for {n}x{d} features, got {len(blob)}"
        )
    values = np.frombuffer(blob, dtype="<f4", offset=12).astype(np.float64)
    return values.reshape(n, d)


def read_feature_csv(path) -> np.ndarray:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "item_id":
            raise BundleFormatError(f"{path}: expected header starting with item_id")
        d = len(header) - 1
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 1:
                raise BundleFormatError(f"{path}:{lineno}: expected {d + 1} cells, got {len(row)}")
            try:
                rows.append([float(c) for c in row[1:]])
            except ValueError as exc:
                raise BundleFormatError(f"{path}:{lineno}: {exc}") from exc
    return np.array(rows, dtype=np.float64).reshape(len(rows), d)
