"""Concept-conditioned similarity: condition scores, relevance weights, final score.

For a pair of feature vectors the module forms the joint representation
``|h_i - h_j|`` and produces M condition scores ``rho`` (sigmoid), M relevance
weights ``omega`` (softmax over the same joint representation), and the final
similarity ``p = rho . omega`` — or the plain mean of ``rho`` when relevance
weighting is disabled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError
from .rng import generator

SUPERVISION_MODES = ("unsupervised", "supervised", "hybrid")


@dataclass(frozen=True)
class CsmConfig:
    m: int
    supervision: str = "unsupervised"
    m_sup: int = 0
    m_unsup: int = 0
    relevance_enabled: bool = True

    def __post_init__(self):
        if self.m < 1:
            raise ContractError(f"condition count must be >= 1, got {self.m}")
        if self.supervision not in SUPERVISION_MODES:
            raise ContractError(f"unknown supervision mode {self.supervision!r}")
        if self.supervision == "hybrid":
            if self.m_sup < 1 or self.m_unsup < 1:
                raise ContractError("hybrid mode needs both supervised and unsupervised conditions")
            if self.m != self.m_sup + self.m_unsup:
                raise ContractError(
                    f"hybrid condition count {self.m} != {self.m_sup} + {self.m_unsup}"
                )

    @property
    def supervised_count(self) -> int:
        """Length of the rho prefix that receives attribute supervision."""
        if self.supervision == "supervised":
            return self.m
        if self.supervision == "hybrid":
            return self.m_sup
        return 0


@dataclass
class CsmParameters:
    """w1/b1 produce condition scores, w2/b2 produce relevance logits."""

    w1: np.ndarray  # d x M
    b1: np.ndarray  # 1 x M
    w2: np.ndarray  # d x M
    b2: np.ndarray  # 1 x M

    def __post_init__(self):
        self.w1 = ad.as_matrix(self.w1)
        self.w2 = ad.as_matrix(self.w2, *self.w1.shape)
        m = self.w1.shape[1]
        self.b1 = ad.as_matrix(self.b1, 1, m)
        self.b2 = ad.as_matrix(self.b2, 1, m)

    @property
    def d(self) -> int:
        return self.w1.shape[0]

    @property
    def m(self) -> int:
        return self.w1.shape[1]

    def copy(self) -> "CsmParameters":
        return CsmParameters(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"csm_w1": self.w1, "csm_b1": self.b1, "csm_w2": self.w2, "csm_b2": self.b2}


@dataclass
class CsmOutput:
    rho: np.ndarray    # (M,)
    omega: np.ndarray  # (M,)
    p: float


def init_params(d: int, m: int, seed: int) -> CsmParameters:
    """Weights uniform in [-1/sqrt(d), 1/sqrt(d)], biases zero.

    With zero biases an untrained model scores identical inputs at exactly 0.5.
    """
    if d < 1 or m < 1:
        raise ContractError(f"init_params needs d >= 1 and m >= 1, got d={d}, m={m}")
    rng = generator(seed, "csm-init")
    bound = 1.0 / np.sqrt(d)
    w1 = rng.uniform(-bound, bound, size=(d, m))
    w2 = rng.uniform(-bound, bound, size=(d, m))
    return CsmParameters(w1, np.zeros((1, m)), w2, np.zeros((1, m)))


def _joint(h_i: np.ndarray, h_j: np.ndarray, d: int) -> np.ndarray:
    h_i = ad.as_matrix(h_i)
    h_j = ad.as_matrix(h_j)
    if h_i.shape != (1, d) or h_j.shape != (1, d):
        raise DimensionError(
            f"feature vectors must have length d={d}, got {h_i.shape} and {h_j.shape}"
        )
    return np.abs(h_i - h_j)


def csm_forward(h_i, h_j, params: CsmParameters, config: CsmConfig) -> CsmOutput:
    """Score one pair. Symmetric in its two feature arguments bit-for-bit."""
    if config.m != params.m:
        raise ContractError(f"config m={config.m} does not match parameters m={params.m}")
    diff = _joint(h_i, h_j, params.d)
    rho = ad.sigmoid_values(diff @ params.w1 + params.b1)
    omega = ad.row_softmax_values(diff @ params.w2 + params.b2)
    if config.relevance_enabled:
        p = float((rho * omega).sum())
    else:
        p = float(rho.mean())
    return CsmOutput(rho=rho[0].copy(), omega=omega[0].copy(), p=p)


def csm_batch_forward(pairs, features, params: CsmParameters, config: CsmConfig) -> list[CsmOutput]:
    """Per-pair forward over rows of a feature matrix; equals the per-pair loop."""
    features = ad.as_matrix(features)
    n = features.shape[0]
    outputs = []
    for i, j in pairs:
        if not (0 <= i < n and 0 <= j < n):
            raise IndexError(f"pair ({i}, {j}) out of range for {n} items")
        outputs.append(
            csm_forward(features[i : i + 1], features[j : j + 1], params, config)
        )
    return outputs


def csm_pair_scores(
    diff: np.ndarray, params: CsmParameters, config: CsmConfig
) -> np.ndarray:
    """Vectorised similarity scores for a batch of joint representations."""
    rho = ad.sigmoid_values(diff @ params.w1 + params.b1)
    if not config.relevance_enabled:
        return rho.mean(axis=1)
    omega = ad.row_softmax_values(diff @ params.w2 + params.b2)
    return (rho * omega).sum(axis=1)


def csm_on_tape(
    tape: ad.Tape,
    h_i: ad.Tensor,
    h_j: ad.Tensor,
    params: dict[str, ad.Tensor],
    config: CsmConfig,
) -> tuple[ad.Tensor, ad.Tensor]:
    """Taped batch forward; returns (rho: NxM, p: Nx1)."""
    diff = ad.absolute(ad.subtract(h_i, h_j))
    rho = ad.sigmoid(ad.add_row(ad.matmul(diff, params["csm_w1"]), params["csm_b1"]))
    if config.relevance_enabled:
        omega = ad.row_softmax(
            ad.add_row(ad.matmul(diff, params["csm_w2"]), params["csm_b2"])
        )
        p = ad.row_sum(ad.multiply(rho, omega))
    else:
        p = ad.scale(ad.row_sum(rho), 1.0 / config.m)
    return rho, p


# ---------------------------------------------------------------------------
# checkpoint serialisation (exact round-trip via hex floats)
# ---------------------------------------------------------------------------

def matrix_to_hex(arr: np.ndarray) -> dict:
    return {
        "rows": int(arr.shape[0]),
        "cols": int(arr.shape[1]),
        "values": [float(v).hex() for v in arr.ravel()],
    }


def matrix_from_hex(obj: dict) -> np.ndarray:
    rows, cols = int(obj["rows"]), int(obj["cols"])
    values = [float.fromhex(v) for v in obj["values"]]
    if len(values) != rows * cols:
        raise ContractError(
            f"matrix payload has {len(values)} values for shape ({rows}, {cols})"
        )
    return np.array(values, dtype=np.float64).reshape(rows, cols)


def params_to_dict(params: CsmParameters) -> dict:
    return {
        "d": params.d,
        "m": params.m,
        "w1": matrix_to_hex(params.w1),
        "b1": matrix_to_hex(params.b1),
        "w2": matrix_to_hex(params.w2),
        "b2": matrix_to_hex(params.b2),
    }


def params_from_dict(obj: dict) -> CsmParameters:
    return CsmParameters(
        matrix_from_hex(obj["w1"]),
        matrix_from_hex(obj["b1"]),
        matrix_from_hex(obj["w2"]),
        matrix_from_hex(obj["b2"]),
    )
