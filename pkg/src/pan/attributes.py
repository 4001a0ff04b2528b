"""Per-image binary attributes with missing-label masks, and pairwise label building.

Attribute files are CSV with header ``item_id, attr_0..attr_{M-1}`` and cell
values 0, 1 or ``?`` (unlabelled). An optional parallel confidence CSV carries
integers on a 4-point scale.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BundleFormatError, ContractError, DimensionError
from .rng import generator

FA_CHOICES = ("and", "or", "xor", "xnor", "and_xor")


@dataclass
class AttributeTable:
    values: np.ndarray            # N x M in {0, 1}
    mask: np.ndarray              # N x M in {0, 1}; 0 means unlabelled
    confidence: np.ndarray | None = None  # N x M integers, optional

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionError(f"attribute values must be 2-D, got {self.values.shape}")
        if self.mask.shape != self.values.shape:
            raise DimensionError(
                f"mask shape {self.mask.shape} does not match values {self.values.shape}"
            )
        if self.confidence is not None:
            self.confidence = np.asarray(self.confidence, dtype=np.int64)
            if self.confidence.shape != self.values.shape:
                raise DimensionError(
                    f"confidence shape {self.confidence.shape} does not match values"
                )
        if not np.all(np.isin(self.values, (0.0, 1.0))):
            raise ContractError("attribute values must be 0 or 1")
        if not np.all(np.isin(self.mask, (0.0, 1.0))):
            raise ContractError("attribute mask entries must be 0 or 1")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]


@dataclass
class PairAttributeLabel:
    labels: np.ndarray  # length M, or 2M for the and_xor concatenation
    mask: np.ndarray    # same length; 1 only where both operands were labelled


def _combine_values(a_i: np.ndarray, a_j: np.ndarray, fa: str) -> np.ndarray:
    if fa == "and":
        return a_i * a_j
    if fa == "or":
        return np.maximum(a_i, a_j)
    if fa == "xor":
        return np.abs(a_i - a_j)
    if fa == "xnor":
        return 1.0 - np.abs(a_i - a_j)
    if fa == "and_xor":
        return np.concatenate([a_i * a_j, np.abs(a_i - a_j)], axis=-1)
    raise ContractError(f"unknown attribute combination {fa!r}; choose from {FA_CHOICES}")


def combine_pair(a_i, mask_i, a_j, mask_j, fa: str) -> PairAttributeLabel:
    """Combine two per-image attribute vectors into one pairwise target.

    The output mask is the AND of the operand masks: a combined label is only
    defined when both images were labelled for that attribute. The and_xor
    variant emits the AND block first, then the XOR block, mask duplicated.
    """
    a_i = np.asarray(a_i, dtype=np.float64).ravel()
    a_j = np.asarray(a_j, dtype=np.float64).ravel()
    mask_i = np.asarray(mask_i, dtype=np.float64).ravel()
    mask_j = np.asarray(mask_j, dtype=np.float64).ravel()
    if not (a_i.shape == a_j.shape == mask_i.shape == mask_j.shape):
        raise DimensionError(
            f"attribute vectors disagree in length: {a_i.shape}, {a_j.shape}, "
            f"{mask_i.shape}, {mask_j.shape}"
        )
    labels = _combine_values(a_i, a_j, fa)
    mask = mask_i * mask_j
    if fa == "and_xor":
        mask = np.concatenate([mask, mask])
    return PairAttributeLabel(labels=labels, mask=mask)


def pair_label_matrix(
    table: AttributeTable, idx_i, idx_j, fa: str
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised combine_pair over index arrays; rows align with the pairs."""
    idx_i = np.asarray(idx_i, dtype=np.int64)
    idx_j = np.asarray(idx_j, dtype=np.int64)
    labels = _combine_values(table.values[idx_i], table.values[idx_j], fa)
    mask = table.mask[idx_i] * table.mask[idx_j]
    if fa == "and_xor":
        mask = np.concatenate([mask, mask], axis=1)
    return labels, mask


def label_dimension(m: int, fa: str) -> int:
    return 2 * m if fa == "and_xor" else m


def threshold_by_confidence(table: AttributeTable, min_conf: int) -> AttributeTable:
    """Unlabel every entry whose confidence is <= min_conf; values untouched."""
    if table.confidence is None:
        raise ContractError("threshold_by_confidence requires a confidence table")
    mask = np.where(table.confidence <= min_conf, 0.0, table.mask)
    return AttributeTable(table.values.copy(), mask, table.confidence.copy())


def randomize_labels(table: AttributeTable, seed: int) -> AttributeTable:
    """Replace labelled values by fair coin flips; the mask is untouched."""
    rng = generator(seed, "randomize-labels")
    flips = rng.integers(0, 2, size=table.values.shape).astype(np.float64)
    values = np.where(table.mask == 1.0, flips, table.values)
    conf = None if table.confidence is None else table.confidence.copy()
    return AttributeTable(values, table.mask.copy(), conf)


# ---------------------------------------------------------------------------
# CSV interface
# ---------------------------------------------------------------------------

def write_attribute_csv(path, table: AttributeTable) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["item_id"] + [f"attr_{k}" for k in range(table.m)])
        for i in range(table.n):
            row = [str(i)]
            for k in range(table.m):
                row.append("?" if table.mask[i, k] == 0.0 else str(int(table.values[i, k])))
            writer.writerow(row)
    if table.confidence is not None:
        write_confidence_csv(path.with_name("confidence.csv"), table)


def write_confidence_csv(path, table: AttributeTable) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["item_id"] + [f"attr_{k}" for k in range(table.m)])
        for i in range(table.n):
            writer.writerow([str(i)] + [str(int(c)) for c in table.confidence[i]])


def read_attribute_csv(path, confidence_path=None) -> AttributeTable:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "item_id":
            raise BundleFormatError(f"{path}: expected header starting with item_id")
        m = len(header) - 1
        values, mask = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != m + 1:
                raise BundleFormatError(f"{path}:{lineno}: expected {m + 1} cells, got {len(row)}")
            vrow, mrow = [], []
            for col, cell in enumerate(row[1:]):
                if cell == "?":
                    vrow.append(0.0)
                    mrow.append(0.0)
                elif cell in ("0", "1"):
                    vrow.append(float(cell))
                    mrow.append(1.0)
                else:
                    raise BundleFormatError(
                        f"{path}:{lineno}: column {col + 1} has invalid cell {cell!r}"
                    )
            values.append(vrow)
            mask.append(mrow)
    confidence = None
    if confidence_path is not None and Path(confidence_path).exists():
        confidence = _read_confidence_csv(confidence_path, len(values), m)
    return AttributeTable(np.array(values), np.array(mask), confidence)


def _read_confidence_csv(path, n: int, m: int) -> np.ndarray:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != m + 1:
                raise BundleFormatError(f"{path}:{lineno}: expected {m + 1} cells, got {len(row)}")
            try:
                rows.append([int(c) for c in row[1:]])
            except ValueError as exc:
                raise BundleFormatError(f"{path}:{lineno}: {exc}") from exc
    if len(rows) != n:
        raise BundleFormatError(f"{path}: expected {n} rows, got {len(rows)}")
    return np.array(rows, dtype=np.int64)
