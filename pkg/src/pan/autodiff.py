"""Dense 64-bit matrix arithmetic with a tape-based reverse-mode gradient engine.

Every value is a 2-D float64 matrix (vectors are 1xM or Nx1, scalars 1x1).
A forward pass through the primitives below records one node per operation on
a ``Tape``; ``backward`` consumes the tape once, in reverse, and returns exact
first-order gradients for every parameter registered on that tape. The tape is
build-once: no higher-order derivatives, no re-entrant recording.

Numerical guards:
  * sigmoid is computed branchwise from exp of the negative-magnitude argument,
  * row softmax subtracts the per-row maximum,
  * cross-entropy clamps probabilities to [BCE_EPS, 1 - BCE_EPS].
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import ContractError, DimensionError, NumericError

BCE_EPS = 1e-12

Array = np.ndarray


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> Array:
    """Coerce to a finite, C-contiguous 2-D float64 array."""
    arr = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected at most 2 dimensions, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("matrix construction requires all entries finite")
    if rows is not None and arr.shape != (rows, cols):
        raise DimensionError(f"expected shape {(rows, cols)}, got {arr.shape}")
    return arr


class Tensor:
    """A matrix value, optionally attached to the tape that produced it."""

    __slots__ = ("value", "tape", "name")

    def __init__(self, value, tape: "Tape | None" = None, name: str | None = None):
        self.value = value if isinstance(value, np.ndarray) else as_matrix(value)
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


class Tape:
    """Ordered record of primitive operations; operands always precede users.

    Single-owner during construction. After ``backward`` the recorded values
    stay valid for reading; recording more operations onto a consumed tape is
    allowed but rarely useful.
    """

    __slots__ = ("records", "parameters")

    def __init__(self):
        # each record: (output, inputs, vjp, forward)
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable, Callable]] = []
        self.parameters: dict[str, Tensor] = {}

    def parameter(self, values, name: str) -> Tensor:
        """Register a named leaf whose gradient ``backward`` will report."""
        if name in self.parameters:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(as_matrix(values), tape=self, name=name)
        self.parameters[name] = t
        return t

    def constant(self, values) -> Tensor:
        return Tensor(as_matrix(values), tape=None)

    def replay_forward(self) -> bool:
        """Recompute every node from its operands; True iff all bit-identical."""
        for out, _inputs, _vjp, forward in self.records:
            recomputed = forward()
            if recomputed.shape != out.value.shape:
                return False
            if not np.array_equal(
                recomputed.view(np.uint64), out.value.view(np.uint64)
            ):
                return False
        return True


class GradientStore:
    """Gradients keyed by parameter name, shaped exactly like the parameters."""

    __slots__ = ("grads",)

    def __init__(self, grads: dict[str, Array]):
        self.grads = grads

    def __getitem__(self, name: str) -> Array:
        return self.grads[name]

    def __contains__(self, name: str) -> bool:
        return name in self.grads

    def items(self):
        return self.grads.items()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(as_matrix(x))


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ContractError("operands belong to different tapes")
            tape = t.tape
    return tape


def _emit(
    value: Array,
    inputs: tuple[Tensor, ...],
    vjp: Callable[[Array], Iterable[Array | None]],
    forward: Callable[[], Array],
) -> Tensor:
    tape = _tape_of(*inputs)
    out = Tensor(value, tape=tape)
    if tape is not None:
        tape.records.append((out, inputs, vjp, forward))
    return out


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape {a.shape} does not match {b.shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} x {b.shape}")

    def vjp(g):
        return g @ b.value.T, a.value.T @ g

    return _emit(a.value @ b.value, (a, b), vjp, lambda: a.value @ b.value)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(
        a.value.T.copy(), (a,), lambda g: (g.T.copy(),), lambda: a.value.T.copy()
    )


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape(a, b, "add")
    return _emit(a.value + b.value, (a, b), lambda g: (g, g), lambda: a.value + b.value)


def subtract(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape(a, b, "subtract")
    return _emit(
        a.value - b.value, (a, b), lambda g: (g, -g), lambda: a.value - b.value
    )


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape(a, b, "multiply")

    def vjp(g):
        return g * b.value, g * a.value

    return _emit(a.value * b.value, (a, b), vjp, lambda: a.value * b.value)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit(a.value * c, (a,), lambda g: (g * c,), lambda: a.value * c)


def add_row(a, row) -> Tensor:
    """Add a 1xM row vector to every row of an NxM matrix."""
    a, row = _as_tensor(a), _as_tensor(row)
    if row.shape[0] != 1 or row.shape[1] != a.shape[1]:
        raise DimensionError(f"add_row: row {row.shape} does not broadcast over {a.shape}")

    def vjp(g):
        return g, g.sum(axis=0, keepdims=True)

    return _emit(a.value + row.value, (a, row), vjp, lambda: a.value + row.value)


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    # subgradient 0 at exactly 0
    return _emit(
        np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),), lambda: np.abs(a.value)
    )


def sigmoid_values(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = sigmoid_values(a.value)
    return _emit(s, (a,), lambda g: (g * s * (1.0 - s),), lambda: sigmoid_values(a.value))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(
        np.maximum(a.value, 0.0),
        (a,),
        lambda g: (g * (a.value > 0.0),),
        lambda: np.maximum(a.value, 0.0),
    )


def sqrt_entries(a) -> Tensor:
    """Entrywise square root; inputs must be strictly positive for a finite vjp."""
    a = _as_tensor(a)
    s = np.sqrt(a.value)
    return _emit(s, (a,), lambda g: (g / (2.0 * s),), lambda: np.sqrt(a.value))


def row_softmax_values(x: Array) -> Array:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def row_softmax(a) -> Tensor:
    a = _as_tensor(a)
    if a.shape[1] < 1:
        raise DimensionError("row_softmax: need at least one column")
    s = row_softmax_values(a.value)

    def vjp(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    return _emit(s, (a,), vjp, lambda: row_softmax_values(a.value))


def gather_rows(a, indices) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {a.shape[0]} rows")

    def vjp(g):
        acc = np.zeros_like(a.value)
        np.add.at(acc, idx, g)
        return (acc,)

    return _emit(a.value[idx].copy(), (a,), vjp, lambda: a.value[idx].copy())


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if not (0 <= start <= stop <= a.shape[1]):
        raise DimensionError(f"slice_cols: [{start}:{stop}] invalid for {a.shape}")

    def vjp(g):
        acc = np.zeros_like(a.value)
        acc[:, start:stop] = g
        return (acc,)

    return _emit(a.value[:, start:stop].copy(), (a,), vjp,
                 lambda: a.value[:, start:stop].copy())


def row_sum(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(a.value.sum(axis=1, keepdims=True), (a,), vjp,
                 lambda: a.value.sum(axis=1, keepdims=True))


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    n = a.value.size

    def vjp(g):
        return (np.full(a.shape, g[0, 0] / n),)

    return _emit(a.value.mean().reshape(1, 1), (a,), vjp,
                 lambda: a.value.mean().reshape(1, 1))


def bce_values(p: Array, y: Array) -> Array:
    ph = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return -(y * np.log(ph) + (1.0 - y) * np.log1p(-ph))


def _bce_grad(p: Array, y: Array) -> Array:
    ph = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    grad = (ph - y) / (ph * (1.0 - ph))
    # clamped entries sit on a flat of the loss
    return np.where(p == ph, grad, 0.0)


def bce(p, y) -> Tensor:
    """Entrywise binary cross-entropy of predictions p against 0/1 labels y.

    Labels are data, never differentiated.
    """
    p = _as_tensor(p)
    y = as_matrix(y)
    if y.shape != p.shape:
        raise DimensionError(f"bce: labels {y.shape} do not match predictions {p.shape}")

    def vjp(g):
        return (g * _bce_grad(p.value, y),)

    return _emit(bce_values(p.value, y), (p,), vjp, lambda: bce_values(p.value, y))


def bce_mean(p, y) -> Tensor:
    return mean_all(bce(p, y))


def masked_bce_mean(p, y, mask) -> Tensor:
    """Mean binary cross-entropy over entries where mask == 1.

    Entries with mask == 0 contribute nothing, bit-exactly, whatever their
    values. An all-zero mask yields exactly 0.
    """
    p = _as_tensor(p)
    y = as_matrix(y)
    mask = as_matrix(mask)
    if y.shape != p.shape or mask.shape != p.shape:
        raise DimensionError(
            f"masked_bce_mean: shapes {p.shape}, {y.shape}, {mask.shape} differ"
        )
    labelled = mask == 1.0
    count = int(labelled.sum())

    def forward():
        if count == 0:
            return np.zeros((1, 1))
        per_entry = np.where(labelled, bce_values(p.value, y), 0.0)
        return (per_entry.sum() / count).reshape(1, 1)

    def vjp(g):
        if count == 0:
            return (np.zeros_like(p.value),)
        grad = np.where(labelled, _bce_grad(p.value, y), 0.0) / count
        return (grad * g[0, 0],)

    return _emit(forward(), (p,), vjp, forward)


# ---------------------------------------------------------------------------
# reverse pass and the finite-difference check
# ---------------------------------------------------------------------------

def backward(tape: Tape, output: Tensor) -> GradientStore:
    """Exact reverse-mode gradients of a scalar output for all tape parameters."""
    if output.value.size != 1:
        raise ContractError(f"backward: output must be scalar, got shape {output.shape}")
    if output.tape is None:
        # constant output: zero gradient everywhere
        return GradientStore(
            {name: np.zeros_like(p.value) for name, p in tape.parameters.items()}
        )
    if output.tape is not tape:
        raise ContractError("backward: output was not produced on this tape")

    grad_by_id: dict[int, Array] = {id(output): np.ones((1, 1))}
    for out, inputs, vjp, _forward in reversed(tape.records):
        g = grad_by_id.get(id(out))
        if g is None:
            continue
        for operand, piece in zip(inputs, vjp(g)):
            if piece is None or operand.tape is None:
                continue
            existing = grad_by_id.get(id(operand))
            if existing is None:
                grad_by_id[id(operand)] = piece.copy() if piece is g else piece
            else:
                existing += piece

    grads = {
        name: grad_by_id.get(id(param), np.zeros_like(param.value))
        for name, param in tape.parameters.items()
    }
    return GradientStore(grads)


LossFn = Callable[[Tape, dict[str, Tensor]], Tensor]


def finite_diff_errors(
    loss_fn: LossFn,
    params: Mapping[str, Array],
    step: float = 1e-5,
    grad_transform: Callable[[GradientStore], GradientStore] | None = None,
) -> dict[str, Array]:
    """Per-entry relative error between analytic and central-difference gradients.

    ``loss_fn(tape, tensors)`` must build a scalar loss from the supplied
    parameter tensors and be a pure function of their values. The relative
    error denominator is max(|analytic|, |numeric|, 1e-8). ``grad_transform``
    lets a caller corrupt the analytic gradients first (negative-control hook).
    """
    if step <= 0:
        raise ContractError("finite_diff_check: step must be positive")
    arrays = {name: as_matrix(v) for name, v in params.items()}

    tape = Tape()
    tensors = {name: tape.parameter(v, name) for name, v in arrays.items()}
    analytic = backward(tape, loss_fn(tape, tensors))
    if grad_transform is not None:
        analytic = grad_transform(analytic)

    def loss_at(candidate: dict[str, Array]) -> float:
        probe = Tape()
        ts = {name: probe.parameter(v, name) for name, v in candidate.items()}
        return loss_fn(probe, ts).item()

    work = {name: v.copy() for name, v in arrays.items()}
    errors: dict[str, Array] = {}
    for name, base in arrays.items():
        grad = analytic[name]
        err = np.zeros_like(base)
        for flat in range(base.size):
            centre = work[name].flat[flat]
            work[name].flat[flat] = centre + step
            up = loss_at(work)
            work[name].flat[flat] = centre - step
            down = loss_at(work)
            work[name].flat[flat] = centre
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss while probing {name}[{flat}]")
            numeric = (up - down) / (2.0 * step)
            a = grad.flat[flat]
            err.flat[flat] = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        errors[name] = err
    return errors


def finite_diff_check(
    loss_fn: LossFn, params: Mapping[str, Array], step: float = 1e-5
) -> float:
    """Worst relative error between analytic and central-difference gradients."""
    errors = finite_diff_errors(loss_fn, params, step)
    return max((float(e.max()) for e in errors.values()), default=0.0)
