"""Dense float64 tensors with a minimal reverse-mode gradient tape.

Tensors are immutable value wrappers around contiguous float64 numpy
arrays. A GradTape records primitive operations as they execute; the
backward pass replays them in exact reverse order and accumulates
gradients for every registered parameter. Tapes are single-threaded and
consumed by a single backward() call.

Broadcasting is deliberately restricted to bias-add (a (n,) vector added
to an (m, n) matrix); everything else requires exact shape agreement.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

# Above this threshold log1p(exp(x)) is x to double precision and the
# naive formula overflows anyway.
_SOFTPLUS_CUTOFF = 30.0


def _as_f64(data) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(data, dtype=np.float64))


class Tensor:
    """Immutable float64 array, optionally attached to a GradTape."""

    __slots__ = ("data", "tape")

    def __init__(self, data, tape: "GradTape | None" = None):
        self.data = _as_f64(data)
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, traced={self.tape is not None})"


def tensor(data) -> Tensor:
    """Construct an untraced constant tensor, rejecting non-finite values."""
    arr = _as_f64(data)
    if not np.all(np.isfinite(arr)):
        raise ContractError("tensor values must be finite")
    return Tensor(arr)


class GradTape:
    """Ordered record of primitive ops plus a parameter registry."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, list[tuple[Tensor, Callable[[np.ndarray], np.ndarray]]]]] = []
        self._params: dict[str, Tensor] = {}
        self._consumed = False

    def parameter(self, name: str, value) -> Tensor:
        """Register a named parameter and return its traced tensor."""
        if name in self._params:
            raise ContractError(f"parameter {name!r} already registered")
        arr = _as_f64(value)
        if not np.all(np.isfinite(arr)):
            raise ContractError(f"parameter {name!r} has non-finite values")
        t = Tensor(arr, tape=self)
        self._params[name] = t
        return t

    def watch(self, value) -> Tensor:
        """Attach a constant input to the tape without registering it."""
        return Tensor(value, tape=self)

    @property
    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def _record(self, out_data: np.ndarray,
                parents: list[tuple[Tensor, Callable[[np.ndarray], np.ndarray]]]) -> Tensor:
        out = Tensor(out_data, tape=self)
        self._nodes.append((out, parents))
        return out


def _tape_of(*tensors: Tensor) -> GradTape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ContractError("operands belong to different tapes")
            tape = t.tape
    return tape


def _unary(x: Tensor, out_data: np.ndarray,
           vjp: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    tape = _tape_of(x)
    if tape is None:
        return Tensor(out_data)
    return tape._record(out_data, [(x, vjp)])


def _binary(a: Tensor, b: Tensor, out_data: np.ndarray,
            vjp_a: Callable[[np.ndarray], np.ndarray],
            vjp_b: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out_data)
    return tape._record(out_data, [(a, vjp_a), (b, vjp_b)])


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an (m, k) by a (k, n) tensor."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data
    return _binary(a, b, out,
                   lambda g: g @ b.data.T,
                   lambda g: a.data.T @ g)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also supports bias-add of a (n,) vector to (m, n)."""
    if a.shape == b.shape:
        return _binary(a, b, a.data + b.data, lambda g: g, lambda g: g)
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return _binary(a, b, a.data + b.data,
                       lambda g: g,
                       lambda g: g.sum(axis=0))
    raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub shape mismatch: {a.shape} - {b.shape}")
    return _binary(a, b, a.data - b.data, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product, exact shape match only."""
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")
    return _binary(a, b, a.data * b.data,
                   lambda g: g * b.data,
                   lambda g: g * a.data)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _unary(x, x.data * c, lambda g: g * c)


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _unary(x, out, lambda g: g * out)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _unary(x, out, lambda g: g * (1.0 - out * out))


def softplus(x: Tensor) -> Tensor:
    """Overflow-safe log(1 + exp(x)); exact asymptote above the cutoff."""
    d = x.data
    out = np.where(d > _SOFTPLUS_CUTOFF,
                   d + np.log1p(np.exp(-np.abs(d))),
                   np.log1p(np.exp(np.minimum(d, _SOFTPLUS_CUTOFF))))
    # d/dx softplus = sigmoid, stable in both tails
    sig = 0.5 * (1.0 + np.tanh(0.5 * d))
    return _unary(x, out, lambda g: g * sig)


def square(x: Tensor) -> Tensor:
    return _unary(x, x.data * x.data, lambda g: g * (2.0 * x.data))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())
    return _unary(x, out, lambda g: np.broadcast_to(g, x.shape).copy())


def row_sum(x: Tensor) -> Tensor:
    """Sum an (m, n) tensor over columns, yielding (m,)."""
    if x.data.ndim != 2:
        raise DimensionError(f"row_sum expects a matrix, got {x.shape}")
    out = x.data.sum(axis=1)
    return _unary(x, out, lambda g: np.repeat(g[:, None], x.shape[1], axis=1))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return scale(sum_all(x), 1.0 / n)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols shape mismatch: {a.shape} | {b.shape}")
    na = a.shape[1]
    return _binary(a, b, np.concatenate([a.data, b.data], axis=1),
                   lambda g: g[:, :na],
                   lambda g: g[:, na:])


def slice_cols(x: Tensor, j0: int, j1: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= j0 <= j1 <= x.shape[1]):
        raise DimensionError(f"slice_cols [{j0}:{j1}] out of range for {x.shape}")

    def vjp(g):
        full = np.zeros(x.shape)
        full[:, j0:j1] = g
        return full

    return _unary(x, x.data[:, j0:j1].copy(), vjp)


def gather_cols(x: Tensor, idx: np.ndarray) -> Tensor:
    """Column permutation/selection of an (m, n) tensor."""
    if x.data.ndim != 2:
        raise DimensionError(f"gather_cols expects a matrix, got {x.shape}")
    idx = np.asarray(idx, dtype=np.intp)

    def vjp(g):
        full = np.zeros(x.shape)
        np.add.at(full, (slice(None), idx), g)
        return full

    return _unary(x, x.data[:, idx].copy(), vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(tape: GradTape, loss: Tensor) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(param) for every registered parameter.

    The tape is consumed: a second backward() raises.
    """
    if tape._consumed:
        raise ContractError("tape already consumed by a previous backward()")
    if loss.tape is not tape:
        raise ContractError("loss was not traced on this tape")
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, parents in reversed(tape._nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for parent, vjp in parents:
            contrib = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib

    result = {}
    for name, p in tape._params.items():
        result[name] = grads.get(id(p), np.zeros(p.shape))
    return result


# ---------------------------------------------------------------------------
# finite-difference gradient checker
# ---------------------------------------------------------------------------

class GradCheckFailure(ContractError):
    """Raised when the objective is non-finite at a perturbed point."""


def grad_check(f: Callable[[Sequence[Tensor]], Tensor],
               params: Sequence[np.ndarray],
               h: float = 1e-5) -> float:
    """Compare the taped gradient of f against finite differences.

    f receives one Tensor per entry of params and must return a scalar
    Tensor built from the primitives in this module. Uses the five-point
    fourth-order stencil so the truncation error stays far below the
    rounding floor. Returns the maximum relative error over all
    coordinates, with denominator max(|analytic|, |numeric|, 1e-8).
    """
    if h <= 0:
        raise ContractError("grad_check step h must be positive")
    params = [_as_f64(p) for p in params]

    tape = GradTape()
    traced = [tape.parameter(f"p{i}", p) for i, p in enumerate(params)]
    loss = f(traced)
    analytic = backward(tape, loss)

    max_err = 0.0
    for i, p in enumerate(params):
        flat = p.reshape(-1)
        ana = analytic[f"p{i}"].reshape(-1)
        for j in range(flat.size):
            def eval_at(delta):
                shifted = [q.copy() for q in params]
                shifted[i].reshape(-1)[j] += delta
                out = f([Tensor(q) for q in shifted])
                return float(np.asarray(out.data).reshape(()))

            samples = [eval_at(d) for d in (-2 * h, -h, h, 2 * h)]
            if not all(np.isfinite(s) for s in samples):
                raise GradCheckFailure(
                    f"non-finite objective at param {i} coordinate {j}")
            f_m2, f_m1, f_p1, f_p2 = samples
            num = (f_m2 - 8.0 * f_m1 + 8.0 * f_p1 - f_p2) / (12.0 * h)
            denom = max(abs(ana[j]), abs(num), 1e-8)
            max_err = max(max_err, abs(ana[j] - num) / denom)
    return max_err
