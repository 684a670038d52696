"""Dense f64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the :class:`Tape` that is active in the current
context (``with Tape() as tape: ...``). Outside a tape, operations are plain
numpy computations and nothing is retained, which is what inference uses.

Every operation accepts optional leading batch axes; the temporal axis is
always ``-2`` and the channel axis ``-1``.
"""
from __future__ import annotations

import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Parameter", "Tape", "DimensionError", "ContractError",
    "EmptySequenceError", "ConfigError", "DeterminismError",
    "tensor", "temporal_conv", "global_avg_pool", "apply_pointwise", "combine",
    "sigmoid", "relu", "abs_", "dropout", "exp", "log", "sqrt", "square",
    "sum_", "mean", "softmax", "log_softmax", "topk_mean", "concat", "index",
    "stop_gradient", "backward", "adam_step", "finite_diff_check",
    "GradcheckReport",
]


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class EmptySequenceError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class DeterminismError(RuntimeError):
    pass


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "co2net_active_tape", default=None)


class Tensor:
    """An n-d array of float64 values that can take part in differentiation."""

    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False):
        data = np.array(values, dtype=np.float64)
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(data) if self.requires_grad else None
        self._tape: Tape | None = None
        self._pos: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; broadcasting follows numpy
    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(other, self)

    def __sub__(self, other):
        return _sub(self, other)

    def __rsub__(self, other):
        return _sub(other, self)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(other, self)

    def __truediv__(self, other):
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(other, self)

    def __neg__(self):
        return _mul(self, -1.0)

    def __getitem__(self, key):
        return index(self, key)


class Parameter(Tensor):
    """A trainable leaf tensor carrying its Adam state."""

    def __init__(self, values, name: str):
        super().__init__(values, requires_grad=True)
        self.name = name
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations.

    ``backward`` replays the records in reverse execution order and adds into
    leaf ``.grad`` buffers; the tape is not consumed, so a second call
    accumulates a second copy of every gradient.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        out._tape = self
        out._pos = len(self.records)
        self.records.append((out, inputs, vjp))

    def backward(self, root: Tensor) -> None:
        if root.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        if root._tape is not self:
            raise ContractError("root was not recorded on this tape")
        pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        # per-call leaf totals, added once so repeated calls accumulate exactly
        leaf_totals: dict[int, tuple[Tensor, np.ndarray]] = {}
        for out, inputs, vjp in reversed(self.records[: root._pos + 1]):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            contribs = vjp(g)
            for inp, contrib in zip(inputs, contribs):
                if contrib is None or not inp.requires_grad:
                    continue
                if inp._tape is None:
                    key = id(inp)
                    if key in leaf_totals:
                        leaf_totals[key] = (inp, leaf_totals[key][1] + contrib)
                    else:
                        leaf_totals[key] = (inp, contrib)
                else:
                    key = id(inp)
                    if key in pending:
                        pending[key] = pending[key] + contrib
                    else:
                        pending[key] = contrib
        for leaf, total in leaf_totals.values():
            leaf.grad += total


def backward(root: Tensor) -> None:
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if root._tape is None:
        if root.requires_grad:
            root.grad += 1.0
            return
        raise ContractError("root is not tape-recorded")
    root._tape.backward(root)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out._tape = None
    out._pos = None
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _ACTIVE_TAPE.get()
    if out.requires_grad:
        if tape is None:
            # no tape: result is a constant
            out.requires_grad = False
        else:
            tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise binary ---------------------------------------------------

def _add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def _sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def _mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def _div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


_COMBINE_OPS = ("add", "mul", "broadcast_mul_rowvec", "broadcast_mul_colvec")


def combine(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Elementwise ``add``/``mul`` of equal shapes, or a broadcast product.

    ``broadcast_mul_rowvec`` scales every row of a ``(..., T, D)`` tensor by a
    ``D`` vector (or ``(..., 1, D)``); ``broadcast_mul_colvec`` scales every
    column by a ``T`` vector.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if op in ("add", "mul"):
        if a.shape != b.shape:
            raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")
        return _add(a, b) if op == "add" else _mul(a, b)
    if a.ndim < 2:
        raise DimensionError(f"{op}: left operand must be at least 2-d, got {a.shape}")
    if op == "broadcast_mul_rowvec":
        ok = b.shape[-1:] == a.shape[-1:] and (b.ndim == 1 or b.shape[-2] == 1)
        if not ok:
            raise DimensionError(f"{op}: axis -1 of {b.shape} does not match {a.shape}")
        return _mul(a, b)
    if op == "broadcast_mul_colvec":
        if b.shape[-1] != a.shape[-2]:
            raise DimensionError(f"{op}: axis -2 of {a.shape} does not match {b.shape}")
        return _mul(a, _expand_last(b))
    raise ConfigError(f"unknown combine op {op!r}; expected one of {_COMBINE_OPS}")


def _expand_last(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(x.data[..., None], (x,), lambda g: (g.reshape(shape),))


# -- pointwise ---------------------------------------------------------------

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = _sigmoid_np(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = _branch(x.data > 0)
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def abs_(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    sign = _branch(np.sign(x.data))
    return _make(x.data * sign, (x,), lambda g: (g * sign,))


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    x = _as_tensor(x)
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("train-mode dropout needs an explicit rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def apply_pointwise(x: Tensor, fn: str, *, p: float = 0.0, train: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
    if fn == "sigmoid":
        return sigmoid(x)
    if fn == "relu":
        return relu(x)
    if fn == "abs":
        return abs_(x)
    if fn == "dropout":
        return dropout(x, p, train, rng)
    raise ConfigError(f"unknown pointwise fn {fn!r}")


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.sqrt(x.data)
    return _make(y, (x,), lambda g: (g * 0.5 / y,))


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    x = _as_tensor(x)
    inside = _branch((x.data >= lo) & (x.data <= hi))
    above = _branch(x.data > hi)
    out = np.where(inside, x.data, np.where(above, hi, lo))
    return _make(out, (x,), lambda g: (g * inside,))


class _Probe:
    """Records the decisions of non-smooth ops at a base point.

    Stop-gradient outputs are always replayed after recording, since finite
    differences must treat them as constants. Branch decisions (ReLU masks,
    abs signs, clip masks, top-k indices) are either recomputed and compared
    (``observe``, which sets ``flipped`` when a kink was crossed) or replayed
    (``freeze``, which evaluates the same smooth piece the tape differentiated).
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.mode = "record"
        self.pos = 0
        self.flipped = False

    def reset(self, mode: str) -> None:
        self.mode, self.pos, self.flipped = mode, 0, False

    def _recorded(self, data: np.ndarray) -> np.ndarray:
        if self.pos >= len(self.values) or self.values[self.pos].shape != data.shape:
            raise DeterminismError("non-smooth op calls differ between evaluations")
        out = self.values[self.pos]
        self.pos += 1
        return out

    def stop(self, data: np.ndarray) -> np.ndarray:
        if self.mode == "record":
            self.values.append(data.copy())
            return data
        return self._recorded(data).copy()

    def branch(self, decision: np.ndarray) -> np.ndarray:
        if self.mode == "record":
            self.values.append(decision.copy())
            return decision
        base = self._recorded(decision)
        if self.mode == "freeze":
            return base.copy()
        if not np.array_equal(base, decision):
            self.flipped = True
        return decision


_PROBE: contextvars.ContextVar["_Probe | None"] = contextvars.ContextVar("co2net_probe", default=None)


def _branch(decision: np.ndarray) -> np.ndarray:
    probe = _PROBE.get()
    return decision if probe is None else probe.branch(decision)


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, no edge back to ``x``."""
    data = _as_tensor(x).data.copy()
    probe = _PROBE.get()
    if probe is not None:
        data = probe.stop(data)
    return Tensor(data)


# -- reductions and shape ops -------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def global_avg_pool(x: Tensor, keepdims: bool = False) -> Tensor:
    """Mean over the temporal axis: ``(..., T, D) -> (..., D)``."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"global_avg_pool expects (..., T, D), got {x.shape}")
    T = x.shape[-2]
    if T == 0:
        raise EmptySequenceError("cannot pool an empty sequence (T=0)")
    shape = x.shape

    def vjp(g):
        g = g if keepdims else g[..., None, :]
        return (np.broadcast_to(g / T, shape).copy(),)

    return _make(x.data.mean(axis=-2, keepdims=keepdims), (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), vjp)


def topk_mean(x: Tensor, k: int, axis: int = -2) -> Tensor:
    """Mean of the ``k`` largest entries along ``axis`` (axis removed)."""
    x = _as_tensor(x)
    n = x.shape[axis]
    if not 1 <= k <= n:
        raise ContractError(f"k={k} outside [1, {n}]")
    order = np.argsort(-x.data, axis=axis, kind="stable")
    top = _branch(np.sort(np.take(order, np.arange(k), axis=axis), axis=axis))
    vals = np.take_along_axis(x.data, top, axis=axis)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        spread = np.broadcast_to(np.expand_dims(g / k, axis), top.shape)
        np.put_along_axis(full, top, spread, axis=axis)
        return (full,)

    return _make(vals.mean(axis=axis), (x,), vjp)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(_as_tensor(x) for x in xs)
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, vjp)


def index(x: Tensor, key) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _make(x.data[key], (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# -- temporal convolution -----------------------------------------------------

def temporal_conv(x: Tensor, weight: Tensor, bias: Tensor, kernel: int | None = None) -> Tensor:
    """Zero-padded 1-d convolution over time: ``(..., T, Din) -> (..., T, Dout)``.

    ``weight`` has shape ``(K, Din, Dout)`` with ``K`` odd; output row ``t``
    sees input rows ``t - (K-1)/2 .. t + (K-1)/2``.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if weight.ndim != 3:
        raise DimensionError(f"weight must be (K, Din, Dout), got {weight.shape}")
    K, Din, Dout = weight.shape
    if kernel is not None and kernel != K:
        raise DimensionError(f"axis 0 of weight: kernel {K} != declared {kernel}")
    if K % 2 == 0:
        raise DimensionError(f"axis 0 of weight: kernel size must be odd, got {K}")
    if x.ndim < 2 or x.shape[-1] != Din:
        raise DimensionError(f"axis -1 of input: {x.shape} does not match Din={Din}")
    if bias.shape != (Dout,):
        raise DimensionError(f"axis 0 of bias: {bias.shape} does not match Dout={Dout}")
    T = x.shape[-2]
    half = (K - 1) // 2
    if K == 1:
        cols = x.data
    else:
        pad = [(0, 0)] * (x.ndim - 2) + [(half, half), (0, 0)]
        xp = np.pad(x.data, pad)
        # (..., T, K*Din) with slot k holding row t+k-half
        cols = np.concatenate([xp[..., k:k + T, :] for k in range(K)], axis=-1)
    w2 = weight.data.reshape(K * Din, Dout)
    out = cols @ w2 + bias.data

    def vjp(g):
        lead = g.shape[:-2]
        gw = cols.reshape(-1, K * Din).T @ g.reshape(-1, Dout)
        gb = g.reshape(-1, Dout).sum(axis=0)
        gcols = g @ w2.T
        if K == 1:
            gx = gcols
        else:
            gxp = np.zeros(lead + (T + 2 * half, Din))
            for k in range(K):
                gxp[..., k:k + T, :] += gcols[..., k * Din:(k + 1) * Din]
            gx = gxp[..., half:half + T, :]
        return gx, gw.reshape(K, Din, Dout), gb

    return _make(out, (x, weight, bias), vjp)


# -- optimisation -------------------------------------------------------------

def adam_step(params: Iterable[Parameter], lr: float, weight_decay: float = 0.0,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One Adam update with bias correction; L2 term folded into the gradient.

    Gradients are zeroed afterwards.
    """
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    if weight_decay < 0:
        raise ConfigError(f"weight decay must be non-negative, got {weight_decay}")
    b1, b2 = betas
    for p in params:
        g = p.grad + weight_decay * p.data if weight_decay else p.grad
        p.step_count += 1
        p.adam_m *= b1
        p.adam_m += (1.0 - b1) * g
        p.adam_v *= b2
        p.adam_v += (1.0 - b2) * g * g
        m_hat = p.adam_m / (1.0 - b1 ** p.step_count)
        v_hat = p.adam_v / (1.0 - b2 ** p.step_count)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad[...] = 0.0


class GradcheckReport:
    """Per-parameter worst relative error, plus where kinks were crossed.

    ``per_param_plain`` holds the errors of the plain central differences
    everywhere; ``kinks`` counts the coordinates whose ``+-h`` evaluations
    switched a non-smooth branch and were therefore re-measured with frozen
    branches.
    """

    def __init__(self, per_param: dict[str, float], worst: tuple[str, int] | None, evaluations: int,
                 kinks: dict[str, int] | None = None, per_param_plain: dict[str, float] | None = None):
        self.per_param = per_param
        self.worst = worst
        self.evaluations = evaluations
        self.kinks = kinks or {}
        self.per_param_plain = per_param_plain or dict(per_param)

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def kink_coordinates(self) -> int:
        return sum(self.kinks.values())

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol

    def __repr__(self) -> str:
        return (f"GradcheckReport(max_rel_error={self.max_rel_error:.3e}, worst={self.worst}, "
                f"kink_coordinates={self.kink_coordinates})")


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4,
                      tol: float | None = None, floor: float = 1e-6) -> GradcheckReport:
    """Compare tape gradients of scalar ``f()`` with central differences.

    The per-element relative error is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps exactly-zero gradients from dividing by zero. Values passed
    through :func:`stop_gradient` are held at their base-point values. When a
    ``+-h`` evaluation switches the branch of a non-smooth op (ReLU, abs, clip,
    top-k membership) the central difference straddles a kink and says nothing
    about the derivative, so that coordinate is re-evaluated with every branch
    held at its base-point decision. Raises :class:`DeterminismError` if two
    evaluations at the same point differ, and ``AssertionError`` if ``tol`` is
    given and exceeded.
    """
    probe = _Probe()
    token = _PROBE.set(probe)
    try:
        report = _finite_diff_check(f, params, h, floor, probe)
    finally:
        _PROBE.reset(token)
    if tol is not None and not report.passed(tol):
        raise AssertionError(f"gradient check failed: {report}")
    return report


def _finite_diff_check(f, params, h, floor, probe: _Probe) -> GradcheckReport:
    for p in params:
        p.zero_grad()
    with Tape():
        root = f()
        backward(root)
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    def value(mode: str) -> tuple[float, bool]:
        probe.reset(mode)
        v = float(f().data)
        return v, probe.flipped

    base, _ = value("freeze")
    again, flipped = value("observe")
    if again != base or flipped:
        raise DeterminismError("f returned different values for identical parameters")
    if not math.isfinite(base):
        raise ContractError("f is not finite at the base point")
    per_param: dict[str, float] = {}
    per_param_plain: dict[str, float] = {}
    kinks: dict[str, int] = {}
    worst, worst_err, evals = None, -1.0, 2
    for i, (p, a) in enumerate(zip(params, analytic)):
        name = getattr(p, "name", f"param{i}")
        flat = p.data.reshape(-1)
        af = a.reshape(-1)
        err_max = plain_max = 0.0
        n_kinks = 0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp, flip_p = value("observe")
            flat[j] = orig - h
            fm, flip_m = value("observe")
            evals += 2
            num = (fp - fm) / (2.0 * h)
            plain = abs(af[j] - num) / max(abs(af[j]), abs(num), floor)
            err = plain
            if flip_p or flip_m:
                n_kinks += 1
                flat[j] = orig + h
                fp, _ = value("freeze")
                flat[j] = orig - h
                fm, _ = value("freeze")
                evals += 2
                num = (fp - fm) / (2.0 * h)
                err = abs(af[j] - num) / max(abs(af[j]), abs(num), floor)
            flat[j] = orig
            plain_max = max(plain_max, plain)
            err_max = max(err_max, err)
            if err > worst_err:
                worst, worst_err = (name, j), err
        per_param[name] = err_max
        per_param_plain[name] = plain_max
        kinks[name] = n_kinks
    return GradcheckReport(per_param, worst, evals, kinks, per_param_plain)
