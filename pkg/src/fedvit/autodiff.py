"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a fresh immutable tensor. When an input is a
watched leaf (or derives from one), the result remembers its parents and
a closure computing vector-Jacobian products; a :class:`GradTape` pulls
gradients for a named parameter set out of the recorded graph in a single
reverse sweep that touches each node exactly once.

The op set is deliberately small: exactly what a small transformer
classifier needs, in two dimensions, with no broadcasting beyond a
row-wise bias.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "CongruenceError",
    "GradientError",
    "Tensor",
    "ParamSet",
    "GradTape",
    "matmul",
    "add",
    "scale",
    "relu",
    "tanh",
    "softmax_rows",
    "layer_norm",
    "cross_entropy",
    "transpose",
    "slice_cols",
    "concat_cols",
    "concat_rows",
    "mean_rows",
    "reshape",
    "backward",
    "finite_diff_grad",
    "finite_diff_coordinate",
    "sgd_step",
]


class AutodiffError(Exception):
    """Base class for tensor-engine failures."""


class ShapeError(AutodiffError):
    """Operand shapes do not satisfy an operation's contract."""


class CongruenceError(AutodiffError):
    """Two parameter sets disagree on names or per-name shapes."""


class GradientError(AutodiffError):
    """The reverse pass cannot be run (e.g. loss not built on the tape)."""


class Tensor:
    """Immutable dense float64 array with optional gradient provenance.

    ``shape`` and the flat row-major ``data`` view are the public value;
    ``array`` exposes the shaped ndarray for numeric code. Entries are
    checked finite on construction and after every operation.
    """

    __slots__ = ("array", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor holds non-finite entries")
        arr.setflags(write=False)
        self.array = arr
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Fast path for arrays the engine just produced: no copy, no graph.
        t = cls.__new__(cls)
        arr.setflags(write=False)
        t.array = arr
        t.requires_grad = False
        t._parents = ()
        t._vjp = None
        return t

    @classmethod
    def _leaf(cls, arr: np.ndarray) -> "Tensor":
        t = cls._wrap(arr)
        t.requires_grad = True
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the entries."""
        return np.ravel(self.array)

    @property
    def size(self) -> int:
        return self.array.size

    def item(self) -> float:
        if self.array.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.array.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _result(
    arr: np.ndarray,
    parents: tuple[Tensor, ...],
    vjp_factory: Callable[[], Callable[[np.ndarray], tuple[np.ndarray | None, ...]]],
    op: str,
) -> Tensor:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{op} produced non-finite values")
    out = Tensor._wrap(arr)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp_factory()
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a 2-D ``[m, k]`` by ``[k, n]`` pair."""
    if a.array.ndim != 2 or b.array.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    av, bv = a.array, b.array

    def factory():
        return lambda g: (g @ bv.T, av.T @ g)

    return _result(av @ bv, (a, b), factory, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias broadcast over the rows of ``a``."""
    if a.shape == b.shape:
        def factory():
            return lambda g: (g, g)

        return _result(a.array + b.array, (a, b), factory, "add")
    if a.array.ndim == 2 and b.array.ndim == 1 and a.shape[1] == b.shape[0]:
        def factory():
            return lambda g: (g, g.sum(axis=0))

        return _result(a.array + b.array, (a, b), factory, "add")
    raise ShapeError(f"add cannot combine shapes {a.shape} and {b.shape}")


def scale(x: Tensor, s: float) -> Tensor:
    """Multiply every entry by the scalar ``s``."""
    s = float(s)

    def factory():
        return lambda g: (g * s,)

    return _result(x.array * s, (x,), factory, "scale")


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at 0 is taken as 0."""
    mask = x.array > 0.0

    def factory():
        return lambda g: (g * mask,)

    return _result(np.where(mask, x.array, 0.0), (x,), factory, "relu")


def tanh(x: Tensor) -> Tensor:
    """Elementwise hyperbolic tangent (the smooth activation alternative)."""
    out = np.tanh(x.array)

    def factory():
        return lambda g: (g * (1.0 - out * out),)

    return _result(out, (x,), factory, "tanh")


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, computed with row-max subtraction."""
    if x.array.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got {x.shape}")
    shifted = x.array - x.array.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def factory():
        def vjp(g):
            gy = g * out
            return (gy - out * gy.sum(axis=1, keepdims=True),)

        return vjp

    return _result(out, (x,), factory, "softmax_rows")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardisation of ``x [t, C]`` followed by an affine map."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    if x.array.ndim != 2:
        raise ShapeError(f"layer_norm needs a 2-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm affine parameters must have shape ({c},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    mu = x.array.mean(axis=1, keepdims=True)
    centered = x.array - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gv = gamma.array

    def factory():
        def vjp(g):
            dgamma = (g * xhat).sum(axis=0)
            dbeta = g.sum(axis=0)
            dxhat = g * gv
            dx = inv * (
                dxhat
                - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            )
            return (dx, dgamma, dbeta)

        return vjp

    return _result(xhat * gv + beta.array, (x, gamma, beta), factory, "layer_norm")


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-wise softmax.

    ``logits`` is ``[batch, classes]``; the result is a scalar tensor. The
    log-sum-exp is computed against the row maximum, so arbitrarily large
    logits stay finite.
    """
    if logits.array.ndim != 2:
        raise ShapeError(f"cross_entropy needs 2-D logits, got {logits.shape}")
    b, k = logits.shape
    idx = [int(y) for y in labels]
    if len(idx) != b:
        raise ShapeError(f"{len(idx)} labels for {b} logit rows")
    for pos, y in enumerate(idx):
        if not 0 <= y < k:
            raise ValueError(f"label {y} at position {pos} out of range [0, {k})")
    z = logits.array
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    sums = e.sum(axis=1, keepdims=True)
    lse = np.log(sums) + zmax
    rows = np.arange(b)
    losses = lse[:, 0] - z[rows, idx]
    probs = e / sums

    def factory():
        def vjp(g):
            dz = probs.copy()
            dz[rows, idx] -= 1.0
            return (dz * (float(g) / b),)

        return vjp

    return _result(np.asarray(losses.mean()), (logits,), factory, "cross_entropy")


def transpose(x: Tensor) -> Tensor:
    if x.array.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {x.shape}")

    def factory():
        return lambda g: (g.T,)

    return _result(x.array.T, (x,), factory, "transpose")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``[start, stop)`` of a 2-D tensor."""
    if x.array.ndim != 2:
        raise ShapeError(f"slice_cols needs a 2-D tensor, got {x.shape}")
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"column range [{start}, {stop}) invalid for shape {x.shape}")
    shape = x.shape

    def factory():
        def vjp(g):
            dx = np.zeros(shape)
            dx[:, start:stop] = g
            return (dx,)

        return vjp

    return _result(x.array[:, start:stop], (x,), factory, "slice_cols")


def _concat(xs: Sequence[Tensor], axis: int, op: str) -> Tensor:
    if not xs:
        raise ShapeError(f"{op} needs at least one tensor")
    other = 1 - axis
    ref = xs[0].shape
    for t in xs:
        if t.array.ndim != 2 or t.shape[other] != ref[other]:
            raise ShapeError(f"{op} operands disagree: {[t.shape for t in xs]}")
    sizes = [t.shape[axis] for t in xs]
    offsets = np.cumsum([0] + sizes)

    def factory():
        def vjp(g):
            if axis == 0:
                return tuple(g[offsets[i]:offsets[i + 1], :] for i in range(len(sizes)))
            return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

        return vjp

    return _result(
        np.concatenate([t.array for t in xs], axis=axis), tuple(xs), factory, op
    )


def concat_cols(xs: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors side by side (shared row count)."""
    return _concat(xs, 1, "concat_cols")


def concat_rows(xs: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors top to bottom (shared column count)."""
    return _concat(xs, 0, "concat_rows")


def mean_rows(x: Tensor) -> Tensor:
    """Mean over rows of a 2-D tensor, kept as a ``[1, n]`` row."""
    if x.array.ndim != 2:
        raise ShapeError(f"mean_rows needs a 2-D tensor, got {x.shape}")
    t = x.shape[0]

    def factory():
        return lambda g: (np.broadcast_to(g / t, (t, g.shape[1])),)

    return _result(x.array.mean(axis=0, keepdims=True), (x,), factory, "mean_rows")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    new = tuple(int(s) for s in shape)
    if int(np.prod(new, dtype=np.int64)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {new}")
    old = x.shape

    def factory():
        return lambda g: (g.reshape(old),)

    return _result(x.array.reshape(new), (x,), factory, "reshape")


class ParamSet(Mapping):
    """Ordered, immutable map from parameter name to tensor.

    Iteration order is always lexicographic in the name, so that any
    arithmetic folded over a parameter set is reproducible bit for bit.
    Two sets are congruent when they agree on names and per-name shapes;
    every binary operation over parameter sets requires congruence.
    """

    __slots__ = ("_params",)

    def __init__(self, params: Mapping[str, Tensor]):
        ordered: dict[str, Tensor] = {}
        for name in sorted(params):
            value = params[name]
            if not isinstance(value, Tensor):
                raise TypeError(f"parameter {name!r} is not a Tensor")
            ordered[name] = value
        self._params = ordered

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParamSet":
        return cls({name: Tensor(a) for name, a in arrays.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> tuple[str, ...]:
        return tuple(self._params)

    def congruent(self, other: "ParamSet") -> bool:
        return self.names() == other.names() and all(
            self[n].shape == other[n].shape for n in self._params
        )

    def require_congruent(self, other: "ParamSet", context: str) -> None:
        if not self.congruent(other):
            raise CongruenceError(f"{context}: parameter sets are not congruent")

    def map_arrays(self, fn: Callable[[str, np.ndarray], np.ndarray]) -> "ParamSet":
        return ParamSet(
            {name: Tensor._wrap(np.asarray(fn(name, t.array), dtype=np.float64))
             for name, t in self._params.items()}
        )

    def global_norm(self) -> float:
        total = 0.0
        for t in self._params.values():
            total += float(np.sum(t.array * t.array))
        return math.sqrt(total)

    def __repr__(self) -> str:
        return f"ParamSet({len(self)} tensors)"


class GradTape:
    """Marks a parameter set as leaves and extracts their gradients.

    A tape belongs to one training step: watch once, build a scalar loss
    from the returned leaves, then call :meth:`gradients` (or the module
    level :func:`backward`). The reverse sweep walks the recorded graph in
    reverse topological order, visiting each node exactly once, and
    returns a parameter set congruent to the watched one.
    """

    def __init__(self):
        self._leaves: dict[str, Tensor] = {}

    def watch(self, params: ParamSet) -> ParamSet:
        if self._leaves:
            raise GradientError("tape is already watching a parameter set")
        self._leaves = {name: Tensor._leaf(t.array) for name, t in params.items()}
        return ParamSet(self._leaves)

    def gradients(self, loss: Tensor) -> ParamSet:
        if not self._leaves:
            raise GradientError("tape has no watched parameters")
        if loss.array.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        if not loss.requires_grad:
            raise GradientError("loss was not computed from this tape's parameters")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.array)}
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad or pg is None:
                    continue
                held = grads.get(id(parent))
                grads[id(parent)] = np.asarray(pg, dtype=np.float64) if held is None else held + pg

        out: dict[str, Tensor] = {}
        for name, leaf in self._leaves.items():
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros(leaf.shape)
            out[name] = Tensor._wrap(np.ascontiguousarray(g, dtype=np.float64))
        return ParamSet(out)


def backward(loss: Tensor, tape: GradTape) -> ParamSet:
    """Reverse-mode gradients of a scalar loss for the tape's watched leaves."""
    return tape.gradients(loss)


def _replace_coordinate(params: ParamSet, name: str, index: int, delta: float) -> ParamSet:
    out = {}
    for pname, t in params.items():
        if pname == name:
            arr = t.array.copy()
            arr.flat[index] += delta
            out[pname] = Tensor._wrap(arr)
        else:
            out[pname] = t
    return ParamSet(out)


def finite_diff_coordinate(
    f: Callable[[ParamSet], float], params: ParamSet, name: str, index: int, h: float
) -> float:
    """Central difference of ``f`` along one flat coordinate of one tensor."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    plus = f(_replace_coordinate(params, name, index, +h))
    minus = f(_replace_coordinate(params, name, index, -h))
    return (plus - minus) / (2.0 * h)


def finite_diff_grad(
    f: Callable[[ParamSet], float], params: ParamSet, h: float
) -> ParamSet:
    """Full central-difference gradient ``(f(w + h e) - f(w - h e)) / 2h``.

    Independent of the reverse-mode path; used as the oracle against it.
    Cost is two evaluations of ``f`` per coordinate, so reserve this for
    small parameter sets and sample coordinates elsewhere.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    grads = {}
    for name, t in params.items():
        g = np.zeros(t.size)
        for i in range(t.size):
            g[i] = finite_diff_coordinate(f, params, name, i, h)
        grads[name] = Tensor._wrap(g.reshape(t.shape))
    return ParamSet(grads)


def sgd_step(
    params: ParamSet,
    grads: ParamSet,
    lr: float,
    clip_norm: float,
    clip_mode: str = "norm",
) -> ParamSet:
    """One gradient-descent update with gradient clipping.

    ``clip_mode="norm"`` rescales the whole gradient when its global L2
    norm exceeds ``clip_norm`` (the default); ``"element"`` clamps each
    entry into ``[-clip_norm, clip_norm]`` instead. When no clipping
    triggers the update is exactly ``w - lr * g``.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if clip_norm <= 0:
        raise ValueError("clip threshold must be positive")
    if clip_mode not in ("norm", "element"):
        raise ValueError(f"unknown clip_mode {clip_mode!r}")
    params.require_congruent(grads, "sgd_step")

    if clip_mode == "element":
        return params.map_arrays(
            lambda name, w: w - lr * np.clip(grads[name].array, -clip_norm, clip_norm)
        )
    gnorm = grads.global_norm()
    if gnorm > clip_norm:
        coef = clip_norm / gnorm
        return params.map_arrays(lambda name, w: w - lr * (grads[name].array * coef))
    return params.map_arrays(lambda name, w: w - lr * grads[name].array)
