import argparse
import builtins
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

"""
@Data: 2025/5/10
@Desc: 基于 Wengert 列表的反向模式自动微分，以及训练用到的可微算子
"""

logger = logging.getLogger(__name__)

# NaN/Inf rejected on DTensor construction while this is on
CHECKED = True


class DiffMathError(ValueError):
    pass


class ShapeMismatchError(DiffMathError):
    pass


class NonFiniteError(DiffMathError):
    pass


class BackwardBeforeForwardError(DiffMathError):
    pass


@dataclass
class Node:
    op: str
    args: Tuple[int, ...]
    attrs: Dict[str, Any] = field(default_factory=dict)


class DTensor:
    """64-bit array value, optionally bound to a node on a Tape."""

    # let numpy defer binary operators to us
    __array_ufunc__ = None

    def __init__(self, data, tape: Optional["Tape"] = None, tape_id: Optional[int] = None,
                 checked: Optional[bool] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.tape_id = tape_id
        checked = CHECKED if checked is None else checked
        if checked and not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite value in tensor of shape {list(self.data.shape)}")

    @property
    def shape(self) -> List[int]:
        return list(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "DTensor":
        return transpose(self)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        bound = f", node={self.tape_id}" if self.tape is not None else ""
        return f"DTensor(shape={self.shape}{bound})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


Tensorish = Union[DTensor, np.ndarray, float, int, Sequence[float]]


class Tape:
    """Ordered node list; recording an op computes it, so node order is topological."""

    def __init__(self, checked: Optional[bool] = None):
        self.nodes: List[Node] = []
        self.values: List[np.ndarray] = []
        self.adjoints: List[np.ndarray] = []
        self.input_ids: List[int] = []
        self.output_ids: List[int] = []
        self.checked = CHECKED if checked is None else checked
        self.forward_done = False

    def _append(self, node: Node, value: np.ndarray) -> int:
        self.nodes.append(node)
        self.values.append(value)
        self.forward_done = True
        return len(self.nodes) - 1

    def input(self, value, name: Optional[str] = None) -> DTensor:
        arr = np.array(value, dtype=np.float64)
        node_id = self._append(Node("input", (), {"name": name}), arr)
        self.input_ids.append(node_id)
        return DTensor(arr, self, node_id, checked=self.checked)

    def const(self, value) -> DTensor:
        arr = np.array(value, dtype=np.float64)
        node_id = self._append(Node("const", (), {"value": arr}), arr)
        return DTensor(arr, self, node_id, checked=self.checked)

    def lift(self, x) -> DTensor:
        if isinstance(x, DTensor):
            if x.tape is self:
                return x
            if x.tape is not None:
                raise DiffMathError("operand belongs to a different tape")
            return self.const(x.data)
        return self.const(x)

    def mark_output(self, *tensors: DTensor) -> None:
        for t in tensors:
            if not isinstance(t, DTensor) or t.tape is not self:
                raise DiffMathError("outputs must be tensors recorded on this tape")
            self.output_ids.append(t.tape_id)

    @property
    def signature(self) -> List[Tuple[int, ...]]:
        return [self.values[i].shape for i in self.input_ids]

    def __len__(self):
        return len(self.nodes)


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[[List[np.ndarray], Dict[str, Any]], np.ndarray]
    # vjp(g, input values, output value, attrs) -> adjoint per input (None = no gradient)
    vjp: Callable[[np.ndarray, List[np.ndarray], np.ndarray, Dict[str, Any]], List[Optional[np.ndarray]]]
    # kink(input values, attrs, eps, live args) -> True when evaluated within eps of a kink
    kink: Optional[Callable[[List[np.ndarray], Dict[str, Any], float, List[bool]], bool]] = None


PRIMITIVES: Dict[str, Primitive] = {}


def defprimitive(name, forward, vjp, kink=None):
    PRIMITIVES[name] = Primitive(name, forward, vjp, kink)


def _value(x) -> np.ndarray:
    if isinstance(x, DTensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _apply(op: str, args: Sequence[Any], **attrs) -> DTensor:
    prim = PRIMITIVES[op]
    tape = None
    for a in args:
        if isinstance(a, DTensor) and a.tape is not None:
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise DiffMathError(f"{op}: operands recorded on different tapes")

    if tape is None:
        vals = [_value(a) for a in args]
        try:
            return DTensor(prim.forward(vals, attrs))
        except (ValueError, IndexError) as e:
            if isinstance(e, DiffMathError):
                raise
            raise ShapeMismatchError(f"{op}: {e}") from e

    lifted = [tape.lift(a) for a in args]
    vals = [t.data for t in lifted]
    try:
        out = prim.forward(vals, attrs)
    except (ValueError, IndexError) as e:
        if isinstance(e, DiffMathError):
            raise
        raise ShapeMismatchError(f"{op}: {e}") from e
    node_id = tape._append(Node(op, tuple(t.tape_id for t in lifted), attrs), out)
    return DTensor(out, tape, node_id, checked=tape.checked)


def lift(x) -> DTensor:
    return x if isinstance(x, DTensor) else DTensor(x)


def lower(t: DTensor, *originals):
    """Hand back a plain ndarray unless one of the originals was a DTensor."""
    if any(isinstance(o, DTensor) for o in originals):
        return t
    return t.data


def value_of(x) -> np.ndarray:
    return _value(x)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

defprimitive(
    "add",
    lambda v, a: v[0] + v[1],
    lambda g, v, out, a: [_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)],
)
defprimitive(
    "sub",
    lambda v, a: v[0] - v[1],
    lambda g, v, out, a: [_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)],
)
defprimitive(
    "mul",
    lambda v, a: v[0] * v[1],
    lambda g, v, out, a: [_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)],
)
defprimitive(
    "div",
    lambda v, a: v[0] / v[1],
    lambda g, v, out, a: [_unbroadcast(g / v[1], v[0].shape),
                          _unbroadcast(-g * v[0] / (v[1] * v[1]), v[1].shape)],
)


def _matmul_vjp(g, v, out, attrs):
    a, b = v
    if a.ndim == 1 and b.ndim == 1:
        return [g * b, g * a]
    if a.ndim == 1:
        return [g @ b.T, np.outer(a, g)]
    if b.ndim == 1:
        return [np.outer(g, b), a.T @ g]
    return [g @ b.T, a.T @ g]


def _matmul_forward(v, attrs):
    a, b = v
    if a.ndim > 2 or b.ndim > 2:
        raise ShapeMismatchError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    return a @ b


defprimitive("matmul", _matmul_forward, _matmul_vjp)

# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

defprimitive("sin", lambda v, a: np.sin(v[0]), lambda g, v, out, a: [g * np.cos(v[0])])
defprimitive("cos", lambda v, a: np.cos(v[0]), lambda g, v, out, a: [-g * np.sin(v[0])])
defprimitive("exp", lambda v, a: np.exp(v[0]), lambda g, v, out, a: [g * out])
defprimitive("log", lambda v, a: np.log(v[0]), lambda g, v, out, a: [g / v[0]],
             kink=lambda v, a, eps, live: bool(live[0] and np.any(v[0] <= eps)))
defprimitive("sqrt", lambda v, a: np.sqrt(v[0]), lambda g, v, out, a: [g * 0.5 / out],
             kink=lambda v, a, eps, live: bool(live[0] and np.any(v[0] <= eps)))
defprimitive("reciprocal", lambda v, a: 1.0 / v[0], lambda g, v, out, a: [-g * out * out])
# subgradient 0 at 0
defprimitive("abs", lambda v, a: np.abs(v[0]), lambda g, v, out, a: [g * np.sign(v[0])],
             kink=lambda v, a, eps, live: bool(live[0] and np.any(np.abs(v[0]) < eps)))


def _clamp_kink(v, attrs, eps, live):
    if not live[0]:
        return False
    x = v[0]
    return bool(np.any(np.abs(x - attrs["lo"]) < eps) or np.any(np.abs(x - attrs["hi"]) < eps))


defprimitive(
    "clamp",
    lambda v, a: np.clip(v[0], a["lo"], a["hi"]),
    lambda g, v, out, a: [g * ((v[0] > a["lo"]) & (v[0] < a["hi"]))],
    kink=_clamp_kink,
)

# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def _reduced_count(shape, axis):
    if axis is None:
        return int(np.prod(shape)) if len(shape) else 1
    axes = axis if isinstance(axis, tuple) else (axis,)
    return int(np.prod([shape[ax] for ax in axes]))


defprimitive(
    "sum",
    lambda v, a: np.sum(v[0], axis=a["axis"], keepdims=a["keepdims"]),
    lambda g, v, out, a: [_expand_reduced(g, v[0].shape, a["axis"], a["keepdims"])],
)
defprimitive(
    "mean",
    lambda v, a: np.mean(v[0], axis=a["axis"], keepdims=a["keepdims"]),
    lambda g, v, out, a: [_expand_reduced(g, v[0].shape, a["axis"], a["keepdims"])
                          / _reduced_count(v[0].shape, a["axis"])],
)

# ---------------------------------------------------------------------------
# structural (value copies only)
# ---------------------------------------------------------------------------


def _concat_vjp(g, v, out, attrs):
    axis = attrs["axis"]
    sizes = np.cumsum([x.shape[axis] for x in v])[:-1]
    return list(np.split(g, sizes, axis=axis))


defprimitive("concat", lambda v, a: np.concatenate(v, axis=a["axis"]), _concat_vjp)
defprimitive(
    "stack",
    lambda v, a: np.stack(v, axis=a["axis"]),
    lambda g, v, out, a: [np.take(g, i, axis=a["axis"]) for i in range(len(v))],
)


def _take_vjp(g, v, out, attrs):
    x = v[0]
    idx, axis = attrs["indices"], attrs["axis"]
    gx = np.zeros_like(x)
    if np.isscalar(idx) or np.ndim(idx) == 0:
        index = [slice(None)] * x.ndim
        index[axis] = int(idx)
        gx[tuple(index)] += g
        return [gx]
    np.add.at(np.moveaxis(gx, axis, 0), np.asarray(idx), np.moveaxis(g, axis, 0))
    return [gx]


defprimitive("take", lambda v, a: np.take(v[0], a["indices"], axis=a["axis"]), _take_vjp)
defprimitive(
    "reshape",
    lambda v, a: np.reshape(v[0], a["shape"]),
    lambda g, v, out, a: [np.reshape(g, v[0].shape)],
)
defprimitive(
    "transpose",
    lambda v, a: np.transpose(v[0], a["axes"]),
    lambda g, v, out, a: [np.transpose(g, np.argsort(a["axes"]) if a["axes"] is not None else None)],
)

# ---------------------------------------------------------------------------
# bilinear image sampling; (0,0) is the center of the top-left pixel
# ---------------------------------------------------------------------------


def _bilinear_setup(shape, coords):
    H, W = shape[0], shape[1]
    x = coords[:, 0]
    y = coords[:, 1]
    valid = np.isfinite(x) & np.isfinite(y) & (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)
    xc = np.clip(np.nan_to_num(x), 0, W - 1)
    yc = np.clip(np.nan_to_num(y), 0, H - 1)
    x0 = np.minimum(np.floor(xc), max(W - 2, 0)).astype(np.intp)
    y0 = np.minimum(np.floor(yc), max(H - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    return x0, x1, y0, y1, xc - x0, yc - y0, valid


def _bilinear_forward(v, attrs):
    image, coords = v
    x0, x1, y0, y1, fx, fy, valid = _bilinear_setup(image.shape, coords)
    out = (((1 - fx) * (1 - fy))[:, None] * image[y0, x0]
           + (fx * (1 - fy))[:, None] * image[y0, x1]
           + ((1 - fx) * fy)[:, None] * image[y1, x0]
           + (fx * fy)[:, None] * image[y1, x1])
    out[~valid] = 0.0
    return out


def _bilinear_vjp(g, v, out, attrs):
    image, coords = v
    x0, x1, y0, y1, fx, fy, valid = _bilinear_setup(image.shape, coords)
    gv = g * valid[:, None]

    i00, i01, i10, i11 = image[y0, x0], image[y0, x1], image[y1, x0], image[y1, x1]
    dvdx = (1 - fy)[:, None] * (i01 - i00) + fy[:, None] * (i11 - i10)
    dvdy = (1 - fx)[:, None] * (i10 - i00) + fx[:, None] * (i11 - i01)
    g_coords = np.stack([(gv * dvdx).sum(axis=1), (gv * dvdy).sum(axis=1)], axis=1)

    g_image = np.zeros_like(image)
    np.add.at(g_image, (y0, x0), ((1 - fx) * (1 - fy))[:, None] * gv)
    np.add.at(g_image, (y0, x1), (fx * (1 - fy))[:, None] * gv)
    np.add.at(g_image, (y1, x0), ((1 - fx) * fy)[:, None] * gv)
    np.add.at(g_image, (y1, x1), (fx * fy)[:, None] * gv)
    return [g_image, g_coords]


def _bilinear_kink(v, attrs, eps, live):
    if not live[1]:
        return False
    image, coords = v
    valid = sample_validity(image.shape, coords)
    frac = np.abs(coords - np.round(coords))
    return bool(np.any(valid[:, None] & (frac < eps)))


defprimitive("bilinear_sample", _bilinear_forward, _bilinear_vjp, kink=_bilinear_kink)


# ---------------------------------------------------------------------------
# public op functions
# ---------------------------------------------------------------------------

def add(a, b) -> DTensor:
    return _apply("add", (a, b))


def sub(a, b) -> DTensor:
    return _apply("sub", (a, b))


def mul(a, b) -> DTensor:
    return _apply("mul", (a, b))


def div(a, b) -> DTensor:
    return _apply("div", (a, b))


def matmul(a, b) -> DTensor:
    return _apply("matmul", (a, b))


matvec = matmul


def sin(x) -> DTensor:
    return _apply("sin", (x,))


def cos(x) -> DTensor:
    return _apply("cos", (x,))


def exp(x) -> DTensor:
    return _apply("exp", (x,))


def log(x) -> DTensor:
    return _apply("log", (x,))


def sqrt(x) -> DTensor:
    return _apply("sqrt", (x,))


def reciprocal(x) -> DTensor:
    return _apply("reciprocal", (x,))


def abs(x) -> DTensor:
    return _apply("abs", (x,))


def clamp(x, lo: float = -np.inf, hi: float = np.inf) -> DTensor:
    return _apply("clamp", (x,), lo=float(lo), hi=float(hi))


def sum(x, axis=None, keepdims: bool = False) -> DTensor:
    return _apply("sum", (x,), axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False) -> DTensor:
    return _apply("mean", (x,), axis=axis, keepdims=keepdims)


def square(x) -> DTensor:
    return mul(x, x)


def concat(tensors: Sequence[Any], axis: int = 0) -> DTensor:
    return _apply("concat", tuple(tensors), axis=axis)


def stack(tensors: Sequence[Any], axis: int = 0) -> DTensor:
    return _apply("stack", tuple(tensors), axis=axis)


def take(x, indices, axis: int = 0) -> DTensor:
    if not np.isscalar(indices):
        indices = np.asarray(indices, dtype=np.intp)
    return _apply("take", (x,), indices=indices, axis=axis)


def reshape(x, shape) -> DTensor:
    return _apply("reshape", (x,), shape=tuple(shape))


def transpose(x, axes=None) -> DTensor:
    return _apply("transpose", (x,), axes=tuple(axes) if axes is not None else None)


def softplus(x) -> DTensor:
    # linear tail above 30 keeps exp finite
    xc = clamp(x, hi=30.0)
    return log(1.0 + exp(xc)) + (x - xc)


def sigmoid(x) -> DTensor:
    return reciprocal(1.0 + exp(-clamp(x, -60.0, 60.0)))


def sample_validity(image_shape, coords) -> np.ndarray:
    coords = _value(coords)
    H, W = image_shape[0], image_shape[1]
    x, y = coords[:, 0], coords[:, 1]
    return np.isfinite(x) & np.isfinite(y) & (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)


def bilinear_sample(image, coords) -> Tuple[DTensor, np.ndarray]:
    """Sample an H×W×C image at M×2 (x, y) pixel coordinates.

    Returns the M×C samples and a per-sample validity flag; out-of-bounds samples
    are zero and carry no gradient.
    """
    img = _value(image)
    if img.ndim != 3 or img.shape[0] == 0 or img.shape[1] == 0 or img.shape[2] == 0:
        raise DiffMathError(f"bilinear_sample needs a non-empty H×W×C image, got {img.shape}")
    c = _value(coords)
    if c.ndim != 2 or c.shape[1] != 2:
        raise ShapeMismatchError(f"coords must be M×2, got {c.shape}")
    out = _apply("bilinear_sample", (image, coords))
    return out, sample_validity(img.shape, c)


# ---------------------------------------------------------------------------
# replay / backward / verification
# ---------------------------------------------------------------------------

def forward(tape: Tape, inputs: Sequence[Any]) -> List[DTensor]:
    """Replay the recorded program with new input values."""
    if len(inputs) != len(tape.input_ids):
        raise ShapeMismatchError(f"tape takes {len(tape.input_ids)} inputs, got {len(inputs)}")

    feed = {}
    for i, (node_id, x) in enumerate(zip(tape.input_ids, inputs)):
        arr = np.array(_value(x), dtype=np.float64)
        expected = tape.values[node_id].shape
        if arr.shape != expected:
            raise ShapeMismatchError(f"input {i}: expected shape {list(expected)}, got {list(arr.shape)}")
        if tape.checked and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"input {i} contains NaN/Inf")
        feed[node_id] = arr

    for idx, node in enumerate(tape.nodes):
        if node.op == "input":
            tape.values[idx] = feed[idx]
        elif node.op == "const":
            tape.values[idx] = node.attrs["value"]
        else:
            vals = [tape.values[a] for a in node.args]
            tape.values[idx] = PRIMITIVES[node.op].forward(vals, node.attrs)

    tape.forward_done = True
    tape.adjoints = []
    return [DTensor(tape.values[i], tape, i, checked=tape.checked) for i in tape.output_ids]


def backward(tape: Tape, output_adjoint=None) -> List[np.ndarray]:
    """Gradients of L = Σ output ⊙ output_adjoint with respect to every tape input."""
    if not tape.forward_done or not tape.values:
        raise BackwardBeforeForwardError("run forward before backward")
    if not tape.output_ids:
        raise DiffMathError("no outputs marked on tape")

    if output_adjoint is None:
        adjoints = [np.ones_like(tape.values[i]) for i in tape.output_ids]
    elif isinstance(output_adjoint, (list, tuple)):
        adjoints = [_value(a) for a in output_adjoint]
    else:
        adjoints = [_value(output_adjoint)]
    if len(adjoints) != len(tape.output_ids):
        raise ShapeMismatchError(f"{len(tape.output_ids)} outputs but {len(adjoints)} adjoints")

    tape.adjoints = [np.zeros_like(v) for v in tape.values]
    for out_id, adj in zip(tape.output_ids, adjoints):
        tape.adjoints[out_id] = tape.adjoints[out_id] + np.broadcast_to(adj, tape.values[out_id].shape)

    live = _live_nodes(tape)
    for idx in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[idx]
        if node.op in ("input", "const") or not live[idx]:
            continue
        g = tape.adjoints[idx]
        if not np.any(g):
            continue
        vals = [tape.values[a] for a in node.args]
        grads = PRIMITIVES[node.op].vjp(g, vals, tape.values[idx], node.attrs)
        for arg, ga in zip(node.args, grads):
            if ga is None:
                continue
            tape.adjoints[arg] = tape.adjoints[arg] + ga

    return [tape.adjoints[i] for i in tape.input_ids]


@dataclass
class GradCheckReport:
    max_rel_error: float
    kinks: List[str]
    probes: int

    @property
    def differentiable(self) -> bool:
        return not self.kinks


def _live_nodes(tape: Tape) -> List[bool]:
    """True for nodes that depend on at least one tape input."""
    live = [False] * len(tape.nodes)
    for idx, node in enumerate(tape.nodes):
        if node.op == "input":
            live[idx] = True
        elif node.op != "const":
            live[idx] = any(live[a] for a in node.args)
    return live


def _find_kinks(tape: Tape, eps: float) -> List[str]:
    live = _live_nodes(tape)
    kinks = []
    for idx, node in enumerate(tape.nodes):
        if node.op in ("input", "const"):
            continue
        live_args = [live[a] for a in node.args]
        prim = PRIMITIVES[node.op]
        if prim.kink is not None and live[idx]:
            vals = [tape.values[a] for a in node.args]
            if prim.kink(vals, node.attrs, eps, live_args):
                kinks.append(f"node {idx} ({node.op})")
    return kinks


def grad_check(tape: Tape, point: Sequence[Any], eps: float = 1e-5, max_probes: Optional[int] = None,
               seed: int = 0, atol: float = 1e-8) -> GradCheckReport:
    """Compare backward() against central differences at `point`.

    Non-scalar outputs are contracted with a fixed random adjoint. The tape is
    left holding the values at `point`.
    """
    base = [np.array(_value(p), dtype=np.float64) for p in point]
    outputs = forward(tape, base)
    rng = np.random.Generator(np.random.Philox(seed))
    weights = [np.ones_like(o.data) if o.data.size == 1 else rng.standard_normal(o.data.shape)
               for o in outputs]
    grads = backward(tape, weights)
    kinks = _find_kinks(tape, eps)

    def objective(arrays):
        outs = forward(tape, arrays)
        return builtins.sum(float(np.sum(o.data * w)) for o, w in zip(outs, weights))

    probes = [(i, j) for i, arr in enumerate(base) for j in range(arr.size)]
    if max_probes is not None and len(probes) > max_probes:
        picked = np.sort(rng.choice(len(probes), size=max_probes, replace=False))
        probes = [probes[k] for k in picked]

    worst = 0.0
    for i, j in probes:
        plus = [a.copy() for a in base]
        minus = [a.copy() for a in base]
        plus[i].flat[j] += eps
        minus[i].flat[j] -= eps
        numeric = (objective(plus) - objective(minus)) / (2.0 * eps)
        analytic = float(grads[i].flat[j])
        err = builtins.abs(analytic - numeric) / max(builtins.abs(analytic), builtins.abs(numeric), atol)
        worst = max(worst, err)

    forward(tape, base)
    backward(tape, weights)
    if kinks:
        logger.warning("grad_check: %d node(s) evaluated near a kink: %s", len(kinks), ", ".join(kinks[:5]))
    return GradCheckReport(worst, kinks, len(probes))


def _self_check(seed: int) -> float:
    rng = np.random.Generator(np.random.Philox(seed))
    worst = 0.0
    for name, build in _PRIMITIVE_PROBES.items():
        tape = Tape()
        xs, out = build(tape, rng)
        tape.mark_output(out)
        report = grad_check(tape, [x.data for x in xs])
        print(f"{name:16s} max rel error {report.max_rel_error:.3e}")
        worst = max(worst, report.max_rel_error)
    return worst


def _probe_binary(fn):
    def build(tape, rng):
        a = tape.input(rng.uniform(0.5, 1.5, (3, 2)))
        b = tape.input(rng.uniform(0.5, 1.5, (3, 2)))
        return [a, b], sum(fn(a, b))
    return build


def _probe_unary(fn, lo=0.3, hi=1.3):
    def build(tape, rng):
        x = tape.input(rng.uniform(lo, hi, (4,)))
        return [x], sum(fn(x))
    return build


def _probe_bilinear(tape, rng):
    image = tape.input(rng.uniform(0, 1, (5, 6, 2)))
    coords = tape.input(rng.uniform(0.2, 3.8, (7, 2)))
    out, _ = bilinear_sample(image, coords)
    return [image, coords], sum(out * out)


_PRIMITIVE_PROBES = {
    "add": _probe_binary(add),
    "sub": _probe_binary(sub),
    "mul": _probe_binary(mul),
    "div": _probe_binary(div),
    "matmul": lambda tape, rng: (lambda a, b: ([a, b], sum(matmul(a, b))))(
        tape.input(rng.normal(size=(3, 4))), tape.input(rng.normal(size=(4, 2)))),
    "sin": _probe_unary(sin),
    "cos": _probe_unary(cos),
    "exp": _probe_unary(exp),
    "log": _probe_unary(log),
    "sqrt": _probe_unary(sqrt),
    "reciprocal": _probe_unary(reciprocal),
    "clamp": _probe_unary(lambda x: clamp(x, 0.0, 1.0), 0.1, 0.9),
    "abs": _probe_unary(abs, 0.2, 1.0),
    "mean": _probe_unary(lambda x: mean(x * x)),
    "bilinear_sample": _probe_bilinear,
}


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="finite-difference check of every primitive")
    parser.add_argument("--seeds", "-s", type=int, default=5)
    args = parser.parse_args()

    overall = max(_self_check(seed) for seed in range(args.seeds))
    print(f"\nWorst relative error over {args.seeds} seeds: {overall:.3e}")
