"""Minimal dense-tensor engine with reverse-mode differentiation.

Everything runs on numpy arrays. A Tensor wraps one ndarray plus an
optional gradient buffer and a link to the op that produced it, which is
enough to drive reverse-mode backprop over the small op set the encoder
needs: matmul, additions, softmax, layer norm, GELU, embedding gather,
cross-entropy, dropout, and the reshape/transpose plumbing between them.

Float64 is used by verification code, float32 by training; the dtype is
carried by the arrays themselves.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2/pi), tanh-approximation constant
GELU_A = 0.044715
LAYER_NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes incompatible for an operation."""


def _shape_error(op: str, *shapes) -> ShapeError:
    described = " vs ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible shapes {described}")


class Tensor:
    """Dense array node in the computation graph.

    `parents` and `backward_fn` record provenance for reverse traversal;
    leaves created with requires_grad=True accumulate into `grad`.
    """

    __slots__ = ("values", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, values, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.values = values if isinstance(values, np.ndarray) else np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.values.shape}, dtype={self.values.dtype})"


def tensor(values, dtype=np.float64) -> Tensor:
    """Constant tensor (no gradient)."""
    return Tensor(np.asarray(values, dtype=dtype))


def parameter(values, name: str) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(np.asarray(values), requires_grad=True, name=name)


def _node(values, parents, backward_fn) -> Tensor:
    return Tensor(values, parents=tuple(parents), backward_fn=backward_fn)


# ---------------------------------------------------------------------------
# Forward primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked (N-d) operands must share leading dims exactly."""
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2] or av.shape[:-2] != bv.shape[:-2]:
        raise _shape_error("matmul", av.shape, bv.shape)
    out = np.matmul(av, bv)

    def backward(g):
        ga = np.matmul(g, bv.swapaxes(-1, -2))
        gb = np.matmul(av.swapaxes(-1, -2), g)
        return ga, gb

    return _node(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-d bias broadcast over the last axis."""
    av, bv = a.values, b.values
    if av.shape == bv.shape:
        def backward(g):
            return g, g
    elif bv.ndim == 1 and av.ndim > 1 and av.shape[-1] == bv.shape[0]:
        def backward(g):
            return g, g.reshape(-1, bv.shape[0]).sum(axis=0)
    else:
        raise _shape_error("add", av.shape, bv.shape)
    return _node(av + bv, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    c = float(c)

    def backward(g):
        return (g * c,)

    return _node(x.values * c, (x,), backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, shift-invariant via max subtraction."""
    xv = x.values
    if xv.shape[-1] == 0:
        raise _shape_error("softmax", xv.shape)
    e = np.exp(xv - xv.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        # dx_i = y_i * (g_i - sum_j g_j y_j)
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then apply the affine pair."""
    xv = x.values
    d = xv.shape[-1]
    if gain.values.shape != (d,) or bias.values.shape != (d,):
        raise _shape_error("layer_norm", xv.shape, gain.values.shape, bias.values.shape)
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    out = xhat * gain.values + bias.values

    def backward(g):
        dxhat = g * gain.values
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(xv.ndim - 1))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _node(out, (x, gain, bias), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(c*(x + a*x^3)))."""
    xv = x.values
    u = GELU_C * (xv + GELU_A * xv ** 3)
    t = np.tanh(u)

    def backward(g):
        du = GELU_C * (1.0 + 3.0 * GELU_A * xv ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t ** 2) * du),)

    return _node(0.5 * xv * (1.0 + t), (x,), backward)


def tanh(x: Tensor) -> Tensor:
    """Elementwise tanh."""
    t = np.tanh(x.values)

    def backward(g):
        return (g * (1.0 - t ** 2),)

    return _node(t, (x,), backward)


def gather(table: Tensor, ids) -> Tensor:
    """Row lookup `table[ids]`; the gradient scatter-adds onto gathered rows only."""
    ids = np.asarray(ids, dtype=np.intp)
    tv = table.values
    if tv.ndim != 2 or ids.ndim != 1:
        raise _shape_error("gather", tv.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= tv.shape[0]):
        raise IndexError(f"gather: id out of range for table with {tv.shape[0]} rows")

    def backward(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, ids, g)
        return (gt,)

    return _node(tv[ids], (table,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer labels against rows of logits."""
    labels = np.asarray(labels, dtype=np.intp)
    lv = logits.values
    if lv.ndim != 2 or labels.shape != (lv.shape[0],) or lv.shape[0] == 0:
        raise _shape_error("cross_entropy", lv.shape, labels.shape)
    n = lv.shape[0]
    shifted = lv - lv.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(n), labels].mean()

    def backward(g):
        d = np.exp(log_probs)
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return _node(np.asarray(loss, dtype=lv.dtype), (logits,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with an explicit generator; rate 0 is the identity."""
    if rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate {rate} outside [0, 1)")
    keep = (rng.random(x.values.shape) >= rate).astype(x.values.dtype)
    keep /= (1.0 - rate)

    def backward(g):
        return (g * keep,)

    return _node(x.values * keep, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    """View with a new shape (same element count)."""
    old = x.values.shape

    def backward(g):
        return (g.reshape(old),)

    return _node(x.values.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    """Permute axes."""
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _node(x.values.transpose(axes), (x,), backward)


# ---------------------------------------------------------------------------
# Reverse-mode traversal
# ---------------------------------------------------------------------------

def backward(loss: Tensor, seed: float = 1.0) -> None:
    """Backpropagate from a scalar loss, accumulating into leaf `.grad` buffers.

    Each graph node is visited exactly once in reverse topological order.
    Intermediate gradients are transient; only requires_grad leaves keep
    theirs, and repeated calls accumulate (callers zero grads per step).
    """
    if loss.values.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.values.shape}")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.asarray(seed, dtype=loss.values.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.values)
            node.grad += g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params) -> None:
    """Drop gradient buffers on an iterable (or dict) of parameters."""
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.max_rel_error < self.tolerance for e in self.entries)

    @property
    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.max_rel_error >= self.tolerance]

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def summary(self) -> str:
        lines = [f"grad check: {len(self.entries)} parameters, tolerance {self.tolerance:g}"]
        for e in self.entries:
            status = "ok  " if e.max_rel_error < self.tolerance else "FAIL"
            lines.append(f"  {status} {e.name}: max rel err {e.max_rel_error:.3e} at {e.worst_index}")
        return "\n".join(lines)


def grad_check(f, params: dict, step: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of f() against central finite differences.

    `f` must be a deterministic closure over `params` returning a scalar
    Tensor (dropout disabled). Failures are reported, never raised.
    """
    zero_grad(params)
    backward(f())
    analytic = {name: (np.zeros_like(p.values) if p.grad is None else p.grad.copy())
                for name, p in params.items()}

    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        a = analytic[name]
        worst = (0.0, (), 0.0, 0.0)
        flat = p.values.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            up = f().item()
            flat[i] = original - step
            down = f().item()
            flat[i] = original
            numeric = (up - down) / (2.0 * step)
            ana = a.reshape(-1)[i]
            denom = max(abs(ana), abs(numeric), 1e-6)
            rel = abs(ana - numeric) / denom
            if rel >= worst[0]:
                idx = np.unravel_index(i, p.values.shape) if p.values.shape else ()
                worst = (rel, idx, float(ana), numeric)
        report.entries.append(GradCheckEntry(name, worst[0], worst[1], worst[2], worst[3]))
    zero_grad(params)
    return report


# ---------------------------------------------------------------------------
# Tensor dump (checkpoint payload)
# ---------------------------------------------------------------------------
#
# Single-file layout, little-endian throughout:
#   magic "ZTD1" | uint64 manifest length | manifest JSON | raw values
# The manifest lists (name, shape, dtype, offset) with offsets relative to
# the start of the raw section. Round trips are bit-exact.

_MAGIC = b"ZTD1"
_LE_DTYPES = {"<f8", "<f4", "<i8", "<i4"}


def save_tensors(path, arrays: dict) -> None:
    """Write named arrays to one file; entries are sorted by name."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if not arr.flags["C_CONTIGUOUS"]:
            # ascontiguousarray would also promote 0-d to 1-d, so gate it
            arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<").str
        if dtype not in _LE_DTYPES:
            raise ValueError(f"save_tensors: unsupported dtype {arr.dtype} for {name!r}")
        raw = arr.astype(dtype, copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def load_tensors(path) -> dict:
    """Read a tensor dump back into {name: ndarray}."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"load_tensors: bad magic {magic!r} in {path}")
        (length,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(length).decode("utf-8"))
        payload = fh.read()
    out = {}
    for entry in manifest["tensors"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        stop = start + count * dtype.itemsize
        out[entry["name"]] = np.frombuffer(payload[start:stop], dtype=dtype).reshape(shape).copy()
    return out
