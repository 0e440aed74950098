"""Dense float64 tensors with a reverse-mode gradient tape.

The tape is the op graph itself: every differentiable operation records
its parent tensors and a backward closure on its output, so construction
order is a topological order and the reverse sweep is deterministic.
Gradients of tensors consumed more than once accumulate by summation.

Shape discipline is strict: elementwise ops require identical shapes and
only the explicit scalar/row variants (scale, add_scalar, add_row)
broadcast. Everything is float64; there is no device or dtype story.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, DimensionError

_GRAD_ENABLED = True

# GELU tanh-approximation constants: 0.5*x*(1 + tanh(C0*(x + C1*x^3)))
_GELU_C0 = math.sqrt(2.0 / math.pi)
_GELU_C1 = 0.044715


class no_grad:
    """Context manager that suspends tape recording (forward-only eval)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class FlopCounter:
    """Counts matmul FLOPs (2*m*n*k per product) while installed."""

    def __init__(self):
        self.flops = 0

    def __enter__(self):
        global _FLOP_COUNTER
        self._prev = _FLOP_COUNTER
        _FLOP_COUNTER = self
        return self

    def __exit__(self, *exc):
        global _FLOP_COUNTER
        _FLOP_COUNTER = self._prev
        return False


_FLOP_COUNTER: FlopCounter | None = None


class Tensor:
    """A dense float64 array plus a gradient slot on the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.item())

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy: g may alias an upstream buffer that is reused
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self, seed_grad=None) -> None:
        """Run the reverse sweep from this tensor.

        Without a seed the tensor must be scalar (seeded with 1). The
        traversal visits every recorded ancestor exactly once, in reverse
        topological order, so repeated runs on an identical graph produce
        bit-identical gradients.
        """
        if seed_grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward without seed needs a scalar, got shape {self.shape}"
                )
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed_grad, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise DimensionError(
                    f"seed gradient shape {seed.shape} != value shape {self.shape}"
                )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self._accumulate(seed)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # Operator sugar; scalars go through the explicit scalar variants.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wants_grad(*tensors: Tensor) -> bool:
    if not _GRAD_ENABLED:
        return False
    for t in tensors:
        if t.requires_grad:
            return True
    return False


def _check_tensor(x, name: str) -> Tensor:
    if not isinstance(x, Tensor):
        raise ContractError(f"{name} must be a Tensor, got {type(x).__name__}")
    return x


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-d tensors."""
    _check_tensor(a, "a")
    _check_tensor(b, "b")
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul needs 2-d operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes do not chain: {a.shape} @ {b.shape}")
    if _FLOP_COUNTER is not None:
        m, k = a.shape
        n = b.shape[1]
        _FLOP_COUNTER.flops += 2 * m * n * k
    out = Tensor(a.data @ b.data)
    if _wants_grad(a, b):
        out.requires_grad = True
        out._parents = (a, b)

        def _bw():
            g = out.grad
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        out._backward = _bw
    return out


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction.

    Backward uses the Jacobian-vector form s * (g - <g, s>) per slice.
    """
    _check_tensor(x, "x")
    if x.data.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last axis, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)
    if _wants_grad(x):
        out.requires_grad = True
        out._parents = (x,)

        def _bw():
            g = out.grad
            dot = (g * s).sum(axis=-1, keepdims=True)
            x._accumulate(s * (g - dot))

        out._backward = _bw
    return out


def attention_core(
    q: Tensor, k: Tensor, v: Tensor, heads: int, weights_out: list | None = None
) -> Tensor:
    """Scaled dot-product attention over all heads in one batched op.

    Inputs are full-width (rows, heads*d_h) projections; the op splits
    them per head, runs softmax(q k^T / sqrt(d_h)) v, and concatenates
    head outputs. Matches running sdpa per width slice, with one tape
    node instead of ~20. Post-softmax weight matrices are appended to
    weights_out (one detached copy per head) when a list is given.
    """
    for name, t in (("q", q), ("k", k), ("v", v)):
        if t.data.ndim != 2:
            raise DimensionError(f"attention {name} must be 2-d, got {t.shape}")
    d = q.shape[1]
    if k.shape[1] != d or v.shape[1] != d:
        raise DimensionError(
            f"attention widths differ: q {q.shape}, k {k.shape}, v {v.shape}"
        )
    if heads < 1 or d % heads != 0:
        raise ContractError(f"heads ({heads}) must divide width ({d})")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"key/value counts differ: {k.shape} vs {v.shape}")
    if k.shape[0] == 0:
        raise ContractError("attention needs at least one key")
    nq, nk = q.shape[0], k.shape[0]
    dh = d // heads
    alpha = 1.0 / math.sqrt(dh)
    q3 = q.data.reshape(nq, heads, dh).transpose(1, 0, 2)
    k3 = k.data.reshape(nk, heads, dh).transpose(1, 0, 2)
    v3 = v.data.reshape(nk, heads, dh).transpose(1, 0, 2)
    if _FLOP_COUNTER is not None:
        _FLOP_COUNTER.flops += 2 * (2 * nq * nk * d)  # q k^T and weights v
    logits = np.matmul(q3, k3.transpose(0, 2, 1)) * alpha
    logits -= logits.max(axis=-1, keepdims=True)
    s = np.exp(logits)
    s /= s.sum(axis=-1, keepdims=True)
    if weights_out is not None:
        for h in range(heads):
            weights_out.append(s[h].copy())
    out = Tensor(np.matmul(s, v3).transpose(1, 0, 2).reshape(nq, d))
    if _wants_grad(q, k, v):
        out.requires_grad = True
        out._parents = (q, k, v)

        def _bw():
            g3 = out.grad.reshape(nq, heads, dh).transpose(1, 0, 2)
            if v.requires_grad:
                dv3 = np.matmul(s.transpose(0, 2, 1), g3)
                v._accumulate(dv3.transpose(1, 0, 2).reshape(nk, d))
            if q.requires_grad or k.requires_grad:
                ds = np.matmul(g3, v3.transpose(0, 2, 1))
                dlog = s * (ds - (ds * s).sum(axis=-1, keepdims=True))
                dlog *= alpha
                if q.requires_grad:
                    dq3 = np.matmul(dlog, k3)
                    q._accumulate(dq3.transpose(1, 0, 2).reshape(nq, d))
                if k.requires_grad:
                    dk3 = np.matmul(dlog.transpose(0, 2, 1), q3)
                    k._accumulate(dk3.transpose(1, 0, 2).reshape(nk, d))

        out._backward = _bw
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine.

    Variance uses the population convention (divide by the axis length).
    """
    _check_tensor(x, "x")
    _check_tensor(gain, "gain")
    _check_tensor(bias, "bias")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} != ({d},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    out = Tensor(xhat * gain.data + bias.data)
    if _wants_grad(x, gain, bias):
        out.requires_grad = True
        out._parents = (x, gain, bias)

        def _bw():
            g = out.grad
            lead = tuple(range(g.ndim - 1))
            if bias.requires_grad:
                bias._accumulate(g.sum(axis=lead))
            if gain.requires_grad:
                gain._accumulate((g * xhat).sum(axis=lead))
            if x.requires_grad:
                gh = g * gain.data
                m1 = gh.mean(axis=-1, keepdims=True)
                m2 = (gh * xhat).mean(axis=-1, keepdims=True)
                x._accumulate(inv * (gh - m1 - xhat * m2))

        out._backward = _bw
    return out


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """Scale the last axis by its root-mean-square, then gain."""
    _check_tensor(x, "x")
    _check_tensor(gain, "gain")
    d = x.shape[-1]
    if gain.shape != (d,):
        raise DimensionError(f"rms_norm gain shape {gain.shape} != ({d},)")
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    xhat = x.data * inv
    out = Tensor(xhat * gain.data)
    if _wants_grad(x, gain):
        out.requires_grad = True
        out._parents = (x, gain)

        def _bw():
            g = out.grad
            if gain.requires_grad:
                gain._accumulate((g * xhat).sum(axis=tuple(range(g.ndim - 1))))
            if x.requires_grad:
                gh = g * gain.data
                m = (gh * x.data).mean(axis=-1, keepdims=True)
                x._accumulate(inv * gh - x.data * (inv**3) * m)

        out._backward = _bw
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op} shapes differ: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_tensor(a, "a")
    _check_tensor(b, "b")
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    if _wants_grad(a, b):
        out.requires_grad = True
        out._parents = (a, b)

        def _bw():
            if a.requires_grad:
                a._accumulate(out.grad)
            if b.requires_grad:
                b._accumulate(out.grad)

        out._backward = _bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_tensor(a, "a")
    _check_tensor(b, "b")
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    if _wants_grad(a, b):
        out.requires_grad = True
        out._parents = (a, b)

        def _bw():
            if a.requires_grad:
                a._accumulate(out.grad)
            if b.requires_grad:
                b._accumulate(-out.grad)

        out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product."""
    _check_tensor(a, "a")
    _check_tensor(b, "b")
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    if _wants_grad(a, b):
        out.requires_grad = True
        out._parents = (a, b)

        def _bw():
            if a.requires_grad:
                a._accumulate(out.grad * b.data)
            if b.requires_grad:
                b._accumulate(out.grad * a.data)

        out._backward = _bw
    return out


def scale(x: Tensor, c: float) -> Tensor:
    _check_tensor(x, "x")
    c = float(c)
    out = Tensor(x.data * c)
    if _wants_grad(x):
        out.requires_grad = True
        out._parents = (x,)

        def _bw():
            x._accumulate(out.grad * c)

        out._backward = _bw
    return out


def add_scalar(x: Tensor, c: float) -> Tensor:
    _check_tensor(x, "x")
    out = Tensor(x.data + float(c))
    if _wants_grad(x):
        out.requires_grad = True
        out._parents = (x,)

        def _bw():
            x._accumulate(out.grad)

        out._backward = _bw
    return out


def add_row(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-d vector to every row of a [..., d] tensor."""
    _check_tensor(x, "x")
    _check_tensor(v, "v")
    if v.data.ndim != 1 or x.shape[-1] != v.shape[0]:
        raise DimensionError(f"add_row: vector {v.shape} does not fit rows of {x.shape}")
    out = Tensor(x.data + v.data)
    if _wants_grad(x, v):
        out.requires_grad = True
        out._parents = (x, v)

        def _bw():
            if x.requires_grad:
                x._accumulate(out.grad)
            if v.requires_grad:
                v._accumulate(out.grad.sum(axis=tuple(range(out.grad.ndim - 1))))

        out._backward = _bw
    return out


def exp(x: Tensor) -> Tensor:
    _check_tensor(x, "x")
    e = np.exp(x.data)
    out = Tensor(e)
    if _wants_grad(x):
        out.requires_grad = True
        out._parents = (x,)

        def _bw():
            x._accumulate(out.grad * e)

        out._backward = _bw
    return out


def sqrt(x: Tensor) -> Tensor:
    _check_tensor(x, "x")
    r = np.sqrt(x.data)
    out = Tensor(r)
    if _wants_grad(x):
        out.requires_grad = True
        out._parents = (x,)

        def _bw():
            x._accumulate(out.grad * (0.5 / r))

        out._backward = _bw
    return out


def gelu(x: Tensor) -> Tensor:
    """GELU with the tanh approximation 0.5*x*(1 + tanh(c0*(x + c1*x^3)))."""
    _check_tensor(x, "x")
    xv = x.data
    sq = xv * xv
    t = np.tanh(_GELU_C0 * (xv + _GELU_C1 * (sq * xv)))
    out = Tensor(0.5 * xv * (1.0 + t))
    if _wants_grad(x):
        out.requires_grad = True
        out._parents = (x,)

        def _bw():
            du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * sq)
            local = 0.5 * (1.0 + t) + (0.5 * xv) * ((1.0 - t * t) * du)
            x._accumulate(out.grad * local)

        out._backward = _bw
    return out


def transpose(x: Tensor) -> Tensor:
    """Transpose of a 2-d tensor."""
    _check_tensor(x, "x")
    if x.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-d tensor, got {x.shape}")
    out = Tensor(x.data.T)
    if _wants_grad(x):
        out.requires_grad = True
        out._parents = (x,)

        def _bw():
            x._accumulate(out.grad.T)

        out._backward = _bw
    return out


def reshape(x: Tensor, new_shape: tuple[int, ...]) -> Tensor:
    _check_tensor(x, "x")
    new_shape = tuple(int(s) for s in new_shape)
    if int(np.prod(new_shape, dtype=np.int64)) != x.data.size:
        raise DimensionError(f"reshape {x.shape} -> {new_shape} changes element count")
    out = Tensor(x.data.reshape(new_shape))
    if _wants_grad(x):
        out.requires_grad = True
        out._parents = (x,)

        def _bw():
            x._accumulate(out.grad.reshape(x.shape))

        out._backward = _bw
    return out


def concat_lastdim(parts: list[Tensor]) -> Tensor:
    """Concatenate tensors along the last axis; leading shapes must match."""
    if not parts:
        raise ContractError("concat_lastdim needs at least one part")
    for p in parts:
        _check_tensor(p, "part")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise DimensionError(
                f"concat_lastdim leading shapes differ: {parts[0].shape} vs {p.shape}"
            )
    out = Tensor(np.concatenate([p.data for p in parts], axis=-1))
    if _GRAD_ENABLED and any(p.requires_grad for p in parts):
        out.requires_grad = True
        out._parents = tuple(parts)
        widths = [p.shape[-1] for p in parts]

        def _bw():
            g = out.grad
            start = 0
            for p, w in zip(parts, widths):
                if p.requires_grad:
                    p._accumulate(g[..., start : start + w])
                start += w

        out._backward = _bw
    return out


def slice_lastdim(x: Tensor, start: int, stop: int) -> Tensor:
    """Take columns [start, stop) of the last axis."""
    _check_tensor(x, "x")
    d = x.shape[-1]
    if not (0 <= start < stop <= d):
        raise DimensionError(f"slice_lastdim [{start}:{stop}) out of range for {x.shape}")
    out = Tensor(x.data[..., start:stop])
    if _wants_grad(x):
        out.requires_grad = True
        out._parents = (x,)

        def _bw():
            g = np.zeros_like(x.data)
            g[..., start:stop] = out.grad
            x._accumulate(g)

        out._backward = _bw
    return out


def sum_all(x: Tensor) -> Tensor:
    """Sum every entry into a scalar tensor."""
    _check_tensor(x, "x")
    out = Tensor(x.data.sum())
    if _wants_grad(x):
        out.requires_grad = True
        out._parents = (x,)

        def _bw():
            x._accumulate(np.full_like(x.data, out.grad))

        out._backward = _bw
    return out


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


def grad_check(f, params: list[Tensor], step: float = 1e-5) -> float:
    """Worst relative error of tape gradients vs central differences.

    f rebuilds and returns the scalar objective from the current values of
    params. Each coordinate is perturbed by +/- step and the analytic
    gradient is compared against (f(p+h) - f(p-h)) / (2h) with denominator
    max(|analytic|, |numeric|, 1e-12).
    """
    for p in params:
        _check_tensor(p, "param")
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ContractError(f"grad_check objective must be scalar, got {out.shape}")
    out.backward()
    analytic = [
        np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params
    ]
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                f_plus = f().item()
                flat[i] = orig - step
                f_minus = f().item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                denom = max(abs(gflat[i]), abs(numeric), 1e-12)
                err = abs(gflat[i] - numeric) / denom
                if err > worst:
                    worst = err
    return worst


_TNS_MAGIC = b"TNS1"


def write_tns(path, array) -> None:
    """Write an array as magic 'TNS1', u8 rank, u64-LE extents, f64-LE payload."""
    arr = np.asarray(array, dtype=np.float64)
    if not arr.flags["C_CONTIGUOUS"]:
        # ascontiguousarray would promote rank 0 to rank 1; 0-d is always contiguous
        arr = np.ascontiguousarray(arr)
    if arr.ndim > 255:
        raise ContractError(f"tns rank cap is 255, got {arr.ndim}")
    with open(path, "wb") as fh:
        fh.write(_TNS_MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype("<f8").tobytes())


def read_tns(path) -> np.ndarray:
    """Read a .tns file back into a float64 array, validating the framing."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 5 or blob[:4] != _TNS_MAGIC:
        raise DataError(f"{path}: missing TNS1 magic")
    rank = blob[4]
    header_end = 5 + 8 * rank
    if len(blob) < header_end:
        raise DataError(f"{path}: truncated extent table")
    extents = struct.unpack(f"<{rank}Q", blob[5:header_end])
    count = int(np.prod(extents, dtype=np.int64)) if rank else 1
    payload = blob[header_end:]
    if len(payload) != 8 * count:
        raise DataError(
            f"{path}: payload is {len(payload)} bytes, extents {extents} need {8 * count}"
        )
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return arr.reshape(extents)
