"""A small dense-tensor engine with reverse-mode differentiation.

Only the operations needed by the attention pipeline are provided. Tensors
are numpy arrays (NCHW for images, N x D for flat features) plus the graph
bookkeeping needed to replay adjoints in reverse order.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, List, Optional, Sequence

import numpy as np

from .errors import DimensionError, GraphStateError, ContractError, NumericError

PRECISIONS = {"single": np.float32, "double": np.float64}

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def as_dtype(precision: str):
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ContractError(f"unknown precision {precision!r}") from None


class Tensor:
    """A node in a differentiation graph.

    Leaves are created directly; interior nodes come from the op functions
    in this module (or :meth:`from_op` for custom ops).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"
        self._consumed = False

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str = "custom"):
        """Build an interior node.

        ``backward`` maps the output adjoint to one adjoint per parent (None
        for parents that need no gradient).
        """
        out = cls(data)
        _check_same_dtype(parents)
        if out.data.dtype != parents[0].data.dtype:
            out.data = out.data.astype(parents[0].data.dtype)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        out._op = op
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # arithmetic used by the loss assembly
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor*tensor: use broadcast_mul")
        return scale(self, float(other))

    __rmul__ = __mul__


def _check_same_dtype(tensors: Iterable[Tensor]) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ContractError(f"mixed precision in one graph: {sorted(str(d) for d in dtypes)}")


def _check_finite(x: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{name}: non-finite values in input")


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    The graph is released afterwards, so a second call raises.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphStateError("backward already ran on this graph")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")

    order = _topo_order(loss)
    adjoints = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in adjoints:
                adjoints[key] = adjoints[key] + pg
            else:
                adjoints[key] = pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True
    loss._consumed = True


# ----------------------------------------------------------------------------
# elementwise


# when not None, every relu appends its active-set mask here (see record_kinks)
_KINK_LOG: Optional[List[np.ndarray]] = None


@contextmanager
def record_kinks() -> Iterator[List[np.ndarray]]:
    """Collect the relu active-set masks produced inside the block.

    Finite-difference checks use this to spot probes that cross a kink.
    """
    global _KINK_LOG
    prev, _KINK_LOG = _KINK_LOG, []
    try:
        yield _KINK_LOG
    finally:
        _KINK_LOG = prev


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _KINK_LOG is not None:
        _KINK_LOG.append(mask)
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    # saturated logits would round to exactly 0 or 1; keep the open interval
    fi = np.finfo(z.dtype)
    np.clip(out, fi.tiny, 1.0 - fi.epsneg, out=out)

    def bw(g):
        return (g * out * (1.0 - out),)

    return Tensor.from_op(out, (x,), bw, "sigmoid")


def pointwise(x: Tensor, fn: str) -> Tensor:
    if fn == "relu":
        return relu(x)
    if fn == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown pointwise fn {fn!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(x: Tensor, c: float) -> Tensor:
    return Tensor.from_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def broadcast_mul(features: Tensor, amap: Tensor) -> Tensor:
    """features[n,c,h,w] * amap[n,0,h,w]."""
    f, m = features.data, amap.data
    if f.ndim != 4 or m.ndim != 4:
        raise DimensionError("broadcast_mul expects two 4-d tensors")
    if m.shape[1] != 1:
        raise DimensionError(f"broadcast_mul: map channel axis must be 1, got {m.shape[1]}")
    for axis, name in ((0, "batch"), (2, "height"), (3, "width")):
        if f.shape[axis] != m.shape[axis]:
            raise DimensionError(f"broadcast_mul: {name} axis mismatch {f.shape[axis]} vs {m.shape[axis]}")

    def bw(g):
        gf = g * m if features.requires_grad else None
        gm = (g * f).sum(axis=1, keepdims=True) if amap.requires_grad else None
        return gf, gm

    return Tensor.from_op(f * m, (features, amap), bw, "broadcast_mul")


# ----------------------------------------------------------------------------
# linear maps


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int) -> Tensor:
    """Stride-1 cross-correlation (no kernel flip), square kernel."""
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d: input must be N x C x H x W, got {x.shape}")
    n, cin, h, w = x.shape
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv2d: weight must be Cout x Cin x k x k, got {weight.shape}")
    cout, wcin, k, _ = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv2d: channel axis mismatch, input has {cin}, weight expects {wcin}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias axis must have length {cout}, got {bias.shape}")
    _check_finite(x.data, "conv2d")
    ho, wo = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {k} too large for {h}x{w} with padding {padding}")

    # im2col in channels-last layout; column order is (di, dj, c)
    xh = x.data.transpose(0, 2, 3, 1)
    if padding:
        xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    offsets = [(i, j) for i in range(k) for j in range(k)]
    if k == 1:
        cols = np.ascontiguousarray(xh).reshape(n * ho * wo, cin)
    else:
        cols = np.concatenate([xh[:, i:i + ho, j:j + wo, :] for i, j in offsets], axis=-1)
        cols = cols.reshape(n * ho * wo, k * k * cin)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cout, k * k * cin)
    out = cols @ wmat.T + bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = None
        if weight.requires_grad:
            gw = (gm.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        gb = gm.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, ho, wo, k * k, cin)
            if k == 1:
                gxh = gcols[:, :, :, 0, :]
            else:
                gxh = np.zeros(xh.shape, dtype=g.dtype)
                for idx, (i, j) in enumerate(offsets):
                    gxh[:, i:i + ho, j:j + wo, :] += gcols[:, :, :, idx, :]
            if padding:
                gxh = gxh[:, padding:padding + h, padding:padding + w, :]
            gx = gxh.transpose(0, 3, 1, 2)
        return gx, gw, gb

    return Tensor.from_op(out, (x, weight, bias), bw, "conv2d")


def patch_embed(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Non-overlapping p x p patches projected to Cout channels (kernel p, stride p)."""
    n, cin, h, w = x.shape
    cout, wcin, p, p2 = weight.shape
    if wcin != cin or p != p2:
        raise DimensionError(f"patch_embed: weight {weight.shape} incompatible with input {x.shape}")
    if h % p or w % p:
        raise DimensionError(f"patch_embed: spatial size {h}x{w} not divisible by patch {p}")
    _check_finite(x.data, "patch_embed")
    gh, gw_ = h // p, w // p
    cols = x.data.reshape(n, cin, gh, p, gw_, p).transpose(0, 2, 4, 1, 3, 5).reshape(n * gh * gw_, cin * p * p)
    wmat = weight.data.reshape(cout, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, gh, gw_, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = (gm @ wmat).reshape(n, gh, gw_, cin, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(x.shape)
        return gx, gw, gb

    return Tensor.from_op(out, (x, weight, bias), bw, "patch_embed")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"linear: input must be N x D, got {x.shape}")
    if weight.data.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"linear: feature axis mismatch, input D={x.shape[1]}, weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias must have length {weight.shape[0]}, got {bias.shape}")
    xd, wd = x.data, weight.data

    def bw(g):
        return (
            g @ wd if x.requires_grad else None,
            g.T @ xd if weight.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    return Tensor.from_op(xd @ wd.T + bias.data, (x, weight, bias), bw, "linear")


def _merge_gather(x: np.ndarray) -> np.ndarray:
    # N x C x H x W -> N x H/2 x W/2 x 4C, blocks ordered TL, TR, BL, BR
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2)  # n c i dy j dx
    return blocks.transpose(0, 2, 4, 3, 5, 1).reshape(n, h // 2, w // 2, 4 * c)


def patch_merge(x: Tensor, proj_weight: Tensor, proj_bias: Tensor) -> Tensor:
    """Concatenate each 2x2 block (TL, TR, BL, BR) and project 4C -> Cout."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"patch_merge: height and width must be even, got {h}x{w}")
    if proj_weight.shape[1] != 4 * c:
        raise DimensionError(f"patch_merge: projection expects {proj_weight.shape[1]} inputs, block has {4 * c}")
    cout = proj_weight.shape[0]
    cols = _merge_gather(x.data).reshape(-1, 4 * c)
    wd = proj_weight.data
    out = (cols @ wd.T + proj_bias.data).reshape(n, h // 2, w // 2, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = gm.T @ cols if proj_weight.requires_grad else None
        gb = gm.sum(axis=0) if proj_bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wd).reshape(n, h // 2, w // 2, 2, 2, c)  # n i j dy dx c
            gx = gcols.transpose(0, 5, 1, 3, 2, 4).reshape(n, c, h, w)
        return gx, gw, gb

    return Tensor.from_op(out, (x, proj_weight, proj_bias), bw, "patch_merge")


# ----------------------------------------------------------------------------
# reductions


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    area = h * w

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / area, x.shape).copy(),)

    return Tensor.from_op(x.data.mean(axis=(2, 3)), (x,), bw, "global_avg_pool")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean negative log-likelihood of the integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be N x K, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range [0, {k})")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "softmax_cross_entropy")


L1_MODES = ("sum_per_sample", "mean_per_element")


def l1_reduce(amap: Tensor, normalize: str = "sum_per_sample") -> Tensor:
    """Batch-averaged L1 norm of a map; optionally also averaged over pixels."""
    if normalize not in L1_MODES:
        raise ContractError(f"unknown l1 normalization {normalize!r}")
    n = amap.shape[0]
    denom = n if normalize == "sum_per_sample" else amap.data.size
    value = np.abs(amap.data).sum() / denom
    sgn = np.sign(amap.data)

    def bw(g):
        return (sgn * (g / denom),)

    return Tensor.from_op(np.asarray(value, dtype=amap.dtype), (amap,), bw, "l1_reduce")
