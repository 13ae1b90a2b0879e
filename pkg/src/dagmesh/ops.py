"""Operator catalog: shape inference, FLOP counts, and numeric kernels.

Every operator class that may appear in a job definition is described by an
OpDef bundling five rules:

  * output shape from input shapes and kwargs,
  * parameter shapes (empty for non-parametric operators),
  * FLOP count for one forward evaluation of a micro-batch,
  * forward kernel on float64 arrays,
  * backward kernel returning gradients for inputs and parameters.

FLOP counting follows the multiply-accumulate convention: one MAC is two
FLOPs, so a matmul of (m, k) by (k, n) costs 2*m*k*n. Composite blocks
(attention_block, ffn_block, conv) count only their matmul constituents;
softmax, residual adds and bias adds are treated as free, the same way
vendor peak-TFLOPS figures account only for MAC throughput. Standalone
elementwise operators count one FLOP per produced element per input term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import CatalogError

Shape = tuple[int, ...]


def elements(shape: Sequence[int]) -> int:
    return int(math.prod(shape))


def _require_kwargs(op: str, kwargs: dict, allowed: set[str], required: set[str] = frozenset()):
    unknown = set(kwargs) - allowed
    if unknown:
        raise CatalogError(f"{op}: unknown kwargs {sorted(unknown)}")
    missing = required - set(kwargs)
    if missing:
        raise CatalogError(f"{op}: missing kwargs {sorted(missing)}")


def _require_arity(op: str, in_shapes, lo: int, hi: int | None = None):
    n = len(in_shapes)
    if n < lo or (hi is not None and n > hi):
        want = f"{lo}" if hi == lo else f"{lo}..{hi or 'n'}"
        raise CatalogError(f"{op}: expected {want} inputs, got {n}")


def _unbroadcast(grad: np.ndarray, shape: Shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the shape of its source operand."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


@dataclass(frozen=True)
class OpDef:
    """Catalog entry for one operator class."""

    name: str
    has_params: bool
    infer_shape: Callable[[tuple[Shape, ...], dict], Shape]
    param_shapes: Callable[[tuple[Shape, ...], dict], dict[str, Shape]]
    flops: Callable[[tuple[Shape, ...], dict], int]
    forward: Callable[[list[np.ndarray], dict, dict], np.ndarray]
    # backward(inputs, params, out, grad_out, kwargs) -> (input grads, param grads)
    backward: Callable[..., tuple[list[np.ndarray | None], dict[str, np.ndarray]]]
    # matmul constituents as (m, k, n) triples; the basis of the FLOP count
    # for composite blocks and the contract behind flops additivity.
    constituents: Callable[[tuple[Shape, ...], dict], list[tuple[int, int, int]]]


def _mac_flops(triples: list[tuple[int, int, int]]) -> int:
    return sum(2 * m * k * n for m, k, n in triples)


# ---------------------------------------------------------------- elementwise


def _ewise_terms(in_shapes, kwargs) -> int:
    return len(in_shapes) + (1 if "constant" in kwargs else 0)


def _add_shape(in_shapes, kwargs):
    _require_arity("add", in_shapes, 1)
    _require_kwargs("add", kwargs, {"constant"})
    try:
        return tuple(np.broadcast_shapes(*in_shapes))
    except ValueError as exc:
        raise CatalogError(f"add: incompatible shapes {in_shapes}") from exc


def _add_flops(in_shapes, kwargs):
    return (_ewise_terms(in_shapes, kwargs) - 1) * elements(_add_shape(in_shapes, kwargs))


def _add_forward(inputs, params, kwargs):
    out = inputs[0].astype(np.float64, copy=True)
    for x in inputs[1:]:
        out = out + x
    if "constant" in kwargs:
        out = out + float(kwargs["constant"])
    return out


def _add_backward(inputs, params, out, grad, kwargs):
    return [_unbroadcast(grad, x.shape) for x in inputs], {}


def _mul_shape(in_shapes, kwargs):
    _require_arity("multiply", in_shapes, 1)
    _require_kwargs("multiply", kwargs, {"constant"})
    try:
        return tuple(np.broadcast_shapes(*in_shapes))
    except ValueError as exc:
        raise CatalogError(f"multiply: incompatible shapes {in_shapes}") from exc


def _mul_forward(inputs, params, kwargs):
    out = inputs[0].astype(np.float64, copy=True)
    for x in inputs[1:]:
        out = out * x
    if "constant" in kwargs:
        out = out * float(kwargs["constant"])
    return out


def _mul_backward(inputs, params, out, grad, kwargs):
    c = float(kwargs.get("constant", 1.0))
    grads = []
    for i, x in enumerate(inputs):
        g = grad * c
        for j, other in enumerate(inputs):
            if j != i:
                g = g * other
        grads.append(_unbroadcast(g, x.shape))
    return grads, {}


# ---------------------------------------------------------------------- pool


def _pool_shape(in_shapes, kwargs):
    _require_arity("pool", in_shapes, 1, 1)
    _require_kwargs("pool", kwargs, {"kernel_size"})
    (shape,) = in_shapes
    if len(shape) != 4:
        raise CatalogError(f"pool: expected a (batch, channels, h, w) input, got {shape}")
    k = int(kwargs.get("kernel_size", 2))
    b, c, h, w = shape
    if k <= 0 or h % k or w % k:
        raise CatalogError(f"pool: kernel {k} does not evenly divide spatial dims of {shape}")
    return (b, c, h // k, w // k)


def _pool_flops(in_shapes, kwargs):
    k = int(kwargs.get("kernel_size", 2))
    return elements(_pool_shape(in_shapes, kwargs)) * k * k


def _pool_forward(inputs, params, kwargs):
    x = inputs[0]
    k = int(kwargs.get("kernel_size", 2))
    b, c, h, w = x.shape
    return x.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))


def _pool_backward(inputs, params, out, grad, kwargs):
    k = int(kwargs.get("kernel_size", 2))
    g = np.repeat(np.repeat(grad, k, axis=2), k, axis=3) / (k * k)
    return [g], {}


# ---------------------------------------------------------------------- conv


def _conv_geometry(in_shapes, kwargs):
    _require_arity("conv", in_shapes, 1, 1)
    _require_kwargs("conv", kwargs, {"out_channels", "kernel_size", "stride", "padding"},
                    {"out_channels"})
    (shape,) = in_shapes
    if len(shape) != 4:
        raise CatalogError(f"conv: expected a (batch, channels, h, w) input, got {shape}")
    b, cin, h, w = shape
    k = int(kwargs.get("kernel_size", 3))
    s = int(kwargs.get("stride", 1))
    p = int(kwargs.get("padding", 0))
    cout = int(kwargs["out_channels"])
    oh = (h + 2 * p - k) // s + 1
    ow = (w + 2 * p - k) // s + 1
    if k <= 0 or s <= 0 or p < 0 or cout <= 0 or oh <= 0 or ow <= 0:
        raise CatalogError(f"conv: invalid geometry for input {shape} with kwargs {kwargs}")
    return b, cin, h, w, k, s, p, cout, oh, ow


def _conv_shape(in_shapes, kwargs):
    b, _, _, _, _, _, _, cout, oh, ow = _conv_geometry(in_shapes, kwargs)
    return (b, cout, oh, ow)


def _conv_params(in_shapes, kwargs):
    _, cin, _, _, k, _, _, cout, _, _ = _conv_geometry(in_shapes, kwargs)
    return {"weight": (cout, cin, k, k), "bias": (cout,)}


def _conv_constituents(in_shapes, kwargs):
    # im2col turns the convolution into one (b*oh*ow, cin*k*k) x (cin*k*k, cout) matmul
    b, cin, _, _, k, _, _, cout, oh, ow = _conv_geometry(in_shapes, kwargs)
    return [(b * oh * ow, cin * k * k, cout)]


def _conv_patches(x, k, s, p, oh, ow):
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    b, cin = x.shape[:2]
    patches = np.empty((b, cin, k, k, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            patches[:, :, i, j] = xp[:, :, i:i + s * oh:s, j:j + s * ow:s]
    return xp, patches


def _conv_forward(inputs, params, kwargs):
    x = inputs[0]
    b, cin, h, w, k, s, p, cout, oh, ow = _conv_geometry((x.shape,), kwargs)
    _, patches = _conv_patches(x, k, s, p, oh, ow)
    out = np.einsum("bcijhw,ocij->bohw", patches, params["weight"])
    return out + params["bias"][None, :, None, None]


def _conv_backward(inputs, params, out, grad, kwargs):
    x = inputs[0]
    b, cin, h, w, k, s, p, cout, oh, ow = _conv_geometry((x.shape,), kwargs)
    xp, patches = _conv_patches(x, k, s, p, oh, ow)
    gw = np.einsum("bcijhw,bohw->ocij", patches, grad)
    gb = grad.sum(axis=(0, 2, 3))
    gxp = np.zeros_like(xp)
    w_ = params["weight"]
    for i in range(k):
        for j in range(k):
            gxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += np.einsum(
                "bohw,oc->bchw", grad, w_[:, :, i, j])
    gx = gxp[:, :, p:p + h, p:p + w]
    return [gx], {"weight": gw, "bias": gb}


# -------------------------------------------------------------------- linear


def _linear_shape(in_shapes, kwargs):
    _require_arity("linear", in_shapes, 1, 1)
    _require_kwargs("linear", kwargs, {"out_features"}, {"out_features"})
    (shape,) = in_shapes
    if len(shape) < 2:
        raise CatalogError(f"linear: expected at least 2 dims, got {shape}")
    return shape[:-1] + (int(kwargs["out_features"]),)


def _linear_params(in_shapes, kwargs):
    (shape,) = in_shapes
    dout = int(kwargs["out_features"])
    return {"weight": (shape[-1], dout), "bias": (dout,)}


def _linear_constituents(in_shapes, kwargs):
    (shape,) = in_shapes
    return [(elements(shape[:-1]), shape[-1], int(kwargs["out_features"]))]


def _linear_forward(inputs, params, kwargs):
    return inputs[0] @ params["weight"] + params["bias"]


def _linear_backward(inputs, params, out, grad, kwargs):
    x = inputs[0]
    din = x.shape[-1]
    dout = grad.shape[-1]
    x2 = x.reshape(-1, din)
    g2 = grad.reshape(-1, dout)
    gx = grad @ params["weight"].T
    return [gx], {"weight": x2.T @ g2, "bias": g2.sum(axis=0)}


# -------------------------------------------------------------------- concat


def _concat_shape(in_shapes, kwargs):
    _require_arity("concat", in_shapes, 1)
    _require_kwargs("concat", kwargs, set())
    batches = {s[0] for s in in_shapes}
    if len(batches) != 1:
        raise CatalogError(f"concat: mismatched batch dims in {in_shapes}")
    b = in_shapes[0][0]
    # each input is flattened to (batch, -1) and joined along the feature axis
    return (b, sum(elements(s[1:]) for s in in_shapes))


def _concat_forward(inputs, params, kwargs):
    b = inputs[0].shape[0]
    return np.concatenate([x.reshape(b, -1) for x in inputs], axis=1)


def _concat_backward(inputs, params, out, grad, kwargs):
    b = inputs[0].shape[0]
    grads, off = [], 0
    for x in inputs:
        n = elements(x.shape[1:])
        grads.append(grad[:, off:off + n].reshape(x.shape))
        off += n
    return grads, {}


# ------------------------------------------------------------- cross entropy


def _xent_shape(in_shapes, kwargs):
    _require_arity("cross_entropy", in_shapes, 2, 2)
    _require_kwargs("cross_entropy", kwargs, {"weight"})
    target, logits = in_shapes
    if target != logits or len(logits) != 2:
        raise CatalogError(
            f"cross_entropy: expected matching (batch, classes) inputs, got {in_shapes}")
    return ()


def _xent_flops(in_shapes, kwargs):
    # softmax, log and the weighted reduction, roughly six ops per logit
    return 6 * elements(in_shapes[1])


def _log_softmax(logits):
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _xent_forward(inputs, params, kwargs):
    # first input carries the target distribution, second the logits
    target, logits = inputs
    w = float(kwargs.get("weight", 1.0))
    b = logits.shape[0]
    return np.asarray(-(w / b) * (target * _log_softmax(logits)).sum())


def _xent_backward(inputs, params, out, grad, kwargs):
    target, logits = inputs
    w = float(kwargs.get("weight", 1.0))
    b = logits.shape[0]
    ls = _log_softmax(logits)
    p = np.exp(ls)
    mass = target.sum(axis=1, keepdims=True)
    g_logits = grad * (w / b) * (p * mass - target)
    g_target = grad * (-(w / b)) * ls
    return [g_target, g_logits], {}


# ----------------------------------------------------------------- embedding


def _emb_shape(in_shapes, kwargs):
    _require_arity("embedding", in_shapes, 1, 1)
    _require_kwargs("embedding", kwargs, {"num_embeddings", "embedding_dim"},
                    {"num_embeddings", "embedding_dim"})
    (ids,) = in_shapes
    return ids + (int(kwargs["embedding_dim"]),)


def _emb_params(in_shapes, kwargs):
    return {"table": (int(kwargs["num_embeddings"]), int(kwargs["embedding_dim"]))}


def _emb_ids(x, vocab):
    idx = np.rint(x).astype(np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise CatalogError(f"embedding: id out of range [0, {vocab})")
    return idx


def _emb_forward(inputs, params, kwargs):
    idx = _emb_ids(inputs[0], int(kwargs["num_embeddings"]))
    return params["table"][idx]


def _emb_backward(inputs, params, out, grad, kwargs):
    idx = _emb_ids(inputs[0], int(kwargs["num_embeddings"]))
    gt = np.zeros_like(params["table"])
    np.add.at(gt, idx, grad)
    # the lookup is piecewise constant in the ids: no gradient flows to them
    return [None], {"table": gt}


# ----------------------------------------------------------- attention block


def _attn_shape(in_shapes, kwargs):
    _require_arity("attention_block", in_shapes, 1, 1)
    _require_kwargs("attention_block", kwargs, set())
    (shape,) = in_shapes
    if len(shape) != 3:
        raise CatalogError(f"attention_block: expected (batch, seq, hidden), got {shape}")
    return shape


def _attn_params(in_shapes, kwargs):
    h = in_shapes[0][-1]
    return {"wq": (h, h), "wk": (h, h), "wv": (h, h), "wo": (h, h)}


def _attn_constituents(in_shapes, kwargs):
    b, s, h = in_shapes[0]
    # q, k, v and output projections plus the two score/context matmuls
    return [(b * s, h, h)] * 4 + [(b * s, h, s), (b * s, s, h)]


def _attn_forward_state(x, params):
    h = x.shape[-1]
    q = x @ params["wq"]
    k = x @ params["wk"]
    v = x @ params["wv"]
    a = (q @ k.transpose(0, 2, 1)) / math.sqrt(h)
    a = a - a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    p = e / e.sum(axis=-1, keepdims=True)
    c = p @ v
    y = x + c @ params["wo"]
    return y, (q, k, v, p, c)


def _attn_forward(inputs, params, kwargs):
    return _attn_forward_state(inputs[0], params)[0]


def _attn_backward(inputs, params, out, grad, kwargs):
    x = inputs[0]
    h = x.shape[-1]
    q, k, v, p, c = _attn_forward_state(x, params)[1]
    gc = grad @ params["wo"].T
    gwo = np.einsum("bsh,bsd->hd", c, grad)
    gp = gc @ v.transpose(0, 2, 1)
    gv = p.transpose(0, 2, 1) @ gc
    ga = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) / math.sqrt(h)
    gq = ga @ k
    gk = ga.transpose(0, 2, 1) @ q
    gx = grad + gq @ params["wq"].T + gk @ params["wk"].T + gv @ params["wv"].T
    grads = {
        "wq": np.einsum("bsi,bsj->ij", x, gq),
        "wk": np.einsum("bsi,bsj->ij", x, gk),
        "wv": np.einsum("bsi,bsj->ij", x, gv),
        "wo": gwo,
    }
    return [gx], grads


# ----------------------------------------------------------------- ffn block


def _ffn_inner(in_shapes, kwargs):
    return int(kwargs.get("inner_features", 4 * in_shapes[0][-1]))


def _ffn_shape(in_shapes, kwargs):
    _require_arity("ffn_block", in_shapes, 1, 1)
    _require_kwargs("ffn_block", kwargs, {"inner_features"})
    (shape,) = in_shapes
    if len(shape) != 3:
        raise CatalogError(f"ffn_block: expected (batch, seq, hidden), got {shape}")
    return shape


def _ffn_params(in_shapes, kwargs):
    h = in_shapes[0][-1]
    m = _ffn_inner(in_shapes, kwargs)
    return {"w1": (h, m), "w2": (m, h)}


def _ffn_constituents(in_shapes, kwargs):
    b, s, h = in_shapes[0]
    m = _ffn_inner(in_shapes, kwargs)
    return [(b * s, h, m), (b * s, m, h)]


def _ffn_forward_state(x, params):
    u = x @ params["w1"]
    r = np.maximum(u, 0.0)
    return x + r @ params["w2"], (u, r)


def _ffn_forward(inputs, params, kwargs):
    return _ffn_forward_state(inputs[0], params)[0]


def _ffn_backward(inputs, params, out, grad, kwargs):
    x = inputs[0]
    u, r = _ffn_forward_state(x, params)[1]
    gr = grad @ params["w2"].T
    gw2 = np.einsum("bsm,bsh->mh", r, grad)
    gu = gr * (u > 0)
    gx = grad + gu @ params["w1"].T
    gw1 = np.einsum("bsh,bsm->hm", x, gu)
    return [gx], {"w1": gw1, "w2": gw2}


# ------------------------------------------------------------------- catalog


def _no_params(in_shapes, kwargs):
    return {}


def _no_constituents(in_shapes, kwargs):
    return []


CATALOG: dict[str, OpDef] = {
    "add": OpDef("add", False, _add_shape, _no_params, _add_flops,
                 _add_forward, _add_backward, _no_constituents),
    "multiply": OpDef("multiply", False, _mul_shape, _no_params,
                      lambda s, k: (_ewise_terms(s, k) - 1) * elements(_mul_shape(s, k)),
                      _mul_forward, _mul_backward, _no_constituents),
    "pool": OpDef("pool", False, _pool_shape, _no_params, _pool_flops,
                  _pool_forward, _pool_backward, _no_constituents),
    "concat": OpDef("concat", False, _concat_shape, _no_params,
                    lambda s, k: 0, _concat_forward, _concat_backward, _no_constituents),
    "conv": OpDef("conv", True, _conv_shape, _conv_params,
                  lambda s, k: _mac_flops(_conv_constituents(s, k)),
                  _conv_forward, _conv_backward, _conv_constituents),
    "linear": OpDef("linear", True, _linear_shape, _linear_params,
                    lambda s, k: _mac_flops(_linear_constituents(s, k)),
                    _linear_forward, _linear_backward, _linear_constituents),
    "cross_entropy": OpDef("cross_entropy", False, _xent_shape, _no_params, _xent_flops,
                           _xent_forward, _xent_backward, _no_constituents),
    "embedding": OpDef("embedding", True, _emb_shape, _emb_params,
                       lambda s, k: 0, _emb_forward, _emb_backward, _no_constituents),
    "attention_block": OpDef("attention_block", True, _attn_shape, _attn_params,
                             lambda s, k: _mac_flops(_attn_constituents(s, k)),
                             _attn_forward, _attn_backward, _attn_constituents),
    "ffn_block": OpDef("ffn_block", True, _ffn_shape, _ffn_params,
                       lambda s, k: _mac_flops(_ffn_constituents(s, k)),
                       _ffn_forward, _ffn_backward, _ffn_constituents),
}


# (op_class, argument index) pairs whose backward never yields a gradient
NO_ARG_GRAD: frozenset[tuple[str, int]] = frozenset({("embedding", 0)})


def opdef(op_class: str) -> OpDef:
    try:
        return CATALOG[op_class]
    except KeyError:
        raise CatalogError(f"unknown op_class {op_class!r}; known: {sorted(CATALOG)}") from None


def matmul_constituents(op_class: str, in_shapes, kwargs) -> list[tuple[int, int, int]]:
    """The (m, k, n) matmul terms a composite operator expands into."""
    return opdef(op_class).constituents(tuple(in_shapes), dict(kwargs))
