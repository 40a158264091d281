"""Differentiable operations: layers, activations, shaping, and losses.

Every op computes eagerly on numpy arrays, wraps the result in a Tensor
and registers a backward closure on the active tape.  Convolutions are
im2col + GEMM; their input gradients run a kernel-offset scatter loop
(at most k^nd iterations), which keeps accumulation order fixed and the
whole engine deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import NumericError, ShapeMismatchError, Tensor, record_op


def constant(values, dtype=None):
    return Tensor(values, requires_grad=False, dtype=dtype)


def parameter(values, dtype=None):
    return Tensor(values, requires_grad=True, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def add(a, b):
    _check_same_shape(a, b, "add")
    out = Tensor(a.values + b.values)

    def bwd(g):
        a.accumulate_grad(g)
        b.accumulate_grad(g)

    return record_op(out, (a, b), bwd, "add")


def sub(a, b):
    _check_same_shape(a, b, "sub")
    out = Tensor(a.values - b.values)

    def bwd(g):
        a.accumulate_grad(g)
        b.accumulate_grad(-g)

    return record_op(out, (a, b), bwd, "sub")


def mul(a, b):
    _check_same_shape(a, b, "mul")
    out = Tensor(a.values * b.values)

    def bwd(g):
        a.accumulate_grad(g * b.values)
        b.accumulate_grad(g * a.values)

    return record_op(out, (a, b), bwd, "mul")


def scale(x, c):
    c = float(c)
    out = Tensor(x.values * np.asarray(c, dtype=x.dtype))

    def bwd(g):
        x.accumulate_grad(g * np.asarray(c, dtype=x.dtype))

    return record_op(out, (x,), bwd, "scale")


def relu(x):
    out = Tensor(np.maximum(x.values, 0))

    def bwd(g):
        x.accumulate_grad(g * (x.values > 0))

    return record_op(out, (x,), bwd, "relu")


def sigmoid(x):
    v = x.values
    out_v = np.empty_like(v)
    pos = v >= 0
    out_v[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out_v[~pos] = ev / (1.0 + ev)
    out = Tensor(out_v)

    def bwd(g):
        x.accumulate_grad(g * out_v * (1.0 - out_v))

    return record_op(out, (x,), bwd, "sigmoid")


def tanh(x):
    out_v = np.tanh(x.values)
    out = Tensor(out_v)

    def bwd(g):
        x.accumulate_grad(g * (1.0 - out_v * out_v))

    return record_op(out, (x,), bwd, "tanh")


# ---------------------------------------------------------------------------
# shaping
# ---------------------------------------------------------------------------

def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    out = Tensor(x.values.reshape(shape))

    def bwd(g):
        x.accumulate_grad(g.reshape(x.shape))

    return record_op(out, (x,), bwd, "reshape")


def permute(x, axes):
    axes = tuple(int(a) for a in axes)
    inv = tuple(int(a) for a in np.argsort(axes))
    out = Tensor(x.values.transpose(axes))

    def bwd(g):
        x.accumulate_grad(g.transpose(inv))

    return record_op(out, (x,), bwd, "permute")


def concat(tensors, axis):
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.values for t in tensors], axis=axis))
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            t.accumulate_grad(p)

    return record_op(out, tuple(tensors), bwd, "concat")


def narrow(x, axis, start, length):
    """Contiguous slice `[start, start+length)` along one axis."""
    sl = [slice(None)] * x.values.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = Tensor(x.values[sl])

    def bwd(g):
        gx = np.zeros_like(x.values)
        gx[sl] = g
        x.accumulate_grad(gx)

    return record_op(out, (x,), bwd, "narrow")


def expand_axis(x, axis, size):
    """Insert a new axis and broadcast it to `size` (backward sums it out)."""
    v = np.expand_dims(x.values, axis)
    shape = list(v.shape)
    shape[axis] = size
    out = Tensor(np.broadcast_to(v, shape).copy())

    def bwd(g):
        x.accumulate_grad(g.sum(axis=axis))

    return record_op(out, (x,), bwd, "expand_axis")


def sum_all(x):
    out = Tensor(np.asarray(x.values.sum(), dtype=x.dtype))

    def bwd(g):
        x.accumulate_grad(np.full(x.shape, g, dtype=x.dtype))

    return record_op(out, (x,), bwd, "sum_all")


def mean_all(x):
    n = x.values.size
    out = Tensor(np.asarray(x.values.mean(), dtype=x.dtype))

    def bwd(g):
        x.accumulate_grad(np.full(x.shape, g / n, dtype=x.dtype))

    return record_op(out, (x,), bwd, "mean_all")


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

def dense(x, weights, bias=None):
    """Affine map: (B, n) @ (m, n)^T + (m,)."""
    if x.values.ndim != 2 or weights.values.ndim != 2:
        raise ShapeMismatchError("dense expects 2-d input and weights")
    if x.shape[1] != weights.shape[1]:
        raise ShapeMismatchError(
            f"dense: input width {x.shape[1]} != weight width {weights.shape[1]}")
    y = x.values @ weights.values.T
    if bias is not None:
        if bias.shape != (weights.shape[0],):
            raise ShapeMismatchError(
                f"dense: bias shape {tuple(bias.shape)} != ({weights.shape[0]},)")
        y = y + bias.values
    out = Tensor(y)
    parents = (x, weights) if bias is None else (x, weights, bias)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g @ weights.values)
        if weights.requires_grad:
            weights.accumulate_grad(g.T @ x.values)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))

    return record_op(out, parents, bwd, "dense")


# ---------------------------------------------------------------------------
# convolutions (shared N-d core)
# ---------------------------------------------------------------------------

def _pad_spatial(x, pad, nd):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0)) + ((pad, pad),) * nd)


def _conv_core(x, k, stride, pad):
    nd = x.ndim - 2
    xp = _pad_spatial(x, pad, nd)
    win = sliding_window_view(xp, k.shape[2:], axis=tuple(range(2, 2 + nd)))
    win = win[(slice(None), slice(None)) + (slice(None, None, stride),) * nd]
    batch, chans = x.shape[:2]
    out_sp = win.shape[2:2 + nd]
    perm = (0,) + tuple(range(2, 2 + nd)) + (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    cols = win.transpose(perm).reshape(batch * int(np.prod(out_sp)), -1)
    y = cols @ k.reshape(k.shape[0], -1).T
    y = y.reshape((batch,) + out_sp + (k.shape[0],))
    return np.moveaxis(y, -1, 1)


def _conv_dx(gy, k, stride, pad, x_spatial):
    """Gradient w.r.t. the convolution input; also the transposed-conv forward."""
    nd = gy.ndim - 2
    batch = gy.shape[0]
    chans = k.shape[1]
    out_sp = gy.shape[2:]
    padded = tuple(s + 2 * pad for s in x_spatial)
    gxp = np.zeros((batch, chans) + padded, dtype=gy.dtype)
    for offset in np.ndindex(*k.shape[2:]):
        w = k[(slice(None), slice(None)) + offset]
        contrib = np.moveaxis(np.tensordot(gy, w, axes=([1], [0])), -1, 1)
        sl = tuple(slice(o, o + stride * s, stride) for o, s in zip(offset, out_sp))
        gxp[(slice(None), slice(None)) + sl] += contrib
    if pad == 0:
        return gxp
    inner = tuple(slice(pad, pad + s) for s in x_spatial)
    return gxp[(slice(None), slice(None)) + inner]


def _conv_dk(x, gy, stride, pad, kshape):
    nd = x.ndim - 2
    xp = _pad_spatial(x, pad, nd)
    win = sliding_window_view(xp, kshape[2:], axis=tuple(range(2, 2 + nd)))
    win = win[(slice(None), slice(None)) + (slice(None, None, stride),) * nd]
    batch = x.shape[0]
    out_sp = win.shape[2:2 + nd]
    perm = (0,) + tuple(range(2, 2 + nd)) + (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    cols = win.transpose(perm).reshape(batch * int(np.prod(out_sp)), -1)
    g2 = np.moveaxis(gy, 1, -1).reshape(-1, kshape[0])
    return (g2.T @ cols).reshape(kshape)


def _convnd(x, kernels, bias, stride, pad, nd):
    if x.values.ndim != nd + 2:
        raise ShapeMismatchError(f"conv{nd}d: input must be {nd + 2}-d, got {x.values.ndim}-d")
    if kernels.values.ndim != nd + 2:
        raise ShapeMismatchError(f"conv{nd}d: kernels must be {nd + 2}-d")
    if x.shape[1] != kernels.shape[1]:
        raise ShapeMismatchError(
            f"conv{nd}d: input channels {x.shape[1]} != kernel channels {kernels.shape[1]}")
    if stride < 1:
        raise ValueError(f"conv{nd}d: stride must be >= 1, got {stride}")
    for s, ks in zip(x.shape[2:], kernels.shape[2:]):
        if ks > s + 2 * pad:
            raise ShapeMismatchError(
                f"conv{nd}d: kernel extent {ks} exceeds padded input extent {s + 2 * pad}")
    y = _conv_core(x.values, kernels.values, stride, pad)
    if bias is not None:
        if bias.shape != (kernels.shape[0],):
            raise ShapeMismatchError(
                f"conv{nd}d: bias shape {tuple(bias.shape)} != ({kernels.shape[0]},)")
        y = y + bias.values.reshape((1, -1) + (1,) * nd)
    out = Tensor(y)
    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(_conv_dx(g, kernels.values, stride, pad, x.shape[2:]))
        if kernels.requires_grad:
            kernels.accumulate_grad(_conv_dk(x.values, g, stride, pad, kernels.shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0,) + tuple(range(2, 2 + nd))))

    return record_op(out, parents, bwd, f"conv{nd}d")


def conv2d(x, kernels, bias=None, stride=1, pad=0):
    return _convnd(x, kernels, bias, stride, pad, 2)


def conv3d(x, kernels, bias=None, stride=1, pad=0):
    return _convnd(x, kernels, bias, stride, pad, 3)


def deconv3d(x, kernels, stride=1):
    """Transposed 3-d convolution; output extent = input extent * stride.

    Kernels are (in_channels, out_channels, k, k, k); padding is fixed to
    (k - stride) / 2 so the upsampling factor is exactly `stride`.  The op
    is the exact adjoint of conv3d with the same kernels/stride/padding.
    """
    if x.values.ndim != 5 or kernels.values.ndim != 5:
        raise ShapeMismatchError("deconv3d expects 5-d input and kernels")
    if x.shape[1] != kernels.shape[0]:
        raise ShapeMismatchError(
            f"deconv3d: input channels {x.shape[1]} != kernel in-channels {kernels.shape[0]}")
    if stride < 1:
        raise ValueError(f"deconv3d: stride must be >= 1, got {stride}")
    ksize = kernels.shape[2]
    if (ksize - stride) < 0 or (ksize - stride) % 2 != 0:
        raise ShapeMismatchError(
            f"deconv3d: kernel size {ksize} incompatible with stride {stride} "
            "(need k >= stride and k - stride even)")
    pad = (ksize - stride) // 2
    out_spatial = tuple(s * stride for s in x.shape[2:])
    y = _conv_dx(x.values, kernels.values, stride, pad, out_spatial)
    out = Tensor(y)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(_conv_core(g, kernels.values, stride, pad))
        if kernels.requires_grad:
            kernels.accumulate_grad(_conv_dk(g, x.values, stride, pad, kernels.shape))

    return record_op(out, (x, kernels), bwd, "deconv3d")


def bias_add(x, bias):
    """Per-channel bias over a (B, C, *spatial) tensor."""
    nd = x.values.ndim - 2
    if bias.shape != (x.shape[1],):
        raise ShapeMismatchError(
            f"bias_add: bias shape {tuple(bias.shape)} != ({x.shape[1]},)")
    out = Tensor(x.values + bias.values.reshape((1, -1) + (1,) * nd))

    def bwd(g):
        x.accumulate_grad(g)
        bias.accumulate_grad(g.sum(axis=(0,) + tuple(range(2, 2 + nd))))

    return record_op(out, (x, bias), bwd, "bias_add")


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def max_pool(x, window):
    """Non-overlapping max pooling over all spatial axes.

    Gradient routes to the argmax cell of each window; ties go to the
    lowest linear index, which argmax's first-occurrence rule provides.
    """
    nd = x.values.ndim - 2
    if nd not in (2, 3):
        raise ShapeMismatchError(f"max_pool: expected 2 or 3 spatial dims, got {nd}")
    spatial = x.shape[2:]
    for s in spatial:
        if s % window != 0:
            raise ShapeMismatchError(
                f"max_pool: extent {s} not divisible by window {window}")
    batch, chans = x.shape[:2]
    out_sp = tuple(s // window for s in spatial)
    blocked = (batch, chans) + tuple(v for s in out_sp for v in (s, window))
    perm = (0, 1) + tuple(2 + 2 * i for i in range(nd)) + tuple(3 + 2 * i for i in range(nd))
    inv_perm = tuple(int(a) for a in np.argsort(perm))
    xt = x.values.reshape(blocked).transpose(perm).reshape(
        (batch, chans) + out_sp + (window ** nd,))
    arg = xt.argmax(axis=-1)
    y = np.take_along_axis(xt, arg[..., None], axis=-1)[..., 0]
    out = Tensor(y)

    def bwd(g):
        gw = np.zeros_like(xt)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape((batch, chans) + out_sp + (window,) * nd)
        x.accumulate_grad(gw.transpose(inv_perm).reshape(x.shape))

    return record_op(out, (x,), bwd, "max_pool")


# ---------------------------------------------------------------------------
# patch gather (guidance crops / volume windows)
# ---------------------------------------------------------------------------

def gather_patches(volume, starts, size):
    """Extract zero-padded cubic windows from a (C, D, H, W) volume.

    `starts` is (B, 3) integer window origins (may run out of range on
    either side).  Backward scatters additively into the volume, so
    overlapping windows accumulate correctly.
    """
    starts = np.asarray(starts, dtype=np.int64)
    chans = volume.shape[0]
    dims = volume.shape[1:]
    n = starts.shape[0]
    out_v = np.zeros((n, chans, size, size, size), dtype=volume.dtype)
    spans = []
    for b in range(n):
        src = []
        dst = []
        ok = True
        for ax in range(3):
            s0 = int(starts[b, ax])
            lo = max(s0, 0)
            hi = min(s0 + size, dims[ax])
            if hi <= lo:
                ok = False
                break
            src.append(slice(lo, hi))
            dst.append(slice(lo - s0, hi - s0))
        if not ok:
            spans.append(None)
            continue
        spans.append((tuple(src), tuple(dst)))
        out_v[(b, slice(None)) + tuple(dst)] = volume.values[(slice(None),) + tuple(src)]
    out = Tensor(out_v)

    def bwd(g):
        gx = np.zeros_like(volume.values)
        for b, span in enumerate(spans):
            if span is None:
                continue
            src, dst = span
            gx[(slice(None),) + src] += g[(b, slice(None)) + dst]
        volume.accumulate_grad(gx)

    return record_op(out, (volume,), bwd, "gather_patches")


# ---------------------------------------------------------------------------
# softmax + losses
# ---------------------------------------------------------------------------

def softmax(x, axis=1):
    v = x.values
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x.accumulate_grad(y * (g - dot))

    return record_op(out, (x,), bwd, "softmax")


def softmax_cross_entropy(logits, labels_onehot):
    """Mean cross-entropy of row-wise softmax against one-hot labels."""
    v = logits.values
    if v.ndim != 2:
        raise ShapeMismatchError("softmax_cross_entropy expects (M, K) logits")
    if not np.isfinite(v).all():
        raise NumericError("softmax_cross_entropy: non-finite logits")
    onehot = labels_onehot.values if isinstance(labels_onehot, Tensor) else np.asarray(labels_onehot)
    if onehot.shape != v.shape:
        raise ShapeMismatchError(
            f"softmax_cross_entropy: labels shape {onehot.shape} != logits shape {v.shape}")
    rows = onehot.sum(axis=1)
    if not (np.isin(onehot, (0, 1)).all() and np.all(rows == 1)):
        raise ValueError("softmax_cross_entropy: labels must be one-hot rows")
    m = v.shape[0]
    z = v - v.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -(onehot * logp).sum() / m
    out = Tensor(np.asarray(loss, dtype=v.dtype))
    probs = np.exp(logp)

    def bwd(g):
        logits.accumulate_grad((probs - onehot) * (g / m))

    return record_op(out, (logits,), bwd, "softmax_cross_entropy")


def fit_step_polynomial(degree):
    """Least-squares polynomial fit of the unit step I[x >= 0] on [-1, 1].

    Returns (coeffs, max_fit_error) where `coeffs[k]` multiplies u^k with
    u = (positive score - negative score), i.e. the fit is evaluated at -x
    so that larger score separation gives a smaller value.  Normal
    equations use exact monomial integrals, so the result is deterministic.
    """
    if degree < 1:
        raise ValueError("degree must be >= 1")
    n = degree + 1
    gram = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if (i + j) % 2 == 0:
                gram[i, j] = 2.0 / (i + j + 1)
    rhs = np.array([1.0 / (i + 1) for i in range(n)])
    b = np.linalg.solve(gram, rhs)
    xs = np.linspace(-1.0, 1.0, 4001)
    fit = np.polynomial.polynomial.polyval(xs, b)
    step = (xs >= 0).astype(float)
    max_err = float(np.abs(fit - step).max())
    coeffs = b * ((-1.0) ** np.arange(n))
    return coeffs, max_err


def auc_poly_loss(scores, labels, coeffs, max_pairs=4096, seed=0):
    """Polynomial pairwise ranking surrogate on positive/negative score pairs.

    Averages q(f_pos - f_neg) over all inter-class pairs, where q is the
    polynomial with coefficients `coeffs`; with `fit_step_polynomial`
    coefficients this approximates the fraction of misordered pairs, i.e.
    one minus the rank statistic, so smaller loss means better ranking.
    The exact value is computed from per-class power sums whenever the
    pair count is at most `max_pairs`; beyond that a seeded uniform pair
    sample keeps the estimator unbiased.  Single-class batches contribute
    a constant zero.
    """
    labels = np.asarray(labels).reshape(-1)
    v = scores.values.reshape(-1)
    if labels.shape[0] != v.shape[0]:
        raise ShapeMismatchError("auc_poly_loss: scores and labels length differ")
    coeffs = np.asarray(coeffs, dtype=np.float64)
    deg = len(coeffs) - 1
    idx1 = np.flatnonzero(labels == 1)
    idx0 = np.flatnonzero(labels == 0)
    n1, n0 = idx1.size, idx0.size
    if n0 == 0 or n1 == 0:
        return constant(np.asarray(0.0, dtype=scores.dtype))
    f1 = v[idx1].astype(np.float64)
    f0 = v[idx0].astype(np.float64)

    alpha = np.zeros((deg + 1, deg + 1))
    for k in range(deg + 1):
        for l in range(k + 1):
            alpha[k, l] = coeffs[k] * math.comb(k, l) * ((-1.0) ** (k - l))

    if n0 * n1 <= max_pairs:
        p1 = np.vander(f1, deg + 1, increasing=True)  # (n1, deg+1)
        p0 = np.vander(f0, deg + 1, increasing=True)
        s1 = p1.sum(axis=0)
        s0 = p0.sum(axis=0)
        inv = 1.0 / (n0 * n1)
        # loss = inv * sum_{k,l} alpha[k,l] * s1[l] * s0[k-l]
        a_pos = np.zeros(deg + 1)  # multiplies s1[l]
        b_neg = np.zeros(deg + 1)  # multiplies s0[m]
        for k in range(deg + 1):
            for l in range(k + 1):
                a_pos[l] += alpha[k, l] * s0[k - l]
                b_neg[k - l] += alpha[k, l] * s1[l]
        loss = inv * float(a_pos @ s1)
        g1 = inv * sum(a_pos[l] * l * p1[:, l - 1] for l in range(1, deg + 1))
        g0 = inv * sum(b_neg[m] * m * p0[:, m - 1] for m in range(1, deg + 1))
        if deg == 0:
            g1 = np.zeros_like(f1)
            g0 = np.zeros_like(f0)
    else:
        rng = np.random.default_rng(seed)
        i0 = rng.integers(0, n0, size=max_pairs)
        i1 = rng.integers(0, n1, size=max_pairs)
        u = f1[i1] - f0[i0]
        loss = float(np.polynomial.polynomial.polyval(u, coeffs).mean())
        dq = np.polynomial.polynomial.polyval(
            u, coeffs[1:] * np.arange(1, deg + 1)) / max_pairs
        g1 = np.zeros_like(f1)
        g0 = np.zeros_like(f0)
        np.add.at(g1, i1, dq)
        np.add.at(g0, i0, -dq)

    out = Tensor(np.asarray(loss, dtype=scores.dtype))

    def bwd(g):
        gs = np.zeros(v.shape, dtype=np.float64)
        gs[idx1] = g1
        gs[idx0] = g0
        scores.accumulate_grad((gs * float(g)).reshape(scores.shape).astype(scores.dtype))

    return record_op(out, (scores,), bwd, "auc_poly_loss")


# ---------------------------------------------------------------------------
# LSTM / BLSTM / grid sweeps
# ---------------------------------------------------------------------------

@dataclass
class LSTMParams:
    """One direction of an LSTM: input map, recurrent map, gate bias.

    Gate layout along the first axis is (input, forget, candidate, output),
    each `hidden` wide.
    """
    w_in: Tensor   # (4*hidden, n_in)
    w_rec: Tensor  # (4*hidden, hidden)
    bias: Tensor   # (4*hidden,)


@dataclass
class BLSTMParams:
    fwd: LSTMParams
    bwd: LSTMParams


def lstm_sweep(seq, params, hidden, reverse=False):
    """Run a single-direction LSTM over a (T, B, n) sequence -> (T, B, hidden)."""
    t_len, batch, _ = seq.shape
    h = constant(np.zeros((batch, hidden), dtype=seq.dtype))
    c = constant(np.zeros((batch, hidden), dtype=seq.dtype))
    outs = [None] * t_len
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)
    for t in order:
        x_t = reshape(narrow(seq, 0, t, 1), (batch, seq.shape[2]))
        z = add(dense(x_t, params.w_in, params.bias), dense(h, params.w_rec))
        gi = sigmoid(narrow(z, 1, 0, hidden))
        gf = sigmoid(narrow(z, 1, hidden, hidden))
        gc = tanh(narrow(z, 1, 2 * hidden, hidden))
        go = sigmoid(narrow(z, 1, 3 * hidden, hidden))
        c = add(mul(gf, c), mul(gi, gc))
        h = mul(go, tanh(c))
        outs[t] = reshape(h, (1, batch, hidden))
    return concat(outs, axis=0)


def blstm_layer(seq, params, hidden):
    """Bidirectional LSTM over (T, B, n); concatenates per-step outputs
    of the left-to-right and right-to-left sweeps -> (T, B, 2*hidden)."""
    if seq.shape[0] < 1:
        raise ShapeMismatchError("blstm_layer: sequence length must be >= 1")
    out_f = lstm_sweep(seq, params.fwd, hidden, reverse=False)
    out_b = lstm_sweep(seq, params.bwd, hidden, reverse=True)
    return concat([out_f, out_b], axis=2)


def blstm_grid_sweep(fmap, params, hidden, axis):
    """Sweep a BLSTM along one spatial axis of a (B, C, H, W) map.

    axis=3 runs sequences along W (one per row), axis=2 along H (one per
    column); output is (B, 2*hidden, H, W).
    """
    batch, chans, height, width = fmap.shape
    if axis == 3:
        seq = reshape(permute(fmap, (3, 0, 2, 1)), (width, batch * height, chans))
        out = blstm_layer(seq, params, hidden)
        out = reshape(out, (width, batch, height, 2 * hidden))
        return permute(out, (1, 3, 2, 0))
    if axis == 2:
        seq = reshape(permute(fmap, (2, 0, 3, 1)), (height, batch * width, chans))
        out = blstm_layer(seq, params, hidden)
        out = reshape(out, (height, batch, width, 2 * hidden))
        return permute(out, (1, 3, 0, 2))
    raise ValueError("axis must be 2 or 3")


def renet_block(fmap, v_params, h_params, hidden):
    """Cascaded bidirectional sweeps over a square feature map: first along
    one in-plane axis, then along the other on the first stage's output."""
    if fmap.shape[2] != fmap.shape[3]:
        raise ShapeMismatchError(
            f"renet_block: feature map must be square, got {tuple(fmap.shape[2:])}")
    stage_v = blstm_grid_sweep(fmap, v_params, hidden, axis=3)
    return blstm_grid_sweep(stage_v, h_params, hidden, axis=2)
