"""Differentiable layer toolkit: strided/transposed convolution, batch norm,
activations, linear/embedding layers, BCE loss, and Adam — with analytic
gradients recorded on a dynamic tape.

Everything runs on plain numpy arrays. Layers are pure given (input, params);
inference on frozen parameters is safe from multiple threads, parameter
updates are single-writer.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import (
    DegenerateBatchError,
    GraphNotRecordedError,
    ShapeMismatchError,
)

# When enabled, every op output is checked for NaN/Inf at the layer boundary.
DEBUG_CHECK_FINITE = False


def set_debug_checks(enabled: bool) -> None:
    global DEBUG_CHECK_FINITE
    DEBUG_CHECK_FINITE = bool(enabled)


class Tensor:
    """Array node of a dynamically recorded computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        """Same values, cut off from the recorded graph."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable leaf tensor."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(np.asarray(data), requires_grad=True)
        self.name = name


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, parents: tuple, grad_fn) -> Tensor:
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite values at layer boundary")
    out = Tensor(out_data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss, accumulating ``.grad`` on every
    reachable tensor that requires gradients.

    The recorded graph is released afterwards; a second call without a fresh
    forward pass raises GraphNotRecordedError.
    """
    if loss._grad_fn is None:
        raise GraphNotRecordedError("no recorded forward pass to differentiate")
    if loss.data.size != 1:
        raise ShapeMismatchError(f"loss must be scalar, got shape {loss.data.shape}")

    order: list[Tensor] = []
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._grad_fn is None:
            continue
        grads = node._grad_fn(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
        # Release the graph: a repeated backward() must fail loudly.
        node._parents = ()
        node._grad_fn = None
        if not isinstance(node, Parameter) and node is not loss:
            node.grad = None


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# --- convolution machinery ------------------------------------------------------

def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Sliding k x k windows of a (B, C, H, W) array as a strided view
    (B, C, k, k, OH, OW)."""
    b, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    sb, sc, sh, sw = x.strides
    return as_strided(
        x,
        (b, c, k, k, oh, ow),
        (sb, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Cross-correlate x (B, IC, H, W) with w (OC, IC, k, k)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatchError(f"conv2d: input {x.shape} vs kernel {w.shape}")
    k = w.shape[2]
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if x.shape[2] < k or x.shape[3] < k:
        raise ShapeMismatchError(f"conv2d: kernel {k} larger than padded input {x.shape}")
    cols = _windows(x, k, stride)
    # out[b,o,i,j] = sum_{c,u,v} cols[b,c,u,v,i,j] * w[o,c,u,v]
    out = np.tensordot(cols, w, axes=([1, 2, 3], [1, 2, 3]))  # (B, OH, OW, OC)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_grad_w(x: np.ndarray, dout: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _windows(x, k, stride)
    oh, ow = dout.shape[2], dout.shape[3]
    cols = cols[..., :oh, :ow]
    # dw[o,c,u,v] = sum_{b,i,j} dout[b,o,i,j] * cols[b,c,u,v,i,j]
    return np.tensordot(dout, cols, axes=([0, 2, 3], [0, 4, 5]))


def _scatter_cols(cols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    """Adjoint of _windows: sum sliding-window contributions back onto a
    (B, C, hp, wp) canvas. cols has shape (B, C, k, k, OH, OW).

    Accumulates into a phase-decomposed buffer (one plane per output row/col
    modulo stride) so every block add is contiguous, then interleaves."""
    b, c, k, _, oh, ow = cols.shape
    s = stride
    ph = -(-hp // s)
    pw = -(-wp // s)
    acc = np.zeros((b, c, s, s, ph, pw), dtype=cols.dtype)
    for u in range(k):
        du, pu = divmod(u, s)
        for v in range(k):
            dv, pv = divmod(v, s)
            acc[:, :, pu, pv, du : du + oh, dv : dv + ow] += cols[:, :, u, v]
    full = acc.transpose(0, 1, 4, 2, 5, 3).reshape(b, c, ph * s, pw * s)
    if ph * s == hp and pw * s == wp:
        return full
    return np.ascontiguousarray(full[:, :, :hp, :wp])


def _conv_grad_x(dout: np.ndarray, w: np.ndarray, x_hw: tuple, stride: int, pad: int) -> np.ndarray:
    h, w_ = x_hw
    k = w.shape[2]
    # cols[c,u,v,b,i,j] = sum_o w[o,c,u,v] * dout[b,o,i,j]
    cols = np.tensordot(w, dout, axes=([0], [1]))
    cols = np.ascontiguousarray(cols.transpose(3, 0, 1, 2, 4, 5))
    dx = _scatter_cols(cols, h + 2 * pad, w_ + 2 * pad, stride)
    if pad:
        dx = dx[:, :, pad : pad + h, pad : pad + w_]
    return dx


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Strided 2D convolution (cross-correlation). Output spatial size is
    floor((H + 2p - k) / stride) + 1 per side."""
    x = _as_tensor(x)
    xd, wd = x.data, weight.data
    out = _conv_fwd(xd, wd, stride, padding)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    k = wd.shape[2]

    def grad_fn(g):
        gx = _conv_grad_x(g, wd, xd.shape[2:], stride, padding) if x.requires_grad else None
        gw = _conv_grad_w(xd, g, k, stride, padding) if weight.requires_grad else None
        gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _record(out, parents, grad_fn)


def conv_transpose2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed (fractionally strided) convolution: the exact adjoint of
    conv2d with the same kernel. Output spatial size is
    (H - 1) * stride - 2p + k per side.

    weight has shape (in_channels, out_channels, k, k)."""
    x = _as_tensor(x)
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or xd.shape[1] != wd.shape[0]:
        raise ShapeMismatchError(f"conv_transpose2d: input {xd.shape} vs kernel {wd.shape}")
    b, _, h, w_in = xd.shape
    k = wd.shape[2]
    oh = (h - 1) * stride - 2 * padding + k
    ow = (w_in - 1) * stride - 2 * padding + k
    if oh < 1 or ow < 1:
        raise ShapeMismatchError("conv_transpose2d: output would be empty")

    cols = np.tensordot(wd, xd, axes=([0], [1]))  # (OC, k, k, B, H, W)
    cols = np.ascontiguousarray(cols.transpose(3, 0, 1, 2, 4, 5))
    full = _scatter_cols(cols, oh + 2 * padding, ow + 2 * padding, stride)
    out = full[:, :, padding : padding + oh, padding : padding + ow]
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def grad_fn(g):
        if padding:
            g_pad = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        else:
            g_pad = g
        gx = None
        if x.requires_grad:
            wins = _windows(g_pad, k, stride)[..., :h, :w_in]
            gx = np.tensordot(wins, wd, axes=([1, 2, 3], [1, 2, 3]))
            gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        gw = None
        if weight.requires_grad:
            wins = _windows(g_pad, k, stride)[..., :h, :w_in]
            # gw[ic,oc,u,v] = sum_{b,i,j} x[b,ic,i,j] * g_pad[b,oc,i*s+u,j*s+v]
            gw = np.tensordot(xd, wins, axes=([0, 2, 3], [0, 4, 5]))
        gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _record(out, parents, grad_fn)


# --- normalization and activations ------------------------------------------------


def batch_norm2d(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
    update_running: bool = True,
) -> Tensor:
    """Per-channel batch normalization over (B, H, W) followed by the learned
    affine scale/shift.

    In training mode the batch's own moments are used and (optionally) folded
    into the running statistics; in inference mode the running statistics are
    used. Training requires batch size >= 2.
    """
    x = _as_tensor(x)
    xd = x.data
    if xd.ndim != 4:
        raise ShapeMismatchError(f"batch_norm2d expects (B,C,H,W), got {xd.shape}")
    if training:
        if xd.shape[0] < 2:
            raise DegenerateBatchError("training-mode batch norm needs batch size >= 2")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if update_running:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mean
            running_var *= momentum
            running_var += (1.0 - momentum) * var
    else:
        mean = running_mean.astype(xd.dtype, copy=False)
        var = running_var.astype(xd.dtype, copy=False)

    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
    xhat = (xd - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    out = xhat * gamma.data.reshape(1, -1, 1, 1) + beta.data.reshape(1, -1, 1, 1)

    m = xd.shape[0] * xd.shape[2] * xd.shape[3]

    def grad_fn(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(1, -1, 1, 1)
            if training:
                s1 = gxhat.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
                gx = (inv_std.reshape(1, -1, 1, 1) / m) * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_std.reshape(1, -1, 1, 1)
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), grad_fn)


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    out = np.where(xd >= 0, xd, xd * np.asarray(slope, dtype=xd.dtype))

    def grad_fn(g):
        return (np.where(xd >= 0, g, g * np.asarray(slope, dtype=g.dtype)),)

    return _record(out, (x,), grad_fn)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)

    def grad_fn(g):
        return (g * (1.0 - t * t),)

    return _record(t, (x,), grad_fn)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    s = np.empty_like(xd)
    pos = xd >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    s[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        return (g * s * (1.0 - s),)

    return _record(s, (x,), grad_fn)


def linear(x, weight, bias=None) -> Tensor:
    """x (B, F) @ weight (F, O) + bias (O,)."""
    x = _as_tensor(x)
    xd, wd = x.data, weight.data
    if xd.ndim != 2 or xd.shape[1] != wd.shape[0]:
        raise ShapeMismatchError(f"linear: input {xd.shape} vs weight {wd.shape}")
    out = xd @ wd
    if bias is not None:
        out += bias.data

    def grad_fn(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _record(out, parents, grad_fn)


def embedding(table, indices: np.ndarray) -> Tensor:
    """Row lookup into a (vocab, dim) table; gradient scatter-adds."""
    idx = np.asarray(indices)
    out = table.data[idx]

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(out, (table,), grad_fn)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.data.shape
    out = x.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(old),)

    return _record(out, (x,), grad_fn)


def concat(a, b, axis: int = 1) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = np.concatenate([a.data, b.data], axis=axis)
    na = a.data.shape[axis]

    def grad_fn(g):
        ga, gb = np.split(g, [na], axis=axis)
        return (ga if a.requires_grad else None, gb if b.requires_grad else None)

    return _record(out, (a, b), grad_fn)


def scale_shift(x, scale: float, shift: float = 0.0) -> Tensor:
    """Elementwise x * scale + shift with constant scalars."""
    x = _as_tensor(x)
    sc = np.asarray(scale, dtype=x.data.dtype)
    out = x.data * sc + np.asarray(shift, dtype=x.data.dtype)

    def grad_fn(g):
        return (g * sc,)

    return _record(out, (x,), grad_fn)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"add: {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def grad_fn(g):
        return (g if a.requires_grad else None, g if b.requires_grad else None)

    return _record(out, (a, b), grad_fn)


def mul_const(x, c) -> Tensor:
    """Elementwise product with a constant array (no gradient through c)."""
    x = _as_tensor(x)
    cd = np.asarray(c, dtype=x.data.dtype)
    out = x.data * cd

    def grad_fn(g):
        return (g * cd,)

    return _record(out, (x,), grad_fn)


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.sum())
    shape = x.data.shape

    def grad_fn(g):
        return (np.broadcast_to(g, shape).astype(x.data.dtype),)

    return _record(out, (x,), grad_fn)


def bce_loss(scores, targets, eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy -[t*log(s) + (1-t)*log(1-s)] with scores
    clamped to [eps, 1-eps]."""
    scores = _as_tensor(scores)
    t = np.asarray(targets, dtype=scores.data.dtype)
    s = np.clip(scores.data, eps, 1.0 - eps)
    out = np.asarray(-(t * np.log(s) + (1.0 - t) * np.log1p(-s)).mean())
    n = s.size
    inside = (scores.data > eps) & (scores.data < 1.0 - eps)

    def grad_fn(g):
        gs = (-(t / s) + (1.0 - t) / (1.0 - s)) / n
        gs = np.where(inside, gs, 0.0).astype(scores.data.dtype)
        return (gs * g,)

    return _record(out, (scores,), grad_fn)


# --- layers ----------------------------------------------------------------------


class Conv2d:
    def __init__(self, in_ch, out_ch, k=4, stride=2, padding=1, rng=None,
                 dtype=np.float32, init_std=0.02, name="conv"):
        rng = rng or np.random.default_rng()
        self.stride, self.padding = stride, padding
        self.w = Parameter(rng.normal(0.0, init_std, (out_ch, in_ch, k, k)).astype(dtype),
                           name=f"{name}.w")
        self.b = Parameter(np.zeros(out_ch, dtype=dtype), name=f"{name}.b")

    def __call__(self, x):
        return conv2d(x, self.w, self.b, self.stride, self.padding)

    def params(self):
        return [self.w, self.b]


class ConvTranspose2d:
    def __init__(self, in_ch, out_ch, k=4, stride=2, padding=1, rng=None,
                 dtype=np.float32, init_std=0.02, name="deconv"):
        rng = rng or np.random.default_rng()
        self.stride, self.padding = stride, padding
        self.w = Parameter(rng.normal(0.0, init_std, (in_ch, out_ch, k, k)).astype(dtype),
                           name=f"{name}.w")
        self.b = Parameter(np.zeros(out_ch, dtype=dtype), name=f"{name}.b")

    def __call__(self, x):
        return conv_transpose2d(x, self.w, self.b, self.stride, self.padding)

    def params(self):
        return [self.w, self.b]


class BatchNorm2d:
    def __init__(self, ch, momentum=0.9, eps=1e-5, dtype=np.float32, name="bn"):
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(ch, dtype=dtype), name=f"{name}.gamma")
        self.beta = Parameter(np.zeros(ch, dtype=dtype), name=f"{name}.beta")
        self.running_mean = np.zeros(ch, dtype=dtype)
        self.running_var = np.ones(ch, dtype=dtype)
        self.name = name

    def __call__(self, x, training: bool, update_running: bool = True):
        return batch_norm2d(x, self.gamma, self.beta, self.running_mean,
                            self.running_var, training, self.momentum, self.eps,
                            update_running)

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [(f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]


class Linear:
    def __init__(self, in_f, out_f, rng=None, dtype=np.float32, init_std=0.02,
                 name="linear"):
        rng = rng or np.random.default_rng()
        self.w = Parameter(rng.normal(0.0, init_std, (in_f, out_f)).astype(dtype),
                           name=f"{name}.w")
        self.b = Parameter(np.zeros(out_f, dtype=dtype), name=f"{name}.b")

    def __call__(self, x):
        return linear(x, self.w, self.b)

    def params(self):
        return [self.w, self.b]


class Embedding:
    def __init__(self, vocab, dim, rng=None, dtype=np.float32, init_std=1.0,
                 name="embed"):
        rng = rng or np.random.default_rng()
        self.table = Parameter(rng.normal(0.0, init_std, (vocab, dim)).astype(dtype),
                               name=f"{name}.table")

    def __call__(self, indices):
        return embedding(self.table, indices)

    def params(self):
        return [self.table]


# --- optimizer -------------------------------------------------------------------


class Adam:
    """Adaptive optimizer with bias-corrected first/second moment estimates.

    Defaults follow the stable conv-GAN regime: lr 2e-4, beta1 0.5, beta2 0.999.
    """

    def __init__(self, params, lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        """Apply one update from the gradients currently stored on the params.
        A missing gradient is treated as zero."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = 0.0
            elif g.shape != p.data.shape:
                raise ShapeMismatchError(
                    f"gradient shape {g.shape} != param shape {p.data.shape} ({getattr(p, 'name', '?')})")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def state_arrays(self):
        """(name, array) pairs of the moment accumulators, in param order."""
        out = []
        for p, m, v in zip(self.params, self.m, self.v):
            out.append((f"m.{p.name}", m))
            out.append((f"v.{p.name}", v))
        return out
