"""Minimal dense 4-D tensor type with reverse-mode autodiff.

Everything is float64 NCHW. The operator set is exactly what the gated
search space needs: elementwise math, grouped/dilated conv, batch norm,
pooling, bilinear resize, channel concat/slice, reductions and softmax.
Gradients are recorded on an explicit Tape; accumulation order is tape
order, so forward and backward are bit-reproducible for identical inputs.
"""

import numpy as np

try:  # optional JIT for the depthwise kernels; numpy fallback is equivalent
    from . import _kernels
except Exception:  # pragma: no cover - numba missing or broken
    _kernels = None

__all__ = [
    "Tensor", "Tape", "BatchNormState",
    "ShapeError", "DomainError", "UsageError",
    "elementwise_unary", "silu", "sigmoid", "relu", "square", "log",
    "elementwise_binary", "add", "sub", "mul", "scale",
    "conv2d", "batchnorm2d", "global_avg_pool", "resize_bilinear",
    "concat_channels", "slice_channels", "reduce", "channel_max",
    "softmax", "backward", "grad_check", "count_conv_flops", "zeros",
    "gather_pieces", "concat_rows", "gated_sum",
]


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an op's contract."""


class DomainError(ValueError):
    """Raised when values are outside an op's domain (e.g. log of <= 0)."""


class UsageError(ValueError):
    """Raised when an op is called in a way its contract forbids."""


class Tensor:
    """A dense (N, C, H, W) array of float64 values.

    Tensors are immutable by convention once created; the trainer mutates
    parameter ``.data`` in place between tapes, never during one.
    """

    __slots__ = ("data", "grad_tracked")

    def __init__(self, data, grad_tracked=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be 4-D (N,C,H,W), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"tensor dims must be positive, got {arr.shape}")
        self.data = arr
        self.grad_tracked = grad_tracked

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tracked={self.grad_tracked})"


def zeros(shape):
    return Tensor(np.zeros(shape, dtype=np.float64))


# ---------------------------------------------------------------------------
# Tape

_TAPE = None


class Tape:
    """Append-only record of ops for one forward pass; single-writer.

    Nodes are appended in execution order, which is already a topological
    order, so backward() is a single reversed scan with no graph search.
    """

    __slots__ = ("nodes", "watched")

    def __init__(self):
        self.nodes = []
        self.watched = []

    def __enter__(self):
        global _TAPE
        if _TAPE is not None:
            raise UsageError("tapes cannot nest; one tape per forward pass")
        _TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _TAPE
        _TAPE = None
        for t in self.watched:
            t.grad_tracked = False
        return False

    def watch(self, *tensors):
        """Mark leaves whose gradients backward() should return."""
        for t in tensors:
            if not t.grad_tracked:
                t.grad_tracked = True
                self.watched.append(t)


def _out(data, inputs, rule):
    """Wrap op output; record a node when a tape is live and inputs are tracked."""
    tape = _TAPE
    if tape is not None:
        for t in inputs:
            if t.grad_tracked:
                out = Tensor(data, grad_tracked=True)
                tape.nodes.append((out, inputs, rule()))
                return out
    return Tensor(data)


def backward(tape, root):
    """Reverse sweep over the tape from a scalar root.

    Returns a dict mapping every watched leaf to its gradient array
    (zeros for leaves the root does not depend on). Grad accumulation
    follows tape order exactly.
    """
    if root.data.shape != (1, 1, 1, 1):
        raise UsageError(f"backward root must have shape (1,1,1,1), got {root.shape}")
    grads = {id(root): np.ones((1, 1, 1, 1))}
    for out, inputs, rule in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, rule(g)):
            if gi is None or not inp.grad_tracked:
                continue
            k = id(inp)
            prev = grads.get(k)
            # allocate on accumulate: rules may hand back shared arrays
            grads[k] = gi if prev is None else prev + gi
    return {t: grads.get(id(t), np.zeros_like(t.data)) for t in tape.watched}


# ---------------------------------------------------------------------------
# Elementwise ops

def _sigmoid_values(xd):
    # exp overflow only happens where the sigmoid saturates to exactly 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-xd))


def silu(x):
    xd = x.data
    s = _sigmoid_values(xd)
    data = xd * s
    return _out(data, (x,), lambda: lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def sigmoid(x):
    y = _sigmoid_values(x.data)
    return _out(y, (x,), lambda: lambda g: (g * (y * (1.0 - y)),))


def relu(x):
    xd = x.data
    # subgradient 0 at the kink
    return _out(np.maximum(xd, 0.0), (x,), lambda: lambda g: (g * (xd > 0.0),))


def square(x):
    xd = x.data
    return _out(xd * xd, (x,), lambda: lambda g: (g * (2.0 * xd),))


def log(x):
    xd = x.data
    if np.any(xd <= 0.0):
        idx = tuple(int(i) for i in np.argwhere(xd <= 0.0)[0])
        raise DomainError(f"log: non-positive entry {xd[idx]} at index {idx}")
    return _out(np.log(xd), (x,), lambda: lambda g: (g / xd,))


_UNARY = {"silu": silu, "sigmoid": sigmoid, "relu": relu, "square": square, "log": log}


def elementwise_unary(x, kind):
    try:
        return _UNARY[kind](x)
    except KeyError:
        raise UsageError(f"unknown unary kind {kind!r}") from None


def _check_broadcast(a_shape, b_shape):
    for da, db in zip(a_shape, b_shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"shapes {a_shape} and {b_shape} do not broadcast")
    return tuple(max(da, db) for da, db in zip(a_shape, b_shape))


def _unbroadcast(g, shape):
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def add(a, b):
    _check_broadcast(a.shape, b.shape)
    ash, bsh = a.shape, b.shape
    return _out(a.data + b.data, (a, b),
                lambda: lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a, b):
    _check_broadcast(a.shape, b.shape)
    ash, bsh = a.shape, b.shape
    return _out(a.data - b.data, (a, b),
                lambda: lambda g: (_unbroadcast(g, ash), -_unbroadcast(g, bsh)))


def mul(a, b):
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape
    return _out(ad * bd, (a, b),
                lambda: lambda g: (_unbroadcast(g * bd, ash), _unbroadcast(g * ad, bsh)))


_BINARY = {"add": add, "mul": mul, "sub": sub}


def elementwise_binary(a, b, kind):
    try:
        return _BINARY[kind](a, b)
    except KeyError:
        raise UsageError(f"unknown binary kind {kind!r}") from None


def scale(x, c):
    """y = c * x for a plain python scalar c (c == 1 returns x unchanged)."""
    c = float(c)
    if c == 1.0:
        return x
    return _out(x.data * c, (x,), lambda: lambda g: (g * c,))


# ---------------------------------------------------------------------------
# Convolution

_FLOP_COUNT = None


class count_conv_flops:
    """Context manager counting 2x the multiply-accumulates executed by conv2d.

    The count is derived from realized array shapes at call time, which makes
    it an oracle independent of any analytic cost model. Batch dim included.
    """

    def __init__(self):
        self.count = 0

    def __enter__(self):
        global _FLOP_COUNT
        if _FLOP_COUNT is not None:
            raise UsageError("conv flop counters cannot nest")
        _FLOP_COUNT = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _FLOP_COUNT
        _FLOP_COUNT = None
        return False


def _pad_hw(x, p):
    if p == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p))
    out[:, :, p:p + h, p:p + w] = x
    return out


def conv2d(x, w, stride=1, padding=0, dilation=1, groups=1):
    """Bias-free 2-D cross-correlation, NCHW, square or rectangular kernels.

    groups follows the usual convention: depthwise is groups == C_in with a
    weight of shape (C_in, 1, K, K). Output spatial size is
    floor((H + 2p - d*(K-1) - 1)/s) + 1 and must be >= 1.
    """
    xd, wd = x.data, w.data
    n, c_in, h, wdt = xd.shape
    c_out, c_in_g, kh, kw = wd.shape
    if c_in % groups or c_out % groups:
        raise ShapeError(f"channels ({c_in}->{c_out}) not divisible by groups={groups}")
    if c_in_g != c_in // groups:
        raise ShapeError(f"weight expects {c_in_g}*{groups} input channels, input has {c_in}")
    h_out = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    w_out = (wdt + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv output {h_out}x{w_out} from input {h}x{wdt}, "
                         f"K=({kh},{kw}) s={stride} p={padding} d={dilation}")
    if _FLOP_COUNT is not None:
        _FLOP_COUNT.count += 2 * n * c_out * c_in_g * kh * kw * h_out * w_out

    geom = (stride, padding, dilation, groups, h_out, w_out)
    data = _conv_fwd(xd, wd, geom)

    def make_rule():
        xt, wt = x.grad_tracked, w.grad_tracked

        def rule(g):
            gx = _conv_bwd_x(g, wd, xd.shape, geom) if xt else None
            gw = _conv_bwd_w(g, xd, wd.shape, geom) if wt else None
            return (gx, gw)
        return rule

    return _out(data, (x, w), make_rule)


def _slice_hw(xp, kh, kw, stride, dilation, h_out, w_out):
    return xp[:, :,
              kh * dilation: kh * dilation + (h_out - 1) * stride + 1: stride,
              kw * dilation: kw * dilation + (w_out - 1) * stride + 1: stride]


def _conv_fwd(xd, wd, geom):
    stride, padding, dilation, groups, h_out, w_out = geom
    n, c_in = xd.shape[:2]
    c_out, c_in_g, kh, kw = wd.shape
    xp = _pad_hw(xd, padding)

    if kh == 1 and kw == 1 and groups == 1:
        xs = _slice_hw(xp, 0, 0, stride, dilation, h_out, w_out)
        out = np.matmul(wd.reshape(c_out, c_in), xs.reshape(n, c_in, h_out * w_out))
        return out.reshape(n, c_out, h_out, w_out)

    if groups == c_in and c_out == c_in:  # depthwise, multiplier 1
        out = np.empty((n, c_in, h_out, w_out))
        wk = np.ascontiguousarray(wd.reshape(c_in, kh, kw))
        if _kernels is not None:
            _kernels.dw_fwd(np.ascontiguousarray(xp), wk, stride, dilation, out)
            return out
        out[...] = 0.0
        for i in range(kh):
            for j in range(kw):
                out += _slice_hw(xp, i, j, stride, dilation, h_out, w_out) \
                    * wk[:, i, j].reshape(1, c_in, 1, 1)
        return out

    # general path: im2col + one matmul per group
    cols = np.empty((n, c_in, kh * kw, h_out * w_out))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i * kw + j] = _slice_hw(
                xp, i, j, stride, dilation, h_out, w_out).reshape(n, c_in, -1)
    if groups == 1:
        out = np.matmul(wd.reshape(c_out, c_in * kh * kw),
                        cols.reshape(n, c_in * kh * kw, -1))
        return out.reshape(n, c_out, h_out, w_out)
    c_og = c_out // groups
    out = np.empty((n, c_out, h_out * w_out))
    for gidx in range(groups):
        wg = wd[gidx * c_og:(gidx + 1) * c_og].reshape(c_og, c_in_g * kh * kw)
        cg = cols[:, gidx * c_in_g:(gidx + 1) * c_in_g].reshape(n, c_in_g * kh * kw, -1)
        out[:, gidx * c_og:(gidx + 1) * c_og] = np.matmul(wg, cg)
    return out.reshape(n, c_out, h_out, w_out)


def _conv_bwd_x(g, wd, x_shape, geom):
    stride, padding, dilation, groups, h_out, w_out = geom
    n, c_in, h, wdt = x_shape
    c_out, c_in_g, kh, kw = wd.shape
    gxp = np.zeros((n, c_in, h + 2 * padding, wdt + 2 * padding))
    depthwise = groups == c_in and c_out == c_in
    if depthwise and _kernels is not None:
        _kernels.dw_bwd_x(np.ascontiguousarray(g),
                          np.ascontiguousarray(wd.reshape(c_in, kh, kw)),
                          stride, dilation, gxp)
        if padding:
            return gxp[:, :, padding:padding + h, padding:padding + wdt].copy()
        return gxp
    gl = g.reshape(n, c_out, h_out * w_out)
    c_og = c_out // groups
    for i in range(kh):
        for j in range(kw):
            if depthwise:
                t = g * wd[:, 0, i, j].reshape(1, c_in, 1, 1)
            elif groups == 1:
                t = np.matmul(wd[:, :, i, j].T, gl).reshape(n, c_in, h_out, w_out)
            else:
                t = np.empty((n, c_in, h_out * w_out))
                for gidx in range(groups):
                    t[:, gidx * c_in_g:(gidx + 1) * c_in_g] = np.matmul(
                        wd[gidx * c_og:(gidx + 1) * c_og, :, i, j].T,
                        gl[:, gidx * c_og:(gidx + 1) * c_og])
                t = t.reshape(n, c_in, h_out, w_out)
            view = _slice_hw(gxp, i, j, stride, dilation, h_out, w_out)
            view += t
    if padding:
        return gxp[:, :, padding:padding + h, padding:padding + wdt].copy()
    return gxp


def _conv_bwd_w(g, xd, w_shape, geom):
    stride, padding, dilation, groups, h_out, w_out = geom
    n, c_in = xd.shape[:2]
    c_out, c_in_g, kh, kw = w_shape
    xp = _pad_hw(xd, padding)
    gw = np.empty(w_shape)
    depthwise = groups == c_in and c_out == c_in
    if depthwise and _kernels is not None:
        gwk = np.empty((c_in, kh, kw))
        _kernels.dw_bwd_w(np.ascontiguousarray(g), np.ascontiguousarray(xp),
                          stride, dilation, gwk)
        return gwk.reshape(w_shape)
    gl = g.reshape(n, c_out, h_out * w_out)
    c_og = c_out // groups
    for i in range(kh):
        for j in range(kw):
            xs = _slice_hw(xp, i, j, stride, dilation, h_out, w_out)
            if depthwise:
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xs)
            elif groups == 1:
                gw[:, :, i, j] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
            else:
                xl = xs.reshape(n, c_in, -1)
                for gidx in range(groups):
                    gw[gidx * c_og:(gidx + 1) * c_og, :, i, j] = np.einsum(
                        "nol,ncl->oc",
                        gl[:, gidx * c_og:(gidx + 1) * c_og],
                        xl[:, gidx * c_in_g:(gidx + 1) * c_in_g],
                        optimize=True)
    return gw


# ---------------------------------------------------------------------------
# Batch norm

class BatchNormState:
    """Running mean/var buffers for one batchnorm2d site."""

    __slots__ = ("mean", "var")

    def __init__(self, channels):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)


def batchnorm2d(x, gamma, beta, state, mode="train", momentum=0.1, eps_bn=1e-5):
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with biased batch statistics and updates the
    running buffers as run <- (1-momentum)*run + momentum*batch; gradients
    flow through the batch statistics. Eval mode uses the running buffers.

    state is one BatchNormState, or a list of (start, stop, BatchNormState)
    covering the channel axis when several normalization sites are fused
    into one call (per-channel math is unchanged either way).
    """
    xd = x.data
    c = xd.shape[1]
    if gamma.shape != (1, c, 1, 1) or beta.shape != (1, c, 1, 1):
        raise ShapeError(f"batchnorm expects gamma/beta shaped (1,{c},1,1), "
                         f"got {gamma.shape} and {beta.shape}")
    slices = state if isinstance(state, (list, tuple)) else [(0, c, state)]
    if mode == "train":
        mean = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mean
        var = np.mean(xc * xc, axis=(0, 2, 3), keepdims=True)
        invstd = 1.0 / np.sqrt(var + eps_bn)
        xhat = xc * invstd
        mean_c = mean.reshape(c)
        var_c = var.reshape(c)
        for a, b, st in slices:
            st.mean = (1.0 - momentum) * st.mean + momentum * mean_c[a:b]
            st.var = (1.0 - momentum) * st.var + momentum * var_c[a:b]
    elif mode == "eval":
        if len(slices) == 1:
            run_mean, run_var = slices[0][2].mean, slices[0][2].var
        else:
            run_mean = np.concatenate([st.mean for _, _, st in slices])
            run_var = np.concatenate([st.var for _, _, st in slices])
        invstd = (1.0 / np.sqrt(run_var + eps_bn)).reshape(1, c, 1, 1)
        xhat = (xd - run_mean.reshape(1, c, 1, 1)) * invstd
    else:
        raise UsageError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    gd = gamma.data
    data = gd * xhat + beta.data

    def make_rule():
        train = mode == "train"

        def rule(g):
            ggamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True) if gamma.grad_tracked else None
            gbeta = g.sum(axis=(0, 2, 3), keepdims=True) if beta.grad_tracked else None
            if not x.grad_tracked:
                return (None, ggamma, gbeta)
            if train:
                gm = g.mean(axis=(0, 2, 3), keepdims=True)
                gxm = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = (gd * invstd) * (g - gm - xhat * gxm)
            else:
                gx = g * (gd * invstd)
            return (gx, ggamma, gbeta)
        return rule

    return _out(data, (x, gamma, beta), make_rule)


# ---------------------------------------------------------------------------
# Pooling / resize / concat / reductions

def global_avg_pool(x):
    """Mean over H, W -> shape (N, C, 1, 1)."""
    n, c, h, w = x.shape
    data = x.data.mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / (h * w)
    return _out(data, (x,),
                lambda: lambda g: (np.broadcast_to(g * inv, (n, c, h, w)).copy(),))


_INTERP_CACHE = {}


def _interp_matrix(n_in, n_out):
    """Row-stochastic 1-D linear interpolation matrix, half-pixel centers."""
    key = (n_in, n_out)
    m = _INTERP_CACHE.get(key)
    if m is not None:
        return m
    a = np.zeros((n_out, n_in))
    if n_in == 1:
        a[:, 0] = 1.0
    else:
        src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1.0)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        f = src - i0
        rows = np.arange(n_out)
        np.add.at(a, (rows, i0), 1.0 - f)
        np.add.at(a, (rows, i1), f)
    _INTERP_CACHE[key] = a
    return a


def resize_bilinear(x, out_h, out_w):
    """Bilinear resample with half-pixel centers (no corner alignment)."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be >= 1, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x  # exact identity
    ah = _interp_matrix(h, out_h)
    aw = _interp_matrix(w, out_w)
    data = np.matmul(ah, np.matmul(x.data, aw.T))

    def make_rule():
        def rule(g):
            return (np.matmul(ah.T, np.matmul(g, aw)),)
        return rule

    return _out(data, (x,), make_rule)


def concat_channels(parts):
    """Concatenate along C; all parts must share N, H, W."""
    if not parts:
        raise UsageError("concat_channels needs at least one part")
    if len(parts) == 1:
        return parts[0]
    base = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (base[0], base[2], base[3]):
            raise ShapeError(f"concat parts disagree spatially: {base} vs {p.shape}")
    sizes = [p.shape[1] for p in parts]
    data = np.concatenate([p.data for p in parts], axis=1)

    def make_rule():
        offs = np.cumsum([0] + sizes)

        def rule(g):
            return tuple(g[:, offs[i]:offs[i + 1]] for i in range(len(sizes)))
        return rule

    return _out(data, tuple(parts), make_rule)


def slice_channels(x, start, stop):
    """View of channels [start, stop); gradient zero-pads the complement."""
    n, c, h, w = x.shape
    if not (0 <= start < stop <= c):
        raise ShapeError(f"channel slice [{start}:{stop}) outside 0..{c}")
    if start == 0 and stop == c:
        return x
    data = x.data[:, start:stop]

    def make_rule():
        def rule(g):
            gx = np.zeros((n, c, h, w))
            gx[:, start:stop] = g
            return (gx,)
        return rule

    return _out(data, (x,), make_rule)


def gather_pieces(pieces):
    """Concatenate channel ranges [(tensor, start, stop), ...] in one node.

    Equivalent to concat_channels of slice_channels views but with a single
    tape node; the gradient scatters each chunk back into its source.
    """
    if not pieces:
        raise UsageError("gather_pieces needs at least one piece")
    if len(pieces) == 1:
        t, a, b = pieces[0]
        return slice_channels(t, a, b)
    base = pieces[0][0].shape
    sizes = []
    for t, a, b in pieces:
        n, c, h, w = t.shape
        if (n, h, w) != (base[0], base[2], base[3]):
            raise ShapeError(f"gather pieces disagree spatially: {base} vs {t.shape}")
        if not (0 <= a < b <= c):
            raise ShapeError(f"channel range [{a}:{b}) outside 0..{c}")
        sizes.append(b - a)
    data = np.concatenate([t.data[:, a:b] for t, a, b in pieces], axis=1)

    sources = []
    source_index = {}
    for t, _, _ in pieces:
        if id(t) not in source_index:
            source_index[id(t)] = len(sources)
            sources.append(t)

    def make_rule():
        offs = np.cumsum([0] + sizes)

        def rule(g):
            grads = [None] * len(sources)
            for k, (t, a, b) in enumerate(pieces):
                if not t.grad_tracked:
                    continue
                u = source_index[id(t)]
                if grads[u] is None:
                    grads[u] = np.zeros(t.shape)
                grads[u][:, a:b] += g[:, offs[k]:offs[k + 1]]
            return tuple(grads)
        return rule

    return _out(data, tuple(sources), make_rule)


def concat_rows(parts):
    """Concatenate conv weights along the output-channel axis (axis 0)."""
    if len(parts) == 1:
        return parts[0]
    tail = parts[0].shape[1:]
    for p in parts[1:]:
        if p.shape[1:] != tail:
            raise ShapeError(f"row concat shapes disagree: {parts[0].shape} vs {p.shape}")
    sizes = [p.shape[0] for p in parts]
    data = np.concatenate([p.data for p in parts], axis=0)

    def make_rule():
        offs = np.cumsum([0] + sizes)

        def rule(g):
            return tuple(g[offs[i]:offs[i + 1]] for i in range(len(sizes)))
        return rule

    return _out(data, tuple(parts), make_rule)


def gated_sum(parts, gates):
    """sum_i gates[i] * parts[i] in a single fused node.

    parts share one shape; gates are all python floats or all scalar
    Tensors. The reduction order is the part order, fixed.
    """
    if not parts:
        raise UsageError("gated_sum needs at least one part")
    shape = parts[0].shape
    for p in parts[1:]:
        if p.shape != shape:
            raise ShapeError(f"gated_sum parts disagree: {shape} vs {p.shape}")
    tensor_gates = any(isinstance(g, Tensor) for g in gates)
    if tensor_gates:
        gates = [g if isinstance(g, Tensor)
                 else Tensor(np.full((1, 1, 1, 1), float(g))) for g in gates]
        gv = np.array([g.data.reshape(()) for g in gates])
    else:
        gv = np.array([float(g) for g in gates])
    stacked = np.stack([p.data for p in parts])
    data = np.einsum("k,knchw->nchw", gv, stacked)

    def make_rule():
        def rule(g):
            part_grads = gv.reshape(-1, 1, 1, 1, 1) * g[None]
            out = [part_grads[i] for i in range(len(parts))]
            if tensor_gates:
                dg = np.einsum("knchw,nchw->k", stacked, g)
                out.extend(dg[i].reshape(1, 1, 1, 1) for i in range(len(gates)))
            return tuple(out)
        return rule

    inputs = tuple(parts) + (tuple(gates) if tensor_gates else ())
    return _out(data, inputs, make_rule)


_AXES = {"spatial": (2, 3), "channel": (1,), "all": (0, 1, 2, 3)}


def reduce(x, kind, axes):
    """Sum or mean over spatial, channel, or all axes (keepdims)."""
    try:
        ax = _AXES[axes]
    except KeyError:
        raise UsageError(f"unknown reduce axes {axes!r}") from None
    if kind not in ("sum", "mean"):
        raise UsageError(f"unknown reduce kind {kind!r}")
    shape = x.shape
    count = 1
    for a in ax:
        count *= shape[a]
    data = x.data.sum(axis=ax, keepdims=True)
    factor = 1.0
    if kind == "mean":
        data = data / count
        factor = 1.0 / count
    return _out(data, (x,),
                lambda: lambda g: (np.broadcast_to(g * factor, shape).copy(),))


def channel_max(x):
    """Max over channels -> (N, 1, H, W); gradient routes to the first argmax."""
    xd = x.data
    n, c, h, w = x.shape
    idx = xd.argmax(axis=1, keepdims=True)
    data = np.take_along_axis(xd, idx, axis=1)

    def make_rule():
        def rule(g):
            gx = np.zeros((n, c, h, w))
            np.put_along_axis(gx, idx, g, axis=1)
            return (gx,)
        return rule

    return _out(data, (x,), make_rule)


def softmax(x, over):
    """Softmax over channels or over the joint spatial axes, max-shifted."""
    try:
        ax = {"channel": (1,), "spatial": (2, 3)}[over]
    except KeyError:
        raise UsageError(f"softmax axis must be 'channel' or 'spatial', got {over!r}") from None
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def make_rule():
        def rule(g):
            dot = (g * y).sum(axis=ax, keepdims=True)
            return (y * (g - dot),)
        return rule

    return _out(y, (x,), make_rule)


# ---------------------------------------------------------------------------
# Finite-difference oracle

def grad_check(f, x, h=1e-4):
    """Max relative error between tape gradients and central differences.

    f maps a Tensor to a scalar Tensor and must be deterministic. The
    relative error per entry is |a - n| / max(1e-8, |a| + |n|). Probe
    points near ReLU kinks are the caller's responsibility.
    """
    with Tape() as tape:
        tape.watch(x)
        y = f(x)
        analytic = backward(tape, y)[x]
    flat = x.data.ravel()
    numeric = np.empty_like(analytic)
    nflat = numeric.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
