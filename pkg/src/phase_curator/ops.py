"""Differentiable operations over `Tensor`.

Exactly the op set the phase classifier and its loss need: 3D convolution
and max pooling, dense layers, the squeeze-excitation primitives, a
subset-restricted logsumexp, and a handful of elementwise/reduction ops for
composing losses. Every op validates shapes up front and registers its
backward rule on the active tape.

Layout convention is row-major [N, C, D, H, W] throughout. The convolution
has two interchangeable forward paths: a vectorized im2col path (default)
and a plain nested-loop path kept behind the same contract for auditing.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, active_tape, debug_checks_enabled

_AXIS_NAMES = ("depth", "height", "width")


def _as3(v, name: str) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ShapeError(f"{name} must have three components, got {v!r}")
    return t


def _finish(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if debug_checks_enabled() and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values in output of {op}")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# convolution


def conv3d_output_shape(spatial, kernel, stride, padding) -> tuple[int, int, int]:
    """Floor formula per axis: (extent + 2*pad - kernel)//stride + 1."""
    out = []
    for ax in range(3):
        ext, k, s, p = spatial[ax], kernel[ax], stride[ax], padding[ax]
        if s < 1:
            raise ShapeError(f"stride along {_AXIS_NAMES[ax]} must be >= 1, got {s}")
        if ext + 2 * p < k:
            raise ShapeError(
                f"kernel {k} exceeds padded input extent {ext + 2 * p} along {_AXIS_NAMES[ax]}"
            )
        out.append((ext + 2 * p - k) // s + 1)
    return tuple(out)


def _check_conv_args(x: Tensor, w: Tensor, b: Tensor) -> None:
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be [N,C,D,H,W], got {x.shape}")
    if w.ndim != 5:
        raise ShapeError(f"conv3d weight must be [K,C,kd,kh,kw], got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input channels {x.shape[1]} do not match weight channels {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} does not match kernel count {w.shape[0]}")


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride=1, padding=0) -> Tensor:
    """3D cross-correlation with bias, im2col forward."""
    stride = _as3(stride, "stride")
    padding = _as3(padding, "padding")
    _check_conv_args(x, w, b)

    n, c, d, h, wd = x.shape
    k, _, kd, kh, kw = w.shape
    od, oh, ow = conv3d_output_shape((d, h, wd), (kd, kh, kw), stride, padding)
    sd, sh, sw = stride
    pd, ph, pw = padding

    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    # [N,C,od,oh,ow,kd,kh,kw] -> [N*od*oh*ow, C*kd*kh*kw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(
        n * od * oh * ow, c * kd * kh * kw
    )
    wmat = w.data.reshape(k, -1)
    out = cols @ wmat.T + b.data
    out = np.ascontiguousarray(out.reshape(n, od, oh, ow, k).transpose(0, 4, 1, 2, 3))

    def backward_fn(g: np.ndarray):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, k)
        dw = (gmat.T @ cols).reshape(w.shape)
        db = gmat.sum(axis=0)
        dcols = (gmat @ wmat).reshape(n, od, oh, ow, c, kd, kh, kw)
        dcols = np.ascontiguousarray(dcols.transpose(0, 4, 1, 2, 3, 5, 6, 7))
        dxp = np.zeros_like(xp)
        for a in range(kd):
            for bb in range(kh):
                for cc in range(kw):
                    dxp[
                        :,
                        :,
                        a : a + (od - 1) * sd + 1 : sd,
                        bb : bb + (oh - 1) * sh + 1 : sh,
                        cc : cc + (ow - 1) * sw + 1 : sw,
                    ] += dcols[..., a, bb, cc]
        dx = dxp[:, :, pd : pd + d, ph : ph + h, pw : pw + wd]
        return dx, dw, db

    return _finish("conv3d", out, (x, w, b), backward_fn)


def conv3d_loop(x: Tensor, w: Tensor, b: Tensor, stride=1, padding=0) -> Tensor:
    """Nested-loop convolution behind the same contract as `conv3d`.

    Forward only (no tape recording); kept as an in-package audit path for
    the vectorized kernel. Slow, so use tiny shapes.
    """
    stride = _as3(stride, "stride")
    padding = _as3(padding, "padding")
    _check_conv_args(x, w, b)
    n, c, d, h, wd = x.shape
    k, _, kd, kh, kw = w.shape
    od, oh, ow = conv3d_output_shape((d, h, wd), (kd, kh, kw), stride, padding)
    pd, ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    out = np.zeros((n, k, od, oh, ow), dtype=x.data.dtype)
    for ni in range(n):
        for ki in range(k):
            for zi in range(od):
                for yi in range(oh):
                    for xi in range(ow):
                        acc = 0.0
                        for ci in range(c):
                            patch = xp[
                                ni,
                                ci,
                                zi * stride[0] : zi * stride[0] + kd,
                                yi * stride[1] : yi * stride[1] + kh,
                                xi * stride[2] : xi * stride[2] + kw,
                            ]
                            acc += float((patch * w.data[ki, ci]).sum())
                        out[ni, ki, zi, yi, xi] = acc + b.data[ki]
    return Tensor(out)


# ---------------------------------------------------------------------------
# pooling


def maxpool3d(x: Tensor, window=2, stride=None) -> Tensor:
    """Max pooling; ties route the gradient to the lowest linear index."""
    window = _as3(window, "window")
    stride = window if stride is None else _as3(stride, "stride")
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d input must be [N,C,D,H,W], got {x.shape}")
    n, c, d, h, w = x.shape
    for ax in range(3):
        if window[ax] > x.shape[2 + ax]:
            raise ShapeError(
                f"pool window {window[ax]} exceeds input extent {x.shape[2 + ax]} along {_AXIS_NAMES[ax]}"
            )
    od, oh, ow = conv3d_output_shape((d, h, w), window, stride, (0, 0, 0))
    sd, sh, sw = stride
    win = sliding_window_view(x.data, window, axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    flat = np.ascontiguousarray(win).reshape(n, c, od, oh, ow, -1)
    # argmax returns the first maximum; window offsets are in row-major
    # order, so this is the lowest linear index of the original array.
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g: np.ndarray):
        wd, wh, ww = window
        ad, rem = np.divmod(arg, wh * ww)
        ah, aw = np.divmod(rem, ww)
        di = np.arange(od)[:, None, None] * sd + ad
        hi = np.arange(oh)[None, :, None] * sh + ah
        wi = np.arange(ow)[None, None, :] * sw + aw
        ni = np.arange(n)[:, None, None, None, None]
        ci = np.arange(c)[None, :, None, None, None]
        flat_idx = (((ni * c + ci) * d + di) * h + hi) * w + wi
        dx = np.zeros(n * c * d * h * w, dtype=x.data.dtype)
        np.add.at(dx, flat_idx.ravel(), g.ravel())
        return (dx.reshape(x.shape),)

    return _finish("maxpool3d", out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# dense and elementwise


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map [N,F] @ [F,G] + [G]."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"dense expects 2-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense inner dims do not match: input {x.shape}, weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"dense bias shape {b.shape} does not match output width {w.shape[1]}")
    out = x.data @ w.data + b.data

    def backward_fn(g: np.ndarray):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _finish("dense", out, (x, w, b), backward_fn)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward_fn(g: np.ndarray):
        return (g * (x.data > 0),)

    return _finish("relu", out, (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward_fn(g: np.ndarray):
        return (g * out * (1.0 - out),)

    return _finish("sigmoid", out, (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,D,H,W] -> [N,C] mean over the spatial axes."""
    if x.ndim != 5:
        raise ShapeError(f"global_avg_pool input must be [N,C,D,H,W], got {x.shape}")
    voxels = x.shape[2] * x.shape[3] * x.shape[4]
    out = x.data.mean(axis=(2, 3, 4))

    def backward_fn(g: np.ndarray):
        return (np.broadcast_to(g[:, :, None, None, None] / voxels, x.shape).copy(),)

    return _finish("global_avg_pool", out, (x,), backward_fn)


def channel_scale(x: Tensor, gates: Tensor) -> Tensor:
    """Multiply each [N,C] channel of x by its gate."""
    if x.ndim != 5 or gates.ndim != 2 or x.shape[:2] != gates.shape:
        raise ShapeError(f"channel_scale shapes incompatible: {x.shape} vs gates {gates.shape}")
    gexp = gates.data[:, :, None, None, None]
    out = x.data * gexp

    def backward_fn(g: np.ndarray):
        return g * gexp, (g * x.data).sum(axis=(2, 3, 4))

    return _finish("channel_scale", out, (x, gates), backward_fn)


def logsumexp(x: Tensor, subset=None) -> Tensor:
    """Max-shifted log-sum-exp over a column subset of [N,K] logits.

    The gradient over the subset is the softmax restricted to the subset;
    columns outside it get zero.
    """
    if x.ndim != 2:
        raise ShapeError(f"logsumexp expects [N,K] logits, got {x.shape}")
    k = x.shape[1]
    if subset is None:
        subset = tuple(range(k))
    else:
        subset = tuple(int(i) for i in subset)
    if len(subset) == 0:
        raise ValueError("logsumexp subset must be non-empty")
    if len(set(subset)) != len(subset):
        raise ValueError(f"logsumexp subset has duplicates: {subset}")
    if any(i < 0 or i >= k for i in subset):
        raise ValueError(f"logsumexp subset {subset} out of range for {k} columns")

    cols = x.data[:, subset]
    m = cols.max(axis=1, keepdims=True)
    shifted = np.exp(cols - m)
    denom = shifted.sum(axis=1, keepdims=True)
    out = (m + np.log(denom))[:, 0]

    def backward_fn(g: np.ndarray):
        dx = np.zeros_like(x.data)
        dx[:, subset] = g[:, None] * (shifted / denom)
        return (dx,)

    return _finish("logsumexp", out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# composition plumbing


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} operands must share a shape: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _finish("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _finish("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return _finish("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, factor: float) -> Tensor:
    return _finish("scale", x.data * factor, (x,), lambda g: (g * factor,))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype).reshape(())

    def backward_fn(g: np.ndarray):
        return (np.full_like(x.data, float(g)),)

    return _finish("sum_all", out, (x,), backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    return _finish("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows of a 2-d tensor; backward scatters into the source rows."""
    if x.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-d tensor, got {x.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows indices must be 1-d")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows indices out of range for {x.shape[0]} rows")
    out = x.data[idx]

    def backward_fn(g: np.ndarray):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        return (dx,)

    return _finish("gather_rows", out, (x,), backward_fn)
