"""Dense NHWC layers of the generator with hand-written reverse-mode gradients.

The generator is ``relu(conv(relu(conv(up(... relu(dense(z)) ...)))))``:
a dense map to a ``4 x 4 x c0`` array, ``U`` stages of bilinear 2x
upsampling + 7x7 convolution + bias + ReLU, then one 7x7 convolution to RGB
without upsampling, also followed by ReLU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatchError

KERNEL = 7
PAD = KERNEL // 2
START = 4
MIN_CHANNELS = 8


# --- layers --------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def _up_axis(x: np.ndarray, axis: int) -> np.ndarray:
    x = np.moveaxis(x, axis, 0)
    prev = np.concatenate([x[:1], x[:-1]])
    nxt = np.concatenate([x[1:], x[-1:]])
    out = np.empty((2 * x.shape[0],) + x.shape[1:], dtype=x.dtype)
    out[0::2] = 0.75 * x + 0.25 * prev
    out[1::2] = 0.75 * x + 0.25 * nxt
    return np.moveaxis(out, 0, axis)


def _up_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, 0)
    ge, go = g[0::2], g[1::2]
    gx = 0.75 * (ge + go)
    gx[:-1] += 0.25 * ge[1:]
    gx[0] += 0.25 * ge[0]
    gx[1:] += 0.25 * go[:-1]
    gx[-1] += 0.25 * go[-1]
    return np.moveaxis(gx, 0, axis)


def bilinear_upsample2x(t: np.ndarray) -> np.ndarray:
    """Double the two spatial axes of a ``(B, H, W, C)`` tensor.

    Output pixel ``i`` samples the input at ``(i + 0.5) / 2 - 0.5`` with
    edge-clamped taps, i.e. weights 3/4 and 1/4 on the two nearest rows.
    """
    return _up_axis(_up_axis(t, 1), 2)


def bilinear_upsample2x_backward(g: np.ndarray) -> np.ndarray:
    return _up_axis_adjoint(_up_axis_adjoint(g, 2), 1)


def _pad_index(n: int) -> np.ndarray:
    # half-sample symmetric: [c, b, a | a, b, c, ...]
    return np.pad(np.arange(n), PAD, mode="symmetric")


def symmetric_pad(x: np.ndarray) -> np.ndarray:
    return x[:, _pad_index(x.shape[1])][:, :, _pad_index(x.shape[2])]


def symmetric_pad_backward(g: np.ndarray, h: int, w: int) -> np.ndarray:
    out = g[:, :, PAD : PAD + w].copy()
    idx = _pad_index(w)
    for p in list(range(PAD)) + list(range(PAD + w, w + 2 * PAD)):
        out[:, :, idx[p]] += g[:, :, p]
    res = out[:, PAD : PAD + h].copy()
    idx = _pad_index(h)
    for p in list(range(PAD)) + list(range(PAD + h, h + 2 * PAD)):
        res[:, idx[p]] += out[:, p]
    return res


def _im2col(x: np.ndarray) -> np.ndarray:
    """``(B, H, W, C) -> (B*H*W, 7*7*C)`` patches of the padded input."""
    b, h, w, c = x.shape
    win = sliding_window_view(symmetric_pad(x), (KERNEL, KERNEL), axis=(1, 2))
    # win: (B, H, W, C, kh, kw) -> (B, H, W, kh, kw, C)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * h * w, KERNEL * KERNEL * c)


def _check_conv(t: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> None:
    if t.ndim != 4 or kernel.shape[:2] != (KERNEL, KERNEL) or kernel.shape[2] != t.shape[3]:
        raise ShapeMismatchError(f"input {t.shape} incompatible with kernel {kernel.shape}")
    if bias.shape != (kernel.shape[3],):
        raise ShapeMismatchError(f"bias {bias.shape} does not match {kernel.shape[3]} output channels")


def conv2d_symmetric(t: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-size 7x7 cross-correlation with symmetric padding, plus bias."""
    _check_conv(t, kernel, bias)
    b, h, w, _ = t.shape
    out = _im2col(t) @ kernel.reshape(-1, kernel.shape[3]) + bias
    return out.reshape(b, h, w, kernel.shape[3])


def conv2d_symmetric_backward(cols, shape, kernel, g):
    """Gradients w.r.t. input, kernel and bias given the forward patches ``cols``."""
    b, h, w, c = shape
    cout = kernel.shape[3]
    g2 = g.reshape(-1, cout)
    gk = (cols.T @ g2).reshape(kernel.shape)
    gb = g2.sum(axis=0)
    gpad = np.zeros((b, h + 2 * PAD, w + 2 * PAD, c), dtype=g.dtype)
    # one matmul per tap keeps every accumulation channel-contiguous
    for i in range(KERNEL):
        for j in range(KERNEL):
            gpad[:, i : i + h, j : j + w] += (g2 @ kernel[i, j].T).reshape(b, h, w, c)
    return symmetric_pad_backward(gpad, h, w), gk, gb


# --- generator -----------------------------------------------------------


def channel_ladder(c0: int, U: int) -> list[int]:
    return [c0] + [max(c0 // 2**j, MIN_CHANNELS) for j in range(1, U + 1)]


@dataclass
class GeneratorParams:
    """Weights of the generator, in declaration order ``W0, b0, W1, b1, ...``.

    ``W0`` is ``d_in x (16 * c0)``; ``W{j}`` for ``j >= 1`` are ``7 x 7 x cin x cout``
    kernels; the last one maps to 3 channels.
    """

    d_in: int
    c0: int
    U: int
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def side(self) -> int:
        return START * 2**self.U

    @property
    def dtype(self):
        return self.arrays["W0"].dtype

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "GeneratorParams":
        return GeneratorParams(self.d_in, self.c0, self.U, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "GeneratorParams":
        return GeneratorParams(self.d_in, self.c0, self.U, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def size(self) -> int:
        return sum(v.size for v in self.arrays.values())


def param_shapes(d_in: int, c0: int, U: int) -> dict[str, tuple]:
    ch = channel_ladder(c0, U)
    shapes = {"W0": (d_in, START * START * c0), "b0": (START * START * c0,)}
    for j in range(1, U + 1):
        shapes[f"W{j}"] = (KERNEL, KERNEL, ch[j - 1], ch[j])
        shapes[f"b{j}"] = (ch[j],)
    shapes[f"W{U + 1}"] = (KERNEL, KERNEL, ch[U], 3)
    shapes[f"b{U + 1}"] = (3,)
    return shapes


def init_generator(
    d_in: int, c0: int, U: int, seed: int, dtype=np.float32, out_gain: float = 0.1, out_bias: float = 0.5
) -> GeneratorParams:
    """Uniform(-a, a) weights with ``a = sqrt(6 / fan_in)``; zero biases.

    The output convolution is scaled by ``out_gain`` and its bias set to
    ``out_bias`` so the final ReLU starts in its active region at mid-grey.
    With plain He init every output unit tends to die within the first few
    Adam steps. ``out_gain=1, out_bias=0`` gives the plain scheme.
    """
    rng = np.random.default_rng(seed)
    arrays = {}
    last = f"W{U + 1}"
    for name, shape in param_shapes(d_in, c0, U).items():
        if name.startswith("W"):
            fan_in = shape[0] if len(shape) == 2 else KERNEL * KERNEL * shape[2]
            a = np.sqrt(6.0 / fan_in) * (out_gain if name == last else 1.0)
            arrays[name] = rng.uniform(-a, a, size=shape).astype(dtype)
        else:
            arrays[name] = np.zeros(shape, dtype=dtype)
    arrays[f"b{U + 1}"][:] = out_bias
    return GeneratorParams(d_in, c0, U, arrays)


def zeros_like_params(params: GeneratorParams) -> GeneratorParams:
    return GeneratorParams(params.d_in, params.c0, params.U, {k: np.zeros_like(v) for k, v in params.arrays.items()})


@dataclass
class Trace:
    """Intermediates kept by :func:`forward_trace` for the backward pass."""

    z: np.ndarray
    masks: list = field(default_factory=list)  # ReLU activity per layer
    cols: list = field(default_factory=list)  # im2col patches per conv
    shapes: list = field(default_factory=list)  # conv input shapes
    zero_fraction: float = 0.0


def _check_params(params: GeneratorParams) -> None:
    expect = param_shapes(params.d_in, params.c0, params.U)
    if list(params.arrays) != list(expect):
        raise ShapeMismatchError(f"parameter blocks {list(params.arrays)} != {list(expect)}")
    for k, shape in expect.items():
        if params.arrays[k].shape != shape:
            raise ShapeMismatchError(f"{k} has shape {params.arrays[k].shape}, expected {shape}")


def forward_trace(params: GeneratorParams, z: np.ndarray) -> tuple[np.ndarray, Trace]:
    _check_params(params)
    a = params.arrays
    z = np.asarray(z, dtype=params.dtype)
    if z.ndim != 2 or z.shape[1] != params.d_in:
        raise ShapeMismatchError(f"latent batch {z.shape} does not match d_in={params.d_in}")
    tr = Trace(z)
    zeros, total = 0, 0
    h = (z @ a["W0"] + a["b0"]).reshape(len(z), START, START, params.c0)
    for j in range(1, params.U + 2):
        mask = h > 0
        h = h * mask
        tr.masks.append(mask)
        zeros += mask.size - np.count_nonzero(mask)
        total += mask.size
        if j <= params.U:
            h = bilinear_upsample2x(h)
        tr.shapes.append(h.shape)
        cols = _im2col(h)
        tr.cols.append(cols)
        k = a[f"W{j}"]
        h = (cols @ k.reshape(-1, k.shape[3]) + a[f"b{j}"]).reshape(*h.shape[:3], k.shape[3])
    mask = h > 0
    tr.masks.append(mask)
    zeros += mask.size - np.count_nonzero(mask)
    total += mask.size
    tr.zero_fraction = zeros / total
    return h * mask, tr


def forward(params: GeneratorParams, z: np.ndarray) -> np.ndarray:
    """Generate a ``(B, side, side, 3)`` nonnegative batch from latents ``(B, d_in)``."""
    return forward_trace(params, z)[0]


def backward(
    params: GeneratorParams,
    z: np.ndarray,
    upstream: np.ndarray,
    trace: Trace | None = None,
) -> tuple[GeneratorParams, np.ndarray]:
    """Gradients of ``sum(upstream * forward(params, z))`` w.r.t. parameters and ``z``."""
    if trace is None:
        _, trace = forward_trace(params, z)
    a = params.arrays
    n = len(trace.z)
    side = params.side
    upstream = np.asarray(upstream, dtype=params.dtype)
    if upstream.shape != (n, side, side, 3):
        raise ShapeMismatchError(f"upstream gradient {upstream.shape} != {(n, side, side, 3)}")
    grads = {}
    g = upstream * trace.masks[-1]
    for j in range(params.U + 1, 0, -1):
        gx, grads[f"W{j}"], grads[f"b{j}"] = conv2d_symmetric_backward(
            trace.cols[j - 1], trace.shapes[j - 1], a[f"W{j}"], g
        )
        if j <= params.U:
            gx = bilinear_upsample2x_backward(gx)
        g = gx * trace.masks[j - 1]
    g = g.reshape(n, -1)
    grads["W0"] = trace.z.T @ g
    grads["b0"] = g.sum(axis=0)
    gz = g @ a["W0"].T
    ordered = {k: grads[k] for k in a}
    return GeneratorParams(params.d_in, params.c0, params.U, ordered), gz


def activation_sparsity(params: GeneratorParams, z: np.ndarray, batch: int = 64) -> float:
    """Fraction of ReLU outputs equal to zero over all layers and samples."""
    zero = 0.0
    for i in range(0, len(z), batch):
        _, tr = forward_trace(params, z[i : i + batch])
        zero += tr.zero_fraction * len(z[i : i + batch])
    return zero / max(len(z), 1)
