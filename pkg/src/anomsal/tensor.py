"""Dense 5-D array layers with hand-written backward passes, plus ADAM.

All spatial tensors use the layout ``(batch, channels, depth, height, width)``.
Every ``*_forward`` returns the output together with whatever the matching
``*_backward`` needs, so the network can wire the two together without a
general autodiff graph.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LEAKY_SLOPE = 0.01

# 27 kernel taps in (dz, dy, dx) row-major order, matching kernel[..., dz, dy, dx]
_TAPS = [(a, b, c) for a in range(3) for b in range(3) for c in range(3)]


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# 3x3x3 convolution, stride 1, zero padding 1
# ---------------------------------------------------------------------------


def _flat_padded(x: np.ndarray) -> np.ndarray:
    """(B, C, D, H, W) -> (C, B*(D+2)*(H+2)*(W+2)), zero-padded by one voxel."""
    b, c, d, h, w = x.shape
    xp = np.zeros((c, b, d + 2, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3, 4)
    return xp.reshape(c, -1)


def _tap_offsets(d: int, h: int, w: int) -> list[int]:
    # in the flattened padded volume a kernel tap is a constant index shift
    sz, sy = (h + 2) * (w + 2), w + 2
    return [dz * sz + dy * sy + dx for dz, dy, dx in _TAPS]


def _matmul_into(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    # BLAS is slow on rank-1 products (single in/out channel layers)
    if a.shape[1] == 1:
        np.multiply(a, b, out=out)
    else:
        np.matmul(a, b, out=out)


def _unflatten(q: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Valid outputs from the shift-indexed (C, L) buffer, back to (B, C, D, H, W)."""
    b, _, d, h, w = shape
    c = q.shape[0]
    full = np.empty((c, b * (d + 2) * (h + 2) * (w + 2)), dtype=q.dtype)
    full[:, :q.shape[1]] = q
    full = full.reshape(c, b, d + 2, h + 2, w + 2)[:, :, :d, :h, :w]
    return np.ascontiguousarray(full.transpose(1, 0, 2, 3, 4))


def conv3d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray):
    """Same-size 3-D cross-correlation.

    Parameters
    ----------
    x : array (B, C_in, D, H, W)
    kernel : array (C_out, C_in, 3, 3, 3)
    bias : array (C_out,)

    Returns
    -------
    out : array (B, C_out, D, H, W)
    cache : tuple
        Opaque state for :func:`conv3d_backward`.
    """
    if x.ndim != 5:
        raise ValueError(f"expected a 5-D input, got shape {x.shape}")
    if kernel.ndim != 5 or kernel.shape[2:] != (3, 3, 3):
        raise ValueError(f"expected a (C_out, C_in, 3, 3, 3) kernel, got {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise ValueError(
            f"kernel expects {kernel.shape[1]} input channels, input has {x.shape[1]}"
        )
    if bias.shape != (kernel.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match {kernel.shape[0]} outputs")
    c_out, c_in = kernel.shape[:2]
    dtype = np.result_type(x, kernel)
    flat = _flat_padded(x.astype(dtype, copy=False))
    offsets = _tap_offsets(*x.shape[2:])
    length = flat.shape[1] - offsets[-1]
    taps = np.ascontiguousarray(kernel.reshape(c_out, c_in, 27).transpose(2, 0, 1), dtype=dtype)
    acc = np.zeros((c_out, length), dtype=dtype)
    tmp = np.empty_like(acc)
    for k, off in enumerate(offsets):
        _matmul_into(taps[k], flat[:, off:off + length], tmp)
        acc += tmp
    acc += bias.reshape(c_out, 1).astype(dtype)
    out_shape = (x.shape[0], c_out) + x.shape[2:]
    return _unflatten(acc, out_shape), (flat, x.shape, taps, offsets)


def conv3d_backward(grad_out: np.ndarray, cache, input_grad: bool = True):
    """Gradients of :func:`conv3d_forward` w.r.t. input, kernel and bias.

    With ``input_grad=False`` the input gradient is skipped and returned as None.
    """
    flat, in_shape, taps, offsets = cache
    b, c_in, d, h, w = in_shape
    c_out = taps.shape[1]
    expected = (b, c_out, d, h, w)
    if grad_out.shape != expected:
        raise ValueError(f"grad_out shape {grad_out.shape} != forward output {expected}")
    length = flat.shape[1] - offsets[-1]
    g = np.zeros((c_out, b, d + 2, h + 2, w + 2), dtype=flat.dtype)
    g[:, :, :d, :h, :w] = grad_out.transpose(1, 0, 2, 3, 4)
    g = g.reshape(c_out, -1)[:, :length]
    grad_bias = g.sum(axis=1)
    grad_taps = np.empty((27, c_out, c_in), dtype=flat.dtype)
    if input_grad:
        grad_flat = np.zeros_like(flat)
        tmp = np.empty((c_in, length), dtype=flat.dtype)
    for k, off in enumerate(offsets):
        window = flat[:, off:off + length]
        np.matmul(g, window.T, out=grad_taps[k])
        if input_grad:
            _matmul_into(taps[k].T, g, tmp)
            grad_flat[:, off:off + length] += tmp
    grad_kernel = grad_taps.transpose(1, 2, 0).reshape(c_out, c_in, 3, 3, 3)
    grad_kernel = np.ascontiguousarray(grad_kernel)
    if not input_grad:
        return None, grad_kernel, grad_bias
    grad_x = grad_flat.reshape(c_in, b, d + 2, h + 2, w + 2)[:, :, 1:-1, 1:-1, 1:-1]
    grad_x = np.ascontiguousarray(grad_x.transpose(1, 0, 2, 3, 4))
    return grad_x, grad_kernel, grad_bias


def conv3d_reference(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Direct nested-loop convolution; slow, used only to check the fast path."""
    b, c_in, d, h, w = x.shape
    c_out = kernel.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros((b, c_out, d, h, w), dtype=np.float64)
    for n in range(b):
        for o in range(c_out):
            for z in range(d):
                for y in range(h):
                    for xx in range(w):
                        acc = float(bias[o])
                        for c in range(c_in):
                            for dz, dy, dx in _TAPS:
                                acc += kernel[o, c, dz, dy, dx] * xp[n, c, z + dz, y + dy, xx + dx]
                        out[n, o, z, y, xx] = acc
    return out


# ---------------------------------------------------------------------------
# Elementwise activations
# ---------------------------------------------------------------------------


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x > 0, x, x * slope)


def leaky_relu_backward(grad_out: np.ndarray, x: np.ndarray, slope: float = LEAKY_SLOPE):
    return np.where(x > 0, grad_out, grad_out * slope)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return flush_tiny(out)


def sigmoid_backward(grad_out: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Backward through sigmoid given its *output* ``y``."""
    return flush_tiny(grad_out * y * (1.0 - y))


def flush_tiny(a: np.ndarray) -> np.ndarray:
    """Zero values too small to matter at the array's precision, in place.

    Saturated sigmoids otherwise leak subnormal floats into the backward
    GEMMs, which run an order of magnitude slower on them.
    """
    info = np.finfo(a.dtype)
    a[np.abs(a) < info.tiny / info.eps] = 0
    return a


# ---------------------------------------------------------------------------
# Nearest-neighbour resampling and channel concatenation
# ---------------------------------------------------------------------------


def resample_nn(x: np.ndarray, factor: float) -> np.ndarray:
    """Nearest-neighbour resampling of the three spatial axes by 0.5 or 2.0.

    Downsampling keeps even-index voxels; upsampling replicates each voxel
    into a 2x2x2 block, so ``resample_nn(resample_nn(x, 2.0), 0.5) == x``.
    """
    if factor == 2.0:
        return x.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)
    if factor == 0.5:
        if any(s % 2 for s in x.shape[2:]):
            raise ValueError(f"downsampling needs even spatial dims, got {x.shape[2:]}")
        return np.ascontiguousarray(x[:, :, ::2, ::2, ::2])
    raise ValueError(f"unsupported resampling factor {factor}")


def resample_nn_backward(grad_out: np.ndarray, factor: float) -> np.ndarray:
    if factor == 2.0:
        b, c, d, h, w = grad_out.shape
        g = grad_out.reshape(b, c, d // 2, 2, h // 2, 2, w // 2, 2)
        return g.sum(axis=(3, 5, 7))
    if factor == 0.5:
        b, c, d, h, w = grad_out.shape
        g = np.zeros((b, c, 2 * d, 2 * h, 2 * w), dtype=grad_out.dtype)
        g[:, :, ::2, ::2, ::2] = grad_out
        return g
    raise ValueError(f"unsupported resampling factor {factor}")


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"cannot concatenate shapes {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def concat_channels_backward(grad_out: np.ndarray, split: int):
    """Split a concatenated gradient back into the ``a`` and ``b`` parts."""
    return grad_out[:, :split], grad_out[:, split:]


# ---------------------------------------------------------------------------
# ADAM
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected ADAM update, applied to ``params`` in place."""
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, param {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------
#
# Layout (all little-endian):
#   magic    8 bytes  b"ANOMSAL\0"
#   version  u32
#   nmeta    u32, then nmeta x (key, value) length-prefixed utf-8 strings
#   ntensor  u32, then per tensor:
#       name   u32 length + utf-8 bytes
#       dtype  u8 (0 = float32, 1 = float64, 2 = int64)
#       ndim   u32, dims ndim x u64
#       data   raw values, C order

CKPT_MAGIC = b"ANOMSAL\0"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


def _write_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read_str(buf: io.BytesIO) -> str:
    (n,) = struct.unpack("<I", buf.read(4))
    return buf.read(n).decode("utf-8")


def pack_tensors(tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> bytes:
    meta = meta or {}
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    buf.write(struct.pack("<I", len(meta)))
    for k in sorted(meta):
        _write_str(buf, k)
        _write_str(buf, str(meta[k]))
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"unsupported dtype {arr.dtype} for tensor {name}")
        _write_str(buf, name)
        buf.write(struct.pack("<BI", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def unpack_tensors(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    buf = io.BytesIO(data)
    if buf.read(8) != CKPT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (nmeta,) = struct.unpack("<I", buf.read(4))
    meta = {}
    for _ in range(nmeta):
        k = _read_str(buf)
        meta[k] = _read_str(buf)
    (ntensor,) = struct.unpack("<I", buf.read(4))
    tensors = {}
    for _ in range(ntensor):
        name = _read_str(buf)
        code, ndim = struct.unpack("<BI", buf.read(5))
        shape = struct.unpack(f"<{ndim}Q", buf.read(8 * ndim))
        dtype = _DTYPES[code]
        count = int(np.prod(shape)) if ndim else 1
        raw = buf.read(count * dtype.itemsize)
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return tensors, meta


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    Path(path).write_bytes(pack_tensors(tensors, meta))


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return unpack_tensors(Path(path).read_bytes())
