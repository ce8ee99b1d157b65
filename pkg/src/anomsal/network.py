"""Shell-to-grid encoder/decoder with skip connections.

Layer layout (``n`` input side length, ``f`` base feature maps)::

    conv1  1   -> f     n        conv8  4f -> 2f   n/2   (input: up(conv7) ++ conv4)
    conv2  f   -> f     n        conv9  2f -> f    n/2
    down                n/2      up                n
    conv3  f   -> 2f    n/2      conv10 2f -> f    n     (input: up(conv9) ++ conv2)
    conv4  2f  -> 2f    n/2      conv11 f  -> 1    n     sigmoid
    down                n/4
    conv5  2f  -> 4f    n/4
    conv6  4f  -> 4f    n/4
    conv7  4f  -> 2f    n/4

Every conv is 3x3x3 followed by leaky ReLU except conv11.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

LAYER_NAMES = tuple(f"conv{i}" for i in range(1, 12))
# resolution divisor of each conv, relative to the input grid
_LAYER_SCALE = (1, 1, 2, 2, 4, 4, 4, 2, 2, 1, 1)
# per-layer (C_in, C_out) as multiples of f; 0 marks the single in/out channel
_CHANNELS = (
    (0, 1), (1, 1), (1, 2), (2, 2), (2, 4), (4, 4), (4, 2),
    (4, 2), (2, 1), (2, 1), (1, 0),
)
PUBLISHED_PARAM_COUNT = 354_000
PUBLISHED_PARAM_F = 24


@dataclass(frozen=True)
class ArchitectureSpec:
    n: int = 16
    f: int = 8

    def __post_init__(self):
        if self.n < 4 or self.n % 4:
            raise ValueError(f"n must be a positive multiple of 4, got {self.n}")
        if self.f < 1:
            raise ValueError(f"f must be >= 1, got {self.f}")

    def layer_channels(self) -> list[tuple[int, int]]:
        f = self.f
        return [(ci * f or 1, co * f or 1) for ci, co in _CHANNELS]

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for name, (ci, co) in zip(LAYER_NAMES, self.layer_channels()):
            shapes[f"{name}.weight"] = (co, ci, 3, 3, 3)
            shapes[f"{name}.bias"] = (co,)
        return shapes

    def side_lengths(self) -> list[int]:
        return [self.n // s for s in _LAYER_SCALE]


def build(spec: ArchitectureSpec, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fresh parameters, uniform in +-sqrt(1 / (27 C_in)) per layer, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, (ci, co) in zip(LAYER_NAMES, spec.layer_channels()):
        bound = np.sqrt(1.0 / (27 * ci))
        params[f"{name}.weight"] = rng.uniform(-bound, bound, size=(co, ci, 3, 3, 3)).astype(dtype)
        params[f"{name}.bias"] = np.zeros(co, dtype=dtype)
    return params


def param_breakdown(spec: ArchitectureSpec) -> list[tuple[str, int, int, int]]:
    """Per-layer ``(name, C_in, C_out, n_params)``."""
    return [
        (name, ci, co, 27 * ci * co + co)
        for name, (ci, co) in zip(LAYER_NAMES, spec.layer_channels())
    ]


def count_params(spec: ArchitectureSpec) -> int:
    return sum(row[3] for row in param_breakdown(spec))


def param_report(spec: ArchitectureSpec | None = None) -> str:
    """Per-layer parameter table, with the published f=24 figure for comparison."""
    spec = spec or ArchitectureSpec(n=16, f=PUBLISHED_PARAM_F)
    lines = [f"parameter breakdown (n={spec.n}, f={spec.f})", f"{'layer':<8}{'C_in':>6}{'C_out':>7}{'params':>10}"]
    for name, ci, co, k in param_breakdown(spec):
        lines.append(f"{name:<8}{ci:>6}{co:>7}{k:>10}")
    total = count_params(spec)
    lines.append(f"{'total':<21}{total:>10}")
    if spec.f == PUBLISHED_PARAM_F:
        rel = abs(total - PUBLISHED_PARAM_COUNT) / PUBLISHED_PARAM_COUNT
        verdict = "AGREE" if rel < 0.05 else "DISAGREE"
        lines.append(
            f"published figure for f={PUBLISHED_PARAM_F}: about {PUBLISHED_PARAM_COUNT:,}; "
            f"computed {total:,} ({rel:.1%} off): {verdict}"
        )
        if verdict == "DISAGREE":
            near = min(range(1, 65), key=lambda f: abs(count_params(ArchitectureSpec(spec.n, f)) - PUBLISHED_PARAM_COUNT))
            lines.append(f"closest base width to that figure: f={near} "
                         f"({count_params(ArchitectureSpec(spec.n, near)):,} parameters)")
    return "\n".join(lines)


def receptive_field(scales=_LAYER_SCALE, kernel: int = 3) -> int:
    """Receptive field side length along one axis.

    Each conv adds ``(kernel - 1) * scale`` input voxels, where ``scale`` is
    the resolution divisor it runs at; nearest-neighbour resampling only
    changes the scale.
    """
    return 1 + sum((kernel - 1) * s for s in scales)


def infer_spec(params: dict[str, np.ndarray], n: int) -> ArchitectureSpec:
    return ArchitectureSpec(n=n, f=params["conv1.weight"].shape[0])


def forward(params: dict[str, np.ndarray], x: np.ndarray, keep_cache: bool = False):
    """Run the network on shells ``x`` of shape (B, 1, n, n, n).

    Returns the occupancy probabilities, and the activation cache when
    ``keep_cache`` is set (needed by :func:`backward`).
    """
    if x.ndim != 5 or x.shape[1] != 1:
        raise ValueError(f"expected input of shape (B, 1, n, n, n), got {x.shape}")
    n = x.shape[2]
    if x.shape[2:] != (n, n, n) or n % 4:
        raise ValueError(f"spatial dims must be a cube with side divisible by 4, got {x.shape[2:]}")
    x = x.astype(params["conv1.weight"].dtype, copy=False)
    cache = {}

    def conv(name, inp, act=True):
        z, c = T.conv3d_forward(inp, params[f"{name}.weight"], params[f"{name}.bias"])
        if keep_cache:
            cache[name] = (c, z)
        return T.leaky_relu(z) if act else z

    a1 = conv("conv1", x)
    a2 = conv("conv2", a1)
    a3 = conv("conv3", T.resample_nn(a2, 0.5))
    a4 = conv("conv4", a3)
    a5 = conv("conv5", T.resample_nn(a4, 0.5))
    a6 = conv("conv6", a5)
    a7 = conv("conv7", a6)
    a8 = conv("conv8", T.concat_channels(T.resample_nn(a7, 2.0), a4))
    a9 = conv("conv9", a8)
    a10 = conv("conv10", T.concat_channels(T.resample_nn(a9, 2.0), a2))
    z11 = conv("conv11", a10, act=False)
    y = T.sigmoid(z11)
    if keep_cache:
        cache["split8"] = a7.shape[1]
        cache["split10"] = a9.shape[1]
        cache["y"] = y
        return y, cache
    return y


def _backprop(params, cache, grad_y, grads):
    def conv_back(name, g, act=True):
        c, z = cache[name]
        if act:
            g = T.leaky_relu_backward(g, z)
        # the shell itself never needs a gradient during training
        gx, gk, gb = T.conv3d_backward(g, c, input_grad=grads is None or name != "conv1")
        if grads is not None:
            grads[f"{name}.weight"] = gk.astype(params[f"{name}.weight"].dtype, copy=False)
            grads[f"{name}.bias"] = gb.astype(params[f"{name}.bias"].dtype, copy=False)
        return gx

    g = T.sigmoid_backward(grad_y, cache["y"])
    g = conv_back("conv11", g, act=False)
    g = conv_back("conv10", g)
    g_up, g_a2 = T.concat_channels_backward(g, cache["split10"])
    g = conv_back("conv9", T.resample_nn_backward(g_up, 2.0))
    g = conv_back("conv8", g)
    g_up, g_a4 = T.concat_channels_backward(g, cache["split8"])
    g = conv_back("conv7", T.resample_nn_backward(g_up, 2.0))
    g = conv_back("conv6", g)
    g = conv_back("conv5", g)
    g = T.resample_nn_backward(g, 0.5) + g_a4
    g = conv_back("conv4", g)
    g = conv_back("conv3", g)
    g = T.resample_nn_backward(g, 0.5) + g_a2
    g = conv_back("conv2", g)
    return conv_back("conv1", g)


def backward(params: dict[str, np.ndarray], cache, grad_y: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given dLoss/dOutput."""
    grads: dict[str, np.ndarray] = {}
    _backprop(params, cache, grad_y, grads)
    return grads


def input_gradient(params, cache, grad_y) -> np.ndarray:
    """dLoss/dInput; used to probe the field of view."""
    return _backprop(params, cache, grad_y, None)
