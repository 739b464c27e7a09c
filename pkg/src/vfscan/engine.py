"""Minimal float32 CNN engine.

Forward inference, forward with an additive error injected at one output
site, and reverse-mode gradients of the misclassification loss with
respect to any intermediate feature map.  Layers form a DAG through
explicit producer indices, so residual connections are plain data.

Everything operates on numpy float32 arrays in NCHW order and is a pure
function of (network, inputs), safe to call from concurrent workers.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError

KINDS = (
    "conv2d", "relu", "maxpool", "avgpool", "globalavgpool",
    "linear", "batchnorm", "residual-add", "flatten",
)

# |gradient| at or below this counts as a structurally dead path
GRAD_TOL = 1e-12


@dataclass
class LayerSpec:
    """One layer of the network; fields beyond `kind` apply per kind."""

    kind: str
    inputs: tuple[int, ...] = ()  # producer layer indices, -1 = network input
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    groups: int = 1
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    eps: float = 1e-5


@dataclass
class Network:
    """Validated layer DAG; immutable during analysis."""

    layers: list[LayerSpec]
    n_classes: int
    input_shape: tuple[int, int, int]  # (C, H, W)
    shapes: list[tuple[int, ...]] = field(default_factory=list)

    def __post_init__(self):
        self.shapes = _infer_shapes(self)

    @property
    def conv_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind == "conv2d"]

    def activations_in(self, layer: int) -> int:
        """N_l: number of output activations of a layer."""
        return int(np.prod(self.shapes[layer]))

    def weights_in(self, layer: int) -> int:
        """W_l: number of weight elements of a layer (bias excluded)."""
        w = self.layers[layer].weight
        return 0 if w is None else int(w.size)


def _as_f32(a, name):
    if a is None:
        raise ConfigError(f"{name} is required")
    return np.ascontiguousarray(a, dtype=np.float32)


def _pool_out(h: int, k: int, s: int, p: int) -> int:
    out = (h + 2 * p - k) // s + 1
    if out <= 0:
        raise ConfigError(f"window {k} with stride {s} does not fit extent {h}")
    return out


def _infer_shapes(net: Network) -> list[tuple[int, ...]]:
    """Shape-check the whole DAG once at load time."""
    if net.n_classes < 2:
        raise ConfigError("network needs at least 2 classes")
    shapes: list[tuple[int, ...]] = []
    for i, l in enumerate(net.layers):
        if l.kind not in KINDS:
            raise ConfigError(f"layer {i}: unknown kind {l.kind!r}")
        if not l.inputs:
            l.inputs = (i - 1,)
        for src in l.inputs:
            if not -1 <= src < i:
                raise ConfigError(f"layer {i}: producer index {src} out of range")
        ins = [net.input_shape if s == -1 else shapes[s] for s in l.inputs]
        n_in = 2 if l.kind == "residual-add" else 1
        if len(ins) != n_in:
            raise ConfigError(f"layer {i} ({l.kind}): expects {n_in} inputs, got {len(ins)}")
        shapes.append(_layer_shape(i, l, ins))
    if shapes[-1] != (net.n_classes,):
        raise ConfigError(
            f"final layer produces {shapes[-1]}, expected ({net.n_classes},)")
    return shapes


def _layer_shape(i: int, l: LayerSpec, ins: list[tuple]) -> tuple[int, ...]:
    x = ins[0]
    if l.kind == "conv2d":
        if len(x) != 3:
            raise ConfigError(f"layer {i}: conv2d needs a CHW input, got {x}")
        c, h, w = x
        l.weight = _as_f32(l.weight, f"layer {i}: conv weight")
        if l.groups < 1 or c % l.groups:
            raise ConfigError(f"layer {i}: groups {l.groups} does not divide {c} channels")
        c_out, c_in_g, kh, kw = l.weight.shape
        if kh != kw or kh != l.kernel:
            raise ConfigError(f"layer {i}: weight kernel {kh}x{kw} != declared {l.kernel}")
        if c_in_g != c // l.groups or c_out % l.groups:
            raise ConfigError(
                f"layer {i}: weight shape {l.weight.shape} inconsistent with "
                f"{c} input channels in {l.groups} groups")
        if l.bias is not None:
            l.bias = _as_f32(l.bias, "bias")
            if l.bias.shape != (c_out,):
                raise ConfigError(f"layer {i}: bias shape {l.bias.shape} != ({c_out},)")
        return (c_out, _pool_out(h, l.kernel, l.stride, l.padding),
                _pool_out(w, l.kernel, l.stride, l.padding))
    if l.kind in ("relu",):
        return x
    if l.kind in ("maxpool", "avgpool"):
        if len(x) != 3:
            raise ConfigError(f"layer {i}: {l.kind} needs a CHW input")
        c, h, w = x
        return (c, _pool_out(h, l.kernel, l.stride, l.padding),
                _pool_out(w, l.kernel, l.stride, l.padding))
    if l.kind == "globalavgpool":
        if len(x) != 3:
            raise ConfigError(f"layer {i}: globalavgpool needs a CHW input")
        return (x[0], 1, 1)
    if l.kind == "linear":
        l.weight = _as_f32(l.weight, f"layer {i}: linear weight")
        out_f, in_f = l.weight.shape
        if len(x) != 1 or x[0] != in_f:
            raise ConfigError(
                f"layer {i}: linear expects flat input of {in_f}, got {x}")
        if l.bias is not None:
            l.bias = _as_f32(l.bias, "bias")
            if l.bias.shape != (out_f,):
                raise ConfigError(f"layer {i}: bias shape {l.bias.shape} != ({out_f},)")
        return (out_f,)
    if l.kind == "batchnorm":
        if len(x) != 3:
            raise ConfigError(f"layer {i}: batchnorm needs a CHW input")
        c = x[0]
        for name in ("gamma", "beta", "running_mean", "running_var"):
            arr = _as_f32(getattr(l, name), f"layer {i}: batchnorm {name}")
            if arr.shape != (c,):
                raise ConfigError(f"layer {i}: batchnorm {name} shape {arr.shape} != ({c},)")
            setattr(l, name, arr)
        if not np.all(l.running_var > 0):
            raise ConfigError(f"layer {i}: batchnorm variance must be strictly positive")
        return x
    if l.kind == "residual-add":
        if ins[0] != ins[1]:
            raise ConfigError(f"layer {i}: residual-add inputs {ins[0]} != {ins[1]}")
        return x
    if l.kind == "flatten":
        return (int(np.prod(x)),)
    raise ConfigError(f"layer {i}: unhandled kind {l.kind}")


# ---------------------------------------------------------------------------
# forward kernels

def im2col(x: np.ndarray, k: int, stride: int, padding: int,
           pad_value: float = 0.0):
    """Unfold NCHW input into (B, C*k*k, positions) patch columns.

    Row order within a column is input-channel-major, then kernel rows,
    then kernel columns, which fixes the accumulation layout.
    """
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                   constant_values=pad_value)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(dcols: np.ndarray, in_shape, k: int, stride: int, padding: int):
    """Scatter-add patch-column gradients back to the input layout."""
    b, c, h, w = in_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    d = dcols.reshape(b, c, k, k, ho, wo)
    dx = np.zeros((b, c, hp, wp), dtype=np.float32)
    for ky in range(k):
        for kx in range(k):
            dx[:, :, ky:ky + stride * ho:stride,
               kx:kx + stride * wo:stride] += d[:, :, ky, kx]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def _conv_forward(l: LayerSpec, x: np.ndarray) -> np.ndarray:
    # accumulate in float64, store float32: keeps stored values exact enough
    # for the direct-summation oracle while staying deterministic
    b = x.shape[0]
    c_out = l.weight.shape[0]
    cols, ho, wo = im2col(x, l.kernel, l.stride, l.padding)
    cols = cols.astype(np.float64)
    wmat_full = l.weight.reshape(c_out, -1).astype(np.float64)
    if l.groups == 1:
        out = np.matmul(wmat_full, cols)
    else:
        rows = cols.shape[1] // l.groups
        og = c_out // l.groups
        out = np.empty((b, c_out, cols.shape[2]), dtype=np.float64)
        for g in range(l.groups):
            out[:, g * og:(g + 1) * og] = np.matmul(
                wmat_full[g * og:(g + 1) * og], cols[:, g * rows:(g + 1) * rows])
    if l.bias is not None:
        out = out + l.bias[None, :, None].astype(np.float64)
    return out.reshape(b, c_out, ho, wo).astype(np.float32)


def _conv_backward(l: LayerSpec, x: np.ndarray, g: np.ndarray) -> np.ndarray:
    b, c_out = g.shape[0], g.shape[1]
    gmat = g.reshape(b, c_out, -1).astype(np.float32)
    if l.groups == 1:
        dcols = np.matmul(l.weight.reshape(c_out, -1).T, gmat)
    else:
        og = c_out // l.groups
        c_in_g = l.weight.shape[1]
        rows = c_in_g * l.kernel * l.kernel
        dcols = np.empty((b, rows * l.groups, gmat.shape[2]), dtype=np.float32)
        for gi in range(l.groups):
            wmat = l.weight[gi * og:(gi + 1) * og].reshape(og, -1)
            dcols[:, gi * rows:(gi + 1) * rows] = np.matmul(
                wmat.T, gmat[:, gi * og:(gi + 1) * og])
    return _col2im(dcols, x.shape, l.kernel, l.stride, l.padding)


def _pool_windows(x: np.ndarray, l: LayerSpec, pad_value: float):
    if l.padding:
        x = np.pad(x, ((0, 0), (0, 0), (l.padding, l.padding),
                       (l.padding, l.padding)), constant_values=pad_value)
    return sliding_window_view(x, (l.kernel, l.kernel),
                               axis=(2, 3))[:, :, ::l.stride, ::l.stride]


def _pool_reduce(x: np.ndarray, l: LayerSpec, pad_value: float, op: str):
    """Pooling via k*k strided slices (no window materialization)."""
    k, s = l.kernel, l.stride
    if l.padding:
        x = np.pad(x, ((0, 0), (0, 0), (l.padding, l.padding),
                       (l.padding, l.padding)), constant_values=pad_value)
    ho = (x.shape[2] - k) // s + 1
    wo = (x.shape[3] - k) // s + 1
    if op == "max":
        out = None
        for ky in range(k):
            for kx in range(k):
                sl = x[:, :, ky:ky + s * ho:s, kx:kx + s * wo:s]
                out = sl.copy() if out is None else np.maximum(out, sl)
        return out
    acc = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=np.float64)
    for ky in range(k):
        for kx in range(k):
            acc += x[:, :, ky:ky + s * ho:s, kx:kx + s * wo:s]
    return (acc / (k * k)).astype(np.float32)


def _layer_forward(l: LayerSpec, ins: list[np.ndarray]) -> np.ndarray:
    x = ins[0]
    if l.kind == "conv2d":
        return _conv_forward(l, x)
    if l.kind == "relu":
        return np.maximum(x, np.float32(0.0))
    if l.kind == "maxpool":
        return _pool_reduce(x, l, -np.inf, "max")
    if l.kind == "avgpool":
        return _pool_reduce(x, l, 0.0, "mean")
    if l.kind == "globalavgpool":
        return x.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(np.float32)
    if l.kind == "linear":
        out = np.matmul(x.astype(np.float64), l.weight.T.astype(np.float64))
        if l.bias is not None:
            out = out + l.bias[None, :].astype(np.float64)
        return out.astype(np.float32)
    if l.kind == "batchnorm":
        scale = (l.gamma / np.sqrt(l.running_var + np.float32(l.eps))).astype(np.float32)
        return (x - l.running_mean[None, :, None, None]) \
            * scale[None, :, None, None] + l.beta[None, :, None, None]
    if l.kind == "residual-add":
        return ins[0] + ins[1]
    if l.kind == "flatten":
        return np.ascontiguousarray(x.reshape(x.shape[0], -1))
    raise ConfigError(f"unhandled kind {l.kind}")


def _layer_backward(l: LayerSpec, ins: list[np.ndarray], g: np.ndarray):
    """Gradients w.r.t. each input of the layer, given output gradient g."""
    x = ins[0]
    if l.kind == "conv2d":
        return [_conv_backward(l, x, g)]
    if l.kind == "relu":
        # subgradient 0 at exactly 0
        return [np.where(x > 0, g, np.float32(0.0))]
    if l.kind == "maxpool":
        win = _pool_windows(x, l, -np.inf)
        b, c, ho, wo = win.shape[:4]
        k = l.kernel
        flat = win.reshape(b, c, ho, wo, k * k)
        amax = flat.argmax(axis=-1)  # first max wins ties
        oy, ox = np.divmod(amax, k)
        bi, ci, hi, wi = np.ogrid[:b, :c, :ho, :wo]
        iy = hi * l.stride + oy - l.padding
        ix = wi * l.stride + ox - l.padding
        dx = np.zeros_like(x)
        ok = (iy >= 0) & (iy < x.shape[2]) & (ix >= 0) & (ix < x.shape[3])
        np.add.at(dx, (np.broadcast_to(bi, amax.shape)[ok],
                       np.broadcast_to(ci, amax.shape)[ok],
                       iy[ok], ix[ok]), g[ok])
        return [dx]
    if l.kind == "avgpool":
        k = l.kernel
        scale = np.float32(1.0 / (k * k))
        b, c = x.shape[:2]
        hp, wp = x.shape[2] + 2 * l.padding, x.shape[3] + 2 * l.padding
        ho = (hp - k) // l.stride + 1
        wo = (wp - k) // l.stride + 1
        dxp = np.zeros((b, c, hp, wp), dtype=np.float32)
        gs = g * scale
        for ky in range(k):
            for kx in range(k):
                dxp[:, :, ky:ky + l.stride * ho:l.stride,
                    kx:kx + l.stride * wo:l.stride] += gs
        if l.padding:
            dxp = dxp[:, :, l.padding:-l.padding, l.padding:-l.padding]
        return [dxp]
    if l.kind == "globalavgpool":
        h, w = x.shape[2], x.shape[3]
        return [np.broadcast_to(g / np.float32(h * w), x.shape).astype(np.float32)]
    if l.kind == "linear":
        return [np.matmul(g, l.weight)]
    if l.kind == "batchnorm":
        scale = (l.gamma / np.sqrt(l.running_var + np.float32(l.eps))).astype(np.float32)
        return [g * scale[None, :, None, None]]
    if l.kind == "residual-add":
        return [g, g]
    if l.kind == "flatten":
        return [g.reshape(x.shape)]
    raise ConfigError(f"unhandled kind {l.kind}")


# ---------------------------------------------------------------------------
# network-level operations

@dataclass(frozen=True)
class InjectionSpec:
    """Additive error at one layer output: a single site or a whole channel."""

    layer: int
    channel: int
    pos: tuple[int, int] | None = None  # None targets the whole channel
    delta: float = 0.0                  # +/-inf requests the saturation value


def check_batch(net: Network, batch: np.ndarray) -> np.ndarray:
    batch = np.ascontiguousarray(batch, dtype=np.float32)
    if batch.ndim != 4 or batch.shape[1:] != net.input_shape:
        raise ConfigError(
            f"batch shape {batch.shape} does not match input {net.input_shape}")
    return batch


def check_site(net: Network, inj: InjectionSpec):
    if not 0 <= inj.layer < len(net.layers):
        raise ConfigError(f"injection layer {inj.layer} out of range")
    shape = net.shapes[inj.layer]
    channels = shape[0]
    if not 0 <= inj.channel < channels:
        raise ConfigError(f"injection channel {inj.channel} outside [0, {channels})")
    if inj.pos is not None:
        if len(shape) != 3:
            raise ConfigError(f"layer {inj.layer} output is flat; pos must be None")
        y, x = inj.pos
        if not (0 <= y < shape[1] and 0 <= x < shape[2]):
            raise ConfigError(f"injection position {inj.pos} outside {shape[1:]}")


def full_forward(net: Network, batch: np.ndarray) -> list[np.ndarray]:
    """All layer outputs, in order.  The last entry is the logits."""
    batch = check_batch(net, batch)
    acts: list[np.ndarray] = []
    with np.errstate(over="ignore", invalid="ignore"):  # faults propagate inf/NaN
        for l in net.layers:
            ins = [batch if s == -1 else acts[s] for s in l.inputs]
            acts.append(_layer_forward(l, ins))
    return acts


def forward(net: Network, batch: np.ndarray) -> np.ndarray:
    """Raw logits, shape (B, n_classes).  No softmax."""
    return full_forward(net, batch)[-1]


def saturation_delta(net: Network, clean_layer_out: np.ndarray, sign: float) -> float:
    """Realization of the +/-inf sentinel: 2^10 times the layer's max |value|."""
    peak = float(np.max(np.abs(clean_layer_out)))
    return math.copysign(2.0 ** 10 * max(peak, 1.0), sign)


def _resolve_delta(inj: InjectionSpec, clean_out: np.ndarray, net: Network):
    if isinstance(inj.delta, float) and math.isinf(inj.delta):
        return np.float32(saturation_delta(net, clean_out, inj.delta))
    return np.float32(inj.delta)


def full_forward_injected(net: Network, batch: np.ndarray, inj: InjectionSpec,
                          cache: list[np.ndarray] | None = None,
                          delta_per_image: np.ndarray | None = None) -> list[np.ndarray]:
    """All layer outputs under an injection; see forward_injected."""
    batch = check_batch(net, batch)
    check_site(net, inj)
    acts: list[np.ndarray] = []
    for i, l in enumerate(net.layers):
        if cache is not None and i < inj.layer:
            acts.append(cache[i])
            continue
        if cache is not None and i == inj.layer:
            out = cache[i]  # injected layer's own output is the clean one
        else:
            ins = [batch if s == -1 else acts[s] for s in l.inputs]
            with np.errstate(over="ignore", invalid="ignore"):
                out = _layer_forward(l, ins)
        if i == inj.layer:
            out = out.copy()
            if delta_per_image is not None:
                d = np.asarray(delta_per_image, dtype=np.float32)
                if d.shape != (batch.shape[0],):
                    raise ConfigError("delta_per_image must hold one value per image")
            else:
                d = _resolve_delta(inj, out, net)
            if out.ndim == 4:
                if inj.pos is None:
                    out[:, inj.channel] += d if np.ndim(d) == 0 else d[:, None, None]
                else:
                    out[:, inj.channel, inj.pos[0], inj.pos[1]] += d
            else:
                out[:, inj.channel] += d
        acts.append(out)
    return acts


def forward_injected(net: Network, batch: np.ndarray, inj: InjectionSpec,
                     cache: list[np.ndarray] | None = None,
                     delta_per_image: np.ndarray | None = None) -> np.ndarray:
    """Forward pass with the injection applied at the addressed output.

    The delta lands on the producing layer's raw output, i.e. before any
    separate activation layer consumes it.  When `cache` holds the clean
    activations, layers upstream of the injection are reused unchanged.
    `delta_per_image` overrides inj.delta with one value per image
    (used by transient activation-fault campaigns).
    """
    return full_forward_injected(net, batch, inj, cache, delta_per_image)[-1]


def forward_with_weights(net: Network, batch: np.ndarray, layer: int,
                         weight: np.ndarray,
                         cache: list[np.ndarray] | None = None) -> np.ndarray:
    """Forward pass with one layer's weight tensor functionally replaced."""
    batch = check_batch(net, batch)
    patched = replace(net.layers[layer], weight=np.ascontiguousarray(weight, np.float32))
    acts: list[np.ndarray] = []
    for i, l in enumerate(net.layers):
        if cache is not None and i < layer:
            acts.append(cache[i])
            continue
        ins = [batch if s == -1 else acts[s] for s in l.inputs]
        with np.errstate(over="ignore", invalid="ignore"):
            acts.append(_layer_forward(patched if i == layer else l, ins))
    return acts[-1]


def golden_classify(net: Network, batch: np.ndarray,
                    cache: list[np.ndarray] | None = None) -> np.ndarray:
    """Per-image argmax class; ties break toward the lowest index."""
    logits = cache[-1] if cache is not None else forward(net, batch)
    return np.argmax(logits, axis=1)


def classify_logits(logits: np.ndarray) -> np.ndarray:
    return np.argmax(logits, axis=1)


def loss_gradients(net: Network, batch: np.ndarray, golden: np.ndarray,
                   cache: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """d/d(activation) of L = sum_{j != t}(E_j - E_t), per layer output.

    Evaluated at the clean forward pass; one backward sweep yields the
    per-image gradient for every feature map at once.
    """
    batch = check_batch(net, batch)
    acts = cache if cache is not None else full_forward(net, batch)
    b, c = acts[-1].shape
    dlogits = np.ones((b, c), dtype=np.float32)
    dlogits[np.arange(b), golden] = -np.float32(c - 1)

    grads: list[np.ndarray | None] = [None] * len(net.layers)
    grads[-1] = dlogits
    for i in range(len(net.layers) - 1, -1, -1):
        g = grads[i]
        if g is None:
            continue
        l = net.layers[i]
        ins = [batch if s == -1 else acts[s] for s in l.inputs]
        dins = _layer_backward(l, ins, g)
        for src, dx in zip(l.inputs, dins):
            if src == -1:
                continue
            if grads[src] is None:
                grads[src] = dx.copy()
            else:
                grads[src] += dx
    return [np.zeros(acts[i].shape, dtype=np.float32) if g is None else g
            for i, g in enumerate(grads)]


def grad_wrt_activation(net: Network, image: np.ndarray, golden_class: int,
                        site: InjectionSpec):
    """Gradient of the misclassification loss at one site of one image.

    Returns a scalar for an activation site, or the per-position gradient
    over the channel for a whole-channel target.
    """
    if not 0 <= golden_class < net.n_classes:
        raise ConfigError(f"golden class {golden_class} outside [0, {net.n_classes})")
    check_site(net, site)
    batch = image if image.ndim == 4 else image[None]
    grads = loss_gradients(net, batch, np.array([golden_class]))
    g = grads[site.layer][0]
    if g.ndim == 3:
        if site.pos is None:
            return np.array(g[site.channel])
        return float(g[site.channel, site.pos[0], site.pos[1]])
    return float(g[site.channel])
