"""Fault-injection ground truth and statistical FI baselines.

Exhaustive campaigns flip every bit of every stored value in scope and
replay inference; statistical campaigns size their samples with the
classic finite-population formula

    n = N / (1 + e^2 * (N - 1) / (t^2 * p * (1 - p)))

per layer (and per bit position for the data-unaware / data-aware
variants).  All injections are functional: weights are never mutated in
place, so the network is bitwise intact after any campaign.

Counters follow the same convention as the analysis side: one simulation
is one forward execution of the network on the image batch.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .bitflip import flip_bit_array
from .engine import Network
from .errors import ConfigError

SFI_MODES = ("sfi-layerwise", "sfi-data-unaware", "sfi-data-aware")
FI_MODES = ("exhaustive-weights", "exhaustive-activations") + SFI_MODES


@dataclass(frozen=True)
class FiCampaignSpec:
    mode: str
    channels: tuple[tuple[int, int], ...] = ()  # (layer, channel) scope; empty = all
    target: str = "weights"                     # SFI fault space: weights | activations
    e: float = 0.01
    t: float = 2.576
    p: float = 0.5
    pilot: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.mode not in FI_MODES:
            raise ConfigError(f"unknown FI mode {self.mode!r}")
        if self.e <= 0 or self.t <= 0 or not 0 < self.p < 1:
            raise ConfigError("require e > 0, t > 0, p in (0, 1)")
        if self.pilot < 1:
            raise ConfigError("pilot size must be >= 1")


@dataclass
class FiResult:
    mode: str
    cvf: dict[tuple[int, int], float] = field(default_factory=dict)
    lvf: dict[int, float] = field(default_factory=dict)
    misclassified: int = 0      # image-level misclassifications observed
    injections: int = 0         # (value, bit, image) fault scenarios evaluated
    batch_forwards: int = 0     # forward executions, clean pass excluded
    layer_forwards: dict[int, int] = field(default_factory=dict)

    def merge(self, other: "FiResult"):
        self.cvf.update(other.cvf)
        self.misclassified += other.misclassified
        self.injections += other.injections
        self.batch_forwards += other.batch_forwards
        for k, v in other.layer_forwards.items():
            self.layer_forwards[k] = self.layer_forwards.get(k, 0) + v


def sfi_sample_size(n_space: int, e: float, t: float, p: float) -> int:
    """Sample count for a fault space of n_space, clamped to [1, n_space]."""
    if n_space < 1:
        raise ConfigError("fault space must hold at least one fault")
    if e <= 0 or t <= 0 or not 0 < p < 1:
        raise ConfigError("require e > 0, t > 0, p in (0, 1)")
    n = n_space / (1.0 + e * e * (n_space - 1) / (t * t * p * (1.0 - p)))
    return min(n_space, max(1, math.ceil(n)))


def compare_mae(a, b) -> float:
    """Mean absolute error between two aligned factor lists."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"factor lists differ in length: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ConfigError("cannot compare empty factor lists")
    return float(np.mean(np.abs(a - b)))


# ---------------------------------------------------------------------------
# exhaustive campaigns

def exhaustive_weight_fi(net: Network, batch: np.ndarray, layer: int, channel: int,
                         cache=None, golden=None) -> FiResult:
    """Flip every bit of every weight in one filter, batch-forward each flip.

    CVF = misclassified image-inferences / (32 * |weights| * batch).
    """
    batch = engine.check_batch(net, batch)
    l = net.layers[layer]
    if l.kind != "conv2d":
        raise ConfigError(f"layer {layer} is {l.kind}, not conv2d")
    if not 0 <= channel < l.weight.shape[0]:
        raise ConfigError(f"channel {channel} outside layer {layer}")
    if cache is None:
        cache = engine.full_forward(net, batch)
    if golden is None:
        golden = engine.golden_classify(net, batch, cache)

    b = batch.shape[0]
    flat_base = channel * int(np.prod(l.weight.shape[1:]))
    n_w = int(np.prod(l.weight.shape[1:]))
    mis = 0
    forwards = 0
    for e_idx in range(n_w):
        flat = flat_base + e_idx
        for bit in range(32):
            w2 = l.weight.copy()
            wf = w2.reshape(-1)
            wf[flat] = flip_bit_array(wf[flat:flat + 1], bit)[0]
            logits = engine.forward_with_weights(net, batch, layer, w2, cache)
            mis += int(np.sum(engine.classify_logits(logits) != golden))
            forwards += 1
    cvf = mis / (forwards * b)
    return FiResult(
        mode="exhaustive-weights", cvf={(layer, channel): cvf},
        misclassified=mis, injections=forwards * b, batch_forwards=forwards,
        layer_forwards={layer: forwards},
    )


def exhaustive_activation_fi(net: Network, batch: np.ndarray, layer: int, channel: int,
                             cache=None, golden=None) -> FiResult:
    """Flip every bit of every stored activation of one output channel.

    The flip is transient and per image: one batched forward carries each
    image's own flipped value at the same (site, bit).
    """
    batch = engine.check_batch(net, batch)
    shape = net.shapes[layer]
    if len(shape) != 3:
        raise ConfigError(f"layer {layer} output is flat; no activation channel to target")
    if not 0 <= channel < shape[0]:
        raise ConfigError(f"channel {channel} outside layer {layer}")
    if cache is None:
        cache = engine.full_forward(net, batch)
    if golden is None:
        golden = engine.golden_classify(net, batch, cache)

    b = batch.shape[0]
    _, h, w = shape
    mis = 0
    forwards = 0
    for y in range(h):
        for x in range(w):
            clean = cache[layer][:, channel, y, x]
            inj = engine.InjectionSpec(layer, channel, (y, x), 0.0)
            for bit in range(32):
                with np.errstate(invalid="ignore"):  # flips may land on sNaN
                    delta = flip_bit_array(clean, bit).astype(np.float64) \
                        - clean.astype(np.float64)
                logits = engine.forward_injected(
                    net, batch, inj, cache=cache,
                    delta_per_image=delta.astype(np.float32))
                mis += int(np.sum(engine.classify_logits(logits) != golden))
                forwards += 1
    cvf = mis / (forwards * b)
    return FiResult(
        mode="exhaustive-activations", cvf={(layer, channel): cvf},
        misclassified=mis, injections=forwards * b, batch_forwards=forwards,
        layer_forwards={layer: forwards},
    )


# ---------------------------------------------------------------------------
# statistical campaigns

def _fault_space(net: Network, layer: int, target: str) -> int:
    if target == "weights":
        return net.weights_in(layer)
    c, h, w = net.shapes[layer]
    return c * h * w


def _inject_weight(net, batch, layer, flat, bit, cache):
    l = net.layers[layer]
    w2 = l.weight.copy()
    wf = w2.reshape(-1)
    wf[flat] = flip_bit_array(wf[flat:flat + 1], bit)[0]
    return engine.forward_with_weights(net, batch, layer, w2, cache)


def _inject_activation(net, batch, layer, flat, bit, cache):
    c, h, w = net.shapes[layer]
    ch, rest = divmod(int(flat), h * w)
    y, x = divmod(rest, w)
    clean = cache[layer][:, ch, y, x]
    with np.errstate(invalid="ignore"):
        delta = flip_bit_array(clean, bit).astype(np.float64) - clean.astype(np.float64)
    inj = engine.InjectionSpec(layer, ch, (y, x), 0.0)
    return engine.forward_injected(net, batch, inj, cache=cache,
                                   delta_per_image=delta.astype(np.float32))


def _sample_sites(rng, n_space: int, n: int) -> np.ndarray:
    if n >= n_space:
        return np.arange(n_space)
    return np.sort(rng.choice(n_space, size=n, replace=False))


def run_sfi(net: Network, batch: np.ndarray, spec: FiCampaignSpec) -> FiResult:
    """Layer-wise, data-unaware, or data-aware statistical FI.

    Layer-wise sizes one sample per layer over its (value x 32 bits)
    space; the bit-level variants size one sample per (layer, bit), with
    p = 0.5 (data-unaware) or a pilot-estimated p (data-aware, pilot
    injections counted in the totals).  LVF is the mean misclassified
    fraction over the layer's injections, bits weighted equally in the
    bit-level variants.
    """
    if spec.mode not in SFI_MODES:
        raise ConfigError(f"run_sfi got non-SFI mode {spec.mode!r}")
    batch = engine.check_batch(net, batch)
    cache = engine.full_forward(net, batch)
    golden = engine.golden_classify(net, batch, cache)
    b = batch.shape[0]
    inject = _inject_weight if spec.target == "weights" else _inject_activation
    rng = np.random.default_rng(spec.seed)

    result = FiResult(mode=spec.mode)
    for layer in net.conv_layers:
        n_sites = _fault_space(net, layer, spec.target)
        forwards = 0
        mis_total = 0

        def shoot(flat, bit):
            nonlocal forwards, mis_total
            logits = inject(net, batch, layer, flat, bit, cache)
            m = int(np.sum(engine.classify_logits(logits) != golden))
            forwards += 1
            mis_total += m
            return m

        if spec.mode == "sfi-layerwise":
            n = sfi_sample_size(n_sites * 32, spec.e, spec.t, spec.p)
            picks = _sample_sites(rng, n_sites * 32, n)
            fractions = [shoot(p_ // 32, p_ % 32) / b for p_ in picks]
            lvf = float(np.mean(fractions))
        else:
            per_bit = []
            for bit in range(32):
                if spec.mode == "sfi-data-unaware":
                    p_bit = 0.5
                else:
                    pilot_sites = _sample_sites(rng, n_sites, min(spec.pilot, n_sites))
                    pilot_mis = sum(shoot(s, bit) for s in pilot_sites)
                    pairs = len(pilot_sites) * b
                    p_bit = min(max(pilot_mis / pairs, 1.0 / pairs),
                                1.0 - 1.0 / pairs)
                n = sfi_sample_size(n_sites, spec.e, spec.t, p_bit)
                sites = _sample_sites(rng, n_sites, n)
                per_bit.append(float(np.mean([shoot(s, bit) / b for s in sites])))
            lvf = float(np.mean(per_bit))

        result.lvf[layer] = lvf
        result.misclassified += mis_total
        result.injections += forwards * b
        result.batch_forwards += forwards
        result.layer_forwards[layer] = forwards
    return result


# ---------------------------------------------------------------------------
# campaign driver over channel sets

_FI_STATE: tuple | None = None


def _fi_init(net, batch, mode):
    global _FI_STATE
    cache = engine.full_forward(net, batch)
    golden = engine.golden_classify(net, batch, cache)
    _FI_STATE = (net, batch, mode, cache, golden)


def _fi_run(target: tuple[int, int]) -> FiResult:
    net, batch, mode, cache, golden = _FI_STATE
    fn = exhaustive_weight_fi if mode == "exhaustive-weights" else exhaustive_activation_fi
    return fn(net, batch, target[0], target[1], cache, golden)


def run_exhaustive_fi(net: Network, batch: np.ndarray, spec: FiCampaignSpec,
                      workers: int = 1) -> FiResult:
    """Exhaustive weight or activation FI over a set of channels."""
    channels = spec.channels or tuple(
        (layer, ch) for layer in net.conv_layers
        for ch in range(net.shapes[layer][0]))
    for layer, ch in channels:
        if layer not in net.conv_layers or not 0 <= ch < net.shapes[layer][0]:
            raise ConfigError(f"FI target ({layer}, {ch}) out of range")

    if workers <= 1:
        _fi_init(net, batch, spec.mode)
        parts = [_fi_run(t) for t in channels]
    else:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_fi_init,
            initargs=(net, batch, spec.mode),
        ) as pool:
            parts = list(pool.map(_fi_run, channels))

    total = FiResult(mode=spec.mode)
    for part in parts:
        total.merge(part)
    for layer in sorted({layer for layer, _ in channels}):
        vals = [total.cvf[(l_, c_)] for l_, c_ in sorted(total.cvf) if l_ == layer]
        total.lvf[layer] = float(np.mean(vals))
    return total


def pick_channels(net: Network, ratio: float, seed: int) -> tuple[tuple[int, int], ...]:
    """Seeded per-layer channel subset, ceil(ratio * channels) per conv layer."""
    if not 0 < ratio <= 1:
        raise ConfigError(f"channel ratio {ratio} outside (0, 1]")
    rng = np.random.default_rng(seed)
    out = []
    for layer in net.conv_layers:
        c = net.shapes[layer][0]
        n = math.ceil(ratio * c)
        out.extend((layer, int(ch))
                   for ch in np.sort(rng.choice(c, size=n, replace=False)))
    return tuple(out)
