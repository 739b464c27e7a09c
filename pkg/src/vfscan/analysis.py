"""Vulnerability-value search, VF computation, and aggregation.

Per unit (a neuron site or a whole filter channel) and per image, the
error distribution of single bitflips is built, the signed thresholds
(delta-, delta+) that flip the golden class are located, and the
vulnerable mass of the distribution becomes the unit's VF.  Units
aggregate channel -> layer -> model, with a stratified sampling plan
deciding which units are analyzed.

Simulation bookkeeping: one "injection forward" is one forward execution
of the network, regardless of batch size.  Probes are shared across the
images of a batch (a probe at one value yields every image's outcome),
so unit-level counters stay far below per-image totals; per-image probe
participation is tracked separately for the search-cost bound.
"""

import bisect
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .bitflip import epsilon_array, flip_bit_array
from .edm import CvvGrid, ErrorDistributionMap, Vvss, derive_vvss, edm_from_counts
from .engine import GRAD_TOL, InjectionSpec, Network
from .errors import AnalysisError, ConfigError


@dataclass(frozen=True, order=True)
class Unit:
    """An analysis target: one neuron site, or one filter (pos=None)."""

    layer: int
    channel: int
    pos: tuple[int, int] | None = None

    @property
    def is_filter(self) -> bool:
        return self.pos is None


@dataclass
class VulnerabilityRecord:
    unit: Unit
    delta_neg: np.ndarray        # per image; -2^rho_max sentinel or -inf allowed
    delta_pos: np.ndarray
    vf_per_image: np.ndarray
    vf: float                    # batch average
    injection_forwards: int      # distinct injected forwards this unit consumed
    probes_pos: np.ndarray       # per-image probe participation, positive side
    probes_neg: np.ndarray
    grad_skipped_pos: np.ndarray  # bool per image: sentinel came from the gradient gate
    grad_skipped_neg: np.ndarray


@dataclass
class AnalysisContext:
    """Clean-pass state shared by every unit of one (net, batch) campaign."""

    net: Network
    batch: np.ndarray
    grid: CvvGrid = field(default_factory=CvvGrid)
    grad_tol: float = GRAD_TOL

    def __post_init__(self):
        self.batch = engine.check_batch(self.net, self.batch)
        self.acts = engine.full_forward(self.net, self.batch)
        self.golden = engine.golden_classify(self.net, self.batch, self.acts)
        self.grads = engine.loss_gradients(self.net, self.batch, self.golden, self.acts)
        self._cols: dict[int, tuple] = {}

    def layer_cols(self, layer: int):
        """(patch columns [B, C*k*k, L], stored-value mask [C*k*k, L])."""
        if layer not in self._cols:
            l = self.net.layers[layer]
            if l.kind != "conv2d":
                raise AnalysisError(f"layer {layer} is {l.kind}, not conv2d")
            src = l.inputs[0]
            x = self.batch if src == -1 else self.acts[src]
            cols, _, _ = engine.im2col(x, l.kernel, l.stride, l.padding)
            ones = np.ones((1,) + x.shape[1:], dtype=np.float32)
            valid, _, _ = engine.im2col(ones, l.kernel, l.stride, l.padding)
            self._cols[layer] = (cols, valid[0] > 0)
        return self._cols[layer]


def _filter_rows(net: Network, layer: int, channel: int) -> slice:
    """Rows of the layer's patch matrix that this filter's group reads."""
    l = net.layers[layer]
    c_out = l.weight.shape[0]
    per_group = l.weight.shape[1] * l.kernel * l.kernel
    gi = channel // (c_out // l.groups)
    return slice(gi * per_group, (gi + 1) * per_group)


def unit_edm_counts(ctx: AnalysisContext, unit: Unit) -> np.ndarray:
    """Per-image EDM bin counts for a unit, shape (B, n_bins).

    Neuron units flip the stored input values under their receptive
    field (zero-padding taps are not stored and are excluded); filter
    units flip the filter's weights, pooling the induced channel errors
    over every sliding position.
    """
    net, grid = ctx.net, ctx.grid
    l = net.layers[unit.layer]
    if l.kind != "conv2d":
        raise AnalysisError(f"unit at layer {unit.layer} ({l.kind}) is not analyzable")
    rows = _filter_rows(net, unit.layer, unit.channel)
    cols, valid = ctx.layer_cols(unit.layer)
    w = l.weight[unit.channel].ravel()
    b = ctx.batch.shape[0]
    counts = np.zeros((b, grid.n_bins), dtype=np.int64)
    offsets = np.arange(b, dtype=np.int64)[:, None] * grid.n_bins

    if unit.is_filter:
        patch = np.ascontiguousarray(cols[:, rows, :])          # (B, n, L)
        for bit in range(32):
            eps = epsilon_array(w, bit)                          # (n,)
            with np.errstate(invalid="ignore"):
                delta = np.multiply(eps[None, :, None], patch, dtype=np.float64)
            idx = grid.classify(delta).reshape(b, -1)
            counts += np.bincount(
                (idx + offsets).ravel(), minlength=b * grid.n_bins,
            ).reshape(b, grid.n_bins)
        return counts

    _, ho, wo = net.shapes[unit.layer]
    y, x = unit.pos
    pos = y * wo + x
    patch = np.ascontiguousarray(cols[:, rows, pos])             # (B, n)
    keep = valid[rows, pos]
    patch = patch[:, keep]
    w64 = w[keep].astype(np.float64)
    with np.errstate(invalid="ignore"):
        for bit in range(32):
            eps = flip_bit_array(patch, bit).astype(np.float64) - patch.astype(np.float64)
            idx = grid.classify(eps * w64[None, :])
            counts += np.bincount(
                (idx + offsets).ravel(), minlength=b * grid.n_bins,
            ).reshape(b, grid.n_bins)
    return counts


# ---------------------------------------------------------------------------
# threshold search

def _first_true(values, probe):
    """Binary search for the first probe-true index, assuming monotonicity."""
    lo, hi = 0, len(values) - 1
    best = None
    while lo <= hi:
        mid = (lo + hi) // 2
        if probe(values[mid]):
            best, hi = mid, mid - 1
        else:
            lo = mid + 1
    return best


def _route_and_search(probe, vvss: Vvss, sign: int, rho_max: int) -> float:
    """Flowchart body for one sign: pivot at +/-1, then search one subspace.

    Returns the minimum-magnitude member whose injection misclassifies,
    or a signed infinity when no member does.
    """
    inner, outer = vvss.side(sign)
    s = 1.0 if sign > 0 else -1.0
    if not inner and not outer:
        return s * math.inf
    if probe(s * 1.0):
        idx = _first_true(inner, probe)
        if idx is not None:
            return inner[idx]
        if outer:
            return outer[0]  # misclassifies by monotonicity through +/-1
        return s * math.inf
    cands = [v for v in outer if abs(v) > 1.0]  # +/-1 itself is known safe
    idx = _first_true(cands, probe)
    if idx is not None:
        return cands[idx]
    return s * math.inf


def find_delta(net: Network, image: np.ndarray, site: InjectionSpec, vvss: Vvss,
               sign: int, golden_class: int, grad: float | np.ndarray | None = None,
               grad_tol: float = GRAD_TOL, rho_max: int = 10,
               cache: list[np.ndarray] | None = None) -> tuple[float, int]:
    """Signed vulnerability threshold of one unit for one image.

    Returns (delta, injection passes).  A zero loss gradient at the site
    short-circuits to the +/-2^rho_max sentinel with zero passes; a search
    that finds no misclassifying member returns a signed infinity.
    """
    batch = image if image.ndim == 4 else image[None]
    if grad is None:
        grad = engine.grad_wrt_activation(net, batch, golden_class, site)
    gmag = float(np.max(np.abs(grad)))
    if gmag <= grad_tol:
        return math.copysign(2.0 ** rho_max, sign), 0

    passes = 0

    def probe(value):
        nonlocal passes
        passes += 1
        inj = InjectionSpec(site.layer, site.channel, site.pos, float(value))
        logits = engine.forward_injected(net, batch, inj, cache=cache)
        return int(np.argmax(logits[0])) != golden_class

    delta = _route_and_search(probe, vvss, sign, rho_max)
    return delta, passes


def _collective_search(vvss_list, active, probe_flags, sign: int,
                       passes) -> dict[int, float]:
    """Monotone bisection over every image's member list at once.

    probe_flags(value) returns the whole batch's misclassification flags,
    so one forward informs every open search window: a misclassifying
    value caps windows from above, a safe one lifts them from below.
    Under the monotonicity assumption the result per image equals the
    per-image binary search; passes[i] counts the probes image i asked
    for (its own bisection steps).
    """
    s = 1.0 if sign > 0 else -1.0
    deltas = {}
    lists: dict[int, list[float]] = {}
    pivot_imgs = []
    for i in active:
        inner, outer = vvss_list[i].side(sign)
        if not inner and not outer:
            deltas[i] = s * math.inf  # nothing to probe
        else:
            pivot_imgs.append(i)
    if not pivot_imgs:
        return deltas

    flags1 = probe_flags(s * 1.0)
    for i in pivot_imgs:
        passes[i] += 1
        inner, outer = vvss_list[i].side(sign)
        if flags1[i]:
            # threshold below +/-1: search the inner space; if no inner
            # member misclassifies, the smallest outer member does, by
            # monotonicity through the pivot
            if inner:
                lists[i] = list(inner)
                deltas[i] = ("pending", outer[0] if outer else s * math.inf)
            else:
                deltas[i] = outer[0] if outer else s * math.inf
        else:
            cands = [v for v in outer if abs(v) > 1.0]  # the pivot cleared +/-1
            if cands:
                lists[i] = cands
                deltas[i] = ("pending", s * math.inf)
            else:
                deltas[i] = s * math.inf

    state = {i: [0, len(lists[i]) - 1, None] for i in lists}
    mags = {i: [abs(v) for v in lists[i]] for i in lists}

    def finish(i):
        lo, hi, best = state.pop(i)
        _, fallback = deltas[i]
        deltas[i] = lists[i][best] if best is not None else fallback

    while state:
        # execute exactly one probe per round: the mid value requested by
        # the most open windows, so no request can go stale
        requests: dict[float, list[int]] = {}
        for i, (lo, hi, _) in state.items():
            requests.setdefault(lists[i][(lo + hi) // 2], []).append(i)
        value = max(sorted(requests, key=abs), key=lambda v: len(requests[v]))
        flags = probe_flags(value)
        for i in requests[value]:
            passes[i] += 1
        mag = abs(value)
        for i in list(state):
            lo, hi, best = state[i]
            pos = bisect.bisect_right(mags[i], mag)
            exact = pos - 1 if pos > 0 and mags[i][pos - 1] == mag else None
            if flags[i]:
                cand = exact if exact is not None else (pos if pos < len(lists[i]) else None)
                if cand is not None and (best is None or cand < best):
                    best = cand
                hi = min(hi, (exact - 1) if exact is not None else pos - 1)
            else:
                lo = max(lo, pos)
            state[i] = [lo, hi, best]
            if lo > hi:
                finish(i)
    return deltas


def compute_vf(edm: ErrorDistributionMap, delta_neg: float, delta_pos: float) -> float:
    """Vulnerable mass: bins at or beyond the two thresholds.

    Overflow bins always count (they are beyond any finite threshold);
    the masked band never does.
    """
    if not (delta_neg < 0.0 < delta_pos):
        raise AnalysisError(f"thresholds must straddle zero, got {delta_neg}, {delta_pos}")
    return edm.mass_at_most(delta_neg) + edm.mass_at_least(delta_pos)


def analyze_unit(ctx: AnalysisContext, unit: Unit) -> VulnerabilityRecord:
    """Full per-unit analysis over the batch.

    Builds the per-image error distributions, searches both signed
    thresholds for every image (probes shared batch-wide through a memo),
    and averages the per-image VFs.
    """
    net, grid = ctx.net, ctx.grid
    if unit.layer not in net.conv_layers:
        raise ConfigError(f"unit layer {unit.layer} is not a conv layer")
    engine.check_site(net, InjectionSpec(unit.layer, unit.channel, unit.pos, 0.0))
    b = ctx.batch.shape[0]
    counts = unit_edm_counts(ctx, unit)
    edms = [edm_from_counts(counts[i], grid) for i in range(b)]
    vvss = [derive_vvss(e) for e in edms]

    g = ctx.grads[unit.layer]
    if unit.is_filter:
        gmag = np.max(np.abs(g[:, unit.channel].reshape(b, -1)), axis=1)
    else:
        gmag = np.abs(g[:, unit.channel, unit.pos[0], unit.pos[1]])

    memo: dict[float, np.ndarray] = {}
    sims = 0

    def probe_flags(value: float) -> np.ndarray:
        nonlocal sims
        if value not in memo:
            inj = InjectionSpec(unit.layer, unit.channel, unit.pos, value)
            logits = engine.forward_injected(net, ctx.batch, inj, cache=ctx.acts)
            memo[value] = engine.classify_logits(logits) != ctx.golden
            sims += 1
        return memo[value]

    deltas = {+1: np.empty(b), -1: np.empty(b)}
    probes = {+1: np.zeros(b, dtype=np.int64), -1: np.zeros(b, dtype=np.int64)}
    skipped = {+1: np.zeros(b, dtype=bool), -1: np.zeros(b, dtype=bool)}
    for sign in (+1, -1):
        active = []
        for i in range(b):
            if gmag[i] <= ctx.grad_tol:
                deltas[sign][i] = math.copysign(2.0 ** grid.rho_max, sign)
                skipped[sign][i] = True
            else:
                active.append(i)
        found = _collective_search(vvss, active, probe_flags, sign, probes[sign])
        for i, v in found.items():
            deltas[sign][i] = v

    vf_img = np.array([
        compute_vf(edms[i], deltas[-1][i], deltas[+1][i]) for i in range(b)
    ])
    return VulnerabilityRecord(
        unit=unit,
        delta_neg=deltas[-1], delta_pos=deltas[+1],
        vf_per_image=vf_img, vf=float(vf_img.mean()),
        injection_forwards=sims,
        probes_pos=probes[+1], probes_neg=probes[-1],
        grad_skipped_pos=skipped[+1], grad_skipped_neg=skipped[-1],
    )


# ---------------------------------------------------------------------------
# sampling plan

@dataclass(frozen=True)
class SamplingPlan:
    """Which channels (and neuron sites, for activation mode) get analyzed."""

    ratio: float
    seed: int
    complete: bool
    channels: dict[int, tuple[int, ...]]
    neurons: dict[tuple[int, int], tuple[tuple[int, int], ...]]

    def units(self, mode: str) -> list[Unit]:
        out = []
        for layer in sorted(self.channels):
            for ch in self.channels[layer]:
                if mode == "filters":
                    out.append(Unit(layer, ch))
                else:
                    out.extend(Unit(layer, ch, pos)
                               for pos in self.neurons[(layer, ch)])
        return out

    def size(self, mode: str) -> int:
        return len(self.units(mode))


def make_sampling_plan(net: Network, ratio: float, seed: int) -> SamplingPlan:
    """Stratified plan: ceil(ratio * channels) strata per layer, and
    ceil(log2(neurons)) random sites within each selected channel."""
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"channel sampling ratio {ratio} outside (0, 1]")
    rng = np.random.default_rng(seed)
    channels: dict[int, tuple[int, ...]] = {}
    neurons: dict[tuple[int, int], tuple[tuple[int, int], ...]] = {}
    for layer in net.conv_layers:
        c, h, w = net.shapes[layer]
        n_ch = math.ceil(ratio * c)
        picked = np.sort(rng.choice(c, size=n_ch, replace=False))
        channels[layer] = tuple(int(v) for v in picked)
        n_sites = max(1, math.ceil(math.log2(h * w))) if h * w > 1 else 1
        for ch in channels[layer]:
            flat = np.sort(rng.choice(h * w, size=n_sites, replace=False))
            neurons[(layer, ch)] = tuple(
                (int(p) // w, int(p) % w) for p in flat)
    return SamplingPlan(ratio, seed, False, channels, neurons)


def make_complete_plan(net: Network) -> SamplingPlan:
    """Every channel of every conv layer, every neuron site."""
    channels: dict[int, tuple[int, ...]] = {}
    neurons: dict[tuple[int, int], tuple[tuple[int, int], ...]] = {}
    for layer in net.conv_layers:
        c, h, w = net.shapes[layer]
        channels[layer] = tuple(range(c))
        sites = tuple((y, x) for y in range(h) for x in range(w))
        for ch in channels[layer]:
            neurons[(layer, ch)] = sites
    return SamplingPlan(1.0, 0, True, channels, neurons)


# ---------------------------------------------------------------------------
# aggregation

@dataclass
class Counters:
    clean_forwards: int = 0
    gradient_passes: int = 0
    injection_forwards: int = 0

    @property
    def total_forwards(self) -> int:
        return self.clean_forwards + self.gradient_passes + self.injection_forwards

    def as_dict(self) -> dict:
        return {
            "clean_forwards": self.clean_forwards,
            "gradient_passes": self.gradient_passes,
            "injection_forwards": self.injection_forwards,
            "total_forwards": self.total_forwards,
        }


@dataclass
class ModeSummary:
    mode: str
    cvf: dict[int, dict[int, float]]      # layer -> channel -> CVF
    lvf: dict[int, float]
    mvf: float
    counters: Counters
    layer_forwards: dict[int, int]


@dataclass
class VfSummary:
    """Per-layer and model-level factors; mvf_total needs both modes."""

    act: ModeSummary | None = None
    wgt: ModeSummary | None = None
    mvf_total: float | None = None


def aggregate(records: list[VulnerabilityRecord], plan: SamplingPlan,
              net: Network, mode: str) -> ModeSummary:
    """CVF = channel mean, LVF = layer mean over analyzed channels,
    MVF = plain mean of LVFs."""
    per_channel: dict[tuple[int, int], list[float]] = {}
    layer_fwd: dict[int, int] = {}
    for r in sorted(records, key=lambda r: r.unit):
        key = (r.unit.layer, r.unit.channel)
        per_channel.setdefault(key, []).append(r.vf)
        layer_fwd[r.unit.layer] = layer_fwd.get(r.unit.layer, 0) + r.injection_forwards

    cvf: dict[int, dict[int, float]] = {}
    for (layer, ch), vfs in sorted(per_channel.items()):
        cvf.setdefault(layer, {})[ch] = float(np.mean(vfs))

    lvf: dict[int, float] = {}
    for layer in net.conv_layers:
        if layer not in cvf:
            warnings.warn(f"layer {layer} has no analyzed units; excluded from LVF")
            continue
        lvf[layer] = float(np.mean(list(cvf[layer].values())))
    if not lvf:
        raise AnalysisError("no analyzed layers")
    mvf = float(np.mean(list(lvf.values())))
    counters = Counters(injection_forwards=sum(r.injection_forwards for r in records))
    return ModeSummary(mode, cvf, lvf, mvf, counters, layer_fwd)


def mvf_total_from_dims(dims: dict[int, tuple[int, int]], lvf_act: dict[int, float],
                        lvf_wgt: dict[int, float]) -> float:
    """Layerwise weighted average of both LVFs; dims maps layer -> (N_l, W_l)."""
    terms = []
    for layer in sorted(dims):
        if layer not in lvf_act or layer not in lvf_wgt:
            raise AnalysisError(f"layer {layer} missing an LVF for mvf_total")
        n_l, w_l = dims[layer]
        terms.append((n_l * lvf_act[layer] + w_l * lvf_wgt[layer]) / (n_l + w_l))
    return float(np.mean(terms))


def mvf_total(net: Network, lvf_act: dict[int, float],
              lvf_wgt: dict[int, float]) -> float:
    dims = {layer: (net.activations_in(layer), net.weights_in(layer))
            for layer in net.conv_layers}
    return mvf_total_from_dims(dims, lvf_act, lvf_wgt)


# ---------------------------------------------------------------------------
# campaign driver

_WORKER_CTX: AnalysisContext | None = None


def _worker_init(net, batch, rho_max, grad_tol):
    global _WORKER_CTX
    _WORKER_CTX = AnalysisContext(net, batch, CvvGrid(rho_max), grad_tol)


def _worker_run(unit: Unit) -> VulnerabilityRecord:
    return analyze_unit(_WORKER_CTX, unit)


def run_analysis(net: Network, batch: np.ndarray, mode: str, plan: SamplingPlan,
                 rho_max: int = 10, grad_tol: float = GRAD_TOL,
                 workers: int = 1) -> tuple[list[VulnerabilityRecord], ModeSummary]:
    """Analyze every planned unit; identical output for any worker count."""
    if mode not in ("activations", "filters"):
        raise ConfigError(f"unknown analysis mode {mode!r}")
    units = plan.units(mode)
    if workers <= 1:
        ctx = AnalysisContext(net, batch, CvvGrid(rho_max), grad_tol)
        records = [analyze_unit(ctx, u) for u in units]
    else:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_worker_init,
            initargs=(net, batch, rho_max, grad_tol),
        ) as pool:
            chunk = max(1, len(units) // (workers * 4))
            records = list(pool.map(_worker_run, units, chunksize=chunk))
    summary = aggregate(records, plan, net, mode)
    summary.counters.clean_forwards = 1
    summary.counters.gradient_passes = 1
    return records, summary
