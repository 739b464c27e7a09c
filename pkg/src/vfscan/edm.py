"""Error distribution maps over a signed power-of-two grid.

A grid with exponent bound rho_max carries the signed candidate values
+/-2^rho for rho in [-rho_max, rho_max].  Output errors are binned into:

  * one masked band (-2^-rho_max, +2^-rho_max), open on both sides,
  * finite bins closed toward zero: [2^k, 2^(k+1)) keyed by +2^k and
    (-2^(k+1), -2^k] keyed by -2^k, for k in [-rho_max, rho_max - 1],
  * two overflow bins [2^rho_max, +inf] and [-inf, -2^rho_max] (NaN counts
    as positive overflow) which absorb the extreme values +/-2^rho_max.

Closing the finite bins toward zero makes bin membership line up exactly
with the half-open vulnerability ranges (-inf, d-] and [d+, +inf).
"""

from dataclasses import dataclass, field

import numpy as np

from .bitflip import epsilon_array
from .errors import AnalysisError


@dataclass(frozen=True)
class CvvGrid:
    """Signed power-of-two candidate grid with mask and overflow bins."""

    rho_max: int = 10

    def __post_init__(self):
        if self.rho_max < 1:
            raise ValueError("rho_max must be >= 1")

    @property
    def exponents(self) -> np.ndarray:
        """Finite-bin exponents k, ascending: -rho_max .. rho_max-1."""
        return np.arange(-self.rho_max, self.rho_max)

    @property
    def cvvs(self) -> np.ndarray:
        """All signed candidate values, ascending (2*(2*rho_max+1) of them)."""
        mags = 2.0 ** np.arange(-self.rho_max, self.rho_max + 1)
        return np.concatenate([-mags[::-1], mags])

    @property
    def n_finite(self) -> int:
        return 2 * self.rho_max

    @property
    def n_bins(self) -> int:
        # neg overflow + neg finite + mask + pos finite + pos overflow
        return 2 * self.n_finite + 3

    @property
    def mask_bin(self) -> int:
        return 1 + self.n_finite

    @property
    def neg_overflow_bin(self) -> int:
        return 0

    @property
    def pos_overflow_bin(self) -> int:
        return self.n_bins - 1

    def bin_cvv(self, b: int) -> float:
        """Representative signed CVV of bin b (0.0 for the mask bin)."""
        if b == self.mask_bin:
            return 0.0
        if b == self.neg_overflow_bin:
            return -(2.0 ** self.rho_max)
        if b == self.pos_overflow_bin:
            return 2.0 ** self.rho_max
        if 0 < b < self.mask_bin:
            # negative finite bins ascend from -2^(rho_max-1) key downward:
            # bin 1 keys -2^(rho_max-1), bin n_finite keys -2^-rho_max
            k = self.rho_max - 1 - (b - 1)
            return -(2.0 ** k)
        k = -self.rho_max + (b - self.mask_bin - 1)
        return 2.0 ** k

    def classify(self, errors: np.ndarray) -> np.ndarray:
        """Vectorized bin index for each error value.

        Uses frexp so that exact powers of two land in the bin they key
        (no log rounding at the boundaries).
        """
        e = np.asarray(errors, dtype=np.float64)
        out = np.full(e.shape, self.mask_bin, dtype=np.int64)
        nan = np.isnan(e)
        posinf = np.isposinf(e) | nan
        neginf = np.isneginf(e)
        finite = ~(nan | posinf | neginf)
        nonzero = finite & (e != 0.0)

        m, ex = np.frexp(np.abs(e, where=nonzero, out=np.ones_like(e)))
        k = ex - 1  # floor(log2 |e|) since m in [0.5, 1)
        neg = nonzero & (e < 0.0)
        pos = nonzero & (e > 0.0)

        out[posinf] = self.pos_overflow_bin
        out[neginf] = self.neg_overflow_bin
        out[pos & (k >= self.rho_max)] = self.pos_overflow_bin
        out[neg & (k >= self.rho_max)] = self.neg_overflow_bin
        pf = pos & (k >= -self.rho_max) & (k < self.rho_max)
        nf = neg & (k >= -self.rho_max) & (k < self.rho_max)
        out[pf] = self.mask_bin + 1 + (k[pf] + self.rho_max)
        out[nf] = 1 + (self.rho_max - 1 - k[nf])
        return out

    def counts(self, errors: np.ndarray) -> np.ndarray:
        return np.bincount(self.classify(errors).ravel(), minlength=self.n_bins)


@dataclass(frozen=True)
class ErrorDistributionMap:
    """Histogram of output errors over a CvvGrid, with cumulative form."""

    grid: CvvGrid
    counts: np.ndarray  # int64, len == grid.n_bins
    total: int = field(default=0)

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "counts", counts)
        total = int(counts.sum()) if self.total == 0 else self.total
        object.__setattr__(self, "total", total)
        if counts.shape != (self.grid.n_bins,):
            raise AnalysisError(
                f"EDM counts length {counts.shape} != {self.grid.n_bins} bins")
        if total <= 0:
            raise AnalysisError("EDM built from an empty error list")
        if counts.sum() != total:
            raise AnalysisError("EDM counts do not sum to the declared total")

    @property
    def masses(self) -> np.ndarray:
        return self.counts / self.total

    @property
    def cdf(self) -> np.ndarray:
        """Cumulative mass over bins in ascending value order."""
        return np.cumsum(self.masses)

    def mass_at_least(self, delta_pos: float) -> float:
        """Mass of bins keyed by a CVV >= delta_pos, plus positive overflow."""
        g = self.grid
        total = self.counts[g.pos_overflow_bin]
        if np.isinf(delta_pos):
            return total / self.total
        for b in range(g.mask_bin + 1, g.pos_overflow_bin):
            if g.bin_cvv(b) >= delta_pos:
                total += self.counts[b]
        return total / self.total

    def mass_at_most(self, delta_neg: float) -> float:
        """Mass of bins keyed by a CVV <= delta_neg, plus negative overflow."""
        g = self.grid
        total = self.counts[g.neg_overflow_bin]
        if np.isinf(delta_neg):
            return total / self.total
        for b in range(1, g.mask_bin):
            if g.bin_cvv(b) <= delta_neg:
                total += self.counts[b]
        return total / self.total


def build_edm(errors: np.ndarray, grid: CvvGrid) -> ErrorDistributionMap:
    """Bin a flat list of output errors into an ErrorDistributionMap."""
    errors = np.asarray(errors)
    if errors.size == 0:
        raise AnalysisError("cannot build an EDM from an empty error list")
    return ErrorDistributionMap(grid, grid.counts(errors))


def edm_from_counts(counts: np.ndarray, grid: CvvGrid) -> ErrorDistributionMap:
    return ErrorDistributionMap(grid, counts)


@dataclass(frozen=True)
class Vvss:
    """CVVs with nonzero mass, split into the four exploration spaces."""

    neg_outer: tuple[float, ...]  # members <= -1, magnitude ascending
    neg_inner: tuple[float, ...]  # members in (-1, 0), magnitude ascending
    pos_inner: tuple[float, ...]  # members in (0, 1), magnitude ascending
    pos_outer: tuple[float, ...]  # members >= 1, magnitude ascending

    @property
    def members(self) -> tuple[float, ...]:
        return self.neg_outer + self.neg_inner + self.pos_inner + self.pos_outer

    def side(self, sign: int) -> tuple[tuple[float, ...], tuple[float, ...]]:
        """(inner, outer) candidate lists for one sign, magnitude ascending."""
        if sign > 0:
            return self.pos_inner, self.pos_outer
        return self.neg_inner, self.neg_outer


def derive_vvss(edm: ErrorDistributionMap) -> Vvss:
    """Collect the CVVs whose distribution ratio is nonzero.

    Only finite bins contribute members: mass beyond the grid is assumed
    critical outright (it is vulnerable no matter where the thresholds
    land), so there is nothing to probe for it.
    """
    g = edm.grid
    neg_outer, neg_inner, pos_inner, pos_outer = [], [], [], []
    for b in range(1, g.n_bins - 1):
        if b == g.mask_bin or edm.counts[b] == 0:
            continue
        v = g.bin_cvv(b)
        if v <= -1.0:
            neg_outer.append(v)
        elif v < 0.0:
            neg_inner.append(v)
        elif v < 1.0:
            pos_inner.append(v)
        else:
            pos_outer.append(v)
    key = lambda x: abs(x)
    return Vvss(
        tuple(sorted(neg_outer, key=key)),
        tuple(sorted(neg_inner, key=key)),
        tuple(sorted(pos_inner, key=key)),
        tuple(sorted(pos_outer, key=key)),
    )


def neuron_error_analysis(inputs: np.ndarray, weights: np.ndarray,
                          valid: np.ndarray | None = None) -> np.ndarray:
    """All candidate output errors of a neuron under single input bitflips.

    For each bit position the flip is applied to every input element at
    once; the per-element differences times the matching weights are the
    output errors each single-fault scenario would add.  Entries flagged
    invalid (zero padding, not a stored value) are dropped.

    Returns a float64 array of 32 * n_valid errors, ordered (bit, element).
    """
    x = np.ascontiguousarray(inputs, dtype=np.float32).ravel()
    w = np.ascontiguousarray(weights, dtype=np.float32).ravel()
    if x.shape != w.shape:
        raise AnalysisError(
            f"inputs {x.shape} and weights {w.shape} differ in size")
    if valid is not None:
        keep = np.asarray(valid, dtype=bool).ravel()
        x, w = x[keep], w[keep]
    w64 = w.astype(np.float64)
    out = np.empty((32, x.size), dtype=np.float64)
    with np.errstate(invalid="ignore"):  # NaN flips times zero weights
        for bit in range(32):
            out[bit] = epsilon_array(x, bit) * w64
    return out.ravel()


def filter_error_analysis(layer_ifmaps: np.ndarray, filter_weights: np.ndarray,
                          stride: int = 1, padding: int = 0) -> np.ndarray:
    """Pooled channel errors under single bitflips of one filter's weights.

    layer_ifmaps is one image's input to the conv layer, sliced to the
    channels this filter touches (shape c x H x W); filter_weights is the
    matching c x n x n filter.  For every weight element and bit, the
    weight error times each input patch value the weight meets while
    sliding gives one candidate output error per position.

    Returns float64 errors ordered (bit, weight element, position).
    """
    from .engine import im2col  # deferred: engine imports nothing from here

    w = np.ascontiguousarray(filter_weights, dtype=np.float32)
    if layer_ifmaps.ndim != 3 or w.ndim != 3:
        raise AnalysisError("filter_error_analysis expects 3D ifmaps and weights")
    if layer_ifmaps.shape[0] != w.shape[0]:
        raise AnalysisError(
            f"filter channels {w.shape[0]} != ifmap channels {layer_ifmaps.shape[0]}")
    k = w.shape[1]
    cols, _, _ = im2col(layer_ifmaps[None].astype(np.float32), k, stride, padding)
    cols64 = cols[0].astype(np.float64)          # (c*k*k, positions)
    wflat = w.ravel()
    out = np.empty((32, wflat.size, cols64.shape[1]), dtype=np.float64)
    with np.errstate(invalid="ignore"):
        for bit in range(32):
            eps = epsilon_array(wflat, bit)      # (c*k*k,)
            out[bit] = eps[:, None] * cols64
    return out.ravel()
