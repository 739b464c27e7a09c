"""Bit-exact single-bitflip algebra on IEEE-754 32-bit floats.

Bit index convention: 31 = sign, 30..23 = exponent, 22..0 = mantissa,
i.e. plain bit positions of the little-endian uint32 encoding.
"""

import math

import numpy as np

SIGN_BIT = 31
EXPONENT_LO, EXPONENT_HI = 23, 30
N_BITS = 32


def flip_bit(x: float, bit: int) -> float:
    """Toggle one bit of the float32 encoding of x and return the result.

    Involution: flip_bit(flip_bit(x, i), i) == x bitwise for every i.
    """
    if not 0 <= bit < N_BITS:
        raise ValueError(f"bit index {bit} outside [0, 31]")
    u = np.float32(x).view(np.uint32)
    return float(np.uint32(u ^ np.uint32(1 << bit)).view(np.float32))


def flip_bit_array(arr: np.ndarray, bit: int) -> np.ndarray:
    """Vectorized flip_bit over a float32 array."""
    if not 0 <= bit < N_BITS:
        raise ValueError(f"bit index {bit} outside [0, 31]")
    a = np.ascontiguousarray(arr, dtype=np.float32)
    return (a.view(np.uint32) ^ np.uint32(1 << bit)).view(np.float32)


def exact_epsilon(x: float, bit: int) -> float:
    """Error added to x by flipping one encoding bit, in float64.

    Sign convention: flipping a 0->1 exponent/mantissa bit of a positive x
    yields epsilon > 0, a 1->0 flip yields epsilon < 0 (mirrored for x < 0);
    a sign-bit flip yields exactly -2x.  A flip that lands on NaN is
    reported as NaN, which downstream classification treats as positive
    overflow.
    """
    if not math.isfinite(x):
        raise ValueError("exact_epsilon requires finite x")
    flipped = flip_bit(x, bit)
    return float(np.float64(flipped) - np.float64(np.float32(x)))


def epsilon_array(arr: np.ndarray, bit: int) -> np.ndarray:
    """Vectorized exact_epsilon: flipped minus clean, computed in float64."""
    a = np.ascontiguousarray(arr, dtype=np.float32)
    with np.errstate(invalid="ignore"):  # flips may land on signaling NaN
        return flip_bit_array(a, bit).astype(np.float64) - a.astype(np.float64)


def approx_pow2(eps: float, rho_max: int = 10) -> float:
    """Map an error to its signed power-of-two representative.

    Returns sign(eps) * 2**round(log2|eps|) with round-half-to-even in the
    log2 domain.  Results with magnitude below 2**-rho_max collapse to 0.0
    (the masked band); results above 2**rho_max, infinities and NaN map to
    +/-inf (NaN to +inf).
    """
    if math.isnan(eps):
        return math.inf
    if eps == 0.0:
        return 0.0
    sign = 1.0 if eps > 0 else -1.0
    if math.isinf(eps):
        return sign * math.inf
    rho = float(np.round(np.log2(abs(eps))))
    if 2.0 ** rho < 2.0 ** (-rho_max):
        return 0.0
    if 2.0 ** rho > 2.0 ** rho_max:
        return sign * math.inf
    return sign * 2.0 ** rho
