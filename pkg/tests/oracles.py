"""Independent brute-force oracles.

Everything here is deliberately written the slow, obvious way (loops,
exact rationals) and shares no code with the fast paths it checks.
"""

import math
from fractions import Fraction

import numpy as np

from vfscan.bitflip import flip_bit


def naive_conv2d(x, weight, bias, stride=1, padding=1, groups=1):
    """Direct triple-loop convolution, float64 accumulation."""
    b, c_in, h, w = x.shape
    c_out, c_in_g, k, _ = weight.shape
    xp = np.zeros((b, c_in, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.zeros((b, c_out, ho, wo), dtype=np.float64)
    och_per_g = c_out // groups
    for n in range(b):
        for oc in range(c_out):
            gi = oc // och_per_g
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ic in range(c_in_g):
                        for ky in range(k):
                            for kx in range(k):
                                acc += float(xp[n, gi * c_in_g + ic,
                                                oy * stride + ky, ox * stride + kx]) \
                                    * float(weight[oc, ic, ky, kx])
                    out[n, oc, oy, ox] = acc + (float(bias[oc]) if bias is not None else 0.0)
    return out


def naive_maxpool(x, k, stride, padding=0):
    b, c, h, w = x.shape
    xp = np.full((b, c, h + 2 * padding, w + 2 * padding), -np.inf, dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.zeros((b, c, ho, wo), dtype=np.float64)
    for n in range(b):
        for ci in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    out[n, ci, oy, ox] = xp[n, ci, oy * stride:oy * stride + k,
                                            ox * stride:ox * stride + k].max()
    return out


def naive_avgpool(x, k, stride, padding=0):
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.zeros((b, c, ho, wo), dtype=np.float64)
    for n in range(b):
        for ci in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    out[n, ci, oy, ox] = xp[n, ci, oy * stride:oy * stride + k,
                                            ox * stride:ox * stride + k].mean()
    return out


def naive_linear(x, weight, bias):
    b = x.shape[0]
    out_f, in_f = weight.shape
    out = np.zeros((b, out_f), dtype=np.float64)
    for n in range(b):
        for o in range(out_f):
            acc = 0.0
            for i in range(in_f):
                acc += float(x[n, i]) * float(weight[o, i])
            out[n, o] = acc + (float(bias[o]) if bias is not None else 0.0)
    return out


def naive_batchnorm(x, gamma, beta, mean, var, eps):
    b, c = x.shape[:2]
    out = np.zeros(x.shape, dtype=np.float64)
    for ci in range(c):
        s = float(gamma[ci]) / math.sqrt(float(var[ci]) + eps)
        out[:, ci] = (x[:, ci].astype(np.float64) - float(mean[ci])) * s + float(beta[ci])
    return out


# ---------------------------------------------------------------------------
# bit-level error oracles

def brute_neuron_errors(inputs, weights):
    """Per-element single-flip errors via exact full-dot differences.

    For each (bit, element): flip that one element, form the whole dot
    product, subtract the clean dot product.  Rational arithmetic keeps
    the subtraction exact; non-finite flips fall back to IEEE float64.
    Order matches the fast path: bit-major, then element.
    """
    x = np.asarray(inputs, dtype=np.float32).ravel()
    w = np.asarray(weights, dtype=np.float32).ravel()
    terms = [Fraction(float(xv)) * Fraction(float(wv)) for xv, wv in zip(x, w)]
    clean = sum(terms)
    out = []
    for bit in range(32):
        for j in range(x.size):
            xf = flip_bit(float(x[j]), bit)
            if math.isfinite(xf):
                faulty = clean - terms[j] + Fraction(xf) * Fraction(float(w[j]))
                out.append(float(faulty - clean))
            else:
                rest = float(clean - terms[j])
                out.append((xf * float(w[j]) + rest) - float(clean))
    return np.array(out, dtype=np.float64)


def brute_filter_errors(ifmaps, filt, stride=1, padding=0):
    """Flip one weight bit, reconvolve the whole channel, subtract clean.

    Exact rational convolution; order matches the fast path
    (bit, weight element, output position).
    """
    c, h, w = ifmaps.shape
    k = filt.shape[1]
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1

    def conv(weights_frac):
        out = []
        for oy in range(ho):
            for ox in range(wo):
                acc = Fraction(0)
                for ci in range(c):
                    for ky in range(k):
                        for kx in range(k):
                            iy, ix = oy * stride + ky - padding, ox * stride + kx - padding
                            if 0 <= iy < h and 0 <= ix < w:
                                acc += Fraction(float(ifmaps[ci, iy, ix])) \
                                    * weights_frac[(ci, ky, kx)]
                out.append(acc)
        return out

    wf32 = np.asarray(filt, dtype=np.float32)
    base = {(ci, ky, kx): Fraction(float(wf32[ci, ky, kx]))
            for ci in range(c) for ky in range(k) for kx in range(k)}
    clean = conv(base)
    out = []
    for bit in range(32):
        for ci in range(c):
            for ky in range(k):
                for kx in range(k):
                    flipped = flip_bit(float(wf32[ci, ky, kx]), bit)
                    if math.isfinite(flipped):
                        faulty = dict(base)
                        faulty[(ci, ky, kx)] = Fraction(flipped)
                        out.extend(float(a - b) for a, b in zip(conv(faulty), clean))
                    else:
                        eps = flipped - float(wf32[ci, ky, kx])
                        for oy in range(ho):
                            for ox in range(wo):
                                iy, ix = oy * stride + ky - padding, ox * stride + kx - padding
                                tap = float(ifmaps[ci, iy, ix]) \
                                    if 0 <= iy < h and 0 <= ix < w else 0.0
                                out.append(eps * tap)
    return np.array(out, dtype=np.float64)


def naive_bin(errors, rho_max=10):
    """Two-loop interval binning, independent of the frexp fast path.

    Returns counts in the same bin order as CvvGrid: negative overflow,
    negative bins ascending, mask, positive bins ascending, overflow.
    """
    n_fin = 2 * rho_max
    counts = np.zeros(2 * n_fin + 3, dtype=np.int64)
    mask_bin = 1 + n_fin
    top = 2.0 ** rho_max
    bottom = 2.0 ** (-rho_max)
    for e in np.asarray(errors, dtype=np.float64).ravel():
        if math.isnan(e) or e >= top:
            counts[-1] += 1
        elif e <= -top:
            counts[0] += 1
        elif -bottom < e < bottom:
            counts[mask_bin] += 1
        elif e > 0:
            for i, k in enumerate(range(-rho_max, rho_max)):
                if 2.0 ** k <= e < 2.0 ** (k + 1):
                    counts[mask_bin + 1 + i] += 1
                    break
        else:
            for i, k in enumerate(range(-rho_max, rho_max)):
                if -(2.0 ** (k + 1)) < e <= -(2.0 ** k):
                    counts[n_fin - i] += 1
                    break
    return counts


# ---------------------------------------------------------------------------
# search / sizing oracles

def scan_delta(probe, vvss, sign):
    """Linear scan over every member of one sign, smallest magnitude first.

    Returns (delta, flags).  flags is the per-member misclassification
    list; a non-monotone pattern (True before a later False) means the
    binary search's ordering assumption does not hold for this pair.
    """
    inner, outer = vvss.side(sign)
    members = list(inner) + list(outer)
    flags = [probe(v) for v in members]
    delta = next((v for v, f in zip(members, flags) if f),
                 math.copysign(math.inf, sign))
    return delta, flags


def is_monotone(flags):
    return all(not (flags[i] and not flags[j])
               for i in range(len(flags)) for j in range(i + 1, len(flags)))


def exact_sample_size(n_space, e, t, p):
    """Eq-style sample size with exact rational arithmetic."""
    ef, tf, pf = Fraction(float(e)), Fraction(float(t)), Fraction(float(p))
    denom = 1 + ef * ef * (n_space - 1) / (tf * tf * pf * (1 - pf))
    n = Fraction(n_space) / denom
    return min(n_space, max(1, math.ceil(n)))


# ---------------------------------------------------------------------------
# float64 reference forward (for finite-difference gradient checks)

def naive_forward(net, image, site=None, delta=0.0):
    """Float64 forward over the layer DAG, with an optional additive
    injection at one layer output.  Returns (logits, pattern) where
    pattern captures relu signs and maxpool argmax choices so callers can
    verify local linearity between two evaluations."""
    acts = []
    pattern = []
    x0 = np.asarray(image, dtype=np.float64)
    if x0.ndim == 3:
        x0 = x0[None]
    for i, l in enumerate(net.layers):
        ins = [x0 if s == -1 else acts[s] for s in l.inputs]
        x = ins[0]
        if l.kind == "conv2d":
            out = naive_conv2d(x, l.weight, l.bias, l.stride, l.padding, l.groups)
        elif l.kind == "relu":
            pattern.append(("relu", i, x > 0))
            out = np.where(x > 0, x, 0.0)
        elif l.kind == "maxpool":
            out = naive_maxpool(x, l.kernel, l.stride, l.padding)
            b, c, h, w = x.shape
            k, s, p = l.kernel, l.stride, l.padding
            xp = np.full((b, c, h + 2 * p, w + 2 * p), -np.inf)
            xp[:, :, p:p + h, p:p + w] = x
            ho = (h + 2 * p - k) // s + 1
            wo = (w + 2 * p - k) // s + 1
            arg = np.zeros((b, c, ho, wo), dtype=np.int64)
            for n in range(b):
                for ci in range(c):
                    for oy in range(ho):
                        for ox in range(wo):
                            win = xp[n, ci, oy * s:oy * s + k, ox * s:ox * s + k]
                            arg[n, ci, oy, ox] = int(np.argmax(win.ravel()))
            pattern.append(("maxpool", i, arg))
        elif l.kind == "avgpool":
            out = naive_avgpool(x, l.kernel, l.stride, l.padding)
        elif l.kind == "globalavgpool":
            out = x.mean(axis=(2, 3), keepdims=True)
        elif l.kind == "linear":
            out = naive_linear(x, l.weight, l.bias)
        elif l.kind == "batchnorm":
            out = naive_batchnorm(x, l.gamma, l.beta, l.running_mean,
                                  l.running_var, l.eps)
        elif l.kind == "residual-add":
            out = ins[0] + ins[1]
        elif l.kind == "flatten":
            out = x.reshape(x.shape[0], -1)
        else:
            raise ValueError(l.kind)
        if site is not None and i == site.layer:
            out = out.copy()
            if out.ndim == 4:
                if site.pos is None:
                    out[:, site.channel] += delta
                else:
                    out[:, site.channel, site.pos[0], site.pos[1]] += delta
            else:
                out[:, site.channel] += delta
        acts.append(out)
    return acts[-1], pattern


def same_pattern(pa, pb):
    return len(pa) == len(pb) and all(
        ka == kb and ia == ib and np.array_equal(aa, ab)
        for (ka, ia, aa), (kb, ib, ab) in zip(pa, pb))


def fd_gradient(net, image, golden_class, site, h=1e-3):
    """Central finite difference of the misclassification loss, float64.

    Returns None when the +/-h evaluations cross a relu kink or change a
    maxpool winner (locally nonlinear: the difference quotient is not the
    gradient there)."""
    lo, pat_lo = naive_forward(net, image, site, -h)
    hi, pat_hi = naive_forward(net, image, site, +h)
    if not same_pattern(pat_lo, pat_hi):
        return None

    def loss(logits):
        row = logits[0]
        return float(row.sum() - net.n_classes * row[golden_class])

    return (loss(hi) - loss(lo)) / (2 * h)


def confirm_gradient_skips(ctx, units, records):
    """Exhaustively verify gradient-gate sentinels: for every skipped
    (unit, image, sign), inject every member on that side and confirm no
    misclassification.  Returns (checked, violations)."""
    from vfscan.analysis import unit_edm_counts
    from vfscan.edm import derive_vvss, edm_from_counts
    from vfscan.engine import InjectionSpec, classify_logits, forward_injected

    checked = violations = 0
    for unit, rec in zip(units, records):
        skip_any = rec.grad_skipped_pos.any() or rec.grad_skipped_neg.any()
        if not skip_any:
            continue
        counts = unit_edm_counts(ctx, unit)
        for i in range(ctx.batch.shape[0]):
            vvss = derive_vvss(edm_from_counts(counts[i], ctx.grid))
            for skipped, side in ((rec.grad_skipped_pos[i], +1),
                                  (rec.grad_skipped_neg[i], -1)):
                if not skipped:
                    continue
                checked += 1
                inner, outer = vvss.side(side)
                for v in list(inner) + list(outer):
                    out = forward_injected(
                        ctx.net, ctx.batch[i:i + 1],
                        InjectionSpec(unit.layer, unit.channel, unit.pos, float(v)))
                    if int(classify_logits(out)[0]) != ctx.golden[i]:
                        violations += 1
                        break
    return checked, violations
