"""Fused loops for the smooth layers (numba).

``padded`` is ``(B, H + 2r, W + 2r)``; ``kt`` is the kernel already reflected
through its origin so that cell ``(a, b)`` pairs with ``padded[i + a, j + b]``.

All three layers compute ``sum(v * e) / sum(e)`` over a window with
``e = exp(z - shift)``. Instead of a max shift per window, each image uses one
upper bound of its logits, and the sums are accumulated one kernel cell at a
time over whole rows. Windows whose largest weight comes out near the
underflow range are recomputed with their own max shift.
"""

import math

import numpy as np
from numba import njit

PCONV, LMORPH, SMORPH = 0, 1, 2
LOG_FLOOR = 1e-12
_SAFE_WEIGHT = 1e-280


@njit(cache=True, inline="always")
def _cell(kind, raw, k, log_k, p):
    # Returns (value, logit, d logit / d p, d logit / d value-or-input).
    if kind == PCONV:
        x = max(raw, LOG_FLOOR)
        return raw, p * math.log(x) + log_k, math.log(x), p / x
    v = raw + k
    if kind == LMORPH:
        x = max(v, LOG_FLOOR)
        return v, p * math.log(x), math.log(x), p / x
    return v, p * v, v, p


@njit(cache=True)
def _prepare(kind, padded, kt, p):
    """Per-pixel and per-cell factors shared by the forward and backward sweeps.

    Returns ``(shift, ea, ek, zb)``: cell value is ``padded + shift``. For
    PConv and SMorph the weight is ``ea[pixel] * ek[cell]``; for LMorph it is
    ``exp(p * log(v) - zb[image])``.
    """
    n, hp, wp = padded.shape
    side = kt.shape[0]
    shift = np.zeros_like(kt) if kind == PCONV else kt.copy()
    zb = np.zeros(n)
    if kind == LMORPH:
        kmin, kmax = kt.min(), kt.max()
        for b in range(n):
            lo = max(padded[b].min() + kmin, LOG_FLOOR)
            hi = max(padded[b].max() + kmax, LOG_FLOOR)
            zb[b] = max(p * math.log(lo), p * math.log(hi))
        return shift, np.ones((1, 1, 1)), np.ones((1, 1)), zb
    ea = np.empty_like(padded)
    for b in range(n):
        amax = -np.inf
        for i in range(hp):
            for j in range(wp):
                x = padded[b, i, j]
                a = p * math.log(max(x, LOG_FLOOR)) if kind == PCONV else p * x
                ea[b, i, j] = a
                amax = max(amax, a)
        for i in range(hp):
            for j in range(wp):
                ea[b, i, j] = math.exp(ea[b, i, j] - amax)
    ek = np.empty_like(kt)
    for a in range(side):
        for c in range(side):
            ek[a, c] = math.log(max(kt[a, c], LOG_FLOOR)) if kind == PCONV else p * kt[a, c]
    ek = np.exp(ek - ek.max())
    return shift, ea, ek, zb


@njit(cache=True)
def _window_exact(kind, padded, kt, p, b, i, j, e, vals):
    """Window ``(b, i, j)`` with its own max shift: fills ``e`` and ``vals``,
    returns (output, weight sum)."""
    side = kt.shape[0]
    zmax = -np.inf
    for a in range(side):
        for c in range(side):
            log_k = math.log(max(kt[a, c], LOG_FLOOR))
            v, zz, _, _ = _cell(kind, padded[b, i + a, j + c], kt[a, c], log_k, p)
            vals[a, c] = v
            e[a, c] = zz
            zmax = max(zmax, zz)
    num = 0.0
    den = 0.0
    for a in range(side):
        for c in range(side):
            w = math.exp(e[a, c] - zmax)
            e[a, c] = w
            num += vals[a, c] * w
            den += w
    return num / den, den


@njit(cache=True)
def _sweep_separable(padded, shift, ea, ek, b, num, den, emax):
    side = shift.shape[0]
    h, w = num.shape
    for a in range(side):
        for c in range(side):
            k = ek[a, c]
            sh = shift[a, c]
            for i in range(h):
                for j in range(w):
                    wgt = ea[b, i + a, j + c] * k
                    num[i, j] += (padded[b, i + a, j + c] + sh) * wgt
                    den[i, j] += wgt
                    emax[i, j] = max(emax[i, j], wgt)


@njit(cache=True)
def _sweep_power(padded, shift, p, z0, b, num, den, emax):
    side = shift.shape[0]
    h, w = num.shape
    for a in range(side):
        for c in range(side):
            sh = shift[a, c]
            for i in range(h):
                for j in range(w):
                    v = padded[b, i + a, j + c] + sh
                    wgt = math.exp(p * math.log(max(v, LOG_FLOOR)) - z0)
                    num[i, j] += v * wgt
                    den[i, j] += wgt
                    emax[i, j] = max(emax[i, j], wgt)


@njit(cache=True)
def _sweep(kind, padded, shift, ea, ek, p, zb, b, num, den, emax):
    num[:] = 0.0
    den[:] = 0.0
    emax[:] = 0.0
    if kind == LMORPH:
        _sweep_power(padded, shift, p, zb[b], b, num, den, emax)
    else:
        _sweep_separable(padded, shift, ea, ek, b, num, den, emax)


@njit(cache=True)
def window_forward(kind, padded, kt, p):
    n, hp, wp = padded.shape
    side = kt.shape[0]
    h, w = hp - side + 1, wp - side + 1
    out = np.empty((n, h, w))
    shift, ea, ek, zb = _prepare(kind, padded, kt, p)
    e = np.empty((side, side))
    vals = np.empty((side, side))
    num = np.empty((h, w))
    den = np.empty((h, w))
    emax = np.empty((h, w))
    for b in range(n):
        _sweep(kind, padded, shift, ea, ek, p, zb, b, num, den, emax)
        for i in range(h):
            for j in range(w):
                if emax[i, j] >= _SAFE_WEIGHT:
                    out[b, i, j] = num[i, j] / den[i, j]
                else:
                    out[b, i, j], _ = _window_exact(kind, padded, kt, p, b, i, j, e, vals)
    return out


@njit(cache=True)
def _backsweep_smorph(padded, shift, ea, ek, p, b, uw, out, d_padded, d_kt):
    side = shift.shape[0]
    h, w = out.shape
    d_p = 0.0
    for a in range(side):
        for c in range(side):
            k = ek[a, c]
            sh = shift[a, c]
            acc_p = 0.0
            acc_k = 0.0
            for i in range(h):
                for j in range(w):
                    v = padded[b, i + a, j + c] + sh
                    us = uw[i, j] * ea[b, i + a, j + c] * k
                    g_z = us * (v - out[i, j])
                    acc_p += g_z * v
                    g_in = us + g_z * p
                    d_padded[b, i + a, j + c] += g_in
                    acc_k += g_in
            d_p += acc_p
            d_kt[a, c] += acc_k
    return d_p


@njit(cache=True)
def _backsweep_pconv(padded, kt, ea, ek, p, lx, ix, b, uw, out, d_padded, d_kt):
    side = kt.shape[0]
    h, w = out.shape
    d_p = 0.0
    for a in range(side):
        for c in range(side):
            k = ek[a, c]
            acc_p = 0.0
            acc_k = 0.0
            for i in range(h):
                for j in range(w):
                    v = padded[b, i + a, j + c]
                    us = uw[i, j] * ea[b, i + a, j + c] * k
                    g_z = us * (v - out[i, j])
                    acc_p += g_z * lx[b, i + a, j + c]
                    d_padded[b, i + a, j + c] += us + g_z * p * ix[b, i + a, j + c]
                    acc_k += g_z
            d_p += acc_p
            d_kt[a, c] += acc_k / kt[a, c]
    return d_p


@njit(cache=True)
def _sweep_power_cached(padded, shift, p, z0, b, num, den, emax, wbuf, lbuf):
    # _sweep_power that also keeps each cell's weight and log value
    side = shift.shape[0]
    h, w = num.shape
    num[:] = 0.0
    den[:] = 0.0
    emax[:] = 0.0
    for a in range(side):
        for c in range(side):
            sh = shift[a, c]
            for i in range(h):
                for j in range(w):
                    v = padded[b, i + a, j + c] + sh
                    lv = math.log(max(v, LOG_FLOOR))
                    wgt = math.exp(p * lv - z0)
                    lbuf[a, c, i, j] = lv
                    wbuf[a, c, i, j] = wgt
                    num[i, j] += v * wgt
                    den[i, j] += wgt
                    emax[i, j] = max(emax[i, j], wgt)


@njit(cache=True)
def _backsweep_lmorph(padded, shift, p, b, uw, out, wbuf, lbuf, d_padded, d_kt):
    side = shift.shape[0]
    h, w = out.shape
    d_p = 0.0
    for a in range(side):
        for c in range(side):
            sh = shift[a, c]
            acc_p = 0.0
            acc_k = 0.0
            for i in range(h):
                for j in range(w):
                    v = padded[b, i + a, j + c] + sh
                    us = uw[i, j] * wbuf[a, c, i, j]
                    g_z = us * (v - out[i, j])
                    acc_p += g_z * lbuf[a, c, i, j]
                    g_in = us + g_z * p / max(v, LOG_FLOOR)
                    d_padded[b, i + a, j + c] += g_in
                    acc_k += g_in
            d_p += acc_p
            d_kt[a, c] += acc_k
    return d_p


@njit(cache=True)
def window_backward(kind, padded, kt, p, upstream):
    n, hp, wp = padded.shape
    side = kt.shape[0]
    h, w = hp - side + 1, wp - side + 1
    d_padded = np.zeros_like(padded)
    d_kt = np.zeros_like(kt)
    d_p = 0.0
    shift, ea, ek, zb = _prepare(kind, padded, kt, p)
    if kind == PCONV:
        safe = np.maximum(padded, LOG_FLOOR)
        lx, ix = np.log(safe), 1.0 / safe
    else:
        lx = ix = np.ones((1, 1, 1))
    e = np.empty((side, side))
    vals = np.empty((side, side))
    num = np.empty((h, w))
    den = np.empty((h, w))
    emax = np.empty((h, w))
    out = np.empty((h, w))
    uw = np.empty((h, w))
    cached = kind == LMORPH
    wbuf = np.empty((side, side, h, w) if cached else (1, 1, 1, 1))
    lbuf = np.empty_like(wbuf)
    for b in range(n):
        if cached:
            _sweep_power_cached(padded, shift, p, zb[b], b, num, den, emax, wbuf, lbuf)
        else:
            _sweep(kind, padded, shift, ea, ek, p, zb, b, num, den, emax)
        for i in range(h):
            for j in range(w):
                # upstream over the weight sum; windows handled exactly get 0 here
                if emax[i, j] >= _SAFE_WEIGHT:
                    out[i, j] = num[i, j] / den[i, j]
                    uw[i, j] = upstream[b, i, j] / den[i, j]
                else:
                    out[i, j] = 0.0
                    uw[i, j] = 0.0
        if kind == SMORPH:
            d_p += _backsweep_smorph(padded, shift, ea, ek, p, b, uw, out, d_padded, d_kt)
        elif kind == PCONV:
            d_p += _backsweep_pconv(padded, kt, ea, ek, p, lx, ix, b, uw, out, d_padded, d_kt)
        else:
            d_p += _backsweep_lmorph(padded, shift, p, b, uw, out, wbuf, lbuf, d_padded, d_kt)
        for i in range(h):
            for j in range(w):
                u = upstream[b, i, j]
                if emax[i, j] >= _SAFE_WEIGHT or u == 0.0:
                    continue
                o, dsum = _window_exact(kind, padded, kt, p, b, i, j, e, vals)
                for a in range(side):
                    for c in range(side):
                        us = u * e[a, c] / dsum
                        v = vals[a, c]
                        g_z = us * (v - o)
                        x = max(v, LOG_FLOOR)
                        dzdp, dzdv = (v, p) if kind == SMORPH else (math.log(x), p / x)
                        d_p += g_z * dzdp
                        g_in = us + g_z * dzdv
                        d_padded[b, i + a, j + c] += g_in
                        d_kt[a, c] += g_z / kt[a, c] if kind == PCONV else g_in
    return d_padded, d_kt, d_p
