"""Convolution and normalization inner kernels.

Direct convolutions over N,C,T,H,W tensors with implicit zero 'same'
padding, written for LLVM auto-vectorization and compiled with numba when
available: inner loops always run over pre-sliced contiguous views starting
at index 0, which is what lets LLVM emit SIMD. Parallel chunks write
disjoint outputs, so results are bit-deterministic regardless of thread
scheduling. A pure-numpy im2col fallback keeps the package usable without
numba; both paths share one arithmetic contract and one oracle test suite.

Spatial kernels see x as (N,C,T,H,W); temporal kernels see it as
(N,C,T,H*W). Output extents follow floor((in + 2p - k)/stride) + 1 with
p = (k-1)//2 and are computed by the callers.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(f):
            return f
        return deco

    prange = range


# ---------------------------------------------------------------------------
# numba kernels

@njit(parallel=True, fastmath=True, cache=True)
def _nb_spatial_fwd(x, w, sh, sw, ho, wo):
    n_, c, t, h, wd = x.shape
    co, _, kh, kw = w.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    phlen = (wd + sw - 1) // sw
    y = np.empty((n_, co, t, ho, wo), dtype=x.dtype)
    for q in prange(n_ * t):
        n = q // t
        ti = q % t
        acc = np.empty((co, wo), dtype=x.dtype)
        phases = np.empty((sw, phlen), dtype=x.dtype)
        for i in range(ho):
            acc[:, :] = 0.0
            for ic in range(c):
                for a in range(kh):
                    ii = i * sh + a - ph
                    if ii < 0 or ii >= h:
                        continue
                    row = x[n, ic, ti, ii]
                    if sw > 1:
                        # copy each stride-phase subsequence once; every
                        # kernel offset then reads a contiguous view
                        for p in range(sw):
                            dst = phases[p]
                            k = 0
                            for pos in range(p, wd, sw):
                                dst[k] = row[pos]
                                k += 1
                    for b in range(kw):
                        off = b - pw
                        lo = 0 if off >= 0 else (-off + sw - 1) // sw
                        hi = (wd - 1 - off) // sw + 1
                        if hi > wo:
                            hi = wo
                        m = hi - lo
                        if m <= 0:
                            continue
                        s0 = lo * sw + off
                        if sw == 1:
                            sub = row[s0:s0 + m]
                        else:
                            p = s0 % sw
                            sub = phases[p][s0 // sw:s0 // sw + m]
                        for oc in range(co):
                            wv = w[oc, ic, a, b]
                            dst = acc[oc, lo:hi]
                            for j in range(m):
                                dst[j] += wv * sub[j]
            y[n, :, ti, i, :] = acc
    return y


@njit(parallel=True, fastmath=True, cache=True)
def _nb_spatial_bwd_x(gy, w, sh, sw, h, wd):
    n_, co, t, ho, wo = gy.shape
    _, c, kh, kw = w.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    gx = np.zeros((n_, c, t, h, wd), dtype=gy.dtype)
    for q in prange(n_ * t):
        n = q // t
        ti = q % t
        tmp = np.empty(wo, dtype=gy.dtype)
        for i in range(ho):
            for ic in range(c):
                for a in range(kh):
                    ii = i * sh + a - ph
                    if ii < 0 or ii >= h:
                        continue
                    row = gx[n, ic, ti, ii]
                    for b in range(kw):
                        off = b - pw
                        lo = 0 if off >= 0 else (-off + sw - 1) // sw
                        hi = (wd - 1 - off) // sw + 1
                        if hi > wo:
                            hi = wo
                        m = hi - lo
                        if m <= 0:
                            continue
                        acc = tmp[:m]
                        acc[:] = 0.0
                        for oc in range(co):
                            wv = w[oc, ic, a, b]
                            g = gy[n, oc, ti, i, lo:hi]
                            for j in range(m):
                                acc[j] += wv * g[j]
                        s0 = lo * sw + off
                        if sw == 1:
                            dst = row[s0:s0 + m]
                            for j in range(m):
                                dst[j] += acc[j]
                        else:
                            dst = row[s0:s0 + (m - 1) * sw + 1:sw]
                            for j in range(m):
                                dst[j] += acc[j]
    return gx


@njit(parallel=True, fastmath=True, cache=True)
def _nb_spatial_bwd_w(x, gy, sh, sw, kh, kw):
    n_, c, t, h, wd = x.shape
    co = gy.shape[1]
    ho, wo = gy.shape[3], gy.shape[4]
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    phlen = (wd + sw - 1) // sw
    gw = np.zeros((co, c, kh, kw), dtype=x.dtype)
    # parallel over (input channel, kernel row): each chunk owns gw[:, ic, a, :]
    for r in prange(c * kh):
        ic = r // kh
        a = r % kh
        local = np.zeros((co, kw), dtype=x.dtype)
        phases = np.empty((sw, phlen), dtype=x.dtype)
        for n in range(n_):
            for ti in range(t):
                for i in range(ho):
                    ii = i * sh + a - ph
                    if ii < 0 or ii >= h:
                        continue
                    row = x[n, ic, ti, ii]
                    if sw > 1:
                        for p in range(sw):
                            dst = phases[p]
                            k = 0
                            for pos in range(p, wd, sw):
                                dst[k] = row[pos]
                                k += 1
                    for oc in range(co):
                        grow = gy[n, oc, ti, i]
                        for b in range(kw):
                            off = b - pw
                            lo = 0 if off >= 0 else (-off + sw - 1) // sw
                            hi = (wd - 1 - off) // sw + 1
                            if hi > wo:
                                hi = wo
                            m = hi - lo
                            if m <= 0:
                                continue
                            s0 = lo * sw + off
                            g = grow[lo:hi]
                            if sw == 1:
                                sub = row[s0:s0 + m]
                            else:
                                p = s0 % sw
                                sub = phases[p][s0 // sw:s0 // sw + m]
                            s = 0.0
                            for j in range(m):
                                s += g[j] * sub[j]
                            local[oc, b] += s
        gw[:, ic, a, :] = local
    return gw


@njit(parallel=True, fastmath=True, cache=True)
def _nb_temporal_fwd(x, w, st, to):
    n_, c, t, hw = x.shape
    co, _, kt = w.shape
    pt = (kt - 1) // 2
    y = np.empty((n_, co, to, hw), dtype=x.dtype)
    for n in prange(n_):
        for ot in range(to):
            for oc in range(co):
                acc = y[n, oc, ot]
                acc[:] = 0.0
                for ic in range(c):
                    for a in range(kt):
                        tt = ot * st + a - pt
                        if tt < 0 or tt >= t:
                            continue
                        wv = w[oc, ic, a]
                        src = x[n, ic, tt]
                        for j in range(hw):
                            acc[j] += wv * src[j]
    return y


@njit(parallel=True, fastmath=True, cache=True)
def _nb_temporal_bwd_x(gy, w, st, t):
    n_, co, to, hw = gy.shape
    c = w.shape[1]
    kt = w.shape[2]
    pt = (kt - 1) // 2
    gx = np.zeros((n_, c, t, hw), dtype=gy.dtype)
    for n in prange(n_):
        for ot in range(to):
            for ic in range(c):
                for a in range(kt):
                    tt = ot * st + a - pt
                    if tt < 0 or tt >= t:
                        continue
                    dst = gx[n, ic, tt]
                    for oc in range(co):
                        wv = w[oc, ic, a]
                        g = gy[n, oc, ot]
                        for j in range(hw):
                            dst[j] += wv * g[j]
    return gx


@njit(parallel=True, fastmath=True, cache=True)
def _nb_temporal_bwd_w(x, gy, st, kt):
    n_, c, t, hw = x.shape
    co, to = gy.shape[1], gy.shape[2]
    pt = (kt - 1) // 2
    gw = np.zeros((co, c, kt), dtype=x.dtype)
    for oc in prange(co):
        for n in range(n_):
            for ot in range(to):
                g = gy[n, oc, ot]
                for ic in range(c):
                    for a in range(kt):
                        tt = ot * st + a - pt
                        if tt < 0 or tt >= t:
                            continue
                        src = x[n, ic, tt]
                        s = 0.0
                        for j in range(hw):
                            s += g[j] * src[j]
                        gw[oc, ic, a] += s
    return gw


@njit(parallel=True, cache=True)
def _nb_relu_fwd(x):
    xf = x.reshape(-1)
    y = np.empty_like(xf)
    for j in prange(xf.size):
        v = xf[j]
        y[j] = v if v > 0.0 else 0.0
    return y.reshape(x.shape)


@njit(parallel=True, cache=True)
def _nb_relu_bwd(x, g):
    xf = x.reshape(-1)
    gf = g.reshape(-1)
    out = np.empty_like(gf)
    for j in prange(gf.size):
        out[j] = gf[j] if xf[j] > 0.0 else 0.0
    return out.reshape(g.shape)


@njit(parallel=True, fastmath=True, cache=True)
def _nb_bn_train_fwd(x, gamma, beta, eps):
    """Per-channel batch mean/var (biased), then y = scale*x + shift.

    Returns (y, mu, var) with mu/var in float64.
    """
    n_, c = x.shape[0], x.shape[1]
    inner = x.shape[2] * x.shape[3] * x.shape[4]
    xf = x.reshape(n_, c, inner)
    count = n_ * inner
    mu = np.zeros(c, dtype=np.float64)
    var = np.zeros(c, dtype=np.float64)
    for ic in prange(c):
        s = 0.0
        for n in range(n_):
            row = xf[n, ic]
            for j in range(inner):
                s += row[j]
        m = s / count
        v = 0.0
        for n in range(n_):
            row = xf[n, ic]
            for j in range(inner):
                d = row[j] - m
                v += d * d
        mu[ic] = m
        var[ic] = v / count
    y = np.empty_like(x)
    yf = y.reshape(n_, c, inner)
    for q in prange(n_ * c):
        n = q // c
        ic = q % c
        inv = 1.0 / np.sqrt(var[ic] + eps)
        scale = x.dtype.type(gamma[ic] * inv)
        shift = x.dtype.type(beta[ic] - gamma[ic] * mu[ic] * inv)
        src = xf[n, ic]
        dst = yf[n, ic]
        for j in range(inner):
            dst[j] = scale * src[j] + shift
    return y, mu, var


@njit(parallel=True, fastmath=True, cache=True)
def _nb_bn_train_bwd(x, g, mu, var, gamma, eps):
    """Gradients for train-mode batchnorm.

    Returns (gx, dgamma, dbeta); the per-channel reductions run in float64.
    """
    n_, c = x.shape[0], x.shape[1]
    inner = x.shape[2] * x.shape[3] * x.shape[4]
    xf = x.reshape(n_, c, inner)
    gf = g.reshape(n_, c, inner)
    count = n_ * inner
    dgamma = np.zeros(c, dtype=np.float64)
    dbeta = np.zeros(c, dtype=np.float64)
    for ic in prange(c):
        inv = 1.0 / np.sqrt(var[ic] + eps)
        m = mu[ic]
        sb = 0.0
        sx = 0.0
        for n in range(n_):
            grow = gf[n, ic]
            xrow = xf[n, ic]
            for j in range(inner):
                sb += grow[j]
                sx += grow[j] * (xrow[j] - m) * inv
        dgamma[ic] = sx
        dbeta[ic] = sb
    gx = np.empty_like(g)
    gxf = gx.reshape(n_, c, inner)
    for q in prange(n_ * c):
        n = q // c
        ic = q % c
        inv = 1.0 / np.sqrt(var[ic] + eps)
        a = g.dtype.type(gamma[ic] * inv)
        # gx = a*g - (inv/count)*(s1 + xhat*s2), s1 = gamma*dbeta, s2 = gamma*dgamma
        s1 = gamma[ic] * dbeta[ic]
        s2 = gamma[ic] * dgamma[ic]
        c0 = g.dtype.type(inv / count * (s1 - s2 * mu[ic] * inv))
        c1 = g.dtype.type(inv / count * s2 * inv)
        grow = gf[n, ic]
        xrow = xf[n, ic]
        dst = gxf[n, ic]
        for j in range(inner):
            dst[j] = a * grow[j] - c0 - c1 * xrow[j]
    return gx, dgamma, dbeta


# ---------------------------------------------------------------------------
# numpy fallbacks (pad internally; im2col for convolutions)

def _np_pad_hw(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    n_, c, t, h, wd = x.shape
    out = np.zeros((n_, c, t, h + 2 * ph, wd + 2 * pw), dtype=x.dtype)
    out[:, :, :, ph:ph + h, pw:pw + wd] = x
    return out


def _np_spatial_fwd(x, w, sh, sw, ho, wo):
    n_, c, t, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = _np_pad_hw(x, (kh - 1) // 2, (kw - 1) // 2)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(3, 4))
    win = win[:, :, :, ::sh, ::sw]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6).reshape(n_ * t * ho * wo, c * kh * kw)
    y = cols @ w.reshape(co, -1).T
    return np.ascontiguousarray(
        y.reshape(n_, t, ho, wo, co).transpose(0, 4, 1, 2, 3)
    )


def _np_spatial_bwd_x(gy, w, sh, sw, h, wd):
    n_, co, t, ho, wo = gy.shape
    _, c, kh, kw = w.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    gym = gy.transpose(0, 2, 3, 4, 1).reshape(n_ * t * ho * wo, co)
    gcols = (gym @ w.reshape(co, -1)).reshape(n_ * t, ho, wo, c, kh, kw)
    gxp = np.zeros((n_ * t, c, h + 2 * ph, wd + 2 * pw), dtype=gy.dtype)
    for a in range(kh):
        for b in range(kw):
            gxp[:, :, a:a + sh * ho:sh, b:b + sw * wo:sw] += (
                gcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
            )
    gxp = gxp[:, :, ph:ph + h, pw:pw + wd]
    return np.ascontiguousarray(
        gxp.reshape(n_, t, c, h, wd).transpose(0, 2, 1, 3, 4)
    )


def _np_spatial_bwd_w(x, gy, sh, sw, kh, kw):
    n_, c, t, h, wd = x.shape
    co = gy.shape[1]
    ho, wo = gy.shape[3], gy.shape[4]
    xp = _np_pad_hw(x, (kh - 1) // 2, (kw - 1) // 2)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(3, 4))
    win = win[:, :, :, ::sh, ::sw]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6).reshape(n_ * t * ho * wo, c * kh * kw)
    gym = gy.transpose(0, 2, 3, 4, 1).reshape(n_ * t * ho * wo, co)
    return (gym.T @ cols).reshape(co, c, kh, kw)


def _np_pad_t(x, pt):
    if pt == 0:
        return x
    n_, c, t, hw = x.shape
    out = np.zeros((n_, c, t + 2 * pt, hw), dtype=x.dtype)
    out[:, :, pt:pt + t] = x
    return out


def _np_temporal_fwd(x, w, st, to):
    n_, c, t, hw = x.shape
    co, _, kt = w.shape
    xp = _np_pad_t(x, (kt - 1) // 2)
    win = np.lib.stride_tricks.sliding_window_view(xp, kt, axis=2)[:, :, ::st]
    cols = win.transpose(0, 2, 3, 1, 4).reshape(n_ * to * hw, c * kt)
    y = cols @ w.reshape(co, -1).T
    return np.ascontiguousarray(y.reshape(n_, to, hw, co).transpose(0, 3, 1, 2))


def _np_temporal_bwd_x(gy, w, st, t):
    n_, co, to, hw = gy.shape
    c, kt = w.shape[1], w.shape[2]
    pt = (kt - 1) // 2
    gym = gy.transpose(0, 2, 3, 1).reshape(n_ * to * hw, co)
    gcols = (gym @ w.reshape(co, -1)).reshape(n_, to, hw, c, kt)
    gxp = np.zeros((n_, c, t + 2 * pt, hw), dtype=gy.dtype)
    for a in range(kt):
        gxp[:, :, a:a + st * to:st] += gcols[:, :, :, :, a].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(gxp[:, :, pt:pt + t])


def _np_temporal_bwd_w(x, gy, st, kt):
    n_, c, t, hw = x.shape
    co, to = gy.shape[1], gy.shape[2]
    xp = _np_pad_t(x, (kt - 1) // 2)
    win = np.lib.stride_tricks.sliding_window_view(xp, kt, axis=2)[:, :, ::st]
    cols = win.transpose(0, 2, 3, 1, 4).reshape(n_ * to * hw, c * kt)
    gym = gy.transpose(0, 2, 3, 1).reshape(n_ * to * hw, co)
    return (gym.T @ cols).reshape(co, c, kt)


def _np_relu_fwd(x):
    return np.maximum(x, 0)


def _np_relu_bwd(x, g):
    return g * (x > 0)


def _np_bn_train_fwd(x, gamma, beta, eps):
    axes = (0, 2, 3, 4)
    mu = x.mean(axis=axes, dtype=np.float64)
    var = x.var(axis=axes, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    scale = (gamma * inv).astype(x.dtype)
    shift = (beta - gamma * mu * inv).astype(x.dtype)
    c = x.shape[1]
    y = x * scale.reshape(1, c, 1, 1, 1)
    y += shift.reshape(1, c, 1, 1, 1)
    return y, mu, var


def _np_bn_train_bwd(x, g, mu, var, gamma, eps):
    axes = (0, 2, 3, 4)
    c = x.shape[1]
    shape = (1, c, 1, 1, 1)
    count = x.size // c
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu.reshape(shape)) * inv.reshape(shape)
    dbeta = g.sum(axis=axes, dtype=np.float64)
    dgamma = (g * xhat).sum(axis=axes, dtype=np.float64)
    s1 = (gamma * dbeta).reshape(shape)
    s2 = (gamma * dgamma).reshape(shape)
    gx = (inv.reshape(shape) / count) * (
        count * gamma.reshape(shape) * g - s1 - xhat * s2
    )
    return gx.astype(g.dtype), dgamma, dbeta


# ---------------------------------------------------------------------------
# dispatch

if HAVE_NUMBA:
    spatial_fwd = _nb_spatial_fwd
    spatial_bwd_x = _nb_spatial_bwd_x
    spatial_bwd_w = _nb_spatial_bwd_w
    temporal_fwd = _nb_temporal_fwd
    temporal_bwd_x = _nb_temporal_bwd_x
    temporal_bwd_w = _nb_temporal_bwd_w
    bn_train_fwd = _nb_bn_train_fwd
    bn_train_bwd = _nb_bn_train_bwd
    relu_fwd = _nb_relu_fwd
    relu_bwd = _nb_relu_bwd
else:  # pragma: no cover
    spatial_fwd = _np_spatial_fwd
    spatial_bwd_x = _np_spatial_bwd_x
    spatial_bwd_w = _np_spatial_bwd_w
    temporal_fwd = _np_temporal_fwd
    temporal_bwd_x = _np_temporal_bwd_x
    temporal_bwd_w = _np_temporal_bwd_w
    bn_train_fwd = _np_bn_train_fwd
    bn_train_bwd = _np_bn_train_bwd
    relu_fwd = _np_relu_fwd
    relu_bwd = _np_relu_bwd
