"""Compiled CAVI sweep for the default update order.

The reference implementation lives in :mod:`edgeless.inference`; these
kernels perform the same eight updates and ELBO evaluation with explicit
loops over small p x p blocks, avoiding per-call array overhead.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

from .distributions import DirichletParams, GammaParams, MvNormalParams, WishartParams

LOG_2PI = math.log(2 * math.pi)
LOG_2 = math.log(2.0)
LOG_PI = math.log(math.pi)


@njit(cache=True)
def digamma(x):
    result = 0.0
    while x < 10.0:
        result -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (1.0 / 240 - inv2 / 132))))
    return result + math.log(x) - 0.5 * inv - series


@njit(cache=True)
def _spd_inv(P, out):
    """Write P^-1 into ``out`` and return log det P (NaN if not SPD)."""
    p = P.shape[0]
    L = np.zeros((p, p))
    logdet = 0.0
    for j in range(p):
        s = P[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return np.nan
        L[j, j] = math.sqrt(s)
        logdet += 2.0 * math.log(L[j, j])
        for i in range(j + 1, p):
            s = P[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
    Li = np.zeros((p, p))
    for i in range(p):
        Li[i, i] = 1.0 / L[i, i]
        for j in range(i):
            s = 0.0
            for k in range(j, i):
                s -= L[i, k] * Li[k, j]
            Li[i, j] = s / L[i, i]
    for i in range(p):
        for j in range(p):
            s = 0.0
            for k in range(max(i, j), p):
                s += Li[k, i] * Li[k, j]
            out[i, j] = s
    return logdet


@njit(cache=True)
def _second_moments(mean, cov, out):
    for r in range(mean.shape[0]):
        for a in range(mean.shape[1]):
            for b in range(mean.shape[1]):
                out[r, a, b] = cov[r, a, b] + mean[r, a] * mean[r, b]


@njit(cache=True)
def _data_stats(y, m, xm, xc, G, H):
    """G_i = sum_t m_ti E[x_t x_t^T], H_i = sum_t m_ti y_ti E[x_t]."""
    T, n = y.shape
    p = xm.shape[1]
    G[:] = 0.0
    H[:] = 0.0
    sx = np.empty((p, p))
    for t in range(T):
        for a in range(p):
            for b in range(p):
                sx[a, b] = xc[t, a, b] + xm[t, a] * xm[t, b]
        for i in range(n):
            if m[t, i]:
                for a in range(p):
                    H[i, a] += y[t, i] * xm[t, a]
                    for b in range(p):
                        G[i, a, b] += sx[a, b]


@njit(cache=True)
def _residuals(yy, am, SA, G, H, out):
    n, p = am.shape
    for i in range(n):
        r = yy[i]
        for a in range(p):
            r -= 2.0 * am[i, a] * H[i, a]
            for b in range(p):
                r += SA[i, a, b] * G[i, a, b]
        out[i] = r


@njit(cache=True)
def _wishart_elogdet(nu, logdet_w, p):
    s = p * LOG_2 - logdet_w
    for d in range(1, p + 1):
        s += digamma((nu + 1.0 - d) / 2.0)
    return s


@njit(cache=True)
def _multigammaln(a, p):
    s = p * (p - 1) / 4.0 * LOG_PI
    for j in range(1, p + 1):
        s += math.lgamma(a + (1.0 - j) / 2.0)
    return s


@njit(cache=True)
def _sweep(y, m, yy, cnt, st, hp, W0, G, H):
    """One pass over (x, tau, A, mu, Lambda, z, rho, lambda). Returns False on
    a non-positive-definite precision."""
    xm, xc, xld, ta, tb, am, ac, ald, mm, mc, mld, lnu, lW, lWi, lWld, z, ra, la, lb = st
    alpha, beta, a0, b0, gam, nu0 = hp[0], hp[1], hp[2], hp[3], hp[4], hp[5]
    T, n = y.shape
    p = am.shape[1]
    K = z.shape[1]
    P = np.empty((p, p))
    h = np.empty(p)
    SA = np.empty((n, p, p))
    et = ta / tb

    # x
    _second_moments(am, ac, SA)
    for t in range(T):
        P[:] = 0.0
        h[:] = 0.0
        for a in range(p):
            P[a, a] = 1.0
        for i in range(n):
            if m[t, i]:
                w = et[i]
                for a in range(p):
                    h[a] += w * y[t, i] * am[i, a]
                    for b in range(p):
                        P[a, b] += w * SA[i, a, b]
        ld = _spd_inv(P, xc[t])
        if ld != ld:
            return False
        xld[t] = ld
        for a in range(p):
            s = 0.0
            for b in range(p):
                s += xc[t, a, b] * h[b]
            xm[t, a] = s
    _data_stats(y, m, xm, xc, G, H)

    # tau
    resid = np.empty(n)
    _residuals(yy, am, SA, G, H, resid)
    for i in range(n):
        ta[i] = alpha + cnt[i] / 2.0
        tb[i] = beta + max(resid[i], 0.0) / 2.0
    et = ta / tb

    # A
    EL = np.empty((K, p, p))
    ELm = np.empty((K, p))
    for k in range(K):
        for a in range(p):
            s = 0.0
            for b in range(p):
                EL[k, a, b] = lnu[k] * lWi[k, a, b]
            for b in range(p):
                s += lnu[k] * lWi[k, a, b] * mm[k, b]
            ELm[k, a] = s
    for i in range(n):
        for a in range(p):
            h[a] = et[i] * H[i, a]
            for b in range(p):
                P[a, b] = et[i] * G[i, a, b]
        for k in range(K):
            zk = z[i, k]
            if zk == 0.0:
                continue
            for a in range(p):
                h[a] += zk * ELm[k, a]
                for b in range(p):
                    P[a, b] += zk * EL[k, a, b]
        ld = _spd_inv(P, ac[i])
        if ld != ld:
            return False
        ald[i] = ld
        for a in range(p):
            s = 0.0
            for b in range(p):
                s += ac[i, a, b] * h[b]
            am[i, a] = s
    _second_moments(am, ac, SA)

    # mu
    N = np.zeros(K)
    B = np.zeros((K, p))
    for i in range(n):
        for k in range(K):
            N[k] += z[i, k]
            for a in range(p):
                B[k, a] += z[i, k] * am[i, a]
    for k in range(K):
        for a in range(p):
            s = 0.0
            for b in range(p):
                P[a, b] = N[k] * EL[k, a, b]
                s += EL[k, a, b] * B[k, b]
            P[a, a] += la[k, a] / lb[k, a]
            h[a] = s
        ld = _spd_inv(P, mc[k])
        if ld != ld:
            return False
        mld[k] = ld
        for a in range(p):
            s = 0.0
            for b in range(p):
                s += mc[k, a, b] * h[b]
            mm[k, a] = s

    # Lambda
    for k in range(K):
        for a in range(p):
            for b in range(p):
                s = W0[a, b] + N[k] * (mc[k, a, b] + mm[k, a] * mm[k, b])
                s -= B[k, a] * mm[k, b] + mm[k, a] * B[k, b]
                for i in range(n):
                    s += z[i, k] * SA[i, a, b]
                P[a, b] = s
        for a in range(p):
            for b in range(a):
                v = 0.5 * (P[a, b] + P[b, a])
                P[a, b] = v
                P[b, a] = v
        lW[k] = P
        lnu[k] = nu0 + N[k]
        ld = _spd_inv(P, lWi[k])
        if ld != ld:
            return False
        lWld[k] = ld

    # z
    sum_ra = 0.0
    for k in range(K):
        sum_ra += ra[k]
    dsum = digamma(sum_ra)
    const = np.empty(K)
    for k in range(K):
        for a in range(p):
            s = 0.0
            for b in range(p):
                EL[k, a, b] = lnu[k] * lWi[k, a, b]
            for b in range(p):
                s += EL[k, a, b] * mm[k, b]
            ELm[k, a] = s
        tr = 0.0
        for a in range(p):
            for b in range(p):
                tr += EL[k, a, b] * (mc[k, a, b] + mm[k, a] * mm[k, b])
        const[k] = 0.5 * _wishart_elogdet(lnu[k], lWld[k], p) - 0.5 * tr + digamma(ra[k]) - dsum
    logit = np.empty(K)
    for i in range(n):
        top = -np.inf
        for k in range(K):
            q = 0.0
            for a in range(p):
                q -= 2.0 * ELm[k, a] * am[i, a]
                for b in range(p):
                    q += EL[k, a, b] * SA[i, a, b]
            logit[k] = const[k] - 0.5 * q
            if logit[k] > top:
                top = logit[k]
        s = 0.0
        for k in range(K):
            logit[k] = math.exp(logit[k] - top)
            s += logit[k]
        for k in range(K):
            z[i, k] = logit[k] / s

    # rho, lambda
    for k in range(K):
        nk = 0.0
        for i in range(n):
            nk += z[i, k]
        ra[k] = gam + nk
        for a in range(p):
            la[k, a] = a0 + 0.5
            lb[k, a] = b0 + 0.5 * (mc[k, a, a] + mm[k, a] * mm[k, a])
    return True


@njit(cache=True)
def _gamma_entropy(a, b):
    return a - math.log(b) + math.lgamma(a) + (1.0 - a) * digamma(a)


@njit(cache=True)
def _gamma_elogp(a0, b0, e, elog):
    return a0 * math.log(b0) - math.lgamma(a0) + (a0 - 1.0) * elog - b0 * e


@njit(cache=True)
def _elbo(y, m, yy, cnt, st, hp, W0, G, H):
    xm, xc, xld, ta, tb, am, ac, ald, mm, mc, mld, lnu, lW, lWi, lWld, z, ra, la, lb = st
    alpha, beta, a0, b0, gam, nu0, W0ld = hp[0], hp[1], hp[2], hp[3], hp[4], hp[5], hp[6]
    T, n = y.shape
    p = am.shape[1]
    K = z.shape[1]
    SA = np.empty((n, p, p))
    _second_moments(am, ac, SA)
    resid = np.empty(n)
    _residuals(yy, am, SA, G, H, resid)
    gauss_h = 0.5 * p * (1.0 + LOG_2PI)
    total = 0.0

    for i in range(n):
        et = ta[i] / tb[i]
        elog = digamma(ta[i]) - math.log(tb[i])
        total += 0.5 * cnt[i] * (elog - LOG_2PI) - 0.5 * et * resid[i]
        total += _gamma_elogp(alpha, beta, et, elog) + _gamma_entropy(ta[i], tb[i])
        total += gauss_h - 0.5 * ald[i]
    for t in range(T):
        tr = 0.0
        for a in range(p):
            tr += xc[t, a, a] + xm[t, a] * xm[t, a]
        total += -0.5 * p * LOG_2PI - 0.5 * tr + gauss_h - 0.5 * xld[t]

    sum_ra = 0.0
    lg_ra = 0.0
    for k in range(K):
        sum_ra += ra[k]
        lg_ra += math.lgamma(ra[k])
    dsum = digamma(sum_ra)
    el = np.empty((p, p))
    elm = np.empty(p)
    for k in range(K):
        elogdet = _wishart_elogdet(lnu[k], lWld[k], p)
        elogrho = digamma(ra[k]) - dsum
        tr_mu = 0.0
        tr_w = 0.0
        for a in range(p):
            s = 0.0
            for b in range(p):
                el[a, b] = lnu[k] * lWi[k, a, b]
                s += el[a, b] * mm[k, b]
            elm[a] = s
        for a in range(p):
            for b in range(p):
                tr_mu += el[a, b] * (mc[k, a, b] + mm[k, a] * mm[k, b])
                tr_w += W0[a, b] * el[b, a]
        for i in range(n):
            zk = z[i, k]
            if zk > 0.0:
                q = tr_mu
                for a in range(p):
                    q -= 2.0 * elm[a] * am[i, a]
                    for b in range(p):
                        q += el[a, b] * SA[i, a, b]
                total += zk * (0.5 * elogdet - 0.5 * p * LOG_2PI - 0.5 * q + elogrho - math.log(zk))
        # Lambda prior and entropy
        norm0 = nu0 / 2.0 * W0ld - nu0 * p / 2.0 * LOG_2 - _multigammaln(nu0 / 2.0, p)
        total += norm0 + (nu0 - p - 1.0) / 2.0 * elogdet - 0.5 * tr_w
        norm = lnu[k] / 2.0 * lWld[k] - lnu[k] * p / 2.0 * LOG_2 - _multigammaln(lnu[k] / 2.0, p)
        total += -norm - (lnu[k] - p - 1.0) / 2.0 * elogdet + lnu[k] * p / 2.0
        # mu, lambda
        total += gauss_h - 0.5 * mld[k]
        for a in range(p):
            e = la[k, a] / lb[k, a]
            elog = digamma(la[k, a]) - math.log(lb[k, a])
            emu2 = mc[k, a, a] + mm[k, a] * mm[k, a]
            total += 0.5 * (elog - LOG_2PI) - 0.5 * e * emu2
            total += _gamma_elogp(a0, b0, e, elog) + _gamma_entropy(la[k, a], lb[k, a])
        # rho prior
        total += (gam - 1.0) * elogrho
        # rho entropy
        total -= (ra[k] - 1.0) * (digamma(ra[k]) - dsum)
    total += math.lgamma(K * gam) - K * math.lgamma(gam)
    total += lg_ra - math.lgamma(sum_ra)
    return total


@njit(cache=True)
def _run(y, m, yy, cnt, st, hp, W0, max_sweeps, rel_tol, trace):
    """Sweep until the relative ELBO gain falls below ``rel_tol``.

    Returns the number of sweeps performed, negated if the sweep limit was
    hit, or ``-(max_sweeps + 2)`` on a numerical failure.
    """
    T, n = y.shape
    p = st[5].shape[1]
    G = np.empty((n, p, p))
    H = np.empty((n, p))
    _data_stats(y, m, st[0], st[1], G, H)
    trace[0] = _elbo(y, m, yy, cnt, st, hp, W0, G, H)
    for s in range(1, max_sweeps + 1):
        if not _sweep(y, m, yy, cnt, st, hp, W0, G, H):
            return -(max_sweeps + 2)
        trace[s] = _elbo(y, m, yy, cnt, st, hp, W0, G, H)
        if (trace[s] - trace[s - 1]) / abs(trace[s - 1]) < rel_tol:
            return s
    return -max_sweeps


def pack(state, hyper):
    """Flatten a posterior state into the tuple of arrays used by the kernels."""
    q_lam = state.q_Lambda
    lwi, lwld = q_lam._scale_inverse
    arrays = (
        state.q_x.mean,
        state.q_x.covariance,
        state.q_x.logdet_precision,
        state.q_tau.shape,
        state.q_tau.rate,
        state.q_A.mean,
        state.q_A.covariance,
        state.q_A.logdet_precision,
        state.q_mu.mean,
        state.q_mu.covariance,
        state.q_mu.logdet_precision,
        q_lam.nu,
        q_lam.scale,
        lwi,
        lwld,
        state.q_z,
        state.q_rho.concentration,
        state.q_lambda.shape,
        state.q_lambda.rate,
    )
    st = tuple(np.array(a, dtype=float, copy=True) for a in arrays)
    w0 = hyper.wishart_scale
    hp = np.array(
        [
            hyper.noise_alpha,
            hyper.noise_beta,
            hyper.ard_a,
            hyper.ard_b,
            hyper.dirichlet_gamma,
            hyper.nu,
            np.linalg.slogdet(w0)[1],
        ]
    )
    return st, hp, w0


def _normal(mean, cov, logdet):
    precision = np.linalg.inv(cov)
    precision = (precision + np.swapaxes(precision, -1, -2)) / 2
    q = MvNormalParams(mean, precision)
    q.__dict__["_inverse"] = (cov, logdet)
    return q


def unpack(st, state) -> None:
    """Write kernel arrays back into ``state``'s factors."""
    xm, xc, xld, ta, tb, am, ac, ald, mm, mc, mld, lnu, lW, lWi, lWld, z, ra, la, lb = st
    state.q_x = _normal(xm, xc, xld)
    state.q_tau = GammaParams(ta, tb)
    state.q_A = _normal(am, ac, ald)
    state.q_mu = _normal(mm, mc, mld)
    q_lam = WishartParams(lnu, lW)
    q_lam.__dict__["_scale_inverse"] = (lWi, lWld)
    state.q_Lambda = q_lam
    state.q_z = z
    state.q_rho = DirichletParams(ra)
    state.q_lambda = GammaParams(la, lb)


def run(state, dataset, hyper, max_sweeps: int, rel_tol: float):
    """Optimise ``state`` in place; returns ``(trace, converged, ok)``."""
    mask = np.ascontiguousarray(dataset.mask)
    y = np.ascontiguousarray(dataset.filled())
    yy = (y * y).sum(axis=0)
    cnt = mask.sum(axis=0).astype(float)
    st, hp, w0 = pack(state, hyper)
    trace = np.empty(max_sweeps + 1)
    code = _run(y, mask, yy, cnt, st, hp, w0, max_sweeps, rel_tol, trace)
    if code == -(max_sweeps + 2):
        return None, False, False
    sweeps = abs(code)
    unpack(st, state)
    return trace[: sweeps + 1].tolist(), code > 0, True
