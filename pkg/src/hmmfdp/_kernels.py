"""Compiled inner loops (numba).

Everything here works on plain float64 arrays; validation happens in the
calling modules.
"""
import math

import numba as nb
import numpy as np

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

# Kernel terms beyond this many bandwidths are skipped (exp(-72) ~ 5e-32).
KDE_CUTOFF = 12.0
# Boxed Taylor evaluation: box width in bandwidths and expansion order.
# With |t| <= KDE_CUTOFF + width/2 the truncation error relative to the
# smallest term is below 1e-15.
KDE_BOX = 0.5
KDE_ORDER = 30


def _order_table():
    # Terms needed at |t| in [j/2, (j+1)/2): with a = |t| KDE_BOX / 2 the
    # remainder relative to the smallest box term is below a^q/q! e^(2a).
    out = []
    for j in range(int(2 * (KDE_CUTOFF + KDE_BOX)) + 2):
        a = 0.5 * (j + 1) * KDE_BOX / 2
        q, term = 1, a
        while term * math.exp(2 * a) > 1e-17 and q < KDE_ORDER:
            q += 1
            term *= a / q
        out.append(q)
    return np.array(out, dtype=np.int64)


_KDE_ORDERS = _order_table()


@nb.njit(cache=True)
def forward_backward_scaled(pi, A, log_emis):
    """Scaled forward-backward for a 2-state chain.

    Returns (alpha_hat, beta_hat, emis, log_c) where ``emis`` holds the
    emission densities shifted by their per-row max (so the larger one is 1)
    and ``log_c[i]`` is the log normaliser of step i including that shift.
    """
    m = log_emis.shape[0]
    alpha = np.empty((m, 2))
    beta = np.empty((m, 2))
    emis = np.empty((m, 2))
    log_c = np.empty(m)
    c = np.empty(m)

    for i in range(m):
        s = max(log_emis[i, 0], log_emis[i, 1])
        emis[i, 0] = math.exp(log_emis[i, 0] - s)
        emis[i, 1] = math.exp(log_emis[i, 1] - s)
        log_c[i] = s

    a0 = pi[0] * emis[0, 0]
    a1 = pi[1] * emis[0, 1]
    tot = a0 + a1
    alpha[0, 0] = a0 / tot
    alpha[0, 1] = a1 / tot
    c[0] = tot
    log_c[0] += math.log(tot)
    for i in range(1, m):
        p0 = alpha[i - 1, 0] * A[0, 0] + alpha[i - 1, 1] * A[1, 0]
        p1 = alpha[i - 1, 0] * A[0, 1] + alpha[i - 1, 1] * A[1, 1]
        a0 = p0 * emis[i, 0]
        a1 = p1 * emis[i, 1]
        tot = a0 + a1
        alpha[i, 0] = a0 / tot
        alpha[i, 1] = a1 / tot
        c[i] = tot
        log_c[i] += math.log(tot)

    beta[m - 1, 0] = 1.0
    beta[m - 1, 1] = 1.0
    for i in range(m - 2, -1, -1):
        e0 = emis[i + 1, 0] * beta[i + 1, 0]
        e1 = emis[i + 1, 1] * beta[i + 1, 1]
        beta[i, 0] = (A[0, 0] * e0 + A[0, 1] * e1) / c[i + 1]
        beta[i, 1] = (A[1, 0] * e0 + A[1, 1] * e1) / c[i + 1]
    return alpha, beta, emis, log_c


@nb.njit(cache=True)
def forward_loglik(pi, A, log_emis):
    """Observed-data log-likelihood (forward pass only)."""
    m = log_emis.shape[0]
    ll = 0.0
    s = max(log_emis[0, 0], log_emis[0, 1])
    a0 = pi[0] * math.exp(log_emis[0, 0] - s)
    a1 = pi[1] * math.exp(log_emis[0, 1] - s)
    tot = a0 + a1
    ll += s + math.log(tot)
    a0 /= tot
    a1 /= tot
    for i in range(1, m):
        s = max(log_emis[i, 0], log_emis[i, 1])
        p0 = a0 * A[0, 0] + a1 * A[1, 0]
        p1 = a0 * A[0, 1] + a1 * A[1, 1]
        a0 = p0 * math.exp(log_emis[i, 0] - s)
        a1 = p1 * math.exp(log_emis[i, 1] - s)
        tot = a0 + a1
        ll += s + math.log(tot)
        a0 /= tot
        a1 /= tot
    return ll


@nb.njit(cache=True)
def viterbi_path(log_pi, log_A, log_emis):
    """Max-product decoding; ties resolve toward state 0."""
    m = log_emis.shape[0]
    back = np.zeros((m, 2), dtype=np.int8)
    d0 = log_pi[0] + log_emis[0, 0]
    d1 = log_pi[1] + log_emis[0, 1]
    for i in range(1, m):
        # into state 0
        c00 = d0 + log_A[0, 0]
        c10 = d1 + log_A[1, 0]
        if c10 > c00:
            n0 = c10
            back[i, 0] = 1
        else:
            n0 = c00
        c01 = d0 + log_A[0, 1]
        c11 = d1 + log_A[1, 1]
        if c11 > c01:
            n1 = c11
            back[i, 1] = 1
        else:
            n1 = c01
        d0 = n0 + log_emis[i, 0]
        d1 = n1 + log_emis[i, 1]
    path = np.zeros(m, dtype=np.int8)
    path[m - 1] = 1 if d1 > d0 else 0
    for i in range(m - 1, 0, -1):
        path[i - 1] = back[i, path[i]]
    return path


@nb.njit(cache=True)
def kde_pdf_sorted(x, centers, weights, h):
    """Gaussian kernel mixture density at ``x``.

    ``centers`` must be sorted ascending and ``weights`` sum to one.  Terms
    more than KDE_CUTOFF bandwidths away are skipped; points where the
    retained mass is too small for that to be safe are summed in full.
    """
    n = x.size
    k = centers.size
    out = np.empty(n)
    inv_h = 1.0 / h
    span = KDE_CUTOFF * h
    tail = math.exp(-0.5 * KDE_CUTOFF * KDE_CUTOFF)
    order = np.argsort(x)
    lo = 0
    hi = 0
    for r in range(n):
        i = order[r]
        xi = x[i]
        while lo < k and centers[lo] < xi - span:
            lo += 1
        if hi < lo:
            hi = lo
        while hi < k and centers[hi] <= xi + span:
            hi += 1
        s = 0.0
        for j in range(lo, hi):
            u = (xi - centers[j]) * inv_h
            s += weights[j] * math.exp(-0.5 * u * u)
        if s * 1e-15 < tail:
            s = 0.0
            for j in range(k):
                u = (xi - centers[j]) * inv_h
                s += weights[j] * math.exp(-0.5 * u * u)
        out[i] = s * inv_h * _INV_SQRT_2PI
    return out


@nb.njit(cache=True)
def _kde_direct_one(xi, centers, weights, inv_h):
    s = 0.0
    for j in range(centers.size):
        u = (xi - centers[j]) * inv_h
        s += weights[j] * math.exp(-0.5 * u * u)
    return s


@nb.njit(cache=True)
def kde_pdf_boxed(x, centers, weights, h):
    """Gaussian kernel mixture density by a boxed Taylor expansion.

    Centers (sorted ascending) are grouped into boxes KDE_BOX bandwidths
    wide.  In bandwidth units, with ``t = x - a`` and ``s = c - a`` for a
    box anchor ``a``, ``exp(-(t - s)^2 / 2) = exp(-t^2 / 2) exp(-s^2 / 2)
    exp(t s)``; expanding ``exp(t s)`` gives per-box moments, and each
    target then costs one polynomial per nearby box.  Boxes beyond
    KDE_CUTOFF bandwidths are skipped, with the same full-sum fallback as
    :func:`kde_pdf_sorted`.
    """
    n = x.size
    k = centers.size
    inv_h = 1.0 / h
    width = KDE_BOX * h
    c0 = centers[0]
    nbox = int((centers[k - 1] - c0) / width) + 1
    mom = np.zeros((nbox, KDE_ORDER))
    for j in range(k):
        b = min(int((centers[j] - c0) / width), nbox - 1)
        s = (centers[j] - (c0 + (b + 0.5) * width)) * inv_h
        term = weights[j] * math.exp(-0.5 * s * s)
        for q in range(KDE_ORDER):
            mom[b, q] += term
            term *= s / (q + 1)
    tail = math.exp(-0.5 * KDE_CUTOFF * KDE_CUTOFF)
    reach = KDE_CUTOFF + 0.5 * KDE_BOX
    shrink = math.exp(-KDE_BOX * KDE_BOX)
    half = math.exp(-0.5 * KDE_BOX * KDE_BOX)
    out = np.empty(n)
    for i in range(n):
        t0 = (x[i] - c0) * inv_h - 0.5 * KDE_BOX  # offset from the first anchor
        b_lo = max(0, int(math.ceil((t0 - reach) / KDE_BOX)))
        b_hi = min(nbox - 1, int(math.floor((t0 + reach) / KDE_BOX)))
        s = 0.0
        if b_lo <= b_hi:
            t = t0 - b_lo * KDE_BOX
            g = math.exp(-0.5 * t * t)
            r = math.exp(KDE_BOX * t)
            for b in range(b_lo, b_hi + 1):
                if mom[b, 0] > 0.0:
                    nq = _KDE_ORDERS[min(int(2.0 * abs(t)), _KDE_ORDERS.size - 1)]
                    poly = mom[b, nq - 1]
                    for q in range(nq - 2, -1, -1):
                        poly = poly * t + mom[b, q]
                    s += g * poly
                # step to the next anchor: t -> t - KDE_BOX
                g *= r * half
                r *= shrink
                t -= KDE_BOX
        if s * 1e-15 < tail:
            s = _kde_direct_one(x[i], centers, weights, inv_h)
        out[i] = s * inv_h * _INV_SQRT_2PI
    return out


@nb.njit(cache=True)
def kde_pdf(x, centers, weights, h):
    """Dispatch between the boxed expansion and the direct windowed sum
    (the latter when the bandwidth is tiny relative to the spread)."""
    k = centers.size
    nbox = (centers[k - 1] - centers[0]) / (KDE_BOX * h) + 1.0
    if x.size * k <= 4096 or nbox > 4.0 * k + 64.0:
        return kde_pdf_sorted(x, centers, weights, h)
    return kde_pdf_boxed(x, centers, weights, h)


@nb.njit(cache=True)
def kde_logpdf_full(x, centers, log_weights, h):
    """Log-sum-exp evaluation of the kernel mixture (no underflow)."""
    n = x.size
    k = centers.size
    out = np.empty(n)
    inv_h = 1.0 / h
    for i in range(n):
        best = -np.inf
        for j in range(k):
            u = (x[i] - centers[j]) * inv_h
            v = log_weights[j] - 0.5 * u * u
            if v > best:
                best = v
        s = 0.0
        for j in range(k):
            u = (x[i] - centers[j]) * inv_h
            s += math.exp(log_weights[j] - 0.5 * u * u - best)
        out[i] = best + math.log(s) - math.log(h) - _LOG_SQRT_2PI
    return out


@nb.njit(cache=True)
def restricted_products(trans, idx):
    """Products of posterior transitions between consecutive selected sites.

    ``trans[i-1]`` is the 0-based matrix for step i-1 -> i (sites 0..m-1),
    ``idx`` the 0-based sorted selection. Rows are renormalised after each
    multiplication.
    """
    s = idx.size
    out = np.empty((max(s - 1, 0), 2, 2))
    for t in range(1, s):
        p00 = 1.0
        p01 = 0.0
        p10 = 0.0
        p11 = 1.0
        for i in range(idx[t - 1] + 1, idx[t] + 1):
            q = trans[i - 1]
            n00 = p00 * q[0, 0] + p01 * q[1, 0]
            n01 = p00 * q[0, 1] + p01 * q[1, 1]
            n10 = p10 * q[0, 0] + p11 * q[1, 0]
            n11 = p10 * q[0, 1] + p11 * q[1, 1]
            r0 = n00 + n01
            r1 = n10 + n11
            p00 = n00 / r0
            p01 = n01 / r0
            p10 = n10 / r1
            p11 = n11 / r1
        out[t - 1, 0, 0] = p00
        out[t - 1, 0, 1] = p01
        out[t - 1, 1, 0] = p10
        out[t - 1, 1, 1] = p11
    return out


@nb.njit(cache=True)
def count_columns(init0, init1, trans, stop_level, stop_strict, max_cols):
    """Column-wise evaluation of the zero-count tables.

    Column l holds, for every prefix length k, the posterior probability of
    at most l zeros among the first k selected sites with the k-th state
    being 0 (B0) or 1 (B1).  Columns are produced in increasing l until
    B0[s-1, l] + B1[s-1, l] reaches ``stop_level`` (``>`` if
    ``stop_strict`` else ``>=``) or ``max_cols`` columns exist.

    Returns (B0, B1, ncols) with arrays of shape (s, max_cols).
    """
    s = trans.shape[0] + 1
    B0 = np.zeros((s, max_cols))
    B1 = np.zeros((s, max_cols))
    ncols = 0
    for l in range(max_cols):
        if l == 0:
            B0[0, 0] = 0.0
        else:
            B0[0, l] = init0
        B1[0, l] = init1
        for k in range(1, s):
            q = trans[k - 1]
            if l == 0:
                B0[k, 0] = 0.0
            else:
                B0[k, l] = B0[k - 1, l - 1] * q[0, 0] + B1[k - 1, l - 1] * q[1, 0]
            B1[k, l] = B0[k - 1, l] * q[0, 1] + B1[k - 1, l] * q[1, 1]
        ncols = l + 1
        tot = B0[s - 1, l] + B1[s - 1, l]
        if stop_strict:
            if tot > stop_level:
                break
        elif tot >= stop_level:
            break
    return B0, B1, ncols


@nb.njit(cache=True)
def count_cdf(init0, init1, trans, stop_level, stop_strict):
    """Last-row totals B0[s-1, l] + B1[s-1, l] for l = 0, 1, ... until the
    stopping rule of :func:`count_columns` fires; O(s) memory."""
    s = trans.shape[0] + 1
    prev0 = np.zeros(s)
    prev1 = np.zeros(s)
    cur0 = np.zeros(s)
    cur1 = np.zeros(s)
    cdf = np.empty(s + 1)
    ncols = 0
    for l in range(s + 1):
        cur0[0] = 0.0 if l == 0 else init0
        cur1[0] = init1
        for k in range(1, s):
            q = trans[k - 1]
            if l == 0:
                cur0[k] = 0.0
            else:
                cur0[k] = prev0[k - 1] * q[0, 0] + prev1[k - 1] * q[1, 0]
            cur1[k] = cur0[k - 1] * q[0, 1] + cur1[k - 1] * q[1, 1]
        tot = cur0[s - 1] + cur1[s - 1]
        cdf[l] = tot
        ncols = l + 1
        if stop_strict:
            if tot > stop_level:
                break
        elif tot >= stop_level:
            break
        for k in range(s):
            prev0[k] = cur0[k]
            prev1[k] = cur1[k]
    return cdf[:ncols]
