"""Compiled inner loops for message passing.

Every function works on one flat edge array in pool-major order plus a CSR
view of each patient's edges.  Arithmetic order per edge does not depend on
how many graphs are packed into the arrays, so batched and single runs agree
bit for bit.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def damped_sweep(
    group_size, pat_ptr, pat_edges, th, tt, u_e, w_e, prior,
    damping, comp_of_test, comp_of_patient, active, th_out, tt_out, delta,
):
    """One flooding update of both message families.

    Writes damped messages into ``th_out`` / ``tt_out`` (inactive components are
    copied unchanged) and the largest change per component into ``delta``.
    Returns ``-1`` or the id of an edge whose normalizer vanished.
    """
    n_tests = u_e.shape[0] // group_size
    keep = 1.0 - damping
    delta[:] = 0.0
    pre = np.empty(max(group_size, 1))
    for mu in range(n_tests):
        base = mu * group_size
        c = comp_of_test[mu]
        if not active[c]:
            for k in range(group_size):
                tt_out[base + k] = tt[base + k]
            continue
        acc = 1.0
        for k in range(group_size):
            pre[k] = acc
            acc *= 1.0 - th[base + k]
        suf = 1.0
        for k in range(group_size - 1, -1, -1):
            e = base + k
            q = pre[k] * suf
            suf *= 1.0 - th[e]
            z = u_e[e] * (2.0 - q) + w_e[e] * q
            if z == 0.0:
                return e
            raw = u_e[e] / z
            new = raw if damping == 1.0 else damping * raw + keep * tt[e]
            tt_out[e] = new
            ch = abs(new - tt[e])
            if ch > delta[c]:
                delta[c] = ch
    n_patients = prior.shape[0]
    max_deg = 1
    for i in range(n_patients):
        if pat_ptr[i + 1] - pat_ptr[i] > max_deg:
            max_deg = pat_ptr[i + 1] - pat_ptr[i]
    pre_p = np.empty(max_deg)
    pre_q = np.empty(max_deg)
    for i in range(n_patients):
        lo = pat_ptr[i]
        hi = pat_ptr[i + 1]
        c = comp_of_patient[i]
        if not active[c]:
            for s in range(lo, hi):
                th_out[pat_edges[s]] = th[pat_edges[s]]
            continue
        acc_p = 1.0
        acc_q = 1.0
        for s in range(lo, hi):
            pre_p[s - lo] = acc_p
            pre_q[s - lo] = acc_q
            acc_p *= tt[pat_edges[s]]
            acc_q *= 1.0 - tt[pat_edges[s]]
        suf_p = 1.0
        suf_q = 1.0
        r = prior[i]
        for s in range(hi - 1, lo - 1, -1):
            e = pat_edges[s]
            p_ex = pre_p[s - lo] * suf_p
            q_ex = pre_q[s - lo] * suf_q
            suf_p *= tt[e]
            suf_q *= 1.0 - tt[e]
            num = r * p_ex
            z = num + (1.0 - r) * q_ex
            if z == 0.0:
                return e
            raw = num / z
            new = raw if damping == 1.0 else damping * raw + keep * th[e]
            th_out[e] = new
            ch = abs(new - th[e])
            if ch > delta[c]:
                delta[c] = ch
    return -1


@njit(cache=True)
def patient_full_products(pat_ptr, pat_edges, tt, p_out, q_out):
    """Per-patient products of incoming messages and of their complements."""
    for i in range(p_out.shape[0]):
        acc_p = 1.0
        acc_q = 1.0
        for s in range(pat_ptr[i], pat_ptr[i + 1]):
            acc_p *= tt[pat_edges[s]]
            acc_q *= 1.0 - tt[pat_edges[s]]
        p_out[i] = acc_p
        q_out[i] = acc_q


@njit(cache=True)
def pool_complement_products(group_size, th, out):
    """``out[mu] = prod over pool members of (1 - theta_to_test)``."""
    for mu in range(out.shape[0]):
        acc = 1.0
        for k in range(group_size):
            acc *= 1.0 - th[mu * group_size + k]
        out[mu] = acc


LOG_CHUNK = 16  # products are checked for underflow every LOG_CHUNK factors
SERIES_RATIO = 0.25
LOG_ROUNDING = np.log(1e-17)
CROSSING_SLACK = 10.0  # nats; crossings only need to be bracketed from outside


@njit(cache=True, error_model="numpy")
def prevalence_loglik(pi, r):
    """``sum_j log(r pi_j + (1 - r)(1 - pi_j))``, multiplying in linear space between logs."""
    acc = 0.0
    prod = 1.0
    for j in range(pi.shape[0]):
        prod *= r * pi[j] + (1.0 - r) * (1.0 - pi[j])
        if prod < 1e-200:
            if prod == 0.0:
                return -np.inf
            acc += np.log(prod)
            prod = 1.0
    return acc + np.log(prod)


@njit(cache=True, error_model="numpy")
def prevalence_score(pi, r):
    """First and second derivative of ``prevalence_loglik`` in ``r``."""
    d1 = 0.0
    d2 = 0.0
    for j in range(pi.shape[0]):
        s = 2.0 * pi[j] - 1.0
        if s == 0.0:
            continue
        v = s / (1.0 - pi[j] + r * s)
        d1 += v
        d2 -= v * v
    return d1, d2


@njit(cache=True, error_model="numpy")
def prevalence_peak(pi, start=0.5):
    """Maximizer of the concave ``prevalence_loglik`` on ``[0, 1]``.

    Newton from ``start`` inside a shrinking bracket; the ends are only
    examined when an iterate tries to leave ``(0, 1)``.
    """
    lo = 0.0
    hi = 1.0
    r = min(max(start, 1e-12), 1.0 - 1e-12)
    for _ in range(200):
        d1, d2 = prevalence_score(pi, r)
        if d1 > 0.0:
            lo = r
        else:
            hi = r
        nxt = r - d1 / d2 if d2 < 0.0 else 0.5 * (lo + hi)
        if abs(nxt - r) <= 1e-10 * max(r, 1e-10):
            return min(max(nxt, 0.0), 1.0)
        if not (lo < nxt < hi):
            if nxt <= lo and lo == 0.0 and prevalence_score(pi, 0.0)[0] <= 0.0:
                return 0.0
            if nxt >= hi and hi == 1.0 and prevalence_score(pi, 1.0)[0] >= 0.0:
                return 1.0
            nxt = 0.5 * (lo + hi)
        if abs(nxt - r) <= 1e-10 * max(r, 1e-10) or hi - lo <= 1e-15:
            return nxt
        r = nxt
    return r


@njit(cache=True, error_model="numpy")
def _level_crossing(pi, end, inside, f_in, outside, f_out, level):
    # f = loglik - level is >= 0 at ``inside`` and < 0 at ``outside``, which
    # lies between ``inside`` and ``end``.  Illinois false position in the log
    # distance to ``end`` (where the loglik is close to linear); returns the
    # outer point once it is within CROSSING_SLACK nats of the level, so the
    # interval always covers the crossing.
    sign = 1.0 if inside > end else -1.0
    u_in = np.log(abs(inside - end))
    u_out = np.log(abs(outside - end))
    side = 0
    for _ in range(200):
        if f_out >= -CROSSING_SLACK or abs(u_in - u_out) <= 1e-9:
            break
        if np.isfinite(f_out):
            u = u_out + (u_in - u_out) * f_out / (f_out - f_in)
            if not (min(u_in, u_out) < u < max(u_in, u_out)):
                u = 0.5 * (u_in + u_out)
        else:
            u = 0.5 * (u_in + u_out)
        f = prevalence_loglik(pi, end + sign * np.exp(u)) - level
        if f >= 0.0:
            u_in, f_in = u, f
            if side == 1:
                f_out *= 0.5
            side = 1
        else:
            u_out, f_out = u, f
            if side == -1:
                f_in *= 0.5
            side = -1
    return end + sign * np.exp(u_out)


@njit(cache=True, error_model="numpy")
def _crossing_from(pi, peak, end, level, margin, guess):
    # Walk outward from the guess until the loglik is below the level
    # (concavity makes every point beyond it lower still), then refine.
    inside = peak
    f_in = margin
    if not ((guess - peak) * (end - peak) > 0.0 and abs(guess - peak) < abs(end - peak)):
        guess = 0.5 * (peak + end)
    for _ in range(60):
        f = prevalence_loglik(pi, guess) - level
        if f < 0.0:
            return _level_crossing(pi, end, inside, f_in, guess, f, level)
        inside, f_in = guess, f
        nxt = guess + (guess - peak)
        if (nxt - end) * (peak - end) <= 0.0:
            # shrink the distance to the end geometrically instead
            dist = abs(guess - end)
            nxt = end + (guess - end) * np.exp(-max(1.0, abs(np.log(dist))))
        if nxt == end or abs(nxt - end) < 1e-300:
            return end
        guess = nxt
    return end


@njit(cache=True, error_model="numpy")
def prevalence_support(pi, margin, start=0.5, snap=0.0):
    """Peak and an interval on which ``prevalence_loglik`` is within ``margin`` of its maximum.

    An end closer to 0 (or 1) than ``snap`` times the interval width is moved
    there; the lower crossing is not searched when it would be snapped.
    """
    peak = prevalence_peak(pi, start)
    level = prevalence_loglik(pi, peak) - margin
    _, d2 = prevalence_score(pi, peak)
    # Gaussian guess for the crossings, widened; near an end the guess is
    # made in the log distance to that end instead
    curv = -d2 if d2 < 0.0 and np.isfinite(d2) else 0.0
    lo_guess = -1.0
    hi_guess = 2.0
    if curv > 0.0:
        half = 1.5 * np.sqrt(2.0 * margin / curv)
        lo_guess = peak - half
        if lo_guess <= 0.0:
            lo_guess = peak * np.exp(-2.0 * np.sqrt(2.0 * margin / curv) / peak)
        hi_guess = peak + half
        if hi_guess >= 1.0:
            hi_guess = 1.0 - (1.0 - peak) * np.exp(-2.0 * np.sqrt(2.0 * margin / curv) / (1.0 - peak))
    hi = 1.0 if peak == 1.0 else _crossing_from(pi, peak, 1.0, level, margin, hi_guess)
    # lo < snap * (hi - lo) exactly when lo < cut
    cut = snap * hi / (1.0 + snap)
    if peak <= cut or prevalence_loglik(pi, cut) >= level:
        lo = 0.0
    else:
        lo = _crossing_from(pi, peak, 0.0, level, margin, lo_guess)
        if lo < cut:
            lo = 0.0
    if 1.0 - hi < snap * (hi - lo):
        hi = 1.0
    return peak, lo, hi


@njit(cache=True, error_model="numpy")
def prevalence_rule(pi, base_x, base_logw, a, b, margin, snap, start, r_out, logw_out):
    """Place a quadrature rule on the bulk of the prevalence likelihood.

    ``base_x``/``base_logw`` hold four rules on [0, 1]: Legendre, Jacobi with
    the ``a - 1`` power at 0, Jacobi with the ``b - 1`` power at 1, and Jacobi
    with both.  Returns the likelihood peak (for warm starts).
    """
    peak, lo, hi = prevalence_support(pi, margin, start, snap)
    left = lo == 0.0
    right = hi == 1.0
    v = 3 if (left and right) else (1 if left else (2 if right else 0))
    for k in range(base_x.shape[1]):
        rk = lo + (hi - lo) * base_x[v, k]
        lw = base_logw[v, k]
        if not left:
            lw += (a - 1.0) * np.log(rk)
        if not right:
            lw += (b - 1.0) * np.log1p(-rk)
        r_out[k] = rk
        logw_out[k] = lw
    return peak


@njit(cache=True)
def _terms_needed(x):
    # smallest m >= 1 with x**m below double rounding, plus one
    if x <= 0.0:
        return 2
    return max(1, int(np.ceil(LOG_ROUNDING / np.log(x)))) + 1


@njit(cache=True)
def _horner(b, a, x, n_terms):
    num = 0.0
    den = 0.0
    for m in range(n_terms - 1, -1, -1):
        num = num * x + b[m]
        den = den * x + a[m]
    return num, den


@njit(cache=True, error_model="numpy")
def _series_moments(shared, r, scale, v, n_terms):
    # A_m = sum_k shared_k scale_k v_k^m and B_m = sum_k r_k shared_k scale_k v_k^m
    a = np.zeros(n_terms)
    b = np.zeros(n_terms)
    for k in range(r.shape[0]):
        p = shared[k] * scale[k]
        for m in range(n_terms):
            a[m] += p
            b[m] += r[k] * p
            p *= v[k]
    return a, b


@njit(cache=True, error_model="numpy")
def loo_prevalence_means(pi, r, logw, out):
    """Quadrature posterior means of the prevalence leaving out each patient in turn.

    The shared integrand ``exp(logw + sum_j log factor_j)`` is divided by each
    patient's own factor ``f(r) = (1 - pi)(1 - r) + pi r``.  Written as
    ``base(r) (1 + x v(r))`` with one of three splits

        base = 1 - pi, x = 2 pi - 1, v = r / (1 - pi)   (expansion in r)
        base = 1 - r,  x = pi,       v = (2r - 1) / (1 - r)
        base = r,      x = 1 - pi,   v = (1 - 2r) / r

    ``1 / f`` is a geometric series whose coefficients are moments of the
    shared weights.  Each patient uses the split with the smallest ratio
    ``max |x v|``; patients where it exceeds ``SERIES_RATIO`` are summed
    directly.  Returns ``-1`` or the index of a patient whose normalizer
    vanished.
    """
    n_nodes = r.shape[0]
    n = pi.shape[0]
    acc = np.zeros(n_nodes)
    prod = np.ones(n_nodes)
    for j0 in range(0, n, LOG_CHUNK):
        for j in range(j0, min(j0 + LOG_CHUNK, n)):
            c = 1.0 - pi[j]
            s = 2.0 * pi[j] - 1.0
            for k in range(n_nodes):
                prod[k] *= c + r[k] * s
        for k in range(n_nodes):
            if prod[k] < 1e-150:
                acc[k] += np.log(prod[k])
                prod[k] = 1.0
    top = -np.inf
    for k in range(n_nodes):
        acc[k] += np.log(prod[k]) + logw[k]
        if acc[k] > top:
            top = acc[k]
    if not np.isfinite(top):
        return 0
    shared = np.exp(acc - top)
    ones = np.ones(n_nodes)
    v_low = np.empty(n_nodes)
    v_high = np.empty(n_nodes)
    s_low = np.empty(n_nodes)
    s_high = np.empty(n_nodes)
    max_r = 0.0
    max_low = 0.0
    max_high = 0.0
    for k in range(n_nodes):
        s_low[k] = 1.0 / (1.0 - r[k])
        s_high[k] = 1.0 / r[k]
        v_low[k] = (2.0 * r[k] - 1.0) * s_low[k]
        v_high[k] = (1.0 - 2.0 * r[k]) * s_high[k]
        max_r = max(max_r, r[k])
        max_low = max(max_low, abs(v_low[k]))
        max_high = max(max_high, abs(v_high[k]))
    kind = np.zeros(n, dtype=np.int64)
    terms = np.zeros(n, dtype=np.int64)
    need = np.zeros(3, dtype=np.int64)
    for i in range(n):
        c = 1.0 - pi[i]
        x_r = abs(2.0 * pi[i] - 1.0) * max_r / c if c > 0.0 else np.inf
        x_low = pi[i] * max_low
        x_high = (1.0 - pi[i]) * max_high
        best = min(x_r, x_low, x_high)
        if best < SERIES_RATIO:
            kind[i] = 1 if best == x_r else (2 if best == x_low else 3)
            terms[i] = _terms_needed(best)
            need[kind[i] - 1] = max(need[kind[i] - 1], terms[i])
            continue
        s = 2.0 * pi[i] - 1.0
        num = 0.0
        den = 0.0
        for k in range(n_nodes):
            w = shared[k] / (c + r[k] * s)
            num += r[k] * w
            den += w
        if not (den > 0.0) or not np.isfinite(den):
            return i
        out[i] = num / den
    a_r, b_r = _series_moments(shared, r, ones, r, need[0])
    a_low, b_low = _series_moments(shared, r, s_low, v_low, need[1])
    a_high, b_high = _series_moments(shared, r, s_high, v_high, need[2])
    for i in range(n):
        if kind[i] == 0:
            continue
        if kind[i] == 1:
            num, den = _horner(b_r, a_r, (1.0 - 2.0 * pi[i]) / (1.0 - pi[i]), terms[i])
        elif kind[i] == 2:
            num, den = _horner(b_low, a_low, -pi[i], terms[i])
        else:
            num, den = _horner(b_high, a_high, pi[i] - 1.0, terms[i])
        if not (den > 0.0) or not np.isfinite(den):
            return i
        out[i] = num / den
    return -1


@njit(cache=True)
def hbp_iterate(
    group_size, pat_ptr, pat_edges, th, tt, u_e, w_e, pi, rho_t, damping, node_damping,
    max_iterations, tol, base_x, base_logw, a, b, margin, snap, trace,
):
    """All hierarchical sweeps in one compiled loop (quadrature mode).

    Each sweep: damped edge update with ``rho_t`` as per-patient prior, then
    ``pi`` from the new incoming messages, then leave-one-out prevalence
    means from the updated ``pi``; both node families use ``node_damping``.
    ``th, tt, pi, rho_t`` are updated in place.  Returns
    ``(iterations, converged, error_kind, error_at)`` with error kinds 0 none,
    1 edge normalizer, 2 patient normalizer, 3 quadrature.
    """
    n_edges = th.shape[0]
    n = pi.shape[0]
    th_out = np.empty(n_edges)
    tt_out = np.empty(n_edges)
    zeros_t = np.zeros(u_e.shape[0] // max(group_size, 1), dtype=np.int64)
    zeros_p = np.zeros(n, dtype=np.int64)
    active = np.ones(1, dtype=np.bool_)
    delta = np.zeros(1)
    n_nodes = base_x.shape[1]
    r = np.empty(n_nodes)
    logw = np.empty(n_nodes)
    raw = np.empty(n)
    node_keep = 1.0 - node_damping
    peak = 0.5
    # the sweep alternates between the caller's arrays and the scratch pair
    cur_th, cur_tt, nxt_th, nxt_tt = th, tt, th_out, tt_out
    swapped = False
    converged = False
    kind = 0
    at = -1
    t = 0
    while t < max_iterations and kind == 0 and not converged:
        t += 1
        bad = damped_sweep(
            group_size, pat_ptr, pat_edges, cur_th, cur_tt, u_e, w_e, rho_t,
            damping, zeros_t, zeros_p, active, nxt_th, nxt_tt, delta,
        )
        if bad >= 0:
            kind, at = 1, bad
            break
        cur_th, cur_tt, nxt_th, nxt_tt = nxt_th, nxt_tt, cur_th, cur_tt
        swapped = not swapped
        change = delta[0]
        for i in range(n):
            pp = 1.0
            qq = 1.0
            for e in range(pat_ptr[i], pat_ptr[i + 1]):
                pp *= cur_tt[pat_edges[e]]
                qq *= 1.0 - cur_tt[pat_edges[e]]
            den = pp + qq
            if den == 0.0:
                kind, at = 2, i
                break
            new = node_damping * (pp / den) + node_keep * pi[i]
            change = max(change, abs(new - pi[i]))
            pi[i] = new
        if kind != 0:
            break
        peak = prevalence_rule(pi, base_x, base_logw, a, b, margin, snap, peak, r, logw)
        bad = loo_prevalence_means(pi, r, logw, raw)
        if bad >= 0:
            kind, at = 3, bad
            break
        for i in range(n):
            new = node_damping * raw[i] + node_keep * rho_t[i]
            change = max(change, abs(new - rho_t[i]))
            rho_t[i] = new
        trace[t - 1] = change
        converged = change < tol
    if swapped:
        th[:] = cur_th
        tt[:] = cur_tt
    return t, converged, kind, at
