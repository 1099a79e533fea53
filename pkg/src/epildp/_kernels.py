"""Numba kernels for the stochastic simulators.

State lives in integer individual counts so absorption, domain membership and
criticality tests are exact.  Rates are evaluated from monomial tables in the
proportion coordinates z = n / N.  All randomness comes from numba's nopython
np.random (exponentials by inversion; Poisson by the small-mean product method
below mean 10 and PTRS rejection above), seeded per call for reproducibility.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# record modes
REC_ALL = 0      # every event / leap
REC_GRID = 1     # fixed-dt grid

# variant codes
VAR_EXPLICIT = 0
VAR_IMPLICIT = 1
VAR_MIDPOINT = 2

# exit flags
OK = 0
REPAIR_EXHAUSTED = 1


@njit(cache=True)
def _any_true(mask, k):
    for j in range(k):
        if mask[j]:
            return True
    return False


@njit(cache=True)
def _eval_a(n, N, coefs, exps, nmono, out):
    """a_j = N * max(0, beta_j(n / N)) for all j."""
    k = coefs.shape[0]
    d = n.shape[0]
    for j in range(k):
        acc = 0.0
        for m in range(nmono[j]):
            term = coefs[j, m]
            for i in range(d):
                e = exps[j, m, i]
                if e > 0:
                    zi = n[i] / N
                    for _ in range(e):
                        term *= zi
            acc += term
        out[j] = N * acc if acc > 0.0 else 0.0


@njit(cache=True)
def _eval_a_at_z(z, N, coefs, exps, nmono, out):
    """a_j at a real-valued (predicted) state in proportion coordinates."""
    k = coefs.shape[0]
    d = z.shape[0]
    for j in range(k):
        acc = 0.0
        for m in range(nmono[j]):
            term = coefs[j, m]
            for i in range(d):
                e = exps[j, m, i]
                if e > 0:
                    for _ in range(e):
                        term *= z[i]
            acc += term
        out[j] = N * acc if acc > 0.0 else 0.0


@njit(cache=True)
def _eval_grads(n, N, coefs, exps, nmono, out):
    """out[j, i] = d a_j / d z_i at z = n / N."""
    k = coefs.shape[0]
    d = n.shape[0]
    for j in range(k):
        for i in range(d):
            acc = 0.0
            for m in range(nmono[j]):
                e_i = exps[j, m, i]
                if e_i == 0:
                    continue
                term = coefs[j, m] * e_i
                for l in range(d):
                    e = exps[j, m, l]
                    if l == i:
                        e -= 1
                    if e > 0:
                        zl = n[l] / N
                        for _ in range(e):
                            term *= zl
                acc += term
            out[j, i] = N * acc


@njit(cache=True)
def _grow(times, states, counts):
    cap = times.shape[0]
    new_t = np.empty(cap * 2, dtype=np.float64)
    new_s = np.empty((cap * 2, states.shape[1]), dtype=np.int64)
    new_c = np.empty((cap * 2, counts.shape[1]), dtype=np.int64)
    new_t[:cap] = times
    new_s[:cap] = states
    new_c[:cap] = counts
    return new_t, new_s, new_c


@njit(cache=True)
def _record(times, states, counts, m, t, n, evt):
    times[m] = t
    for i in range(n.shape[0]):
        states[m, i] = n[i]
    for j in range(evt.shape[0]):
        counts[m, j] = evt[j]
    return m + 1


@njit(cache=True)
def _tau_select(a, grads, H, N, eps, noncrit, as_printed):
    """Leap size from the rate-change moment bounds; sums over j' run over
    non-critical jumps only; +inf when nothing constrains it."""
    k = a.shape[0]
    d = H.shape[0]
    a0 = 0.0
    for j in range(k):
        a0 += a[j]
    if a0 <= 0.0:
        return np.inf
    tau = np.inf
    for j in range(k):
        mu = 0.0
        s2 = 0.0
        for jp in range(k):
            if not noncrit[jp]:
                continue
            f = 0.0
            for i in range(d):
                f += grads[j, i] * (H[i, jp] / N)
            if as_printed:
                mu += f * a[j]
                s2 += f * f * a[j]
            else:
                mu += f * a[jp]
                s2 += f * f * a[jp]
        if mu != 0.0:
            t1 = eps * a0 / abs(mu)
            if t1 < tau:
                tau = t1
        if s2 > 0.0:
            t2 = eps * eps * a0 * a0 / s2
            if t2 < tau:
                tau = t2
    return tau


@njit(cache=True)
def _domain_ok(n, sumcap):
    """Counts nonnegative; the virtual complement too when it exists."""
    tot = 0
    for i in range(n.shape[0]):
        if n[i] < 0:
            return False
        tot += n[i]
    if sumcap >= 0 and tot > sumcap:
        return False
    return True


@njit(cache=True)
def _ssa_burst(n, t, T, N, H, coefs, exps, nmono, a, n_iter,
               times, states, counts, m, rec_mode, rec_dt, next_rec, evt):
    """Up to n_iter SSA events in place.  Stops early (without consuming
    randomness) when a REC_ALL buffer is full; the caller grows and re-calls.
    Returns (t, m, next_rec, absorbed)."""
    k = H.shape[1]
    d = H.shape[0]
    for _ in range(n_iter):
        if rec_mode == REC_ALL and m >= times.shape[0]:
            return t, m, next_rec, False
        _eval_a(n, N, coefs, exps, nmono, a)
        a0 = 0.0
        for j in range(k):
            a0 += a[j]
        if a0 <= 0.0:
            return t, m, next_rec, True
        tau = np.random.exponential(1.0 / a0)
        if t + tau > T:
            # the next jump falls beyond the horizon
            return T, m, next_rec, False
        r = np.random.random() * a0
        acc = 0.0
        j_sel = k - 1
        for j in range(k):
            acc += a[j]
            if acc > r:
                j_sel = j
                break
        if rec_mode == REC_GRID:
            while next_rec < t + tau and m < times.shape[0]:
                m = _record(times, states, counts, m, next_rec, n, evt)
                next_rec += rec_dt
        t = t + tau
        for i in range(d):
            n[i] += H[i, j_sel]
        evt[j_sel] += 1
        if rec_mode == REC_ALL:
            m = _record(times, states, counts, m, t, n, evt)
    return t, m, next_rec, False


@njit(cache=True)
def _pad_tail(times, states, counts, m, t_final, T, n, evt, rec_mode, rec_dt,
              next_rec, absorbed):
    if rec_mode == REC_GRID:
        while next_rec <= T + 1e-12 and m < times.shape[0]:
            m = _record(times, states, counts, m, next_rec, n, evt)
            next_rec += rec_dt
    elif absorbed or t_final >= T:
        if m < times.shape[0] and (m == 0 or times[m - 1] < T):
            m = _record(times, states, counts, m, T, n, evt)
    return m


@njit(cache=True)
def ssa_kernel(n0, N, H, coefs, exps, nmono, T, seed, rec_mode, rec_dt, cap0):
    """Direct-method SSA.  Returns (times, states, event_counts, absorbed)."""
    np.random.seed(seed)
    d = H.shape[0]
    k = H.shape[1]
    n = n0.copy()
    a = np.empty(k)
    evt = np.zeros(k, dtype=np.int64)
    times = np.empty(cap0, dtype=np.float64)
    states = np.empty((cap0, d), dtype=np.int64)
    counts = np.empty((cap0, k), dtype=np.int64)
    m = _record(times, states, counts, 0, 0.0, n, evt)
    next_rec = rec_dt

    absorbed = False
    t = 0.0
    while t < T:
        while rec_mode == REC_ALL and m + 8 >= times.shape[0]:
            times, states, counts = _grow(times, states, counts)
        t, m, next_rec, absorbed = _ssa_burst(
            n, t, T, N, H, coefs, exps, nmono, a, 16384,
            times, states, counts, m, rec_mode, rec_dt, next_rec, evt)
        if absorbed:
            break
    m = _pad_tail(times, states, counts, m, t, T, n, evt, rec_mode, rec_dt,
                  next_rec, absorbed)
    return times[:m], states[:m], counts[:m], absorbed


@njit(cache=True)
def tau_leap_kernel(n0, N, H, coefs, exps, nmono, T, seed, eps, n_fb, n_burst,
                    variant, as_printed, rec_mode, rec_dt, cap0, sumcap):
    """Plain tau-leaping (explicit / implicit-rate / mid-point frozen rates).

    Domain violations are counted but the state is not repaired.
    Returns (times, states, event_counts, fallbacks, leaps, violations, absorbed).
    """
    np.random.seed(seed)
    d = H.shape[0]
    k = H.shape[1]
    n = n0.copy()
    a = np.empty(k)
    afrozen = np.empty(k)
    grads = np.empty((k, d))
    zpred = np.empty(d)
    evt = np.zeros(k, dtype=np.int64)
    times = np.empty(cap0, dtype=np.float64)
    states = np.empty((cap0, d), dtype=np.int64)
    counts = np.empty((cap0, k), dtype=np.int64)
    m = _record(times, states, counts, 0, 0.0, n, evt)
    next_rec = rec_dt
    noncrit = np.ones(k, dtype=np.bool_)
    t = 0.0
    fallbacks = 0
    leaps = 0
    violations = 0
    absorbed = False

    while t < T:
        while rec_mode == REC_ALL and m + n_burst + 8 >= times.shape[0]:
            times, states, counts = _grow(times, states, counts)
        _eval_a(n, N, coefs, exps, nmono, a)
        a0 = 0.0
        for j in range(k):
            a0 += a[j]
        if a0 <= 0.0:
            absorbed = True
            break
        _eval_grads(n, N, coefs, exps, nmono, grads)
        tau = _tau_select(a, grads, H, N, eps, noncrit, as_printed)
        if tau < n_fb / a0:
            fallbacks += 1
            t, m, next_rec, absorbed = _ssa_burst(
                n, t, T, N, H, coefs, exps, nmono, a, n_burst,
                times, states, counts, m, rec_mode, rec_dt, next_rec, evt)
            if absorbed:
                break
            continue
        if t + tau > T:
            tau = T - t
        # freeze rates at the current, Euler-predicted, or mid-point state
        if variant == VAR_EXPLICIT:
            for j in range(k):
                afrozen[j] = a[j]
        else:
            scale = tau if variant == VAR_IMPLICIT else 0.5 * tau
            for i in range(d):
                bi = 0.0
                for j in range(k):
                    bi += H[i, j] * a[j]
                zpred[i] = n[i] / N + scale * bi / N
            _eval_a_at_z(zpred, N, coefs, exps, nmono, afrozen)
        if rec_mode == REC_GRID:
            while next_rec < t + tau and m < times.shape[0]:
                m = _record(times, states, counts, m, next_rec, n, evt)
                next_rec += rec_dt
        for j in range(k):
            pj = np.random.poisson(afrozen[j] * tau)
            for i in range(d):
                n[i] += H[i, j] * pj
            evt[j] += pj
        t = t + tau
        leaps += 1
        if not _domain_ok(n, sumcap):
            violations += 1
        if rec_mode == REC_ALL:
            m = _record(times, states, counts, m, t, n, evt)

    m = _pad_tail(times, states, counts, m, t, T, n, evt, rec_mode, rec_dt,
                  next_rec, absorbed)
    return times[:m], states[:m], counts[:m], fallbacks, leaps, violations, absorbed


@njit(cache=True)
def modified_tau_leap_kernel(n0, N, H, coefs, exps, nmono, T, seed, eps, n_fb,
                             n_burst, n_c, max_halvings, thinning, as_printed,
                             rec_mode, rec_dt, cap0, sumcap):
    """Critical-reaction tau-leaping: a critical process fires at most once per
    leap; domain violations are repaired by halving the leap.

    Returns (times, states, event_counts, fallbacks, leaps, repairs,
    exit_flag, absorbed).
    """
    np.random.seed(seed)
    d = H.shape[0]
    k = H.shape[1]
    n = n0.copy()
    a = np.empty(k)
    grads = np.empty((k, d))
    evt = np.zeros(k, dtype=np.int64)
    p = np.zeros(k, dtype=np.int64)
    ntrial = np.empty(d, dtype=np.int64)
    crit = np.zeros(k, dtype=np.bool_)
    noncrit = np.ones(k, dtype=np.bool_)
    times = np.empty(cap0, dtype=np.float64)
    states = np.empty((cap0, d), dtype=np.int64)
    counts = np.empty((cap0, k), dtype=np.int64)
    m = _record(times, states, counts, 0, 0.0, n, evt)
    next_rec = rec_dt
    t = 0.0
    fallbacks = 0
    leaps = 0
    repairs = 0
    absorbed = False
    flag = OK
    has_virtual = sumcap >= 0

    while t < T:
        while rec_mode == REC_ALL and m + n_burst + 8 >= times.shape[0]:
            times, states, counts = _grow(times, states, counts)
        # 1. rates
        _eval_a(n, N, coefs, exps, nmono, a)
        a0 = 0.0
        for j in range(k):
            a0 += a[j]
        if a0 <= 0.0:
            absorbed = True
            break
        # 2. critical set: a_j > 0 and L_j < n_c, where L_j is the smallest
        #    count (virtual complement included) that jump j decreases
        for j in range(k):
            crit[j] = False
            noncrit[j] = True
            if a[j] <= 0.0:
                continue
            L = np.inf
            for i in range(d):
                if H[i, j] < 0 and n[i] < L:
                    L = n[i]
            if has_virtual:
                h0 = 0
                for i in range(d):
                    h0 -= H[i, j]
                if h0 < 0:
                    v = sumcap
                    for i in range(d):
                        v -= n[i]
                    if v < L:
                        L = v
            if L < n_c:
                crit[j] = True
                noncrit[j] = False
        # 3. leap size from the non-critical processes only
        if _any_true(noncrit, k):
            _eval_grads(n, N, coefs, exps, nmono, grads)
            tau_p = _tau_select(a, grads, H, N, eps, noncrit, as_printed)
        else:
            tau_p = np.inf
        # 4. fall back to SSA when the leap is not worth it
        if tau_p < n_fb / a0:
            fallbacks += 1
            t, m, next_rec, absorbed = _ssa_burst(
                n, t, T, N, H, coefs, exps, nmono, a, n_burst,
                times, states, counts, m, rec_mode, rec_dt, next_rec, evt)
            if absorbed:
                break
            continue
        # 5. competing exponential clock for the critical block
        a0c = 0.0
        for j in range(k):
            if crit[j]:
                a0c += a[j]
        tau_pp = np.random.exponential(1.0 / a0c) if a0c > 0.0 else np.inf
        # 6.-8. increments; halve tau_p and redraw while the state escapes
        halvings = 0
        prev_window = -1.0
        while True:
            remaining = T - t
            fire_critical = tau_pp <= tau_p and tau_pp <= remaining
            if fire_critical:
                tau = tau_pp
            elif tau_p <= remaining:
                tau = tau_p
            else:
                tau = remaining
            if halvings == 0 or not thinning:
                for j in range(k):
                    p[j] = np.random.poisson(a[j] * tau) if noncrit[j] else 0
            else:
                # conditional-binomial split of the previously drawn counts
                ratio = tau / prev_window if prev_window > 0.0 else 1.0
                if ratio < 1.0:
                    for j in range(k):
                        if noncrit[j]:
                            p[j] = np.random.binomial(p[j], ratio)
                        else:
                            p[j] = 0
            if fire_critical:
                r = np.random.random() * a0c
                acc = 0.0
                jc = -1
                for j in range(k):
                    if crit[j]:
                        acc += a[j]
                        if acc > r:
                            jc = j
                            break
                if jc >= 0:
                    p[jc] = 1
            for i in range(d):
                ni = n[i]
                for j in range(k):
                    ni += H[i, j] * p[j]
                ntrial[i] = ni
            if _domain_ok(ntrial, sumcap):
                break
            repairs += 1
            halvings += 1
            if halvings > max_halvings:
                flag = REPAIR_EXHAUSTED
                break
            prev_window = tau
            tau_p = 0.5 * tau_p
        if flag != OK:
            break
        if rec_mode == REC_GRID:
            while next_rec < t + tau and m < times.shape[0]:
                m = _record(times, states, counts, m, next_rec, n, evt)
                next_rec += rec_dt
        for i in range(d):
            n[i] = ntrial[i]
        for j in range(k):
            evt[j] += p[j]
        t = t + tau
        leaps += 1
        if rec_mode == REC_ALL:
            m = _record(times, states, counts, m, t, n, evt)

    m = _pad_tail(times, states, counts, m, t, T, n, evt, rec_mode, rec_dt,
                  next_rec, absorbed)
    return times[:m], states[:m], counts[:m], fallbacks, leaps, repairs, flag, absorbed
