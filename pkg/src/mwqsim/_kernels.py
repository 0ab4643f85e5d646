"""Compiled numerical core.

Every routine here works on flat numpy arrays so that the same code serves
the public API (one call at a time) and the simulation loop (millions of
slots).  Receivers are encoded CSR-style: ``grp_ptr[r]:grp_ptr[r + 1]``
indexes ``grp_links``, which lists the link ids of receiver ``r`` in
ascending order.

Naming: ``g`` is the channel gain |h|^2, ``w`` the queue weights (queue
backlog times the rate scale), ``perm`` the concatenated per-receiver SIC
decoding order.
"""

import numpy as np
from numba import njit

_CACHE = True

# status codes returned by the oracle / sensitivity kernels
OK = 0
NOT_CONVERGED = 1
ILL_CONDITIONED = 2


@njit(cache=_CACHE, error_model="numpy")
def decoding_order(w, grp_ptr, grp_links):
    """Per receiver: links by descending weight, ties by ascending link id."""
    perm = np.empty(grp_links.shape[0], dtype=np.int64)
    for r in range(grp_ptr.shape[0] - 1):
        lo, hi = grp_ptr[r], grp_ptr[r + 1]
        links = grp_links[lo:hi]
        keys = np.empty(hi - lo)
        for i in range(hi - lo):
            keys[i] = -w[links[i]]
        order = np.argsort(keys, kind="mergesort")
        for i in range(hi - lo):
            perm[lo + i] = links[order[i]]
    return perm


@njit(cache=_CACHE, error_model="numpy")
def rates(p, g, perm, grp_ptr):
    mu = np.zeros(p.shape[0])
    for r in range(grp_ptr.shape[0] - 1):
        s = 0.0
        for k in range(grp_ptr[r], grp_ptr[r + 1]):
            l = perm[k]
            prev = s
            s += g[l] * p[l]
            mu[l] = np.log1p(s) - np.log1p(prev)
    return mu


@njit(cache=_CACHE, error_model="numpy")
def lagrangian(p, g, w, V, perm, grp_ptr):
    mu = rates(p, g, perm, grp_ptr)
    val = 0.0
    for l in range(p.shape[0]):
        val += w[l] * mu[l] - V * p[l]
    return val


@njit(cache=_CACHE, error_model="numpy")
def _weight_gaps(w, perm, lo, hi):
    # c_k = w_pi(k) - w_pi(k+1), with w_pi(K+1) = 0
    c = np.empty(hi - lo)
    for k in range(lo, hi):
        nxt = w[perm[k + 1]] if k + 1 < hi else 0.0
        c[k - lo] = w[perm[k]] - nxt
    return c


@njit(cache=_CACHE, error_model="numpy")
def _partial_sums(p, g, perm, lo, hi):
    s = np.empty(hi - lo)
    acc = 0.0
    for k in range(lo, hi):
        l = perm[k]
        acc += g[l] * p[l]
        s[k - lo] = acc
    return s


@njit(cache=_CACHE, error_model="numpy")
def gradient(p, g, w, V, perm, grp_ptr):
    G = np.empty(p.shape[0])
    for r in range(grp_ptr.shape[0] - 1):
        lo, hi = grp_ptr[r], grp_ptr[r + 1]
        s = _partial_sums(p, g, perm, lo, hi)
        c = _weight_gaps(w, perm, lo, hi)
        tail = 0.0
        for k in range(hi - lo - 1, -1, -1):
            tail += c[k] / (1.0 + s[k])
            l = perm[lo + k]
            G[l] = g[l] * tail - V
    return G


@njit(cache=_CACHE, error_model="numpy")
def hessian(p, g, w, perm, grp_ptr):
    n = p.shape[0]
    H = np.zeros((n, n))
    for r in range(grp_ptr.shape[0] - 1):
        lo, hi = grp_ptr[r], grp_ptr[r + 1]
        m = hi - lo
        s = _partial_sums(p, g, perm, lo, hi)
        c = _weight_gaps(w, perm, lo, hi)
        e = np.empty(m)
        tail = 0.0
        for k in range(m - 1, -1, -1):
            tail += c[k] / (1.0 + s[k]) ** 2
            e[k] = tail
        for j in range(m):
            lj = perm[lo + j]
            for k in range(m):
                lk = perm[lo + k]
                H[lj, lk] = -g[lj] * g[lk] * e[max(j, k)]
    return H


@njit(cache=_CACHE, error_model="numpy")
def gradient_jacobians(p, g, w, perm, grp_ptr):
    """Partial derivatives of the gradient w.r.t. the weights and the gains.

    Returns ``(dG_dw, dG_dg)``, both L x L, with the decoding order frozen.
    """
    n = p.shape[0]
    dw = np.zeros((n, n))
    dg = np.zeros((n, n))
    for r in range(grp_ptr.shape[0] - 1):
        lo, hi = grp_ptr[r], grp_ptr[r + 1]
        m = hi - lo
        s = _partial_sums(p, g, perm, lo, hi)
        c = _weight_gaps(w, perm, lo, hi)
        d = np.empty(m)
        e = np.empty(m)
        t1 = 0.0
        t2 = 0.0
        for k in range(m - 1, -1, -1):
            t1 += c[k] / (1.0 + s[k])
            t2 += c[k] / (1.0 + s[k]) ** 2
            d[k] = t1
            e[k] = t2
        for j in range(m):
            lj = perm[lo + j]
            for k in range(m):
                lk = perm[lo + k]
                if k == j:
                    dw[lj, lk] = g[lj] / (1.0 + s[k])
                elif k > j:
                    dw[lj, lk] = g[lj] * (1.0 / (1.0 + s[k]) - 1.0 / (1.0 + s[k - 1]))
                dg[lj, lk] = -g[lj] * p[lk] * e[max(j, k)]
                if k == j:
                    dg[lj, lk] += d[j]
    return dw, dg


@njit(cache=_CACHE, error_model="numpy")
def project_box(x, pmax):
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        v = x[i]
        if v < 0.0:
            v = 0.0
        elif v > pmax:
            v = pmax
        out[i] = v
    return out


@njit(cache=_CACHE, error_model="numpy")
def kkt_residual(p, G, pmax):
    res = 0.0
    for i in range(p.shape[0]):
        if p[i] <= 0.0:
            r = max(G[i], 0.0)
        elif p[i] >= pmax:
            r = max(-G[i], 0.0)
        else:
            r = abs(G[i])
        if r > res:
            res = r
    return res


@njit(cache=_CACHE, error_model="numpy")
def _free_mask(p, G, pmax):
    # a coordinate is pinned when it sits on a bound and the gradient pushes outward
    n = p.shape[0]
    free = np.ones(n, dtype=np.bool_)
    for i in range(n):
        if p[i] <= 0.0 and G[i] <= 0.0:
            free[i] = False
        elif p[i] >= pmax and G[i] >= 0.0:
            free[i] = False
    return free


@njit(cache=_CACHE, error_model="numpy")
def solve_equilibrium(p0, g, w, V, pmax, perm, grp_ptr, tol, max_iter, ridge):
    """Projected Newton ascent with Armijo backtracking on the box [0, pmax].

    Returns ``(p, residual, iterations, status)``.
    """
    n = p0.shape[0]
    p = project_box(p0, pmax)
    f = lagrangian(p, g, w, V, perm, grp_ptr)
    res = np.inf
    polished = False
    for it in range(max_iter):
        G = gradient(p, g, w, V, perm, grp_ptr)
        res = kkt_residual(p, G, pmax)
        if res < tol:
            if polished:
                return p, res, it, OK
        free = _free_mask(p, G, pmax)
        idx = np.nonzero(free)[0]
        d = np.zeros(n)
        if idx.shape[0] > 0:
            H = hessian(p, g, w, perm, grp_ptr)
            m = idx.shape[0]
            A = np.empty((m, m))
            b = np.empty(m)
            hn = 0.0
            for a in range(m):
                b[a] = G[idx[a]]
                for c in range(m):
                    A[a, c] = -H[idx[a], idx[c]]
                    hn = max(hn, abs(A[a, c]))
            eps = ridge * (1.0 + hn)
            for a in range(m):
                A[a, a] += eps
            step = np.linalg.solve(A, b)
            for a in range(m):
                d[idx[a]] = step[a]
        step_size = 1.0
        accepted = False
        for _ in range(60):
            trial = project_box(p + step_size * d, pmax)
            ft = lagrangian(trial, g, w, V, perm, grp_ptr)
            gain = 0.0
            for i in range(n):
                gain += G[i] * (trial[i] - p[i])
            if ft >= f + 1e-4 * gain - 1e-14 * (1.0 + abs(f)):
                accepted = True
                break
            step_size *= 0.5
        if not accepted:
            # fall back to a short projected-gradient move
            trial = project_box(p + 1e-3 * G, pmax)
            ft = lagrangian(trial, g, w, V, perm, grp_ptr)
            if ft < f:
                trial = p
                ft = f
        moved = 0.0
        for i in range(n):
            moved = max(moved, abs(trial[i] - p[i]))
        p = trial
        f = ft
        if res < tol:
            polished = True
        elif moved <= 1e-15 * (1.0 + np.max(np.abs(p))):
            G = gradient(p, g, w, V, perm, grp_ptr)
            res = kkt_residual(p, G, pmax)
            return p, res, it + 1, OK if res < tol else NOT_CONVERGED
    G = gradient(p, g, w, V, perm, grp_ptr)
    res = kkt_residual(p, G, pmax)
    return p, res, max_iter, OK if res < tol else NOT_CONVERGED


@njit(cache=_CACHE, error_model="numpy")
def multipliers(p, G, pmax):
    """Box multipliers: first L for p >= 0, last L for p <= pmax."""
    n = p.shape[0]
    lam = np.zeros(2 * n)
    for i in range(n):
        if p[i] <= 0.0:
            lam[i] = max(-G[i], 0.0)
        if p[i] >= pmax:
            lam[n + i] = max(G[i], 0.0)
    return lam


@njit(cache=_CACHE, error_model="numpy")
def pinned_mask(p, lam, pmax):
    """Coordinates sitting on a bound with a strictly positive multiplier."""
    n = p.shape[0]
    pinned = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        if (p[i] <= 0.0 and lam[i] > 0.0) or (p[i] >= pmax and lam[n + i] > 0.0):
            pinned[i] = True
    return pinned


@njit(cache=_CACHE, error_model="numpy")
def sensitivities_masked(p, g, w, pinned, perm, grp_ptr, ridge, max_cond):
    """Implicit-function derivatives with a given active set.

    Returns ``(dp_dw, dp_dg, status)``.  Pinned coordinates get zero rows;
    the free block solves ``(-H_FF + eps I) X = dG_F/d(w, g)``.
    """
    n = p.shape[0]
    dp_dw = np.zeros((n, n))
    dp_dg = np.zeros((n, n))
    m = 0
    for i in range(n):
        if not pinned[i]:
            m += 1
    if m == 0:
        return dp_dw, dp_dg, OK
    idx = np.empty(m, dtype=np.int64)
    a = 0
    for i in range(n):
        if not pinned[i]:
            idx[a] = i
            a += 1
    H = hessian(p, g, w, perm, grp_ptr)
    dw, dg = gradient_jacobians(p, g, w, perm, grp_ptr)
    A = np.empty((m, m))
    hn = 0.0
    for a in range(m):
        for c in range(m):
            A[a, c] = -H[idx[a], idx[c]]
            hn = max(hn, abs(A[a, c]))
    if not np.isfinite(hn):
        return dp_dw, dp_dg, ILL_CONDITIONED
    eps = ridge * (1.0 + hn)
    for a in range(m):
        A[a, a] += eps
    if np.linalg.cond(A) > max_cond:
        return dp_dw, dp_dg, ILL_CONDITIONED
    B = np.empty((m, 2 * n))
    for a in range(m):
        for c in range(n):
            B[a, c] = dw[idx[a], c]
            B[a, n + c] = dg[idx[a], c]
    X = np.linalg.solve(A, B)
    for a in range(m):
        for c in range(n):
            dp_dw[idx[a], c] = X[a, c]
            dp_dg[idx[a], c] = X[a, n + c]
    return dp_dw, dp_dg, OK


@njit(cache=_CACHE, error_model="numpy")
def sensitivities(p, g, w, V, pmax, perm, grp_ptr, ridge, max_cond):
    """Sensitivities with the active set read off the gradient at ``p``."""
    G = gradient(p, g, w, V, perm, grp_ptr)
    lam = multipliers(p, G, pmax)
    pinned = pinned_mask(p, lam, pmax)
    return sensitivities_masked(p, g, w, pinned, perm, grp_ptr, ridge, max_cond)


# --------------------------------------------------------------------------
# simulation loop

POLICY_MWQ = 0
POLICY_COMPENSATED = 1
POLICY_ORACLE = 2
POLICY_CONSTANT = 3
POLICY_TDM = 4


@njit(cache=_CACHE, error_model="numpy")
def reflect(z, h0):
    r = abs(z)
    if r >= h0:
        return z
    if r == 0.0:
        return complex(h0, 0.0)
    return z * (h0 / r)


@njit(cache=_CACHE, error_model="numpy")
def channel_path(h, noise, a, tau, h0):
    """Gains ``|h|^2`` after each of ``noise.shape[0]`` reflected OU steps."""
    n, L = noise.shape
    out = np.empty((n, L))
    cur = h.copy()
    for t in range(n):
        for l in range(L):
            z = cur[l] * (1.0 - 0.5 * a[l] * tau) + np.sqrt(a[l] * tau) * noise[t, l]
            cur[l] = reflect(z, h0)
            out[t, l] = cur[l].real ** 2 + cur[l].imag ** 2
    return out


@njit(cache=_CACHE, error_model="numpy")
def tdm_allocation(g, w, V, pmax):
    """Single-link activation: returns (power vector, selected link)."""
    n = g.shape[0]
    best = -1
    best_u = -np.inf
    best_p = 0.0
    for l in range(n):
        cand = w[l] / V - 1.0 / g[l]
        if cand < 0.0:
            cand = 0.0
        elif cand > pmax:
            cand = pmax
        u = w[l] * np.log1p(g[l] * cand) - V * cand
        if u > best_u:
            best_u = u
            best = l
            best_p = cand
    p = np.zeros(n)
    p[best] = best_p
    return p, best


@njit(cache=_CACHE, error_model="numpy")
def run_chunk(
    state_h, state_q, state_p, state_pstar, prev_h, prev_q, flags,
    noise, arrivals, a, tau, h0, rate_scale, V, kappa, pmax,
    policy, iters, const_p, grp_ptr, grp_links,
    track, tol, max_iter, ridge, max_cond,
    slot0, warm_slots, acc_q, acc_p, acc_err, counters,
    ts_every, ts_out, ts_t, ts_rows, dep_out,
):
    """Advance the coupled channel / queue / policy system over one chunk.

    ``flags[0]`` marks whether ``prev_h``/``prev_q`` are valid, ``flags[1]``
    whether ``state_pstar`` holds a usable warm start.
    ``counters``: [measured slots, compensation fallbacks, oracle failures,
    TDM activations].
    ``dep_out`` (rows = slots of this chunk, or zero rows) receives the
    fluid amount served per link and slot, for packet tagging.
    Returns the number of time-series rows written.
    """
    n_steps = noise.shape[0]
    L = state_q.shape[0]
    w = np.empty(L)
    row = ts_rows
    for t in range(n_steps):
        slot = slot0 + t
        # (1) channel
        for l in range(L):
            z = state_h[l] * (1.0 - 0.5 * a[l] * tau) + np.sqrt(a[l] * tau) * noise[t, l]
            state_h[l] = reflect(z, h0)
        g = np.empty(L)
        for l in range(L):
            g[l] = state_h[l].real ** 2 + state_h[l].imag ** 2
        for l in range(L):
            w[l] = rate_scale * state_q[l]
        perm = decoding_order(w, grp_ptr, grp_links)
        # (3) policy
        have_pstar = False
        sel = 0
        if policy == POLICY_MWQ or policy == POLICY_COMPENSATED:
            comp = np.zeros(L)
            use_comp = policy == POLICY_COMPENSATED and flags[0] == 1
            if use_comp:
                # linearize around the previous slot, where the iterate sits
                g_prev = np.empty(L)
                w_prev = np.empty(L)
                for l in range(L):
                    g_prev[l] = prev_h[l].real ** 2 + prev_h[l].imag ** 2
                    w_prev[l] = rate_scale * prev_q[l]
                perm_prev = decoding_order(w_prev, grp_ptr, grp_links)
                dp_dw, dp_dg, st = sensitivities(
                    state_p, g_prev, w_prev, V, pmax, perm_prev, grp_ptr, ridge, max_cond
                )
                if st != OK:
                    counters[1] += 1
                else:
                    for i in range(L):
                        acc = 0.0
                        for m in range(L):
                            dq = state_q[m] - prev_q[m]
                            dh = state_h[m] - prev_h[m]
                            # Re[phi_h dh] with phi_h = 2 dp/dg conj(h)
                            dgm = 2.0 * (prev_h[m].real * dh.real + prev_h[m].imag * dh.imag)
                            acc += rate_scale * dp_dw[i, m] * dq + dp_dg[i, m] * dgm
                        comp[i] = acc
                    if not np.all(np.isfinite(comp)):
                        comp[:] = 0.0
                        counters[1] += 1
            p = state_p.copy()
            for it in range(iters):
                G = gradient(p, g, w, V, perm, grp_ptr)
                if it == 0:
                    p = project_box(p + kappa * tau * G + comp, pmax)
                else:
                    p = project_box(p + kappa * tau * G, pmax)
        elif policy == POLICY_ORACLE:
            start = state_pstar if flags[1] == 1 else state_p
            p, res, nit, st = solve_equilibrium(
                start, g, w, V, pmax, perm, grp_ptr, tol, max_iter, ridge
            )
            if st != OK:
                counters[2] += 1
            have_pstar = True
            for l in range(L):
                state_pstar[l] = p[l]
            flags[1] = 1
        elif policy == POLICY_CONSTANT:
            p = np.empty(L)
            for l in range(L):
                p[l] = const_p
        else:
            p, sel = tdm_allocation(g, w, V, pmax)
            counters[3] += 1
        for l in range(L):
            state_p[l] = p[l]
        # (4) rates
        if policy == POLICY_TDM:
            mu = np.zeros(L)
            mu[sel] = np.log1p(g[sel] * p[sel])
        else:
            mu = rates(p, g, perm, grp_ptr)
        # (5) queues: departures before arrivals
        for l in range(L):
            prev_q[l] = state_q[l]
            prev_h[l] = state_h[l]
        flags[0] = 1
        for l in range(L):
            qn = state_q[l] - rate_scale * mu[l] * tau
            if qn < 0.0:
                qn = 0.0
            if dep_out.shape[0] > 0:
                dep_out[t, l] = state_q[l] - qn
            state_q[l] = qn + arrivals[t, l]
        # (6) equilibrium tracking (measurement only)
        err = np.nan
        if track:
            if not have_pstar:
                start = state_pstar if flags[1] == 1 else state_p
                ps, res, nit, st = solve_equilibrium(
                    start, g, w, V, pmax, perm, grp_ptr, tol, max_iter, ridge
                )
                if st != OK:
                    counters[2] += 1
                for l in range(L):
                    state_pstar[l] = ps[l]
                flags[1] = 1
            err = 0.0
            for l in range(L):
                err = max(err, abs(state_p[l] - state_pstar[l]))
        if slot >= warm_slots:
            counters[0] += 1
            for l in range(L):
                acc_q[l] += state_q[l]
                acc_p[l] += state_p[l]
            if track:
                acc_err[0] += err
        if ts_every > 0 and slot % ts_every == 0 and row < ts_out.shape[0]:
            ts_t[row] = (slot + 1) * tau
            for l in range(L):
                ts_out[row, l] = state_q[l]
                ts_out[row, L + l] = state_p[l]
                ts_out[row, 2 * L + l] = state_pstar[l] if track else np.nan
            ts_out[row, 3 * L] = err
            row += 1
    return row
