"""Compiled inner loops for tree moves, leaf updates and the backfitting sweep.

Trees are flat node arrays (``var, cut, cutval, left, right, parent,
depth, alive`` plus leaf functions ``mu``); node 0 is always the root and
``left[k] < 0`` marks a leaf. Covariates enter only through ``xbin``, the
count of cutpoints ``<=`` each value, so the rule ``x[v] < cuts[v][c]``
is ``xbin[:, v] <= c``.

All randomness arrives as pre-drawn uniforms and normals so that the
Python side owns the single random stream.
"""

import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)


@njit(cache=True)
def split_prob(depth, alpha, beta):
    return alpha * (1.0 + depth) ** (-beta)


@njit(cache=True)
def grow_log_prior_ratio(depth, alpha, beta):
    p0 = split_prob(depth, alpha, beta)
    p1 = split_prob(depth + 1, alpha, beta)
    return math.log(p0) + 2.0 * math.log(1.0 - p1) - math.log(1.0 - p0)


@njit(cache=True)
def leaf_ids(left, alive):
    count = 0
    for k in range(left.size):
        if alive[k] and left[k] < 0:
            count += 1
    out = np.empty(count, np.int64)
    count = 0
    for k in range(left.size):
        if alive[k] and left[k] < 0:
            out[count] = k
            count += 1
    return out


@njit(cache=True)
def nog_ids(left, right, alive):
    """Internal nodes whose two children are both leaves."""
    count = 0
    for k in range(left.size):
        if alive[k] and left[k] >= 0 and left[left[k]] < 0 and left[right[k]] < 0:
            count += 1
    out = np.empty(count, np.int64)
    count = 0
    for k in range(left.size):
        if alive[k] and left[k] >= 0 and left[left[k]] < 0 and left[right[k]] < 0:
            out[count] = k
            count += 1
    return out


@njit(cache=True)
def cut_bounds(node, v, var, cut, left, parent, n_cut_v):
    """Open interval ``(lo, hi)`` of cut indices on ``v`` still available at ``node``."""
    lo = -1
    hi = n_cut_v
    child = node
    a = parent[node]
    while a >= 0:
        if var[a] == v:
            if left[a] == child:
                if cut[a] < hi:
                    hi = cut[a]
            else:
                if cut[a] > lo:
                    lo = cut[a]
        child = a
        a = parent[a]
    return lo, hi


@njit(cache=True)
def route(var, cut, left, right, xbin_row):
    k = 0
    while left[k] >= 0:
        if xbin_row[var[k]] <= cut[k]:
            k = left[k]
        else:
            k = right[k]
    return k


@njit(cache=True)
def route_all(var, cut, left, right, xbin, out):
    for i in range(xbin.shape[0]):
        out[i] = route(var, cut, left, right, xbin[i])


# --- small dense linear algebra -------------------------------------------


@njit(cache=True)
def chol_inplace(A, k):
    for j in range(k):
        s = A[j, j]
        for l in range(j):
            s -= A[j, l] * A[j, l]
        if not s > 0.0:
            return False
        d = math.sqrt(s)
        A[j, j] = d
        for i in range(j + 1, k):
            t = A[i, j]
            for l in range(j):
                t -= A[i, l] * A[j, l]
            A[i, j] = t / d
    return True


@njit(cache=True)
def solve_lower(L, b, k):
    for i in range(k):
        t = b[i]
        for l in range(i):
            t -= L[i, l] * b[l]
        b[i] = t / L[i, i]


@njit(cache=True)
def solve_upper_t(L, b, k):
    for i in range(k - 1, -1, -1):
        t = b[i]
        for l in range(i + 1, k):
            t -= L[l, i] * b[l]
        b[i] = t / L[i, i]


@njit(cache=True)
def _whitened_system(n, r, sigma2, Sigma0):
    """Observed cells, ``sqrt(n/sigma2)``, whitened data ``u`` and ``B = I + S Sigma0 S``."""
    T = n.size
    k = 0
    for s in range(T):
        if n[s] > 0:
            k += 1
    obs = np.empty(k, np.int64)
    k = 0
    for s in range(T):
        if n[s] > 0:
            obs[k] = s
            k += 1
    sq = np.empty(k)
    u = np.empty(k)
    for a in range(k):
        s = obs[a]
        sq[a] = math.sqrt(n[s] / sigma2)
        u[a] = r[s] / math.sqrt(sigma2 * n[s])
    B = np.empty((k, k))
    for a in range(k):
        for b in range(k):
            B[a, b] = sq[a] * Sigma0[obs[a], obs[b]] * sq[b]
        B[a, a] += 1.0
    return obs, sq, u, B


@njit(cache=True)
def logml_core(n, r, sigma2, Sigma0):
    """Data-dependent part of the leaf log marginal likelihood.

    ``-0.5 log det B + 0.5 (u'u - u' B^-1 u)``; adding
    ``-N/2 log(2 pi sigma2) - sum(q) / (2 sigma2)`` gives the full value.
    Returns NaN if ``B`` is not numerically positive definite.
    """
    obs, sq, u, B = _whitened_system(n, r, sigma2, Sigma0)
    k = obs.size
    if k == 0:
        return 0.0
    if not chol_inplace(B, k):
        return np.nan
    logdet = 0.0
    for a in range(k):
        logdet += 2.0 * math.log(B[a, a])
    uu = 0.0
    for a in range(k):
        uu += u[a] * u[a]
    w = u.copy()
    solve_lower(B, w, k)
    ww = 0.0
    for a in range(k):
        ww += w[a] * w[a]
    return -0.5 * logdet + 0.5 * (uu - ww)


@njit(cache=True)
def posterior_moments(n, r, sigma2, Sigma0):
    """Posterior mean and covariance of a leaf function (used for checks)."""
    T = n.size
    obs, sq, u, B = _whitened_system(n, r, sigma2, Sigma0)
    k = obs.size
    mean = np.zeros(T)
    cov = Sigma0.copy()
    if k == 0:
        return mean, cov
    if not chol_inplace(B, k):
        mean[:] = np.nan
        return mean, cov
    # G = Sigma0[:, obs] * sq  (T x k)
    G = np.empty((T, k))
    for s in range(T):
        for a in range(k):
            G[s, a] = Sigma0[s, obs[a]] * sq[a]
    c = u.copy()
    solve_lower(B, c, k)
    solve_upper_t(B, c, k)
    for s in range(T):
        acc = 0.0
        for a in range(k):
            acc += G[s, a] * c[a]
        mean[s] = acc
    # cov = Sigma0 - G B^-1 G'
    H = np.empty((k, T))
    for s in range(T):
        col = np.empty(k)
        for a in range(k):
            col[a] = G[s, a]
        solve_lower(B, col, k)
        for a in range(k):
            H[a, s] = col[a]
    for s in range(T):
        for t in range(T):
            acc = 0.0
            for a in range(k):
                acc += H[a, s] * H[a, t]
            cov[s, t] -= acc
    return mean, cov


@njit(cache=True)
def sample_mu(n, r, sigma2, Sigma0, L0, z1, z2, out):
    """Draw a leaf function from its Gaussian full conditional.

    Uses exact conditioning of a prior draw: with ``f0 = L0 z1`` and
    observation noise ``z2``,
    ``mu = f0 + Sigma0 S B^-1 (u - S f0 - z2)``,
    which never forms the (ill-conditioned) prior precision.
    """
    T = n.size
    for s in range(T):
        acc = 0.0
        for t in range(s + 1):
            acc += L0[s, t] * z1[t]
        out[s] = acc
    obs, sq, u, B = _whitened_system(n, r, sigma2, Sigma0)
    k = obs.size
    if k == 0:
        return True
    if not chol_inplace(B, k):
        return False
    c = np.empty(k)
    for a in range(k):
        c[a] = u[a] - sq[a] * out[obs[a]] - z2[obs[a]]
    solve_lower(B, c, k)
    solve_upper_t(B, c, k)
    for a in range(k):
        c[a] *= sq[a]
    for s in range(T):
        acc = 0.0
        for a in range(k):
            acc += Sigma0[s, obs[a]] * c[a]
        out[s] += acc
    return True


# --- sufficient statistics -------------------------------------------------


@njit(cache=True)
def node_stats(leaf_of_row, node, resid, tidx, n, r):
    n[:] = 0.0
    r[:] = 0.0
    for i in range(leaf_of_row.size):
        if leaf_of_row[i] == node:
            s = tidx[i]
            n[s] += 1.0
            r[s] += resid[i]


@njit(cache=True)
def split_stats(leaf_of_row, node, xbin, v, c, resid, tidx, nL, rL, nR, rR):
    nL[:] = 0.0
    rL[:] = 0.0
    nR[:] = 0.0
    rR[:] = 0.0
    for i in range(leaf_of_row.size):
        if leaf_of_row[i] == node:
            s = tidx[i]
            if xbin[i, v] <= c:
                nL[s] += 1.0
                rL[s] += resid[i]
            else:
                nR[s] += 1.0
                rR[s] += resid[i]


# --- grow / prune ------------------------------------------------------------


@njit(cache=True)
def propose_grow(left, right, parent, var, cut, depth, alive, split_vars, n_cuts,
                 alpha, beta, u_leaf, u_var, u_cut):
    """Pick leaf, covariate and cutpoint uniformly.

    Returns ``(ok, leaf, var, cut, log_proposal_ratio, log_prior_ratio)``;
    ``ok`` is False when the drawn covariate has no cutpoint left at the
    leaf. The rule-choice probabilities appear in both the proposal and the
    tree prior and cancel, so neither ratio carries them.
    """
    leaves = leaf_ids(left, alive)
    b = leaves.size
    h = leaves[min(int(u_leaf * b), b - 1)]
    q = split_vars.size
    if q == 0:
        return False, h, -1, -1, 0.0, 0.0
    v = split_vars[min(int(u_var * q), q - 1)]
    lo, hi = cut_bounds(h, v, var, cut, left, parent, n_cuts[v])
    navail = hi - lo - 1
    if navail <= 0:
        return False, h, v, -1, 0.0, 0.0
    c = lo + 1 + min(int(u_cut * navail), navail - 1)
    nog = nog_ids(left, right, alive).size
    sibling_leaf = 0
    pa = parent[h]
    if pa >= 0:
        sib = right[pa] if left[pa] == h else left[pa]
        if left[sib] < 0:
            sibling_leaf = 1
    nog_after = nog - sibling_leaf + 1
    log_prop = math.log(b) - math.log(nog_after)
    log_prior = grow_log_prior_ratio(depth[h], alpha, beta)
    return True, h, v, c, log_prop, log_prior


@njit(cache=True)
def propose_prune(left, right, alive, depth, alpha, beta, u_node):
    """Pick a node with two leaf children uniformly.

    Returns ``(ok, node, log_proposal_ratio, log_prior_ratio)``, the exact
    negatives of the matching grow move.
    """
    nogs = nog_ids(left, right, alive)
    if nogs.size == 0:
        return False, -1, 0.0, 0.0
    k = nogs[min(int(u_node * nogs.size), nogs.size - 1)]
    b = leaf_ids(left, alive).size
    log_prop = math.log(nogs.size) - math.log(b - 1)
    log_prior = -grow_log_prior_ratio(depth[k], alpha, beta)
    return True, k, log_prop, log_prior


@njit(cache=True)
def _alloc(alive):
    for k in range(alive.size):
        if not alive[k]:
            alive[k] = True
            return k
    raise ValueError("tree node capacity exhausted")


@njit(cache=True)
def apply_grow(h, v, c, cut_value, var, cut, cutval, left, right, parent, depth, alive, mu,
               leaf_of_row, xbin, leaf_of_pred, pred_xbin):
    lch = _alloc(alive)
    rch = _alloc(alive)
    left[h] = lch
    right[h] = rch
    var[h] = v
    cut[h] = c
    cutval[h] = cut_value
    for node in (lch, rch):
        left[node] = -1
        right[node] = -1
        parent[node] = h
        depth[node] = depth[h] + 1
        var[node] = -1
        cut[node] = -1
        cutval[node] = np.nan
        mu[node, :] = mu[h, :]
    for i in range(leaf_of_row.size):
        if leaf_of_row[i] == h:
            leaf_of_row[i] = lch if xbin[i, v] <= c else rch
    for i in range(leaf_of_pred.size):
        if leaf_of_pred[i] == h:
            leaf_of_pred[i] = lch if pred_xbin[i, v] <= c else rch
    return lch, rch


@njit(cache=True)
def apply_prune(k, var, cut, cutval, left, right, alive, leaf_of_row, leaf_of_pred):
    lch = left[k]
    rch = right[k]
    for i in range(leaf_of_row.size):
        if leaf_of_row[i] == lch or leaf_of_row[i] == rch:
            leaf_of_row[i] = k
    for i in range(leaf_of_pred.size):
        if leaf_of_pred[i] == lch or leaf_of_pred[i] == rch:
            leaf_of_pred[i] = k
    alive[lch] = False
    alive[rch] = False
    left[k] = -1
    right[k] = -1
    var[k] = -1
    cut[k] = -1
    cutval[k] = np.nan


@njit(cache=True)
def mh_step(var, cut, cutval, left, right, parent, depth, alive, mu,
            leaf_of_row, xbin, tidx, resid, sigma2, Sigma0,
            leaf_of_pred, pred_xbin, split_vars, n_cuts, cut_offsets, cuts_flat,
            alpha, beta, n_min, allow_grow, u):
    """One grow-or-prune Metropolis-Hastings update of a tree skeleton.

    ``u`` holds five uniforms: move type, node, covariate, cutpoint and
    acceptance. Returns 1 for an accepted grow, 2 for an accepted prune,
    0 otherwise, and -1 if a marginal likelihood was not finite.
    """
    T = Sigma0.shape[0]
    nA = np.empty(T)
    rA = np.empty(T)
    nB = np.empty(T)
    rB = np.empty(T)
    nP = np.empty(T)
    rP = np.empty(T)
    if u[0] < 0.5:
        if not allow_grow:
            return 0
        ok, h, v, c, log_prop, log_prior = propose_grow(
            left, right, parent, var, cut, depth, alive, split_vars, n_cuts,
            alpha, beta, u[1], u[2], u[3])
        if not ok:
            return 0
        split_stats(leaf_of_row, h, xbin, v, c, resid, tidx, nA, rA, nB, rB)
        if nA.sum() < n_min or nB.sum() < n_min:
            return 0
        for s in range(T):
            nP[s] = nA[s] + nB[s]
            rP[s] = rA[s] + rB[s]
        lml = (logml_core(nA, rA, sigma2, Sigma0) + logml_core(nB, rB, sigma2, Sigma0)
               - logml_core(nP, rP, sigma2, Sigma0))
        if not math.isfinite(lml):
            return -1
        if math.log(u[4]) < lml + log_prop + log_prior:
            apply_grow(h, v, c, cuts_flat[cut_offsets[v] + c], var, cut, cutval, left, right,
                       parent, depth, alive, mu, leaf_of_row, xbin, leaf_of_pred, pred_xbin)
            return 1
        return 0
    ok, k, log_prop, log_prior = propose_prune(left, right, alive, depth, alpha, beta, u[1])
    if not ok:
        return 0
    node_stats(leaf_of_row, left[k], resid, tidx, nA, rA)
    node_stats(leaf_of_row, right[k], resid, tidx, nB, rB)
    for s in range(T):
        nP[s] = nA[s] + nB[s]
        rP[s] = rA[s] + rB[s]
    lml = (logml_core(nP, rP, sigma2, Sigma0) - logml_core(nA, rA, sigma2, Sigma0)
           - logml_core(nB, rB, sigma2, Sigma0))
    if not math.isfinite(lml):
        return -1
    if math.log(u[4]) < lml + log_prop + log_prior:
        apply_prune(k, var, cut, cutval, left, right, alive, leaf_of_row, leaf_of_pred)
        return 2
    return 0


@njit(cache=True)
def sample_leaves(left, alive, mu, leaf_of_row, tidx, resid, sigma2, Sigma0, L0, Z):
    """Redraw every leaf function of one tree; leaves take rows of ``Z`` in node order."""
    cap = left.size
    T = Sigma0.shape[0]
    n = np.zeros((cap, T))
    r = np.zeros((cap, T))
    for i in range(leaf_of_row.size):
        k = leaf_of_row[i]
        n[k, tidx[i]] += 1.0
        r[k, tidx[i]] += resid[i]
    rank = 0
    for k in range(cap):
        if alive[k] and left[k] < 0:
            if not sample_mu(n[k], r[k], sigma2, Sigma0, L0, Z[rank, :T], Z[rank, T:], mu[k]):
                return False
            rank += 1
    return True


@njit(cache=True)
def sweep(var, cut, cutval, left, right, parent, depth, alive, mu,
          leaf_of_row, leaf_of_pred, xbin, tidx, pred_xbin, pred_tidx,
          target, eta, sigma2, fit, pred_fit, Sigma0, L0,
          split_vars, n_cuts, cut_offsets, cuts_flat, alpha, beta, n_min, allow_grow,
          U, Z, moves):
    """Backfit all trees once.

    ``target`` is the working response minus the baseline. Tree ``j`` sees
    the partial residual ``target / eta - (fit - g_j)``, whose noise
    variance is ``sigma2 / eta**2``. ``fit`` and ``pred_fit`` are updated
    in place. Returns False on a numerical failure.
    """
    m = var.shape[0]
    n = target.size
    npred = pred_tidx.size
    resid = np.empty(n)
    g_old = np.empty(n)
    gp_old = np.empty(npred)
    s2 = sigma2 / (eta * eta)
    for j in range(m):
        muj = mu[j]
        lr = leaf_of_row[j]
        lp = leaf_of_pred[j]
        for i in range(n):
            g = muj[lr[i], tidx[i]]
            g_old[i] = g
            resid[i] = target[i] / eta - (fit[i] - g)
        for i in range(npred):
            gp_old[i] = muj[lp[i], pred_tidx[i]]
        code = mh_step(var[j], cut[j], cutval[j], left[j], right[j], parent[j], depth[j],
                       alive[j], muj, lr, xbin, tidx, resid, s2, Sigma0, lp, pred_xbin,
                       split_vars, n_cuts, cut_offsets, cuts_flat, alpha, beta, n_min,
                       allow_grow, U[j])
        if code < 0:
            return False
        moves[j] = code
        if not sample_leaves(left[j], alive[j], muj, lr, tidx, resid, s2, Sigma0, L0, Z[j]):
            return False
        for i in range(n):
            fit[i] += muj[lr[i], tidx[i]] - g_old[i]
        for i in range(npred):
            pred_fit[i] += muj[lp[i], pred_tidx[i]] - gp_old[i]
    return True


@njit(cache=True)
def forest_sum(mu, leaf_of_row, tidx):
    m = mu.shape[0]
    n = tidx.size
    out = np.zeros(n)
    for j in range(m):
        for i in range(n):
            out[i] += mu[j, leaf_of_row[j, i], tidx[i]]
    return out
