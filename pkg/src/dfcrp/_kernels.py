"""Hot loops of the Gibbs sampler, jitted when numba is available.

Every function here is written against plain numpy arrays and scalars so
that the identical source runs compiled (numba nopython) or interpreted.
State layout: clusters live in integer "slots"; ``labels[i]`` maps item
``i`` to its slot, ``counts``/``fam_in``/``active`` and the parameter
arrays are indexed by slot, and freed slots are recycled through a LIFO
stack.  All randomness is pre-drawn outside and consumed by index, which
keeps runs bit-reproducible for a given seed regardless of the backend.
"""

from __future__ import annotations

import math

import numpy as np

try:  # pragma: no cover - exercised implicitly by every import
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap


LOG_2PI = math.log(2.0 * math.pi)
NEG_INF = -math.inf


@njit(cache=True)
def joint_eval(labels, order, fams, n_fam, alpha, counts_scr, famtab_scr, blocked_scr, d_out):
    """Order-conditional log probability of a valid partition.

    Seats items following ``order`` and accumulates the constrained step
    log probabilities.  Fills ``d_out[pos]`` with the step's unblocked
    seated count (the alpha-free part of the denominator) and returns
    ``(logp, sum_log_join_numerators)`` so the caller can re-evaluate the
    same partition at a different concentration in O(n).

    Scratch arrays must arrive zeroed; they are zeroed again on exit.
    Assumes the partition satisfies the family constraint.
    """
    n = order.shape[0]
    logp = 0.0
    slk = 0.0
    for pos in range(n):
        item = order[pos]
        k = labels[item]
        f = fams[item]
        m = counts_scr[k]
        if pos > 0:
            nm = float(pos - blocked_scr[f])
            d_out[pos] = nm
            if m > 0:
                lm = math.log(float(m))
                logp += lm - math.log(nm + alpha)
                slk += lm
            else:
                logp += math.log(alpha) - math.log(nm + alpha)
        for g in range(n_fam):
            if famtab_scr[k, g] != 0:
                blocked_scr[g] += 1
        famtab_scr[k, f] = 1
        blocked_scr[f] += m + 1
        counts_scr[k] = m + 1
    for pos in range(n):
        k = labels[order[pos]]
        counts_scr[k] = 0
        for g in range(n_fam):
            famtab_scr[k, g] = 0
    for g in range(n_fam):
        blocked_scr[g] = 0
    return logp, slk


@njit(cache=True)
def cov3_precision(var_x, var_d, cov_xd, prec_out):
    """Closed-form inverse of the structured 3x3 covariance.

    Writes the precision into ``prec_out`` and returns the log
    determinant, or ``nan`` when the matrix is not positive definite.
    """
    det = var_x * (var_x * var_d - 2.0 * cov_xd * cov_xd)
    if var_x <= 0.0 or var_d <= 0.0 or det <= 0.0:
        return np.nan
    i00 = (var_x * var_d - cov_xd * cov_xd) / det
    i01 = cov_xd * cov_xd / det
    i02 = -var_x * cov_xd / det
    i22 = var_x * var_x / det
    prec_out[0, 0] = i00
    prec_out[1, 1] = i00
    prec_out[0, 1] = i01
    prec_out[1, 0] = i01
    prec_out[0, 2] = i02
    prec_out[2, 0] = i02
    prec_out[1, 2] = i02
    prec_out[2, 1] = i02
    prec_out[2, 2] = i22
    return math.log(det)


@njit(cache=True)
def mvn3_logpdf(y0, y1, y2, m0, m1, m2, prec, logdet):
    d0 = y0 - m0
    d1 = y1 - m1
    d2 = y2 - m2
    quad = (
        prec[0, 0] * d0 * d0
        + prec[1, 1] * d1 * d1
        + prec[2, 2] * d2 * d2
        + 2.0 * (prec[0, 1] * d0 * d1 + prec[0, 2] * d0 * d2 + prec[1, 2] * d1 * d2)
    )
    return -0.5 * (3.0 * LOG_2PI + logdet + quad)


@njit(cache=True)
def cov_prior_logpdf(var_x, var_d, cov_xd, ld, gam):
    """Prior log density of covariance components; gam packs the
    (kappa_x, eta_x, tau_x, kappa_d, eta_d, tau_d, a_lambda, b_lambda)
    hyperparameters."""
    if var_x <= 0.0 or var_d <= 0.0:
        return NEG_INF
    scale_max = math.sqrt(var_x * var_d / 2.0)
    lam = cov_xd / scale_max
    if lam <= -1.0 or lam >= 1.0:
        return NEG_INF
    kappa_x, eta_x, tau_x = gam[0], gam[1], gam[2]
    kappa_d, eta_d, tau_d = gam[3], gam[4], gam[5]
    a_lam, b_lam = gam[6], gam[7]
    shape_x = tau_x * kappa_x * ld**eta_x
    logp = (
        shape_x * math.log(tau_x)
        - math.lgamma(shape_x)
        + (shape_x - 1.0) * math.log(var_x)
        - tau_x * var_x
    )
    shape_d = tau_d * kappa_d * ld**eta_d
    logp += (
        shape_d * math.log(tau_d)
        - math.lgamma(shape_d)
        + (shape_d - 1.0) * math.log(var_d)
        - tau_d * var_d
    )
    t = (lam + 1.0) / 2.0
    logp += (
        (a_lam - 1.0) * math.log(t)
        + (b_lam - 1.0) * math.log(1.0 - t)
        - (math.lgamma(a_lam) + math.lgamma(b_lam) - math.lgamma(a_lam + b_lam))
        - math.log(2.0)
    )
    logp -= math.log(scale_max)
    return logp


@njit(cache=True)
def iterate(
    labels,
    order,
    fams,
    y,
    n_fam,
    alpha,
    counts,
    fam_in,
    active,
    free_stack,
    state_ints,
    mu,
    covp,
    prec,
    logdet,
    nb_indptr,
    nb_indices,
    unrestricted,
    use_lik,
    exchangeable,
    ln18,
    swap_idx,
    u_sig,
    u_asn,
    aux_mu,
    aux_cov,
    cache_f,
    d,
    counts_scr,
    famtab_scr,
    blocked_scr,
    d_scr,
    order_scr,
    cand_buf,
    logw_buf,
    w_buf,
    seen_buf,
    stats,
    record_every,
    rec_labels,
    do_trace,
    trace_len,
    trace_c,
    trace_w,
):
    """A batch of sampler iterations (one order proposal + one
    last-item reassignment each), mutating the slot state in place.

    ``state_ints`` holds (free_top, num_clusters); ``cache_f`` holds the
    running order-conditional log probability and the sum of log join
    numerators, both patched incrementally as the last item moves.
    ``stats`` accumulates (order proposals, order acceptances).
    """
    n = order.shape[0]
    n_iters = swap_idx.shape[0]
    num_slots = counts.shape[0]
    aux_prec = np.empty((3, 3))
    for i in range(n_iters):
        # ---- Metropolis step on the allocation order (swap with last)
        j = swap_idx[i]
        last = n - 1
        stats[0] += 1
        if exchangeable:
            # every order has the same probability: always accept
            tmp = order[j]
            order[j] = order[last]
            order[last] = tmp
            stats[1] += 1
        elif j != last:
            for p in range(n):
                order_scr[p] = order[p]
            tmp = order_scr[j]
            order_scr[j] = order_scr[last]
            order_scr[last] = tmp
            logp_star, slk_star = joint_eval(
                labels, order_scr, fams, n_fam, alpha,
                counts_scr, famtab_scr, blocked_scr, d_scr,
            )
            delta = logp_star - cache_f[0]
            if delta >= 0.0 or u_sig[i] < math.exp(delta):
                for p in range(n):
                    order[p] = order_scr[p]
                    d[p] = d_scr[p]
                cache_f[0] = logp_star
                cache_f[1] = slk_star
                stats[1] += 1
        else:
            # identity swap: ratio one, accepted as-is
            stats[1] += 1

        # ---- reassign the item now last in the order
        it = order[last]
        f = fams[it]
        k_old = labels[it]
        m_old = counts[k_old]
        d_last = d[last]
        if n > 1:
            if m_old >= 2:
                old_num = math.log(float(m_old - 1))
                cache_f[1] -= old_num
            else:
                old_num = math.log(alpha)
            cache_f[0] -= old_num - math.log(d_last + alpha)
        counts[k_old] = m_old - 1
        fam_in[k_old, f] = 0
        if m_old == 1:
            active[k_old] = 0
            free_stack[state_ints[0]] = k_old
            state_ints[0] += 1
            state_ints[1] -= 1
        labels[it] = -1

        # candidate clusters: no same-family member, at least one neighbor
        n_cand = 0
        if unrestricted:
            for s in range(num_slots):
                if active[s] == 1 and fam_in[s, f] == 0:
                    cand_buf[n_cand] = s
                    n_cand += 1
        else:
            lo = nb_indptr[it]
            hi = nb_indptr[it + 1]
            for ptr in range(lo, hi):
                s = labels[nb_indices[ptr]]
                if s < 0:
                    continue
                if seen_buf[s] == 0:
                    seen_buf[s] = 1
                    if fam_in[s, f] == 0:
                        cand_buf[n_cand] = s
                        n_cand += 1
            for ptr in range(lo, hi):
                s = labels[nb_indices[ptr]]
                if s >= 0:
                    seen_buf[s] = 0
            for a in range(1, n_cand):
                v = cand_buf[a]
                b = a - 1
                while b >= 0 and cand_buf[b] > v:
                    cand_buf[b + 1] = cand_buf[b]
                    b -= 1
                cand_buf[b + 1] = v

        max_lw = NEG_INF
        for idx in range(n_cand):
            s = cand_buf[idx]
            lw = math.log(float(counts[s]))
            if use_lik:
                lw += mvn3_logpdf(
                    y[it, 0], y[it, 1], y[it, 2],
                    mu[s, 0], mu[s, 1], mu[s, 2],
                    prec[s], logdet[s],
                )
            logw_buf[idx] = lw
            if lw > max_lw:
                max_lw = lw
        lw_new = math.log(alpha)
        aux_logdet = 0.0
        if use_lik:
            aux_logdet = cov3_precision(
                aux_cov[i, 0], aux_cov[i, 1], aux_cov[i, 2], aux_prec
            )
            lw_new += mvn3_logpdf(
                y[it, 0], y[it, 1], y[it, 2],
                aux_mu[i, 0], aux_mu[i, 1], aux_mu[i, 2],
                aux_prec, aux_logdet,
            )
        logw_buf[n_cand] = lw_new
        if lw_new > max_lw:
            max_lw = lw_new

        if max_lw == NEG_INF:
            # all weights vanish: force a new cluster
            choice = n_cand
            for idx in range(n_cand):
                w_buf[idx] = 0.0
            w_buf[n_cand] = 1.0
            wsum = 1.0
        else:
            wsum = 0.0
            for idx in range(n_cand + 1):
                w = math.exp(logw_buf[idx] - max_lw)
                w_buf[idx] = w
                wsum += w
            thr = u_asn[i] * wsum
            acc = 0.0
            choice = n_cand
            for idx in range(n_cand + 1):
                acc += w_buf[idx]
                if acc > thr:
                    choice = idx
                    break

        if do_trace:
            trace_len[i] = n_cand + 1
            for idx in range(n_cand):
                trace_c[i, idx] = cand_buf[idx]
                trace_w[i, idx] = w_buf[idx] / wsum
            trace_c[i, n_cand] = -1
            trace_w[i, n_cand] = w_buf[n_cand] / wsum

        if choice < n_cand:
            s_new = cand_buf[choice]
            m_new = counts[s_new]
            counts[s_new] = m_new + 1
            fam_in[s_new, f] = 1
            labels[it] = s_new
            if n > 1:
                lm = math.log(float(m_new))
                cache_f[0] += lm - math.log(d_last + alpha)
                cache_f[1] += lm
        else:
            state_ints[0] -= 1
            s_new = free_stack[state_ints[0]]
            active[s_new] = 1
            counts[s_new] = 1
            fam_in[s_new, f] = 1
            labels[it] = s_new
            state_ints[1] += 1
            if use_lik:
                for col in range(3):
                    mu[s_new, col] = aux_mu[i, col]
                    covp[s_new, col] = aux_cov[i, col]
                for r in range(3):
                    for col in range(3):
                        prec[s_new, r, col] = aux_prec[r, col]
                logdet[s_new] = aux_logdet
            if n > 1:
                cache_f[0] += math.log(alpha) - math.log(d_last + alpha)

        if record_every > 0 and (i + 1) % record_every == 0:
            r = (i + 1) // record_every - 1
            for p in range(n):
                rec_labels[r, p] = labels[p]


@njit(cache=True)
def sweep(
    labels,
    y,
    counts,
    mu,
    covp,
    prec,
    logdet,
    gam,
    prop_sd,
    mu0,
    sigma0_inv,
    ln18,
    slot_list,
    member_order,
    member_start,
    prop_norm,
    u_cov,
    mu_norm,
):
    """Per-cluster parameter pass: one covariance Metropolis step, then a
    draw of the mean from its conjugate Gaussian full conditional."""
    n_active = slot_list.shape[0]
    prec_prop = np.empty((3, 3))
    a_mat = np.empty((3, 3))
    for rank in range(n_active):
        s = slot_list[rank]
        n_k = counts[s]
        base = member_start[rank]
        ld = mu[s, 2]
        if ld < ln18:
            ld = ln18

        # covariance Metropolis step at the current mean
        lp_cur = cov_prior_logpdf(covp[s, 0], covp[s, 1], covp[s, 2], ld, gam)
        for t in range(n_k):
            item = member_order[base + t]
            lp_cur += mvn3_logpdf(
                y[item, 0], y[item, 1], y[item, 2],
                mu[s, 0], mu[s, 1], mu[s, 2],
                prec[s], logdet[s],
            )
        p_vx = covp[s, 0] + prop_sd[0] * prop_norm[rank, 0]
        p_vd = covp[s, 1] + prop_sd[1] * prop_norm[rank, 1]
        p_cx = covp[s, 2] + prop_sd[2] * prop_norm[rank, 2]
        ld_prop = cov3_precision(p_vx, p_vd, p_cx, prec_prop)
        if not np.isnan(ld_prop):
            lp_prop = cov_prior_logpdf(p_vx, p_vd, p_cx, ld, gam)
            if lp_prop > NEG_INF:
                for t in range(n_k):
                    item = member_order[base + t]
                    lp_prop += mvn3_logpdf(
                        y[item, 0], y[item, 1], y[item, 2],
                        mu[s, 0], mu[s, 1], mu[s, 2],
                        prec_prop, ld_prop,
                    )
                delta = lp_prop - lp_cur
                if delta >= 0.0 or u_cov[rank] < math.exp(delta):
                    covp[s, 0] = p_vx
                    covp[s, 1] = p_vd
                    covp[s, 2] = p_cx
                    for r in range(3):
                        for col in range(3):
                            prec[s, r, col] = prec_prop[r, col]
                    logdet[s] = ld_prop

        # conjugate mean draw given the (possibly updated) covariance
        sy0 = 0.0
        sy1 = 0.0
        sy2 = 0.0
        for t in range(n_k):
            item = member_order[base + t]
            sy0 += y[item, 0]
            sy1 += y[item, 1]
            sy2 += y[item, 2]
        for r in range(3):
            for col in range(3):
                a_mat[r, col] = n_k * prec[s, r, col]
            a_mat[r, r] += sigma0_inv[r]
        b0 = sigma0_inv[0] * mu0[0] + prec[s, 0, 0] * sy0 + prec[s, 0, 1] * sy1 + prec[s, 0, 2] * sy2
        b1 = sigma0_inv[1] * mu0[1] + prec[s, 1, 0] * sy0 + prec[s, 1, 1] * sy1 + prec[s, 1, 2] * sy2
        b2 = sigma0_inv[2] * mu0[2] + prec[s, 2, 0] * sy0 + prec[s, 2, 1] * sy1 + prec[s, 2, 2] * sy2

        # cholesky of the 3x3 posterior precision
        l00 = math.sqrt(a_mat[0, 0])
        l10 = a_mat[1, 0] / l00
        l20 = a_mat[2, 0] / l00
        l11 = math.sqrt(a_mat[1, 1] - l10 * l10)
        l21 = (a_mat[2, 1] - l20 * l10) / l11
        l22 = math.sqrt(a_mat[2, 2] - l20 * l20 - l21 * l21)
        # posterior mean: solve A m = b via the two triangular systems
        z0 = b0 / l00
        z1 = (b1 - l10 * z0) / l11
        z2 = (b2 - l20 * z0 - l21 * z1) / l22
        m2 = z2 / l22
        m1 = (z1 - l21 * m2) / l11
        m0 = (z0 - l10 * m1 - l20 * m2) / l00
        # noise with covariance A^{-1}: back-solve L^T v = standard normal
        g0 = mu_norm[rank, 0]
        g1 = mu_norm[rank, 1]
        g2 = mu_norm[rank, 2]
        v2 = g2 / l22
        v1 = (g1 - l21 * v2) / l11
        v0 = (g0 - l10 * v1 - l20 * v2) / l00
        mu[s, 0] = m0 + v0
        mu[s, 1] = m1 + v1
        mu[s, 2] = m2 + v2
