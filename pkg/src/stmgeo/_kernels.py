"""Compiled inner loop of the block Gibbs sampler.

Per token the sampler (i) re-draws which of the topic's customers carry a
table indicator, (ii) removes the token, and (iii) draws topic and indicator
jointly from the 2K-way conditional: a new table for topic k, or an existing
table (only when one is left). A token that is the sole indicator holder of
a still-occupied topic cannot move and is put back unchanged.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def _swap_indicator(i, k, want, seg_lo, seg_hi, z, u):
    # Give token i the indicator value `want`, handing its old value to a peer
    # with the same topic in the same basket so the basket's table count is kept.
    for j in range(seg_lo, seg_hi):
        if j != i and z[j] == k and u[j] == want:
            u[j] = u[i]
            u[i] = want
            return


@njit(cache=True)
def gibbs_pass(
    words, seg, store, seg_start, order,
    z, u, n_pk, t_pk, t_dk, t_d, T_p, N_p, M_kv, M_k,
    alpha, alpha_sum, beta, beta_sum, a, b, log_s,
    phi_fixed, use_fixed, unif, initialise,
):
    """One pass over the tokens in ``order``; returns the number of stuck tokens."""
    K = n_pk.shape[1]
    weights = np.empty(2 * K)
    stuck = 0
    for pos in range(order.shape[0]):
        i = order[pos]
        p = seg[i]
        d = store[i]
        w = words[i]
        if not initialise:
            k = z[i]
            n = n_pk[p, k]
            t = t_pk[p, k]
            new_u = 1 if unif[2 * pos] * n < t else 0
            if new_u != u[i]:
                _swap_indicator(i, k, new_u, seg_start[p], seg_start[p + 1], z, u)
            ui = u[i]
            n_pk[p, k] -= 1
            N_p[p] -= 1
            t_pk[p, k] -= ui
            t_dk[d, k] -= ui
            t_d[d] -= ui
            T_p[p] -= ui
            if not use_fixed:
                M_kv[k, w] -= 1
                M_k[k] -= 1
            if n_pk[p, k] >= 1 and t_pk[p, k] == 0:
                # the remaining customers of topic k would have no table
                n_pk[p, k] += 1
                N_p[p] += 1
                t_pk[p, k] += 1
                t_dk[d, k] += 1
                t_d[d] += 1
                T_p[p] += 1
                if not use_fixed:
                    M_kv[k, w] += 1
                    M_k[k] += 1
                stuck += 1
                continue

        Np = N_p[p]
        new_table_common = (b + a * T_p[p]) / ((b + Np) * (alpha_sum + t_d[d]))
        old_table_common = 1.0 / (b + Np)
        total = 0.0
        for kk in range(K):
            if use_fixed:
                word = phi_fixed[kk, w]
            else:
                word = (beta[w] + M_kv[kk, w]) / (beta_sum + M_k[kk])
            nn = n_pk[p, kk]
            tt = t_pk[p, kk]
            base = log_s[nn, tt]
            w_new = (
                new_table_common
                * (alpha[kk] + t_dk[d, kk])
                * np.exp(log_s[nn + 1, tt + 1] - base)
                * (tt + 1.0) / (nn + 1.0)
                * word
            )
            if tt >= 1:
                w_old = (
                    old_table_common
                    * np.exp(log_s[nn + 1, tt] - base)
                    * (nn - tt + 1.0) / (nn + 1.0)
                    * word
                )
            else:
                w_old = 0.0
            weights[2 * kk] = w_new
            weights[2 * kk + 1] = w_old
            total += w_new + w_old

        target = unif[2 * pos + 1] * total
        choice = 2 * K - 1
        acc = 0.0
        for c in range(2 * K):
            acc += weights[c]
            if target < acc and weights[c] > 0.0:
                choice = c
                break
        if weights[choice] <= 0.0:
            # guard against round-off at the upper end
            for c in range(2 * K - 1, -1, -1):
                if weights[c] > 0.0:
                    choice = c
                    break
        k = choice // 2
        ui = 1 if choice % 2 == 0 else 0
        z[i] = k
        u[i] = ui
        n_pk[p, k] += 1
        N_p[p] += 1
        t_pk[p, k] += ui
        t_dk[d, k] += ui
        t_d[d] += ui
        T_p[p] += ui
        if not use_fixed:
            M_kv[k, w] += 1
            M_k[k] += 1
    return stuck
