"""Compiled attacked-learning loop.

Mirrors ``qlearner.Victim`` + the built-in attack policies operation for
operation, so a trial run here is bit-identical (in Q) to the Python path.
Target-set bookkeeping is incremental: only row ``s_t`` changes per step.
"""

from __future__ import annotations

import math

import numba
import numpy as np

ATTACK_NONE = 0
ATTACK_TABLE_SA = 1
ATTACK_TABLE_SAS = 2
ATTACK_FAA = 3
ATTACK_LINEAR = 4

_EMPTY_F1 = np.zeros(0)
_EMPTY_F2 = np.zeros((0, 0))
_EMPTY_F3 = np.zeros((0, 0, 0))
_EMPTY_I1 = np.zeros(0, dtype=np.int64)
_EMPTY_B3 = np.zeros((0, 0, 0), dtype=np.bool_)


@numba.njit(cache=True, nogil=True)
def _sample(cdf, u):
    n = cdf.shape[0]
    i = 0
    while i < n and cdf[i] <= u:
        i += 1
    if i >= n:
        i = n - 1
    while i > 0 and cdf[i] == cdf[i - 1]:
        i -= 1
    return i


@numba.njit(cache=True, nogil=True)
def _argmax(row):
    best = 0
    for a in range(1, row.shape[0]):
        if row[a] > row[best]:
            best = a
    return best


@numba.njit(cache=True, nogil=True)
def _rowmax(row):
    m = row[0]
    for a in range(1, row.shape[0]):
        if row[a] > m:
            m = row[a]
    return m


@numba.njit(cache=True, nogil=True)
def _gap(row, mask):
    """max over non-admitted minus max over admitted."""
    m_in = -np.inf
    m_out = -np.inf
    for a in range(row.shape[0]):
        if mask[a]:
            if row[a] > m_in:
                m_in = row[a]
        elif row[a] > m_out:
            m_out = row[a]
    return m_out - m_in


@numba.njit(cache=True, nogil=True)
def _greedy_attack(row, a, q_next, alpha, desired, eta):
    n = row.shape[0]
    if desired[a]:
        rival = -np.inf
        for b in range(n):
            if not desired[b] and row[b] > rival:
                rival = row[b]
        if rival == -np.inf:
            return 0.0
        return max(rival - q_next + eta, 0.0) / alpha
    best = -np.inf
    for b in range(n):
        if desired[b] and row[b] > best:
            best = row[b]
    return min(best - eta - q_next, 0.0) / alpha


@numba.njit(cache=True, nogil=True)
def _clip(x, bound):
    return min(max(x, -bound), bound)


@numba.njit(cache=True, nogil=True)
def run_kernel(
    p_cdf, reward, terminal, mu0_cdf, cap,
    epsilon, gamma, lr_kind, lr_value,
    q, u0, noise,
    admitted, tpos, targets, rho_eta,
    kind, delta_max, table_sa, table_sas, order, nu, faa_eta,
    theta, lin_base,
    cost_out, ach_out, rho_out, delta_out, record_full,
):
    """Run len(noise) steps in place on q. Returns summary statistics.

    Returns (J, sum_rho, max_abs_delta, n_clipped, last_cost_step).
    """
    T = noise.shape[0]
    n_actions = q.shape[1]
    k = targets.shape[0]
    gaps = np.empty(k)
    ach = np.zeros(k, dtype=np.bool_)
    for j in range(k):
        s = targets[j]
        gaps[j] = _gap(q[s], admitted[s])
        ach[j] = admitted[s, _argmax(q[s])]

    visits = np.zeros(q.shape, dtype=np.int64)
    s = _sample(mu0_cdf, u0)
    episode_step = 0
    J = 0
    sum_rho = 0.0
    max_abs = 0.0
    n_clip = 0
    last_cost = -1

    for t in range(T):
        # bookkeeping on Q_t, before this step's update
        n_strict = 0
        n_ach = 0
        rho = 0.0
        for j in range(k):
            if gaps[j] < 0:
                n_strict += 1
            if ach[j]:
                n_ach += 1
            v = gaps[j] + rho_eta
            if v > 0:
                rho += v
        cost = 1 if n_strict < k else 0
        J += cost
        if cost:
            last_cost = t
        sum_rho += rho
        cost_out[t] = cost
        ach_out[t] = n_ach
        if record_full:
            rho_out[t] = rho

        # victim acts, environment responds
        if noise[t, 0] < epsilon:
            a = min(int(noise[t, 1] * n_actions), n_actions - 1)
        else:
            a = _argmax(q[s])
        s2 = _sample(p_cdf[s, a], noise[t, 2])
        r = reward[s, a, s2]
        eoe = terminal[s2]
        resets = eoe or episode_step + 1 >= cap

        if lr_kind == 0:
            alpha = lr_value
        elif lr_kind == 1:
            alpha = (1.0 / (1.0 + t)) ** lr_value
        else:
            alpha = (1.0 / (1.0 + visits[s, a])) ** lr_value
        boot = 0.0 if eoe else gamma * _rowmax(q[s2])

        # attacker
        if kind == ATTACK_NONE:
            raw = 0.0
        elif kind == ATTACK_TABLE_SA:
            raw = table_sa[s, a]
        elif kind == ATTACK_TABLE_SAS:
            raw = delta_max * math.tanh(table_sas[s, a, s2])
        else:
            raw = 0.0
            if kind == ATTACK_FAA or lin_base:
                q_next = (1.0 - alpha) * q[s, a] + alpha * (r + boot)
                idx = -1
                for i in range(order.shape[0]):
                    if not gaps[tpos[order[i]]] < 0:
                        idx = i
                        break
                if idx >= 0:
                    desired = nu[idx, s]
                else:
                    desired = admitted[s]
                raw = _greedy_attack(q[s], a, q_next, alpha, desired, faa_eta)
                if kind == ATTACK_LINEAR:
                    raw = _clip(raw, delta_max)
            if kind == ATTACK_LINEAR:
                row = q[s]
                mean = 0.0
                for b in range(n_actions):
                    mean += row[b]
                mean /= n_actions
                margin = 0.0
                if tpos[s] >= 0:
                    margin = -_gap(row, admitted[s])
                z = theta[s, 0] + theta[s, 1] * margin
                if admitted[s, a]:
                    z += theta[s, 2]
                for b in range(n_actions):
                    z += theta[s, 3 + b] * (row[b] - mean)
                raw += delta_max * math.tanh(z)
        delta = _clip(raw, delta_max)
        if delta != raw:
            n_clip += 1
        if abs(delta) > max_abs:
            max_abs = abs(delta)
        if record_full:
            delta_out[t] = delta

        # victim update
        q[s, a] = (1.0 - alpha) * q[s, a] + alpha * ((r + delta) + boot)
        visits[s, a] += 1
        j = tpos[s]
        if j >= 0:
            gaps[j] = _gap(q[s], admitted[s])
            ach[j] = admitted[s, _argmax(q[s])]

        if resets:
            s = _sample(mu0_cdf, noise[t, 3])
            episode_step = 0
        else:
            s = s2
            episode_step += 1
    return J, sum_rho, max_abs, n_clip, last_cost
