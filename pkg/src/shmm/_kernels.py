"""Compiled recursions over time.

``trans`` holds, for each step ``i -> i+1``, the 0-based phase whose
transition matrix applies.  Forward variables are kept normalized in log
space; ``log_c[i]`` is the log of the normalizer at step ``i`` so that the
log-likelihood is ``sum(log_c)``.
"""

import numpy as np
from numba import njit

NEG_INF = -np.inf


@njit(cache=True, nogil=True)
def _lse(v):
    m = NEG_INF
    for x in v:
        if x > m:
            m = x
    if m == NEG_INF:
        return NEG_INF
    s = 0.0
    for x in v:
        s += np.exp(x - m)
    return m + np.log(s)


@njit(cache=True, nogil=True)
def forward(log_pi, log_Q, trans, log_e):
    n, K = log_e.shape
    log_a = np.empty((n, K))
    log_c = np.empty(n)
    buf = np.empty(K)
    tmp = np.empty(K)
    for k in range(K):
        buf[k] = log_pi[k] + log_e[0, k]
    c = _lse(buf)
    log_c[0] = c
    for k in range(K):
        log_a[0, k] = buf[k] - c
    for i in range(1, n):
        q = log_Q[trans[i - 1]]
        for l in range(K):
            for k in range(K):
                tmp[k] = log_a[i - 1, k] + q[k, l]
            buf[l] = _lse(tmp) + log_e[i, l]
        c = _lse(buf)
        log_c[i] = c
        if c == NEG_INF:
            # zero likelihood: propagate -inf and stop
            for j in range(i, n):
                log_c[j] = NEG_INF
                for k in range(K):
                    log_a[j, k] = NEG_INF
            return log_a, log_c
        for l in range(K):
            log_a[i, l] = buf[l] - c
    return log_a, log_c


@njit(cache=True, nogil=True)
def backward(log_Q, trans, log_e, log_c):
    n, K = log_e.shape
    log_b = np.zeros((n, K))
    tmp = np.empty(K)
    for i in range(n - 2, -1, -1):
        q = log_Q[trans[i]]
        for k in range(K):
            for l in range(K):
                tmp[l] = q[k, l] + log_e[i + 1, l] + log_b[i + 1, l]
            log_b[i, k] = _lse(tmp) - log_c[i + 1]
    return log_b


@njit(cache=True, nogil=True)
def pairwise(log_a, log_b, log_Q, trans, log_e, log_c):
    n, K = log_e.shape
    xi = np.empty((max(n - 1, 0), K, K))
    for i in range(n - 1):
        q = log_Q[trans[i]]
        for k in range(K):
            for l in range(K):
                xi[i, k, l] = np.exp(log_a[i, k] + q[k, l] + log_e[i + 1, l] + log_b[i + 1, l] - log_c[i + 1])
    return xi


@njit(cache=True, nogil=True)
def viterbi(log_pi, log_Q, trans, log_e):
    n, K = log_e.shape
    delta = np.empty(K)
    nxt = np.empty(K)
    back = np.zeros((n, K), dtype=np.int64)
    for k in range(K):
        delta[k] = log_pi[k] + log_e[0, k]
    for i in range(1, n):
        q = log_Q[trans[i - 1]]
        for l in range(K):
            best = NEG_INF
            arg = 0
            for k in range(K):
                v = delta[k] + q[k, l]
                if v > best:
                    best = v
                    arg = k
            nxt[l] = best + log_e[i, l]
            back[i, l] = arg
        for l in range(K):
            delta[l] = nxt[l]
    path = np.empty(n, dtype=np.int64)
    best = NEG_INF
    arg = 0
    for k in range(K):
        if delta[k] > best:
            best = delta[k]
            arg = k
    path[n - 1] = arg
    for i in range(n - 1, 0, -1):
        path[i - 1] = back[i, path[i]]
    return path, best


@njit(cache=True, nogil=True)
def markov_path(u, pi_cum, Q_cum, trans):
    """Sample a state path by inverse-CDF with uniforms ``u`` (one per step)."""
    n = u.size
    K = pi_cum.size
    x = np.empty(n, dtype=np.int64)
    s = 0
    while s < K - 1 and u[0] > pi_cum[s]:
        s += 1
    x[0] = s
    for i in range(1, n):
        row = Q_cum[trans[i - 1], x[i - 1]]
        s = 0
        while s < K - 1 and u[i] > row[s]:
            s += 1
        x[i] = s
    return x
