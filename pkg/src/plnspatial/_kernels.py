"""Compiled sitewise Metropolis sweeps (the O(n^2) inner loops)."""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def w_sweep(W, eta_fixed, y, mu, Q, scales, eps, logu, accepted):
    """One random-walk pass over the sites of W ~ N(mu, Q^-1) with Poisson data.

    ``eta_fixed`` is the part of the log-rate not carried by W. Updates ``W`` in
    place and writes 0/1 into ``accepted``.
    """
    n = W.shape[0]
    r = np.empty(n)
    for j in range(n):
        acc = 0.0
        for k in range(n):
            acc += Q[j, k] * (W[k] - mu[k])
        r[j] = acc
    for i in range(n):
        d = scales[i] * eps[i]
        wi = W[i]
        base = eta_fixed[i] + wi
        dll = y[i] * d - math.exp(base) * math.expm1(d)
        dlp = -(d * r[i] + 0.5 * d * d * Q[i, i])
        if logu[i] < dll + dlp:
            W[i] = wi + d
            for j in range(n):
                r[j] += Q[i, j] * d
            accepted[i] = 1
        else:
            accepted[i] = 0


@njit(cache=True)
def z_sweep(Z, eta, y, Q, M, scales, eps, logu, accepted):
    """Random-walk pass over Z ~ N(0, Q^-1) whose effect on the log-rate is ``M @ Z``.

    ``eta`` is the current full log-rate and is updated in place along with Z.
    """
    n = Z.shape[0]
    r = np.empty(n)
    lam = np.empty(n)
    for j in range(n):
        acc = 0.0
        for k in range(n):
            acc += Q[j, k] * Z[k]
        r[j] = acc
        lam[j] = math.exp(eta[j])
    for i in range(n):
        d = scales[i] * eps[i]
        dll = 0.0
        for j in range(n):
            de = M[j, i] * d
            if de != 0.0:
                dll += y[j] * de - lam[j] * math.expm1(de)
        dlp = -(d * r[i] + 0.5 * d * d * Q[i, i])
        if logu[i] < dll + dlp:
            Z[i] += d
            for j in range(n):
                de = M[j, i] * d
                if de != 0.0:
                    eta[j] += de
                    lam[j] = math.exp(eta[j])
                r[j] += Q[i, j] * d
            accepted[i] = 1
        else:
            accepted[i] = 0
