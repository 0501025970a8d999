"""Compiled inner loops for the two training branches.

Both kernels apply per-example SGD updates in batch order, each update computed
from the parameters as they stand after the previous example. They mirror
:func:`clinhin.embedding.unsup_step` and :func:`clinhin.trainer.sup_step`.
"""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def _sig(x, clamp):
    if x > clamp:
        x = clamp
    elif x < -clamp:
        x = -clamp
    return 1.0 / (1.0 + math.exp(-x))


@njit(cache=True)
def unsup_pass(E, v, c, negs, lr, clamp, eps):
    d = E.shape[1]
    m = negs.shape[1]
    fv = np.empty(d)
    gv = np.empty(d)
    sn = np.empty(m)
    total = 0.0
    for i in range(v.shape[0]):
        vi = v[i]
        ci = c[i]
        for k in range(d):
            fv[k] = E[vi, k]
        s = 0.0
        for k in range(d):
            s += E[ci, k] * fv[k]
        sp = _sig(s, clamp)
        total -= math.log(max(sp, eps))
        gp = sp - 1.0
        for k in range(d):
            gv[k] = gp * E[ci, k]
        for j in range(m):
            u = negs[i, j]
            s = 0.0
            for k in range(d):
                s += E[u, k] * fv[k]
            sn[j] = _sig(s, clamp)
            total -= math.log(max(1.0 - sn[j], eps))
            for k in range(d):
                gv[k] += sn[j] * E[u, k]
        for j in range(m):
            u = negs[i, j]
            a = lr * sn[j]
            for k in range(d):
                E[u, k] -= a * fv[k]
        a = lr * gp
        for k in range(d):
            E[ci, k] -= a * fv[k]
        for k in range(d):
            E[vi, k] -= lr * gv[k]
    return total


@njit(cache=True)
def sup_pass(E, w, indptr, node, slot, inv, positions, d_pos, d_negs, lr, margin):
    d = E.shape[1]
    m = d_negs.shape[1]
    T = w.shape[0]
    fp = np.empty(d)
    gfp = np.empty(d)
    gw = np.empty(T)
    viol = np.empty(m, dtype=np.bool_)
    total = 0.0
    for i in range(positions.shape[0]):
        p = positions[i]
        lo = indptr[p]
        hi = indptr[p + 1]
        for k in range(d):
            fp[k] = 0.0
        for e in range(lo, hi):
            coef = w[slot[e]] * inv[e]
            n = node[e]
            for k in range(d):
                fp[k] += coef * E[n, k]
        dp = d_pos[i]
        s_pos = 0.0
        for k in range(d):
            s_pos += E[dp, k] * fp[k]
        nv = 0
        for k in range(d):
            gfp[k] = 0.0
        for j in range(m):
            u = d_negs[i, j]
            s = 0.0
            for k in range(d):
                s += E[u, k] * fp[k]
            slack = s - s_pos + margin
            if slack > 0.0:
                viol[j] = True
                nv += 1
                total += slack
                for k in range(d):
                    gfp[k] += E[u, k]
            else:
                viol[j] = False
        if nv == 0:
            continue
        for k in range(d):
            gfp[k] -= nv * E[dp, k]
        for t in range(T):
            gw[t] = 0.0
        for e in range(lo, hi):
            n = node[e]
            s = 0.0
            for k in range(d):
                s += E[n, k] * gfp[k]
            gw[slot[e]] += inv[e] * s
        # every gradient above is taken before any parameter moves
        a = lr * nv
        for k in range(d):
            E[dp, k] += a * fp[k]
        for j in range(m):
            if viol[j]:
                u = d_negs[i, j]
                for k in range(d):
                    E[u, k] -= lr * fp[k]
        for e in range(lo, hi):
            n = node[e]
            a = lr * w[slot[e]] * inv[e]
            for k in range(d):
                E[n, k] -= a * gfp[k]
        for t in range(T):
            w[t] -= lr * gw[t]
    return total
