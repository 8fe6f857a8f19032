"""Numba kernels for the hot inner loops.

Kept in one module so the JIT cost is paid once and the call sites stay
readable. Everything here is pure integer array work; no allocation.
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def fill_tweaked(buf, lo, hi, bits_mat, lvl, width):
    """buf[i] = (lo ^ (path_bit + 1), hi) for the pair grid (key-major)."""
    B = lo.shape[0]
    j = 0
    for i in range(B):
        buf[i, 0] = lo[i] ^ (bits_mat[j, lvl] + np.uint64(1))
        buf[i, 1] = hi[i]
        j += 1
        if j == width:
            j = 0


@njit(cache=True, nogil=True)
def level_update(out, buf, lo, hi, t, cw_lo, cw_hi, tcl, tcr, bits_mat, lvl, width):
    """Finish one tree level: MMO feed-forward, correction, control bit.

    `out` holds E_K(x); `buf` holds x. Writes the child state into
    lo/hi/t in place. Pair order is key-major with `width` points per key.
    """
    B = lo.shape[0]
    j = 0
    k = 0
    for i in range(B):
        clo = (out[i, 0] ^ buf[i, 0]) & np.uint64(0xFFFFFFFFFFFFFFFE)
        chi = out[i, 1] ^ buf[i, 1]
        ct = (out[i, 0] ^ buf[i, 0]) & np.uint64(1)
        ti = t[i]
        lo[i] = clo ^ (cw_lo[k, lvl] * ti)
        hi[i] = chi ^ (cw_hi[k, lvl] * ti)
        if bits_mat[j, lvl] == np.uint64(1):
            tc = tcr[k, lvl]
        else:
            tc = tcl[k, lvl]
        t[i] = ct ^ (tc * ti)
        j += 1
        if j == width:
            j = 0
            k += 1


@njit(cache=True, nogil=True)
def assign_tokens(cand, arrival, day, capacity, loads, out_cand, out_arrival,
                  wait_sum, wait_max, placed_cnt, stash_after):
    """Greedy day assignment for the stash process.

    Processes tokens in the given order (stash first, FIFO). Each token
    goes to the least-loaded of its candidate buckets, ties to the lowest
    index; if all candidates are full it is deferred. Returns the number
    of deferred tokens written to out_cand/out_arrival. Waits are credited
    to the token's arrival-day cohort.
    """
    n = cand.shape[0]
    c = cand.shape[1]
    n_out = 0
    for i in range(n):
        best_q = cand[i, 0]
        best_load = loads[best_q]
        for h in range(1, c):
            q = cand[i, h]
            ld = loads[q]
            if ld < best_load or (ld == best_load and q < best_q):
                best_q = q
                best_load = ld
        if best_load >= capacity:
            for h in range(c):
                out_cand[n_out, h] = cand[i, h]
            out_arrival[n_out] = arrival[i]
            n_out += 1
        else:
            loads[best_q] += 1
            a = arrival[i]
            w = day - a
            wait_sum[a] += w
            if w > wait_max[a]:
                wait_max[a] = w
            placed_cnt[a] += 1
    stash_after[0] = n_out
    return n_out
