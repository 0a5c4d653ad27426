"""Compiled inner loops of the Metropolis sampler.

Points live in R^D; the value space is cut into unit cells and cells are
hashed into a table of M^D buckets (M a power of two, coordinates taken mod
M). Buckets are doubly linked lists so a point can be moved in O(1). Two
points whose boxes overlap always sit in cells that differ by at most one per
axis, so a query scans the 3^D buckets around the query cell; hash collisions
only add candidates, which the overlap formula rejects.

Every step consumes exactly six uniforms, so a trajectory does not depend on
how steps are grouped into calls.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from numba import njit

U_PER_STEP = 6


def neighbor_offsets(D: int) -> np.ndarray:
    return np.array(list(itertools.product((-1, 0, 1), repeat=D)), dtype=np.int64)


def table_width(n: int, D: int) -> int:
    """Smallest power of two M >= 4 with M^D >= 4n."""
    m = 4
    while m**D < 4 * n:
        m *= 2
    return m


@njit(cache=True)
def _bucket(x, M, D):
    b = 0
    mult = 1
    for k in range(D):
        c = np.int64(math.floor(x[k]))
        b += (c & (M - 1)) * mult
        mult *= M
    return b


@njit(cache=True)
def _bucket_shift(x, off, M, D):
    b = 0
    mult = 1
    for k in range(D):
        c = np.int64(math.floor(x[k])) + off[k]
        b += (c & (M - 1)) * mult
        mult *= M
    return b


@njit(cache=True)
def _insert(i, b, head, nxt, prv, bkt):
    h = head[b]
    nxt[i] = h
    prv[i] = -1
    if h >= 0:
        prv[h] = i
    head[b] = i
    bkt[i] = b


@njit(cache=True)
def _remove(i, head, nxt, prv, bkt):
    p = prv[i]
    q = nxt[i]
    if p >= 0:
        nxt[p] = q
    else:
        head[bkt[i]] = q
    if q >= 0:
        prv[q] = p


@njit(cache=True)
def build_table(pos, M, head, nxt, prv, bkt):
    n, D = pos.shape
    head[:] = -1
    for i in range(n):
        _insert(i, _bucket(pos[i], M, D), head, nxt, prv, bkt)


@njit(cache=True)
def _box_overlap(x, y, D):
    v = 1.0
    for k in range(D):
        t = 1.0 - abs(x[k] - y[k])
        if t <= 0.0:
            return 0.0
        v *= t
    return v


@njit(cache=True)
def local_overlap(pos, x, skip, head, nxt, offsets, M):
    """Σ_{j != skip} overlap(x, pos[j]) over points near x."""
    D = pos.shape[1]
    s = 0.0
    for r in range(offsets.shape[0]):
        j = head[_bucket_shift(x, offsets[r], M, D)]
        while j >= 0:
            if j != skip:
                s += _box_overlap(x, pos[j], D)
            j = nxt[j]
    return s


@njit(cache=True)
def full_penalty(pos, M, offsets, head, nxt, prv, bkt):
    """n + Σ_{i≠j} overlap(pos[i], pos[j]); (re)builds the table as a side effect."""
    build_table(pos, M, head, nxt, prv, bkt)
    n = pos.shape[0]
    s = 0.0
    for i in range(n):
        s += local_overlap(pos, pos[i], i, head, nxt, offsets, M)
    return n + s


@njit(cache=True)
def run_steps(
    pos, nbr_ptr, nbr_idx, head, nxt, prv, bkt, M, offsets,
    beta, gamma, sigma, eta, p_dil, energy, penalty, track, uniforms,
    scratch_pos, s_head, s_nxt, s_prv, s_bkt, stats,
):
    """Advance the chain by ``uniforms.shape[0]`` Metropolis steps.

    stats[0..3] accumulate (local proposals, local accepts, dilation
    proposals, dilation accepts). With gamma == 0 the penalty is only kept
    up to date when ``track`` is set. Returns the updated (energy, penalty).
    """
    n, D = pos.shape
    xnew = np.empty(D)
    jac = (n - 1) * D
    for t in range(uniforms.shape[0]):
        u = uniforms[t]
        if u[0] >= p_dil:
            i = min(int(u[1] * n), n - 1)
            c = min(int(u[2] * D), D - 1)
            z = math.sqrt(-2.0 * math.log(1.0 - u[3])) * math.cos(2.0 * math.pi * u[4])
            delta = sigma * z
            old = pos[i, c]
            new = old + delta
            # Σ_y (new - y)² - (old - y)², written in differences to avoid cancellation
            acc = 0.0
            for q in range(nbr_ptr[i], nbr_ptr[i + 1]):
                y = pos[nbr_idx[q], c]
                acc += (new - y) + (old - y)
            d_energy = delta * acc
            d_pen = 0.0
            if track:
                for k in range(D):
                    xnew[k] = pos[i, k]
                xnew[c] = new
                d_pen = 2.0 * (
                    local_overlap(pos, xnew, i, head, nxt, offsets, M)
                    - local_overlap(pos, pos[i], i, head, nxt, offsets, M)
                )
            logr = -beta * d_energy - gamma * d_pen
            stats[0] += 1
            if u[5] == 0.0 or math.log(u[5]) < logr:
                stats[1] += 1
                pos[i, c] = new
                energy += d_energy
                penalty += d_pen
                b = _bucket(pos[i], M, D)
                if b != bkt[i]:
                    _remove(i, head, nxt, prv, bkt)
                    _insert(i, b, head, nxt, prv, bkt)
        else:
            log_s = eta * (2.0 * u[1] - 1.0)
            s = math.exp(log_s)
            for k in range(D):
                m = 0.0
                for j in range(n):
                    m += pos[j, k]
                m /= n
                for j in range(n):
                    scratch_pos[j, k] = m + s * (pos[j, k] - m)
            new_energy = s * s * energy
            if track:
                new_pen = full_penalty(scratch_pos, M, offsets, s_head, s_nxt, s_prv, s_bkt)
            else:
                new_pen = penalty
            logr = -beta * (new_energy - energy) - gamma * (new_pen - penalty) + jac * log_s
            stats[2] += 1
            if u[5] == 0.0 or math.log(u[5]) < logr:
                stats[3] += 1
                pos[:, :] = scratch_pos
                energy = new_energy
                penalty = new_pen
                build_table(pos, M, head, nxt, prv, bkt)
    return energy, penalty
