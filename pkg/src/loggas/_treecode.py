"""Numba kernels for direct and Barnes-Hut force summation.

Forces are returned already scaled by 1/N, i.e. F_i = (1/N) sum_{j != i} K_e(x_i - x_j).
The far field uses a complex multipole expansion about each cell's center of mass:
with z = x + i y, K(x) corresponds to 1/(2pi conj(z)), so

    conj(sum_j K(t - z_j)) = (1/2pi) sum_k a_k / (t - c)^(k+1),   a_k = sum_j (z_j - c)^k.
"""
from __future__ import annotations

import numpy as np
from numba import njit, prange

_TWO_PI = 2.0 * np.pi
_MAX_DEPTH = 48


@njit(cache=True, parallel=True)
def direct_forces(pos, eps):
    n = pos.shape[0]
    out = np.zeros((n, 2))
    eps2 = eps * eps
    bad = np.zeros(n, dtype=np.bool_)
    for i in prange(n):
        xi = pos[i, 0]
        yi = pos[i, 1]
        fx = 0.0
        fy = 0.0
        for j in range(n):
            if j == i:
                continue
            dx = xi - pos[j, 0]
            dy = yi - pos[j, 1]
            r2 = dx * dx + dy * dy + eps2
            if r2 == 0.0:
                bad[i] = True
                continue
            fx += dx / r2
            fy += dy / r2
        out[i, 0] = fx / (_TWO_PI * n)
        out[i, 1] = fy / (_TWO_PI * n)
    return out, bad.any()


@njit(cache=True)
def build_tree(pos, leaf_size):
    """Quadtree over a square bounding box.

    Points on a split line go to the lower/left child (strict '>' test).
    Returns per-node arrays; children are -1 when empty.
    """
    n = pos.shape[0]
    perm = np.arange(n)
    buf = np.empty(n, dtype=np.int64)
    xmin = pos[:, 0].min()
    xmax = pos[:, 0].max()
    ymin = pos[:, 1].min()
    ymax = pos[:, 1].max()
    half = 0.5 * max(xmax - xmin, ymax - ymin)
    if half == 0.0:
        half = 1.0
    half *= 1.0 + 1e-12

    cap = max(64, 8 * (n // max(leaf_size, 1) + 1))
    cx = np.empty(cap)
    cy = np.empty(cap)
    hw = np.empty(cap)
    start = np.empty(cap, dtype=np.int64)
    count = np.empty(cap, dtype=np.int64)
    child = -np.ones((cap, 4), dtype=np.int64)
    depth = np.empty(cap, dtype=np.int64)

    cx[0] = 0.5 * (xmin + xmax)
    cy[0] = 0.5 * (ymin + ymax)
    hw[0] = half
    start[0] = 0
    count[0] = n
    depth[0] = 0
    n_nodes = 1
    k = 0
    while k < n_nodes:
        if count[k] > leaf_size and depth[k] < _MAX_DEPTH:
            s = start[k]
            c = count[k]
            counts = np.zeros(4, dtype=np.int64)
            for m in range(s, s + c):
                p = perm[m]
                q = (1 if pos[p, 0] > cx[k] else 0) + (2 if pos[p, 1] > cy[k] else 0)
                counts[q] += 1
            offs = np.zeros(4, dtype=np.int64)
            for q in range(1, 4):
                offs[q] = offs[q - 1] + counts[q - 1]
            fill = offs.copy()
            for m in range(s, s + c):
                p = perm[m]
                q = (1 if pos[p, 0] > cx[k] else 0) + (2 if pos[p, 1] > cy[k] else 0)
                buf[s + fill[q]] = p
                fill[q] += 1
            for m in range(s, s + c):
                perm[m] = buf[m]
            if n_nodes + 4 > cap:
                new_cap = 2 * cap
                cx = _grow_f(cx, new_cap)
                cy = _grow_f(cy, new_cap)
                hw = _grow_f(hw, new_cap)
                start = _grow_i(start, new_cap)
                count = _grow_i(count, new_cap)
                depth = _grow_i(depth, new_cap)
                ch = -np.ones((new_cap, 4), dtype=np.int64)
                ch[:cap] = child
                child = ch
                cap = new_cap
            h2 = 0.5 * hw[k]
            for q in range(4):
                if counts[q] == 0:
                    continue
                j = n_nodes
                n_nodes += 1
                cx[j] = cx[k] + (h2 if (q & 1) else -h2)
                cy[j] = cy[k] + (h2 if (q & 2) else -h2)
                hw[j] = h2
                start[j] = s + offs[q]
                count[j] = counts[q]
                depth[j] = depth[k] + 1
                child[k, q] = j
        k += 1
    return (perm, cx[:n_nodes].copy(), cy[:n_nodes].copy(), hw[:n_nodes].copy(),
            start[:n_nodes].copy(), count[:n_nodes].copy(), child[:n_nodes].copy())


@njit(cache=True)
def _grow_f(a, new_cap):
    out = np.empty(new_cap)
    out[: a.shape[0]] = a
    return out


@njit(cache=True)
def _grow_i(a, new_cap):
    out = np.empty(new_cap, dtype=np.int64)
    out[: a.shape[0]] = a
    return out


@njit(cache=True, parallel=True)
def node_moments(pos, perm, start, count, order):
    n_nodes = start.shape[0]
    com = np.empty((n_nodes, 2))
    radius = np.empty(n_nodes)
    moments = np.zeros((n_nodes, order + 1), dtype=np.complex128)
    for k in prange(n_nodes):
        s = start[k]
        c = count[k]
        mx = 0.0
        my = 0.0
        for m in range(s, s + c):
            mx += pos[perm[m], 0]
            my += pos[perm[m], 1]
        mx /= c
        my /= c
        com[k, 0] = mx
        com[k, 1] = my
        r = 0.0
        for m in range(s, s + c):
            dz = complex(pos[perm[m], 0] - mx, pos[perm[m], 1] - my)
            a = abs(dz)
            if a > r:
                r = a
            term = 1.0 + 0.0j
            for p in range(order + 1):
                moments[k, p] += term
                term *= dz
        radius[k] = r
    return com, radius, moments


@njit(cache=True)
def _leaf_list(child):
    n_nodes = child.shape[0]
    flag = np.zeros(n_nodes, dtype=np.bool_)
    n_leaf = 0
    for k in range(n_nodes):
        leaf = True
        for q in range(4):
            if child[k, q] >= 0:
                leaf = False
        flag[k] = leaf
        if leaf:
            n_leaf += 1
    out = np.empty(n_leaf, dtype=np.int64)
    j = 0
    for k in range(n_nodes):
        if flag[k]:
            out[j] = k
            j += 1
    return out


@njit(cache=True, parallel=True)
def tree_forces_grouped(pos, perm, hw, start, count, child, com, radius, moments,
                        theta, eps, local_order):
    """Barnes-Hut with one traversal per target leaf.

    A cell is accepted for a whole leaf B when width < theta * (|D| - R_B),
    2 R_B < theta * (|D| - r_cell) and r_cell + R_B < |D| (D joins the two
    centers of mass). The first test is at least as strict as the per-particle
    test for every target in B; the second bounds the convergence ratio of the
    local series, which matters for large sparse leaves. Accepted multipoles
    are shifted into a local Taylor series about B's center of mass, which is
    then evaluated at each target.
    """
    n = pos.shape[0]
    order = moments.shape[1] - 1
    eps2 = eps * eps
    sx = np.empty(n)
    sy = np.empty(n)
    for m in range(n):
        sx[m] = pos[perm[m], 0]
        sy[m] = pos[perm[m], 1]
    leaves = _leaf_list(child)
    n_leaf = leaves.shape[0]
    # binomial table C(k + l, l)
    binom = np.zeros((order + 1, local_order + 1))
    for k in range(order + 1):
        for l in range(local_order + 1):
            v = 1.0
            for r in range(1, l + 1):
                v = v * (k + r) / r
            binom[k, l] = v
    fx_all = np.zeros(n)
    fy_all = np.zeros(n)
    bad = np.zeros(n_leaf, dtype=np.bool_)
    for ib in prange(n_leaf):
        b = leaves[ib]
        bx = com[b, 0]
        by = com[b, 1]
        rb = radius[b]
        s0 = start[b]
        s1 = s0 + count[b]
        loc = np.zeros(local_order + 1, dtype=np.complex128)
        stack = np.empty(4 * _MAX_DEPTH + 8, dtype=np.int64)
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            k = stack[top]
            dxc = bx - com[k, 0]
            dyc = by - com[k, 1]
            dist = np.sqrt(dxc * dxc + dyc * dyc)
            if (2.0 * hw[k] < theta * (dist - rb) and 2.0 * rb < theta * (dist - radius[k])
                    and radius[k] + rb < dist):
                inv = 1.0 / complex(dxc, dyc)
                # sum_k a_k (-1)^l C(k+l,l) / D^(k+l+1)
                pk = inv
                for kk in range(order + 1):
                    ak = moments[k, kk]
                    if ak != 0:
                        term = ak * pk
                        sign = 1.0
                        for l in range(local_order + 1):
                            loc[l] += sign * binom[kk, l] * term
                            term *= inv
                            sign = -sign
                    pk *= inv
                continue
            leaf = True
            for q in range(4):
                if child[k, q] >= 0:
                    leaf = False
                    stack[top] = child[k, q]
                    top += 1
            if leaf:
                for mi in range(s0, s1):
                    xi = sx[mi]
                    yi = sy[mi]
                    fx = 0.0
                    fy = 0.0
                    for m in range(start[k], start[k] + count[k]):
                        if m == mi:
                            continue
                        dx = xi - sx[m]
                        dy = yi - sy[m]
                        r2 = dx * dx + dy * dy + eps2
                        if r2 == 0.0:
                            bad[ib] = True
                            continue
                        fx += dx / r2
                        fy += dy / r2
                    fx_all[mi] += fx
                    fy_all[mi] += fy
        for mi in range(s0, s1):
            sz = complex(sx[mi] - bx, sy[mi] - by)
            acc = loc[local_order]
            for l in range(local_order - 1, -1, -1):
                acc = acc * sz + loc[l]
            fx_all[mi] += acc.real
            fy_all[mi] += -acc.imag
    out = np.empty((n, 2))
    for mi in range(n):
        i = perm[mi]
        out[i, 0] = fx_all[mi] / (_TWO_PI * n)
        out[i, 1] = fy_all[mi] / (_TWO_PI * n)
    return out, bad.any()
