"""Classical TSP solvers: nearest neighbour, 2-opt and exact Held-Karp."""
from __future__ import annotations

import numpy as np

from .errors import InstanceTooLarge, InvalidArgument
from .instances import Tour, TspInstance, make_tour, validate_tour

HELD_KARP_MAX_N = 16


def _as_instance(inst) -> TspInstance:
    return inst if isinstance(inst, TspInstance) else TspInstance(inst)


def nearest_neighbor(inst, start: int = 0) -> Tour:
    inst = _as_instance(inst)
    n = inst.n
    if not 0 <= start < n:
        raise InvalidArgument(f"start={start} outside [0, {n})")
    dist = inst.dist
    visited = np.zeros(n, dtype=bool)
    order = [start]
    visited[start] = True
    cur = start
    for _ in range(n - 1):
        row = np.where(visited, np.inf, dist[cur])
        cur = int(np.argmin(row))  # first minimum = lowest index on ties
        order.append(cur)
        visited[cur] = True
    return make_tour(inst, order)


def two_opt(inst, initial=None, eps: float = 1e-12) -> Tour:
    """First-improvement 2-opt, repeating passes until no exchange improves.

    ``initial`` is a :class:`Tour` or an index sequence; by default the
    nearest-neighbor tour from node 0.
    """
    inst = _as_instance(inst)
    if initial is None:
        initial = nearest_neighbor(inst, 0)
    order = np.array(initial.order if isinstance(initial, Tour) else initial, dtype=np.int64)
    problem = validate_tour(order, inst.n)
    if problem is not None:
        raise InvalidArgument(problem)
    n = len(order)
    d = inst.dist
    if n < 4:
        return make_tour(inst, order)
    improved = True
    while improved:
        improved = False
        i = 0
        while i < n - 2:
            a, b = order[i], order[i + 1]
            # edges (a,b) and (c,e) with c=order[j], e=order[j+1]; j=n-1 wraps to order[0]
            j = np.arange(i + 2, n if i > 0 else n - 1)
            c = order[j]
            e = order[(j + 1) % n]
            delta = d[a, c] + d[b, e] - d[a, b] - d[c, e]
            hits = np.flatnonzero(delta < -eps)
            if hits.size:
                jj = int(j[hits[0]])
                order[i + 1:jj + 1] = order[i + 1:jj + 1][::-1].copy()
                improved = True
                continue  # rescan from the same i with the new edge (a, order[i+1])
            i += 1
    return make_tour(inst, order)


def held_karp(inst) -> Tour:
    """Exact optimum by bitmask dynamic programming (3 <= n <= 16)."""
    inst = _as_instance(inst)
    n = inst.n
    if n > HELD_KARP_MAX_N:
        raise InstanceTooLarge(f"held_karp supports n <= {HELD_KARP_MAX_N}, got n={n}")
    if n < 3:
        raise InvalidArgument(f"held_karp needs n >= 3, got n={n}")
    d = inst.dist
    m = n - 1  # node 0 is the fixed start; bits index nodes 1..n-1
    full = 1 << m
    cost = np.full((full, m), np.inf)
    parent = np.full((full, m), -1, dtype=np.int64)
    for j in range(m):
        cost[1 << j, j] = d[0, j + 1]
    masks = np.arange(full)
    popcount = np.array([bin(x).count("1") for x in range(full)])
    bits = 1 << np.arange(m)
    sub = d[1:, 1:]  # sub[i, j]: distance between nodes i+1 and j+1
    for size in range(2, m + 1):
        layer = masks[popcount == size]
        for j in range(m):
            sel = layer[(layer & bits[j]) != 0]
            prev = sel ^ bits[j]
            cand = cost[prev] + sub[:, j][None, :]  # (|sel|, m) over predecessor i
            best = np.argmin(cand, axis=1)
            cost[sel, j] = cand[np.arange(sel.size), best]
            parent[sel, j] = best
    closing = cost[full - 1] + d[1:, 0]
    last = int(np.argmin(closing))
    order = []
    mask = full - 1
    j = last
    while j != -1:
        order.append(j + 1)
        pj = int(parent[mask, j])
        mask ^= 1 << j
        j = pj
    order.append(0)
    order.reverse()
    return make_tour(inst, order)
