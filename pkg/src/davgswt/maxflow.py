"""Exact s-t max-flow / min-cut on sparse graphs with integer capacities.

Dinic's algorithm: BFS level graphs and shortest augmenting paths, found with
an iterative DFS that keeps a per-node arc pointer.  Capacities are int64 so
large hard-constraint terms survive the float-to-integer scaling.
"""
from __future__ import annotations

import numba
import numpy as np

CAPACITY_SCALE = 1_000_000


@numba.njit(cache=True)
def _dinic(n, s, t, first, to, cap, rev):
    level = np.empty(n, dtype=np.int64)
    ptr = np.empty(n, dtype=np.int64)
    queue = np.empty(n, dtype=np.int64)
    path = np.empty(n, dtype=np.int64)  # arc indices along the current path
    total = 0
    while True:
        level[:] = -1
        level[s] = 0
        head = 0
        tail = 1
        queue[0] = s
        while head < tail:
            u = queue[head]
            head += 1
            for a in range(first[u], first[u + 1]):
                v = to[a]
                if cap[a] > 0 and level[v] < 0:
                    level[v] = level[u] + 1
                    queue[tail] = v
                    tail += 1
        if level[t] < 0:
            break
        for u in range(n):
            ptr[u] = first[u]
        depth = 0
        u = s
        while True:
            if u == t:
                f = cap[path[0]]
                for i in range(1, depth):
                    if cap[path[i]] < f:
                        f = cap[path[i]]
                back = depth
                for i in range(depth):
                    a = path[i]
                    cap[a] -= f
                    cap[rev[a]] += f
                    if cap[a] == 0 and i < back:
                        back = i
                total += f
                # resume from the tail of the first saturated arc
                depth = back
                u = s if depth == 0 else to[path[depth - 1]]
                continue
            advanced = False
            while ptr[u] < first[u + 1]:
                a = ptr[u]
                v = to[a]
                if cap[a] > 0 and level[v] == level[u] + 1:
                    path[depth] = a
                    depth += 1
                    u = v
                    advanced = True
                    break
                ptr[u] += 1
            if advanced:
                continue
            # dead end: retire u and step back
            level[u] = -1
            if depth == 0:
                break
            depth -= 1
            u = to[rev[path[depth]]]
            ptr[u] += 1
    return total


@numba.njit(cache=True)
def _source_side(n, s, first, to, cap):
    seen = np.zeros(n, dtype=np.bool_)
    stack = np.empty(n, dtype=np.int64)
    seen[s] = True
    stack[0] = s
    top = 1
    while top > 0:
        top -= 1
        u = stack[top]
        for a in range(first[u], first[u + 1]):
            v = to[a]
            if cap[a] > 0 and not seen[v]:
                seen[v] = True
                stack[top] = v
                top += 1
    return seen


def min_cut(n_nodes: int, tails: np.ndarray, heads: np.ndarray, cap_fwd: np.ndarray, cap_bwd: np.ndarray, source: int, sink: int) -> tuple[int, np.ndarray]:
    """Max-flow value and the source-side node mask of a minimum cut.

    Each input edge ``(u, v)`` carries capacity ``cap_fwd`` from u to v and
    ``cap_bwd`` from v to u.  Capacities must be non-negative integers.
    """
    tails = np.asarray(tails, dtype=np.int64)
    heads = np.asarray(heads, dtype=np.int64)
    m = tails.shape[0]
    arc_tail = np.concatenate([tails, heads])
    arc_head = np.concatenate([heads, tails])
    arc_cap = np.concatenate([np.asarray(cap_fwd, dtype=np.int64), np.asarray(cap_bwd, dtype=np.int64)])
    if np.any(arc_cap < 0):
        raise ValueError("capacities must be non-negative")
    order = np.argsort(arc_tail, kind="stable")
    pos = np.empty(2 * m, dtype=np.int64)
    pos[order] = np.arange(2 * m)
    partner = np.concatenate([np.arange(m, 2 * m), np.arange(m)])
    to = arc_head[order]
    cap = arc_cap[order].copy()
    rev = pos[partner[order]]
    first = np.zeros(n_nodes + 1, dtype=np.int64)
    np.add.at(first, arc_tail + 1, 1)
    first = np.cumsum(first)
    flow = _dinic(n_nodes, source, sink, first, to, cap, rev)
    return int(flow), _source_side(n_nodes, source, first, to, cap)


def to_capacity(x: np.ndarray) -> np.ndarray:
    """Scale float weights to int64 capacities (x 1e6, rounded)."""
    return np.rint(np.asarray(x, dtype=np.float64) * CAPACITY_SCALE).astype(np.int64)
