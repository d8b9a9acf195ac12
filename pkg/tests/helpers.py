"""Independent oracles shared by the test modules.

These deliberately avoid the library's own math: finite differences for
gradients, spanning-tree basis enumeration for optimal transport, and plain
Python float arithmetic for attention.  They are the "other side" of every
dual-route check, so they must never call the code paths they verify.
"""

from __future__ import annotations

import math
from itertools import combinations

import numpy as np

from stylegraph.autodiff import Tensor


def fd_gradients(f, param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar f() wrt every param element."""
    num = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = num.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = f().item()
        flat[i] = orig - h
        lm = f().item()
        flat[i] = orig
        out[i] = (lp - lm) / (2.0 * h)
    return num


def fd_check(f, params: list[Tensor], h: float = 1e-5, tol: float = 1e-4) -> float:
    """Assert autodiff gradients match finite differences; returns worst rel err."""
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    worst = 0.0
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        num = fd_gradients(f, p, h)
        err = np.abs(g - num).max() / max(np.abs(num).max(), 1e-8)
        worst = max(worst, err)
    assert worst <= tol, f"gradient mismatch: rel err {worst:.3e} > {tol}"
    for p in params:
        p.grad = None
    return worst


def brute_force_ot(p: np.ndarray, q: np.ndarray, cost: np.ndarray) -> float:
    """Minimum transport cost by enumerating all spanning-tree basic solutions.

    The optimum of a transportation LP is attained at a vertex, and every
    vertex is the flow of some spanning tree of the bipartite supply/demand
    graph; enumerating subsets of m+n-1 cells therefore covers the optimum.
    Only viable for tiny instances (used on <=4x4 in tests).
    """
    m, n = cost.shape
    cells = [(i, j) for i in range(m) for j in range(n)]
    best = math.inf
    for basis in combinations(cells, m + n - 1):
        flow = _tree_flow(basis, p, q, m, n)
        if flow is None:
            continue
        best = min(best, sum(f * cost[i, j] for (i, j), f in flow.items()))
    assert best < math.inf, "no feasible basis found"
    return best


def _tree_flow(basis, p, q, m, n):
    """Peel leaves of the candidate tree; None when infeasible or not a tree."""
    supply = list(p) + list(q)  # rows then columns
    adj: dict[int, list[tuple[int, tuple[int, int]]]] = {k: [] for k in range(m + n)}
    for i, j in basis:
        adj[i].append((m + j, (i, j)))
        adj[m + j].append((i, (i, j)))
    degree = {k: len(v) for k, v in adj.items()}
    used = {cell: False for cell in basis}
    flow: dict[tuple[int, int], float] = {}
    for _ in range(len(basis)):
        leaf = next((k for k in range(m + n) if degree[k] == 1), None)
        if leaf is None:
            return None  # cycle: not a spanning tree
        other, cell = next((o, c) for o, c in adj[leaf] if not used[c])
        amount = supply[leaf]
        if amount < -1e-12:
            return None
        flow[cell] = max(amount, 0.0)
        supply[leaf] = 0.0
        supply[other] -= amount
        used[cell] = True
        degree[leaf] -= 1
        degree[other] -= 1
        adj[leaf] = [(o, c) for o, c in adj[leaf] if not used[c]]
        adj[other] = [(o, c) for o, c in adj[other] if not used[c]]
    if any(abs(s) > 1e-9 for s in supply):
        return None  # disconnected: leftover supply
    if any(f < -1e-12 for f in flow.values()):
        return None
    return flow


def scalar_attention(q_rows, kv_rows, mask, wq, wk, wv, wo, d_k: int):
    """Single-head masked attention with residual, in plain Python floats.

    Uses the same row-vector convention as the library (out = x @ W) but is
    written with explicit loops and math.exp, independent of numpy.
    """

    def vecmat(v, w):
        return [sum(v[r] * w[r][c] for r in range(len(v))) for c in range(len(w[0]))]

    def dot(a, b):
        return sum(x * y for x, y in zip(a, b))

    keys = [vecmat(kv, wk) for kv in kv_rows]
    vals = [vecmat(kv, wv) for kv in kv_rows]
    out = []
    for qi, row_mask in zip(q_rows, mask):
        q = vecmat(qi, wq)
        scores = [
            dot(q, k) / math.sqrt(d_k) if mbit else None for k, mbit in zip(keys, row_mask)
        ]
        mx = max(s for s in scores if s is not None)
        exps = [math.exp(s - mx) if s is not None else 0.0 for s in scores]
        z = sum(exps)
        weights = [e / z for e in exps]
        mixed = [sum(w * v[c] for w, v in zip(weights, vals)) for c in range(len(qi))]
        proj = vecmat(mixed, wo)
        out.append([x + y for x, y in zip(qi, proj)])
    return out
