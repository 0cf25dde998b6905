"""Test oracles, deliberately independent of the library's own code paths.

Reachability goes through dense Floyd-Warshall closures, the QP oracle
enumerates active sets exhaustively, and gradients come from central finite
differences on the loss alone.
"""

import numpy as np

from attnlab import attention, dataset as dsm, graph as gm


def reachability_matrix(n_nodes: int, edges) -> np.ndarray:
    """Boolean closure: reach[i, j] iff a directed path i -> j exists."""
    reach = np.zeros((n_nodes, n_nodes), dtype=bool)
    for i, j in edges:
        reach[i, j] = True
    for k in range(n_nodes):
        reach |= reach[:, k][:, None] & reach[k, :][None, :]
    return reach


def partition_by_mutual_reachability(nodes, edges):
    """Groups of mutually reachable nodes, via the dense closure."""
    nodes = sorted(nodes)
    pos = {v: i for i, v in enumerate(nodes)}
    reach = reachability_matrix(len(nodes), [(pos[i], pos[j]) for i, j in edges])
    same = reach & reach.T
    np.fill_diagonal(same, True)
    groups = []
    seen = set()
    for i, v in enumerate(nodes):
        if v in seen:
            continue
        group = frozenset(nodes[j] for j in np.flatnonzero(same[i]))
        seen |= group
        groups.append(group)
    return groups


def classify_pair(nodes, edges, i, j):
    """'same', 'ij', 'ji', or 'none' from the reachability closure."""
    nodes = sorted(nodes)
    pos = {v: k for k, v in enumerate(nodes)}
    reach = reachability_matrix(len(nodes), [(pos[a], pos[b]) for a, b in edges])
    fwd, bwd = reach[pos[i], pos[j]], reach[pos[j], pos[i]]
    if fwd and bwd:
        return "same"
    if fwd:
        return "ij"
    if bwd:
        return "ji"
    return "none"


def random_tpg(rng, n_nodes: int, density: float, last_token: int = 0) -> gm.TokenPriorityGraph:
    adj = rng.random((n_nodes, n_nodes)) < density
    np.fill_diagonal(adj, False)
    return gm.TokenPriorityGraph(
        last_token=last_token,
        nodes=frozenset(range(n_nodes)),
        edges={
            i: frozenset(int(j) for j in np.flatnonzero(adj[i]))
            for i in range(n_nodes)
            if adj[i].any()
        },
    )


def active_set_oracle(eq_vecs: np.ndarray, ineq_vecs: np.ndarray, margin: float = 1.0,
                      tol: float = 1e-7) -> np.ndarray:
    """Exhaustive active-set search for min ||w|| s.t. Bw = 0, Aw >= margin.

    Every subset of inequalities is treated as active (= margin), the
    minimum-norm solution of the resulting linear system is formed through
    the Gram matrix, and the best candidate feasible for all constraints
    wins.  Exponential in the inequality count; meant for tiny instances.
    """
    m_eq, m_in = len(eq_vecs), len(ineq_vecs)
    dim = (eq_vecs.shape[1] if m_eq else ineq_vecs.shape[1]) if (m_eq or m_in) else 0
    if m_in == 0:
        return np.zeros(dim)
    stacked = np.vstack([eq_vecs, ineq_vecs]) if m_eq else ineq_vecs
    gram = stacked @ stacked.T
    best_norm2, best_w = np.inf, None
    eq_rows = list(range(m_eq))
    for mask in range(2 ** m_in):
        sel = [m_eq + i for i in range(m_in) if (mask >> i) & 1]
        rows = eq_rows + sel
        targets = np.concatenate([np.zeros(m_eq), np.full(len(sel), margin)])
        if rows:
            h = gram[np.ix_(rows, rows)]
            alpha = np.linalg.pinv(h, rcond=1e-12) @ targets
            values = gram[:, rows] @ alpha
            norm2 = float(alpha @ h @ alpha)
        else:
            alpha = np.zeros(0)
            values = np.zeros(m_eq + m_in)
            norm2 = 0.0
        if m_eq and np.max(np.abs(values[:m_eq])) > tol:
            continue
        if np.min(values[m_eq:]) < margin - tol:
            continue
        if norm2 < best_norm2:
            best_norm2 = norm2
            best_w = stacked[rows].T @ alpha if rows else np.zeros(dim)
    if best_w is None:
        raise AssertionError("oracle found no feasible active set")
    return best_w


def fd_grad(w: np.ndarray, ds: dsm.Dataset, kind: str, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of the loss, entry by entry."""
    g = np.zeros_like(w)
    for a in range(w.shape[0]):
        for b in range(w.shape[1]):
            wp, wm = w.copy(), w.copy()
            wp[a, b] += step
            wm[a, b] -= step
            g[a, b] = (attention.loss(wp, ds, kind) - attention.loss(wm, ds, kind)) / (2 * step)
    return g


def tiny_instance(seed: int, K: int = 4, d: int = 5, n: int = 3, T: int = 3,
                  mode: str = "cyclic", head_kind: str = dsm.TIED, noise: float = 0.1) -> dsm.Dataset:
    table = dsm.make_embeddings(K, d, dsm.UNIT_SPHERE, seed=seed)
    head = None if head_kind == "none" else dsm.make_head(table, head_kind, noise=noise, seed=seed)
    return dsm.gen_dataset(table, head, n=n, T=T, mode=mode, seed=seed)


def straight_line_loss(w: np.ndarray, ds: dsm.Dataset, kind: str) -> float:
    """Term-by-term re-implementation of the training objective."""
    total = 0.0
    e = ds.embedding.e
    for s in ds.samples:
        x = e[list(s.tokens)]
        logits = x @ w @ x[-1]
        ex = np.exp(logits - logits.max())
        probs = ex / ex.sum()
        if kind == "ce":
            class_logits = ds.head.c @ (x.T @ probs)
            zs = np.exp(class_logits - class_logits.max())
            total += -np.log(zs[s.label] / zs.sum())
            continue
        if ds.head is not None:
            score = float(ds.head.c[s.label] @ (x.T @ probs))
        else:
            score = float(sum(p for p, tok in zip(probs, s.tokens) if tok == s.label))
        if kind == "log":
            total += -np.log(score)
        elif kind == "squared":
            total += (1.0 - score) ** 2
        else:
            raise ValueError(kind)
    return total / ds.n
