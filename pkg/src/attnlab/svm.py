"""Graph-SVM assembly and solving over d x d attention matrices.

Constraints are triples (i, j, k): the matrix (e_i - e_j) e_k^T paired with
either an equality (same-SCC pair) or a unit-margin inequality (strict
priority pair).  The solver minimizes the Frobenius norm subject to those
constraints by dual coordinate ascent after eliminating the equalities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .dataset import EmbeddingTable
from .errors import NotOrthonormal
from .graph import PairRelation, SccDecomposition, TokenPriorityGraph, relation
from .util import frozen

BASIS_CUTOFF = 1e-10
PRIMAL_TOL = 1e-6
KKT_TOL = 1e-5

Triple = tuple[int, int, int]


class SolveStatus(Enum):
    SOLVED = "solved"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"


@dataclass(frozen=True)
class ConstraintSet:
    """Equality and inequality triples plus the embedding they refer to."""

    equalities: tuple[Triple, ...]
    inequalities: tuple[Triple, ...]
    embedding: EmbeddingTable

    @property
    def n_constraints(self) -> int:
        return len(self.equalities) + len(self.inequalities)

    def restrict_to_last_token(self, k: int) -> "ConstraintSet":
        return ConstraintSet(
            equalities=tuple(t for t in self.equalities if t[2] == k),
            inequalities=tuple(t for t in self.inequalities if t[2] == k),
            embedding=self.embedding,
        )

    @property
    def last_tokens(self) -> tuple[int, ...]:
        return tuple(sorted({t[2] for t in self.equalities + self.inequalities}))


def constraint_matrix(triple: Triple, e: np.ndarray) -> np.ndarray:
    i, j, k = triple
    return np.outer(e[i] - e[j], e[k])


def build_constraints(
    tpgs: dict[int, TokenPriorityGraph],
    decomps: dict[int, SccDecomposition],
    embedding: EmbeddingTable,
) -> ConstraintSet:
    """One inequality per strict-priority ordered pair (higher-priority side
    first), one equality per unordered same-SCC pair, per graph.

    Priority is reachability on the condensation, so transitive pairs
    generate their own inequalities.  Ordering is (k, i, j) throughout.
    """
    eqs: list[Triple] = []
    ineqs: list[Triple] = []
    for k in sorted(tpgs):
        nodes = sorted(tpgs[k].nodes)
        decomp = decomps[k]
        for a_idx, i in enumerate(nodes):
            for j in nodes[a_idx + 1 :]:
                rel = relation(decomp, i, j)
                if rel is PairRelation.SAME_SCC:
                    eqs.append((i, j, k))
                elif rel is PairRelation.STRICT_PRIORITY:
                    ineqs.append((i, j, k))
                elif relation(decomp, j, i) is PairRelation.STRICT_PRIORITY:
                    ineqs.append((j, i, k))
    eqs.sort(key=lambda t: (t[2], t[0], t[1]))
    ineqs.sort(key=lambda t: (t[2], t[0], t[1]))
    return ConstraintSet(equalities=tuple(eqs), inequalities=tuple(ineqs), embedding=embedding)


@dataclass(frozen=True)
class MatrixSubspace:
    """Orthonormal basis of a subspace of d x d matrices."""

    basis: np.ndarray  # (dim, d, d); dim may be 0
    d: int
    description: str = ""

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    def project(self, w: np.ndarray) -> np.ndarray:
        if self.dim == 0:
            return np.zeros_like(w)
        flat = self.basis.reshape(self.dim, -1)
        coef = flat @ w.ravel()
        return (coef @ flat).reshape(w.shape)

    def project_out(self, w: np.ndarray) -> np.ndarray:
        return w - self.project(w)


def _mgs(vectors: np.ndarray, cutoff: float = BASIS_CUTOFF) -> np.ndarray:
    """Modified Gram-Schmidt with one re-orthogonalization pass; drops
    generators whose residual falls below the cutoff."""
    basis: list[np.ndarray] = []
    for v in vectors:
        w = v.astype(np.float64).copy()
        for _ in range(2):
            for b in basis:
                w -= (b @ w) * b
        nrm = np.linalg.norm(w)
        if nrm > cutoff:
            basis.append(w / nrm)
    if not basis:
        return np.zeros((0, vectors.shape[1] if vectors.ndim == 2 else 0))
    return np.array(basis)


def span(triples: tuple[Triple, ...], embedding: EmbeddingTable, description: str = "") -> MatrixSubspace:
    """Orthonormalized span of the difference-outer-product generators."""
    d = embedding.d
    if not description:
        description = f"span of {len(triples)} (e_i - e_j) e_k^T generators"
    if not triples:
        return MatrixSubspace(basis=np.zeros((0, d, d)), d=d, description=description)
    gens = np.array([constraint_matrix(t, embedding.e).ravel() for t in triples])
    basis = _mgs(gens)
    return MatrixSubspace(basis=frozen(basis.reshape(-1, d, d)), d=d, description=description)


def fin_subspace(constraints: ConstraintSet) -> MatrixSubspace:
    """Cyclic subspace: span over same-SCC pairs."""
    return span(constraints.equalities, constraints.embedding, "fin")


def active_subspace(tpgs: dict[int, TokenPriorityGraph], embedding: EmbeddingTable) -> MatrixSubspace:
    """Span over direct edges; equals the span over all reachable pairs."""
    triples = tuple(
        (i, j, k) for k in sorted(tpgs) for i, j in tpgs[k].edge_list()
    )
    return span(triples, embedding, "active")


def svm_subspace(active: MatrixSubspace, fin: MatrixSubspace) -> MatrixSubspace:
    """Orthogonal complement of the cyclic subspace inside the active one."""
    if active.dim == 0:
        return MatrixSubspace(basis=np.zeros((0, active.d, active.d)), d=active.d, description="svm")
    flat = active.basis.reshape(active.dim, -1)
    residual = np.array([fin.project_out(b).ravel() for b in active.basis])
    basis = _mgs(residual)
    del flat
    return MatrixSubspace(basis=frozen(basis.reshape(-1, active.d, active.d)), d=active.d, description="svm")


def project(w: np.ndarray, subspace: MatrixSubspace) -> np.ndarray:
    return subspace.project(w)


@dataclass(frozen=True)
class SolverOptions:
    max_sweeps: int = 200_000
    dual_tol: float = 1e-10
    margin: float = 1.0
    dual_blowup: float = 1e8
    stagnation_window: int = 1000


@dataclass(frozen=True)
class SvmSolution:
    w: np.ndarray
    status: SolveStatus
    ineq_multipliers: np.ndarray
    eq_multipliers: np.ndarray
    residuals: dict = field(default_factory=dict)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.w))


def _empty_solution(d: int, n_eq: int, status: SolveStatus = SolveStatus.SOLVED) -> SvmSolution:
    return SvmSolution(
        w=frozen(np.zeros((d, d))),
        status=status,
        ineq_multipliers=np.zeros(0),
        eq_multipliers=np.zeros(n_eq),
        residuals={"max_eq_violation": 0.0, "min_ineq_margin": np.inf, "kkt_residual": 0.0, "sweeps": 0},
    )


def solve_graph_svm(
    constraints: ConstraintSet,
    embedding: Optional[EmbeddingTable] = None,
    opts: Optional[SolverOptions] = None,
) -> SvmSolution:
    """Min-Frobenius-norm W subject to the constraint set.

    Equalities are eliminated by projecting every inequality matrix onto the
    orthogonal complement of their span (the optimum lives there); the
    remaining problem is solved by cyclic nonnegative coordinate ascent on
    the inequality duals (Hildreth).  Divergent duals or stagnating primal
    residuals are reported as infeasible.
    """
    emb = embedding if embedding is not None else constraints.embedding
    opts = opts or SolverOptions()
    d = emb.d
    e = emb.e

    eq_vecs = np.array([constraint_matrix(t, e).ravel() for t in constraints.equalities]) \
        if constraints.equalities else np.zeros((0, d * d))
    if not constraints.inequalities:
        return _empty_solution(d, len(constraints.equalities))

    a_vecs = np.array([constraint_matrix(t, e).ravel() for t in constraints.inequalities])
    eq_basis = _mgs(eq_vecs) if len(eq_vecs) else np.zeros((0, d * d))
    a_proj = a_vecs - (a_vecs @ eq_basis.T) @ eq_basis if eq_basis.shape[0] else a_vecs.copy()

    diag = np.einsum("ij,ij->i", a_proj, a_proj)
    if np.any(diag <= 1e-18):
        # An inequality generator collapsed into the equality span: its
        # margin is identically zero, so the problem is infeasible.
        bad = int(np.argmin(diag))
        return SvmSolution(
            w=frozen(np.zeros((d, d))),
            status=SolveStatus.INFEASIBLE,
            ineq_multipliers=np.zeros(len(a_vecs)),
            eq_multipliers=np.zeros(len(eq_vecs)),
            residuals={"reason": f"inequality {bad} lies in the equality span", "sweeps": 0},
        )

    gram = a_proj @ a_proj.T
    m = len(a_vecs)
    lam = np.zeros(m)
    margins = np.zeros(m)  # margins[a] = <A~_a, W>
    target = opts.margin

    status = SolveStatus.MAX_ITER
    sweeps = 0
    last_check_violation = np.inf
    for sweep in range(1, opts.max_sweeps + 1):
        sweeps = sweep
        max_delta = 0.0
        for a in range(m):
            new = lam[a] + (target - margins[a]) / gram[a, a]
            if new < 0.0:
                new = 0.0
            delta = new - lam[a]
            if delta != 0.0:
                lam[a] = new
                margins += delta * gram[a]
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        if max_delta < opts.dual_tol:
            status = SolveStatus.SOLVED
            break
        if np.max(lam) > opts.dual_blowup:
            status = SolveStatus.INFEASIBLE
            break
        if sweep % opts.stagnation_window == 0:
            violation = max(0.0, target - float(np.min(margins)))
            if violation > PRIMAL_TOL * max(1.0, target) and violation > 0.9999 * last_check_violation:
                status = SolveStatus.INFEASIBLE
                break
            last_check_violation = violation

    w_flat = a_proj.T @ lam
    w = w_flat.reshape(d, d)

    # Equality multipliers via least squares on the residual, for KKT reporting.
    stationarity = w_flat - a_vecs.T @ lam
    if len(eq_vecs):
        mu, *_ = np.linalg.lstsq(eq_vecs.T, stationarity, rcond=None)
        stationarity = stationarity - eq_vecs.T @ mu
    else:
        mu = np.zeros(0)
    kkt_residual = float(np.linalg.norm(stationarity))

    eq_vals = eq_vecs @ w_flat if len(eq_vecs) else np.zeros(0)
    ineq_vals = a_vecs @ w_flat
    max_eq = float(np.max(np.abs(eq_vals))) if len(eq_vals) else 0.0
    min_ineq = float(np.min(ineq_vals)) if len(ineq_vals) else np.inf
    if status is SolveStatus.SOLVED:
        tol = PRIMAL_TOL * max(1.0, target)
        scale = max(1.0, target)
        if max_eq > tol or min_ineq < target - tol or kkt_residual > KKT_TOL * scale:
            status = SolveStatus.MAX_ITER

    return SvmSolution(
        w=frozen(w),
        status=status,
        ineq_multipliers=lam,
        eq_multipliers=mu,
        residuals={
            "max_eq_violation": max_eq,
            "min_ineq_margin": min_ineq,
            "kkt_residual": kkt_residual,
            "sweeps": sweeps,
        },
    )


@dataclass(frozen=True)
class FeasibilityResult:
    feasible: bool
    certificate: Optional[np.ndarray]
    source: str
    detail: str = ""


def _priority_levels_from_constraints(
    constraints: ConstraintSet, k: int
) -> Optional[dict[int, int]]:
    """Rebuild integer priorities for one last token from the triples alone.

    Same-SCC pairs are merged (union-find); strict pairs order the merged
    groups.  Returns None when the implied order is cyclic, which cannot
    happen for constraints built from a valid decomposition.
    """
    eqs = [t for t in constraints.equalities if t[2] == k]
    ineqs = [t for t in constraints.inequalities if t[2] == k]
    nodes = {i for i, j, _ in eqs + ineqs} | {j for i, j, _ in eqs + ineqs}
    parent = {v: v for v in nodes}

    def find(v: int) -> int:
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for i, j, _ in eqs:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
    succ: dict[int, set[int]] = {find(v): set() for v in nodes}
    indeg = {r: 0 for r in succ}
    for i, j, _ in ineqs:
        ri, rj = find(i), find(j)
        if ri == rj:
            return None
        if rj not in succ[ri]:
            succ[ri].add(rj)
            indeg[rj] += 1
    # Kahn topological pass; longest-path levels with sinks at 1.
    order = [r for r in succ if indeg[r] == 0]
    seen = 0
    topo = []
    pending = dict(indeg)
    queue = list(order)
    while queue:
        r = queue.pop()
        topo.append(r)
        seen += 1
        for s in succ[r]:
            pending[s] -= 1
            if pending[s] == 0:
                queue.append(s)
    if seen != len(succ):
        return None
    level = {}
    for r in reversed(topo):
        level[r] = 1 + max((level[s] for s in succ[r]), default=0)
    return {v: level[find(v)] for v in nodes}


def check_feasibility(constraints: ConstraintSet, embedding: Optional[EmbeddingTable] = None) -> FeasibilityResult:
    """Certify feasibility for full-row-rank embeddings by explicit
    construction; otherwise report what the solver finds."""
    emb = embedding if embedding is not None else constraints.embedding
    if constraints.n_constraints == 0:
        return FeasibilityResult(True, np.zeros((emb.d, emb.d)), "certificate", "no constraints")
    if emb.full_row_rank:
        levels_ok = True
        wbar = np.zeros((emb.K, emb.K))
        for k in constraints.last_tokens:
            levels = _priority_levels_from_constraints(constraints, k)
            if levels is None:
                levels_ok = False
                break
            for node, m in levels.items():
                wbar[node, k] = float(m)
        if levels_ok:
            ebar = np.linalg.solve(emb.e @ emb.e.T, emb.e)  # Ebar E^T = I
            w = ebar.T @ wbar @ ebar
            gaps = [
                float(wbar[i, k] - wbar[j, k]) for i, j, k in constraints.inequalities
            ]
            if gaps:
                g = min(gaps)
                if g <= 0:
                    return _solver_fallback(constraints, emb)
                w = w / g
            # Verify against the actual embedding arithmetic.
            max_eq = max(
                (abs(float((emb.e[i] - emb.e[j]) @ w @ emb.e[k])) for i, j, k in constraints.equalities),
                default=0.0,
            )
            min_ineq = min(
                (float((emb.e[i] - emb.e[j]) @ w @ emb.e[k]) for i, j, k in constraints.inequalities),
                default=np.inf,
            )
            if max_eq <= PRIMAL_TOL and min_ineq >= 1.0 - PRIMAL_TOL:
                return FeasibilityResult(True, frozen(w), "certificate",
                                         f"max_eq={max_eq:.2e}, min_ineq={min_ineq:.6f}")
        return _solver_fallback(constraints, emb)
    return _solver_fallback(constraints, emb)


def _solver_fallback(constraints: ConstraintSet, emb: EmbeddingTable) -> FeasibilityResult:
    sol = solve_graph_svm(constraints, emb)
    if sol.status is SolveStatus.SOLVED:
        return FeasibilityResult(True, sol.w, "solver", "solver found a feasible point")
    return FeasibilityResult(False, None, "solver", f"solver status: {sol.status.value}")


def solve_per_last_token(
    constraints: ConstraintSet,
    embedding: Optional[EmbeddingTable] = None,
    opts: Optional[SolverOptions] = None,
) -> SvmSolution:
    """Solve one subproblem per last token and sum; valid for orthonormal
    embeddings, where each partial solution's row space is span(e_k)."""
    emb = embedding if embedding is not None else constraints.embedding
    if not emb.is_orthonormal():
        raise NotOrthonormal("per-last-token decomposition requires orthonormal embeddings")
    d = emb.d
    total = np.zeros((d, d))
    statuses = []
    sweeps = 0
    for k in constraints.last_tokens:
        sub = constraints.restrict_to_last_token(k)
        sol = solve_graph_svm(sub, emb, opts)
        statuses.append(sol.status)
        sweeps += sol.residuals.get("sweeps", 0)
        wk = sol.w
        # Row space check: W_k must vanish off span(e_k).
        row_residual = np.linalg.norm(wk - np.outer(wk @ emb.e[k], emb.e[k]))
        if row_residual > 1e-8:
            raise NotOrthonormal(f"subproblem k={k} left span(e_k): residual {row_residual:.2e}")
        total += wk
    worst = SolveStatus.SOLVED
    for st in statuses:
        if st is SolveStatus.INFEASIBLE:
            worst = SolveStatus.INFEASIBLE
            break
        if st is SolveStatus.MAX_ITER:
            worst = SolveStatus.MAX_ITER
    return SvmSolution(
        w=frozen(total),
        status=worst,
        ineq_multipliers=np.zeros(0),
        eq_multipliers=np.zeros(0),
        residuals={"sweeps": sweeps, "per_k": len(statuses)},
    )
