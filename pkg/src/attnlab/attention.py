"""Single-layer attention: forward pass, losses, gradients, and trainers.

The model scores a sequence X (rows are token embeddings) against its last
token xbar through softmax(X W xbar) and composes the output as X^T probs.
Losses read that output through the classifier head; under a tied head the
per-sample score collapses to the total softmax mass on label occurrences,
which is the path the log-loss theory lives on.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dataset import Dataset, Sample
from .errors import DomainError, NoConvergence, NonFiniteLoss
from .graph import CyclicSplit
from .svm import MatrixSubspace
from .util import frozen, seeded_rng

LOG = "log"
SQUARED = "squared"
CROSS_ENTROPY = "ce"

LOG_GUARD = 1e-300
GRAD_FLOOR = 1e-14


def loss_value(kind: str, u: np.ndarray) -> np.ndarray:
    if kind == LOG:
        if np.any(u <= LOG_GUARD):
            raise DomainError(f"log-loss argument underflow: min score {np.min(u):.3e}")
        return -np.log(u)
    if kind == SQUARED:
        return (1.0 - u) ** 2
    raise ValueError(f"scalar loss value undefined for kind {kind!r}")


def loss_deriv(kind: str, u: np.ndarray) -> np.ndarray:
    if kind == LOG:
        if np.any(u <= LOG_GUARD):
            raise DomainError(f"log-loss argument underflow: min score {np.min(u):.3e}")
        return -1.0 / u
    if kind == SQUARED:
        return -2.0 * (1.0 - u)
    raise ValueError(f"scalar loss derivative undefined for kind {kind!r}")


def loss_smoothness(kind: str, u_min: float = 0.05) -> tuple[float, float]:
    """(M0, M1): Lipschitz constant of the derivative and bound on |l'|,
    over [u_min, 1] for the log loss and [0, 1] for the squared loss."""
    if kind == LOG:
        return 1.0 / u_min**2, 1.0 / u_min
    if kind == SQUARED:
        return 2.0, 2.0
    raise ValueError(f"smoothness constants undefined for kind {kind!r}")


def softmax(h: np.ndarray) -> np.ndarray:
    shifted = h - np.max(h, axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=-1, keepdims=True)


def embed_sample(dataset: Dataset, sample: Sample) -> tuple[np.ndarray, np.ndarray]:
    e = dataset.embedding.e
    x = e[list(sample.tokens)]
    return x, x[-1]


def forward(x: np.ndarray, w: np.ndarray, xbar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Softmax attention probabilities over positions and the composed output."""
    probs = softmax(x @ w @ xbar)
    return probs, x.T @ probs


@dataclass(frozen=True)
class _Group:
    """Samples of equal length batched into dense arrays."""

    idx: np.ndarray      # original sample indices
    x: np.ndarray        # (g, T, d)
    xbar: np.ndarray     # (g, d)
    labels: np.ndarray   # (g,)
    omask: np.ndarray    # (g, T) True where token == label
    gamma: Optional[np.ndarray]  # (g, T) head scores X c_y, None without a head


@dataclass(frozen=True)
class _Packed:
    groups: tuple[_Group, ...]
    n: int               # loss denominator (may exceed the packed sample count)
    d: int
    e: np.ndarray
    c: Optional[np.ndarray]
    tied: bool


def _pack(
    dataset: Dataset,
    n_total: Optional[int] = None,
    queries: Optional[tuple[int, ...]] = None,
    force_tied: bool = False,
) -> _Packed:
    """Batch samples of equal length.

    ``queries`` overrides the query token per sample (reduced sequences whose
    original last token was dropped still score against it).  ``force_tied``
    ignores the stored head and aggregates label-position mass, which is the
    scoring the cyclic-subdataset theory is stated in.
    """
    e = dataset.embedding.e
    c = dataset.head.c if dataset.head is not None and not force_tied else None
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(dataset.samples):
        by_len.setdefault(s.T, []).append(i)
    groups = []
    for t_len in sorted(by_len):
        idx = np.array(by_len[t_len])
        toks = np.array([dataset.samples[i].tokens for i in idx])
        labels = np.array([dataset.samples[i].label for i in idx])
        x = e[toks]
        if queries is None:
            xbar = x[:, -1, :].copy()
        else:
            xbar = e[np.array([queries[i] for i in idx])]
        gamma = None
        if c is not None:
            gamma = np.einsum("gtd,gd->gt", x, c[labels])
        groups.append(
            _Group(
                idx=idx,
                x=x,
                xbar=xbar,
                labels=labels,
                omask=toks == labels[:, None],
                gamma=gamma,
            )
        )
    return _Packed(
        groups=tuple(groups),
        n=n_total if n_total is not None else dataset.n,
        d=dataset.d,
        e=e,
        c=c,
        tied=dataset.tied_head(),
    )


def _group_probs(g: _Group, w: np.ndarray) -> np.ndarray:
    h = np.einsum("gtd,de,ge->gt", g.x, w, g.xbar)
    return softmax(h)


def _scores(g: _Group, s: np.ndarray, tied: bool) -> np.ndarray:
    if tied or g.gamma is None:
        return np.sum(s * g.omask, axis=1)
    return np.sum(s * g.gamma, axis=1)


def _loss_packed(w: np.ndarray, packed: _Packed, kind: str) -> float:
    total = 0.0
    for g in packed.groups:
        s = _group_probs(g, w)
        if kind == CROSS_ENTROPY:
            total += float(np.sum(_ce_per_sample(g, s, packed.c)))
        else:
            total += float(np.sum(loss_value(kind, _scores(g, s, packed.tied))))
    return total / packed.n


def _ce_per_sample(g: _Group, s: np.ndarray, c: np.ndarray) -> np.ndarray:
    if c is None:
        raise ValueError("cross-entropy loss requires a classifier head")
    out = np.einsum("gt,gtd->gd", s, g.x)
    logits = out @ c.T
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1))
    picked = shifted[np.arange(len(g.labels)), g.labels]
    return logz - picked


def _grad_packed(w: np.ndarray, packed: _Packed, kind: str, reduced_log: bool) -> np.ndarray:
    grad = np.zeros((packed.d, packed.d))
    for g in packed.groups:
        s = _group_probs(g, w)
        if kind == CROSS_ENTROPY:
            out = np.einsum("gt,gtd->gd", s, g.x)
            logits = out @ packed.c.T
            p = softmax(logits)
            p[np.arange(len(g.labels)), g.labels] -= 1.0
            back = np.einsum("gtd,gd->gt", g.x, p @ packed.c)  # dL/ds
            dh = s * (back - np.sum(s * back, axis=1, keepdims=True))
            vec = np.einsum("gtd,gt->gd", g.x, dh)
        elif kind == LOG and (packed.tied or g.gamma is None) and reduced_log:
            # Tied log loss: (1/n) sum_i sum_{t not in O_i} s_t (x_t - e_y) xbar^T.
            # The derivation divides by the label mass, so the same domain
            # guard as the loss applies even though the formula hides it.
            u = np.sum(s * g.omask, axis=1)
            if np.any(u <= LOG_GUARD):
                raise DomainError(f"log-loss argument underflow: min score {np.min(u):.3e}")
            sbar = s * (~g.omask)
            vec = np.einsum("gtd,gt->gd", g.x, sbar) - np.sum(sbar, axis=1)[:, None] * packed.e[g.labels]
        else:
            gamma = g.omask.astype(np.float64) if (packed.tied or g.gamma is None) else g.gamma
            u = np.sum(s * gamma, axis=1)
            coef = loss_deriv(kind, u)
            v = s * (gamma - u[:, None])
            vec = coef[:, None] * np.einsum("gtd,gt->gd", g.x, v)
        grad += np.einsum("gd,ge->de", vec, g.xbar)
    return grad / packed.n


def loss(w: np.ndarray, dataset: Dataset, kind: str = LOG) -> float:
    return _loss_packed(w, _pack(dataset), kind)


def grad(w: np.ndarray, dataset: Dataset, kind: str = LOG) -> np.ndarray:
    """Analytical gradient; uses the reduced tied-head form for the log loss."""
    return _grad_packed(w, _pack(dataset), kind, reduced_log=True)


def grad_general(w: np.ndarray, dataset: Dataset, kind: str = LOG) -> np.ndarray:
    """Gradient via the generic softmax-chain formula, for cross-checking."""
    return _grad_packed(w, _pack(dataset), kind, reduced_log=False)


def lipschitz_log(dataset: Dataset) -> float:
    """Gradient Lipschitz constant of the tied log loss: 2 e_max^4 sqrt(T_max)."""
    return 2.0 * dataset.embedding.e_max**4 * float(np.sqrt(dataset.t_max))


def lipschitz_general(dataset: Dataset, m0: float, m1: float) -> float:
    """Generic smoothness bound from head norms and spectral sequence norms."""
    if dataset.head is None:
        raise ValueError("general Lipschitz bound requires a classifier head")
    total = 0.0
    for s in dataset.samples:
        x, xbar = embed_sample(dataset, s)
        cy = np.linalg.norm(dataset.head.c[s.label])
        xs = np.linalg.norm(x, ord=2)
        xb = np.linalg.norm(xbar)
        a_i = cy * xb**2 * xs**3
        b_i = m0 * cy * xs + 3.0 * m1
        total += a_i * b_i
    return total / dataset.n


@dataclass(frozen=True)
class TrainConfig:
    eta: float
    iters: int
    normalized: bool = False
    init: str = "zero"           # "zero" | "gauss"
    init_scale: float = 1.0
    init_seed: int = 0
    loss: str = LOG
    record_every: int = 10
    projection: Optional[MatrixSubspace] = None

    def initial_w(self, d: int) -> np.ndarray:
        if self.init == "zero":
            return np.zeros((d, d))
        if self.init == "gauss":
            rng = seeded_rng(self.init_seed, 4)
            return self.init_scale * rng.standard_normal((d, d))
        raise ValueError(f"unknown init {self.init!r}")


@dataclass(frozen=True)
class TrainRefs:
    """Reference objects for per-iteration diagnostics; all optional."""

    w_svm: Optional[np.ndarray] = None
    s_fin: Optional[MatrixSubspace] = None
    w_fin: Optional[np.ndarray] = None
    split: Optional[CyclicSplit] = None


@dataclass
class TrainTrace:
    iters: np.ndarray
    loss: np.ndarray
    loss_bar: np.ndarray
    grad_norm: np.ndarray
    w_norm: np.ndarray
    corr_svm: np.ndarray
    dist_fin: np.ndarray
    t_ms: np.ndarray
    w_final: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def rows(self):
        for j in range(len(self.iters)):
            yield (
                int(self.iters[j]),
                self.loss[j],
                self.loss_bar[j],
                self.grad_norm[j],
                self.w_norm[j],
                self.corr_svm[j],
                self.dist_fin[j],
            )

    @staticmethod
    def csv_header() -> tuple[str, ...]:
        return ("iter", "loss", "loss_bar", "grad_norm", "w_norm", "corr_svm", "dist_fin")


def _safe_corr(w: np.ndarray, ref: Optional[np.ndarray]) -> float:
    if ref is None:
        return np.nan
    nw, nr = np.linalg.norm(w), np.linalg.norm(ref)
    if nw == 0.0 or nr == 0.0:
        return np.nan
    return float(np.sum(w * ref) / (nw * nr))


def train_gd(dataset: Dataset, config: TrainConfig, refs: Optional[TrainRefs] = None) -> TrainTrace:
    """Gradient descent (plain or Frobenius-normalized) with diagnostics.

    When a projection subspace is set, the gradient is projected onto it
    before each step.  Diagnostics that need references (corr_svm, dist_fin,
    loss_bar) are NaN when the reference is absent.
    """
    refs = refs or TrainRefs()
    if not config.normalized and config.loss == LOG and dataset.tied_head():
        lip = lipschitz_log(dataset)
        if config.eta > 1.0 / lip:
            warnings.warn(
                f"step size {config.eta} exceeds 1/L = {1.0 / lip:.4g}; "
                "plain GD descent is not guaranteed",
                stacklevel=2,
            )
    packed = _pack(dataset)
    split_packed = None
    if refs.split is not None and not refs.split.empty:
        split_packed = _pack(
            refs.split.subdataset,
            n_total=refs.split.n_total,
            queries=refs.split.queries,
            force_tied=config.loss != CROSS_ENTROPY,
        )
    w = config.initial_w(dataset.d)
    rec: dict[str, list[float]] = {k: [] for k in ("iters", "loss", "loss_bar", "grad_norm", "w_norm", "corr_svm", "dist_fin", "t_ms")}
    t0 = time.perf_counter()

    def record(tau: int, g: np.ndarray) -> None:
        cur_loss = _loss_packed(w, packed, config.loss)
        if not np.isfinite(cur_loss):
            raise NonFiniteLoss(f"loss became non-finite at iteration {tau}", trace=_finish(rec, w))
        rec["iters"].append(tau)
        rec["loss"].append(cur_loss)
        if split_packed is not None:
            rec["loss_bar"].append(_loss_packed(w, split_packed, config.loss))
        elif refs.split is not None:
            rec["loss_bar"].append(0.0)
        else:
            rec["loss_bar"].append(np.nan)
        rec["grad_norm"].append(float(np.linalg.norm(g)))
        rec["w_norm"].append(float(np.linalg.norm(w)))
        rec["corr_svm"].append(_safe_corr(w, refs.w_svm))
        if refs.s_fin is not None and refs.w_fin is not None:
            rec["dist_fin"].append(float(np.linalg.norm(refs.s_fin.project(w) - refs.w_fin)))
        else:
            rec["dist_fin"].append(np.nan)
        rec["t_ms"].append((time.perf_counter() - t0) * 1e3)

    for tau in range(config.iters + 1):
        g = _grad_packed(w, packed, config.loss, reduced_log=True)
        if not np.all(np.isfinite(g)):
            raise NonFiniteLoss(f"gradient became non-finite at iteration {tau}", trace=_finish(rec, w))
        if config.projection is not None:
            g = config.projection.project(g)
        if tau % config.record_every == 0 or tau == config.iters:
            record(tau, g)
        if tau == config.iters:
            break
        if config.normalized:
            gn = np.linalg.norm(g)
            # Below the floor the computed gradient is rounding noise; a
            # unit-length step along it would random-walk the direction.
            if gn > GRAD_FLOOR:
                w = w - config.eta * g / gn
        else:
            w = w - config.eta * g
    return _finish(rec, w)


def _finish(rec: dict, w: np.ndarray) -> TrainTrace:
    return TrainTrace(
        iters=np.array(rec["iters"], dtype=np.int64),
        loss=np.array(rec["loss"]),
        loss_bar=np.array(rec["loss_bar"]),
        grad_norm=np.array(rec["grad_norm"]),
        w_norm=np.array(rec["w_norm"]),
        corr_svm=np.array(rec["corr_svm"]),
        dist_fin=np.array(rec["dist_fin"]),
        t_ms=np.array(rec["t_ms"]),
        w_final=w.copy(),
    )


GRAD_LEAK_TOL = 1e-10


def reduced_lipschitz(split: CyclicSplit) -> float:
    """Smoothness of the cyclic-subdataset log loss (scaled by |I|/n)."""
    if split.empty:
        return 1.0
    sub = split.subdataset
    t_bar = max(s.T for s in sub.samples)
    return 2.0 * sub.embedding.e_max**4 * float(np.sqrt(t_bar)) * sub.n / split.n_total


def train_wfin(
    split: CyclicSplit,
    s_fin: MatrixSubspace,
    eta: Optional[float] = None,
    grad_tol: float = 1e-9,
    max_iters: int = 1_000_000,
    init_w: Optional[np.ndarray] = None,
    strict: bool = True,
) -> np.ndarray:
    """Finite component: minimize the cyclic-subdataset log loss over S_fin.

    Plain GD from zero (strict convexity on S_fin makes the minimizer
    unique).  The gradient already lies in S_fin up to rounding; the
    projection each step is a checked no-op.

    For splits built from dataset graphs the finite minimizer exists and the
    tolerance is reachable; pseudo-graph splits carry no such guarantee, so
    callers on that path pass ``strict=False`` to accept the capped iterate
    instead of an error.
    """
    d = split.subdataset.d
    if split.empty:
        return np.zeros((d, d))
    packed = _pack(split.subdataset, n_total=split.n_total, queries=split.queries,
                   force_tied=True)
    step = eta if eta is not None else 1.0 / reduced_lipschitz(split)
    w = np.zeros((d, d)) if init_w is None else init_w.copy()
    for _ in range(max_iters):
        g = _grad_packed(w, packed, LOG, reduced_log=True)
        g_proj = s_fin.project(g)
        leak = float(np.linalg.norm(g - g_proj))
        if leak > GRAD_LEAK_TOL:
            raise NoConvergence(f"cyclic gradient left S_fin: residual {leak:.3e}")
        gn = float(np.linalg.norm(g_proj))
        if gn < grad_tol:
            return w
        w = w - step * g_proj
    if strict:
        raise NoConvergence(f"train_wfin hit the iteration cap with grad norm {gn:.3e}")
    return w


def loss_bar(w: np.ndarray, split: CyclicSplit, kind: str = LOG) -> float:
    """Cyclic-subdataset loss, normalized by the full dataset size.

    Scalar kinds score tied-style (label-position mass) as in the theory;
    cross-entropy falls back to the stored head.
    """
    if split.empty:
        return 0.0
    packed = _pack(split.subdataset, n_total=split.n_total, queries=split.queries,
                   force_tied=kind != CROSS_ENTROPY)
    return _loss_packed(w, packed, kind)


def loss_inf(split: CyclicSplit, w_fin: np.ndarray, kind: str = LOG) -> float:
    """Infimum of the full loss: saturated samples contribute l(1) each."""
    base = float(len(split.idx_ibar)) / split.n_total * float(loss_value(kind, np.array([1.0]))[0])
    return base + loss_bar(w_fin, split, kind)


def eval_masked(w: np.ndarray, dataset: Dataset) -> list[dict[int, float]]:
    """Per-sample softmax mass aggregated by token ID (the mask trick).

    Gives tied-head style scores without materializing a head, which is the
    evaluation path for K > d vocabularies.
    """
    out: list[dict[int, float]] = [None] * dataset.n  # type: ignore[list-item]
    for g in _pack(dataset).groups:
        s = _group_probs(g, w)
        for row, i in enumerate(g.idx):
            agg: dict[int, float] = {}
            for t, tok in enumerate(dataset.samples[i].tokens):
                agg[tok] = agg.get(tok, 0.0) + float(s[row, t])
            out[i] = agg
    return out


def masked_label_mass(w: np.ndarray, dataset: Dataset) -> np.ndarray:
    masses = eval_masked(w, dataset)
    return np.array([masses[i].get(s.label, 0.0) for i, s in enumerate(dataset.samples)])


@dataclass(frozen=True)
class RegPathPoint:
    radius: float
    w: np.ndarray

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.w))


def _projected_gd(
    packed: _Packed,
    kind: str,
    w0: np.ndarray,
    radius: float,
    eta: float,
    max_iters: int,
    map_tol: float = 1e-7,
) -> np.ndarray:
    w = w0.copy()
    nrm = np.linalg.norm(w)
    if nrm > radius:
        w *= radius / nrm
    for _ in range(max_iters):
        g = _grad_packed(w, packed, kind, reduced_log=True)
        w_new = w - eta * g
        nrm = np.linalg.norm(w_new)
        if nrm > radius:
            w_new *= radius / nrm
        gap = float(np.linalg.norm(w - w_new)) / eta
        w = w_new
        if gap < map_tol:
            break
    return w


def reg_path(
    dataset: Dataset,
    radii: list[float],
    config: TrainConfig,
    restarts: int = 5,
) -> list[RegPathPoint]:
    """Norm-constrained minimizers along increasing radii.

    Warm starts rescale the previous solution to the new ball.  Convex
    instances (log loss, tied head) run once per radius; otherwise a few
    random restarts keep the best loss, acknowledging local minima.
    """
    if list(radii) != sorted(radii):
        raise ValueError("radii must be increasing")
    packed = _pack(dataset)
    convex = config.loss == LOG and packed.tied
    points: list[RegPathPoint] = []
    prev: Optional[np.ndarray] = None
    for r_idx, radius in enumerate(radii):
        starts = []
        if prev is None or np.linalg.norm(prev) == 0.0:
            starts.append(np.zeros((dataset.d, dataset.d)))
        else:
            starts.append(prev * (radius / np.linalg.norm(prev)))
        if not convex:
            for j in range(max(0, restarts - 1)):
                rng = seeded_rng(config.init_seed, 5, r_idx, j)
                starts.append(radius * 0.1 * rng.standard_normal((dataset.d, dataset.d)))
        best_w, best_loss = None, np.inf
        for w0 in starts:
            w = _projected_gd(packed, config.loss, w0, radius, config.eta, config.iters)
            cur = _loss_packed(w, packed, config.loss)
            if cur < best_loss:
                best_loss, best_w = cur, w
        points.append(RegPathPoint(radius=float(radius), w=frozen(best_w)))
        prev = best_w
    return points
