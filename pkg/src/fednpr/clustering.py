"""Per-class online sub-clustering with Sinkhorn-Knopp and the prototype bank.

Each class of a client is split into ``K_c = min(K, n_c)`` sub-clusters. The
assignment of features to sub-clusters is an entropic optimal-transport plan
with unit row mass and equal column mass ``n_c / K_c``; prototypes are the
mass-weighted means of the assigned features, projected back onto the sphere.
Prototypes are never touched by gradient descent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ConvergenceError, DegenerateFeatureError, EmptyClusterError, ShapeError

NORM_FLOOR = 1e-12
MASS_FLOOR = 1e-12
UNDERFLOW = 1e-300


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.05
    max_iters: int = 500
    marginal_tol: float = 1e-6
    harden: bool = False

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.marginal_tol <= 0:
            raise ValueError(f"marginal_tol must be > 0, got {self.marginal_tol}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")


@dataclass
class SinkhornScaling:
    row_scaling: np.ndarray
    col_scaling: np.ndarray
    iterations: int = 0
    residual: float = 0.0
    log_domain: bool = False


@dataclass
class PrototypeBank:
    """Unit-norm sub-cluster centres, stored per class as (d, K_c) blocks.

    Classes the client has never seen hold a (d, 0) block.
    """

    prototypes: dict[int, np.ndarray]
    mass: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.prototypes)

    @property
    def dim(self) -> int:
        return next(iter(self.prototypes.values())).shape[0]

    def k(self, c: int) -> int:
        return self.prototypes[c].shape[1]

    def present_classes(self) -> list[int]:
        return [c for c in sorted(self.prototypes) if self.prototypes[c].shape[1] > 0]

    @property
    def n_columns(self) -> int:
        return sum(p.shape[1] for p in self.prototypes.values())

    def as_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """All prototypes as one (d, sum K_c) matrix plus the owning class of each column."""
        cols = [self.prototypes[c] for c in sorted(self.prototypes)]
        owner = np.concatenate([np.full(self.k(c), c, dtype=int) for c in sorted(self.prototypes)])
        return np.concatenate(cols, axis=1), owner

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(
            {c: p.copy() for c, p in self.prototypes.items()},
            {c: m.copy() for c, m in self.mass.items()},
        )


def normalize_rows(Z: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    if np.any(norms < NORM_FLOOR):
        bad = int(np.argmin(norms))
        raise DegenerateFeatureError(f"feature row {bad} has norm {norms[bad, 0]:.3g}; extractor collapsed")
    return Z / norms


def normalize_rows_backward(Z: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``Z / ||Z||`` back to the raw rows of Z."""
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    U = Z / norms
    radial = np.sum(U * grad_unit, axis=1, keepdims=True)
    return (grad_unit - U * radial) / norms


def _normalize_cols(P: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(P, axis=0, keepdims=True)
    return P / norms


def sinkhorn_assign(Z_c: np.ndarray, P_c: np.ndarray,
                    config: SinkhornConfig = SinkhornConfig()) -> tuple[np.ndarray, SinkhornScaling]:
    """Entropic transport of n features onto K_c prototypes.

    Rows carry unit mass, columns receive ``n / K_c`` each. Returns the plan
    ``Q = diag(r) M diag(c)`` with ``M = exp(<Z_c, P_c> / epsilon)``.
    """
    n, d = Z_c.shape
    if P_c.ndim != 2 or P_c.shape[0] != d:
        raise ShapeError(f"prototypes {P_c.shape} do not match features {Z_c.shape}")
    k = P_c.shape[1]
    if n < 1 or k < 1:
        raise ShapeError(f"need at least one feature and one prototype, got n={n}, K={k}")

    logits = (Z_c @ P_c) / config.epsilon
    col_target = n / k
    # A global shift is absorbed by the row scaling; it keeps the kernel <= 1.
    logits = logits - logits.max()
    if logits.min() < np.log(UNDERFLOW):
        return _sinkhorn_log(logits, col_target, config)

    M = np.exp(logits)
    c = np.ones(k)
    residual = np.inf
    it = 0
    for it in range(1, config.max_iters + 1):
        r = 1.0 / (M @ c)
        c = col_target / (M.T @ r)
        # columns are exact after the column update; rows carry the residual
        residual = np.max(np.abs(r * (M @ c) - 1.0))
        if residual < config.marginal_tol:
            Q = r[:, None] * M * c[None, :]
            return Q, SinkhornScaling(r, c, it, float(residual))
    return _finish_with_newton(logits, np.log(c), col_target, config, it)


def _sinkhorn_log(logits: np.ndarray, col_target: float, config: SinkhornConfig):
    n, k = logits.shape
    log_c = np.zeros(k)
    log_col_target = np.log(col_target)
    it = 0
    for it in range(1, config.max_iters + 1):
        log_r = -logsumexp(logits + log_c[None, :], axis=1)
        log_c = log_col_target - logsumexp(logits + log_r[:, None], axis=0)
        row_mass = np.exp(logsumexp(logits + log_c[None, :], axis=1) + log_r)
        residual = np.max(np.abs(row_mass - 1.0))
        if residual < config.marginal_tol:
            Q = np.exp(log_r[:, None] + logits + log_c[None, :])
            return Q, SinkhornScaling(np.exp(log_r), np.exp(log_c), it, float(residual), log_domain=True)
    return _finish_with_newton(logits, log_c, col_target, config, it, log_domain=True)


def _finish_with_newton(logits, log_c, col_target, config, iterations, log_domain=False, max_newton=100):
    """Polish a stalled Sinkhorn run by Newton steps on the column potentials.

    With the rows renormalised exactly, the column log-scalings g minimise the
    convex semi-dual ``sum_i logsumexp(L_i + g) - (n/K) sum_k g_k``, whose
    stationary point is the Sinkhorn fixed point. K is small, so the K x K
    Newton system is cheap; it converges where the alternating scaling crawls.
    """
    n, k = logits.shape
    g = log_c - log_c.mean()

    def objective(g):
        return logsumexp(logits + g[None, :], axis=1).sum() - col_target * g.sum()

    def plan(g):
        return np.exp(logits + g[None, :] - logsumexp(logits + g[None, :], axis=1, keepdims=True))

    f = objective(g)
    P = plan(g)
    residual = np.max(np.abs(P.sum(axis=0) - col_target))
    for _ in range(max_newton):
        if residual < config.marginal_tol:
            break
        grad = P.sum(axis=0) - col_target
        H = np.diag(P.sum(axis=0)) - P.T @ P
        # H annihilates the all-ones direction; pin it with a rank-one term
        step = np.linalg.solve(H + np.ones((k, k)) / k, -grad)
        t = 1.0
        while t > 1e-12:
            g_new = g + t * step
            f_new = objective(g_new)
            if f_new <= f + 1e-4 * t * grad @ step:
                break
            t *= 0.5
        g, f = g_new - g_new.mean(), f_new
        P = plan(g)
        residual = np.max(np.abs(P.sum(axis=0) - col_target))
        iterations += 1
    _check_residual(residual, config)
    log_r = -logsumexp(logits + g[None, :], axis=1)
    return P, SinkhornScaling(np.exp(log_r), np.exp(g), iterations, float(residual), log_domain=log_domain)


def _check_residual(residual: float, config: SinkhornConfig) -> None:
    if not np.isfinite(residual) or residual > 100 * config.marginal_tol:
        raise ConvergenceError(
            f"Sinkhorn did not converge in {config.max_iters} iterations (marginal residual {residual:.3g})",
            residual=residual,
        )


def harden_assignment(Q: np.ndarray) -> np.ndarray:
    """Row-argmax one-hot version of a soft plan (lowest index wins ties)."""
    hard = np.zeros_like(Q)
    hard[np.arange(Q.shape[0]), np.argmax(Q, axis=1)] = 1.0
    return hard


def update_prototypes(Z_c: np.ndarray, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mass-weighted sub-cluster means, L2-normalised per column.

    Returns ``(P_c, N_k)`` with ``P_c`` of shape (d, K_c).
    """
    if Q.shape[0] != Z_c.shape[0]:
        raise ShapeError(f"assignment has {Q.shape[0]} rows, features have {Z_c.shape[0]}")
    mass = Q.sum(axis=0)
    empty = np.flatnonzero(mass < MASS_FLOOR)
    if empty.size:
        raise EmptyClusterError(f"sub-cluster {int(empty[0])} received no mass", cluster=int(empty[0]))
    P = (Z_c.T @ Q) / mass[None, :]
    return _normalize_cols(P), mass


def init_prototypes(Z: np.ndarray, Y: np.ndarray, K: int, n_classes: int, rng: np.random.Generator,
                    perturbation: float = 0.01) -> PrototypeBank:
    """Seed each class with K_c perturbed copies of its normalised mean."""
    if len(Y) < 1:
        raise ValueError("need at least one labelled sample")
    d = Z.shape[1]
    protos = {}
    mass = {}
    for c in range(n_classes):
        Zc = Z[Y == c]
        kc = min(K, len(Zc))
        if kc == 0:
            protos[c] = np.zeros((d, 0))
            mass[c] = np.zeros(0)
            continue
        mean = Zc.mean(axis=0)
        P = mean[:, None] + perturbation * rng.standard_normal((d, kc))
        protos[c] = _normalize_cols(P)
        mass[c] = np.full(kc, len(Zc) / kc)
    return PrototypeBank(protos, mass)


def _refresh_class(Zc: np.ndarray, P_prev: np.ndarray, config: SinkhornConfig):
    Q, _ = sinkhorn_assign(Zc, P_prev, config)
    if config.harden:
        Q = harden_assignment(Q)
    try:
        return update_prototypes(Zc, Q)
    except EmptyClusterError:
        return _recover_empty(Zc, Q, P_prev)


def _recover_empty(Zc: np.ndarray, Q: np.ndarray, P_prev: np.ndarray):
    """Restart dead sub-clusters from the feature farthest from the live ones."""
    mass = Q.sum(axis=0)
    live = mass >= MASS_FLOOR
    P = np.zeros_like(P_prev)
    P[:, live] = _normalize_cols((Zc.T @ Q[:, live]) / mass[live][None, :])
    taken: set[int] = set()
    for k in np.flatnonzero(~live):
        sim = (Zc @ P[:, live]).max(axis=1) if live.any() else np.zeros(len(Zc))
        order = np.argsort(sim, kind="stable")
        j = next((int(i) for i in order if int(i) not in taken), int(order[0]))
        taken.add(j)
        P[:, k] = Zc[j]
        live[k] = True
        mass[k] = 1.0
    return _normalize_cols(P), mass


def cluster_client(Z: np.ndarray, Y: np.ndarray, bank_prev: PrototypeBank | None, K: int, n_classes: int,
                   config: SinkhornConfig = SinkhornConfig(), rng: np.random.Generator | None = None,
                   normalized: bool = False) -> PrototypeBank:
    """One clustering refresh of a client's bank from its current features.

    ``bank_prev`` anchors the Sinkhorn similarities; classes without a usable
    anchor (first round, or a changed K_c) are seeded with ``init_prototypes``.
    """
    if Z.shape[0] != len(Y):
        raise ShapeError(f"{Z.shape[0]} feature rows for {len(Y)} labels")
    U = Z if normalized else normalize_rows(Z)
    if rng is None:
        rng = np.random.default_rng(0)
    d = U.shape[1]
    protos: dict[int, np.ndarray] = {}
    mass: dict[int, np.ndarray] = {}
    for c in range(n_classes):
        Uc = U[Y == c]
        kc = min(K, len(Uc))
        if kc == 0:
            protos[c] = np.zeros((d, 0))
            mass[c] = np.zeros(0)
            continue
        if bank_prev is not None and c in bank_prev.prototypes and bank_prev.k(c) == kc:
            anchor = bank_prev.prototypes[c]
        else:
            anchor = init_prototypes(Uc, np.zeros(len(Uc), dtype=int), kc, 1, rng).prototypes[0]
        protos[c], mass[c] = _refresh_class(Uc, anchor, config)
    return PrototypeBank(protos, mass)
