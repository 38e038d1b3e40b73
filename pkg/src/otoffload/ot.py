"""Discrete optimal transport: entropic Sinkhorn solver and an exact small-scale oracle.

The solver minimises ``<C, P> - eps * H(P)`` over couplings ``P`` with row
sums ``a`` and column sums ``b``, where ``H(P) = -sum P (log P - 1)``. The
minimiser has the diagonal-scaling form ``P = diag(u) K diag(v)`` with
``K = exp(-C / eps)``; iterations are carried out on ``log u`` and ``log v``
so that small ``eps`` does not underflow the kernel.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numba
import numpy as np

from .model import MisuseError, OffloadError

MEASURE_ATOL = 1e-9
EXACT_MAX_SIZE = 8


class SolverFailure(OffloadError):
    """A transport plan could not be turned into an assignment."""


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise MisuseError("a discrete measure needs a nonempty 1-D weight vector")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise MisuseError("measure weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > MEASURE_ATOL:
            raise MisuseError(f"measure weights sum to {w.sum()!r}, expected 1")
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_masses(cls, masses) -> "DiscreteMeasure":
        m = np.asarray(masses, dtype=float)
        total = m.sum()
        if not total > 0:
            raise MisuseError("cannot normalise masses with a nonpositive total")
        return cls(m / total)

    @classmethod
    def uniform(cls, n: int) -> "DiscreteMeasure":
        return cls(np.full(n, 1.0 / n))

    def __len__(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True, eq=False)
class CostMatrix:
    entries: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.entries, dtype=float)
        if c.ndim != 2 or 0 in c.shape:
            raise MisuseError("cost matrix must be a nonempty 2-D array")
        if not np.all(np.isfinite(c)) or np.any(c < 0):
            raise MisuseError("cost entries must be finite and nonnegative")
        object.__setattr__(self, "entries", c)

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape


@dataclass(frozen=True, eq=False)
class TransportPlan:
    coupling: np.ndarray
    log_u: np.ndarray
    log_v: np.ndarray
    iterations: int = 0
    marginal_error: float = 0.0
    converged: bool = True

    @property
    def scaling_u(self) -> np.ndarray:
        return np.exp(self.log_u)

    @property
    def scaling_v(self) -> np.ndarray:
        return np.exp(self.log_v)


def _weights(x) -> np.ndarray:
    return np.asarray(getattr(x, "weights", x), dtype=float)


def _entries(x) -> np.ndarray:
    return np.asarray(getattr(x, "entries", x), dtype=float)


def marginal_error(coupling: np.ndarray, a, b) -> float:
    """max of the L1 row-sum and column-sum violations."""
    p = np.asarray(coupling, dtype=float)
    return max(
        float(np.abs(p.sum(axis=1) - _weights(a)).sum()),
        float(np.abs(p.sum(axis=0) - _weights(b)).sum()),
    )


def transport_cost(plan: TransportPlan | np.ndarray, cost: CostMatrix | np.ndarray) -> float:
    p = np.asarray(getattr(plan, "coupling", plan), dtype=float)
    c = _entries(cost)
    if p.shape != c.shape:
        raise MisuseError(f"plan shape {p.shape} does not match cost shape {c.shape}")
    return float(np.sum(p * c))


@numba.njit(cache=True)
def _log_domain_loop(neg_k, log_a, log_b, log_u, log_v, a, tol, max_iter):
    """Alternating log-domain updates; returns (log_u, log_v, iterations)."""
    n, m = neg_k.shape
    lse_rows = np.empty(n)
    it = 0
    while it < max_iter:
        for i in range(n):
            mx = -np.inf
            for j in range(m):
                x = neg_k[i, j] + log_v[j]
                if x > mx:
                    mx = x
            if mx == -np.inf:
                lse_rows[i] = -np.inf
                continue
            s = 0.0
            for j in range(m):
                s += np.exp(neg_k[i, j] + log_v[j] - mx)
            lse_rows[i] = np.log(s) + mx
        # row sums of the current plan fall out of the quantity the u-update needs
        if it > 0:
            err = 0.0
            for i in range(n):
                err += abs(np.exp(log_u[i] + lse_rows[i]) - a[i])
            if err <= tol:
                break
        for i in range(n):
            log_u[i] = log_a[i] - lse_rows[i]
        for j in range(m):
            mx = -np.inf
            for i in range(n):
                x = neg_k[i, j] + log_u[i]
                if x > mx:
                    mx = x
            if mx == -np.inf:
                log_v[j] = -np.inf
                continue
            s = 0.0
            for i in range(n):
                s += np.exp(neg_k[i, j] + log_u[i] - mx)
            log_v[j] = log_b[j] - (np.log(s) + mx)
        it += 1
    return log_u, log_v, it


def sinkhorn(
    a,
    b,
    C,
    epsilon: float,
    tol: float = 1e-6,
    max_iter: int = 10_000,
    init_u=None,
    init_v=None,
) -> TransportPlan:
    """Entropic OT by alternating row/column scaling.

    ``init_u``/``init_v`` are optional positive starting scalings (all ones
    by default). The returned plan has ``converged=False`` if ``max_iter``
    was reached with the marginal error still above ``tol``; the plan is
    still the last iterate.
    """
    a = _weights(a)
    b = _weights(b)
    c = _entries(C)
    n, m = c.shape
    if a.shape != (n,) or b.shape != (m,):
        raise MisuseError(f"marginals of sizes {a.shape}, {b.shape} do not match cost shape {c.shape}")
    if not epsilon > 0:
        raise MisuseError(f"epsilon must be > 0, got {epsilon}")
    if max_iter < 1:
        raise MisuseError("max_iter must be >= 1")

    with np.errstate(divide="ignore"):
        log_a = np.log(a)
        log_b = np.log(b)
    neg_k = -c / epsilon
    log_u = np.zeros(n) if init_u is None else np.log(np.asarray(init_u, dtype=float)).copy()
    log_v = np.zeros(m) if init_v is None else np.log(np.asarray(init_v, dtype=float)).copy()

    log_u, log_v, it = _log_domain_loop(neg_k, log_a, log_b, log_u, log_v, a, float(tol), int(max_iter))

    coupling = np.exp(neg_k + log_u[:, None] + log_v[None, :])
    err = marginal_error(coupling, a, b)
    return TransportPlan(
        coupling=coupling,
        log_u=log_u,
        log_v=log_v,
        iterations=it,
        marginal_error=err,
        converged=err <= tol,
    )


def _uniform(w: np.ndarray) -> bool:
    return bool(np.allclose(w, w[0], rtol=0.0, atol=1e-12))


def exact_ot_small(a, b, C) -> tuple[TransportPlan, float]:
    """Exact Kantorovich optimum for desk-sized instances (test oracle).

    Square problems with uniform marginals are solved by enumerating all
    permutation couplings. Everything else goes to an LP solver, which
    returns an optimal vertex of the transportation polytope.
    """
    a = _weights(a)
    b = _weights(b)
    c = _entries(C)
    n, m = c.shape
    if a.shape != (n,) or b.shape != (m,):
        raise MisuseError("marginal sizes do not match the cost matrix")
    if n > EXACT_MAX_SIZE or m > EXACT_MAX_SIZE:
        raise MisuseError(f"exact oracle limited to {EXACT_MAX_SIZE}x{EXACT_MAX_SIZE}, got {n}x{m}")

    if n == m and _uniform(a) and _uniform(b):
        rows = np.arange(n)
        best_cost, best_perm = np.inf, None
        for perm in itertools.permutations(range(n)):
            total = c[rows, perm].sum()
            if total < best_cost:
                best_cost, best_perm = total, perm
        coupling = np.zeros((n, n))
        coupling[rows, best_perm] = 1.0 / n
    else:
        from scipy.optimize import linprog

        a_eq = np.zeros((n + m, n * m))
        for i in range(n):
            a_eq[i, i * m:(i + 1) * m] = 1.0
        for j in range(m):
            a_eq[n + j, j::m] = 1.0
        res = linprog(
            c.ravel(),
            A_eq=a_eq[:-1],  # one marginal constraint is redundant
            b_eq=np.concatenate([a, b])[:-1],
            bounds=(0, None),
            method="highs-ds",
        )
        if res.status != 0:
            raise SolverFailure(f"LP oracle failed: {res.message}")
        coupling = np.clip(res.x.reshape(n, m), 0.0, None)

    plan = TransportPlan(
        coupling=coupling,
        log_u=np.zeros(n),
        log_v=np.zeros(m),
        marginal_error=marginal_error(coupling, a, b),
    )
    return plan, float(np.sum(coupling * c))


def round_to_assignment(plan: TransportPlan | np.ndarray) -> np.ndarray:
    """Row-wise argmax of the coupling; ties resolve to the lowest column."""
    p = np.asarray(getattr(plan, "coupling", plan), dtype=float)
    if p.ndim != 2:
        raise MisuseError("coupling must be 2-D")
    if np.any(~(p.max(axis=1) > 0)):
        bad = np.flatnonzero(~(p.max(axis=1) > 0)).tolist()
        raise SolverFailure(f"rows {bad} carry no mass")
    return np.argmax(p, axis=1)
