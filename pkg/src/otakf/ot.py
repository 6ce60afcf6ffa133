"""Discrete optimal-transport solvers and the Gaussian W2 closed form.

Provides entropic Sinkhorn scaling, the proximal-point scheme whose iterates
approach the exact (unregularized) transport cost, an exact LP oracle for
verification, and the fixed-plan gradient of the transport objective with
respect to the source points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

__all__ = [
    "DiscreteMeasure",
    "TransportPlan",
    "KernelUnderflowError",
    "cost_matrix",
    "epsilon_from_cost",
    "sinkhorn",
    "ipot",
    "lp_exact",
    "gaussian_w2_sq",
    "ot_loss_and_point_grad",
]


class KernelUnderflowError(ArithmeticError):
    """The Gibbs kernel exp(-C/eps) underflowed to an all-zero row or column."""

    def __init__(self, axis: str, index: int, eps: float):
        self.axis = axis
        self.index = index
        self.eps = eps
        super().__init__(
            f"kernel underflow: {axis} {index} of exp(-C/eps) is entirely zero; "
            f"eps={eps:.3e} is likely too small for this cost scale"
        )


@dataclass(frozen=True)
class DiscreteMeasure:
    """Weighted point cloud; weights are nonnegative and sum to one."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        w = np.asarray(self.weights, dtype=float)
        if pts.shape[0] != w.shape[0]:
            raise ValueError("points and weights must have matching length")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) >= 1e-12:
            raise ValueError(f"weights must sum to 1 (got {w.sum()!r})")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = pts.shape[0]
        return cls(pts, np.full(n, 1.0 / n))

    def __len__(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class TransportPlan:
    """Coupling matrix with its cost matrix and transport objective."""

    plan: np.ndarray
    cost: np.ndarray
    objective: float
    iterations_used: int
    marginal_error: float = 0.0

    def marginals(self) -> tuple[np.ndarray, np.ndarray]:
        return self.plan.sum(axis=1), self.plan.sum(axis=0)


def cost_matrix(src: np.ndarray, tgt: np.ndarray) -> np.ndarray:
    """Half squared Euclidean distances: C[i, j] = 0.5 * ||src_i - tgt_j||^2."""
    src = np.atleast_2d(np.asarray(src, dtype=float))
    tgt = np.atleast_2d(np.asarray(tgt, dtype=float))
    if src.shape[1] != tgt.shape[1]:
        raise ValueError(
            f"point dimension mismatch: {src.shape[1]} vs {tgt.shape[1]}"
        )
    diff = src[:, None, :] - tgt[None, :, :]
    return 0.5 * np.einsum("ijk,ijk->ij", diff, diff)


def epsilon_from_cost(C: np.ndarray, scale: float = 0.25, floor: float = 1e-6) -> float:
    """Scale-invariant regularization: eps = scale * median(C), floored.

    The proximal solver treats eps as a step-strength parameter rather than a
    final blur, and converges fastest near a quarter of the typical cost.
    """
    return max(scale * float(np.median(C)), floor)


def _check_kernel(K: np.ndarray, eps: float) -> None:
    row_dead = ~K.any(axis=1)
    if row_dead.any():
        raise KernelUnderflowError("row", int(np.argmax(row_dead)), eps)
    col_dead = ~K.any(axis=0)
    if col_dead.any():
        raise KernelUnderflowError("column", int(np.argmax(col_dead)), eps)


def _marginal_violation(plan, mu_w, nu_w) -> float:
    return max(
        float(np.max(np.abs(plan.sum(axis=1) - mu_w))),
        float(np.max(np.abs(plan.sum(axis=0) - nu_w))),
    )


def _round_to_feasible(plan: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Project an almost-coupling onto the transport polytope.

    Scales rows then columns down where they exceed their marginals and
    redistributes the remaining deficit as a rank-one correction, after which
    row and column sums match a and b to floating-point accuracy.  The
    correction vanishes as the solver iterates converge.
    """
    row = plan.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(row > 0, np.minimum(1.0, a / row), 0.0)
    P = plan * scale[:, None]
    col = P.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(col > 0, np.minimum(1.0, b / col), 0.0)
    P = P * scale[None, :]
    err_a = a - P.sum(axis=1)
    err_b = b - P.sum(axis=0)
    total = err_a.sum()
    if total > 0:
        P = P + np.outer(err_a, err_b) / total
    return P


def sinkhorn(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    C: np.ndarray,
    eps: float,
    max_iter: int = 1000,
    tol: float = 1e-9,
    stabilize: bool = True,
) -> TransportPlan:
    """Entropic-regularized transport via alternating scaling iterations.

    The reported objective is the transport cost sum(plan * C); the entropy
    term is excluded.  When the plain-domain kernel underflows, computation
    moves to the log domain unless ``stabilize`` is False, in which case the
    underflow is raised as a diagnosable error.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    a, b = mu.weights, nu.weights
    logK = -C / eps
    K = np.exp(logK)
    underflow = (~K.any(axis=1)).any() or (~K.any(axis=0)).any()
    if underflow and not stabilize:
        _check_kernel(K, eps)

    it = 0
    if not underflow:
        u = np.ones_like(a)
        v = np.ones_like(b)
        for it in range(1, max_iter + 1):
            u = a / (K @ v)
            v = b / (K.T @ u)
            plan = u[:, None] * K * v[None, :]
            if _marginal_violation(plan, a, b) < tol:
                break
    else:
        # Log-domain scaling: f, g are dual potentials divided by eps.
        with np.errstate(divide="ignore"):
            la = np.log(a)
            lb = np.log(b)
        f = np.zeros_like(a)
        g = np.zeros_like(b)
        for it in range(1, max_iter + 1):
            f = la - _logsumexp_rows(logK + g[None, :])
            g = lb - _logsumexp_rows((logK + f[:, None]).T)
            plan = np.exp(logK + f[:, None] + g[None, :])
            if _marginal_violation(plan, a, b) < tol:
                break
    plan = _round_to_feasible(plan, a, b)
    objective = float(np.sum(plan * C))
    return TransportPlan(plan, np.asarray(C, dtype=float), objective, it,
                         _marginal_violation(plan, a, b))


def _logsumexp_rows(M: np.ndarray) -> np.ndarray:
    mx = M.max(axis=1)
    safe = np.where(np.isfinite(mx), mx, 0.0)
    return safe + np.log(np.sum(np.exp(M - safe[:, None]), axis=1))


def ipot(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    C: np.ndarray,
    eps: float,
    outer_iters: int = 50,
    inner_iters: int = 3,
    marginal_tol: float = 1e-6,
    stabilize: bool = True,
) -> TransportPlan:
    """Proximal-point transport iterations converging to the exact cost.

    Starting from the uniform coupling, each outer iteration forms
    Q = exp(-C/eps) ⊙ plan and applies ``inner_iters`` scaling updates
    a <- mu/(Qb), b <- nu/(Q^T a) before recoupling plan = diag(a) Q diag(b);
    the scaling vector b carries across outer iterations.  Computation moves
    to the log domain when the kernel or the iterates degenerate.  The final
    plan is projected onto the transport polytope so its marginals match the
    inputs to floating-point accuracy.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if outer_iters < 1:
        raise ValueError("outer_iters must be >= 1")
    a_w, b_w = mu.weights, nu.weights
    N, W = len(a_w), len(b_w)
    if C.shape != (N, W):
        raise ValueError(f"cost matrix shape {C.shape} does not match ({N}, {W})")
    logG = -np.asarray(C, dtype=float) / eps
    G = np.exp(logG)
    underflow = (~G.any(axis=1)).any() or (~G.any(axis=0)).any()
    if underflow and not stabilize:
        _check_kernel(G, eps)

    it = 0
    plan = None
    if not underflow:
        plan = np.full((N, W), 1.0 / (N * W))
        b = np.ones(W)
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            for it in range(1, outer_iters + 1):
                Q = G * plan
                for _ in range(inner_iters):
                    a = a_w / (Q @ b)
                    b = b_w / (Q.T @ a)
                new_plan = a[:, None] * Q * b[None, :]
                if not np.all(np.isfinite(new_plan)):
                    plan = None  # scaling blew up; retry in the log domain
                    break
                delta = float(np.max(np.abs(new_plan - plan)))
                plan = new_plan
                if _marginal_violation(plan, a_w, b_w) < marginal_tol and delta < marginal_tol:
                    break
    if plan is None:
        with np.errstate(divide="ignore"):
            la = np.log(a_w)
            lb = np.log(b_w)
        log_plan = np.full((N, W), -np.log(N * W))
        g = np.zeros(W)
        for it in range(1, outer_iters + 1):
            logQ = logG + log_plan
            for _ in range(inner_iters):
                f = la - _logsumexp_rows(logQ + g[None, :])
                g = lb - _logsumexp_rows((logQ + f[:, None]).T)
            new_log_plan = f[:, None] + logQ + g[None, :]
            delta = float(np.max(np.abs(np.exp(new_log_plan) - np.exp(log_plan))))
            log_plan = new_log_plan
            plan = np.exp(log_plan)
            if _marginal_violation(plan, a_w, b_w) < marginal_tol and delta < marginal_tol:
                break
        plan = np.exp(log_plan)
    plan = _round_to_feasible(plan, a_w, b_w)
    objective = float(np.sum(plan * C))
    return TransportPlan(plan, np.asarray(C, dtype=float), objective, it,
                         _marginal_violation(plan, a_w, b_w))


def lp_exact(mu: DiscreteMeasure, nu: DiscreteMeasure, C: np.ndarray) -> TransportPlan:
    """Exact optimal coupling via linear programming (test/verification oracle)."""
    N, W = len(mu), len(nu)
    if N * W > 10**4:
        raise ValueError(f"instance too large for exact LP oracle: {N}x{W}")
    # Equality constraints: row sums = mu, col sums = nu (one redundant row).
    A_rows = np.zeros((N, N * W))
    for i in range(N):
        A_rows[i, i * W:(i + 1) * W] = 1.0
    A_cols = np.zeros((W, N * W))
    for j in range(W):
        A_cols[j, j::W] = 1.0
    A = np.vstack([A_rows, A_cols[:-1]])
    rhs = np.concatenate([mu.weights, nu.weights[:-1]])
    res = optimize.linprog(
        C.ravel(), A_eq=A, b_eq=rhs, bounds=(0, None), method="highs"
    )
    if not res.success:
        raise RuntimeError(f"exact transport LP failed: {res.message}")
    plan = res.x.reshape(N, W)
    return TransportPlan(plan, np.asarray(C, dtype=float), float(res.fun), 1,
                         _marginal_violation(plan, mu.weights, nu.weights))


def _sqrtm_psd(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(S)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def gaussian_w2_sq(m1, S1, m2, S2) -> float:
    """Squared Wasserstein-2 distance between Gaussians N(m1,S1), N(m2,S2).

    ||m1-m2||^2 + Tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2}), with matrix
    square roots via symmetric eigendecomposition (negative eigenvalues
    clamped to zero).
    """
    m1 = np.atleast_1d(np.asarray(m1, dtype=float))
    m2 = np.atleast_1d(np.asarray(m2, dtype=float))
    S1 = np.atleast_2d(np.asarray(S1, dtype=float))
    S2 = np.atleast_2d(np.asarray(S2, dtype=float))
    for S, name in ((S1, "S1"), (S2, "S2")):
        if np.max(np.abs(S - S.T)) > 1e-8:
            raise ValueError(f"{name} is not symmetric within 1e-8")
    root1 = _sqrtm_psd(S1)
    inner = root1 @ S2 @ root1
    cross = np.sum(np.sqrt(np.clip(np.linalg.eigvalsh(inner), 0.0, None)))
    mean_term = float(np.sum((m1 - m2) ** 2))
    trace_term = float(np.trace(S1) + np.trace(S2) - 2.0 * cross)
    return mean_term + max(trace_term, 0.0)


def ot_loss_and_point_grad(
    plan: TransportPlan, src_points: np.ndarray, tgt_points: np.ndarray
) -> tuple[float, np.ndarray]:
    """Transport loss sum(plan * C) and its source-point gradient at fixed plan.

    With C_ij = 0.5*||z_i - z~_j||^2 held to the stored coupling, the gradient
    for source point i is sum_j plan_ij (z_i - z~_j).
    """
    src = np.atleast_2d(np.asarray(src_points, dtype=float))
    tgt = np.atleast_2d(np.asarray(tgt_points, dtype=float))
    P = plan.plan
    loss = float(np.sum(P * plan.cost))
    row = P.sum(axis=1)
    grads = row[:, None] * src - P @ tgt
    return loss, grads
