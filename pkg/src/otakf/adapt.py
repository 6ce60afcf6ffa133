"""Online test-time adaptation of the filter's noise statistics.

Each time step maintains a sliding window of innovations, builds a sampled
source measure from the predictive-measurement Gaussian and a target measure
of innovation-shifted pseudo-measurements, solves a small transport problem
between them, and descends the transport loss in the log-noise parameters
with a warmed-up Adam step.  The gradient flows through the Cholesky factor
of the predicted innovation covariance using pathwise reparameterization of
the particles; the transport plan is held fixed (envelope gradient).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular

from .ekf import (
    NoiseParams,
    NumericsError,
    PredictiveMeasurement,
    StateEstimate,
    jacobian_h,
    predict,
    predictive_measurement,
    run_filter,
    update,
    initial_estimate_from_measurement,
)
from .ot import DiscreteMeasure, cost_matrix, epsilon_from_cost, ipot, ot_loss_and_point_grad
from .ssm import SsmSpec, Trajectory, measure, transition

THETA_CLAMP = 12.0


class ResidualWindow:
    """Bounded FIFO of the most recent innovations."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("window capacity must be >= 1")
        self.capacity = capacity
        self._buf: deque[np.ndarray] = deque(maxlen=capacity)

    def push(self, residual: np.ndarray) -> None:
        self._buf.append(np.array(residual, dtype=float))

    def as_array(self) -> np.ndarray:
        return np.array(self._buf, dtype=float)

    def __len__(self) -> int:
        return len(self._buf)


@dataclass(frozen=True)
class AdaptConfig:
    """Hyperparameters of the online adaptation loop.

    ``lr`` may be zero, which disables adaptation entirely (the filter then
    reproduces the fixed-parameter run bit for bit).  ``pointwise_target``
    swaps the transport loss for the plain squared innovation, the ablation
    where the target collapses to the current measurement alone.
    """

    W: int = 20
    particles: int = 64
    inner_iters: int = 2
    lr: float = 1.8e-3
    weight_decay: float = 1e-3
    epsilon_scale: float = 0.25
    ipot_iters: int = 50
    seed: int = 0
    warmup: bool = True
    pointwise_target: bool = False
    adapt_process_noise: bool = True
    adapt_measurement_noise: bool = True

    def __post_init__(self):
        if self.W < 1:
            raise ValueError("W must be >= 1")
        if self.particles < 2:
            raise ValueError("particles must be >= 2")
        if self.inner_iters < 1:
            raise ValueError("inner_iters must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


@dataclass
class OptimizerState:
    """Adam accumulators: first/second moments and step counter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, dim: int) -> "OptimizerState":
        return cls(np.zeros(dim), np.zeros(dim), 0)


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_update(
    theta_vec: np.ndarray,
    opt: OptimizerState,
    grad: np.ndarray,
    lr: float,
    weight_decay: float,
) -> tuple[np.ndarray, OptimizerState]:
    """One Adam step with bias correction and decoupled L2 decay."""
    step = opt.step + 1
    m = ADAM_BETA1 * opt.m + (1.0 - ADAM_BETA1) * grad
    v = ADAM_BETA2 * opt.v + (1.0 - ADAM_BETA2) * grad**2
    m_hat = m / (1.0 - ADAM_BETA1**step)
    v_hat = v / (1.0 - ADAM_BETA2**step)
    new_theta = theta_vec - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS) - lr * weight_decay * theta_vec
    return new_theta, OptimizerState(m, v, step)


def warmup_lr(t: int, W: int, eta: float) -> float:
    """Linear ramp: eta_t = min(eta, t*eta/W)."""
    if t < 1:
        raise ValueError("t must be >= 1")
    return min(eta, t * eta / W)


def build_source(
    pm: PredictiveMeasurement, n_particles: int, noise_draws: np.ndarray
) -> DiscreteMeasure:
    """Uniform empirical measure of particles mean + chol_S @ eps_i."""
    draws = np.asarray(noise_draws, dtype=float)
    if draws.shape != (n_particles, pm.mean.size):
        raise ValueError(f"noise_draws must have shape ({n_particles}, {pm.mean.size})")
    points = pm.mean[None, :] + draws @ pm.chol_S.T
    return DiscreteMeasure.uniform(points)


def build_target(y: np.ndarray, window: ResidualWindow) -> DiscreteMeasure:
    """Pseudo-measurements y + e_j for each stored innovation, uniform weights."""
    if len(window) == 0:
        raise ValueError("residual window is empty")
    y = np.asarray(y, dtype=float)
    return DiscreteMeasure.uniform(y[None, :] + window.as_array())


def innovation_stats(window: ResidualWindow) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased covariance of the stored innovations."""
    k = len(window)
    if k < 2:
        raise ValueError(f"need at least 2 residuals for covariance, have {k}")
    E = window.as_array()
    mean = E.mean(axis=0)
    centered = E - mean
    cov = centered.T @ centered / (k - 1)
    return mean, cov


def _chol_directional_diff(L: np.ndarray, dS: np.ndarray) -> np.ndarray:
    """Forward-mode derivative of cholesky(S) in direction dS.

    dL = L * Phi(L^{-1} dS L^{-T}) with Phi taking the strict lower triangle
    plus half the diagonal.
    """
    X = solve_triangular(L, dS, lower=True)
    A = solve_triangular(L, X.T, lower=True).T
    Phi = np.tril(A)
    np.fill_diagonal(Phi, 0.5 * np.diag(A))
    return L @ Phi


def theta_gradient(
    theta: NoiseParams,
    prev: StateEstimate,
    y: np.ndarray,
    window: ResidualWindow,
    cfg: AdaptConfig,
    noise_draws: np.ndarray,
    spec: SsmSpec,
    vc: float | None = None,
) -> tuple[np.ndarray, float]:
    """Transport loss and its gradient in (log_q, log_r) for one time step.

    The previous estimate, the Jacobians, and the particle draws are held
    constant; theta enters through Q in the one-step covariance prediction
    and through R, hence through S and its Cholesky factor.  The transport
    plan is solved once and frozen for the gradient.
    """
    if len(window) == 0:
        raise ValueError("residual window is empty")
    n, m = spec.state_dim, spec.meas_dim
    prior = predict(prev, theta, spec, vc)
    pm = predictive_measurement(prior, theta, spec)
    src = build_source(pm, cfg.particles, noise_draws)
    tgt = build_target(y, window)
    C = cost_matrix(src.points, tgt.points)
    eps = epsilon_from_cost(C, cfg.epsilon_scale)
    plan = ipot(src, tgt, C, eps, outer_iters=cfg.ipot_iters)
    loss, point_grads = ot_loss_and_point_grad(plan, src.points, tgt.points)

    # Accumulated pairing of point gradients with their draws: the gradient in
    # any S-direction dS is <dL(dS), sum_i g_i eps_i^T>.
    G = point_grads.T @ np.asarray(noise_draws, dtype=float)  # (m, m)
    H = jacobian_h(spec)
    q_var = theta.q_var
    r_var = theta.r_var
    grad = np.zeros(n + m)
    for k in range(n):
        h_col = H[:, k]
        if not np.any(h_col):
            continue
        dS = 2.0 * q_var[k] * np.outer(h_col, h_col)
        dL = _chol_directional_diff(pm.chol_S, dS)
        grad[k] = float(np.sum(dL * G))
    for k in range(m):
        dS = np.zeros((m, m))
        dS[k, k] = 2.0 * r_var[k]
        dL = _chol_directional_diff(pm.chol_S, dS)
        grad[n + k] = float(np.sum(dL * G))
    bad = ~np.isfinite(grad)
    if bad.any():
        raise NumericsError(f"non-finite gradient in component {int(np.argmax(bad))}")
    return grad, loss


@dataclass
class StepDiagnostics:
    """Per-time-step adaptation record."""

    t: int
    lr: float
    losses: list[float] = field(default_factory=list)
    q_var: np.ndarray | None = None
    r_var: np.ndarray | None = None
    pred_meas_cov: np.ndarray | None = None
    skipped: bool = False
    clamped: bool = False


def _theta_mask(cfg: AdaptConfig, n: int, m: int) -> np.ndarray:
    mask = np.ones(n + m)
    if not cfg.adapt_process_noise:
        mask[:n] = 0.0
    if not cfg.adapt_measurement_noise:
        mask[n:] = 0.0
    return mask


def adapt_step(
    theta: NoiseParams,
    opt: OptimizerState,
    prev: StateEstimate,
    y: np.ndarray,
    window: ResidualWindow,
    cfg: AdaptConfig,
    t: int,
    rng: np.random.Generator,
    spec: SsmSpec,
    vc: float | None = None,
) -> tuple[NoiseParams, OptimizerState, StepDiagnostics]:
    """Run the inner adaptation iterations for one time step.

    Each inner iteration redraws particles, recomputes the one-step
    prediction under the current theta, and takes one warmed-up Adam step on
    the transport loss.  An empty window skips the update entirely.
    """
    n, m = spec.state_dim, spec.meas_dim
    lr_t = warmup_lr(t, cfg.W, cfg.lr) if cfg.warmup else cfg.lr
    diag = StepDiagnostics(t=t, lr=lr_t)
    if len(window) == 0:
        diag.skipped = True
        diag.q_var = theta.q_var
        diag.r_var = theta.r_var
        return theta, opt, diag

    mask = _theta_mask(cfg, n, m)
    y = np.asarray(y, dtype=float)
    for _ in range(cfg.inner_iters):
        draws = rng.standard_normal((cfg.particles, m))
        if cfg.pointwise_target:
            # Squared-innovation ablation: the predictive mean carries no
            # dependence on the noise parameters, so the gradient vanishes
            # and only the loss value is recorded.
            prior_mean = transition(prev.mean, spec, vc)
            loss = float(np.sum((y - measure(prior_mean, spec)) ** 2))
            grad = np.zeros(n + m)
        else:
            grad, loss = theta_gradient(theta, prev, y, window, cfg, draws, spec, vc)
        vec, opt = adam_update(theta.as_vector(), opt, mask * grad, lr_t, cfg.weight_decay)
        vec = np.where(mask > 0, vec, theta.as_vector())
        clipped = np.clip(vec, -THETA_CLAMP, THETA_CLAMP)
        if not np.array_equal(clipped, vec):
            diag.clamped = True
        theta = NoiseParams.from_vector(clipped, n, m)
        diag.losses.append(loss)
    diag.q_var = theta.q_var
    diag.r_var = theta.r_var
    return theta, opt, diag


@dataclass
class FilterRun:
    """Output of the adaptive filtering loop."""

    estimates: list[StateEstimate]
    theta_trace: list[NoiseParams]
    loss_trace: list[list[float]]
    diagnostics: list[StepDiagnostics]


def run_otak_filter(
    traj: Trajectory,
    theta0: NoiseParams,
    cfg: AdaptConfig,
    x0: np.ndarray | None = None,
    sigma0: np.ndarray | None = None,
) -> FilterRun:
    """Adaptive filtering pass: adapt the noise parameters, then update.

    Step 1 is a plain filter step that seeds the residual window; from step 2
    on, the current innovation is inserted once, the inner adaptation loop
    runs, and the posterior is computed with the adapted parameters.
    """
    if len(traj) < 2:
        raise ValueError("trajectory must have at least 2 steps")
    spec = traj.spec
    n, m = spec.state_dim, spec.meas_dim
    if x0 is None:
        x0 = traj.x0 if traj.x0 is not None else initial_estimate_from_measurement(
            traj.measurements[0], spec
        )
    if sigma0 is None:
        sigma0 = np.eye(n)

    theta = theta0
    opt = OptimizerState.zeros(n + m)
    window = ResidualWindow(cfg.W)
    rng = np.random.default_rng(cfg.seed)
    est = StateEstimate(np.asarray(x0, dtype=float), np.asarray(sigma0, dtype=float))

    estimates: list[StateEstimate] = []
    thetas: list[NoiseParams] = []
    losses: list[list[float]] = []
    diags: list[StepDiagnostics] = []
    for t in range(1, len(traj) + 1):
        y = traj.measurements[t - 1]
        vc = float(traj.vc[t - 1]) if traj.vc is not None else None
        residual = y - measure(transition(est.mean, spec, vc), spec)
        window.push(residual)
        if t == 1:
            diag = StepDiagnostics(t=t, lr=0.0, skipped=True,
                                   q_var=theta.q_var, r_var=theta.r_var)
        else:
            theta, opt, diag = adapt_step(
                theta, opt, est, y, window, cfg, t, rng, spec, vc
            )
        prior = predict(est, theta, spec, vc)
        pm = predictive_measurement(prior, theta, spec)
        diag.pred_meas_cov = pm.S
        est = update(prior, pm, y, spec)
        estimates.append(est)
        thetas.append(theta)
        losses.append(list(diag.losses))
        diags.append(diag)
    return FilterRun(estimates, thetas, losses, diags)
