"""Extended Kalman filter with a differentiable noise parameterization.

The adapted parameters are log standard deviations of diagonal process and
measurement covariances, so the filter's Q and R remain strictly positive
definite for every finite parameter value.  Jacobians default to central
finite differences for the nonlinear variants; the covariance update uses the
Joseph form for robustness under small adapted R.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ssm import (
    LINEAR_1D,
    LORENZ,
    SsmSpec,
    Trajectory,
    measure,
    measurement_matrix,
    transition,
)

JITTERS = (0.0, 1e-12, 1e-9, 1e-6)


class NumericsError(RuntimeError):
    """Numerical failure inside the filter (Cholesky breakdown, NaNs)."""


@dataclass(frozen=True)
class StateEstimate:
    """Gaussian state belief: mean vector and symmetric PSD covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean size {mean.size}")
        asym = np.max(np.abs(cov - cov.T)) if cov.size else 0.0
        if asym > 1e-9:
            raise ValueError(f"covariance asymmetry {asym:.3e} exceeds 1e-9")
        cov = 0.5 * (cov + cov.T)
        eigs = np.linalg.eigvalsh(cov)
        if eigs.min() < -1e-12:
            raise ValueError(f"covariance has eigenvalue {eigs.min():.3e} < -1e-12")
        if eigs.min() < 0.0:
            w, V = np.linalg.eigh(cov)
            cov = (V * np.clip(w, 0.0, None)) @ V.T
            cov = 0.5 * (cov + cov.T)
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


@dataclass(frozen=True)
class NoiseParams:
    """Log standard deviations of the diagonal noise factors.

    Q(theta) = diag(exp(2*log_q)) and R(theta) = diag(exp(2*log_r)).
    """

    log_q: np.ndarray
    log_r: np.ndarray

    def __post_init__(self):
        lq = np.atleast_1d(np.asarray(self.log_q, dtype=float))
        lr = np.atleast_1d(np.asarray(self.log_r, dtype=float))
        lq.setflags(write=False)
        lr.setflags(write=False)
        object.__setattr__(self, "log_q", lq)
        object.__setattr__(self, "log_r", lr)

    @classmethod
    def from_covariances(cls, Q: np.ndarray, R: np.ndarray) -> "NoiseParams":
        qd = np.diag(np.atleast_2d(Q))
        rd = np.diag(np.atleast_2d(R))
        if np.any(qd <= 0) or np.any(rd <= 0):
            raise ValueError("diagonal entries must be positive to take logs")
        return cls(0.5 * np.log(qd), 0.5 * np.log(rd))

    @property
    def q_var(self) -> np.ndarray:
        return np.exp(2.0 * self.log_q)

    @property
    def r_var(self) -> np.ndarray:
        return np.exp(2.0 * self.log_r)

    def Q(self) -> np.ndarray:
        return np.diag(self.q_var)

    def R(self) -> np.ndarray:
        return np.diag(self.r_var)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.log_q, self.log_r])

    @classmethod
    def from_vector(cls, vec: np.ndarray, n: int, m: int) -> "NoiseParams":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[:n], vec[n:n + m])


@dataclass(frozen=True)
class PredictiveMeasurement:
    """Gaussian one-step measurement prediction with its Cholesky factor."""

    mean: np.ndarray
    S: np.ndarray
    chol_S: np.ndarray
    R: np.ndarray  # measurement-noise part of S, kept for the Joseph update

    def __post_init__(self):
        recon = self.chol_S @ self.chol_S.T
        if np.max(np.abs(recon - self.S)) > 1e-9 * max(1.0, float(np.max(np.abs(self.S)))):
            raise ValueError("chol_S does not reproduce S within tolerance")


def _fd_jacobian(f, x: np.ndarray) -> np.ndarray:
    """Central finite differences with per-component step 1e-6*max(1,|x_i|)."""
    n = x.size
    fx = np.asarray(f(x))
    J = np.empty((fx.size, n))
    for i in range(n):
        h = 1e-6 * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        J[:, i] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2.0 * h)
    return J


def jacobian_f(x: np.ndarray, spec: SsmSpec, vc: float | None = None) -> np.ndarray:
    """Jacobian of the discrete transition at x (analytic for linear_1d)."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("state has non-finite components")
    if spec.dynamics == LINEAR_1D:
        return np.array([[spec.a]])
    return _fd_jacobian(lambda z: transition(z, spec, vc), x)


def jacobian_h(spec: SsmSpec) -> np.ndarray:
    """Measurement Jacobian (all variants measure linearly)."""
    return measurement_matrix(spec)


def predict(
    prev: StateEstimate,
    theta: NoiseParams,
    spec: SsmSpec,
    vc: float | None = None,
) -> StateEstimate:
    """Time update: mean through f, covariance through F Sigma F^T + Q(theta)."""
    F = jacobian_f(prev.mean, spec, vc)
    mean = transition(prev.mean, spec, vc)
    cov = F @ prev.cov @ F.T + theta.Q()
    cov = 0.5 * (cov + cov.T)
    return StateEstimate(mean, cov)


def _chol_with_jitter(S: np.ndarray) -> np.ndarray:
    scale = max(1.0, float(np.max(np.abs(np.diag(S)))))
    for jit in JITTERS:
        try:
            return np.linalg.cholesky(S + jit * scale * np.eye(S.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise NumericsError(
        "innovation covariance is not positive definite even after jitter"
    )


def predictive_measurement(
    prior: StateEstimate, theta: NoiseParams, spec: SsmSpec
) -> PredictiveMeasurement:
    """Measurement prediction: mean h(x), covariance H Sigma H^T + R(theta)."""
    H = jacobian_h(spec)
    mean = measure(prior.mean, spec)
    R = theta.R()
    S = H @ prior.cov @ H.T + R
    S = 0.5 * (S + S.T)
    chol = _chol_with_jitter(S)
    return PredictiveMeasurement(mean, S, chol, R)


def update(
    prior: StateEstimate,
    pm: PredictiveMeasurement,
    y: np.ndarray,
    spec: SsmSpec,
) -> StateEstimate:
    """Measurement update with Joseph-form covariance."""
    y = np.asarray(y, dtype=float)
    if y.shape != (spec.meas_dim,):
        raise ValueError(f"measurement must be a {spec.meas_dim}-vector")
    H = jacobian_h(spec)
    # K = Sigma H^T S^{-1} via the Cholesky factor of S.
    PHt = prior.cov @ H.T
    Sinv_Ht = np.linalg.solve(pm.chol_S.T, np.linalg.solve(pm.chol_S, PHt.T))
    K = Sinv_Ht.T
    innovation = y - pm.mean
    mean = prior.mean + K @ innovation
    IKH = np.eye(spec.state_dim) - K @ H
    cov = IKH @ prior.cov @ IKH.T + K @ pm.R @ K.T
    cov = 0.5 * (cov + cov.T)
    if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
        raise NumericsError("filter update produced non-finite values")
    return StateEstimate(mean, cov)


def initial_estimate_from_measurement(y: np.ndarray, spec: SsmSpec) -> np.ndarray:
    """Lift the first measurement through the pseudoinverse of H."""
    H = jacobian_h(spec)
    return np.linalg.pinv(H) @ np.asarray(y, dtype=float)


def run_filter(
    traj: Trajectory,
    theta: NoiseParams,
    x0: np.ndarray | None = None,
    sigma0: np.ndarray | None = None,
) -> list[StateEstimate]:
    """Sequential predict/update over a trajectory with fixed noise parameters.

    With theta built from the true generating covariances this is the oracle
    baseline; with the nominal covariances it is the drifted fixed filter.
    """
    if len(traj) < 1:
        raise ValueError("trajectory is empty")
    spec = traj.spec
    if x0 is None:
        x0 = traj.x0 if traj.x0 is not None else initial_estimate_from_measurement(
            traj.measurements[0], spec
        )
    if sigma0 is None:
        sigma0 = np.eye(spec.state_dim)
    est = StateEstimate(np.asarray(x0, dtype=float), np.asarray(sigma0, dtype=float))
    out: list[StateEstimate] = []
    for t in range(len(traj)):
        vc = float(traj.vc[t]) if traj.vc is not None else None
        prior = predict(est, theta, spec, vc)
        pm = predictive_measurement(prior, theta, spec)
        est = update(prior, pm, traj.measurements[t], spec)
        out.append(est)
    return out
