"""State-space models and noisy trajectory generation.

Three model variants are supported:

* ``lorenz`` -- chaotic 3-state attractor discretized through the matrix
  exponential of a state-dependent system matrix, identity measurement.
* ``nclt_kinematic`` -- planar robot with state (x, y, vx, vy, heading)
  driven by an exogenous speed command, GPS-style position measurement.
* ``linear_1d`` -- scalar linear-Gaussian model, the workhorse for oracle
  comparisons against closed-form Kalman results.

All randomness flows through ``numpy.random.default_rng`` seeded per call, so
identical inputs reproduce bit-identical trajectories.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

LORENZ = "lorenz"
NCLT = "nclt_kinematic"
LINEAR_1D = "linear_1d"

_MODEL_DIMS = {LORENZ: (3, 3), NCLT: (5, 2), LINEAR_1D: (1, 1)}

CSV_MAGIC = "# otakf-trajectory v1"


@dataclass(frozen=True)
class SsmSpec:
    """Named model variant plus its dimensions and constants."""

    dynamics: str
    state_dim: int
    meas_dim: int
    dt: float
    taylor_order: int = 10       # lorenz matrix-exponential truncation
    a: float = 1.0               # linear_1d transition coefficient

    def __post_init__(self):
        if self.dynamics not in _MODEL_DIMS:
            raise ValueError(f"unknown dynamics variant {self.dynamics!r}")
        n, m = _MODEL_DIMS[self.dynamics]
        if (self.state_dim, self.meas_dim) != (n, m):
            raise ValueError(
                f"{self.dynamics} requires dims {(n, m)}, "
                f"got {(self.state_dim, self.meas_dim)}"
            )
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.taylor_order < 1:
            raise ValueError("taylor_order must be >= 1")


def lorenz_spec(dt: float = 0.02, taylor_order: int = 10) -> SsmSpec:
    return SsmSpec(LORENZ, 3, 3, dt, taylor_order=taylor_order)


def nclt_spec(dt: float = 1.0) -> SsmSpec:
    return SsmSpec(NCLT, 5, 2, dt)


def linear1d_spec(a: float = 1.0, dt: float = 1.0) -> SsmSpec:
    return SsmSpec(LINEAR_1D, 1, 1, dt, a=a)


def _check_symmetric(M: np.ndarray, tol: float, what: str) -> None:
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{what} must be a square matrix, got shape {M.shape}")
    if np.max(np.abs(M - M.T)) > tol:
        raise ValueError(f"{what} is not symmetric within {tol}")


@dataclass(frozen=True)
class CovariancePair:
    """Process covariance Q (n x n) and measurement covariance R (m x m)."""

    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q = np.array(self.Q, dtype=float)
        R = np.array(self.R, dtype=float)
        for M, name in ((Q, "Q"), (R, "R")):
            _check_symmetric(M, 1e-10, name)
            eigs = np.linalg.eigvalsh(M)
            floor = -1e-10 * max(1.0, float(np.max(np.abs(eigs))) if eigs.size else 1.0)
            if eigs.size and eigs.min() < floor:
                raise ValueError(f"{name} is not positive semidefinite (min eig {eigs.min():.3e})")
            M.setflags(write=False)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)


def covariance_from_ratio(nu_db: float, inv_r2_db: float, spec: SsmSpec) -> CovariancePair:
    """Isotropic (Q, R) from the noise-variance ratio nu = q^2/r^2 in dB.

    ``inv_r2_db`` is 10*log10(1/r^2); r^2 = 10^(-inv_r2_db/10) and
    q^2 = r^2 * 10^(nu_db/10).
    """
    r2 = 10.0 ** (-inv_r2_db / 10.0)
    q2 = r2 * 10.0 ** (nu_db / 10.0)
    return CovariancePair(q2 * np.eye(spec.state_dim), r2 * np.eye(spec.meas_dim))


@dataclass(frozen=True)
class Trajectory:
    """Simulated ground-truth states and noisy measurements.

    ``states[t]`` is x_{t+1} in one-based time, i.e. the trajectory covers
    t = 1..T starting from the (stored) initial state ``x0``. ``vc`` carries
    the per-step speed command for the NCLT variant and is None otherwise.
    """

    states: np.ndarray
    measurements: np.ndarray
    seed: int | None
    spec: SsmSpec
    true_cov: CovariancePair | None
    x0: np.ndarray | None = None
    vc: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if len(self.states) != len(self.measurements):
            raise ValueError("states and measurements must have equal length")
        for name in ("states", "measurements", "x0", "vc"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=float)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.states)


def lorenz_system_matrix(x) -> np.ndarray:
    """State-dependent system matrix of the discretized attractor."""
    x1 = x[0]
    return np.array(
        [[-10.0, 10.0, 0.0],
         [28.0, -1.0, -x1],
         [0.0, x1, -8.0 / 3.0]],
        dtype=np.result_type(np.asarray(x).dtype, float),
    )


def _taylor_expm(M: np.ndarray, order: int) -> np.ndarray:
    """Truncated Taylor series of the matrix exponential (terms 0..order)."""
    P = np.eye(M.shape[0], dtype=M.dtype)
    term = np.eye(M.shape[0], dtype=M.dtype)
    for k in range(1, order + 1):
        term = term @ M / k
        P = P + term
    return P


def lorenz_transition(x, dt: float, taylor_order: int = 10) -> np.ndarray:
    """One deterministic step of the discretized attractor: expm(A(x)*dt) @ x."""
    if taylor_order < 1:
        raise ValueError("taylor_order must be >= 1")
    x = np.asarray(x)
    if x.shape != (3,):
        raise ValueError(f"lorenz state must be a 3-vector, got shape {x.shape}")
    if not np.all(np.isfinite(x.real)) or (np.iscomplexobj(x) and not np.all(np.isfinite(x.imag))):
        raise ValueError("lorenz state has non-finite components")
    M = lorenz_system_matrix(x) * dt
    return _taylor_expm(M, taylor_order) @ x


def nclt_transition(x, v_c: float, dt: float) -> np.ndarray:
    """Kinematic step for the 5-state (x, y, vx, vy, heading) robot model."""
    x = np.asarray(x, dtype=float)
    if x.shape != (5,):
        raise ValueError(f"nclt state must be a 5-vector, got shape {x.shape}")
    theta = x[4]
    c, s = np.cos(theta), np.sin(theta)
    return np.array(
        [x[0] + dt * v_c * c,
         x[1] + dt * v_c * s,
         v_c * c,
         v_c * s,
         theta]
    )


def transition(x, spec: SsmSpec, vc: float | None = None) -> np.ndarray:
    """Deterministic state transition f(x) for any variant."""
    if spec.dynamics == LORENZ:
        return lorenz_transition(x, spec.dt, spec.taylor_order)
    if spec.dynamics == NCLT:
        if vc is None:
            raise ValueError("nclt transition requires a speed command vc")
        return nclt_transition(x, vc, spec.dt)
    return spec.a * np.asarray(x, dtype=float)


def measurement_matrix(spec: SsmSpec) -> np.ndarray:
    """Linear measurement matrix H (all variants measure linearly)."""
    if spec.dynamics == NCLT:
        H = np.zeros((2, 5))
        H[0, 0] = 1.0
        H[1, 1] = 1.0
        return H
    return np.eye(spec.meas_dim)


def measure(x, spec: SsmSpec) -> np.ndarray:
    """Noise-free measurement h(x)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.state_dim,):
        raise ValueError(f"state must be a {spec.state_dim}-vector, got shape {x.shape}")
    if spec.dynamics == NCLT:
        return x[:2].copy()
    return x.copy()


def _psd_factor(M: np.ndarray) -> np.ndarray:
    """Factor L with L @ L.T = M for symmetric PSD M (possibly singular)."""
    if not np.any(M):
        return np.zeros_like(M)
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(M)
        return V * np.sqrt(np.clip(w, 0.0, None))


def default_initial_state(spec: SsmSpec, burn_in: int = 100) -> np.ndarray:
    """Default x0 per variant; the lorenz value is a noise-free burn-in from (1,1,1)."""
    if spec.dynamics == LORENZ:
        x = np.ones(3)
        for _ in range(burn_in):
            x = lorenz_transition(x, spec.dt, spec.taylor_order)
        return x
    return np.zeros(spec.state_dim)


def default_speed_profile(T: int, levels=(1.5, 0.5, 2.0, 1.0), segment: int = 50) -> np.ndarray:
    """Piecewise-constant speed-command sequence for synthetic NCLT runs."""
    idx = (np.arange(T) // segment) % len(levels)
    return np.asarray(levels, dtype=float)[idx]


def simulate(
    spec: SsmSpec,
    cov: CovariancePair,
    x0: np.ndarray | None,
    T: int,
    seed: int,
    vc: np.ndarray | None = None,
) -> Trajectory:
    """Roll out x_t = f(x_{t-1}) + w_t, y_t = h(x_t) + v_t for t = 1..T."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if x0 is None:
        x0 = default_initial_state(spec)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (spec.state_dim,):
        raise ValueError(f"x0 must be a {spec.state_dim}-vector")
    if spec.dynamics == NCLT:
        vc = default_speed_profile(T) if vc is None else np.asarray(vc, dtype=float)
        if vc.shape != (T,):
            raise ValueError("vc must have one entry per step")
    else:
        vc = None

    rng = np.random.default_rng(seed)
    Lq = _psd_factor(cov.Q)
    Lr = _psd_factor(cov.R)
    states = np.empty((T, spec.state_dim))
    meas = np.empty((T, spec.meas_dim))
    x = x0
    for t in range(T):
        w = Lq @ rng.standard_normal(spec.state_dim)
        v = Lr @ rng.standard_normal(spec.meas_dim)
        x = transition(x, spec, vc[t] if vc is not None else None) + w
        states[t] = x
        meas[t] = measure(x, spec) + v
    return Trajectory(states, meas, seed, spec, cov, x0=x0, vc=vc)


# ---------------------------------------------------------------------------
# CSV round trip: header `t,x1..xn,y1..ym[,vc]`, one row per step, shortest
# round-trip float formatting.  A `#`-prefixed preamble carries the model and
# generation metadata so re-ingested files reproduce the in-memory pipeline.
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def _spec_to_meta(spec: SsmSpec) -> dict[str, str]:
    meta = {"model": spec.dynamics, "dt": _fmt(spec.dt)}
    if spec.dynamics == LORENZ:
        meta["taylor_order"] = str(spec.taylor_order)
    if spec.dynamics == LINEAR_1D:
        meta["a"] = _fmt(spec.a)
    return meta


def _spec_from_meta(meta: dict[str, str]) -> SsmSpec:
    name = meta["model"]
    n, m = _MODEL_DIMS[name]
    return SsmSpec(
        name, n, m,
        dt=float(meta["dt"]),
        taylor_order=int(meta.get("taylor_order", 10)),
        a=float(meta.get("a", 1.0)),
    )


def write_trajectory_csv(traj: Trajectory, path) -> None:
    buf = io.StringIO()
    print(CSV_MAGIC, file=buf)
    meta = _spec_to_meta(traj.spec)
    if traj.seed is not None:
        meta["seed"] = str(traj.seed)
    if traj.x0 is not None:
        meta["x0"] = ",".join(_fmt(v) for v in traj.x0)
    if traj.true_cov is not None:
        meta["q_cov"] = ",".join(_fmt(v) for v in traj.true_cov.Q.ravel())
        meta["r_cov"] = ",".join(_fmt(v) for v in traj.true_cov.R.ravel())
    for k, v in meta.items():
        print(f"# {k}={v}", file=buf)
    n, m = traj.spec.state_dim, traj.spec.meas_dim
    cols = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"y{i + 1}" for i in range(m)]
    if traj.vc is not None:
        cols.append("vc")
    print(",".join(cols), file=buf)
    for t in range(len(traj)):
        row = [str(t + 1)]
        row += [_fmt(v) for v in traj.states[t]]
        row += [_fmt(v) for v in traj.measurements[t]]
        if traj.vc is not None:
            row.append(_fmt(traj.vc[t]))
        print(",".join(row), file=buf)
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def read_trajectory_csv(path, spec: SsmSpec | None = None) -> Trajectory:
    meta: dict[str, str] = {}
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    body_start = 0
    for i, ln in enumerate(lines):
        if ln.startswith("#"):
            stripped = ln.lstrip("# ").strip()
            if "=" in stripped:
                k, v = stripped.split("=", 1)
                meta[k.strip()] = v.strip()
            body_start = i + 1
        else:
            break
    if body_start >= len(lines) or not lines[body_start]:
        raise ValueError(f"{path}: missing header row")
    header = lines[body_start].split(",")
    if spec is None:
        if "model" not in meta:
            raise ValueError(f"{path}: no model metadata and no spec provided")
        spec = _spec_from_meta(meta)
    n, m = spec.state_dim, spec.meas_dim
    has_vc = header[-1] == "vc"
    expected = 1 + n + m + (1 if has_vc else 0)
    if len(header) != expected:
        raise ValueError(
            f"{path}: header has {len(header)} columns, expected {expected} for {spec.dynamics}"
        )
    rows = []
    for lineno, ln in enumerate(lines[body_start + 1:], start=body_start + 2):
        if not ln.strip():
            continue
        parts = ln.split(",")
        if len(parts) != expected:
            raise ValueError(f"{path}:{lineno}: expected {expected} fields, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts[1:]])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    data = np.asarray(rows)
    states = data[:, :n]
    meas = data[:, n:n + m]
    vc = data[:, -1] if has_vc else None
    x0 = None
    if "x0" in meta:
        x0 = np.array([float(v) for v in meta["x0"].split(",")])
    true_cov = None
    if "q_cov" in meta and "r_cov" in meta:
        Q = np.array([float(v) for v in meta["q_cov"].split(",")]).reshape(n, n)
        R = np.array([float(v) for v in meta["r_cov"].split(",")]).reshape(m, m)
        true_cov = CovariancePair(Q, R)
    seed = int(meta["seed"]) if "seed" in meta else None
    return Trajectory(states, meas, seed, spec, true_cov, x0=x0, vc=vc)
