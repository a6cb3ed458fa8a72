"""Constant-velocity Kalman filter over the 11-dim object state.

State layout: (x, y, z, a, l, w, h, v_x, v_y, v_z, v_a) with `a` the box
yaw. Observations are the first seven components (a detected box). The
motion model moves position and yaw at their velocity components; extents
carry no velocity and only drift through process noise.

predict/update are pure functions returning new TrackState values, so
multiple sequences can be filtered concurrently without shared state.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import Box7, Detection, wrap_angle

STATE_DIM = 11
OBS_DIM = 7
ANGLE = 3  # index of yaw in both state and observation

# Measurement matrix: observation = first 7 state components.
H = np.zeros((OBS_DIM, STATE_DIM))
H[:OBS_DIM, :OBS_DIM] = np.eye(OBS_DIM)
H.setflags(write=False)

_SYM_TOL = 1e-9


class NumericalError(ArithmeticError):
    """Raised when a required matrix operation is numerically unusable."""


def _default_q() -> np.ndarray:
    q = np.full(STATE_DIM, 1e-2)
    q[OBS_DIM:] = 1e-1
    return q


def _default_r() -> np.ndarray:
    return np.full(OBS_DIM, 1e-1)


def _default_p0() -> np.ndarray:
    p = np.ones(STATE_DIM)
    p[OBS_DIM:] = 10.0
    return p


@dataclass(frozen=True, eq=False)
class NoiseConfig:
    """Diagonal process / observation / initial covariance variances."""

    q_diag: np.ndarray = field(default_factory=_default_q)
    r_diag: np.ndarray = field(default_factory=_default_r)
    p0_diag: np.ndarray = field(default_factory=_default_p0)

    def __post_init__(self):
        for name, dim in (("q_diag", STATE_DIM), ("r_diag", OBS_DIM), ("p0_diag", STATE_DIM)):
            v = np.asarray(getattr(self, name), dtype=np.float64).reshape(dim).copy()
            if not np.isfinite(v).all() or (v <= 0).any():
                raise ValueError(f"{name} entries must be finite and > 0")
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    def __eq__(self, other):
        if not isinstance(other, NoiseConfig):
            return NotImplemented
        return (
            np.array_equal(self.q_diag, other.q_diag)
            and np.array_equal(self.r_diag, other.r_diag)
            and np.array_equal(self.p0_diag, other.p0_diag)
        )


@dataclass(frozen=True)
class TrackState:
    """Kalman mean/covariance plus track bookkeeping.

    Invariants checked at construction: covariance symmetric to 1e-9,
    positive definite (Cholesky succeeds), yaw component in [-pi, pi).
    """

    mean: np.ndarray
    cov: np.ndarray
    track_id: int
    age: int = 1
    misses: int = 0

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(STATE_DIM).copy()
        cov = np.asarray(self.cov, dtype=np.float64).reshape(STATE_DIM, STATE_DIM).copy()
        asym = float(np.abs(cov - cov.T).max())
        if asym >= _SYM_TOL:
            raise ValueError(f"covariance asymmetry {asym:.3e} exceeds {_SYM_TOL}")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance is not positive definite") from exc
        if not (-math.pi <= mean[ANGLE] < math.pi):
            raise ValueError(f"state yaw {mean[ANGLE]} outside [-pi, pi)")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    def box(self) -> Box7:
        return Box7.from_array(self.mean[:OBS_DIM])


def init_track(det: Detection, cfg: NoiseConfig, track_id: int) -> TrackState:
    """Birth a track from a detection: velocities zero, cov = diag(p0)."""
    mean = np.zeros(STATE_DIM)
    mean[:OBS_DIM] = det.box.to_array()
    return TrackState(
        mean=mean,
        cov=np.diag(cfg.p0_diag),
        track_id=track_id,
        age=1,
        misses=0,
    )


def transition_matrix(dt: float) -> np.ndarray:
    f = np.eye(STATE_DIM)
    f[0, 7] = dt
    f[1, 8] = dt
    f[2, 9] = dt
    f[ANGLE, 10] = dt
    return f


def predict(s: TrackState, dt: float, cfg: NoiseConfig) -> TrackState:
    """Propagate mean/cov by dt seconds under the constant-velocity model."""
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    f = transition_matrix(dt)
    mean = f @ s.mean
    mean[ANGLE] = wrap_angle(mean[ANGLE])
    cov = f @ s.cov @ f.T + np.diag(cfg.q_diag)
    cov = 0.5 * (cov + cov.T)
    return replace(s, mean=mean, cov=cov)


def innovation(s: TrackState, obs: Box7, cfg: NoiseConfig):
    """Observation residual (yaw wrapped) and innovation covariance S."""
    r = obs.to_array() - s.mean[:OBS_DIM]
    r[ANGLE] = wrap_angle(r[ANGLE])
    S = s.cov[:OBS_DIM, :OBS_DIM] + np.diag(cfg.r_diag)
    S = 0.5 * (S + S.T)
    return r, S


def mahalanobis(s: TrackState, obs: Box7, cfg: NoiseConfig) -> float:
    """Square-root Mahalanobis distance sqrt(r' S^-1 r) between s and obs."""
    r, S = innovation(s, obs, cfg)
    try:
        c = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"innovation covariance is singular (cond={np.linalg.cond(S):.3e})"
        ) from exc
    y = np.linalg.solve(c, r)
    return float(math.sqrt(float(y @ y)))


def update(s: TrackState, obs: Box7, cfg: NoiseConfig) -> TrackState:
    """Standard Kalman correction; resets misses and increments age."""
    r, S = innovation(s, obs, cfg)
    try:
        # K = cov H' S^-1, using S symmetry: solve(S, H cov)' = cov H' S^-1
        k = np.linalg.solve(S, H @ s.cov).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"innovation covariance is singular (cond={np.linalg.cond(S):.3e})"
        ) from exc
    mean = s.mean + k @ r
    mean[ANGLE] = wrap_angle(mean[ANGLE])
    cov = (np.eye(STATE_DIM) - k @ H) @ s.cov
    cov = 0.5 * (cov + cov.T)
    return replace(s, mean=mean, cov=cov, age=s.age + 1, misses=0)


def mark_missed(s: TrackState) -> TrackState:
    """Bookkeeping for a frame with no associated detection."""
    return replace(s, age=s.age + 1, misses=s.misses + 1)
