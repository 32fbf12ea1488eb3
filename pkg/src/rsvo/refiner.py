"""Error-state Levenberg-Marquardt refinement of the rolling-shutter state.

The optimiser searches over an 18-dimensional perturbation of the nominal
state: a local rotation increment, an additive translation increment
(followed by renormalisation, since scale is unobservable) and additive
velocity increments. Accepted steps are folded back into the nominal state
immediately, so every Jacobian is taken at a zero error state.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .epipolar import NominalState, as_points
from .errors import NonFiniteJacobian, NumericalFailure, TooFewPoints
from .geometry import CameraIntrinsics

VELOCITY_PRIOR = 1e-8


@dataclass(frozen=True)
class ErrorState:
    dtheta_gs: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dt_gs: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dw_prev: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dv_prev: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dw_cur: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dv_cur: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("dtheta_gs", "dt_gs", "dw_prev", "dv_prev", "dw_cur", "dv_cur"):
            a = np.array(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, a)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.dtheta_gs, self.dt_gs, self.dw_prev, self.dv_prev,
                               self.dw_cur, self.dv_cur])

    @classmethod
    def from_vector(cls, d) -> ErrorState:
        d = np.asarray(d, dtype=float)
        if d.shape != (18,):
            raise ValueError("error state must have exactly 18 entries")
        return cls(*(d[3 * k:3 * k + 3] for k in range(6)))

    @classmethod
    def zero(cls) -> ErrorState:
        return cls()


@dataclass(frozen=True)
class LmConfig:
    max_iterations: int = 50
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.1
    cost_tolerance: float = 1e-10
    step_tolerance: float = 1e-10

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not (self.initial_damping > 0 and self.cost_tolerance > 0 and self.step_tolerance > 0):
            raise ValueError("damping and tolerances must be positive")
        if not (self.damping_up > 1.0 > self.damping_down > 0.0):
            raise ValueError("need damping_up > 1 > damping_down > 0")


@dataclass(frozen=True)
class LmResult:
    state: NominalState
    cost: float
    iterations: int
    converged: bool
    cost_history: np.ndarray  # cost after each accepted step, initial cost first


def _errvec(err) -> np.ndarray:
    if err is None:
        return np.zeros(18)
    if isinstance(err, ErrorState):
        return err.to_vector()
    return ErrorState.from_vector(err).to_vector()


def apply_error_state(nominal: NominalState, err) -> NominalState:
    out = np.empty(19)
    _kernels.apply_error(nominal.to_vector(), _errvec(err), out)
    return NominalState.from_vector(out)


def residual_vector(nominal: NominalState, err, corrs, K: CameraIntrinsics, tau: float | None = None):
    """Signed Sampson distances (pixels) at ``nominal`` perturbed by ``err``.

    Returns ``(residuals, degenerate_mask)``; degenerate entries hold the
    sentinel ``1e6``.
    """
    pts = as_points(corrs)
    if len(pts) < 1:
        raise TooFewPoints("need at least one correspondence")
    tau = K.tau if tau is None else tau
    x = np.empty(19)
    _kernels.apply_error(nominal.to_vector(), _errvec(err), x)
    r = np.empty(len(pts))
    _kernels.residuals(x, pts, K.K_inv, tau, r)
    return r, r >= _kernels.SENTINEL


def numeric_jacobian(nominal: NominalState, err, corrs, K: CameraIntrinsics,
                     tau: float | None = None) -> np.ndarray:
    """Central-difference Jacobian (N x 18) of ``residual_vector`` w.r.t. the error state."""
    pts = as_points(corrs)
    tau = K.tau if tau is None else tau
    J = np.empty((len(pts), 18))
    _kernels.jacobian(nominal.to_vector(), _errvec(err), pts, K.K_inv, tau, J)
    if not np.all(np.isfinite(J)):
        raise NonFiniteJacobian("Jacobian has non-finite entries")
    return J


def lm_refine(initial: NominalState, corrs, K: CameraIntrinsics, tau: float | None = None,
              cfg: LmConfig = LmConfig(), freeze_velocities: bool = False) -> LmResult:
    """Refine ``initial`` on ``corrs``; with ``freeze_velocities`` only the pose moves."""
    pts = as_points(corrs)
    if len(pts) < 9:
        raise TooFewPoints(f"refinement needs at least 9 correspondences, got {len(pts)}")
    tau = K.tau if tau is None else tau
    x0 = initial.with_unit_translation().to_vector()
    trace = np.empty(cfg.max_iterations + 2)
    x, cost, its, conv, status, n_acc = _kernels.lm(
        x0, pts, K.K_inv, tau, cfg.max_iterations, cfg.initial_damping, cfg.damping_up,
        cfg.damping_down, cfg.cost_tolerance, cfg.step_tolerance, VELOCITY_PRIOR, trace,
        6 if freeze_velocities else 18)
    if status in (_kernels.STATUS_SINGULAR, _kernels.STATUS_NONFINITE):
        raise NumericalFailure("normal equations could not be solved")
    return LmResult(NominalState.from_vector(x), float(cost), int(its), bool(conv),
                    trace[:n_acc + 1].copy())
