"""Global- and rolling-shutter essential matrices and the Sampson residual.

Relative pose convention: ``(R_gs, t_gs)`` maps GS camera coordinates of the
previous frame into the current frame, ``X_cur = R_gs X_prev + t_gs``, so the
epipolar constraint reads ``x_cur^T E x_prev = 0`` with ``E = [t_gs]x R_gs``.

For rolling-shutter images each observation carries its own row transform.
Undoing the per-row transform of both frames and chaining through the GS
motion gives, with ``A = R_rs^{-1}`` (true inverse of the linearised rotation)::

    E_rs = A_cur^T [t_gs + A_cur t_rs,cur - R_gs A_prev t_rs,prev]x R_gs A_prev

which collapses to ``[t_gs]x R_gs`` when both velocity pairs vanish.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from .errors import DegenerateDenominator, DegenerateTranslation, NumericalFailure
from .geometry import (CameraIntrinsics, ImagePoint, InstantaneousMotion, RigidTransform,
                       UnitQuaternion, rs_rotation, rs_translation, skew_matrix)

DENOMINATOR_EPS = 1e-15


@dataclass(frozen=True)
class Correspondence:
    prev: ImagePoint
    cur: ImagePoint

    def __post_init__(self):
        object.__setattr__(self, "prev", ImagePoint(*map(float, self.prev)))
        object.__setattr__(self, "cur", ImagePoint(*map(float, self.cur)))
        if not np.all(np.isfinite([*self.prev, *self.cur])):
            raise ValueError("correspondence coordinates must be finite")


def as_points(corrs) -> np.ndarray:
    """Coerce correspondences to an ``(N, 4)`` array ``[c_prev, r_prev, c_cur, r_cur]``."""
    if isinstance(corrs, np.ndarray):
        pts = np.asarray(corrs, dtype=float)
    else:
        corrs = list(corrs)
        if corrs and isinstance(corrs[0], Correspondence):
            pts = np.array([[c.prev.c, c.prev.r, c.cur.c, c.cur.r] for c in corrs], dtype=float)
        else:
            pts = np.asarray(corrs, dtype=float)
    pts = pts.reshape(-1, 4)
    return np.ascontiguousarray(pts)


def to_correspondences(pts: np.ndarray) -> list[Correspondence]:
    return [Correspondence(ImagePoint(a, b), ImagePoint(c, d)) for a, b, c, d in as_points(pts)]


@dataclass(frozen=True)
class NominalState:
    """Relative GS pose plus the instantaneous motion of both frames."""

    q_gs: UnitQuaternion = field(default_factory=UnitQuaternion)
    t_gs: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    motion_prev: InstantaneousMotion = field(default_factory=InstantaneousMotion)
    motion_cur: InstantaneousMotion = field(default_factory=InstantaneousMotion)

    def __post_init__(self):
        t = np.array(self.t_gs, dtype=float).reshape(3)
        t.flags.writeable = False
        object.__setattr__(self, "t_gs", t)

    @property
    def R_gs(self) -> np.ndarray:
        return self.q_gs.to_matrix()

    @property
    def pose(self) -> RigidTransform:
        return RigidTransform(self.R_gs, self.t_gs)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.q_gs.as_array(), self.t_gs,
                               self.motion_prev.w, self.motion_prev.v,
                               self.motion_cur.w, self.motion_cur.v])

    @classmethod
    def from_vector(cls, x) -> NominalState:
        x = np.asarray(x, dtype=float)
        return cls(UnitQuaternion.from_array(x[0:4]), x[4:7],
                   InstantaneousMotion(x[7:10], x[10:13]),
                   InstantaneousMotion(x[13:16], x[16:19]))

    @classmethod
    def from_pose(cls, R, t) -> NominalState:
        """State with the given GS motion and zero velocities."""
        return cls(UnitQuaternion.from_matrix(R), t)

    def with_unit_translation(self) -> NominalState:
        n = np.linalg.norm(self.t_gs)
        if n < 1e-12:
            raise DegenerateTranslation("translation has zero length")
        return NominalState(self.q_gs, self.t_gs / n, self.motion_prev, self.motion_cur)


def gs_essential(R_gs, t_gs) -> np.ndarray:
    t = np.asarray(t_gs, dtype=float)
    if np.linalg.norm(t) < 1e-12:
        raise DegenerateTranslation("essential matrix of a zero translation is zero")
    return skew_matrix(t) @ np.asarray(R_gs, dtype=float)


def rs_essential(state: NominalState, row_prev: float, row_cur: float, tau: float) -> np.ndarray:
    """Per-correspondence rolling-shutter essential matrix (``x_cur^T E x_prev = 0``)."""
    R = state.R_gs
    A_prev = np.linalg.inv(rs_rotation(row_prev, state.motion_prev, tau))
    A_cur = np.linalg.inv(rs_rotation(row_cur, state.motion_cur, tau))
    t_prev = rs_translation(row_prev, state.motion_prev, tau)
    t_cur = rs_translation(row_cur, state.motion_cur, tau)
    T = state.t_gs + A_cur @ t_cur - R @ (A_prev @ t_prev)
    E = A_cur.T @ skew_matrix(T) @ R @ A_prev
    if not np.all(np.isfinite(E)):
        raise NumericalFailure("non-finite rolling-shutter essential matrix")
    return E


def rs_fundamental(state: NominalState, row_prev: float, row_cur: float, tau: float,
                   K: CameraIntrinsics) -> np.ndarray:
    Ki = K.K_inv
    return Ki.T @ rs_essential(state, row_prev, row_cur, tau) @ Ki


def rs_essential_many(state: NominalState, rows_prev, rows_cur, tau: float) -> np.ndarray:
    """Stack of ``rs_essential`` for arrays of rows, shape ``(N, 3, 3)``."""
    rows_prev = np.asarray(rows_prev, dtype=float)
    rows_cur = np.asarray(rows_cur, dtype=float)
    eye = np.eye(3)
    Wp = skew_matrix(state.motion_prev.w)
    Wc = skew_matrix(state.motion_cur.w)
    A_prev = np.linalg.inv(eye + (rows_prev * tau)[:, None, None] * Wp)
    A_cur = np.linalg.inv(eye + (rows_cur * tau)[:, None, None] * Wc)
    t_prev = (rows_prev * tau)[:, None] * state.motion_prev.v
    t_cur = (rows_cur * tau)[:, None] * state.motion_cur.v
    R = state.R_gs
    T = (state.t_gs + np.einsum("nij,nj->ni", A_cur, t_cur)
         - np.einsum("ij,njk,nk->ni", R, A_prev, t_prev))
    S = np.zeros((len(T), 3, 3))
    S[:, 0, 1], S[:, 0, 2] = -T[:, 2], T[:, 1]
    S[:, 1, 0], S[:, 1, 2] = T[:, 2], -T[:, 0]
    S[:, 2, 0], S[:, 2, 1] = -T[:, 1], T[:, 0]
    return np.einsum("nji,njk,kl,nlm->nim", A_cur, S, R, A_prev)


def _homog(c, r):
    return np.array([c, r, 1.0])


def sampson_residual(F, corr: Correspondence) -> float:
    """Squared Sampson distance (pixels^2) of one correspondence under ``F``.

    ``F`` follows ``m_cur^T F m_prev = 0``.
    """
    F = np.asarray(F, dtype=float)
    m_prev = _homog(*corr.prev)
    m_cur = _homog(*corr.cur)
    Fm = F @ m_prev
    Ftm = F.T @ m_cur
    grad = np.array([Fm[0], Fm[1], Ftm[0], Ftm[1]])
    if np.abs(grad).max() < DENOMINATOR_EPS:
        raise DegenerateDenominator("epipolar gradient vanishes at this correspondence")
    alg = m_cur @ Fm
    return float(alg * alg / (grad @ grad))


def sampson_signed(F, pts) -> np.ndarray:
    """Signed Sampson distances (pixels) of many correspondences under one ``F``.

    Degenerate gradients yield ``nan``.
    """
    pts = as_points(pts)
    F = np.asarray(F, dtype=float)
    ones = np.ones(len(pts))
    m_prev = np.column_stack([pts[:, 0], pts[:, 1], ones])
    m_cur = np.column_stack([pts[:, 2], pts[:, 3], ones])
    Fm = m_prev @ F.T
    Ftm = m_cur @ F
    alg = np.einsum("ni,ni->n", m_cur, Fm)
    grad = np.column_stack([Fm[:, :2], Ftm[:, :2]])
    den = np.einsum("ni,ni->n", grad, grad)
    out = np.full(len(pts), np.nan)
    good = np.abs(grad).max(axis=1) >= DENOMINATOR_EPS
    out[good] = alg[good] / np.sqrt(den[good])
    return out


def rs_sampson_signed(state: NominalState, pts, K: CameraIntrinsics) -> np.ndarray:
    """Signed Sampson distances with each correspondence's own ``F_rs``."""
    pts = as_points(pts)
    Ki = K.K_inv
    E = rs_essential_many(state, pts[:, 1], pts[:, 3], K.tau)
    F = np.einsum("ji,njk,kl->nil", Ki, E, Ki)
    ones = np.ones(len(pts))
    m_prev = np.column_stack([pts[:, 0], pts[:, 1], ones])
    m_cur = np.column_stack([pts[:, 2], pts[:, 3], ones])
    Fm = np.einsum("nij,nj->ni", F, m_prev)
    Ftm = np.einsum("nji,nj->ni", F, m_cur)
    alg = np.einsum("ni,ni->n", m_cur, Fm)
    grad = np.column_stack([Fm[:, :2], Ftm[:, :2]])
    den = np.einsum("ni,ni->n", grad, grad)
    out = np.full(len(pts), np.nan)
    good = np.abs(grad).max(axis=1) >= DENOMINATOR_EPS
    out[good] = alg[good] / np.sqrt(den[good])
    return out
