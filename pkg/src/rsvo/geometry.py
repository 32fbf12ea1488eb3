"""Camera model, rotations and the row-dependent rolling-shutter transform.

Conventions
-----------
* Image points are ``(c, r)`` = (column, row) in pixels; row 0 is the top row
  and the instantaneous velocities are anchored there.
* A ``RigidTransform`` used as a camera pose maps world coordinates into the
  camera: ``X_cam = R @ X_world + t``.
* The rolling-shutter transform of row ``r`` maps global-shutter camera
  coordinates to the coordinates seen by that row::

      X_rs = (I + r*tau*[w]x) @ X_gs + r*tau*v

  The rotation part is the first-order linearisation and is deliberately not
  re-orthonormalised.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import NoConvergence, NonPositiveDepth, SingularIntrinsics

FIXED_POINT_TOL = 1e-8
FIXED_POINT_MAX_ITER = 50


def skew_matrix(a) -> np.ndarray:
    """Cross-product matrix: ``skew_matrix(a) @ b == np.cross(a, b)``."""
    ax, ay, az = np.asarray(a, dtype=float)
    return np.array([[0.0, -az, ay],
                     [az, 0.0, -ax],
                     [-ay, ax, 0.0]])


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

class ImagePoint(NamedTuple):
    c: float
    r: float


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0
    tau: float = 5e-5
    n_rows: int = 720
    n_cols: int = 1280

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.n_rows < 2 or self.n_cols < 2:
            raise ValueError("image must have at least 2 rows and 2 columns")
        K = self.K
        if not np.all(np.isfinite(K)) or abs(np.linalg.det(K)) < 1e-300:
            raise SingularIntrinsics("intrinsic matrix is not invertible")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, self.skew, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        fx, fy, cx, cy, s = self.fx, self.fy, self.cx, self.cy, self.skew
        return np.array([[1.0 / fx, -s / (fx * fy), (s * cy - cx * fy) / (fx * fy)],
                         [0.0, 1.0 / fy, -cy / fy],
                         [0.0, 0.0, 1.0]])

    @classmethod
    def identity(cls, tau: float = 5e-5, n_rows: int = 720, n_cols: int = 1280):
        return cls(1.0, 1.0, 0.0, 0.0, 0.0, tau, n_rows, n_cols)


@dataclass(frozen=True)
class UnitQuaternion:
    """Hamilton quaternion, scalar first. Normalised on construction."""

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        n = np.sqrt(self.w ** 2 + self.x ** 2 + self.y ** 2 + self.z ** 2)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("quaternion must have finite non-zero norm")
        for name in "wxyz":
            object.__setattr__(self, name, float(getattr(self, name) / n))

    @classmethod
    def from_array(cls, q) -> UnitQuaternion:
        w, x, y, z = np.asarray(q, dtype=float)
        return cls(w, x, y, z)

    @classmethod
    def from_rotvec(cls, rv) -> UnitQuaternion:
        rv = np.asarray(rv, dtype=float)
        angle = np.linalg.norm(rv)
        if angle < 1e-12:
            return cls(1.0, *(0.5 * rv))
        axis = rv / angle
        return cls(np.cos(angle / 2), *(np.sin(angle / 2) * axis))

    @classmethod
    def from_matrix(cls, R) -> UnitQuaternion:
        R = np.asarray(R, dtype=float)
        tr = np.trace(R)
        # Shepperd's method: pivot on the largest diagonal term.
        if tr > max(R[0, 0], R[1, 1], R[2, 2]):
            s = 2.0 * np.sqrt(1.0 + tr)
            q = (0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s)
        elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
            s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
            q = ((R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s)
        elif R[1, 1] >= R[2, 2]:
            s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
            q = ((R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s)
        else:
            s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
            q = ((R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s)
        if q[0] < 0:
            q = tuple(-c for c in q)
        return cls(*q)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def to_matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def conjugate(self) -> UnitQuaternion:
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: UnitQuaternion) -> UnitQuaternion:
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return UnitQuaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def rotate(self, v) -> np.ndarray:
        return self.to_matrix() @ np.asarray(v, dtype=float)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-10 or abs(np.linalg.det(R) - 1.0) > 1e-10:
            raise ValueError("rotation is not a proper orthonormal matrix")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_matrix(cls, T) -> RigidTransform:
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_quaternion(cls, q: UnitQuaternion, t) -> RigidTransform:
        return cls(q.to_matrix(), t)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def apply(self, X) -> np.ndarray:
        """Transform one ``(3,)`` point or an ``(N, 3)`` array of points."""
        X = np.asarray(X, dtype=float)
        return X @ self.rotation.T + self.translation

    def scaled(self, scale: float) -> RigidTransform:
        return RigidTransform(self.rotation, scale * self.translation)

    @property
    def quaternion(self) -> UnitQuaternion:
        return UnitQuaternion.from_matrix(self.rotation)


@dataclass(frozen=True)
class InstantaneousMotion:
    w: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        w = np.array(self.w, dtype=float).reshape(3)
        v = np.array(self.v, dtype=float).reshape(3)
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(v))):
            raise ValueError("velocities must be finite")
        w.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "v", v)

    @classmethod
    def zero(cls) -> InstantaneousMotion:
        return cls()


# ---------------------------------------------------------------------------
# Rolling-shutter transform
# ---------------------------------------------------------------------------

def rs_rotation(row: float, motion: InstantaneousMotion, tau: float) -> np.ndarray:
    return np.eye(3) + (row * tau) * skew_matrix(motion.w)


def rs_translation(row: float, motion: InstantaneousMotion, tau: float) -> np.ndarray:
    return (row * tau) * np.asarray(motion.v, dtype=float)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def _dehomogenize_world(X_world) -> np.ndarray:
    X = np.asarray(X_world, dtype=float)
    if X.shape[-1] == 4:
        return X[..., :3] / X[..., 3:4]
    return X


def project_gs(X_world, pose: RigidTransform, K: CameraIntrinsics) -> ImagePoint:
    Xc = pose.apply(_dehomogenize_world(X_world))
    if not Xc[2] > 0:
        raise NonPositiveDepth(f"point depth {Xc[2]:.3g} is not positive")
    m = K.K @ Xc
    return ImagePoint(m[0] / m[2], m[1] / m[2])


def project_rs(X_world, pose: RigidTransform, motion: InstantaneousMotion,
               K: CameraIntrinsics, tol: float = FIXED_POINT_TOL,
               max_iter: int = FIXED_POINT_MAX_ITER) -> ImagePoint:
    """Rolling-shutter projection of one world point.

    The exposure row is unknown a priori, so the row equation
    ``r = row(K (R_rs(r) X_gs + t_rs(r)))`` is solved by fixed-point
    iteration starting from the global-shutter row.
    """
    X_gs = pose.apply(_dehomogenize_world(X_world))
    if not X_gs[2] > 0:
        raise NonPositiveDepth(f"point depth {X_gs[2]:.3g} is not positive")
    Km = K.K
    m = Km @ X_gs
    r = m[1] / m[2]
    for _ in range(max_iter):
        X_rs = rs_rotation(r, motion, K.tau) @ X_gs + rs_translation(r, motion, K.tau)
        if not X_rs[2] > 0:
            raise NonPositiveDepth("rolling-shutter depth is not positive")
        m = Km @ X_rs
        r_new = m[1] / m[2]
        if abs(r_new - r) <= tol:
            X_rs = rs_rotation(r_new, motion, K.tau) @ X_gs + rs_translation(r_new, motion, K.tau)
            m = Km @ X_rs
            return ImagePoint(m[0] / m[2], m[1] / m[2])
        r = r_new
    raise NoConvergence(f"row fixed point did not settle in {max_iter} iterations")


def project_rs_many(X_cam_gs: np.ndarray, motion: InstantaneousMotion, K: CameraIntrinsics,
                    tol: float = FIXED_POINT_TOL, max_iter: int = FIXED_POINT_MAX_ITER):
    """Vectorised rolling-shutter projection of GS camera-frame points.

    Returns ``(uv, ok)``: ``uv`` is ``(N, 2)`` pixel coordinates and ``ok``
    flags points with positive depth whose row iteration converged.
    """
    X = np.asarray(X_cam_gs, dtype=float)
    Km = K.K
    n = X.shape[0]
    ok = X[:, 2] > 0
    Xs = np.where(ok[:, None], X, np.array([0.0, 0.0, 1.0]))
    m = Xs @ Km.T
    r = m[:, 1] / m[:, 2]
    W = skew_matrix(motion.w)
    v = np.asarray(motion.v)
    done = np.zeros(n, dtype=bool)
    uv = np.full((n, 2), np.nan)
    for _ in range(max_iter + 1):
        s = (r * K.tau)[:, None]
        X_rs = Xs + s * (Xs @ W.T) + s * v
        depth_ok = X_rs[:, 2] > 0
        ok &= depth_ok
        m = X_rs @ Km.T
        with np.errstate(divide="ignore", invalid="ignore"):
            r_new = np.where(depth_ok, m[:, 1] / m[:, 2], r)
        settled = ok & ~done & (np.abs(r_new - r) <= tol)
        if np.any(settled):
            s = (r_new[settled] * K.tau)[:, None]
            Xf = Xs[settled]
            X_rs = Xf + s * (Xf @ W.T) + s * v
            mf = X_rs @ Km.T
            uv[settled] = mf[:, :2] / mf[:, 2:3]
            ok[settled] &= X_rs[:, 2] > 0
            done |= settled
        if np.all(done | ~ok):
            break
        r = np.where(done, r, r_new)
    ok &= done
    uv[~ok] = np.nan
    return uv, ok
