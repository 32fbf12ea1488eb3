"""Global-shutter relative pose: normalised 8-point DLT and essential decomposition.

Supplies the starting pose of the rolling-shutter refinement and doubles as
the conventional monocular VO baseline.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .epipolar import as_points
from .errors import (CheiralityAmbiguous, DegenerateCloud, DegenerateTranslation,
                     RankDeficientDesign)
from .geometry import CameraIntrinsics, UnitQuaternion

LOW_PARALLAX_DEG = 0.1


@dataclass(frozen=True)
class InitialPose:
    q: UnitQuaternion
    t: np.ndarray
    n_positive: int = 0
    low_parallax: bool = False

    def __post_init__(self):
        t = np.array(self.t, dtype=float).reshape(3)
        if abs(np.linalg.norm(t) - 1.0) > 1e-10:
            raise ValueError("initial translation must be a unit vector")
        object.__setattr__(self, "t", t)

    @property
    def R(self) -> np.ndarray:
        return self.q.to_matrix()


def normalize_points(points):
    """Hartley conditioning: zero centroid, RMS distance sqrt(2).

    Returns ``(normalized (N, 2), T)`` with ``T`` the 3x3 map applied to
    homogeneous originals.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    centroid = p.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((p - centroid) ** 2, axis=1)))
    if len(p) < 2 or rms < 1e-300 * max(1.0, np.abs(centroid).max()) or rms == 0.0:
        raise DegenerateCloud("points coincide; cannot condition")
    s = np.sqrt(2.0) / rms
    T = np.array([[s, 0.0, -s * centroid[0]],
                  [0.0, s, -s * centroid[1]],
                  [0.0, 0.0, 1.0]])
    return (p - centroid) * s, T


def _calibrated(pts, K: CameraIntrinsics):
    Ki = K.K_inv
    ones = np.ones(len(pts))
    x_prev = np.column_stack([pts[:, 0], pts[:, 1], ones]) @ Ki.T
    x_cur = np.column_stack([pts[:, 2], pts[:, 3], ones]) @ Ki.T
    return x_prev[:, :2] / x_prev[:, 2:], x_cur[:, :2] / x_cur[:, 2:]


def eight_point_essential(corrs, K: CameraIntrinsics) -> np.ndarray:
    """Essential matrix (``x_cur^T E x_prev = 0``), unit Frobenius norm."""
    pts = as_points(corrs)
    if len(pts) < 8:
        raise RankDeficientDesign(f"need at least 8 correspondences, got {len(pts)}")
    x_prev, x_cur = _calibrated(pts, K)
    p1, T1 = normalize_points(x_prev)
    p2, T2 = normalize_points(x_cur)
    A = np.column_stack([
        p2[:, 0] * p1[:, 0], p2[:, 0] * p1[:, 1], p2[:, 0],
        p2[:, 1] * p1[:, 0], p2[:, 1] * p1[:, 1], p2[:, 1],
        p1[:, 0], p1[:, 1], np.ones(len(pts)),
    ])
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    if len(s) < 8 or s[7] <= 1e-10 * s[0]:
        raise RankDeficientDesign("design matrix has rank below 8")
    En = Vt[-1].reshape(3, 3)
    E = T2.T @ En @ T1
    U, sv, Vt = np.linalg.svd(E)
    sigma = 0.5 * (sv[0] + sv[1])
    E = U @ np.diag([sigma, sigma, 0.0]) @ Vt
    return E / np.linalg.norm(E)


def triangulate_midpoint(x_prev, x_cur, R, t):
    """Midpoint triangulation in the previous camera frame.

    ``x_prev``/``x_cur`` are ``(N, 2)`` calibrated coordinates. Returns
    ``(X (N, 3), valid)``; rays that are parallel are marked invalid.
    """
    n = len(x_prev)
    d1 = np.column_stack([x_prev, np.ones(n)])
    d2 = np.column_stack([x_cur, np.ones(n)]) @ R  # R^T x_cur, row-wise
    C2 = -R.T @ t
    a = np.einsum("ni,ni->n", d1, d1)
    b = np.einsum("ni,ni->n", d1, d2)
    c = np.einsum("ni,ni->n", d2, d2)
    e = d1 @ C2
    f = d2 @ C2
    det = b * b - a * c
    valid = np.abs(det) > 1e-14 * a * c
    det = np.where(valid, det, 1.0)
    lam1 = (b * f - c * e) / det
    lam2 = (a * f - b * e) / det
    X = 0.5 * (lam1[:, None] * d1 + (C2 + lam2[:, None] * d2))
    return X, valid


def parallax_deg(x_prev, x_cur, R) -> np.ndarray:
    n = len(x_prev)
    d1 = np.column_stack([x_prev, np.ones(n)])
    d2 = np.column_stack([x_cur, np.ones(n)]) @ R
    cosang = np.einsum("ni,ni->n", d1, d2) / (np.linalg.norm(d1, axis=1) * np.linalg.norm(d2, axis=1))
    return np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))


def essential_candidates(E):
    U, _, Vt = np.linalg.svd(np.asarray(E, dtype=float))
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    Ra = U @ W @ Vt
    Rb = U @ W.T @ Vt
    return [(Ra, t), (Ra, -t), (Rb, t), (Rb, -t)]


def decompose_essential(E, corrs, K: CameraIntrinsics, require_majority: bool = True) -> InitialPose:
    """Pick the ``(R, t)`` candidate with the most points in front of both cameras.

    With ``require_majority`` the winner must have more than half of the
    points in front, otherwise ``CheiralityAmbiguous`` is raised; without it
    the best-voted candidate is returned as a starting guess.
    """
    pts = as_points(corrs)
    E = np.asarray(E, dtype=float)
    if np.linalg.norm(E) < 1e-12:
        raise DegenerateTranslation("essential matrix is zero")
    x_prev, x_cur = _calibrated(pts, K)
    best = None
    for R, t in essential_candidates(E):
        X, valid = triangulate_midpoint(x_prev, x_cur, R, t)
        z_cur = X @ R[2] + t[2]
        n_pos = int(np.count_nonzero(valid & (X[:, 2] > 0) & (z_cur > 0)))
        if best is None or n_pos > best[0]:
            best = (n_pos, R, t)
    n_pos, R, t = best
    if require_majority and 2 * n_pos <= len(pts):
        raise CheiralityAmbiguous(
            f"best candidate has only {n_pos}/{len(pts)} points in front of both cameras")
    low = bool(np.median(parallax_deg(x_prev, x_cur, R)) < LOW_PARALLAX_DEG)
    return InitialPose(UnitQuaternion.from_matrix(R), t / np.linalg.norm(t), n_pos, low)


def initial_pose(corrs, K: CameraIntrinsics, require_majority: bool = True) -> InitialPose:
    """8-point essential on all correspondences followed by decomposition."""
    pts = as_points(corrs)
    return decompose_essential(eight_point_essential(pts, K), pts, K, require_majority)
