"""Robust two-view estimation: rolling-shutter RANSAC + LM, and the 8-point baseline.

``mrsvo_estimate`` starts every hypothesis from the same global-shutter
initial pose with zero velocities, refines it on a random subset with
``lm_refine``'s kernel and scores it on the full set. The unrefined
initialisation is always scored first as hypothesis 0.

Epipolar fitting cannot tell ``(t, v)`` from ``(-t, -v)``, and under strong
distortion the global-shutter cheirality vote used for the initial pose is
close to a coin flip between a pose and its twisted-pair partner. The
winning state is therefore checked by triangulating the undistorted rays;
if most points land behind a camera the search is repeated from the
twisted-pair partner of the initial pose and the more physical result wins.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .epipolar import NominalState, as_points, sampson_signed
from .errors import (AllHypothesesDegenerate, CheiralityAmbiguous, DegenerateCloud,
                     DegenerateTranslation, InitializationFailed, RankDeficientDesign,
                     TooFewPoints)
from .geometry import CameraIntrinsics, InstantaneousMotion, UnitQuaternion
from .initializer import decompose_essential, eight_point_essential, initial_pose
from .refiner import VELOCITY_PRIOR, LmConfig

_INIT_ERRORS = (CheiralityAmbiguous, DegenerateCloud, DegenerateTranslation, RankDeficientDesign)


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 500
    sample_size: int = 20
    inlier_threshold: float = 1.0
    rng_seed: int = 0
    early_exit: bool = False
    confidence: float = 0.999
    disambiguate: bool = True
    # Largest plausible camera rotation (rad) and translation (in units of the
    # inter-frame baseline) accumulated over one frame readout; hypotheses
    # beyond either are rejected. None disables a gate.
    max_readout_rotation: float | None = 0.1
    max_readout_translation: float | None = 6.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.sample_size < 9:
            raise ValueError("sample_size must be at least 9")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")
        for name in ("max_readout_rotation", "max_readout_translation"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")

    def velocity_bounds(self, K: CameraIntrinsics):
        """``(angular, linear)`` speed limits per second implied by the readout gates."""
        readout = K.tau * (K.n_rows - 1)
        w = math.inf if self.max_readout_rotation is None else self.max_readout_rotation / readout
        v = math.inf if self.max_readout_translation is None else self.max_readout_translation / readout
        return w, v


@dataclass
class EstimationResult:
    state: NominalState
    inlier_mask: np.ndarray
    inlier_ratio: float
    per_point_residual: np.ndarray
    method: str = "mrsvo"
    iterations: int = 0
    lm_iterations: int = 0
    failed_hypotheses: int = 0
    cheirality: float = float("nan")
    low_parallax: bool = False
    retried_twisted: bool = False
    notes: list = field(default_factory=list)

    @property
    def n_inliers(self) -> int:
        return int(np.count_nonzero(self.inlier_mask))


def count_inliers(state: NominalState, corrs, K: CameraIntrinsics, tau: float | None,
                  threshold: float):
    """``(count, mask, residuals)`` with residuals as absolute Sampson distances (px).

    Degenerate correspondences get ``inf`` and are outliers.
    """
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    pts = as_points(corrs)
    tau = K.tau if tau is None else tau
    mask = np.empty(len(pts), dtype=bool)
    dist = np.empty(len(pts))
    count, _ = _kernels.count_inliers(state.to_vector(), pts, K.K_inv, tau, threshold, mask, dist)
    return int(count), mask, dist


# ---------------------------------------------------------------------------
# Cheirality with the rolling-shutter model
# ---------------------------------------------------------------------------

def _inv_rows(s, w):
    a = s[:, None] * w
    n2 = np.einsum("ni,ni->n", a, a)
    A = np.empty((len(s), 3, 3))
    A[:, 0, 0] = 1 + a[:, 0] ** 2
    A[:, 0, 1] = a[:, 2] + a[:, 0] * a[:, 1]
    A[:, 0, 2] = -a[:, 1] + a[:, 0] * a[:, 2]
    A[:, 1, 0] = -a[:, 2] + a[:, 1] * a[:, 0]
    A[:, 1, 1] = 1 + a[:, 1] ** 2
    A[:, 1, 2] = a[:, 0] + a[:, 1] * a[:, 2]
    A[:, 2, 0] = a[:, 1] + a[:, 2] * a[:, 0]
    A[:, 2, 1] = -a[:, 0] + a[:, 2] * a[:, 1]
    A[:, 2, 2] = 1 + a[:, 2] ** 2
    return A / (1 + n2)[:, None, None]


def rs_depths(state: NominalState, corrs, K: CameraIntrinsics):
    """Depths of each correspondence in both rolling-shutter views by midpoint triangulation.

    Returns ``(depth_prev, depth_cur)``; parallel rays give ``nan``.
    """
    pts = as_points(corrs)
    tau = K.tau
    Ki = K.K_inv
    n = len(pts)
    ones = np.ones(n)
    xp = np.column_stack([pts[:, 0], pts[:, 1], ones]) @ Ki.T
    xc = np.column_stack([pts[:, 2], pts[:, 3], ones]) @ Ki.T
    xp /= xp[:, 2:]
    xc /= xc[:, 2:]
    sp = pts[:, 1] * tau
    sc = pts[:, 3] * tau
    Ap = _inv_rows(sp, state.motion_prev.w)
    Ac = _inv_rows(sc, state.motion_cur.w)
    R, t = state.R_gs, state.t_gs
    o1 = -np.einsum("nij,nj->ni", Ap, sp[:, None] * state.motion_prev.v)
    d1 = np.einsum("nij,nj->ni", Ap, xp)
    o2c = -np.einsum("nij,nj->ni", Ac, sc[:, None] * state.motion_cur.v)
    o2 = (o2c - t) @ R
    d2 = np.einsum("nij,nj->ni", Ac, xc) @ R
    w0 = o1 - o2
    a = np.einsum("ni,ni->n", d1, d1)
    b = np.einsum("ni,ni->n", d1, d2)
    c = np.einsum("ni,ni->n", d2, d2)
    d = np.einsum("ni,ni->n", d1, w0)
    e = np.einsum("ni,ni->n", d2, w0)
    den = a * c - b * b
    good = np.abs(den) > 1e-14 * a * c
    den = np.where(good, den, 1.0)
    lam1 = np.where(good, (b * e - c * d) / den, np.nan)
    lam2 = np.where(good, (a * e - b * d) / den, np.nan)
    return lam1, lam2


def flip_translation_sign(state: NominalState) -> NominalState:
    """The epipolar-equivalent state with ``t`` and both linear velocities negated."""
    return NominalState(state.q_gs, -state.t_gs,
                        InstantaneousMotion(state.motion_prev.w, -state.motion_prev.v),
                        InstantaneousMotion(state.motion_cur.w, -state.motion_cur.v))


def orient_by_cheirality(state: NominalState, corrs, K: CameraIntrinsics):
    """Choose the translation sign with more points in front of both views.

    Returns ``(state, fraction in front of both views)``.
    """
    pts = as_points(corrs)
    if len(pts) == 0:
        return state, 0.0
    d1, d2 = rs_depths(state, pts, K)
    pos = np.count_nonzero((d1 > 0) & (d2 > 0))
    neg = np.count_nonzero((d1 < 0) & (d2 < 0))
    if neg > pos:
        return flip_translation_sign(state), neg / len(pts)
    return state, pos / len(pts)


def twisted_partner(q: UnitQuaternion, t) -> UnitQuaternion:
    """Rotation of the twisted pair: a half turn about the baseline, ``(2 t t^T - I) R``."""
    t = np.asarray(t, dtype=float)
    t = t / np.linalg.norm(t)
    H = 2.0 * np.outer(t, t) - np.eye(3)
    return UnitQuaternion.from_matrix(H @ q.to_matrix())


# ---------------------------------------------------------------------------
# MRSVO
# ---------------------------------------------------------------------------

def draw_samples(n: int, k: int, iterations: int, seed: int) -> np.ndarray:
    """Sample index lists, one row per hypothesis; a longer run extends a shorter one."""
    rng = np.random.default_rng(seed)
    return np.array([rng.choice(n, k, replace=False) for _ in range(iterations)], dtype=np.int64)


def required_iterations(inlier_ratio: float, sample_size: int, confidence: float) -> float:
    if inlier_ratio >= 1.0:
        return 0.0
    good = inlier_ratio ** sample_size
    if good <= 0.0:
        return math.inf
    return math.log(1.0 - confidence) / math.log1p(-good)


def _ransac_search(x_init, pts, K: CameraIntrinsics, samples, cfg: RansacConfig, lm: LmConfig,
                   chunk: int = 50):
    n = len(pts)
    best_x = x_init.copy()
    best_count, best_total = -1, math.inf
    failed = 0
    lm_its = 0
    done = 0
    Kinv = K.K_inv
    while done < len(samples):
        block = samples[done:done + chunk]
        x, c, tot, nf, its = _kernels.ransac_lm(
            x_init, pts, Kinv, K.tau, block, cfg.inlier_threshold, lm.max_iterations,
            lm.initial_damping, lm.damping_up, lm.damping_down, lm.cost_tolerance,
            lm.step_tolerance, VELOCITY_PRIOR, *cfg.velocity_bounds(K))
        failed += nf
        lm_its += its
        done += len(block)
        if c > best_count or (c == best_count and tot < best_total):
            best_x, best_count, best_total = x.copy(), c, tot
        if cfg.early_exit and done >= required_iterations(best_count / n, cfg.sample_size,
                                                          cfg.confidence):
            break
    return best_x, best_count, best_total, failed, lm_its, done


def _initial_state(pts, K: CameraIntrinsics):
    try:
        init = decompose_essential(eight_point_essential(pts, K), pts, K, require_majority=False)
    except _INIT_ERRORS as exc:
        raise InitializationFailed(str(exc)) from exc
    return init


def mrsvo_estimate(corrs, K: CameraIntrinsics, cfg: RansacConfig = RansacConfig(),
                   lm: LmConfig = LmConfig(), tau: float | None = None) -> EstimationResult:
    pts = as_points(corrs)
    if len(pts) < max(cfg.sample_size, 8):
        raise TooFewPoints(f"need at least {cfg.sample_size} correspondences, got {len(pts)}")
    if tau is not None and tau != K.tau:
        K = CameraIntrinsics(K.fx, K.fy, K.cx, K.cy, K.skew, tau, K.n_rows, K.n_cols)
    init = _initial_state(pts, K)
    samples = draw_samples(len(pts), cfg.sample_size, cfg.iterations, cfg.rng_seed)
    starts = [NominalState(init.q, init.t)]
    if cfg.disambiguate:
        starts.append(NominalState(twisted_partner(init.q, init.t), init.t))

    candidates = []
    for attempt, start in enumerate(starts):
        x, count, total, failed, lm_its, done = _ransac_search(start.to_vector(), pts, K,
                                                               samples, cfg, lm)
        if failed == done and count <= 0:
            continue
        state = NominalState.from_vector(x)
        _, mask, _ = count_inliers(state, pts, K, None, cfg.inlier_threshold)
        front = 1.0
        if cfg.disambiguate:
            state, front = orient_by_cheirality(state, pts[mask], K)
        candidates.append((front, count, -total, attempt, state, failed, lm_its, done))
        if not cfg.disambiguate or front > 0.5:
            break
    if not candidates:
        raise AllHypothesesDegenerate("every LM hypothesis failed")
    front, count, _, attempt, state, failed, lm_its, done = max(
        candidates, key=lambda c: (c[0] > 0.5, c[1], c[2], -c[3]))
    n, mask, dist = count_inliers(state, pts, K, None, cfg.inlier_threshold)
    return EstimationResult(
        state=state, inlier_mask=mask, inlier_ratio=n / len(pts), per_point_residual=dist,
        method="mrsvo", iterations=sum(c[7] for c in candidates),
        lm_iterations=sum(c[6] for c in candidates),
        failed_hypotheses=sum(c[5] for c in candidates), cheirality=front,
        low_parallax=init.low_parallax, retried_twisted=len(candidates) > 1)


def mrsvo_single(corrs, K: CameraIntrinsics, threshold: float = 1.0, lm: LmConfig = LmConfig(),
                 disambiguate: bool = True) -> EstimationResult:
    """One LM run on all correspondences from the initial pose (no RANSAC)."""
    from .refiner import lm_refine

    pts = as_points(corrs)
    init = _initial_state(pts, K)
    starts = [NominalState(init.q, init.t)]
    if disambiguate:
        starts.append(NominalState(twisted_partner(init.q, init.t), init.t))
    candidates = []
    total_its = 0
    for attempt, start in enumerate(starts):
        res = lm_refine(start, pts, K, cfg=lm)
        total_its += res.iterations
        state = res.state
        n, mask, dist = count_inliers(state, pts, K, None, threshold)
        front = 1.0
        if disambiguate:
            state, front = orient_by_cheirality(state, pts[mask], K)
        candidates.append((front > 0.5, n, -res.cost, -attempt, state, front))
        if not disambiguate or front > 0.5:
            break
    *_, state, front = max(candidates, key=lambda c: c[:4])
    n, mask, dist = count_inliers(state, pts, K, None, threshold)
    return EstimationResult(state, mask, n / len(pts), dist, method="mrsvo_single",
                            iterations=1, lm_iterations=total_its, cheirality=front,
                            low_parallax=init.low_parallax, retried_twisted=len(candidates) > 1)


# ---------------------------------------------------------------------------
# Global-shutter baseline
# ---------------------------------------------------------------------------

MVO_SAMPLE_SIZE = 8


def gs_inliers(E, pts, K: CameraIntrinsics, threshold: float):
    Ki = K.K_inv
    d = np.abs(sampson_signed(Ki.T @ E @ Ki, pts))
    d[~np.isfinite(d)] = np.inf
    return d <= threshold, d


def _baseline_result(E, pts, K, threshold, method, **extra) -> EstimationResult:
    mask, dist = gs_inliers(E, pts, K, threshold)
    pose = decompose_essential(E, pts[mask] if np.count_nonzero(mask) >= 1 else pts, K)
    state = NominalState(pose.q, pose.t)
    return EstimationResult(state, mask, float(np.count_nonzero(mask)) / len(pts), dist,
                            method=method, low_parallax=pose.low_parallax, **extra)


def mvo_estimate(corrs, K: CameraIntrinsics, cfg: RansacConfig = RansacConfig()) -> EstimationResult:
    """8-point RANSAC with global-shutter Sampson scoring; velocities are zero."""
    pts = as_points(corrs)
    if len(pts) < MVO_SAMPLE_SIZE:
        raise TooFewPoints(f"need at least {MVO_SAMPLE_SIZE} correspondences, got {len(pts)}")
    samples = draw_samples(len(pts), MVO_SAMPLE_SIZE, cfg.iterations, cfg.rng_seed)
    best_E, best_count, best_total = None, -1, math.inf
    failed = 0
    done = 0
    for idx in samples:
        done += 1
        try:
            E = eight_point_essential(pts[idx], K)
        except (RankDeficientDesign, DegenerateCloud):
            failed += 1
            continue
        mask, dist = gs_inliers(E, pts, K, cfg.inlier_threshold)
        c = int(np.count_nonzero(mask))
        tot = float(dist[mask].sum())
        if c > best_count or (c == best_count and tot < best_total):
            best_E, best_count, best_total = E, c, tot
        if cfg.early_exit and done >= required_iterations(best_count / len(pts), MVO_SAMPLE_SIZE,
                                                          cfg.confidence):
            break
    if best_E is None:
        raise AllHypothesesDegenerate("every 8-point sample was degenerate")
    return _baseline_result(best_E, pts, K, cfg.inlier_threshold, "mvo", iterations=done,
                            failed_hypotheses=failed)


def mvo_plain(corrs, K: CameraIntrinsics, threshold: float = 1.0) -> EstimationResult:
    """8-point on every correspondence, no outlier rejection."""
    pts = as_points(corrs)
    E = eight_point_essential(pts, K)
    return _baseline_result(E, pts, K, threshold, "mvo_plain", iterations=1)
