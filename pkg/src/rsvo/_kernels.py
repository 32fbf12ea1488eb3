"""Compiled inner loops for the rolling-shutter residual and its refinement.

State vectors are flat: ``x = [qw qx qy qz, t(3), w_prev, v_prev, w_cur, v_cur]``
(19 values); error states are ``[dtheta, dt, dw_prev, dv_prev, dw_cur, dv_cur]``
(18 values). Correspondences are ``(N, 4)`` arrays ``[c_prev, r_prev, c_cur, r_cur]``.
The reference implementation of the same maths lives in ``rsvo.epipolar``.
"""
import math

import numpy as np
from numba import njit

SENTINEL = 1e6
DEN_EPS = 1e-15

STATUS_OK = 0
STATUS_MAX_ITER = 1
STATUS_STALLED = 2
STATUS_SINGULAR = 3
STATUS_NONFINITE = 4


@njit(cache=True)
def quat_to_mat(qw, qx, qy, qz, R):
    R[0, 0] = 1 - 2 * (qy * qy + qz * qz)
    R[0, 1] = 2 * (qx * qy - qw * qz)
    R[0, 2] = 2 * (qx * qz + qw * qy)
    R[1, 0] = 2 * (qx * qy + qw * qz)
    R[1, 1] = 1 - 2 * (qx * qx + qz * qz)
    R[1, 2] = 2 * (qy * qz - qw * qx)
    R[2, 0] = 2 * (qx * qz - qw * qy)
    R[2, 1] = 2 * (qy * qz + qw * qx)
    R[2, 2] = 1 - 2 * (qx * qx + qy * qy)


@njit(cache=True)
def _inv_rs_rotation(s, w, A):
    # (I + [a]x)^-1 = (I - [a]x + a a^T) / (1 + |a|^2),  a = s * w
    ax = s * w[0]
    ay = s * w[1]
    az = s * w[2]
    d = 1.0 / (1.0 + ax * ax + ay * ay + az * az)
    A[0, 0] = (1 + ax * ax) * d
    A[0, 1] = (az + ax * ay) * d
    A[0, 2] = (-ay + ax * az) * d
    A[1, 0] = (-az + ay * ax) * d
    A[1, 1] = (1 + ay * ay) * d
    A[1, 2] = (ax + ay * az) * d
    A[2, 0] = (ay + az * ax) * d
    A[2, 1] = (-ax + az * ay) * d
    A[2, 2] = (1 + az * az) * d


@njit(cache=True)
def residuals(x, pts, Kinv, tau, out):
    """Signed Sampson distance of every correspondence; returns #degenerate."""
    R = np.empty((3, 3))
    quat_to_mat(x[0], x[1], x[2], x[3], R)
    t = x[4:7]
    wp = x[7:10]
    vp = x[10:13]
    wc = x[13:16]
    vc = x[16:19]
    Ap = np.empty((3, 3))
    Ac = np.empty((3, 3))
    M = np.empty((3, 3))
    E = np.empty((3, 3))
    F = np.empty((3, 3))
    tmp = np.empty((3, 3))
    T = np.empty(3)
    n_bad = 0
    for i in range(pts.shape[0]):
        sp = pts[i, 1] * tau
        sc = pts[i, 3] * tau
        _inv_rs_rotation(sp, wp, Ap)
        _inv_rs_rotation(sc, wc, Ac)
        # M = R @ Ap
        for a in range(3):
            for b in range(3):
                M[a, b] = R[a, 0] * Ap[0, b] + R[a, 1] * Ap[1, b] + R[a, 2] * Ap[2, b]
        # T = t + Ac @ (sc vc) - M @ (sp vp)
        for a in range(3):
            T[a] = (t[a]
                    + sc * (Ac[a, 0] * vc[0] + Ac[a, 1] * vc[1] + Ac[a, 2] * vc[2])
                    - sp * (M[a, 0] * vp[0] + M[a, 1] * vp[1] + M[a, 2] * vp[2]))
        # tmp = [T]x @ M
        for b in range(3):
            tmp[0, b] = -T[2] * M[1, b] + T[1] * M[2, b]
            tmp[1, b] = T[2] * M[0, b] - T[0] * M[2, b]
            tmp[2, b] = -T[1] * M[0, b] + T[0] * M[1, b]
        # E = Ac^T @ tmp
        for a in range(3):
            for b in range(3):
                E[a, b] = Ac[0, a] * tmp[0, b] + Ac[1, a] * tmp[1, b] + Ac[2, a] * tmp[2, b]
        # F = Kinv^T E Kinv
        for a in range(3):
            for b in range(3):
                tmp[a, b] = E[a, 0] * Kinv[0, b] + E[a, 1] * Kinv[1, b] + E[a, 2] * Kinv[2, b]
        for a in range(3):
            for b in range(3):
                F[a, b] = Kinv[0, a] * tmp[0, b] + Kinv[1, a] * tmp[1, b] + Kinv[2, a] * tmp[2, b]
        c1 = pts[i, 0]
        r1 = pts[i, 1]
        c2 = pts[i, 2]
        r2 = pts[i, 3]
        f0 = F[0, 0] * c1 + F[0, 1] * r1 + F[0, 2]
        f1 = F[1, 0] * c1 + F[1, 1] * r1 + F[1, 2]
        f2 = F[2, 0] * c1 + F[2, 1] * r1 + F[2, 2]
        g0 = F[0, 0] * c2 + F[1, 0] * r2 + F[2, 0]
        g1 = F[0, 1] * c2 + F[1, 1] * r2 + F[2, 1]
        alg = c2 * f0 + r2 * f1 + f2
        gmax = max(abs(f0), abs(f1), abs(g0), abs(g1))
        if gmax < DEN_EPS:
            out[i] = SENTINEL
            n_bad += 1
        else:
            out[i] = alg / np.sqrt(f0 * f0 + f1 * f1 + g0 * g0 + g1 * g1)
    return n_bad


@njit(cache=True)
def apply_error(x, d, out):
    # q <- q (x) normalize([1, dtheta/2])
    h0 = 1.0
    h1 = 0.5 * d[0]
    h2 = 0.5 * d[1]
    h3 = 0.5 * d[2]
    hn = np.sqrt(h0 * h0 + h1 * h1 + h2 * h2 + h3 * h3)
    h0 /= hn
    h1 /= hn
    h2 /= hn
    h3 /= hn
    w1, x1, y1, z1 = x[0], x[1], x[2], x[3]
    qw = w1 * h0 - x1 * h1 - y1 * h2 - z1 * h3
    qx = w1 * h1 + x1 * h0 + y1 * h3 - z1 * h2
    qy = w1 * h2 - x1 * h3 + y1 * h0 + z1 * h1
    qz = w1 * h3 + x1 * h2 - y1 * h1 + z1 * h0
    qn = np.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    out[0] = qw / qn
    out[1] = qx / qn
    out[2] = qy / qn
    out[3] = qz / qn
    tx = x[4] + d[3]
    ty = x[5] + d[4]
    tz = x[6] + d[5]
    tn = np.sqrt(tx * tx + ty * ty + tz * tz)
    out[4] = tx / tn
    out[5] = ty / tn
    out[6] = tz / tn
    for k in range(12):
        out[7 + k] = x[7 + k] + d[6 + k]


@njit(cache=True)
def jacobian(x, err, pts, Kinv, tau, J):
    """Central-difference Jacobian w.r.t. the error state at ``err``."""
    n = pts.shape[0]
    d = err.copy()
    xp = np.empty(19)
    rp = np.empty(n)
    rm = np.empty(n)
    for j in range(18):
        h = max(1e-6, 1e-6 * abs(err[j]))
        d[j] = err[j] + h
        apply_error(x, d, xp)
        residuals(xp, pts, Kinv, tau, rp)
        d[j] = err[j] - h
        apply_error(x, d, xp)
        residuals(xp, pts, Kinv, tau, rm)
        d[j] = err[j]
        inv2h = 1.0 / (2.0 * h)
        for i in range(n):
            J[i, j] = (rp[i] - rm[i]) * inv2h


@njit(cache=True)
def forward_jacobian(x, err, pts, Kinv, tau, h, J):
    n = pts.shape[0]
    d = err.copy()
    xp = np.empty(19)
    r0 = np.empty(n)
    rp = np.empty(n)
    apply_error(x, err, xp)
    residuals(xp, pts, Kinv, tau, r0)
    for j in range(18):
        d[j] = err[j] + h
        apply_error(x, d, xp)
        residuals(xp, pts, Kinv, tau, rp)
        d[j] = err[j]
        for i in range(n):
            J[i, j] = (rp[i] - r0[i]) / h


@njit(cache=True)
def _cholesky_solve(A, b, out):
    n = A.shape[0]
    L = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if not s > 0.0:
                    return False
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    y = np.empty(n)
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * y[k]
        y[i] = s / L[i, i]
    for i in range(n - 1, -1, -1):
        s = y[i]
        for k in range(i + 1, n):
            s -= L[k, i] * out[k]
        out[i] = s / L[i, i]
    return True


@njit(cache=True)
def lm(x0, pts, Kinv, tau, max_iter, lam0, up, down, cost_tol, step_tol, vel_prior,
       cost_trace, n_free=18):
    """Error-state Levenberg-Marquardt with per-step re-absorption.

    Only the first ``n_free`` error components move (6 freezes the velocities).

    Returns ``(x, cost, iterations, converged, status, n_accepted)``;
    ``cost_trace[k]`` holds the cost after the k-th accepted step
    (``cost_trace[0]`` is the initial cost).
    """
    n = pts.shape[0]
    x = x0.copy()
    r = np.empty(n)
    residuals(x, pts, Kinv, tau, r)
    cost = 0.0
    for i in range(n):
        cost += r[i] * r[i]
    cost_trace[0] = cost
    n_acc = 0
    if not np.isfinite(cost):
        return x, cost, 0, False, STATUS_NONFINITE, n_acc
    if cost <= cost_tol:
        return x, cost, 0, True, STATUS_OK, n_acc
    J = np.empty((n, 18))
    zero = np.zeros(18)
    jacobian(x, zero, pts, Kinv, tau, J)
    JtJ = J.T @ J
    g = J.T @ r
    lam = lam0
    A = np.empty((18, 18))
    rhs = np.empty(18)
    delta = np.empty(18)
    x_new = np.empty(19)
    r_new = np.empty(n)
    it = 0
    while it < max_iter:
        it += 1
        for a in range(18):
            for b in range(18):
                A[a, b] = JtJ[a, b] if a < n_free and b < n_free else 0.0
            if a < n_free:
                A[a, a] += lam * JtJ[a, a]
                if a >= 6:
                    A[a, a] += vel_prior
                rhs[a] = -g[a]
            else:
                A[a, a] = 1.0
                rhs[a] = 0.0
        solved = _cholesky_solve(A, rhs, delta)
        if not solved:
            if lam >= 1e8:
                return x, cost, it, False, STATUS_SINGULAR, n_acc
            lam = max(lam * up, 1e-12)
            continue
        step = 0.0
        for a in range(18):
            step += delta[a] * delta[a]
        step = np.sqrt(step)
        if not np.isfinite(step):
            return x, cost, it, False, STATUS_NONFINITE, n_acc
        if step <= step_tol:
            return x, cost, it, True, STATUS_OK, n_acc
        apply_error(x, delta, x_new)
        residuals(x_new, pts, Kinv, tau, r_new)
        cost_new = 0.0
        for i in range(n):
            cost_new += r_new[i] * r_new[i]
        if np.isfinite(cost_new) and cost_new < cost:
            decrease = cost - cost_new
            x[:] = x_new
            r[:] = r_new
            cost = cost_new
            n_acc += 1
            cost_trace[n_acc] = cost
            lam = max(lam * down, 1e-12)
            if cost <= cost_tol or decrease <= cost_tol * (1.0 + cost):
                return x, cost, it, True, STATUS_OK, n_acc
            jacobian(x, zero, pts, Kinv, tau, J)
            JtJ = J.T @ J
            g = J.T @ r
        else:
            lam *= up
            if lam > 1e16:
                return x, cost, it, False, STATUS_STALLED, n_acc
    return x, cost, it, False, STATUS_MAX_ITER, n_acc


@njit(cache=True)
def count_inliers(x, pts, Kinv, tau, threshold, mask, dist):
    """Absolute Sampson distances into ``dist``; returns ``(count, inlier residual sum)``."""
    residuals(x, pts, Kinv, tau, dist)
    count = 0
    total = 0.0
    for i in range(pts.shape[0]):
        d = abs(dist[i])
        if d >= SENTINEL or not np.isfinite(d):
            d = np.inf
        dist[i] = d
        if d <= threshold:
            mask[i] = True
            count += 1
            total += d
        else:
            mask[i] = False
    return count, total


@njit(cache=True)
def ransac_lm(x_init, pts, Kinv, tau, samples, threshold, max_iter, lam0, up, down,
              cost_tol, step_tol, vel_prior, w_bound, v_bound):
    """Run one LM hypothesis per sample row and keep the best by inlier count.

    Hypothesis 0 is ``x_init`` itself. Ties on the count go to the lower summed
    inlier residual; remaining ties keep the earlier hypothesis. Hypotheses
    whose angular (linear) velocity exceeds ``w_bound`` (``v_bound``) in either
    frame are rejected like failed ones.
    Returns ``(best_x, best_count, best_total, n_failed, lm_iterations)``.
    """
    n = pts.shape[0]
    mask = np.empty(n, dtype=np.bool_)
    dist = np.empty(n)
    best_x = x_init.copy()
    best_count, best_total = count_inliers(x_init, pts, Kinv, tau, threshold, mask, dist)
    n_failed = 0
    total_iters = 0
    k = samples.shape[1]
    sub = np.empty((k, 4))
    trace = np.empty(max_iter + 2)
    for h in range(samples.shape[0]):
        for i in range(k):
            sub[i, :] = pts[samples[h, i], :]
        x, cost, its, conv, status, nacc = lm(x_init, sub, Kinv, tau, max_iter, lam0, up, down,
                                              cost_tol, step_tol, vel_prior, trace)
        total_iters += its
        if status == STATUS_SINGULAR or status == STATUS_NONFINITE:
            n_failed += 1
            continue
        wp = math.sqrt(x[7] * x[7] + x[8] * x[8] + x[9] * x[9])
        wc = math.sqrt(x[13] * x[13] + x[14] * x[14] + x[15] * x[15])
        vp = math.sqrt(x[10] * x[10] + x[11] * x[11] + x[12] * x[12])
        vc = math.sqrt(x[16] * x[16] + x[17] * x[17] + x[18] * x[18])
        if wp > w_bound or wc > w_bound or vp > v_bound or vc > v_bound:
            n_failed += 1
            continue
        c, tot = count_inliers(x, pts, Kinv, tau, threshold, mask, dist)
        if c > best_count or (c == best_count and tot < best_total):
            best_count = c
            best_total = tot
            best_x[:] = x
    return best_x, best_count, best_total, n_failed, total_iters
