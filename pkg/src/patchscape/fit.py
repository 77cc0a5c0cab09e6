"""Patch fitting with quantified uncertainty.

The fit runs in stages:

1. A linear least-squares plane through the points (centroid plus the
   smallest principal direction, oriented toward the viewpoint), refined
   by a weighted nonlinear solve unless a general paraboloid was
   requested, then re-anchored at the in-plane projection of the
   centroid.
2. For curved families, a weighted Levenberg-Marquardt solve of the
   unified implicit quadric over curvature, orientation, and position.
   Circular cylinders then rebuild their frame so the cross-section axes
   stay consistent with the stage-1 plane normal.
3. A general paraboloid is classified by its fitted curvatures: flat
   (plane), single-curved (cylindric), equal-curved (circular), or
   elliptic/hyperbolic, reducing parameters accordingly.
4. Boundary extents come from the first and second moments of the points
   projected to the local xy plane, scaled so a Gaussian scatter is
   covered with probability gamma.

Every stage carries the parameter covariance through its exact
first-order Jacobian; the final patch covariance is ordered (k, d, r, t).

Measurement weighting follows the implicit-surface normalization: each
residual is divided by the standard deviation induced by its 3x3 point
covariance through the surface gradient, and the residual Jacobian
includes the derivative of that normalization.

A side-wall constraint replaces the free position by t = t0 + a * n
with scalar a, keeping the fitted patch centered on a known line (for
example the intersection with a supporting wall); recentering moves are
skipped so the final position stays on the line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.special import erfinv

from patchscape import pose as _pose
from patchscape.patch import (
    BoundaryType,
    Patch,
    SurfaceType,
)
from patchscape.pose import Pose5, Pose6

__all__ = [
    "WlmConfig",
    "WlmResult",
    "wlm_minimize",
    "FitResult",
    "fit_patch",
    "coverage_scale",
]

_ZHAT = np.array([0.0, 0.0, 1.0])
_FLAT_EPS = 1e-2  # curvature magnitude below which a direction is flat
_TINY_KAPPA = 1e-8  # cylinder curvature below which the frame rebuild is skipped


def coverage_scale(gamma: float) -> float:
    """Std multiplier containing a 1D Gaussian with probability gamma."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must be inside (0, 1)")
    return math.sqrt(2.0) * float(erfinv(gamma))


# ---------------------------------------------------------------------------
# Weighted Levenberg-Marquardt on implicit surfaces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WlmConfig:
    max_iter: int = 50
    chi2_rtol: float = 1e-8
    step_tol: float = 1e-10
    damping_init: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 10.0
    v_min: float = 1e-12  # floor on the per-point residual variance


@dataclass
class WlmResult:
    p: np.ndarray
    sigma: np.ndarray
    chi2: float
    iterations: int
    converged: bool


def _implicit_model(k3_map: np.ndarray, rot_dof: int, t_line=None):
    """Residual model f(q; p) = ql^T K ql - 2 ql_z with ql = R^T (q - t).

    p packs [k, r, t] (or [k, r, a] on a side-wall line). Returns a
    callable giving (f, df/dp, df/dq, d2f/dq dp) for a point block.
    """
    nk = k3_map.shape[1]
    if t_line is not None:
        t_base = np.asarray(t_line[0], dtype=float).reshape(3)
        t_dir = np.asarray(t_line[1], dtype=float).reshape(3)
        t_dir = t_dir / np.linalg.norm(t_dir)
        nt = 1
    else:
        nt = 3
    npar = nk + rot_dof + nt

    def model(points, p):
        k3 = k3_map @ p[:nk] if nk else np.zeros(3)
        r3 = np.zeros(3)
        r3[:rot_dof] = p[nk : nk + rot_dof]
        t = t_base + p[-1] * t_dir if nt == 1 else p[nk + rot_dof :]
        R = _pose.exp_map(r3)
        dR = _pose.jac_exp(r3)
        d = points - t
        ql = d @ R
        kql = ql * k3
        f = np.einsum("ni,ni->n", ql, kql) - 2.0 * ql[:, 2]
        dfdql = 2.0 * kql
        dfdql[:, 2] -= 2.0
        g = dfdql @ R.T

        n = len(points)
        Jp = np.empty((n, npar))
        H = np.empty((n, 3, npar))
        for b in range(nk):
            kb = k3_map[:, b]
            Jp[:, b] = (ql * ql) @ kb
            H[:, :, b] = 2.0 * (ql * kb) @ R.T
        for m in range(rot_dof):
            dql = d @ dR[m]  # = (dR_m^T) (q - t)
            Jp[:, nk + m] = np.einsum("ni,ni->n", dfdql, dql)
            H[:, :, nk + m] = dfdql @ dR[m].T + 2.0 * (dql * k3) @ R.T
        dgdt = -2.0 * (R * k3) @ R.T
        if nt == 1:
            Jp[:, -1] = -(g @ t_dir)
            H[:, :, -1] = (dgdt @ t_dir)[None, :]
        else:
            Jp[:, nk + rot_dof :] = -g
            H[:, :, nk + rot_dof :] = np.broadcast_to(dgdt, (n, 3, 3))
        return f, Jp, g, H

    return model


def _normalized_residual(model, points, covs, p, v_min):
    f, Jp, g, H = model(points, p)
    cg = np.einsum("nij,nj->ni", covs, g)
    v = np.maximum(np.einsum("ni,ni->n", g, cg), v_min)
    s = np.sqrt(v)
    F = f / s
    gSH = np.einsum("ni,nip->np", cg, H)
    J = Jp / s[:, None] - (f / (s * v))[:, None] * gSH
    return F, J


def wlm_minimize(model, p0, points, covs, config: WlmConfig = WlmConfig()) -> WlmResult:
    """Damped least squares on the variance-normalized implicit residual.

    Scaling every point covariance by a common factor rescales all
    residuals uniformly and leaves the minimizer unchanged. Gauge
    directions (parameter moves that do not change the surface) are kept
    benign by the damping. On non-convergence the best parameters seen
    are returned with converged False.
    """
    p = np.asarray(p0, dtype=float).copy()
    lam = config.damping_init
    F, J = _normalized_residual(model, points, covs, p, config.v_min)
    chi2 = float(F @ F)
    best_p, best_chi2, best_J = p.copy(), chi2, J
    converged = False
    iters = 0
    for _ in range(config.max_iter):
        A = J.T @ J
        A[np.diag_indices_from(A)] += lam
        try:
            step = np.linalg.solve(A, -(J.T @ F))
        except np.linalg.LinAlgError:
            lam *= config.damping_up
            continue
        if float(np.linalg.norm(step)) <= config.step_tol:
            # stationary for practical purposes, with or without a trial
            converged = True
            break
        iters += 1
        F_t, J_t = _normalized_residual(model, points, covs, p + step, config.v_min)
        chi2_t = float(F_t @ F_t)
        if chi2_t < chi2:
            done = (chi2 - chi2_t) <= config.chi2_rtol * chi2
            p = p + step
            F, J, chi2 = F_t, J_t, chi2_t
            if chi2 < best_chi2:
                best_p, best_chi2, best_J = p.copy(), chi2, J
            lam = max(lam / config.damping_down, 1e-14)
            if done:
                converged = True
                break
        else:
            lam *= config.damping_up
            if lam > 1e12:
                break
    A = best_J.T @ best_J
    # damping floor keeps gauge directions at a finite, documented variance
    A[np.diag_indices_from(A)] += config.damping_init
    sigma = _sym(np.linalg.inv(A))
    return WlmResult(
        p=best_p, sigma=sigma, chi2=best_chi2, iterations=iters, converged=converged
    )


# ---------------------------------------------------------------------------
# Frame helpers
# ---------------------------------------------------------------------------


def _lift(rxy) -> np.ndarray:
    return np.array([rxy[0], rxy[1], 0.0])


def _dz_drxy(rxy) -> np.ndarray:
    dR = _pose.jac_exp(_lift(rxy))
    return np.column_stack([dR[0][:, 2], dR[1][:, 2]])


def _logdiff_jacobian(R_new: np.ndarray, dR_blocks) -> Tuple[np.ndarray, np.ndarray]:
    """r' = log(R_new) and d r'/d(inputs) given dR_new/d(input_m) blocks."""
    r_new, Jlog = _pose.log_map(R_new)
    J = np.empty((3, len(dR_blocks)))
    for m, dRm in enumerate(dR_blocks):
        J[:, m] = np.einsum("iab,ab->i", Jlog, dRm)
    return r_new, J


def _frame_from_xz(x, z):
    """Right-handed frame with x along x and z reconciled against z.

    Returns (r', J_x, J_z): the log of the frame and its derivatives with
    respect to the two input directions.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    nx = np.linalg.norm(x)
    xh = x / nx
    Px = (np.eye(3) - np.outer(xh, xh)) / nx
    y_raw = np.cross(z, xh)
    ny = np.linalg.norm(y_raw)
    yh = y_raw / ny
    Py = (np.eye(3) - np.outer(yh, yh)) / ny
    zx = _skew(xh)
    dyraw_dz = zx.T  # d(z x xh)/dz = -[xh]_x
    dyraw_dx = _skew(z) @ Px
    dy_dz = Py @ dyraw_dz
    dy_dx = Py @ dyraw_dx
    zh = np.cross(xh, yh)
    dz_dx = -_skew(yh) @ Px + zx @ dy_dx
    dz_dz = zx @ dy_dz
    R_l = np.column_stack([xh, yh, zh])
    r_new, Jlog = _pose.log_map(R_l)
    J_x = np.empty((3, 3))
    J_z = np.empty((3, 3))
    for m in range(3):
        dRx = np.column_stack([Px[:, m], dy_dx[:, m], dz_dx[:, m]])
        dRz = np.column_stack([np.zeros(3), dy_dz[:, m], dz_dz[:, m]])
        J_x[:, m] = np.einsum("iab,ab->i", Jlog, dRx)
        J_z[:, m] = np.einsum("iab,ab->i", Jlog, dRz)
    return r_new, J_x, J_z


def _skew(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


# ---------------------------------------------------------------------------
# Stage 1: plane initialization
# ---------------------------------------------------------------------------


def _lls_plane(points, viewpoint):
    qbar = points.mean(axis=0)
    _, _, Vt = np.linalg.svd(points - qbar, full_matrices=False)
    n = Vt[-1]
    if float(n @ (viewpoint - qbar)) < 0.0:
        n = -n
    return _pose.rxy_for_zdir(n), qbar


def _recentre_on_plane(qbar, rxy, t):
    """Move t to the in-plane projection of the centroid.

    Returns (t', J) with J = d t'/d(zl, qbar, t) stacked (3 x 9); the zl
    dependence is later chained through d zl/d rxy.
    """
    zl = _pose.exp_map(_lift(rxy))[:, 2]
    w = qbar - t
    t_new = qbar - float(zl @ w) * zl
    dz = -(np.outer(zl, w) + float(zl @ w) * np.eye(3))
    dq = np.eye(3) - np.outer(zl, zl)
    dt = np.outer(zl, zl)
    return t_new, np.hstack([dz, dq, dt])


# ---------------------------------------------------------------------------
# Stage 4-5: moments of the projected points
# ---------------------------------------------------------------------------


def _moments(points, R, t):
    ql = (points - t) @ R
    x, y = ql[:, 0], ql[:, 1]
    return np.array(
        [x.mean(), y.mean(), (x * x).mean(), (y * y).mean(), (x * y).mean()]
    )


def _moment_joint_sigma(points, covs, R, t, dR_cols, sigma_state, nk):
    """Joint covariance of (moments, state) with state = (k, r, t).

    The moment block combines per-point noise pushed through the
    projection with the state uncertainty pushed through the moment
    definition; the cross block keeps the two correlated downstream.
    """
    n = len(points)
    d = points - t
    ql = d @ R
    x, y = ql[:, 0], ql[:, 1]
    M = np.zeros((n, 5, 3))
    M[:, 0, 0] = 1.0
    M[:, 1, 1] = 1.0
    M[:, 2, 0] = 2.0 * x
    M[:, 3, 1] = 2.0 * y
    M[:, 4, 0] = y
    M[:, 4, 1] = x
    B = M @ R.T  # d m_i / d q_i, up to 1/n
    sigma_m = np.einsum("nab,nbc,ndc->ad", B, covs, B) / n**2

    nr = len(dR_cols)
    A = np.zeros((5, nk + nr + 3))
    for j, dRj in enumerate(dR_cols):
        V = d @ dRj  # local perturbation from rotation parameter j
        A[:, nk + j] = np.einsum("nab,nb->a", M, V) / n
    A[:, nk + nr :] = -B.mean(axis=0)

    cross = A @ sigma_state
    top = sigma_m + cross @ A.T
    return np.block([[top, cross], [cross.T, sigma_state]])


# ---------------------------------------------------------------------------
# Stage 6-9: boundary extents with Jacobians over (m, state)
# ---------------------------------------------------------------------------


def _sqrt_floor(v):
    return math.sqrt(max(v, 1e-30))


def _extents_rect(m, lam):
    """Extents for axis-on-x types: x centered, y about the axis."""
    sx = _sqrt_floor(m[2] - m[0] ** 2)
    sy = _sqrt_floor(m[3])
    d = np.array([lam * sx, lam * sy])
    J_m = np.array(
        [
            [-lam * m[0] / sx, 0.0, 0.5 * lam / sx, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.5 * lam / sy, 0.0],
        ]
    )
    return d, J_m


def _extents_circle_from_vxy(m, lam):
    sx = _sqrt_floor(m[2])
    sy = _sqrt_floor(m[3])
    J_m = np.zeros((1, 5))
    if abs(m[2] - m[3]) < 1e-12:
        d = lam * 0.5 * (sx + sy)
        J_m[0, 2] = 0.25 * lam / sx
        J_m[0, 3] = 0.25 * lam / sy
    elif m[2] > m[3]:
        d = lam * sx
        J_m[0, 2] = 0.5 * lam / sx
    else:
        d = lam * sy
        J_m[0, 3] = 0.5 * lam / sy
    return np.array([d]), J_m


def _extents_ellipse_uncentered(m, lam):
    sx = _sqrt_floor(m[2])
    sy = _sqrt_floor(m[3])
    d = np.array([lam * sx, lam * sy])
    J_m = np.zeros((2, 5))
    J_m[0, 2] = 0.5 * lam / sx
    J_m[1, 3] = 0.5 * lam / sy
    return d, J_m


def _plane_spread(m, gamma):
    """Principal in-plane Gaussian containment lengths and derivatives.

    Returns (l+, l-, theta, dl+/drho, dl-/drho, dtheta/drho, drho/dm)
    with rho = (alpha, beta, phi) the centered second-moment parameters.
    """
    alpha = m[2] - m[0] ** 2
    beta = 2.0 * (m[4] - m[0] * m[1])
    phi = m[3] - m[1] ** 2
    drho_dm = np.array(
        [
            [-2.0 * m[0], 0.0, 1.0, 0.0, 0.0],
            [-2.0 * m[1], -2.0 * m[0], 0.0, 0.0, 2.0],
            [0.0, -2.0 * m[1], 0.0, 1.0, 0.0],
        ]
    )
    c = -math.log1p(-gamma)
    D = beta * beta + (alpha - phi) ** 2
    sD = math.sqrt(D)
    if sD > 1e-12:
        de_p = np.array([1.0 + (alpha - phi) / sD, beta / sD, 1.0 - (alpha - phi) / sD])
        de_m = np.array([1.0 - (alpha - phi) / sD, -beta / sD, 1.0 + (alpha - phi) / sD])
        dtheta = np.array([-beta, alpha - phi, beta]) / (2.0 * D)
        theta = 0.5 * math.atan2(beta, alpha - phi)
    else:
        # isotropic spread: the split direction is undefined; freeze it
        de_p = np.array([1.0, 0.0, 1.0])
        de_m = np.array([1.0, 0.0, 1.0])
        dtheta = np.zeros(3)
        theta = 0.0
    e_p = max(alpha + phi + sD, 1e-30)
    e_m = max(alpha + phi - sD, 1e-30)
    l_p = math.sqrt(c * e_p)
    l_m = math.sqrt(c * e_m)
    dl_p = (0.5 * c / l_p) * de_p
    dl_m = (0.5 * c / l_m) * de_m
    return l_p, l_m, theta, dl_p, dl_m, dtheta, drho_dm


# ---------------------------------------------------------------------------
# Fit driver
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    patch: Patch
    converged: bool
    chi2: float
    iterations: int


_K3_PARAB = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
_K3_SPHERE = np.array([[1.0], [1.0], [1.0]])
_K3_CCYL = np.array([[0.0], [1.0], [1.0]])
_K3_PLANE = np.zeros((3, 0))

# axis swap taking x to the old y direction (z fixed): R' = R W
_W_SWAP = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])

_SURFACES = ("paraboloid", "plane", "sphere", "cylinder")


def fit_patch(
    points,
    covs=None,
    surface: str = "paraboloid",
    plane_boundary: BoundaryType = BoundaryType.ELLIPSE,
    gamma: float = 0.95,
    viewpoint=(0.0, 0.0, 0.0),
    side_wall=None,
    config: WlmConfig = WlmConfig(),
) -> FitResult:
    """Fit one bounded patch to points with per-point 3x3 covariances.

    surface selects the family: "paraboloid" fits a general paraboloid
    and classifies it (plane, cylindric, circular, elliptic, or
    hyperbolic); "plane", "sphere", and "cylinder" fit those families
    directly. plane_boundary picks the boundary for plane fits
    (classified planes take an ellipse). gamma sets the boundary coverage
    probability of a Gaussian scatter. viewpoint orients the local z
    axis. side_wall, when given as (t0, n), constrains the patch center
    to the line t0 + a n; True derives the line from the initial plane
    (data centroid along its normal), which keeps the patch centered on
    the data. Non-finite points are dropped.

    Returns a FitResult whose patch carries the propagated (k, d, r, t)
    covariance.
    """
    if surface not in _SURFACES:
        raise ValueError(f"surface must be one of {_SURFACES}")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    keep = np.isfinite(pts).all(axis=1)
    pts = pts[keep]
    if covs is None:
        cv = np.broadcast_to(np.eye(3), (len(pts), 3, 3)).copy()
    else:
        cv = np.asarray(covs, dtype=float).reshape(-1, 3, 3)[keep]
    if len(pts) < 13:
        raise ValueError("need at least 13 points to fit a patch")
    vp = np.asarray(viewpoint, dtype=float).reshape(3)
    if side_wall is not None and side_wall is not True:
        wall_t = np.asarray(side_wall[0], dtype=float).reshape(3)
        wall_n = np.asarray(side_wall[1], dtype=float).reshape(3)
        wall_n = wall_n / np.linalg.norm(wall_n)
        t_line = (wall_t, wall_n)
    else:
        t_line = None
    lam_g = coverage_scale(gamma)

    total_iters = 0
    converged = True
    chi2 = 0.0

    # ---- stage 1: plane ----------------------------------------------
    rxy0, qbar = _lls_plane(pts, vp)
    if side_wall is True:
        wall_t = qbar.copy()
        wall_n = _pose.exp_map(_lift(rxy0))[:, 2]
        t_line = (wall_t, wall_n)
    sigma_qbar = cv.sum(axis=0) / len(pts) ** 2
    plane_res = None
    if surface == "paraboloid":
        t0 = qbar.copy()
        if t_line is not None:
            t0 = wall_t + float(wall_n @ (qbar - wall_t)) * wall_n
    else:
        model = _implicit_model(_K3_PLANE, 2, t_line)
        if t_line is None:
            p0 = np.concatenate([rxy0, qbar])
        else:
            p0 = np.concatenate([rxy0, [float(wall_n @ (qbar - wall_t))]])
        plane_res = wlm_minimize(model, p0, pts, cv, config)
        total_iters += plane_res.iterations
        converged &= plane_res.converged
        chi2 = plane_res.chi2
        rxy0 = plane_res.p[:2]
        if t_line is None:
            t0 = plane_res.p[2:5].copy()
            t0, _ = _recentre_on_plane(qbar, rxy0, t0)
        else:
            t0 = wall_t + plane_res.p[2] * wall_n

    # ---- stages 2-3: surface solve and classification ----------------
    if surface == "plane":
        state_sigma = _plane_state_sigma(
            plane_res, rxy0, qbar, t0, sigma_qbar, t_line, wall_n if t_line else None
        )
        return _finish_plane(
            pts, cv, rxy0, t0, state_sigma, plane_boundary, gamma, lam_g,
            t_line is not None, converged, chi2, total_iters,
        )

    if surface == "sphere":
        model = _implicit_model(_K3_SPHERE, 2, t_line)
        if t_line is None:
            p0 = np.concatenate([[0.0], rxy0, t0])
        else:
            p0 = np.concatenate([[0.0], rxy0, [float(wall_n @ (t0 - wall_t))]])
        res = wlm_minimize(model, p0, pts, cv, config)
        total_iters += res.iterations
        converged &= res.converged
        kappa = res.p[0]
        rxy = res.p[1:3]
        if t_line is None:
            t = res.p[3:6]
            sigma = res.sigma
        else:
            t = wall_t + res.p[3] * wall_n
            J = np.zeros((6, 4))
            J[:3, :3] = np.eye(3)
            J[3:, 3] = wall_n
            sigma = J @ res.sigma @ J.T
        return _finish_circular(
            pts, cv, SurfaceType.SPHERE, kappa, rxy, t, sigma, lam_g,
            converged, res.chi2, total_iters,
        )

    if surface == "cylinder":
        model = _implicit_model(_K3_CCYL, 3, t_line)
        if t_line is None:
            p0 = np.concatenate([[0.0], _lift(rxy0), t0])
        else:
            p0 = np.concatenate([[0.0], _lift(rxy0), [float(wall_n @ (t0 - wall_t))]])
        res = wlm_minimize(model, p0, pts, cv, config)
        total_iters += res.iterations
        converged &= res.converged
        kappa = res.p[0]
        r = res.p[1:4].copy()
        if t_line is None:
            t = res.p[4:7].copy()
            sigma = res.sigma
        else:
            t = wall_t + res.p[4] * wall_n
            J = np.zeros((7, 5))
            J[:4, :4] = np.eye(4)
            J[4:, 4] = wall_n
            sigma = J @ res.sigma @ J.T
        if abs(kappa) >= _TINY_KAPPA and t_line is None:
            r, t, sigma = _ccyl_rebuild(kappa, r, t, sigma, plane_res, rxy0)
        return _finish_cylindric(
            pts, cv, SurfaceType.CIRCULAR_CYLINDER, kappa, r, t, sigma, lam_g,
            t_line is not None, converged, res.chi2, total_iters,
        )

    # general paraboloid
    model = _implicit_model(_K3_PARAB, 3, t_line)
    if t_line is None:
        p0 = np.concatenate([[0.0, 0.0], _lift(rxy0), t0])
    else:
        p0 = np.concatenate([[0.0, 0.0], _lift(rxy0), [float(wall_n @ (t0 - wall_t))]])
    res = wlm_minimize(model, p0, pts, cv, config)
    total_iters += res.iterations
    converged &= res.converged
    chi2 = res.chi2
    k2 = res.p[:2].copy()
    r = res.p[2:5].copy()
    if t_line is None:
        t = res.p[5:8].copy()
        sigma8 = res.sigma
    else:
        t = wall_t + res.p[5] * wall_n
        J = np.zeros((8, 6))
        J[:5, :5] = np.eye(5)
        J[5:, 5] = wall_n
        sigma8 = J @ res.sigma @ J.T

    return _classify_paraboloid(
        pts, cv, k2, r, t, sigma8, gamma, lam_g, t_line is not None,
        converged, chi2, total_iters,
    )


# ---------------------------------------------------------------------------
# Path finishers
# ---------------------------------------------------------------------------


def _plane_state_sigma(plane_res, rxy, qbar, t_new, sigma_qbar, t_line, wall_n):
    """Covariance of the plane state (rxy, t) after recentering."""
    if t_line is not None:
        J = np.zeros((5, 3))
        J[:2, :2] = np.eye(2)
        J[2:, 2] = wall_n
        return J @ plane_res.sigma @ J.T
    sigma_wlm = plane_res.sigma  # over (rxy, t)
    J_z = _dz_drxy(rxy)
    sigma_zl = J_z @ sigma_wlm[:2, :2] @ J_z.T
    t_old = plane_res.p[2:5]
    _, J_t = _recentre_on_plane(qbar, rxy, t_old)  # 3 x (zl, qbar, t)
    J = np.zeros((5, 11))
    J[:2, 6:8] = np.eye(2)
    J[2:, 0:3] = J_t[:, 0:3]
    J[2:, 3:6] = J_t[:, 3:6]
    # t' also depends on rxy through zl; chaining it here alongside the
    # independent zl block double counts only at second order in the noise
    J[2:, 6:8] = J_t[:, 0:3] @ J_z
    J[2:, 8:11] = J_t[:, 6:9]
    sigma_in = np.zeros((11, 11))
    sigma_in[0:3, 0:3] = sigma_zl
    sigma_in[3:6, 3:6] = sigma_qbar
    sigma_in[6:11, 6:11] = sigma_wlm
    return J @ sigma_in @ J.T


def _ccyl_rebuild(kappa, r, t, sigma, plane_res, plane_rxy):
    """Align the cylinder frame with the stage-1 plane normal.

    The fitted x axis is kept as the cylinder axis; y and z rebuild from
    the plane normal, and t shifts so the axis line {t + R (s, 0, 1/k)}
    is unchanged.
    """
    R_old = _pose.exp_map(r)
    x_axis = R_old[:, 0]
    z_plane = _pose.exp_map(_lift(plane_rxy))[:, 2]
    r_new, J_x, J_z = _frame_from_xz(x_axis, z_plane)
    R_new = _pose.exp_map(r_new)
    t_new = t + (R_old - R_new) @ np.array([0.0, 0.0, 1.0 / kappa])

    dR = _pose.jac_exp(r)
    dxdr = np.column_stack([dR[m][:, 0] for m in range(3)])
    J_zplane = _dz_drxy(plane_rxy)
    sigma_zpl = J_zplane @ plane_res.sigma[:2, :2] @ J_zplane.T
    sigma_xl = dxdr @ sigma[1:4, 1:4] @ dxdr.T

    J = np.zeros((7, 10))  # (kappa, r', t) from (z_pl, x_l, kappa, t)
    J[0, 6] = 1.0
    J[1:4, 0:3] = J_z
    J[1:4, 3:6] = J_x
    J[4:, 7:] = np.eye(3)
    sigma_in = np.zeros((10, 10))
    sigma_in[0:3, 0:3] = sigma_zpl
    sigma_in[3:6, 3:6] = sigma_xl
    sigma_in[6, 6] = sigma[0, 0]
    sigma_in[7:, 7:] = sigma[4:, 4:]
    sigma_in[6, 7:] = sigma[0, 4:]
    sigma_in[7:, 6] = sigma[4:, 0]
    return r_new, t_new, J @ sigma_in @ J.T


def _classify_paraboloid(
    pts, cv, k2, r, t, sigma8, gamma, lam_g, wall, converged, chi2, iters
):
    """Reduce a fitted general paraboloid to its curvature class."""
    ax, ay = abs(k2[0]), abs(k2[1])
    if max(ax, ay) < _FLAT_EPS:
        rxy = _pose.rxy_from_r(r)
        J = np.zeros((5, 8))
        J[:2, 2:5] = _pose.jac_rxy(r)
        J[2:, 5:] = np.eye(3)
        state_sigma = J @ sigma8 @ J.T
        return _finish_plane(
            pts, cv, rxy, t, state_sigma, BoundaryType.ELLIPSE, gamma, lam_g,
            wall, converged, chi2, iters,
        )
    if min(ax, ay) < _FLAT_EPS:
        # single curved direction; keep it on the local y axis
        if ay >= _FLAT_EPS:
            kappa = k2[1]
            J = np.zeros((7, 8))
            J[0, 1] = 1.0
            J[1:4, 2:5] = np.eye(3)
            J[4:, 5:] = np.eye(3)
            sigma = J @ sigma8 @ J.T
            return _finish_cylindric(
                pts, cv, SurfaceType.CYLINDRIC_PARABOLOID, kappa, r, t, sigma,
                lam_g, wall, converged, chi2, iters,
            )
        kappa = k2[0]
        r_new, J_r = _swap_frame(r)
        J = np.zeros((7, 8))
        J[0, 0] = 1.0
        J[1:4, 2:5] = J_r
        J[4:, 5:] = np.eye(3)
        sigma = J @ sigma8 @ J.T
        return _finish_cylindric(
            pts, cv, SurfaceType.CYLINDRIC_PARABOLOID, kappa, r_new, t, sigma,
            lam_g, wall, converged, chi2, iters,
        )
    if abs(k2[0] - k2[1]) < _FLAT_EPS:
        kappa = 0.5 * (k2[0] + k2[1])
        rxy = _pose.rxy_from_r(r)
        J = np.zeros((6, 8))
        J[0, 0] = J[0, 1] = 0.5
        J[1:3, 2:5] = _pose.jac_rxy(r)
        J[3:, 5:] = np.eye(3)
        sigma = J @ sigma8 @ J.T
        return _finish_circular(
            pts, cv, SurfaceType.CIRCULAR_PARABOLOID, kappa, rxy, t, sigma,
            lam_g, converged, chi2, iters,
        )
    stype = (
        SurfaceType.ELLIPTIC_PARABOLOID
        if k2[0] * k2[1] > 0.0
        else SurfaceType.HYPERBOLIC_PARABOLOID
    )
    # canonical axes: |kx| < |ky|, ties broken by kx <= ky
    if ax > ay or (ax == ay and k2[0] > k2[1]):
        r_new, J_r = _swap_frame(r)
        k2 = k2[::-1].copy()
        J = np.zeros((8, 8))
        J[0, 1] = J[1, 0] = 1.0
        J[2:5, 2:5] = J_r
        J[5:, 5:] = np.eye(3)
        sigma8 = J @ sigma8 @ J.T
        r = r_new
    return _finish_ellhyp(
        pts, cv, stype, k2, r, t, sigma8, lam_g, converged, chi2, iters
    )


def _swap_frame(r):
    """Quarter turn about local z (x takes the old y direction)."""
    R_old = _pose.exp_map(r)
    dR = _pose.jac_exp(r)
    return _logdiff_jacobian(R_old @ _W_SWAP, [dR[m] @ _W_SWAP for m in range(3)])


def _finish_cylindric(
    pts, cv, stype, kappa, r, t, sigma, lam_g, wall, converged, chi2, iters
):
    R = _pose.exp_map(r)
    dR = _pose.jac_exp(r)
    m = _moments(pts, R, t)
    joint = _moment_joint_sigma(pts, cv, R, t, list(dR), sigma, 1)
    d, J_dm = _extents_rect(m, lam_g)
    if not wall:
        t_new = t + R @ np.array([m[0], 0.0, 0.0])
    else:
        t_new = t
    J = np.zeros((9, 12))  # (k, d, r, t') from (m, k, r, t)
    J[0, 5] = 1.0
    J[1:3, 0:5] = J_dm
    J[3:6, 6:9] = np.eye(3)
    J[6:, 9:] = np.eye(3)
    if not wall:
        J[6:, 0] = R[:, 0]
        for j in range(3):
            J[6:, 6 + j] = dR[j] @ np.array([m[0], 0.0, 0.0])
    sigma_out = J @ joint @ J.T
    patch = Patch(
        stype, BoundaryType.AARECT, np.array([kappa]), d, Pose6(r, t_new),
        _sym(sigma_out),
    )
    return FitResult(patch, converged, chi2, iters)


def _finish_circular(pts, cv, stype, kappa, rxy, t, sigma, lam_g, converged, chi2, iters):
    R = _pose.exp_map(_lift(rxy))
    dR = _pose.jac_exp(_lift(rxy))
    m = _moments(pts, R, t)
    joint = _moment_joint_sigma(pts, cv, R, t, [dR[0], dR[1]], sigma, 1)
    d, J_dm = _extents_circle_from_vxy(m, lam_g)
    J = np.zeros((7, 11))  # (k, d, rxy, t) from (m, k, rxy, t)
    J[0, 5] = 1.0
    J[1, 0:5] = J_dm[0]
    J[2:4, 6:8] = np.eye(2)
    J[4:, 8:] = np.eye(3)
    sigma_out = J @ joint @ J.T
    patch = Patch(
        stype, BoundaryType.CIRCLE, np.array([kappa]), d, Pose5(rxy, t),
        _sym(sigma_out),
    )
    return FitResult(patch, converged, chi2, iters)


def _finish_ellhyp(pts, cv, stype, k2, r, t, sigma, lam_g, converged, chi2, iters):
    R = _pose.exp_map(r)
    dR = _pose.jac_exp(r)
    m = _moments(pts, R, t)
    joint = _moment_joint_sigma(pts, cv, R, t, list(dR), sigma, 2)
    d, J_dm = _extents_ellipse_uncentered(m, lam_g)
    J = np.zeros((10, 13))  # (k2, d2, r, t) from (m, k2, r, t)
    J[0:2, 5:7] = np.eye(2)
    J[2:4, 0:5] = J_dm
    J[4:7, 7:10] = np.eye(3)
    J[7:, 10:] = np.eye(3)
    sigma_out = J @ joint @ J.T
    patch = Patch(
        stype, BoundaryType.ELLIPSE, k2, d, Pose6(r, t), _sym(sigma_out)
    )
    return FitResult(patch, converged, chi2, iters)


def _finish_plane(
    pts, cv, rxy, t, state_sigma, boundary, gamma, lam_g, wall, converged, chi2, iters
):
    R = _pose.exp_map(_lift(rxy))
    dR = _pose.jac_exp(_lift(rxy))
    m = _moments(pts, R, t)
    joint = _moment_joint_sigma(pts, cv, R, t, [dR[0], dR[1]], state_sigma, 0)
    l_p, l_m, theta, dl_p, dl_m, dtheta, drho = _plane_spread(m, gamma)

    if not wall:
        t_new = t + R @ np.array([m[0], m[1], 0.0])
        dtn_dm = np.zeros((3, 5))
        dtn_dm[:, 0] = R[:, 0]
        dtn_dm[:, 1] = R[:, 1]
        dtn_drxy = np.column_stack(
            [dR[j] @ np.array([m[0], m[1], 0.0]) for j in range(2)]
        )
    else:
        t_new = t
        dtn_dm = np.zeros((3, 5))
        dtn_drxy = np.zeros((3, 2))

    dlp_dm = dl_p @ drho
    dlm_dm = dl_m @ drho
    dth_dm = dtheta @ drho

    if boundary == BoundaryType.CIRCLE:
        d = np.array([max(l_p, l_m)])
        J = np.zeros((6, 10))  # (d, rxy, t') from (m, rxy, t)
        J[0, 0:5] = dlp_dm  # l+ >= l- always
        J[1:3, 5:7] = np.eye(2)
        J[3:, 0:5] = dtn_dm
        J[3:, 5:7] = dtn_drxy
        J[3:, 7:] = np.eye(3)
        sigma_out = J @ joint @ J.T
        patch = Patch(
            SurfaceType.PLANE, boundary, np.array([]), d, Pose5(rxy, t_new),
            _sym(sigma_out),
        )
        return FitResult(patch, converged, chi2, iters)

    # principal-axis frame for directional boundaries
    Rz = np.array(
        [
            [math.cos(theta), -math.sin(theta), 0.0],
            [math.sin(theta), math.cos(theta), 0.0],
            [0.0, 0.0, 1.0],
        ]
    )
    dRz = np.array(
        [
            [-math.sin(theta), -math.cos(theta), 0.0],
            [math.cos(theta), -math.sin(theta), 0.0],
            [0.0, 0.0, 0.0],
        ]
    )
    R_new = R @ Rz
    r_new, Jlog = _pose.log_map(R_new)
    dr_dth = np.einsum("iab,ab->i", Jlog, R @ dRz)
    dr_drxy = np.empty((3, 2))
    for j in range(2):
        dr_drxy[:, j] = np.einsum("iab,ab->i", Jlog, dR[j] @ Rz)
    dr_dm = np.outer(dr_dth, dth_dm)

    if boundary in (BoundaryType.ELLIPSE, BoundaryType.AARECT):
        d = np.array([l_p, l_m])
        J = np.zeros((8, 10))  # (d2, r3, t') from (m, rxy, t)
        J[0, 0:5] = dlp_dm
        J[1, 0:5] = dlm_dm
        J[2:5, 0:5] = dr_dm
        J[2:5, 5:7] = dr_drxy
        J[5:, 0:5] = dtn_dm
        J[5:, 5:7] = dtn_drxy
        J[5:, 7:] = np.eye(3)
        sigma_out = J @ joint @ J.T
        patch = Patch(
            SurfaceType.PLANE, boundary, np.array([]), d, Pose6(r_new, t_new),
            _sym(sigma_out),
        )
        return FitResult(patch, converged, chi2, iters)

    # convex quad equivalent to the principal rectangle
    dd = math.hypot(l_p, l_m)
    gam = math.atan2(l_m, l_p)
    dq = np.array([dd, dd, dd, dd, gam])
    dd_dl = np.array([l_p, l_m]) / dd
    dgam_dl = np.array([-l_m, l_p]) / (l_p**2 + l_m**2)
    L = np.vstack([dlp_dm, dlm_dm])  # d(l+, l-)/dm
    J = np.zeros((11, 10))  # (d5, r3, t') from (m, rxy, t)
    for i in range(4):
        J[i, 0:5] = dd_dl @ L
    J[4, 0:5] = dgam_dl @ L
    J[5:8, 0:5] = dr_dm
    J[5:8, 5:7] = dr_drxy
    J[8:, 0:5] = dtn_dm
    J[8:, 5:7] = dtn_drxy
    J[8:, 7:] = np.eye(3)
    sigma_out = J @ joint @ J.T
    patch = Patch(
        SurfaceType.PLANE, BoundaryType.CQUAD, np.array([]), dq,
        Pose6(r_new, t_new), _sym(sigma_out),
    )
    return FitResult(patch, converged, chi2, iters)


def _sym(a):
    return 0.5 * (a + a.T)
