"""Synthetic organized range sensor.

Camera convention: x right, y down, z forward (optical axis). A pixel
(u, v) observes along the unnormalized ray

    m = ((u - cx) / fx, (v - cy) / fy, 1),

so a point at ray parameter r is p = m * r with depth z = r. Clouds are
stored in the camera frame, row major over the v (row), u (column) grid,
with NaN rows for pixels that miss the scene.

Range noise models perturb the measured point. The power-law models are
rank one along the ray: the ray parameter moves by a zero-mean normal
with variance k, k*r, or k*r^2 (k in squared meters), giving point
covariance k * r^p * m m^T. The stereo model propagates pixel matching
noise through the disparity relation d = fx * b / z and is full rank.
Per-point covariances are always evaluated at the noiseless intersection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Union

import numpy as np

from patchscape import pose as _pose
from patchscape.patch import (
    Patch,
    SurfaceType,
    boundary_contains,
    curvature_k3,
    patch_frame,
)
from patchscape.pose import Pose6

__all__ = [
    "CameraIntrinsics",
    "KINECT_640",
    "intrinsics_preset",
    "ScenePlane",
    "ConstantNoise",
    "LinearNoise",
    "QuadraticNoise",
    "StereoNoise",
    "OrganizedCloud",
    "pixel_rays",
    "project",
    "backproject",
    "depth_from_disparity",
    "disparity_from_depth",
    "point_covariance",
    "sample_scene",
    "procrustes_align",
]


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    baseline: float  # stereo baseline, m

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics after decimating the image by an integer factor."""
        return replace(
            self,
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=self.cx / factor,
            cy=self.cy / factor,
            width=int(self.width // factor),
            height=int(self.height // factor),
        )


KINECT_640 = CameraIntrinsics(
    fx=525.0, fy=525.0, cx=319.5, cy=239.5, width=640, height=480, baseline=0.075
)

_PRESETS = {"kinect-640": KINECT_640}


def intrinsics_preset(name: str) -> CameraIntrinsics:
    try:
        return _PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown intrinsics preset {name!r}") from None


@dataclass(frozen=True)
class ScenePlane:
    """Infinite plane n . p = c in the world frame."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float).reshape(3)
        norm = float(np.linalg.norm(n))
        if norm == 0.0:
            raise ValueError("plane normal must be nonzero")
        object.__setattr__(self, "normal", n / norm)
        object.__setattr__(self, "offset", float(self.offset) / norm)


@dataclass(frozen=True)
class ConstantNoise:
    k: float  # ray-parameter variance, m^2
    kind = "constant"
    power = 0


@dataclass(frozen=True)
class LinearNoise:
    k: float  # variance per meter of range, m
    kind = "linear"
    power = 1


@dataclass(frozen=True)
class QuadraticNoise:
    k: float  # variance per squared meter of range, unitless
    kind = "quadratic"
    power = 2


@dataclass(frozen=True)
class StereoNoise:
    sigma_p: float = 0.35  # pixel matching std, px
    sigma_m: float = 0.17  # disparity matching std, px
    kind = "stereo"


NoiseModel = Union[ConstantNoise, LinearNoise, QuadraticNoise, StereoNoise]


@dataclass
class OrganizedCloud:
    """Row-major organized point cloud in the camera frame."""

    points: np.ndarray  # (H, W, 3), NaN where no return
    cov: Optional[np.ndarray]  # (H, W, 3, 3) or None
    intrinsics: CameraIntrinsics

    @property
    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.points[..., 2])


# ---------------------------------------------------------------------------
# Pixel geometry
# ---------------------------------------------------------------------------


def pixel_rays(intr: CameraIntrinsics, pixels=None) -> np.ndarray:
    """Unnormalized rays with unit z. pixels (N, 2) as (u, v), or the
    whole (H, W, 3) grid when omitted."""
    if pixels is None:
        u = np.arange(intr.width, dtype=float)
        v = np.arange(intr.height, dtype=float)
        mu = (u[None, :] - intr.cx) / intr.fx
        mv = (v[:, None] - intr.cy) / intr.fy
        rays = np.empty((intr.height, intr.width, 3))
        rays[..., 0] = np.broadcast_to(mu, rays.shape[:2])
        rays[..., 1] = np.broadcast_to(mv, rays.shape[:2])
        rays[..., 2] = 1.0
        return rays
    px = np.atleast_2d(np.asarray(pixels, dtype=float))
    rays = np.empty((len(px), 3))
    rays[:, 0] = (px[:, 0] - intr.cx) / intr.fx
    rays[:, 1] = (px[:, 1] - intr.cy) / intr.fy
    rays[:, 2] = 1.0
    return rays


def project(intr: CameraIntrinsics, points) -> np.ndarray:
    """Camera-frame points to pixel coordinates (u, v)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    z = pts[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = pts[:, 0] * intr.fx / z + intr.cx
        v = pts[:, 1] * intr.fy / z + intr.cy
    out = np.column_stack([u, v])
    return out[0] if np.asarray(points).ndim == 1 else out


def backproject(intr: CameraIntrinsics, pixels, depth) -> np.ndarray:
    """Pixels plus depth (z) to camera-frame points."""
    rays = pixel_rays(intr, pixels)
    z = np.asarray(depth, dtype=float)
    out = rays * z[..., None] if z.ndim else rays * z
    return out[0] if np.asarray(pixels).ndim == 1 else out


def depth_from_disparity(intr: CameraIntrinsics, disparity):
    return intr.fx * intr.baseline / np.asarray(disparity, dtype=float)


def disparity_from_depth(intr: CameraIntrinsics, depth):
    return intr.fx * intr.baseline / np.asarray(depth, dtype=float)


# ---------------------------------------------------------------------------
# Noise covariance
# ---------------------------------------------------------------------------


def _stereo_jacobian(intr: CameraIntrinsics, u, v, d):
    """d(point)/d(u, v, d) of stereo triangulation, batched."""
    b = intr.baseline
    J = np.zeros(np.shape(d) + (3, 3))
    J[..., 0, 0] = b / d
    J[..., 0, 2] = -b * u / d**2
    J[..., 1, 1] = b / d
    J[..., 1, 2] = -b * v / d**2
    J[..., 2, 2] = -intr.fx * b / d**2
    return J


def point_covariance(noise: NoiseModel, intr: CameraIntrinsics, pixels, ranges):
    """Per-point 3x3 covariance at the noiseless range.

    pixels (N, 2) or (2,), ranges matching. Power models give the rank-one
    k * r^p * m m^T; stereo propagates E = diag(sp^2, sp^2, sm^2) through
    the triangulation Jacobian at disparity d = fx * b / r.
    """
    px = np.atleast_2d(np.asarray(pixels, dtype=float))
    r = np.atleast_1d(np.asarray(ranges, dtype=float))
    if isinstance(noise, StereoNoise):
        d = intr.fx * intr.baseline / r
        J = _stereo_jacobian(intr, px[:, 0], px[:, 1], d)
        E = np.diag([noise.sigma_p**2, noise.sigma_p**2, noise.sigma_m**2])
        cov = J @ E @ np.swapaxes(J, -1, -2)
    else:
        m = pixel_rays(intr, px)
        var = noise.k * r ** noise.power
        cov = var[:, None, None] * m[:, :, None] * m[:, None, :]
    return cov[0] if np.asarray(pixels).ndim == 1 else cov


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------

_S_MIN = 1e-9


def _cast_patch(patch: Patch, o_w, m_w) -> np.ndarray:
    """Smallest positive ray parameter hitting the bounded patch, inf on
    miss. o_w (3,) world ray origin, m_w (N, 3) world ray directions."""
    R, t = patch_frame(patch)
    o = R.T @ (o_w - t)
    m = m_w @ R
    k3 = curvature_k3(patch)
    A = m * m @ k3
    hb = m @ (k3 * o) - m[:, 2]
    C = float(o @ (k3 * o) - 2.0 * o[2])

    n = len(m)
    cand = np.full((n, 2), np.inf)
    lin = np.abs(A) < 1e-14
    quad = ~lin
    with np.errstate(divide="ignore", invalid="ignore"):
        # linear rays (flat along the ray): A s^2 + 2 hb s + C = 0 -> s = -C / (2 hb)
        s_lin = np.where(np.abs(hb) > 1e-300, -C / (2.0 * hb), np.inf)
        cand[lin, 0] = s_lin[lin]
        D = hb * hb - A * C
        ok = quad & (D >= 0.0)
        sqrtD = np.sqrt(np.where(D >= 0.0, D, 0.0))
        qq = -(hb + np.where(hb >= 0.0, 1.0, -1.0) * sqrtD)
        s1 = np.where(ok & (np.abs(A) > 0), qq / A, np.inf)
        s2 = np.where(ok & (np.abs(qq) > 0), C / qq, np.inf)
        cand[quad, 0] = s1[quad]
        cand[quad, 1] = s2[quad]

    best = np.full(n, np.inf)
    for j in (0, 1):
        s = cand[:, j]
        live = np.isfinite(s) & (s > _S_MIN)
        if not np.any(live):
            continue
        q = o[None, :] + s[live, None] * m[live]
        good = boundary_contains(patch, q[:, :2])
        if patch.s in (SurfaceType.SPHERE, SurfaceType.CIRCULAR_CYLINDER):
            kz = patch.k[0] * q[:, 2]
            good &= (kz >= 0.0) & (kz <= 1.0)
        sl = np.where(good, s[live], np.inf)
        best[live] = np.minimum(best[live], sl)
    return best


def _cast_plane(plane: ScenePlane, o_w, m_w) -> np.ndarray:
    denom = m_w @ plane.normal
    num = plane.offset - float(plane.normal @ o_w)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(np.abs(denom) > 1e-300, num / denom, np.inf)
    return np.where(s > _S_MIN, s, np.inf)


def sample_scene(
    scene: Sequence[Union[Patch, ScenePlane]],
    intr: CameraIntrinsics,
    camera_pose: Optional[Pose6] = None,
    noise: Optional[NoiseModel] = None,
    rng=None,
) -> OrganizedCloud:
    """Render an organized cloud of the nearest scene hits.

    camera_pose maps camera to world (p_w = R p_cam + t); identity when
    omitted. Deterministic for a fixed integer seed or seeded Generator.
    """
    if camera_pose is None:
        camera_pose = Pose6(np.zeros(3), np.zeros(3))
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)

    H, W = intr.height, intr.width
    rays_cam = pixel_rays(intr).reshape(-1, 3)
    R_cam = _pose.exp_map(camera_pose.r)
    o_w = np.asarray(camera_pose.t, dtype=float)
    rays_w = rays_cam @ R_cam.T

    s_best = np.full(len(rays_cam), np.inf)
    for surf in scene:
        if isinstance(surf, ScenePlane):
            s_surf = _cast_plane(surf, o_w, rays_w)
        else:
            s_surf = _cast_patch(surf, o_w, rays_w)
        s_best = np.minimum(s_best, s_surf)

    hit = np.isfinite(s_best)
    s_true = np.where(hit, s_best, np.nan)
    pts = rays_cam * s_true[:, None]

    cov = None
    if noise is not None:
        if isinstance(noise, StereoNoise):
            px = np.column_stack(
                [
                    np.tile(np.arange(W, dtype=float), H),
                    np.repeat(np.arange(H, dtype=float), W),
                ]
            )
            cov = np.full((H * W, 3, 3), np.nan)
            cov[hit] = point_covariance(noise, intr, px[hit], s_true[hit])
            xi = rng.standard_normal((H * W, 3))
            delta = np.zeros_like(pts)
            L = np.linalg.cholesky(cov[hit])
            delta[hit] = np.einsum("nij,nj->ni", L, xi[hit])
            pts = pts + delta
        else:
            var = noise.k * s_true**noise.power
            eps = rng.standard_normal(H * W) * np.sqrt(var)
            pts = pts + rays_cam * np.where(hit, eps, 0.0)[:, None]
            cov = var[:, None, None] * rays_cam[:, :, None] * rays_cam[:, None, :]
        cov = cov.reshape(H, W, 3, 3)

    pts[~hit] = np.nan
    return OrganizedCloud(points=pts.reshape(H, W, 3), cov=cov, intrinsics=intr)


# ---------------------------------------------------------------------------
# Gravity alignment
# ---------------------------------------------------------------------------


def procrustes_align(dirs_cam, dirs_ref) -> np.ndarray:
    """Rotation R with R @ dirs_ref[i] ~ dirs_cam[i], least squares.

    Solves the orthogonal Procrustes problem over paired direction
    observations (for example, gravity seen by the camera and by an IMU).
    Needs at least two non-collinear pairs; raises ValueError otherwise.
    """
    a = np.atleast_2d(np.asarray(dirs_cam, dtype=float))
    b = np.atleast_2d(np.asarray(dirs_ref, dtype=float))
    if a.shape != b.shape or a.shape[1] != 3:
        raise ValueError("direction sets must both be (N, 3)")
    if len(a) < 2:
        raise ValueError("need at least two direction pairs")
    for dirs in (a, b):
        sv = np.linalg.svd(dirs, compute_uv=False)
        if sv[1] <= 1e-9 * sv[0]:
            raise ValueError("direction pairs are collinear; rotation is ambiguous")
    B = a.T @ b
    U, _, Vt = np.linalg.svd(B)
    S = np.diag([1.0, 1.0, float(np.linalg.det(U @ Vt))])
    return U @ S @ Vt
