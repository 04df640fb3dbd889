"""Core projective geometry: intrinsics, rigid poses, homographies, distortion.

Conventions
-----------
Device frame: x right, y down, +z along the optical axis away from the lens.
Pixels: origin at the top-left, pixel centers on integer coordinates.
Distortion acts on normalized coordinates before the affine pixel map:
``x_d = x_n * (1 + k1*r^2 + k2*r^4)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    DegenerateConfiguration,
    NoConvergence,
    PointAtInfinity,
    PointBehindCamera,
)

MIN_DEPTH_MM = 1e-6
UNDISTORT_MAX_ITER = 50
UNDISTORT_TOL = 1e-9


def _frozen_array(values, shape) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite entries in array of shape {shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole constants of the shared capture/projection device.

    fx, fy, cx, cy are in pixels, skew is fixed at zero, k1/k2 are the two
    radial distortion coefficients.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0
    k1: float = 0.0
    k2: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.skew != 0.0:
            raise ValueError("skew is fixed at zero")
        if not (abs(self.k1) < 1 and abs(self.k2) < 1):
            raise ValueError("|k1| and |k2| must be < 1")
        for v in (self.fx, self.fy, self.cx, self.cy):
            if not math.isfinite(v):
                raise ValueError("intrinsics must be finite")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def with_distortion(self, k1: float, k2: float) -> "Intrinsics":
        return replace(self, k1=k1, k2=k2)


@dataclass(frozen=True)
class Pose:
    """Rigid transform taking object-frame points into the device frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen_array(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen_array(self.translation, (3,)))
        r = self.rotation
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant must be +1")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        """Return self ∘ other (apply ``other`` first)."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map (..., 3) object-frame points into the device frame."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Homography:
    """3x3 projective map, Frobenius-normalized with h33 >= 0."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float).reshape(3, 3)
        norm = np.linalg.norm(m)
        if norm == 0 or not np.all(np.isfinite(m)):
            raise ValueError("homography must be finite and nonzero")
        m = m / norm
        if m[2, 2] < 0:
            m = -m
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))


def distort_normalized(intr: Intrinsics, pn: np.ndarray) -> np.ndarray:
    """Apply the radial model to (..., 2) normalized points."""
    pn = np.asarray(pn, dtype=float)
    r2 = np.sum(pn * pn, axis=-1, keepdims=True)
    factor = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2
    return pn * factor


def project(intr: Intrinsics, pose: Pose, x_world) -> np.ndarray:
    """Project a single 3-vector (mm) to pixel coordinates."""
    xc = pose.transform(np.asarray(x_world, dtype=float))
    if xc[2] <= MIN_DEPTH_MM:
        raise PointBehindCamera(f"point depth {xc[2]:.6g} mm <= {MIN_DEPTH_MM} mm")
    pn = xc[:2] / xc[2]
    pd = distort_normalized(intr, pn)
    return np.array([intr.fx * pd[0] + intr.cx, intr.fy * pd[1] + intr.cy])


def project_many(intr: Intrinsics, pose: Pose, points: np.ndarray):
    """Vectorized projection of (n, 3) points.

    Returns (pixels (n, 2), valid mask); points at or behind the lens are
    flagged invalid rather than raising.
    """
    xc = pose.transform(np.asarray(points, dtype=float))
    valid = xc[:, 2] > MIN_DEPTH_MM
    z = np.where(valid, xc[:, 2], 1.0)
    xn = xc[:, 0] / z
    yn = xc[:, 1] / z
    r2 = xn * xn + yn * yn
    factor = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2
    return (
        np.stack([intr.fx * xn * factor + intr.cx, intr.fy * yn * factor + intr.cy], axis=1),
        valid,
    )


def undistort(intr: Intrinsics, p_distorted) -> np.ndarray:
    """Invert the radial model for one normalized point by fixed-point iteration."""
    pd = np.asarray(p_distorted, dtype=float)
    if np.hypot(pd[0], pd[1]) >= 1.0:
        raise ValueError("undistort expects |p| < 1 in normalized coordinates")
    q = pd.copy()
    for _ in range(UNDISTORT_MAX_ITER):
        r2 = q[0] * q[0] + q[1] * q[1]
        factor = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2
        q = pd / factor
        back = distort_normalized(intr, q)
        if max(abs(back[0] - pd[0]), abs(back[1] - pd[1])) < UNDISTORT_TOL:
            return q
    raise NoConvergence(f"undistortion did not converge for p={pd}")


def undistort_many(intr: Intrinsics, pd: np.ndarray, iterations: int = 12) -> np.ndarray:
    """Fixed-iteration vectorized undistortion of (..., 2) normalized points.

    Used by the renderers on full pixel grids; runs a fixed number of
    contraction steps so the output is deterministic regardless of chunking.
    """
    pd = np.asarray(pd, dtype=float)
    x = pd[..., 0].copy()
    y = pd[..., 1].copy()
    for _ in range(iterations):
        r2 = x * x + y * y
        factor = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2
        np.divide(pd[..., 0], factor, out=x)
        np.divide(pd[..., 1], factor, out=y)
    return np.stack([x, y], axis=-1)


def _normalizing_similarity(points: np.ndarray) -> np.ndarray:
    """Isotropic normalization: centroid to origin, mean radius sqrt(2)."""
    centroid = points.mean(axis=0)
    shifted = points - centroid
    mean_dist = np.mean(np.linalg.norm(shifted, axis=1))
    if mean_dist < 1e-12:
        raise DegenerateConfiguration("all points coincide")
    s = math.sqrt(2.0) / mean_dist
    return np.array(
        [[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]]
    )


def homography_dlt(src, dst) -> Homography:
    """Estimate the homography mapping src -> dst (n >= 4 pairs) by normalized DLT."""
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if src.shape != dst.shape or src.shape[0] < 4:
        raise DegenerateConfiguration("need at least 4 point pairs")
    t_src = _normalizing_similarity(src)
    t_dst = _normalizing_similarity(dst)
    sn = src @ t_src[:2, :2].T + t_src[:2, 2]
    dn = dst @ t_dst[:2, :2].T + t_dst[:2, 2]

    n = src.shape[0]
    a = np.zeros((2 * n, 9))
    x, y = sn[:, 0], sn[:, 1]
    u, v = dn[:, 0], dn[:, 1]
    a[0::2, 0] = x
    a[0::2, 1] = y
    a[0::2, 2] = 1.0
    a[0::2, 6] = -u * x
    a[0::2, 7] = -u * y
    a[0::2, 8] = -u
    a[1::2, 3] = x
    a[1::2, 4] = y
    a[1::2, 5] = 1.0
    a[1::2, 6] = -v * x
    a[1::2, 7] = -v * y
    a[1::2, 8] = -v

    _, s, vt = np.linalg.svd(a)
    # One near-zero singular value is the solution; a second means the system
    # does not pin down a unique homography.
    if s[-2] / s[0] < 1e-12:
        raise DegenerateConfiguration("design matrix is rank-deficient")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ hn @ t_src
    return Homography(h)


def apply_homography(h: Homography, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    m = h.matrix if isinstance(h, Homography) else np.asarray(h, dtype=float)
    den = m[2, 0] * p[0] + m[2, 1] * p[1] + m[2, 2]
    if abs(den) <= 1e-12:
        raise PointAtInfinity(f"projective denominator {den:.3e} vanishes")
    return np.array(
        [
            (m[0, 0] * p[0] + m[0, 1] * p[1] + m[0, 2]) / den,
            (m[1, 0] * p[0] + m[1, 1] * p[1] + m[1, 2]) / den,
        ]
    )


def rotation_from_axis_angle(axis_angle) -> np.ndarray:
    """Rodrigues map from a rotation vector (radians) to a 3x3 matrix."""
    w = np.asarray(axis_angle, dtype=float).reshape(3)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3)
    k = w / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * kx + (1.0 - math.cos(theta)) * (kx @ kx)


def axis_angle_from_rotation(r: np.ndarray) -> np.ndarray:
    """Inverse Rodrigues map; stable for angles up to (not including) pi."""
    r = np.asarray(r, dtype=float)
    cos_theta = max(-1.0, min(1.0, (np.trace(r) - 1.0) / 2.0))
    theta = math.acos(cos_theta)
    skew = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    sin_theta = math.sin(theta)
    if sin_theta > 1e-7:
        return (theta / (2.0 * sin_theta)) * skew
    if theta < 1e-7:
        return 0.5 * skew
    # Near pi: recover the axis from the symmetric part.
    b = (r + np.eye(3)) / 2.0
    axis = np.sqrt(np.maximum(np.diag(b), 0.0))
    i = int(np.argmax(axis))
    if axis[i] > 0:
        axis = b[i] / axis[i]
        axis = axis / np.linalg.norm(axis)
    if skew @ axis < 0:
        axis = -axis
    return theta * axis
