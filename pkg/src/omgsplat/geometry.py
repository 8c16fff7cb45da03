"""Gaussian primitives, cameras, and EWA projection to screen space.

Conventions:
    * quaternions are scalar-first ``(w, x, y, z)`` and normalized before use;
    * cameras follow the pinhole/OpenCV frame: +x right, +y down, +z forward.
      ``Camera.orientation`` is camera-to-world, so its columns are the camera
      axes expressed in world coordinates;
    * pixel ``(col, row)`` has its center at ``(col + 0.5, row + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, NumericDegeneracyError

# Screen-space low-pass floor added to every projected covariance (pixels^2).
LOWPASS = 0.3
# Culling footprint in standard deviations.
CULL_SIGMA = 3.0


@dataclass
class Material:
    """Per-Gaussian reflectance parameters, each component in [0, 1]."""

    albedo: np.ndarray
    roughness: float
    metallic: float

    def __post_init__(self):
        self.albedo = np.clip(np.asarray(self.albedo, dtype=np.float64).reshape(3), 0.0, 1.0)
        self.roughness = float(np.clip(self.roughness, 0.0, 1.0))
        self.metallic = float(np.clip(self.metallic, 0.0, 1.0))

    def as_vector(self) -> np.ndarray:
        """Network input layout: albedo rgb, roughness, metallic."""
        return np.concatenate([self.albedo, [self.roughness, self.metallic]])

    @classmethod
    def from_vector(cls, v) -> "Material":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3], v[3], v[4])


@dataclass
class GaussianPrimitive:
    mean: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    raw_opacity: float
    material: Material
    normal: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        norm = np.linalg.norm(q)
        if not norm > 0:
            raise InvalidInputError("zero-norm quaternion")
        self.rotation = q / norm
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        if np.any(self.scale <= 0):
            raise InvalidInputError(f"scale must be strictly positive, got {self.scale}")
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        nn = np.linalg.norm(n)
        if not nn > 0:
            raise InvalidInputError("zero-length normal")
        self.normal = n / nn
        self.raw_opacity = float(self.raw_opacity)


@dataclass
class Camera:
    position: np.ndarray
    orientation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.orientation = np.asarray(self.orientation, dtype=np.float64).reshape(3, 3)
        R = self.orientation
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InvalidInputError("camera orientation must be a proper rotation")
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")
        if not (int(self.width) > 0 and int(self.height) > 0):
            raise InvalidInputError("image size must be positive")
        if not (0 < self.near < self.far):
            raise InvalidInputError("need 0 < near < far")
        self.width, self.height = int(self.width), int(self.height)
        self.fx, self.fy, self.cx, self.cy = map(float, (self.fx, self.fy, self.cx, self.cy))
        self.near, self.far = float(self.near), float(self.far)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, width: int, height: int,
                fov_deg: float = 45.0, near: float = 0.01, far: float = 100.0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-12:
            right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward], axis=1)
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(eye, R, f, f, width / 2.0, height / 2.0, width, height, near, far)

    @property
    def world_to_camera(self) -> np.ndarray:
        return self.orientation.T

    def pixel_centers(self) -> np.ndarray:
        """(H*W, 2) pixel centers in row-major order."""
        ys, xs = np.mgrid[0:self.height, 0:self.width]
        return np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1).astype(np.float64)

    def to_dict(self) -> dict:
        return {
            "position": self.position.tolist(),
            "orientation": self.orientation.tolist(),
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["position"], d["orientation"], d["fx"], d["fy"], d["cx"], d["cy"],
                   d["width"], d["height"], d.get("near", 0.01), d.get("far", 100.0))


@dataclass
class SplatFragment:
    index: int
    mean2d: np.ndarray
    conic: np.ndarray
    depth: float
    color: np.ndarray = field(default_factory=lambda: np.zeros(3))
    cross_section: float = 1.0
    opacity: float = 0.0


def rotation_from_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q)
    if not norm > 0:
        raise InvalidInputError("zero-norm quaternion")
    w, x, y, z = q / norm
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def build_covariance(q, s) -> np.ndarray:
    """Sigma = R diag(s^2) R^T."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise InvalidInputError(f"scale must be strictly positive, got {s}")
    M = rotation_from_quaternion(q) * s
    return M @ M.T


def project_gaussian(camera: Camera, g: GaussianPrimitive) -> SplatFragment | None:
    """Project one Gaussian. Returns ``None`` when culled.

    The returned fragment has no color/cross-section yet; the renderer fills
    those in.
    """
    W = camera.world_to_camera
    t = W @ (g.mean - camera.position)
    tx, ty, tz = t
    if tz <= camera.near or tz >= camera.far:
        return None
    J = np.array([
        [camera.fx / tz, 0.0, -camera.fx * tx / tz**2],
        [0.0, camera.fy / tz, -camera.fy * ty / tz**2],
    ])
    cov_cam = W @ build_covariance(g.rotation, g.scale) @ W.T
    cov2d = J @ cov_cam @ J.T + LOWPASS * np.eye(2)
    det = np.linalg.det(cov2d)
    if not (np.isfinite(det) and det > 0):
        raise NumericDegeneracyError(f"projected covariance is singular (det={det})")
    mean2d = np.array([camera.fx * tx / tz + camera.cx, camera.fy * ty / tz + camera.cy])
    radius = CULL_SIGMA * np.sqrt(np.linalg.eigvalsh(cov2d).max())
    if (mean2d[0] + radius < 0 or mean2d[0] - radius > camera.width
            or mean2d[1] + radius < 0 or mean2d[1] - radius > camera.height):
        return None
    conic = np.linalg.inv(cov2d)
    conic = 0.5 * (conic + conic.T)
    return SplatFragment(index=-1, mean2d=mean2d, conic=conic, depth=float(tz))


def gaussian_weight(fragment: SplatFragment, x) -> float:
    d = np.asarray(x, dtype=np.float64) - fragment.mean2d
    return float(np.exp(-0.5 * d @ fragment.conic @ d))


# ---------------------------------------------------------------------------
# Batched projection used by the fast renderer and the backward pass.


def quaternions_to_rotations(q: np.ndarray) -> np.ndarray:
    """(N, 4) raw quaternions -> (N, 3, 3) rotation matrices."""
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = qn.T
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotation_backward(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw (unnormalized) quaternions given dL/dR."""
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn.T
    g = dR
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0]
              - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=1)
    return (dqn - qn * np.sum(qn * dqn, axis=1, keepdims=True)) / norm


@dataclass
class Projection:
    """Screen-space state for all Gaussians of a scene under one camera."""

    visible: np.ndarray      # (N,) bool
    mean2d: np.ndarray       # (N, 2)
    cov2d: np.ndarray        # (N, 2, 2), low-pass included
    conic: np.ndarray        # (N, 2, 2)
    depth: np.ndarray        # (N,)
    t: np.ndarray            # (N, 3) camera-space means
    J: np.ndarray            # (N, 2, 3)
    cov_cam: np.ndarray      # (N, 3, 3)
    R: np.ndarray            # (N, 3, 3)


def project_all(camera: Camera, means, quats, scales) -> Projection:
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    n = len(means)
    W = camera.world_to_camera
    t = (means - camera.position) @ camera.orientation
    tz = t[:, 2]
    in_depth = (tz > camera.near) & (tz < camera.far)
    tz_safe = np.where(in_depth, tz, 1.0)
    tx, ty = t[:, 0], t[:, 1]

    R = quaternions_to_rotations(np.asarray(quats, dtype=np.float64).reshape(-1, 4))
    M = R * np.asarray(scales, dtype=np.float64).reshape(-1, 1, 3)
    cov3d = M @ M.transpose(0, 2, 1)
    cov_cam = W @ cov3d @ W.T

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = camera.fx / tz_safe
    J[:, 0, 2] = -camera.fx * tx / tz_safe**2
    J[:, 1, 1] = camera.fy / tz_safe
    J[:, 1, 2] = -camera.fy * ty / tz_safe**2
    cov2d = J @ cov_cam @ J.transpose(0, 2, 1)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    bad = in_depth & ~(np.isfinite(det) & (det > 0))
    if np.any(bad):
        raise NumericDegeneracyError(
            f"projected covariance is singular for Gaussians {np.flatnonzero(bad).tolist()}")
    det_safe = np.where(in_depth, det, 1.0)
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = c / det_safe
    conic[:, 0, 1] = conic[:, 1, 0] = -b / det_safe
    conic[:, 1, 1] = a / det_safe

    mean2d = np.stack([camera.fx * tx / tz_safe + camera.cx,
                       camera.fy * ty / tz_safe + camera.cy], axis=1)
    lam_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    radius = CULL_SIGMA * np.sqrt(lam_max)
    on_screen = ((mean2d[:, 0] + radius >= 0) & (mean2d[:, 0] - radius <= camera.width)
                 & (mean2d[:, 1] + radius >= 0) & (mean2d[:, 1] - radius <= camera.height))
    return Projection(in_depth & on_screen, mean2d, cov2d, conic, tz, t, J, cov_cam, R)


def projection_backward(camera: Camera, proj: Projection, scales, quats,
                        d_mean2d: np.ndarray, d_conic: np.ndarray):
    """Chain screen-space gradients back to (means, scales, raw quaternions).

    ``d_conic`` holds dL/dQ treating all four entries of the 2x2 inverse
    covariance as independent. Rows for culled Gaussians must be zero.
    """
    scales = np.asarray(scales, dtype=np.float64).reshape(-1, 3)
    W = camera.world_to_camera
    Q = proj.conic
    d_cov2d = -Q @ d_conic @ Q
    d_cov2d = 0.5 * (d_cov2d + d_cov2d.transpose(0, 2, 1))
    J = proj.J
    dJ = 2.0 * d_cov2d @ J @ proj.cov_cam
    d_cov_cam = J.transpose(0, 2, 1) @ d_cov2d @ J
    d_cov3d = W.T @ d_cov_cam @ W
    M = proj.R * scales[:, None, :]
    dM = 2.0 * d_cov3d @ M
    d_scales = np.sum(dM * proj.R, axis=1)
    d_quats = rotation_backward(np.asarray(quats, dtype=np.float64).reshape(-1, 4), dM * scales[:, None, :])

    vis = proj.visible
    tz = np.where(vis, proj.t[:, 2], 1.0)
    tx, ty = proj.t[:, 0], proj.t[:, 1]
    fx, fy = camera.fx, camera.fy
    dt = np.zeros((len(tz), 3))
    dt[:, 0] = d_mean2d[:, 0] * fx / tz - dJ[:, 0, 2] * fx / tz**2
    dt[:, 1] = d_mean2d[:, 1] * fy / tz - dJ[:, 1, 2] * fy / tz**2
    dt[:, 2] = (-d_mean2d[:, 0] * fx * tx / tz**2 - d_mean2d[:, 1] * fy * ty / tz**2
                - dJ[:, 0, 0] * fx / tz**2 + dJ[:, 0, 2] * 2 * fx * tx / tz**3
                - dJ[:, 1, 1] * fy / tz**2 + dJ[:, 1, 2] * 2 * fy * ty / tz**3)
    d_means = dt @ camera.orientation.T
    mask = vis[:, None]
    return d_means * mask, d_scales * mask, d_quats * mask
