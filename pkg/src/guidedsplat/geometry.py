"""Camera-space math: unprojection, Gaussian centers, covariances, EWA projection.

Pixel ``(ux, uy)`` has its center at integer coordinates; ``ux`` indexes columns.
Camera frame is x right, y down, z forward. ``unproject_depth`` and
``gaussian_centers`` accept numpy arrays or torch tensors so the decoder can
differentiate through them; covariance and projection are numpy-only and come
with hand-written vector-Jacobian products used by the rasterizer backward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import Culled, ShapeError, ValidationError

EPS_2D = 0.3  # px^2 low-pass floor added to every projected covariance


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def scaled(self, height: int, width: int) -> "Camera":
        sx, sy = width / self.width, height / self.height
        return Camera(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)


@dataclass(frozen=True)
class Pose:
    """Rigid world-to-camera transform ``x_cam = R @ x_world + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ShapeError("rotation must be 3x3")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(r) - 1) > 1e-6:
            raise ValidationError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def camera_center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation


def _is_torch(x) -> bool:
    return type(x).__module__.startswith("torch")


def _stack(xs, axis=-1):
    if _is_torch(xs[0]):
        import torch

        return torch.stack(xs, dim=axis)
    return np.stack(xs, axis=axis)


def _pixel_grid(depth, cam: Camera):
    h, w = depth.shape[:2]
    uy, ux = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    if _is_torch(depth):
        import torch

        ux = torch.as_tensor(ux, dtype=depth.dtype)
        uy = torch.as_tensor(uy, dtype=depth.dtype)
    else:
        ux = ux.astype(depth.dtype, copy=False)
        uy = uy.astype(depth.dtype, copy=False)
    return ux, uy


def _any(mask) -> bool:
    return bool(mask.any())


def unproject_depth(depth, cam: Camera):
    """Lift an (H, W) z-depth map to an (H, W, 3) camera-space point map."""
    if depth.ndim != 2 or tuple(depth.shape) != (cam.height, cam.width):
        raise ShapeError(f"depth must be ({cam.height}, {cam.width}), got {tuple(depth.shape)}")
    if _any(~(depth > 0)):
        raise ValidationError("depth must be strictly positive")
    ux, uy = _pixel_grid(depth, cam)
    x = (ux - cam.cx) * depth / cam.fx
    y = (uy - cam.cy) * depth / cam.fy
    return _stack([x, y, depth], axis=-1)


def gaussian_centers(depth, delta, offsets, cam: Camera):
    """Centers from refined depth ``d + delta`` plus free 3D offsets.

    depth (H, W), delta (H, W, G), offsets (H, W, G, 3) -> (H*W*G, 3), ordered
    row-major over pixels with the G sets of a pixel adjacent.
    """
    h, w = depth.shape
    if tuple(delta.shape[:2]) != (h, w) or tuple(offsets.shape[:3]) != tuple(delta.shape):
        raise ShapeError("delta must be (H, W, G) and offsets (H, W, G, 3)")
    refined = depth[:, :, None] + delta
    bad = ~(refined > 0)
    if _any(bad):
        idx = np.argwhere(np.asarray(bad.detach() if _is_torch(bad) else bad))[0]
        raise ValidationError(
            f"refined depth is not positive at pixel (row={idx[0]}, col={idx[1]}), set {idx[2]}"
        )
    ux, uy = _pixel_grid(depth, cam)
    x = (ux[:, :, None] - cam.cx) * refined / cam.fx + offsets[..., 0]
    y = (uy[:, :, None] - cam.cy) * refined / cam.fy + offsets[..., 1]
    z = refined + offsets[..., 2]
    return _stack([x, y, z], axis=-1).reshape(-1, 3)


# --- rotations and covariances -------------------------------------------------

def normalize_quat(q):
    q = np.asarray(q, dtype=np.result_type(q, np.float32))
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValidationError("zero quaternion")
    return q / n, n


def quat_to_rotmat(q):
    """Rotation matrices from unit quaternions in (w, x, y, z) order."""
    w, x, y, z = (q[..., i] for i in range(4))
    r = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotmat_vjp(q, grad_r):
    """Pull d(loss)/dR back to the (unit) quaternion components."""
    w, x, y, z = (q[..., i] for i in range(4))
    g = grad_r
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([gw, gx, gy, gz], axis=-1)


def build_covariance(quat, log_scales):
    """Sigma = R S S^T R^T with S = diag(exp(log_scales)); batched over leading dims."""
    quat = np.asarray(quat)
    log_scales = np.asarray(log_scales)
    if quat.shape[-1] != 4 or log_scales.shape[-1] != 3:
        raise ShapeError("quat must end in 4 and log_scales in 3")
    qn, _ = normalize_quat(quat)
    m = quat_to_rotmat(qn) * np.exp(log_scales)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def covariance_vjp(quat, log_scales, grad_sigma):
    """Return (d/dquat, d/dlog_scales) given d(loss)/dSigma (full 3x3, any symmetry)."""
    qn, norm = normalize_quat(np.asarray(quat))
    r = quat_to_rotmat(qn)
    s = np.exp(log_scales)
    m = r * s[..., None, :]
    gsym = grad_sigma + np.swapaxes(grad_sigma, -1, -2)
    grad_m = gsym @ m
    grad_r = grad_m * s[..., None, :]
    grad_s = np.sum(grad_m * r, axis=-2)
    grad_qn = rotmat_vjp(qn, grad_r)
    grad_q = (grad_qn - qn * np.sum(qn * grad_qn, axis=-1, keepdims=True)) / norm
    return grad_q, grad_s * s


# --- projection ------------------------------------------------------------------

@dataclass
class Projection:
    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2), includes the EPS_2D floor
    depth: np.ndarray  # (N,)
    t_cam: np.ndarray  # (N, 3)
    jac: np.ndarray  # (N, 2, 3)
    valid: np.ndarray  # (N,) bool, inside (near, far)


def _jacobian(t, cam: Camera):
    tx, ty, tz = t[..., 0], t[..., 1], t[..., 2]
    jac = np.zeros(t.shape[:-1] + (2, 3), dtype=t.dtype)
    jac[..., 0, 0] = cam.fx / tz
    jac[..., 0, 2] = -cam.fx * tx / (tz * tz)
    jac[..., 1, 1] = cam.fy / tz
    jac[..., 1, 2] = -cam.fy * ty / (tz * tz)
    return jac


def project_gaussians(mu, sigma, pose: Pose, cam: Camera, near=0.01, far=100.0,
                      eps2d=EPS_2D) -> Projection:
    mu = np.asarray(mu)
    dtype = mu.dtype
    rot = pose.rotation.astype(dtype)
    t = mu @ rot.T + pose.translation.astype(dtype)
    tz = t[..., 2]
    valid = (tz > near) & (tz < far)
    safe = t.copy()
    safe[..., 2] = np.where(valid, tz, 1.0)
    jac = _jacobian(safe, cam)
    mean2d = np.stack([cam.fx * safe[..., 0] / safe[..., 2] + cam.cx,
                       cam.fy * safe[..., 1] / safe[..., 2] + cam.cy], axis=-1)
    m = jac @ rot
    cov2d = m @ sigma @ np.swapaxes(m, -1, -2) + eps2d * np.eye(2, dtype=dtype)
    return Projection(mean2d, cov2d, tz, t, jac, valid)


def project_gaussian(mu, sigma, pose: Pose, cam: Camera, near=0.01, far=100.0,
                     eps2d=EPS_2D):
    """Project one Gaussian; returns (mean2d, cov2d, depth) or raises ``Culled``."""
    p = project_gaussians(np.asarray(mu, dtype=np.float64)[None],
                          np.asarray(sigma, dtype=np.float64)[None], pose, cam, near, far, eps2d)
    if not p.valid[0]:
        raise Culled(f"camera depth {p.depth[0]:.4g} outside ({near}, {far})")
    return p.mean2d[0], p.cov2d[0], float(p.depth[0])


def projection_vjp(proj: Projection, sigma, pose: Pose, cam: Camera, grad_mean2d, grad_cov2d):
    """Pull gradients on (mean2d, cov2d) back to (mu, Sigma) in the source frame."""
    dtype = proj.t_cam.dtype
    rot = pose.rotation.astype(dtype)
    t = proj.t_cam
    tx, ty, tz = t[..., 0], t[..., 1], t[..., 2]
    jac = proj.jac
    m = jac @ rot
    g = grad_cov2d
    grad_sigma = np.swapaxes(m, -1, -2) @ g @ m
    grad_m = (g + np.swapaxes(g, -1, -2)) @ m @ sigma
    gj = grad_m @ rot.T
    inv_z2 = 1.0 / (tz * tz)
    grad_t = np.einsum("nij,ni->nj", jac, grad_mean2d)
    grad_t[..., 0] += -cam.fx * inv_z2 * gj[..., 0, 2]
    grad_t[..., 1] += -cam.fy * inv_z2 * gj[..., 1, 2]
    grad_t[..., 2] += (-cam.fx * inv_z2 * gj[..., 0, 0] - cam.fy * inv_z2 * gj[..., 1, 1]
                       + 2 * cam.fx * tx * inv_z2 / tz * gj[..., 0, 2]
                       + 2 * cam.fy * ty * inv_z2 / tz * gj[..., 1, 2])
    grad_mu = grad_t @ rot
    return grad_mu, grad_sigma
