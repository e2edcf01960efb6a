"""Real spherical-harmonics color up to degree 3, with the basis Jacobian.

Colors are ``sum_k c_k Y_k(dir) + 0.5`` clamped at zero, so all-zero
coefficients render mid-gray. Coefficient layout per primitive is
``(3, (deg + 1) ** 2)``: one row per RGB channel.
"""

import numpy as np

from .errors import ShapeError, ValidationError

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
      -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def num_coeffs(deg: int) -> int:
    return (deg + 1) ** 2


def sh_basis(dirs, deg: int):
    """(N, 3) unit directions -> (N, (deg+1)^2) basis values."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full_like(x, C0)]
    if deg > 0:
        out += [-C1 * y, C1 * z, -C1 * x]
    if deg > 1:
        xx, yy, zz = x * x, y * y, z * z
        out += [C2[0] * x * y, C2[1] * y * z, C2[2] * (2 * zz - xx - yy),
                C2[3] * x * z, C2[4] * (xx - yy)]
    if deg > 2:
        out += [C3[0] * y * (3 * xx - yy), C3[1] * x * y * z,
                C3[2] * y * (4 * zz - xx - yy), C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
                C3[4] * x * (4 * zz - xx - yy), C3[5] * z * (xx - yy),
                C3[6] * x * (xx - 3 * yy)]
    return np.stack(out, axis=-1)


def sh_basis_jacobian(dirs, deg: int):
    """d basis / d dir as (N, K, 3), treating x, y, z as independent."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if deg > 0:
        c = np.full_like(x, C1)
        rows += [(zero, -c, zero), (zero, zero, c), (-c, zero, zero)]
    if deg > 1:
        rows += [(C2[0] * y, C2[0] * x, zero),
                 (zero, C2[1] * z, C2[1] * y),
                 (-2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z),
                 (C2[3] * z, zero, C2[3] * x),
                 (2 * C2[4] * x, -2 * C2[4] * y, zero)]
    if deg > 2:
        xx, yy, zz = x * x, y * y, z * z
        rows += [(C3[0] * 6 * x * y, C3[0] * (3 * xx - 3 * yy), zero),
                 (C3[1] * y * z, C3[1] * x * z, C3[1] * x * y),
                 (C3[2] * -2 * x * y, C3[2] * (4 * zz - xx - 3 * yy), C3[2] * 8 * y * z),
                 (C3[3] * -6 * x * z, C3[3] * -6 * y * z, C3[3] * (6 * zz - 3 * xx - 3 * yy)),
                 (C3[4] * (4 * zz - 3 * xx - yy), C3[4] * -2 * x * y, C3[4] * 8 * x * z),
                 (C3[5] * 2 * x * z, C3[5] * -2 * y * z, C3[5] * (xx - yy)),
                 (C3[6] * (3 * xx - 3 * yy), C3[6] * -6 * x * y, zero)]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def sh_colors(coeffs, dirs, deg: int):
    """Batched colors. coeffs (N, 3, K>=(deg+1)^2), dirs (N, 3) unit.

    Returns (colors, raw) where raw is the pre-clamp value, kept for backward.
    """
    k = num_coeffs(deg)
    if coeffs.shape[-1] < k:
        raise ShapeError(f"degree {deg} needs {k} coefficients, got {coeffs.shape[-1]}")
    basis = sh_basis(dirs, deg)
    raw = np.einsum("nck,nk->nc", coeffs[..., :k], basis) + 0.5
    return np.maximum(raw, 0.0), raw


def sh_colors_vjp(coeffs, dirs, deg: int, raw, grad_colors):
    """Return (d/dcoeffs, d/ddirs) for ``sh_colors``; dirs treated as free 3-vectors."""
    k = num_coeffs(deg)
    g = np.where(raw > 0, grad_colors, 0.0)
    basis = sh_basis(dirs, deg)
    grad_coeffs = np.zeros_like(coeffs)
    grad_coeffs[..., :k] = g[..., :, None] * basis[..., None, :]
    jac = sh_basis_jacobian(dirs, deg)
    grad_dirs = np.einsum("nc,nck,nkd->nd", g, coeffs[..., :k], jac)
    return grad_coeffs, grad_dirs


def evaluate_sh(coeffs, view_dir, deg: int):
    """RGB of one primitive seen along a unit ``view_dir``."""
    view_dir = np.asarray(view_dir, dtype=np.float64)
    if abs(np.linalg.norm(view_dir) - 1.0) > 1e-6:
        raise ValidationError("view direction must be unit length")
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim != 2 or coeffs.shape[0] != 3:
        raise ShapeError("coefficients must be (3, K)")
    colors, _ = sh_colors(coeffs[None], view_dir[None], deg)
    return colors[0]
