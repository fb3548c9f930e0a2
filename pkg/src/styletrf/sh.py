"""Real spherical-harmonics basis evaluation (degrees 0-3).

Hard-coded Cartesian polynomial tables, the standard choice for
view-dependent color in voxel radiance fields.
"""

from __future__ import annotations

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

MAX_DEGREE = 3


def num_coeffs(degree: int) -> int:
    """Number of basis functions for a given maximum degree."""
    return (degree + 1) ** 2


def eval_basis(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Evaluate the real SH basis at unit directions.

    Args:
        degree: maximum SH degree, 0 <= degree <= 3.
        dirs: (..., 3) unit direction vectors.

    Returns:
        (..., (degree+1)**2) basis values.
    """
    if not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"sh degree must be in [0, {MAX_DEGREE}], got {degree}")
    dirs = np.asarray(dirs)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (num_coeffs(degree),), dtype=dirs.dtype)
    out[..., 0] = SH_C0
    if degree >= 1:
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out[..., 4] = SH_C2[0] * xy
        out[..., 5] = SH_C2[1] * yz
        out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * xz
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = SH_C3[1] * xy * z
        out[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out
