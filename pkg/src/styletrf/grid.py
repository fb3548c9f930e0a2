"""Factored (vector-matrix) voxel radiance field.

A dense 3D field is represented as a sum over three axis modes: for mode m
each component is the outer product of a vector along axis m and a matrix
over the two remaining axes.  Density and appearance use separate component
stacks; appearance coefficients are mapped through a learned linear basis to
per-channel SH coefficients.  Interpolation is linear along the vector axis
and bilinear in the matrix plane, which together reproduce exact trilinear
interpolation of the expanded dense grid.

Learnable arrays are stored float32 (the checkpoint precision); sampling and
loss math promote to a caller-chosen dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sh
from .errors import ContractViolation, OutOfBoundsError

# For axis m the factor vector runs along m and the matrix covers the two
# remaining axes in ascending order: (rows, cols) below.
MAT_AXES = ((1, 2), (0, 2), (0, 1))

AXIS_NAMES = "xyz"


@dataclass
class VMGrid:
    """Vector-matrix factored density + appearance field.

    Attributes:
        aabb: (2, 3) float64 world bounds, row 0 = min corner, row 1 = max.
        density_vecs: per axis, (R_sigma, N_axis) float32 factor vectors.
        density_mats: per axis, (R_sigma, Na, Nb) float32 factor matrices,
            (a, b) = the other two axes in ascending order (MAT_AXES).
        app_vecs / app_mats: same layout with R_c components.
        basis: (3 * R_c, F) float32 linear map from concatenated appearance
            coefficients (mode-major: all x components, then y, then z) to the
            F-dimensional feature.  F = 3 * (sh_degree + 1)**2; the feature is
            split channel-major into three SH coefficient blocks.
        sh_degree: SH degree used by decode_color.
    """

    aabb: np.ndarray
    density_vecs: list
    density_mats: list
    app_vecs: list
    app_mats: list
    basis: np.ndarray
    sh_degree: int

    def __post_init__(self):
        self.aabb = np.asarray(self.aabb, dtype=np.float64).reshape(2, 3)
        if not np.all(self.aabb[0] < self.aabb[1]):
            raise ContractViolation(f"aabb min must be < max, got {self.aabb.tolist()}")
        res = self.resolution
        if min(res) < 2:
            raise ContractViolation(f"resolution must be >= 2 per axis, got {res}")
        for vecs, mats, tag in (
            (self.density_vecs, self.density_mats, "density"),
            (self.app_vecs, self.app_mats, "appearance"),
        ):
            if len(vecs) != 3 or len(mats) != 3:
                raise ContractViolation(f"{tag} factors need one entry per axis")
            rank = vecs[0].shape[0]
            for ax in range(3):
                a, b = MAT_AXES[ax]
                if vecs[ax].shape != (rank, res[ax]):
                    raise ContractViolation(
                        f"{tag} vector {AXIS_NAMES[ax]} has shape {vecs[ax].shape}, "
                        f"expected {(rank, res[ax])}"
                    )
                if mats[ax].shape != (rank, res[a], res[b]):
                    raise ContractViolation(
                        f"{tag} matrix {AXIS_NAMES[ax]} has shape {mats[ax].shape}, "
                        f"expected {(rank, res[a], res[b])}"
                    )
        feat_dim = 3 * sh.num_coeffs(self.sh_degree)
        if self.basis.shape != (3 * self.rank_appearance, feat_dim):
            raise ContractViolation(
                f"basis shape {self.basis.shape} incompatible with rank "
                f"{self.rank_appearance} and sh_degree {self.sh_degree}"
            )

    @property
    def resolution(self):
        return tuple(int(v.shape[1]) for v in self.density_vecs)

    @property
    def rank_density(self):
        return int(self.density_vecs[0].shape[0])

    @property
    def rank_appearance(self):
        return int(self.app_vecs[0].shape[0])

    @property
    def feature_dim(self):
        return int(self.basis.shape[1])

    @property
    def num_params(self):
        """Total learnable parameter count (factors + basis)."""
        return sum(a.size for _, a in walk_arrays(self))

    def copy(self) -> "VMGrid":
        return VMGrid(
            aabb=self.aabb.copy(),
            density_vecs=[a.copy() for a in self.density_vecs],
            density_mats=[a.copy() for a in self.density_mats],
            app_vecs=[a.copy() for a in self.app_vecs],
            app_mats=[a.copy() for a in self.app_mats],
            basis=self.basis.copy(),
            sh_degree=self.sh_degree,
        )


def walk_arrays(g):
    """Yield (name, array) for every learnable array in canonical order.

    The order is frozen: it defines the checkpoint layout and the pairing of
    optimizer state with parameters.  Works for VMGrid and GridGradients.
    """
    for ax in range(3):
        yield f"density_vec_{AXIS_NAMES[ax]}", g.density_vecs[ax]
    for ax in range(3):
        yield f"density_mat_{AXIS_NAMES[ax]}", g.density_mats[ax]
    for ax in range(3):
        yield f"app_vec_{AXIS_NAMES[ax]}", g.app_vecs[ax]
    for ax in range(3):
        yield f"app_mat_{AXIS_NAMES[ax]}", g.app_mats[ax]
    yield "basis", g.basis


def group_of(name: str) -> str:
    """Map an array name from walk_arrays to its trainable group."""
    if name.startswith("density"):
        return "density"
    if name.startswith("app"):
        return "appearance"
    return "basis"


@dataclass
class GridGradients:
    """Accumulated partials, shape-congruent with a VMGrid (float64)."""

    density_vecs: list
    density_mats: list
    app_vecs: list
    app_mats: list
    basis: np.ndarray

    @classmethod
    def zeros_like(cls, grid: VMGrid) -> "GridGradients":
        return cls(
            density_vecs=[np.zeros(a.shape) for a in grid.density_vecs],
            density_mats=[np.zeros(a.shape) for a in grid.density_mats],
            app_vecs=[np.zeros(a.shape) for a in grid.app_vecs],
            app_mats=[np.zeros(a.shape) for a in grid.app_mats],
            basis=np.zeros(grid.basis.shape),
        )

    def add_scaled(self, other: "GridGradients", scale: float = 1.0):
        for (_, dst), (_, src) in zip(walk_arrays(self), walk_arrays(other)):
            dst += scale * src
        return self

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(a))) if a.size else 0.0 for _, a in walk_arrays(self))


def init_grid(
    resolution,
    aabb=((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5)),
    rank_density: int = 8,
    rank_appearance: int = 16,
    sh_degree: int = 1,
    seed: int = 0,
    init_scale: float = 0.1,
) -> VMGrid:
    """Build a randomly initialized grid.

    Factors are zero-mean uniform with amplitude init_scale / sqrt(rank) so
    that initial densities stay near zero and early transmittance is high.
    The basis uses a fan-in uniform init.
    """
    res = tuple(int(n) for n in resolution)
    rng = np.random.default_rng(seed)

    def factors(rank):
        amp = init_scale / np.sqrt(rank)
        vecs, mats = [], []
        for ax in range(3):
            a, b = MAT_AXES[ax]
            vecs.append(rng.uniform(-amp, amp, size=(rank, res[ax])).astype(np.float32))
            mats.append(rng.uniform(-amp, amp, size=(rank, res[a], res[b])).astype(np.float32))
        return vecs, mats

    d_vecs, d_mats = factors(rank_density)
    a_vecs, a_mats = factors(rank_appearance)
    feat_dim = 3 * sh.num_coeffs(sh_degree)
    b_amp = 1.0 / np.sqrt(3 * rank_appearance)
    basis = rng.uniform(-b_amp, b_amp, size=(3 * rank_appearance, feat_dim)).astype(np.float32)
    return VMGrid(
        aabb=np.asarray(aabb, dtype=np.float64),
        density_vecs=d_vecs,
        density_mats=d_mats,
        app_vecs=a_vecs,
        app_mats=a_mats,
        basis=basis,
        sh_degree=sh_degree,
    )


# ---------------------------------------------------------------------------
# sampling


def grid_coords(grid: VMGrid, pts: np.ndarray, dtype=np.float64):
    """Map world points to continuous grid coordinates, split into cell index
    and in-cell fraction.

    Returns (idx, frac), each (..., 3); idx is clipped to [0, N-2] so that
    idx + 1 is always addressable.  Callers enforce the bounds contract.
    """
    pts = np.asarray(pts, dtype=dtype)
    res = np.array(grid.resolution)
    lo = grid.aabb[0].astype(dtype)
    hi = grid.aabb[1].astype(dtype)
    u = (pts - lo) / (hi - lo) * (res - 1).astype(dtype)
    u = np.clip(u, 0.0, (res - 1).astype(dtype))
    idx = np.minimum(u.astype(np.int64), res - 2)
    frac = u - idx
    return idx, frac


def _check_inside(grid: VMGrid, pts: np.ndarray):
    pts = np.asarray(pts, dtype=np.float64)
    lo, hi = grid.aabb
    if np.any(pts < lo) or np.any(pts > hi):
        bad = pts[np.any((pts < lo) | (pts > hi), axis=-1)]
        raise OutOfBoundsError(
            f"{bad.reshape(-1, 3).shape[0]} query point(s) outside aabb "
            f"{grid.aabb.tolist()}"
        )
    return pts


def _interp_factors(vecs, mats, idx, frac, dtype):
    """Per-mode interpolated (vector, matrix) values at flattened points.

    idx/frac: (P, 3).  Returns list over modes of (V, M), each (R, P).
    """
    out = []
    for ax in range(3):
        a, b = MAT_AXES[ax]
        v = vecs[ax].astype(dtype, copy=False)
        i0 = idx[:, ax]
        f = frac[:, ax]
        V = v[:, i0] * (1.0 - f) + v[:, i0 + 1] * f

        m = mats[ax].astype(dtype, copy=False)
        nb = m.shape[2]
        m2 = m.reshape(m.shape[0], -1)
        ja, fa = idx[:, a], frac[:, a]
        jb, fb = idx[:, b], frac[:, b]
        base = ja * nb + jb
        M = (
            m2[:, base] * ((1.0 - fa) * (1.0 - fb))
            + m2[:, base + 1] * ((1.0 - fa) * fb)
            + m2[:, base + nb] * (fa * (1.0 - fb))
            + m2[:, base + nb + 1] * (fa * fb)
        )
        out.append((V, M))
    return out


def sample_density(grid: VMGrid, pts: np.ndarray) -> np.ndarray:
    """Density at world points (scalar for a single (3,) point).

    Raises OutOfBoundsError when any point lies outside the aabb.
    """
    pts = _check_inside(grid, pts)
    single = pts.ndim == 1
    flat = pts.reshape(-1, 3)
    idx, frac = grid_coords(grid, flat)
    raw = np.zeros(flat.shape[0])
    for V, M in _interp_factors(grid.density_vecs, grid.density_mats, idx, frac, np.float64):
        raw += np.einsum("rp,rp->p", V, M)
    sigma = np.maximum(raw, 0.0)
    return float(sigma[0]) if single else sigma.reshape(pts.shape[:-1])


def sample_coeffs(grid: VMGrid, pts: np.ndarray) -> np.ndarray:
    """Raw concatenated appearance coefficients (..., 3 * R_c), mode-major."""
    pts = _check_inside(grid, pts)
    flat = pts.reshape(-1, 3)
    idx, frac = grid_coords(grid, flat)
    parts = [
        V * M for V, M in _interp_factors(grid.app_vecs, grid.app_mats, idx, frac, np.float64)
    ]
    coeffs = np.concatenate(parts, axis=0).T  # (P, 3*R_c)
    return coeffs.reshape(pts.shape[:-1] + (coeffs.shape[1],))


def sample_feature(grid: VMGrid, pts: np.ndarray) -> np.ndarray:
    """Appearance feature (..., F) at world points."""
    pts = np.asarray(pts, dtype=np.float64)
    coeffs = sample_coeffs(grid, pts)
    return coeffs @ grid.basis.astype(np.float64)


def sigmoid(x):
    # tanh form avoids overflow for large negative inputs
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def decode_color(feature: np.ndarray, view_dir: np.ndarray, sh_degree: int) -> np.ndarray:
    """Feature -> rgb in (0,1)^3 for a unit view direction.

    The feature is split channel-major into three blocks of (sh_degree+1)**2
    SH coefficients; each block is contracted with the SH basis and squashed.
    """
    feature = np.asarray(feature, dtype=np.float64)
    view_dir = np.asarray(view_dir, dtype=np.float64)
    norm = np.linalg.norm(view_dir, axis=-1)
    if np.any(np.abs(norm - 1.0) > 1e-6):
        raise ContractViolation("view_dir must be unit length (|1 - |d|| <= 1e-6)")
    k = sh.num_coeffs(sh_degree)
    if feature.shape[-1] != 3 * k:
        raise ContractViolation(
            f"feature dim {feature.shape[-1]} != 3*(sh_degree+1)^2 = {3 * k}"
        )
    basis = sh.eval_basis(sh_degree, view_dir)  # (..., k)
    blocks = feature.reshape(feature.shape[:-1] + (3, k))
    raw = np.einsum("...ck,...k->...c", blocks, basis)
    return sigmoid(raw)


# ---------------------------------------------------------------------------
# regularizers


def tv_loss(grid: VMGrid) -> float:
    """Mean absolute neighbor difference over all factors.

    Density differences weigh 10x appearance differences; the sum is divided
    by the grid's total learnable parameter count.
    """
    total = 0.0
    for arrs, weight in ((grid.density_vecs, 1.0), (grid.app_vecs, 0.1)):
        for a in arrs:
            total += weight * float(np.abs(np.diff(a.astype(np.float64), axis=1)).sum())
    for arrs, weight in ((grid.density_mats, 1.0), (grid.app_mats, 0.1)):
        for a in arrs:
            a64 = a.astype(np.float64)
            total += weight * float(np.abs(np.diff(a64, axis=1)).sum())
            total += weight * float(np.abs(np.diff(a64, axis=2)).sum())
    return total / grid.num_params


def tv_grads(grid: VMGrid, out: GridGradients, scale: float = 1.0):
    """Accumulate d(tv_loss)/d(factors) * scale into out.

    Subgradient 0 where neighboring entries are equal.
    """
    n = grid.num_params

    def accum(src, dst, weight, axis):
        d = np.sign(np.diff(src.astype(np.float64), axis=axis)) * (weight * scale / n)
        head = [slice(None)] * src.ndim
        tail = [slice(None)] * src.ndim
        head[axis] = slice(0, -1)
        tail[axis] = slice(1, None)
        dst[tuple(tail)] += d
        dst[tuple(head)] -= d

    for ax in range(3):
        accum(grid.density_vecs[ax], out.density_vecs[ax], 1.0, 1)
        accum(grid.app_vecs[ax], out.app_vecs[ax], 0.1, 1)
        for axis in (1, 2):
            accum(grid.density_mats[ax], out.density_mats[ax], 1.0, axis)
            accum(grid.app_mats[ax], out.app_mats[ax], 0.1, axis)
    return out


def _factor_count(grid: VMGrid) -> int:
    return sum(
        a.size
        for a in (
            *grid.density_vecs,
            *grid.density_mats,
            *grid.app_vecs,
            *grid.app_mats,
        )
    )


def l1_reg(grid: VMGrid) -> float:
    """Mean absolute value over density and appearance factor entries."""
    total = 0.0
    for a in (*grid.density_vecs, *grid.density_mats, *grid.app_vecs, *grid.app_mats):
        total += float(np.abs(a.astype(np.float64)).sum())
    return total / _factor_count(grid)


def l1_grads(grid: VMGrid, out: GridGradients, scale: float = 1.0):
    """Accumulate d(l1_reg)/d(factors) * scale into out (subgradient 0 at 0)."""
    s = scale / _factor_count(grid)
    for (name, src), (_, dst) in zip(walk_arrays(grid), walk_arrays(out)):
        if name == "basis":
            continue
        dst += np.sign(src.astype(np.float64)) * s
    return out


# ---------------------------------------------------------------------------
# upsampling


def _resample_linear(arr: np.ndarray, new_n: int, axis: int) -> np.ndarray:
    """Endpoint-aligned linear resampling along one axis."""
    old_n = arr.shape[axis]
    a64 = arr.astype(np.float64)
    if new_n == old_n:
        out = a64
    else:
        u = np.arange(new_n) * ((old_n - 1) / (new_n - 1))
        i0 = np.minimum(u.astype(np.int64), old_n - 2)
        f = u - i0
        lo = np.take(a64, i0, axis=axis)
        hi = np.take(a64, i0 + 1, axis=axis)
        shape = [1] * arr.ndim
        shape[axis] = new_n
        f = f.reshape(shape)
        out = lo * (1.0 - f) + hi * f
    return out


def upsample(grid: VMGrid, new_resolution) -> VMGrid:
    """Resample every factor to a finer resolution.

    Vectors are linearly resampled, matrices bilinearly; basis, bounds, and
    ranks are untouched.  Identity at unchanged resolution is bit-exact.
    """
    new_res = tuple(int(n) for n in new_resolution)
    old_res = grid.resolution
    if any(n < o for n, o in zip(new_res, old_res)):
        raise ContractViolation(f"cannot shrink resolution {old_res} -> {new_res}")

    def vecs(arrs):
        return [
            _resample_linear(arrs[ax], new_res[ax], 1).astype(np.float32) for ax in range(3)
        ]

    def mats(arrs):
        out = []
        for ax in range(3):
            a, b = MAT_AXES[ax]
            m = _resample_linear(arrs[ax], new_res[a], 1)
            m = _resample_linear(m, new_res[b], 2)
            out.append(m.astype(np.float32))
        return out

    return VMGrid(
        aabb=grid.aabb.copy(),
        density_vecs=vecs(grid.density_vecs),
        density_mats=mats(grid.density_mats),
        app_vecs=vecs(grid.app_vecs),
        app_mats=mats(grid.app_mats),
        basis=grid.basis.copy(),
        sh_degree=grid.sh_degree,
    )


def densify(grid: VMGrid, what: str = "density") -> np.ndarray:
    """Expand factors into a dense grid; density -> (Nx,Ny,Nz), appearance ->
    (Nx,Ny,Nz,3*R_c).  For small grids and tests only.
    """
    res = grid.resolution
    if what == "density":
        vecs, mats = grid.density_vecs, grid.density_mats
    elif what == "appearance":
        vecs, mats = grid.app_vecs, grid.app_mats
    else:
        raise ValueError(what)
    rank = vecs[0].shape[0]
    parts = []
    for ax in range(3):
        v = vecs[ax].astype(np.float64)
        m = mats[ax].astype(np.float64)
        if ax == 0:
            t = np.einsum("ri,rjk->rijk", v, m)
        elif ax == 1:
            t = np.einsum("rj,rik->rijk", v, m)
        else:
            t = np.einsum("rk,rij->rijk", v, m)
        parts.append(t)
    if what == "density":
        return sum(p.sum(axis=0) for p in parts)
    # appearance keeps per-mode, per-component channels, mode-major
    return np.concatenate(parts, axis=0).transpose(1, 2, 3, 0)
