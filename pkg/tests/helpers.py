"""Shared grid builders and reference oracles for the test suite.

Everything here is deliberately independent of the library internals it is
used to check: the dense-expansion, marching, and finite-difference oracles
re-derive their answers from first principles so that agreement is evidence,
not circularity.
"""

import numpy as np

from styletrf.camera import Camera, look_at
from styletrf.grid import VMGrid, init_grid, walk_arrays
from styletrf.optim import GradMask, RayBatch, TrainConfig, loss_and_grads
from styletrf.render import RenderConfig


def constant_grid(
    resolution=(4, 4, 4),
    density_value=1.0,
    appearance_value=0.0,
    rank_density=1,
    rank_appearance=1,
    sh_degree=0,
    basis=None,
    aabb=((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5)),
):
    """Grid whose factor entries are all one constant per field group."""
    g = init_grid(
        resolution,
        aabb=aabb,
        rank_density=rank_density,
        rank_appearance=rank_appearance,
        sh_degree=sh_degree,
        seed=0,
    )
    for a in (*g.density_vecs, *g.density_mats):
        a[...] = density_value
    for a in (*g.app_vecs, *g.app_mats):
        a[...] = appearance_value
    if basis is not None:
        g.basis[...] = np.asarray(basis, dtype=np.float32)
    return g


def zero_grid(resolution=(4, 4, 4), **kw):
    return constant_grid(resolution, density_value=0.0, appearance_value=0.0, **kw)


def random_grid(resolution=(4, 4, 4), seed=0, init_scale=1.0, **kw):
    """init_grid with O(1) factor entries by default."""
    return init_grid(resolution, seed=seed, init_scale=init_scale, **kw)


def make_kink_safe_grid(seed=0):
    """Small random grid safe for central finite differences at h = 1e-3.

    Two adjustments keep every subgradient kink either exactly symmetric or
    out of FD reach: factor entries are quantized to multiples of 0.05, so
    neighbor differences and entries are either exactly 0 (where central FD
    of |x| is also exactly 0) or at least 0.05 away from a sign change; and
    density factors get a +0.3 offset after abs(), so the relu input stays
    strictly positive for every sample under any single 1e-3 perturbation.
    """
    g = init_grid(
        (4, 4, 4),
        rank_density=2,
        rank_appearance=3,
        sh_degree=1,
        seed=seed,
        init_scale=0.5,
    )
    for name, a in walk_arrays(g):
        if name != "basis":
            a[...] = (np.round(a / 0.05) * 0.05).astype(np.float32)
    for a in (*g.density_vecs, *g.density_mats):
        a[...] = np.abs(a) + 0.3
    return g


def fd_batch(seed=0, n_rays=8):
    """Fixed ray batch aimed through the grid volume."""
    rng = np.random.default_rng(seed)
    origins = np.tile(np.array([0.0, 0.0, 4.0]), (n_rays, 1))
    targets_at = rng.uniform(-0.8, 0.8, size=(n_rays, 3))
    dirs = targets_at - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    colors = rng.uniform(0.0, 1.0, size=(n_rays, 3))
    return RayBatch(
        origins=origins,
        dirs=dirs,
        targets=colors,
        ray_ids=np.arange(n_rays, dtype=np.int64),
    )


def fd_config(samples=16):
    return TrainConfig(
        total_iters=1,
        rays_per_iter=8,
        init_resolution=(4, 4, 4),
        upsample_schedule=[],
        final_resolution=(4, 4, 4),
        rank_density=2,
        rank_appearance=3,
        render=RenderConfig(samples_per_ray=samples, near=2.0, far=6.0),
    )


def fd_vs_analytic(grid, batch, cfg, h=1e-3, floor=1e-6):
    """Max relative error of analytic gradients vs central finite differences.

    Perturbations happen in the stored float32 arrays; the FD denominator is
    the step actually achieved after the float32 round trip.  Loss math runs
    in float64 on both sides.  Returns (max_rel_err, per_array dict).
    """

    def loss_of(g):
        val, _ = loss_and_grads(g, batch, cfg, GradMask(), dtype=np.float64)
        return val

    _, grads = loss_and_grads(grid, batch, cfg, GradMask(), dtype=np.float64)
    worst = 0.0
    per_array = {}
    garrs = dict(walk_arrays(grads))
    for name, arr in walk_arrays(grid):
        g_arr = garrs[name]
        local = 0.0
        for i in range(arr.size):
            orig = arr.flat[i]
            arr.flat[i] = orig + h
            hi_val = arr.flat[i]
            lp = loss_of(grid)
            arr.flat[i] = orig - h
            lo_val = arr.flat[i]
            lm = loss_of(grid)
            arr.flat[i] = orig
            step = float(hi_val) - float(lo_val)
            fd = (lp - lm) / step
            rel = abs(g_arr.flat[i] - fd) / max(abs(fd), floor)
            local = max(local, rel)
        per_array[name] = local
        worst = max(worst, local)
    return worst, per_array


def make_smooth_grid(resolution=48, sh_degree=0, aabb_half=1.5):
    """Hand-built smooth field: one Gaussian density blob, gentle color ramps.

    Rank-1 per mode with infinitely smooth factors, so renders vary slowly
    across nearby viewpoints and resampling error dominates any flow-warped
    comparison of the grid against itself.
    """
    n = resolution
    g = init_grid(
        (n, n, n),
        aabb=((-aabb_half,) * 3, (aabb_half,) * 3),
        rank_density=1,
        rank_appearance=1,
        sh_degree=sh_degree,
        seed=0,
    )
    x = np.linspace(-aabb_half, aabb_half, n)
    blob = np.exp(-0.5 * (x / 0.65) ** 2).astype(np.float32)
    for ax in range(3):
        g.density_vecs[ax][0] = 8.0 * blob
        g.density_mats[ax][0] = np.outer(blob, blob)
    ramp = (0.8 * np.cos(np.pi * x / (2.0 * aabb_half))).astype(np.float32)
    for ax in range(3):
        g.app_vecs[ax][0] = ramp
        g.app_mats[ax][0] = np.outer(ramp, np.ones(n, dtype=np.float32))
    k = g.basis.shape[1] // 3
    g.basis[...] = 0.0
    # distinct per-channel weights on the constant (first) sh coefficient
    for c, w in enumerate((1.2, -0.7, 0.4)):
        g.basis[c, c * k] = w
    return g


def frontal_camera(size=64, fov=0.65, distance=4.0):
    """Camera on the +z axis looking at the origin, tight framing."""
    pose = look_at((0.0, 0.0, distance), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0))
    return Camera.from_fov(size, size, fov, pose)


def march_scene(spec, origins, dirs, t_max=8.0, step=1e-3):
    """Brute-force volumetric marcher over constant-density primitives.

    Midpoint samples at a fixed small step; the standard discrete
    approximation that trace_scene's closed form must agree with.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n_steps = int(t_max / step)
    ts = (np.arange(n_steps) + 0.5) * step
    rgb = np.zeros((origins.shape[0], 3))
    depth_acc = np.zeros(origins.shape[0])
    trans = np.ones(origins.shape[0])
    for t in ts:
        pts = origins + t * dirs
        sigma = np.zeros(origins.shape[0])
        sc = np.zeros((origins.shape[0], 3))
        for prim in spec.primitives:
            if hasattr(prim, "radius"):
                rel = pts - np.asarray(prim.center, dtype=np.float64)
                inside = np.einsum("rc,rc->r", rel, rel) < prim.radius**2
            else:
                lo, hi = prim.bounds()
                inside = np.all((pts >= lo) & (pts <= hi), axis=1)
            sigma += np.where(inside, prim.density, 0.0)
            sc += np.where(inside[:, None], prim.density * np.asarray(prim.rgb), 0.0)
        alpha = 1.0 - np.exp(-sigma * step)
        with np.errstate(invalid="ignore"):
            color = np.where(sigma[:, None] > 0, sc / np.maximum(sigma, 1e-300)[:, None], 0.0)
        w = trans * alpha
        rgb += w[:, None] * color
        depth_acc += w * t
        trans *= 1.0 - alpha
    opacity = 1.0 - trans
    depth = depth_acc / np.maximum(opacity, 1e-10)
    rgb = rgb + trans[:, None] * np.asarray(spec.background, dtype=np.float64)
    return rgb, depth, opacity
