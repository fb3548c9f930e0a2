"""Volumetric rendering of a VMGrid: ray clipping, compositing, images.

Forward-only entry points live here; the batched forward/backward core that
training shares sits in engine.py.  Everything is deterministic given the
config seed, including under pixel-parallel chunking, because per-sample
jitter is derived from (seed, pixel id, sample index) alone.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

DEPTH_EPS = 1e-10


@dataclass
class RenderConfig:
    samples_per_ray: int = 128
    near: float = 2.0
    far: float = 6.0
    background: tuple = (1.0, 1.0, 1.0)
    stratified_jitter: bool = False
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.near < self.far):
            raise ContractViolation(f"need 0 < near < far, got ({self.near}, {self.far})")
        if self.samples_per_ray < 2:
            raise ContractViolation("samples_per_ray must be >= 2")
        bg = np.asarray(self.background, dtype=np.float64).reshape(3)
        self.background = tuple(float(c) for c in bg)


@dataclass
class RenderOutput:
    rgb: np.ndarray      # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray    # (H, W) float32, expected termination distance
    opacity: np.ndarray  # (H, W) float32 in [0, 1]


def clip_rays(origins, dirs, aabb, near, far):
    """Slab-test ray/aabb intervals intersected with [near, far].

    origins, dirs: (R, 3) with unit directions.  Returns (t0, t1, hit); for
    missed rays t0/t1 are undefined and hit is False.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    lo, hi = np.asarray(aabb, dtype=np.float64)
    t0 = np.full(origins.shape[0], near, dtype=np.float64)
    t1 = np.full(origins.shape[0], far, dtype=np.float64)
    for ax in range(3):
        d = dirs[:, ax]
        o = origins[:, ax]
        with np.errstate(divide="ignore"):
            inv = 1.0 / d
        ta = (lo[ax] - o) * inv
        tb = (hi[ax] - o) * inv
        tmin = np.minimum(ta, tb)
        tmax = np.maximum(ta, tb)
        # zero direction component: inside the slab or a guaranteed miss
        par = d == 0.0
        inside = (o >= lo[ax]) & (o <= hi[ax])
        tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
        tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
        t0 = np.maximum(t0, tmin)
        t1 = np.minimum(t1, tmax)
    hit = t0 < t1
    return t0, t1, hit


def ray_aabb_clip(origin, direction, aabb, near, far):
    """Single-ray wrapper: (t_enter, t_exit) or None on a miss."""
    t0, t1, hit = clip_rays(
        np.asarray(origin, dtype=np.float64)[None],
        np.asarray(direction, dtype=np.float64)[None],
        aabb,
        near,
        far,
    )
    if not hit[0]:
        return None
    return float(t0[0]), float(t1[0])


def composite(sigmas, colors, deltas, ts=None):
    """Front-to-back alpha compositing over the trailing sample axis.

    sigmas, deltas: (..., Q); colors: (..., Q, 3); ts optional (..., Q)
    sample distances for the depth estimate.  Returns (C, depth, opacity,
    weights) where C excludes any background term (caller blends) and depth
    is None when ts is None.
    """
    sigmas = np.asarray(sigmas)
    colors = np.asarray(colors)
    deltas = np.asarray(deltas)
    if np.any(sigmas < 0) or np.any(deltas < 0):
        raise ContractViolation("composite requires sigma >= 0 and delta >= 0")
    a = sigmas * deltas
    acc = np.cumsum(a, axis=-1)
    # exclusive prefix: transmittance before each sample
    tau = np.exp(-(acc - a))
    alpha = -np.expm1(-a)
    weights = tau * alpha
    C = np.einsum("...q,...qc->...c", weights, colors)
    opacity = weights.sum(axis=-1)
    depth = None
    if ts is not None:
        ts = np.asarray(ts)
        depth = (weights * ts).sum(axis=-1) / np.maximum(opacity, DEPTH_EPS)
    return C, depth, opacity, weights


def _splitmix64(x):
    """Finalizer of splitmix64; x is uint64 ndarray, returns uint64."""
    z = x + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def sample_jitter(seed, ray_ids, n_samples):
    """Stratified offsets in [0, 1), shape (R, Q).

    Hash-derived from (seed, ray id, sample index) so the result does not
    depend on batch composition or evaluation order.
    """
    ray_ids = np.asarray(ray_ids, dtype=np.uint64)
    with np.errstate(over="ignore"):
        base = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + ray_ids)[:, None]
        q = np.arange(n_samples, dtype=np.uint64)[None, :]
        bits = _splitmix64(base + q * np.uint64(0xD1342543DE82EF95))
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 2**53)


def render_rays(grid, origins, dirs, cfg: RenderConfig, ray_ids=None, dtype=np.float32):
    """Render a batch of rays; returns (rgb, depth, opacity) as (R, ...) arrays.

    ray_ids feed the per-ray jitter hash when stratified_jitter is on; they
    default to the batch position.
    """
    from . import engine

    fwd = engine.forward_rays(grid, origins, dirs, cfg, ray_ids=ray_ids, dtype=dtype)
    return fwd.rgb, fwd.depth, fwd.opacity


def render_ray(grid, origin, direction, cfg: RenderConfig):
    """Single-ray convenience wrapper; returns (rgb (3,), depth, opacity)."""
    rgb, depth, opacity = render_rays(
        grid,
        np.asarray(origin, dtype=np.float64)[None],
        np.asarray(direction, dtype=np.float64)[None],
        cfg,
        dtype=np.float64,
    )
    return rgb[0], float(depth[0]), float(opacity[0])


def render_image(
    grid, cam, cfg: RenderConfig, threads: int = 1, chunk: int = 8192, dtype=np.float32
) -> RenderOutput:
    """Render a full camera image in row-major pixel chunks.

    Chunk boundaries and thread count cannot affect the output: every pixel
    is an independent function of (grid, camera, cfg).
    """
    from .camera import generate_rays

    origins, dirs = generate_rays(cam)
    n = origins.shape[0]
    rgb = np.empty((n, 3), dtype=np.float64)
    depth = np.empty(n, dtype=np.float64)
    opacity = np.empty(n, dtype=np.float64)

    def run(lo):
        hi = min(lo + chunk, n)
        ids = np.arange(lo, hi, dtype=np.int64)
        r, d, o = render_rays(grid, origins[lo:hi], dirs[lo:hi], cfg, ray_ids=ids, dtype=dtype)
        rgb[lo:hi] = r
        depth[lo:hi] = d
        opacity[lo:hi] = o

    starts = range(0, n, chunk)
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, starts))
    else:
        for lo in starts:
            run(lo)
    shape = (cam.height, cam.width)
    return RenderOutput(
        rgb=rgb.reshape(shape + (3,)).astype(np.float32),
        depth=depth.reshape(shape).astype(np.float32),
        opacity=opacity.reshape(shape).astype(np.float32),
    )
