"""Shared forward/backward core for rendering and training.

The forward pass renders a ray batch while recording every intermediate the
hand-derived backward pass needs; backward() then pushes a gradient w.r.t.
the output colors through background blending, compositing, the density
activation, the sigmoid/SH color decode, the factor interpolation, and the
appearance basis, scattering into factor-shaped accumulators.  No autodiff
anywhere; the chain rule below is the reference implementation.

Appearance is only evaluated where raw density > 0: inactive samples have
w = 0 and a zero relu subgradient, so skipping them changes nothing.
Geometry (ray clipping, sample placement) stays float64; field math runs in
a caller-chosen dtype (float32 for speed, float64 for finite-difference
validation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sh
from .grid import MAT_AXES, GridGradients, VMGrid, grid_coords, sigmoid
from .render import DEPTH_EPS, RenderConfig, clip_rays, sample_jitter


@dataclass
class Tape:
    """Intermediates of one forward pass over a ray batch."""

    grid: VMGrid
    n_rays: int
    hit_idx: np.ndarray       # (Rh,) positions of hit rays in the batch
    n_samples: int
    dt: np.ndarray            # (Rh,) segment length per ray
    idx: np.ndarray           # (P, 3) cell indices, P = Rh * n_samples
    frac: np.ndarray          # (P, 3)
    dens_VM: list             # per mode, (V, M) each (R_sigma, P)
    raw_sigma: np.ndarray     # (P,)
    active: np.ndarray        # (P,) raw > 0
    app_VM: list              # per mode, (V, M) each (R_c, Pa), active only
    coeffs: np.ndarray        # (Pa, 3 * R_c)
    sh_basis: np.ndarray      # (Pa, K)
    colors: np.ndarray        # (Pa, 3) decoded sigmoid outputs
    alpha: np.ndarray         # (Rh, Q)
    tau: np.ndarray           # (Rh, Q)
    weights: np.ndarray       # (Rh, Q)
    background: np.ndarray    # (3,)


@dataclass
class ForwardResult:
    rgb: np.ndarray      # (R, 3) background-blended
    depth: np.ndarray    # (R,)
    opacity: np.ndarray  # (R,)
    tape: Tape


def _interp_pairs(vecs, mats, idx, frac, dtype):
    """Interpolated (V, M) per mode at flattened sample points, shape (R, P)."""
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


def forward_rays(
    grid: VMGrid,
    origins,
    dirs,
    cfg: RenderConfig,
    ray_ids=None,
    dtype=np.float32,
) -> ForwardResult:
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = origins.shape[0]
    Q = cfg.samples_per_ray
    bg = np.asarray(cfg.background, dtype=np.float64)

    t0, t1, hit = clip_rays(origins, dirs, grid.aabb, cfg.near, cfg.far)
    hit_idx = np.nonzero(hit)[0]
    Rh = hit_idx.shape[0]

    rgb = np.tile(bg.astype(dtype), (n, 1))
    depth = np.zeros(n, dtype=dtype)
    opacity = np.zeros(n, dtype=dtype)

    if Rh == 0:
        tape = Tape(
            grid=grid, n_rays=n, hit_idx=hit_idx, n_samples=Q,
            dt=np.zeros(0), idx=np.zeros((0, 3), dtype=np.int64),
            frac=np.zeros((0, 3)), dens_VM=[], raw_sigma=np.zeros(0),
            active=np.zeros(0, dtype=bool), app_VM=[],
            coeffs=np.zeros((0, 3 * grid.rank_appearance)),
            sh_basis=np.zeros((0, sh.num_coeffs(grid.sh_degree))),
            colors=np.zeros((0, 3)), alpha=np.zeros((0, Q)),
            tau=np.zeros((0, Q)), weights=np.zeros((0, Q)), background=bg,
        )
        return ForwardResult(rgb=rgb, depth=depth, opacity=opacity, tape=tape)

    t0h = t0[hit_idx]
    dt = ((t1[hit_idx] - t0h) / Q).astype(dtype)
    if cfg.stratified_jitter:
        ids = np.arange(n, dtype=np.int64) if ray_ids is None else np.asarray(ray_ids)
        offs = sample_jitter(cfg.seed, ids[hit_idx], Q).astype(dtype)
    else:
        offs = np.full((Rh, Q), 0.5, dtype=dtype)
    ts = t0h[:, None].astype(dtype) + (np.arange(Q, dtype=dtype)[None, :] + offs) * dt[:, None]

    pts = origins[hit_idx, None, :] + ts[..., None].astype(np.float64) * dirs[hit_idx, None, :]
    idx, frac = grid_coords(grid, pts.reshape(-1, 3), dtype=np.float64)
    frac = frac.astype(dtype)

    dens_VM = _interp_pairs(grid.density_vecs, grid.density_mats, idx, frac, dtype)
    raw = np.zeros(idx.shape[0], dtype=dtype)
    for V, M in dens_VM:
        raw += np.einsum("rp,rp->p", V, M)
    sigma = np.maximum(raw, 0.0)
    active = raw > 0

    # appearance only where density can contribute
    act_pos = np.nonzero(active)[0]
    idx_a = idx[act_pos]
    frac_a = frac[act_pos]
    app_VM = _interp_pairs(grid.app_vecs, grid.app_mats, idx_a, frac_a, dtype)
    coeffs = np.concatenate([V * M for V, M in app_VM], axis=0).T  # (Pa, 3*R_c)
    feature = coeffs @ grid.basis.astype(dtype)
    K = sh.num_coeffs(grid.sh_degree)
    Y_rays = sh.eval_basis(grid.sh_degree, dirs[hit_idx]).astype(dtype)  # (Rh, K)
    Y = Y_rays[act_pos // Q]
    z = np.einsum("sck,sk->sc", feature.reshape(-1, 3, K), Y)
    colors_a = sigmoid(z)

    colors = np.zeros((idx.shape[0], 3), dtype=dtype)
    colors[act_pos] = colors_a

    a = sigma.reshape(Rh, Q) * dt[:, None]
    acc = np.cumsum(a, axis=1)
    tau = np.exp(-(acc - a))
    alpha = -np.expm1(-a)
    weights = tau * alpha
    C = np.einsum("rq,rqc->rc", weights, colors.reshape(Rh, Q, 3))
    op = weights.sum(axis=1)
    dep = (weights * ts).sum(axis=1) / np.maximum(op, DEPTH_EPS)

    rgb[hit_idx] = C + (1.0 - op[:, None]) * bg.astype(dtype)
    depth[hit_idx] = dep
    opacity[hit_idx] = op

    tape = Tape(
        grid=grid, n_rays=n, hit_idx=hit_idx, n_samples=Q, dt=dt,
        idx=idx, frac=frac, dens_VM=dens_VM, raw_sigma=raw, active=active,
        app_VM=app_VM, coeffs=coeffs, sh_basis=Y, colors=colors_a,
        alpha=alpha, tau=tau, weights=weights, background=bg,
    )
    return ForwardResult(rgb=rgb, depth=depth, opacity=opacity, tape=tape)


def _scatter_vec(gV, i0, f, out):
    """Accumulate linear-interp gradients into a (R, N) factor vector."""
    R, N = out.shape
    ridx = (np.arange(R, dtype=np.int64) * N)[:, None]
    flat0 = (ridx + i0[None, :]).ravel()
    out += np.bincount(flat0, weights=(gV * (1.0 - f)).ravel(), minlength=R * N).reshape(R, N)
    out += np.bincount(flat0 + 1, weights=(gV * f).ravel(), minlength=R * N).reshape(R, N)


def _scatter_mat(gM, ia, fa, ib, fb, out):
    """Accumulate bilinear-interp gradients into a (R, Na, Nb) factor matrix."""
    R, Na, Nb = out.shape
    size = Na * Nb
    base = ia * Nb + ib
    ridx = (np.arange(R, dtype=np.int64) * size)[:, None]
    corners = (
        (0, (1.0 - fa) * (1.0 - fb)),
        (1, (1.0 - fa) * fb),
        (Nb, fa * (1.0 - fb)),
        (Nb + 1, fa * fb),
    )
    for off, w in corners:
        flat = (ridx + (base + off)[None, :]).ravel()
        out += np.bincount(
            flat, weights=(gM * w[None, :]).ravel(), minlength=R * size
        ).reshape(R, Na, Nb)


def backward(
    tape: Tape,
    g_rgb,
    grads: GridGradients,
    density: bool = True,
    appearance: bool = True,
    basis: bool = True,
) -> GridGradients:
    """Accumulate d(loss)/d(grid params) into grads given d(loss)/d(rgb).

    g_rgb is (n_rays, 3) w.r.t. the background-blended output colors.
    Group flags skip entire parameter groups; skipped groups receive exactly
    zero contribution.  All math here runs in float64.
    """
    grid = tape.grid
    Rh = tape.hit_idx.shape[0]
    if Rh == 0 or not (density or appearance or basis):
        return grads
    Q = tape.n_samples
    gC = np.asarray(g_rgb, dtype=np.float64)[tape.hit_idx]  # (Rh, 3)
    gO = -(gC * tape.background[None, :]).sum(axis=1)       # via (1 - op) * bg

    weights = tape.weights.astype(np.float64)
    tau = tape.tau.astype(np.float64)
    alpha = tape.alpha.astype(np.float64)
    colors = np.zeros((Rh * Q, 3))
    act_pos = np.nonzero(tape.active)[0]
    colors[act_pos] = tape.colors.astype(np.float64)
    colors = colors.reshape(Rh, Q, 3)

    gw = np.einsum("rqc,rc->rq", colors, gC) + gO[:, None]
    galpha = tau * gw
    gtau = alpha * gw
    tg = tau * gtau
    suffix = np.flip(np.cumsum(np.flip(tg, axis=1), axis=1), axis=1) - tg
    ga = (1.0 - alpha) * galpha - suffix
    gsigma = ga * tape.dt.astype(np.float64)[:, None]
    graw = np.where(tape.active, gsigma.reshape(-1), 0.0)

    frac64 = tape.frac.astype(np.float64)
    if density:
        for ax in range(3):
            a, b = MAT_AXES[ax]
            V, M = tape.dens_VM[ax]
            gV = M.astype(np.float64) * graw[None, :]
            gM = V.astype(np.float64) * graw[None, :]
            _scatter_vec(gV, tape.idx[:, ax], frac64[:, ax], grads.density_vecs[ax])
            _scatter_mat(
                gM, tape.idx[:, a], frac64[:, a], tape.idx[:, b], frac64[:, b],
                grads.density_mats[ax],
            )

    if not (appearance or basis) or act_pos.size == 0:
        return grads

    # color path: w_q * c_q -> sigmoid -> SH contraction -> basis -> factors
    w_act = weights.reshape(-1)[act_pos]
    gc = w_act[:, None] * gC[act_pos // Q]              # (Pa, 3)
    c = tape.colors.astype(np.float64)
    gz = gc * c * (1.0 - c)                             # sigmoid'
    Y = tape.sh_basis.astype(np.float64)                # (Pa, K)
    K = Y.shape[1]
    gfeat = (gz[:, :, None] * Y[:, None, :]).reshape(-1, 3 * K)
    coeffs = tape.coeffs.astype(np.float64)
    if basis:
        grads.basis += coeffs.T @ gfeat
    if appearance:
        gcoeffs = gfeat @ grid.basis.astype(np.float64).T  # (Pa, 3*R_c)
        Rc = grid.rank_appearance
        idx_a = tape.idx[act_pos]
        frac_a = frac64[act_pos]
        for ax in range(3):
            a, b = MAT_AXES[ax]
            V, M = tape.app_VM[ax]
            gVM = gcoeffs[:, ax * Rc : (ax + 1) * Rc].T  # (R_c, Pa)
            gV = M.astype(np.float64) * gVM
            gM = V.astype(np.float64) * gVM
            _scatter_vec(gV, idx_a[:, ax], frac_a[:, ax], grads.app_vecs[ax])
            _scatter_mat(
                gM, idx_a[:, a], frac_a[:, a], idx_a[:, b], frac_a[:, b],
                grads.app_mats[ax],
            )
    return grads
