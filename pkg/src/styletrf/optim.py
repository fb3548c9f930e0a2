"""Training loss, analytic gradients, Adam, and the coarse-to-fine fit loop.

The loss is mean squared error over a ray batch plus the grid regularizers;
its gradients come from engine.backward plus the closed-form regularizer
subgradients, never from numeric differentiation.  A GradMask freezes whole
parameter groups exactly (their gradient arrays are identically zero, so a
fresh Adam state leaves them bit-identical).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import engine, grid as gridmod
from .camera import generate_rays
from .errors import ContractViolation, NumericalFailure
from .grid import GridGradients, VMGrid, init_grid, walk_arrays
from .render import RenderConfig


@dataclass
class GradMask:
    """Per-group trainability; frozen groups receive exactly zero gradient."""

    density: bool = True
    appearance: bool = True
    basis: bool = True

    def __post_init__(self):
        if not (self.density or self.appearance or self.basis):
            raise ContractViolation("GradMask must leave at least one group trainable")


@dataclass
class RayBatch:
    origins: np.ndarray   # (B, 3)
    dirs: np.ndarray      # (B, 3) unit
    targets: np.ndarray   # (B, 3) in [0, 1]
    ray_ids: np.ndarray = None  # (B,) global pixel ids for jitter hashing


@dataclass
class TrainConfig:
    total_iters: int = 2000
    rays_per_iter: int = 1024
    lr: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    tv_weight: float = 0.01
    l1_weight: float = 1e-5
    seed: int = 0
    init_resolution: tuple = (32, 32, 32)
    # (iteration, resolution) pairs, applied before the stated iteration
    upsample_schedule: list = field(default_factory=lambda: [(500, (48, 48, 48)), (1000, (64, 64, 64))])
    final_resolution: tuple = (64, 64, 64)
    rank_density: int = 4
    rank_appearance: int = 8
    sh_degree: int = 1
    render: RenderConfig = field(default_factory=lambda: RenderConfig(samples_per_ray=96))

    def __post_init__(self):
        if self.total_iters < 0:
            raise ContractViolation("total_iters must be >= 0")
        if self.rays_per_iter < 1:
            raise ContractViolation("rays_per_iter must be >= 1")
        if self.lr <= 0.0:
            raise ContractViolation("lr must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ContractViolation("Adam betas must lie in (0, 1)")
        if self.tv_weight < 0.0 or self.l1_weight < 0.0:
            raise ContractViolation("regularizer weights must be >= 0")
        self.init_resolution = tuple(int(n) for n in self.init_resolution)
        self.final_resolution = tuple(int(n) for n in self.final_resolution)
        self.upsample_schedule = [
            (int(it), tuple(int(n) for n in res)) for it, res in self.upsample_schedule
        ]
        iters = [it for it, _ in self.upsample_schedule]
        if iters != sorted(iters) or len(set(iters)) != len(iters):
            raise ContractViolation("upsample schedule iterations must be strictly increasing")
        if self.upsample_schedule and self.upsample_schedule[-1][1] != self.final_resolution:
            raise ContractViolation("last upsample entry must reach final_resolution")
        if not self.upsample_schedule and self.init_resolution != self.final_resolution:
            raise ContractViolation("empty schedule requires init_resolution == final_resolution")


def desk_config(**overrides) -> TrainConfig:
    """Laptop-scale defaults: 32^3 -> 64^3, 2000 iters, 1024 rays."""
    return dataclasses.replace(TrainConfig(), **overrides)


def real_scene_config(**overrides) -> TrainConfig:
    """Published real-scene scale: 128^3 -> 640^3, 15k iters, 4096 rays."""
    cfg = TrainConfig(
        total_iters=15000,
        rays_per_iter=4096,
        init_resolution=(128, 128, 128),
        upsample_schedule=[
            (2000, (192, 192, 192)),
            (3000, (288, 288, 288)),
            (4000, (429, 429, 429)),
            (5000, (640, 640, 640)),
        ],
        final_resolution=(640, 640, 640),
        # 16 per mode = 48 appearance components total
        rank_density=8,
        rank_appearance=16,
        render=RenderConfig(samples_per_ray=512),
    )
    return dataclasses.replace(cfg, **overrides)


def synthetic_scene_config(**overrides) -> TrainConfig:
    """Published synthetic scale: 128^3 -> 300^3, 15k iters, 4096 rays."""
    cfg = TrainConfig(
        total_iters=15000,
        rays_per_iter=4096,
        init_resolution=(128, 128, 128),
        upsample_schedule=[
            (2000, (159, 159, 159)),
            (3000, (196, 196, 196)),
            (4000, (243, 243, 243)),
            (5000, (300, 300, 300)),
        ],
        final_resolution=(300, 300, 300),
        rank_density=8,
        rank_appearance=16,
        render=RenderConfig(samples_per_ray=448),
    )
    return dataclasses.replace(cfg, **overrides)


@dataclass
class AdamState:
    m: list  # float64, walk_arrays order
    v: list
    step: int = 0

    @classmethod
    def fresh(cls, grid: VMGrid) -> "AdamState":
        return cls(
            m=[np.zeros(a.shape) for _, a in walk_arrays(grid)],
            v=[np.zeros(a.shape) for _, a in walk_arrays(grid)],
        )


def _apply_mask(grads: GridGradients, mask: GradMask):
    for name, arr in walk_arrays(grads):
        trainable = getattr(mask, gridmod.group_of(name))
        if not trainable:
            arr[...] = 0.0
    return grads


def loss_and_grads(
    grid: VMGrid,
    batch: RayBatch,
    cfg: TrainConfig,
    mask: GradMask = None,
    dtype=np.float32,
    parts_out: dict = None,
):
    """Loss value and exact analytic gradients for one ray batch.

    loss = mean((rgb - target)^2) + tv_weight * tv + l1_weight * l1, the mean
    running over rays and channels.  Raises NumericalFailure on a non-finite
    loss.
    """
    mask = mask or GradMask()
    targets = np.asarray(batch.targets, dtype=np.float64)
    B = targets.shape[0]
    fwd = engine.forward_rays(
        grid, batch.origins, batch.dirs, cfg.render, ray_ids=batch.ray_ids, dtype=dtype
    )
    resid = fwd.rgb.astype(np.float64) - targets
    mse = float(np.mean(resid * resid))
    tv = gridmod.tv_loss(grid) if cfg.tv_weight else 0.0
    l1 = gridmod.l1_reg(grid) if cfg.l1_weight else 0.0
    loss = mse + cfg.tv_weight * tv + cfg.l1_weight * l1
    if not np.isfinite(loss):
        raise NumericalFailure(f"non-finite loss (mse={mse}, tv={tv}, l1={l1})")
    if parts_out is not None:
        parts_out.update(mse=mse, tv=tv, l1=l1)

    grads = GridGradients.zeros_like(grid)
    g_rgb = (2.0 / (B * 3)) * resid
    engine.backward(
        fwd.tape, g_rgb, grads,
        density=mask.density, appearance=mask.appearance, basis=mask.basis,
    )
    if cfg.tv_weight:
        gridmod.tv_grads(grid, grads, scale=cfg.tv_weight)
    if cfg.l1_weight:
        gridmod.l1_grads(grid, grads, scale=cfg.l1_weight)
    _apply_mask(grads, mask)
    return loss, grads


def adam_step(grid: VMGrid, grads: GridGradients, state: AdamState, lr: float, cfg: TrainConfig):
    """In-place Adam update with bias correction; float64 moments, float32 params."""
    state.step += 1
    t = state.step
    b1, b2, eps = cfg.beta1, cfg.beta2, cfg.eps
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, ((_, p), (_, g)) in enumerate(zip(walk_arrays(grid), walk_arrays(grads))):
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * (g * g)
        mhat = state.m[k] / c1
        vhat = state.v[k] / c2
        p[...] = (p.astype(np.float64) - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
    return grid, state


class RayPool:
    """Epoch-shuffled pixel pool over a list of posed images.

    Rays are drawn without replacement until the pool is exhausted, then
    reshuffled; ids are stable global pixel indices for jitter hashing.
    """

    def __init__(self, cameras, images, rng):
        origins, dirs, targets = [], [], []
        for cam, img in zip(cameras, images):
            o, d = generate_rays(cam)
            origins.append(o)
            dirs.append(d)
            targets.append(np.asarray(img, dtype=np.float64).reshape(-1, 3))
        self.origins = np.concatenate(origins, axis=0)
        self.dirs = np.concatenate(dirs, axis=0)
        self.targets = np.concatenate(targets, axis=0)
        self.n = self.origins.shape[0]
        self.rng = rng
        self._perm = rng.permutation(self.n)
        self._cursor = 0

    def draw(self, count) -> RayBatch:
        take = []
        need = count
        while need > 0:
            if self._cursor == self.n:
                self._perm = self.rng.permutation(self.n)
                self._cursor = 0
            grab = min(need, self.n - self._cursor)
            take.append(self._perm[self._cursor : self._cursor + grab])
            self._cursor += grab
            need -= grab
        ids = np.concatenate(take)
        return RayBatch(
            origins=self.origins[ids],
            dirs=self.dirs[ids],
            targets=self.targets[ids],
            ray_ids=ids,
        )


def train_loop(
    grid: VMGrid,
    pool: RayPool,
    cfg: TrainConfig,
    mask: GradMask = None,
    schedule=None,
    callback=None,
    dtype=np.float32,
) -> VMGrid:
    """Shared iteration driver for fit and style adaptation."""
    mask = mask or GradMask()
    state = AdamState.fresh(grid)
    schedule = list(schedule or [])
    parts = {}
    for it in range(cfg.total_iters):
        while schedule and schedule[0][0] == it:
            _, res = schedule.pop(0)
            grid = gridmod.upsample(grid, res)
            state = AdamState.fresh(grid)  # moments are resolution-shaped; lr back to cfg.lr
        batch = pool.draw(cfg.rays_per_iter)
        try:
            loss, grads = loss_and_grads(grid, batch, cfg, mask, dtype=dtype, parts_out=parts)
        except NumericalFailure as e:
            raise NumericalFailure(str(e), iteration=it) from e
        grid, state = adam_step(grid, grads, state, cfg.lr, cfg)
        if callback is not None:
            callback(it, loss, dict(parts), grid)
    return grid


def fit(dataset, cfg: TrainConfig, callback=None, dtype=np.float32) -> VMGrid:
    """Coarse-to-fine fit of a fresh grid to the dataset's training split."""
    train_idx = dataset.split_indices("train")
    if len(train_idx) < 2:
        raise ContractViolation("fit needs at least 2 posed training images")
    grid = init_grid(
        cfg.init_resolution,
        aabb=dataset.aabb,
        rank_density=cfg.rank_density,
        rank_appearance=cfg.rank_appearance,
        sh_degree=cfg.sh_degree,
        seed=cfg.seed,
    )
    rng = np.random.default_rng(cfg.seed)
    pool = RayPool(
        [dataset.cameras[i] for i in train_idx],
        [dataset.images[i] for i in train_idx],
        rng,
    )
    return train_loop(
        grid, pool, cfg, mask=GradMask(), schedule=cfg.upsample_schedule,
        callback=callback, dtype=dtype,
    )


def mse_to_psnr(mse: float) -> float:
    return float(10.0 * np.log10(1.0 / max(mse, 1e-12)))


def evaluate_psnr(grid: VMGrid, dataset, cfg: TrainConfig, split="test", threads=1):
    """Mean PSNR over a dataset split, rendered at the training settings."""
    from .render import render_image

    idx = dataset.split_indices(split)
    vals = []
    for i in idx:
        out = render_image(grid, dataset.cameras[i], cfg.render, threads=threads)
        err = out.rgb.astype(np.float64) - np.asarray(dataset.images[i], dtype=np.float64)
        vals.append(mse_to_psnr(float(np.mean(err * err))))
    return float(np.mean(vals)), vals
