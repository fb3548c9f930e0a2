"""Stylized-prior generation and appearance-only grid adaptation.

Workflow: render sparse prior views along a spiral around a reference
camera, hand the PNGs to an external stylizer, load the stylized copies
back, and fine-tune the grid against them.  Strategy S3 freezes the density
factors, so scene geometry (and therefore every depth/opacity image) is
bit-identical before and after adaptation; S2 fine-tunes everything; S1
starts from scratch.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import os
from dataclasses import dataclass

import numpy as np

from . import optim
from .camera import Camera, look_at
from .errors import ContractViolation, DataError
from .grid import VMGrid, init_grid
from .optim import GradMask, RayPool, TrainConfig
from .render import render_image


class Strategy(enum.Enum):
    S1 = "S1"  # optimize from scratch on the stylized priors
    S2 = "S2"  # fine-tune all parameter groups
    S3 = "S3"  # fine-tune appearance + basis, density frozen

    @classmethod
    def parse(cls, name: str) -> "Strategy":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ContractViolation(f"unknown strategy {name!r}, expected S1/S2/S3") from None


@dataclass
class PriorSet:
    cameras: list
    images: list  # (H, W, 3) float32 in [0, 1]
    source: str = "memory"

    def __post_init__(self):
        if len(self.cameras) < 1 or len(self.cameras) != len(self.images):
            raise ContractViolation("PriorSet needs n >= 1 cameras with matching images")
        shapes = {np.asarray(im).shape for im in self.images}
        if len(shapes) != 1:
            raise ContractViolation(f"prior images must share dimensions, got {shapes}")


def spiral_trajectory(
    reference: Camera,
    n_views: int = 30,
    radius: float = 0.3,
    n_turns: float = 1.0,
    pitch: float = 0.0,
    focus_depth: float = None,
) -> list:
    """Deterministic spiral of poses around the reference view axis.

    All poses look at the fixed focus point reference.origin +
    focus_depth * forward.  The spiral starts at the reference position
    (k = 0 reproduces the reference pose); with radius 0 the positions
    collapse onto the reference origin while the up hint still rolls with
    the spiral parameter, so orientations vary.
    """
    if n_views < 1:
        raise ContractViolation("n_views must be >= 1")
    o = reference.origin
    R = reference.rotation
    x_ref, y_ref = R[:, 0], R[:, 1]
    fwd = reference.forward
    if focus_depth is None:
        focus_depth = float(np.dot(-o, fwd))
        if focus_depth <= 0:
            focus_depth = 1.0
    focus = o + focus_depth * fwd

    cams = []
    for k in range(n_views):
        theta = 2.0 * np.pi * n_turns * k / n_views
        offset = radius * ((np.cos(theta) - 1.0) * x_ref + np.sin(theta) * y_ref)
        pos = o + offset + pitch * (k / n_views) * y_ref
        up = np.cos(theta) * y_ref - np.sin(theta) * x_ref  # roll with the angle
        pose = look_at(pos, focus, up)
        cams.append(reference.with_pose(pose))
    return cams


def render_priors(grid: VMGrid, cameras, cfg, out_dir=None, threads=1) -> PriorSet:
    """Render one prior image per camera; optionally persist with a manifest."""
    images = []
    for cam in cameras:
        out = render_image(grid, cam, cfg, threads=threads)
        images.append(out.rgb)
    priors = PriorSet(cameras=list(cameras), images=images, source=out_dir or "memory")
    if out_dir is not None:
        save_priors(priors, out_dir)
    return priors


def _camera_record(cam: Camera, filename: str) -> dict:
    mat = np.eye(4)
    mat[:3] = cam.camera_to_world
    return {
        "file_path": filename,
        "width": cam.width,
        "height": cam.height,
        "focal": cam.focal,
        "cx": cam.cx,
        "cy": cam.cy,
        "transform_matrix": mat.tolist(),
    }


def save_priors(priors: PriorSet, out_dir):
    from .scene import write_png

    os.makedirs(out_dir, exist_ok=True)
    frames = []
    for i, (cam, img) in enumerate(zip(priors.cameras, priors.images)):
        name = f"frame_{i:04}.png"
        write_png(os.path.join(out_dir, name), img)
        frames.append(_camera_record(cam, name))
    manifest = {"n_frames": len(frames), "frames": frames}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def _camera_from_record(rec: dict, path) -> Camera:
    try:
        return Camera(
            width=int(rec["width"]),
            height=int(rec["height"]),
            focal=float(rec["focal"]),
            camera_to_world=np.asarray(rec["transform_matrix"], dtype=np.float64)[:3],
            cx=float(rec["cx"]),
            cy=float(rec["cy"]),
        )
    except KeyError as e:
        raise DataError(f"manifest frame missing field {e}", path=path) from None


def load_priors(manifest_dir, image_dir=None) -> PriorSet:
    """Load a rendered-priors directory; image_dir substitutes stylized PNGs.

    The stylized directory must contain the same filenames listed in the
    manifest (the hand-off contract with any external stylizer).
    """
    from .scene import read_png

    manifest_path = os.path.join(manifest_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError("missing manifest.json", path=manifest_path)
    with open(manifest_path) as f:
        manifest = json.load(f)
    image_dir = image_dir or manifest_dir
    cameras, images = [], []
    for rec in manifest.get("frames", []):
        cameras.append(_camera_from_record(rec, manifest_path))
        img_path = os.path.join(image_dir, rec["file_path"])
        if not os.path.exists(img_path):
            raise DataError("prior image missing", path=img_path)
        images.append(read_png(img_path))
    if not cameras:
        raise DataError("manifest lists no frames", path=manifest_path)
    return PriorSet(cameras=cameras, images=images, source=image_dir)


def adapt_config(**overrides) -> TrainConfig:
    """Adaptation defaults: 1000 iters, fit lr and regularizer weights."""
    cfg = TrainConfig(
        total_iters=1000,
        upsample_schedule=[],
        init_resolution=(64, 64, 64),
        final_resolution=(64, 64, 64),
    )
    return dataclasses.replace(cfg, **overrides)


def mask_for(strategy: Strategy) -> GradMask:
    if strategy is Strategy.S3:
        return GradMask(density=False, appearance=True, basis=True)
    return GradMask()


def adapt(
    grid: VMGrid,
    priors: PriorSet,
    strategy: Strategy,
    cfg: TrainConfig = None,
    callback=None,
    dtype=np.float32,
) -> VMGrid:
    """Fine-tune against stylized priors; returns a new grid.

    The input grid and the PriorSet are never mutated.  For S1 the caller
    passes a freshly initialized grid; S2/S3 expect a pre-fitted one.
    """
    cfg = cfg or adapt_config()
    if cfg.upsample_schedule:
        raise ContractViolation("adaptation runs at fixed resolution (no upsample schedule)")
    work = grid.copy()
    rng = np.random.default_rng(cfg.seed)
    pool = RayPool(priors.cameras, priors.images, rng)
    return optim.train_loop(
        work, pool, cfg, mask=mask_for(strategy), callback=callback, dtype=dtype
    )


def fresh_like(grid: VMGrid, cfg: TrainConfig) -> VMGrid:
    """S1 starting point: same shape configuration, re-seeded weights."""
    return init_grid(
        grid.resolution,
        aabb=grid.aabb,
        rank_density=grid.rank_density,
        rank_appearance=grid.rank_appearance,
        sh_degree=grid.sh_degree,
        seed=cfg.seed,
    )


def prior_reconstruction_loss(grid: VMGrid, priors: PriorSet, cfg: TrainConfig, chunk=8192):
    """Full-set MSE between renders and prior images (no regularizers)."""
    from .camera import generate_rays
    from .render import render_rays

    total = 0.0
    count = 0
    for cam, img in zip(priors.cameras, priors.images):
        origins, dirs = generate_rays(cam)
        target = np.asarray(img, dtype=np.float64).reshape(-1, 3)
        for lo in range(0, origins.shape[0], chunk):
            hi = min(lo + chunk, origins.shape[0])
            ids = np.arange(lo, hi, dtype=np.int64)
            rgb, _, _ = render_rays(grid, origins[lo:hi], dirs[lo:hi], cfg.render, ray_ids=ids)
            d = rgb.astype(np.float64) - target[lo:hi]
            total += float((d * d).sum())
            count += d.size
    return total / count
