"""Flow-warped view-consistency scoring.

For a frame pair (i, j = i + delta) the flow lives on frame j's pixel grid
and points back into frame i: each pixel of j is unprojected through j's
rendered depth and reprojected into camera i.  warp() then gathers the
stylized frame i at the flow-displaced coordinates, giving a prediction of
frame j whose squared difference against the actual stylized frame j is the
consistency metric (mean over valid pixels and channels).

Flow files use the Middlebury .flo layout; invalid pixels carry the
conventional large sentinel (1e10) in both components.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .camera import Camera, pixel_directions, project
from .errors import ContractViolation, DataError, InsufficientOverlapError

FLO_MAGIC = 202021.25
FLO_SENTINEL = 1e10
FLO_INVALID_ABOVE = 1e9


@dataclass
class FlowField:
    flow: np.ndarray   # (H, W, 2) float32 pixel displacements (dx, dy)
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.flow.ndim != 3 or self.flow.shape[2] != 2:
            raise ContractViolation(f"flow must be (H, W, 2), got {self.flow.shape}")
        if self.valid.shape != self.flow.shape[:2]:
            raise ContractViolation("validity mask must match flow dimensions")

    @property
    def height(self):
        return self.flow.shape[0]

    @property
    def width(self):
        return self.flow.shape[1]


def write_flo(field: FlowField, path):
    """Middlebury .flo: magic float, int32 w/h, row-major float32 (u, v)."""
    data = field.flow.astype("<f4").copy()
    data[~field.valid] = FLO_SENTINEL
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", field.width, field.height))
        f.write(data.tobytes())


def read_flo(path) -> FlowField:
    try:
        with open(path, "rb") as f:
            head = f.read(12)
            if len(head) < 12:
                raise DataError("truncated .flo header", path=path)
            (magic,) = struct.unpack("<f", head[:4])
            if abs(magic - FLO_MAGIC) > 1e-3:
                raise DataError(f"bad .flo magic {magic}", path=path)
            w, h = struct.unpack("<ii", head[4:12])
            if w <= 0 or h <= 0:
                raise DataError(f"bad .flo dimensions {w}x{h}", path=path)
            raw = f.read(4 * 2 * w * h)
    except OSError as e:
        raise DataError(f"cannot read .flo: {e}", path=path) from None
    if len(raw) != 4 * 2 * w * h:
        raise DataError("truncated .flo data", path=path)
    flow = np.frombuffer(raw, dtype="<f4").reshape(h, w, 2).copy()
    with np.errstate(invalid="ignore"):
        valid = np.all(np.abs(flow) <= FLO_INVALID_ABOVE, axis=2) & np.all(
            np.isfinite(flow), axis=2
        )
    return FlowField(flow=flow, valid=valid)


def reprojection_flow(
    depth: np.ndarray,
    cam_src: Camera,
    cam_dst: Camera,
    opacity: np.ndarray = None,
    opacity_min: float = 0.5,
    target_depth: np.ndarray = None,
    depth_tol: float = 0.05,
) -> FlowField:
    """Geometric flow from cam_src's pixel grid into cam_dst's image.

    Each source pixel is unprojected along its viewing ray by the rendered
    depth (ray-termination distance) and reprojected into cam_dst; the flow
    is the displacement in pixels.  Masked invalid: non-positive depth,
    low-opacity pixels, points behind or outside cam_dst's frame, and,
    when target_depth (cam_dst's own depth render) is given, points whose
    reprojected range disagrees with it by more than depth_tol * (1 + range)
    (an occlusion z-test).
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    if (h, w) != (cam_src.height, cam_src.width):
        raise ContractViolation("depth dimensions must match cam_src")
    py, px = np.mgrid[0:h, 0:w]
    dirs = pixel_directions(cam_src, px, py)
    pts = cam_src.origin + depth[..., None] * dirs
    xy, z = project(cam_dst, pts)
    centers = np.stack([px + 0.5, py + 0.5], axis=-1)
    flow = xy - centers

    valid = depth > 0
    valid &= z > 0
    valid &= (
        (xy[..., 0] >= 0.0)
        & (xy[..., 0] <= cam_dst.width)
        & (xy[..., 1] >= 0.0)
        & (xy[..., 1] <= cam_dst.height)
    )
    if opacity is not None:
        valid &= np.asarray(opacity, dtype=np.float64) >= opacity_min
    if target_depth is not None:
        rng = np.linalg.norm(pts - cam_dst.origin, axis=-1)
        seen, inb = _bilinear(np.asarray(target_depth, dtype=np.float64)[..., None], xy)
        valid &= inb & (np.abs(rng - seen[..., 0]) <= depth_tol * (1.0 + rng))
    flow = np.where(valid[..., None], flow, 0.0)
    return FlowField(flow=flow.astype(np.float32), valid=valid)


def _bilinear(image: np.ndarray, xy: np.ndarray):
    """Sample (H, W, C) at center-offset coordinates; returns (values, inbounds)."""
    h, w = image.shape[:2]
    x = np.asarray(xy[..., 0], dtype=np.float64) - 0.5
    y = np.asarray(xy[..., 1], dtype=np.float64) - 0.5
    inb = (x >= 0.0) & (x <= w - 1.0) & (y >= 0.0) & (y <= h - 1.0)
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(x.astype(np.int64), w - 2)
    y0 = np.minimum(y.astype(np.int64), h - 2)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    v00 = image[y0, x0]
    v01 = image[y0, x0 + 1]
    v10 = image[y0 + 1, x0]
    v11 = image[y0 + 1, x0 + 1]
    vals = (
        v00 * (1 - fy) * (1 - fx)
        + v01 * (1 - fy) * fx
        + v10 * fy * (1 - fx)
        + v11 * fy * fx
    )
    return vals, inb


def warp(image: np.ndarray, field: FlowField):
    """Backward-warp: out(x) = image(x + flow(x)) with bilinear resampling.

    Returns (warped, mask); masked-out pixels (invalid flow or samples
    falling outside the source frame) are zero-filled.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != (field.height, field.width):
        raise ContractViolation(
            f"image {image.shape[:2]} does not match flow {(field.height, field.width)}"
        )
    squeeze = image.ndim == 2
    if squeeze:
        image = image[..., None]
    h, w = image.shape[:2]
    py, px = np.mgrid[0:h, 0:w]
    coords = np.stack([px + 0.5, py + 0.5], axis=-1) + field.flow.astype(np.float64)
    vals, inb = _bilinear(image, coords)
    mask = field.valid & inb
    vals = np.where(mask[..., None], vals, 0.0)
    if squeeze:
        vals = vals[..., 0]
    return vals, mask


def consistency_metric(styled_i, styled_j, field: FlowField, min_valid=0.1):
    """Mean squared rgb difference over valid pixels and channels.

    styled_i is warped onto frame j's grid with the supplied flow and
    compared against styled_j.  Raises InsufficientOverlapError when fewer
    than min_valid of the pixels survive masking.
    """
    styled_i = np.asarray(styled_i, dtype=np.float64)
    styled_j = np.asarray(styled_j, dtype=np.float64)
    if styled_i.shape != styled_j.shape:
        raise ContractViolation("frame dimensions differ")
    warped, mask = warp(styled_i, field)
    frac = float(mask.mean())
    if frac < min_valid:
        raise InsufficientOverlapError(
            f"only {frac:.1%} of pixels valid (need >= {min_valid:.0%})"
        )
    diff = warped[mask] - styled_j[mask]
    return float(np.mean(diff * diff))


def eval_trajectory(
    grid_real,
    grid_styled,
    cameras,
    cfg,
    deltas=(1, 5),
    flow_dir=None,
    save_flow_dir=None,
    threads=1,
    render_fn=None,
):
    """Score flow-warped consistency of the styled grid along a trajectory.

    Real renders supply depth/opacity for the geometric flow; styled renders
    supply the frames being compared.  With flow_dir set, files named
    flow_{j:04}_to_{i:04}.flo override the geometric flow for each pair
    (flow on frame j pointing back to frame i).  Returns a JSON-ready report.
    """
    from .render import render_image

    deltas = sorted(set(int(d) for d in deltas))
    if len(cameras) < max(deltas) + 1:
        raise ContractViolation(f"need >= {max(deltas) + 1} cameras for deltas {deltas}")
    render_fn = render_fn or (lambda g, c: render_image(g, c, cfg, threads=threads))
    real = [render_fn(grid_real, cam) for cam in cameras]
    styled = (
        real
        if grid_styled is grid_real
        else [render_fn(grid_styled, cam) for cam in cameras]
    )

    pairs = []
    agg = {}
    for delta in deltas:
        vals = []
        for i in range(len(cameras) - delta):
            j = i + delta
            flow_name = f"flow_{j:04}_to_{i:04}.flo"
            if flow_dir is not None:
                field = read_flo(os.path.join(flow_dir, flow_name))
                source = "external"
            else:
                field = reprojection_flow(
                    real[j].depth,
                    cameras[j],
                    cameras[i],
                    opacity=real[j].opacity,
                    target_depth=real[i].depth,
                )
                source = "reprojection"
            if save_flow_dir is not None:
                os.makedirs(save_flow_dir, exist_ok=True)
                write_flo(field, os.path.join(save_flow_dir, flow_name))
            metric = consistency_metric(styled[i].rgb, styled[j].rgb, field)
            pairs.append(
                {
                    "i": i,
                    "j": j,
                    "delta": delta,
                    "metric": metric,
                    "valid_fraction": float(field.valid.mean()),
                    "flow_source": source,
                }
            )
            vals.append(metric)
        agg[str(delta)] = float(np.mean(vals))
    return {
        "n_frames": len(cameras),
        "image_size": [cameras[0].height, cameras[0].width],
        "deltas": deltas,
        "pairs": pairs,
        "aggregate": agg,
    }


def save_report(report: dict, path):
    with open(path, "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)


def load_report(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read report: {e}", path=path) from None
