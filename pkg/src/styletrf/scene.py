"""Datasets, checkpoints, and the analytic synthetic oracle scene.

The synthetic scene is a handful of constant-density spheres and boxes.
Because density is piecewise constant along any ray, the volume rendering
integral has a closed form per ray segment, which gives exact reference
images and expected-termination depth maps without any sampling; fitting
targets and depth ground truth both come from this path.

Datasets follow the Blender transforms_{train,test}.json convention;
checkpoints are a tagged binary blob of the factor arrays.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .camera import Camera, generate_rays, look_at
from .errors import CheckpointError, ContractViolation, DataError
from .grid import VMGrid, walk_arrays
from .render import DEPTH_EPS

CHECKPOINT_MAGIC = b"STYLETRF-VMGRID1"
CHECKPOINT_VERSION = 1
DEFAULT_AABB = ((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))


# ---------------------------------------------------------------------------
# images


def write_png(path, img):
    """Save float rgb in [0, 1] (or a single channel) as 8-bit PNG."""
    arr = np.asarray(img, dtype=np.float64)
    u8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    mode = "L" if u8.ndim == 2 else "RGB"
    Image.fromarray(u8, mode=mode).save(path)


def read_png(path):
    """Load a PNG as float32 rgb in [0, 1]; alpha is composited over white."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGBA"), dtype=np.float32) / 255.0
    except OSError as e:
        raise DataError(f"cannot read image: {e}", path=path) from None
    rgb, a = arr[..., :3], arr[..., 3:4]
    return (rgb * a + (1.0 - a)).astype(np.float32)


def write_depth_raw(path, depth):
    """Raw 32-bit little-endian float dump, row-major."""
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_depth_raw(path, shape):
    expected = 4 * int(np.prod(shape))
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) != expected:
        raise DataError(f"depth raw has {len(raw)} bytes, expected {expected}", path=path)
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def write_depth_preview(path, depth, near, far):
    scaled = (np.asarray(depth, dtype=np.float64) - near) / max(far - near, 1e-9)
    write_png(path, np.clip(scaled, 0.0, 1.0))


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Dataset:
    cameras: list
    images: list  # (H, W, 3) float32 in [0, 1]
    split: list   # "train" / "test" per frame
    aabb: np.ndarray = field(default_factory=lambda: np.asarray(DEFAULT_AABB, dtype=np.float64))

    def __post_init__(self):
        self.aabb = np.asarray(self.aabb, dtype=np.float64).reshape(2, 3)
        if not (len(self.cameras) == len(self.images) == len(self.split)):
            raise ContractViolation("cameras, images, and split tags must align")
        for cam, img in zip(self.cameras, self.images):
            if np.asarray(img).shape != (cam.height, cam.width, 3):
                raise ContractViolation(
                    f"image shape {np.asarray(img).shape} does not match its camera"
                )

    def split_indices(self, split):
        return [i for i, s in enumerate(self.split) if s == split]

    @property
    def n_frames(self):
        return len(self.cameras)


def save_dataset(dataset: Dataset, out_dir):
    """Write transforms_{split}.json + PNGs in the Blender layout."""
    os.makedirs(out_dir, exist_ok=True)
    for split in ("train", "test"):
        idx = dataset.split_indices(split)
        if not idx:
            continue
        cams = [dataset.cameras[i] for i in idx]
        angle = cams[0].camera_angle_x
        for cam in cams:
            if abs(cam.camera_angle_x - angle) > 1e-9 or cam.width != cams[0].width:
                raise ContractViolation(f"{split} split has inconsistent intrinsics")
        split_dir = os.path.join(out_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        frames = []
        for n, i in enumerate(idx):
            rel = f"./{split}/r_{n}.png"
            write_png(os.path.join(out_dir, rel), dataset.images[i])
            mat = np.eye(4)
            mat[:3] = dataset.cameras[i].camera_to_world
            frames.append({"file_path": rel, "transform_matrix": mat.tolist()})
        meta = {
            "camera_angle_x": angle,
            "aabb": dataset.aabb.tolist(),
            "frames": frames,
        }
        with open(os.path.join(out_dir, f"transforms_{split}.json"), "w") as f:
            json.dump(meta, f, indent=1)


def load_dataset(path) -> Dataset:
    """Load transforms_train.json (+ optional transforms_test.json)."""
    cameras, images, split = [], [], []
    aabb = np.asarray(DEFAULT_AABB, dtype=np.float64)
    found = False
    for tag in ("train", "test"):
        meta_path = os.path.join(path, f"transforms_{tag}.json")
        if not os.path.exists(meta_path):
            continue
        found = True
        try:
            with open(meta_path) as f:
                meta = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot parse transforms file: {e}", path=meta_path) from None
        if "camera_angle_x" not in meta:
            raise DataError("missing camera_angle_x", path=meta_path)
        if "aabb" in meta:
            aabb = np.asarray(meta["aabb"], dtype=np.float64).reshape(2, 3)
        angle = float(meta["camera_angle_x"])
        for frame in meta.get("frames", []):
            if "transform_matrix" not in frame or "file_path" not in frame:
                raise DataError("frame missing transform_matrix/file_path", path=meta_path)
            img_path = os.path.join(path, frame["file_path"])
            if not os.path.exists(img_path) and os.path.exists(img_path + ".png"):
                img_path += ".png"  # Blender sets often omit the extension
            img = read_png(img_path)
            h, w = img.shape[:2]
            cam = Camera.from_fov(
                width=w,
                height=h,
                camera_angle_x=angle,
                camera_to_world=np.asarray(frame["transform_matrix"], dtype=np.float64)[:3],
            )
            cameras.append(cam)
            images.append(img)
            split.append(tag)
    if not found:
        raise DataError("no transforms_train.json found", path=str(path))
    return Dataset(cameras=cameras, images=images, split=split, aabb=aabb)


# ---------------------------------------------------------------------------
# synthetic oracle scene


@dataclass
class Sphere:
    center: tuple
    radius: float
    rgb: tuple
    density: float

    def intersect(self, origins, dirs):
        oc = np.asarray(origins) - np.asarray(self.center, dtype=np.float64)
        b = np.einsum("rc,rc->r", oc, dirs)
        c = np.einsum("rc,rc->r", oc, oc) - self.radius**2
        disc = b * b - c
        hit = disc > 0
        s = np.sqrt(np.maximum(disc, 0.0))
        return -b - s, -b + s, hit

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        return c - self.radius, c + self.radius


@dataclass
class Box:
    center: tuple
    size: tuple  # full edge lengths
    rgb: tuple
    density: float

    def intersect(self, origins, dirs):
        lo, hi = self.bounds()
        t0 = np.full(origins.shape[0], -np.inf)
        t1 = np.full(origins.shape[0], np.inf)
        for ax in range(3):
            d = dirs[:, ax]
            o = origins[:, ax]
            with np.errstate(divide="ignore"):
                inv = 1.0 / d
            ta = (lo[ax] - o) * inv
            tb = (hi[ax] - o) * inv
            tmin = np.minimum(ta, tb)
            tmax = np.maximum(ta, tb)
            par = d == 0.0
            inside = (o >= lo[ax]) & (o <= hi[ax])
            tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
            tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
            t0 = np.maximum(t0, tmin)
            t1 = np.minimum(t1, tmax)
        hit = t0 < t1
        return t0, t1, hit

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        h = 0.5 * np.asarray(self.size, dtype=np.float64)
        return c - h, c + h


@dataclass
class SyntheticSceneSpec:
    seed: int = 0
    primitives: list = field(default_factory=list)
    background: tuple = (1.0, 1.0, 1.0)
    aabb: np.ndarray = field(default_factory=lambda: np.asarray(DEFAULT_AABB, dtype=np.float64))

    def __post_init__(self):
        self.aabb = np.asarray(self.aabb, dtype=np.float64).reshape(2, 3)
        for p in self.primitives:
            if p.density < 0:
                raise ContractViolation("primitive densities must be >= 0")
            lo, hi = p.bounds()
            if np.any(lo < self.aabb[0]) or np.any(hi > self.aabb[1]):
                raise ContractViolation(f"primitive {p} extends outside the scene aabb")


def desk_scene(seed: int = 0) -> SyntheticSceneSpec:
    """Default three-primitive test scene."""
    return SyntheticSceneSpec(
        seed=seed,
        primitives=[
            Sphere(center=(-0.45, -0.38, -0.12), radius=0.55, rgb=(0.85, 0.25, 0.20), density=30.0),
            Box(center=(0.52, 0.34, 0.02), size=(0.95, 0.75, 0.85), rgb=(0.20, 0.45, 0.85), density=26.0),
            Sphere(center=(0.05, -0.15, 0.68), radius=0.32, rgb=(0.95, 0.80, 0.25), density=34.0),
        ],
        background=(1.0, 1.0, 1.0),
    )


def scene_spec_from_json(data, path=None) -> SyntheticSceneSpec:
    prims = []
    for rec in data.get("primitives", []):
        kind = rec.get("type")
        try:
            if kind == "sphere":
                prims.append(
                    Sphere(
                        center=tuple(rec["center"]), radius=float(rec["radius"]),
                        rgb=tuple(rec["rgb"]), density=float(rec["density"]),
                    )
                )
            elif kind == "box":
                prims.append(
                    Box(
                        center=tuple(rec["center"]), size=tuple(rec["size"]),
                        rgb=tuple(rec["rgb"]), density=float(rec["density"]),
                    )
                )
            else:
                raise DataError(f"unknown primitive type {kind!r}", path=path)
        except KeyError as e:
            raise DataError(f"primitive missing field {e}", path=path) from None
    kwargs = {}
    if "aabb" in data:
        kwargs["aabb"] = np.asarray(data["aabb"], dtype=np.float64)
    return SyntheticSceneSpec(
        seed=int(data.get("seed", 0)),
        primitives=prims,
        background=tuple(data.get("background", (1.0, 1.0, 1.0))),
        **kwargs,
    )


def scene_spec_to_json(spec: SyntheticSceneSpec) -> dict:
    prims = []
    for p in spec.primitives:
        if isinstance(p, Sphere):
            prims.append(
                {"type": "sphere", "center": list(p.center), "radius": p.radius,
                 "rgb": list(p.rgb), "density": p.density}
            )
        else:
            prims.append(
                {"type": "box", "center": list(p.center), "size": list(p.size),
                 "rgb": list(p.rgb), "density": p.density}
            )
    return {
        "seed": spec.seed,
        "background": list(spec.background),
        "aabb": spec.aabb.tolist(),
        "primitives": prims,
    }


def trace_scene(spec: SyntheticSceneSpec, origins, dirs):
    """Exact volume rendering of the piecewise-constant scene.

    Within each inter-event segment the density and color are constant, so
    opacity is 1 - exp(-sigma L) and the expected-depth integrand has the
    closed form tau_a * (alpha * (a + 1/sigma) - L * exp(-sigma L)).
    Overlapping primitives add densities; segment color is the
    density-weighted mix.  Returns (rgb, depth, opacity) per ray.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    R = origins.shape[0]
    K = len(spec.primitives)
    bg = np.asarray(spec.background, dtype=np.float64)
    if K == 0:
        return (
            np.tile(bg, (R, 1)),
            np.zeros(R),
            np.zeros(R),
        )

    ts = np.zeros((R, 2 * K))
    dsig = np.zeros((R, 2 * K))
    dsigc = np.zeros((R, 2 * K, 3))
    for k, prim in enumerate(spec.primitives):
        t0, t1, hit = prim.intersect(origins, dirs)
        t0 = np.where(hit, np.maximum(t0, 0.0), 0.0)
        t1 = np.where(hit, np.maximum(t1, t0), 0.0)
        ts[:, 2 * k] = t0
        ts[:, 2 * k + 1] = t1
        sc = prim.density * np.asarray(prim.rgb, dtype=np.float64)
        dsig[:, 2 * k] = np.where(hit, prim.density, 0.0)
        dsig[:, 2 * k + 1] = -dsig[:, 2 * k]
        dsigc[:, 2 * k] = np.where(hit[:, None], sc, 0.0)
        dsigc[:, 2 * k + 1] = -dsigc[:, 2 * k]

    order = np.argsort(ts, axis=1, kind="stable")
    ts = np.take_along_axis(ts, order, axis=1)
    dsig = np.take_along_axis(dsig, order, axis=1)
    dsigc = np.take_along_axis(dsigc, order[..., None], axis=1)

    sig = np.cumsum(dsig, axis=1)[:, :-1]                # density in each segment
    sig = np.maximum(sig, 0.0)                           # clamp fp residue of +/- cancellation
    sigc = np.cumsum(dsigc, axis=1)[:, :-1]
    L = np.diff(ts, axis=1)
    a = ts[:, :-1]

    sl = sig * L
    acc = np.cumsum(sl, axis=1)
    tau = np.exp(-(acc - sl))
    alpha = -np.expm1(-sl)
    w = tau * alpha
    with np.errstate(invalid="ignore", divide="ignore"):
        color = np.where(sig[..., None] > 0, sigc / np.maximum(sig, 1e-300)[..., None], 0.0)
    rgb = np.einsum("rs,rsc->rc", w, color)
    opacity = w.sum(axis=1)
    # expected termination distance: exact per-segment integral of tau sigma t
    with np.errstate(invalid="ignore", divide="ignore"):
        inv_sig = np.where(sig > 0, 1.0 / np.maximum(sig, 1e-300), 0.0)
    seg_depth = tau * (alpha * (a + inv_sig) - L * np.exp(-sl))
    seg_depth = np.where(sig > 0, seg_depth, 0.0)
    depth = seg_depth.sum(axis=1) / np.maximum(opacity, DEPTH_EPS)
    rgb = rgb + (1.0 - opacity[:, None]) * bg
    return rgb, depth, opacity


def render_scene_image(spec: SyntheticSceneSpec, cam: Camera):
    origins, dirs = generate_rays(cam)
    rgb, depth, opacity = trace_scene(spec, origins, dirs)
    shape = (cam.height, cam.width)
    return (
        np.clip(rgb, 0.0, 1.0).reshape(shape + (3,)).astype(np.float32),
        depth.reshape(shape).astype(np.float32),
        opacity.reshape(shape).astype(np.float32),
    )


def sphere_cameras(n, width, height, camera_angle_x, radius, elevations_deg, az_offset=0.0):
    """Evenly spaced azimuths at cycling elevations, all looking at the origin."""
    cams = []
    for k in range(n):
        az = 2.0 * np.pi * k / n + az_offset
        el = np.deg2rad(elevations_deg[k % len(elevations_deg)])
        pos = radius * np.array(
            [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)]
        )
        pose = look_at(pos, (0.0, 0.0, 0.0), (0.0, 0.0, 1.0))
        cams.append(Camera.from_fov(width, height, camera_angle_x, pose))
    return cams


def make_synthetic(
    spec: SyntheticSceneSpec,
    n_train: int = 16,
    n_test: int = 4,
    image_size: int = 64,
    camera_radius: float = 4.0,
    camera_angle_x: float = 1.2,
):
    """Analytic dataset + per-view ground-truth depth/opacity.

    Returns (dataset, gt) where gt maps frame index -> {"depth", "opacity"}
    arrays aligned with dataset.images.
    """
    if n_train < 2:
        raise ContractViolation("make_synthetic needs n_train >= 2")
    train_cams = sphere_cameras(
        n_train, image_size, image_size, camera_angle_x, camera_radius,
        elevations_deg=(8.0, 28.0, 48.0),
    )
    test_cams = sphere_cameras(
        n_test, image_size, image_size, camera_angle_x, camera_radius,
        elevations_deg=(18.0, 38.0), az_offset=np.pi / max(n_train, 1),
    )
    cameras, images, split, gt = [], [], [], []
    for cams, tag in ((train_cams, "train"), (test_cams, "test")):
        for cam in cams:
            rgb, depth, opacity = render_scene_image(spec, cam)
            cameras.append(cam)
            images.append(rgb)
            split.append(tag)
            gt.append({"depth": depth, "opacity": opacity})
    dataset = Dataset(cameras=cameras, images=images, split=split, aabb=spec.aabb.copy())
    return dataset, gt


def save_ground_truth(out_dir, dataset: Dataset, gt):
    """Persist analytic depth/opacity per frame as raw <f4 beside the dataset."""
    for split in ("train", "test"):
        idx = dataset.split_indices(split)
        if not idx:
            continue
        d = os.path.join(out_dir, "gt_depth", split)
        os.makedirs(d, exist_ok=True)
        for n, i in enumerate(idx):
            write_depth_raw(os.path.join(d, f"r_{n}_depth.f32"), gt[i]["depth"])
            write_depth_raw(os.path.join(d, f"r_{n}_opacity.f32"), gt[i]["opacity"])


def load_ground_truth(data_dir, dataset: Dataset):
    """Load what save_ground_truth wrote; returns frame index -> arrays."""
    gt = {}
    for split in ("train", "test"):
        idx = dataset.split_indices(split)
        d = os.path.join(data_dir, "gt_depth", split)
        for n, i in enumerate(idx):
            cam = dataset.cameras[i]
            shape = (cam.height, cam.width)
            depth_path = os.path.join(d, f"r_{n}_depth.f32")
            if not os.path.exists(depth_path):
                raise DataError("missing ground-truth depth", path=depth_path)
            gt[i] = {
                "depth": read_depth_raw(depth_path, shape),
                "opacity": read_depth_raw(os.path.join(d, f"r_{n}_opacity.f32"), shape),
            }
    return gt


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(grid: VMGrid, path):
    """Atomic write: magic, u32 JSON header length, header, raw <f4 arrays."""
    arrays = list(walk_arrays(grid))
    header = {
        "version": CHECKPOINT_VERSION,
        "sh_degree": grid.sh_degree,
        "resolution": list(grid.resolution),
        "rank_density": grid.rank_density,
        "rank_appearance": grid.rank_appearance,
        "aabb": grid.aabb.tolist(),
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> VMGrid:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}", path=path) from None
    if len(data) < len(CHECKPOINT_MAGIC) + 4 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("bad magic (not a styletrf checkpoint)", path=path)
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    if len(data) < off + hlen:
        raise CheckpointError("truncated header", path=path)
    try:
        header = json.loads(data[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt header: {e}", path=path) from None
    off += hlen
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported version {header.get('version')}", path=path)

    parsed = {}
    for rec in header["arrays"]:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape))
        end = off + 4 * count
        if len(data) < end:
            raise CheckpointError(f"truncated array {rec['name']}", path=path)
        parsed[rec["name"]] = (
            np.frombuffer(data[off:end], dtype="<f4").reshape(shape).copy()
        )
        off = end
    if off != len(data):
        raise CheckpointError("trailing bytes after arrays", path=path)

    def take(prefix):
        return [parsed[f"{prefix}_{ax}"] for ax in "xyz"]

    try:
        grid = VMGrid(
            aabb=np.asarray(header["aabb"], dtype=np.float64),
            density_vecs=take("density_vec"),
            density_mats=take("density_mat"),
            app_vecs=take("app_vec"),
            app_mats=take("app_mat"),
            basis=parsed["basis"],
            sh_degree=int(header["sh_degree"]),
        )
    except (KeyError, ContractViolation) as e:
        raise CheckpointError(f"inconsistent checkpoint contents: {e}", path=path) from None
    if list(grid.resolution) != list(header["resolution"]):
        raise CheckpointError("header resolution does not match arrays", path=path)
    return grid
