"""Command-line front end: synth / fit / render / adapt / eval.

Config resolution order is flags > config file > profile defaults; the
resolved configuration is echoed to run_config.json beside the outputs and
recorded in every run's manifest.json together with stage timings.

Exit codes: 0 success, 2 bad usage or invalid configuration, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import consistency, optim, scene, style
from .errors import ContractViolation, DataError, NumericalFailure, StyleTrfError
from .render import RenderConfig
from .scene import load_checkpoint, save_checkpoint

PROFILES = {
    "desk": optim.desk_config,
    "real": optim.real_scene_config,
    "synthetic": optim.synthetic_scene_config,
}


def _parse_resolution(text):
    parts = text.lower().split("x")
    if len(parts) == 1:
        n = int(parts[0])
        return (n, n, n)
    if len(parts) != 3:
        raise ContractViolation(f"resolution must be N or NXxNYxNZ, got {text!r}")
    return tuple(int(p) for p in parts)


def _parse_schedule(text):
    text = text.strip()
    if text in ("", "none"):
        return []
    if text.startswith("["):
        return [(int(it), tuple(int(n) for n in res)) for it, res in json.loads(text)]
    out = []
    for item in text.split(","):
        it, res = item.split(":")
        out.append((int(it), _parse_resolution(res)))
    return out


def _parse_rgb(text):
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 3:
        raise ContractViolation(f"expected r,g,b, got {text!r}")
    return tuple(vals)


# flag name -> (config attr, parser); render fields live on cfg.render
TRAIN_FIELDS = {
    "total-iters": ("total_iters", int),
    "rays-per-iter": ("rays_per_iter", int),
    "lr": ("lr", float),
    "beta1": ("beta1", float),
    "beta2": ("beta2", float),
    "eps": ("eps", float),
    "tv-weight": ("tv_weight", float),
    "l1-weight": ("l1_weight", float),
    "seed": ("seed", int),
    "init-resolution": ("init_resolution", _parse_resolution),
    "final-resolution": ("final_resolution", _parse_resolution),
    "upsample-schedule": ("upsample_schedule", _parse_schedule),
    "rank-density": ("rank_density", int),
    "rank-appearance": ("rank_appearance", int),
    "sh-degree": ("sh_degree", int),
}
RENDER_FIELDS = {
    "samples-per-ray": ("samples_per_ray", int),
    "near": ("near", float),
    "far": ("far", float),
    "background": ("background", _parse_rgb),
    "stratified-jitter": ("stratified_jitter", lambda v: v.lower() in ("1", "true", "yes")),
    "render-seed": ("seed", int),
}


def _add_config_flags(sp, render_only=False):
    if not render_only:
        for flag, (attr, _) in TRAIN_FIELDS.items():
            sp.add_argument(f"--{flag}", type=str, default=None, help=f"TrainConfig.{attr}")
    for flag, (attr, _) in RENDER_FIELDS.items():
        sp.add_argument(f"--{flag}", type=str, default=None, help=f"RenderConfig.{attr}")
    sp.add_argument("--config", type=str, default=None, help="TOML or JSON config file")
    sp.add_argument(
        "--profile", choices=sorted(PROFILES), default="desk", help="base config profile"
    )


def _load_config_file(path):
    try:
        if path.endswith(".toml"):
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            with open(path, "rb") as f:
                return tomllib.load(f)
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise DataError(f"cannot read config: {e}", path=path) from None
    except ValueError as e:
        raise DataError(f"cannot parse config: {e}", path=path) from None


def _coerce_file_value(attr, value):
    if attr in ("init_resolution", "final_resolution"):
        if isinstance(value, str):
            return _parse_resolution(value)
        if isinstance(value, int):
            return (value, value, value)
        return tuple(int(v) for v in value)
    if attr == "upsample_schedule":
        if isinstance(value, str):
            return _parse_schedule(value)
        out = []
        for it, res in value:
            if isinstance(res, int):
                res = (res, res, res)
            out.append((int(it), tuple(int(n) for n in res)))
        return out
    if attr == "background" and isinstance(value, str):
        return _parse_rgb(value)
    return value


def resolve_train_config(args, base: optim.TrainConfig = None) -> optim.TrainConfig:
    cfg = base if base is not None else PROFILES[args.profile]()
    train_kw = {}
    render_kw = {}
    if getattr(args, "config", None):
        data = _load_config_file(args.config)
        render_data = data.pop("render", {})
        known = {attr for attr, _ in TRAIN_FIELDS.values()}
        for key, value in data.items():
            if key not in known:
                raise ContractViolation(f"unknown config field {key!r}")
            train_kw[key] = _coerce_file_value(key, value)
        known_r = {attr for attr, _ in RENDER_FIELDS.values()}
        for key, value in render_data.items():
            if key not in known_r:
                raise ContractViolation(f"unknown render config field {key!r}")
            render_kw[key] = _coerce_file_value(key, value)
    for flag, (attr, parse) in TRAIN_FIELDS.items():
        raw = getattr(args, flag.replace("-", "_"), None)
        if raw is not None:
            train_kw[attr] = parse(raw)
    for flag, (attr, parse) in RENDER_FIELDS.items():
        raw = getattr(args, flag.replace("-", "_"), None)
        if raw is not None:
            render_kw[attr] = parse(raw)
    if render_kw:
        train_kw["render"] = dataclasses.replace(cfg.render, **render_kw)
    return dataclasses.replace(cfg, **train_kw)


def config_to_json(cfg: optim.TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["init_resolution"] = list(cfg.init_resolution)
    d["final_resolution"] = list(cfg.final_resolution)
    d["upsample_schedule"] = [[it, list(res)] for it, res in cfg.upsample_schedule]
    d["render"]["background"] = list(cfg.render.background)
    return d


def _threads(args):
    if getattr(args, "threads", None) is not None:
        return max(1, args.threads)
    env = os.environ.get("STYLETRF_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _write_manifest(path, payload):
    payload = dict(payload)
    payload["timings"] = {k: max(0.0, float(v)) for k, v in payload.get("timings", {}).items()}
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)


def _manifest_base(args, subcommand):
    return {
        "subcommand": subcommand,
        "argv": sys.argv[1:],
        "seed": None,
        "inputs": {},
        "outputs": {},
        "timings": {},
    }


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    t0 = time.perf_counter()
    if args.spec:
        data = _load_config_file(args.spec)
        spec = scene.scene_spec_from_json(data, path=args.spec)
    else:
        spec = scene.desk_scene(seed=args.seed or 0)
    dataset, gt = scene.make_synthetic(
        spec, n_train=args.n_train, n_test=args.n_test, image_size=args.size
    )
    t1 = time.perf_counter()
    os.makedirs(args.out, exist_ok=True)
    scene.save_dataset(dataset, args.out)
    scene.save_ground_truth(args.out, dataset, gt)
    with open(os.path.join(args.out, "scene.json"), "w") as f:
        json.dump(scene.scene_spec_to_json(spec), f, indent=1)
    t2 = time.perf_counter()
    manifest = _manifest_base(args, "synth")
    manifest.update(
        seed=spec.seed,
        inputs={"spec": args.spec},
        outputs={"dataset": args.out},
        n_train=args.n_train,
        n_test=args.n_test,
        image_size=args.size,
        timings={"trace": t1 - t0, "write": t2 - t1},
    )
    _write_manifest(os.path.join(args.out, "manifest.json"), manifest)
    print(f"wrote {dataset.n_frames} frames to {args.out}")
    return 0


def cmd_fit(args):
    cfg = resolve_train_config(args)
    threads = _threads(args)
    t0 = time.perf_counter()
    dataset = scene.load_dataset(args.data)
    t1 = time.perf_counter()
    log_every = max(1, cfg.total_iters // 20)

    def log(it, loss, parts, grid):
        if it % log_every == 0 or it + 1 == cfg.total_iters:
            print(
                f"iter {it:5d}  loss {loss:.6f}  mse {parts['mse']:.6f}  "
                f"res {grid.resolution[0]}",
                flush=True,
            )

    grid = optim.fit(dataset, cfg, callback=log)
    t2 = time.perf_counter()
    psnr = None
    if dataset.split_indices("test"):
        psnr, per_view = optim.evaluate_psnr(grid, dataset, cfg, split="test", threads=threads)
        print(f"test PSNR {psnr:.2f} dB")
    t3 = time.perf_counter()
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(grid, args.out)
    with open(os.path.join(out_dir, "run_config.json"), "w") as f:
        json.dump(config_to_json(cfg), f, indent=1, sort_keys=True)
    manifest = _manifest_base(args, "fit")
    manifest.update(
        seed=cfg.seed,
        config=config_to_json(cfg),
        inputs={"dataset": args.data},
        outputs={"checkpoint": args.out, "run_config": os.path.join(out_dir, "run_config.json")},
        test_psnr=psnr,
        threads=threads,
        timings={"load": t1 - t0, "fit": t2 - t1, "eval": t3 - t2},
    )
    _write_manifest(args.out + ".manifest.json", manifest)
    return 0


def _reference_camera(dataset, split, index):
    idx = dataset.split_indices(split) or dataset.split_indices(
        "train" if split == "test" else "test"
    )
    if not idx:
        raise DataError("dataset has no frames to take a reference camera from")
    return dataset.cameras[idx[min(index, len(idx) - 1)]]


def _spiral_from_args(args, dataset):
    ref = _reference_camera(dataset, args.reference_split, args.reference_index)
    if args.reference_fov is not None:
        from .camera import Camera

        ref = Camera.from_fov(
            ref.width, ref.height, args.reference_fov, ref.camera_to_world
        )
    focus_depth = args.focus_depth
    if focus_depth is None:
        center = dataset.aabb.mean(axis=0)
        focus_depth = float(np.dot(center - ref.origin, ref.forward))
    return style.spiral_trajectory(
        ref,
        n_views=args.views,
        radius=args.radius,
        n_turns=args.turns,
        pitch=args.pitch,
        focus_depth=focus_depth,
    )


def cmd_render(args):
    cfg = resolve_train_config(args)
    threads = _threads(args)
    t0 = time.perf_counter()
    grid = load_checkpoint(args.checkpoint)
    cameras = None
    if args.source in ("train", "test"):
        if not args.data:
            raise ContractViolation(f"--source {args.source} requires --data")
        dataset = scene.load_dataset(args.data)
        cameras = [dataset.cameras[i] for i in dataset.split_indices(args.source)]
        if not cameras:
            raise DataError(f"dataset has no {args.source} split", path=args.data)
    else:
        if not args.data:
            raise ContractViolation("--source spiral requires --data for the reference camera")
        dataset = scene.load_dataset(args.data)
        cameras = _spiral_from_args(args, dataset)
    t1 = time.perf_counter()

    from .render import render_image

    os.makedirs(args.out, exist_ok=True)
    frames = []
    for i, cam in enumerate(cameras):
        out = render_image(grid, cam, cfg.render, threads=threads)
        name = f"frame_{i:04}.png"
        scene.write_png(os.path.join(args.out, name), out.rgb)
        if args.depth:
            scene.write_depth_raw(
                os.path.join(args.out, f"frame_{i:04}_depth.f32"), out.depth
            )
            scene.write_depth_preview(
                os.path.join(args.out, f"frame_{i:04}_depth.png"),
                out.depth, cfg.render.near, cfg.render.far,
            )
        frames.append(style._camera_record(cam, name))
    t2 = time.perf_counter()
    with open(os.path.join(args.out, "manifest.json"), "w") as f:
        json.dump({"n_frames": len(frames), "frames": frames}, f, indent=1)
    manifest = _manifest_base(args, "render")
    manifest.update(
        seed=cfg.render.seed,
        config=config_to_json(cfg),
        inputs={"checkpoint": args.checkpoint, "data": args.data},
        outputs={"frames": args.out},
        n_frames=len(frames),
        source=args.source,
        threads=threads,
        timings={"load": t1 - t0, "render": t2 - t1},
    )
    _write_manifest(os.path.join(args.out, "run_manifest.json"), manifest)
    print(f"rendered {len(frames)} frames to {args.out}")
    return 0


def cmd_adapt(args):
    threads = _threads(args)
    strategy = style.Strategy.parse(args.strategy)
    t0 = time.perf_counter()
    grid = load_checkpoint(args.checkpoint)
    priors = style.load_priors(args.priors, image_dir=args.styled)
    base = dataclasses.replace(
        PROFILES[args.profile](),
        total_iters=1000,
        upsample_schedule=[],
        init_resolution=grid.resolution,
        final_resolution=grid.resolution,
        rank_density=grid.rank_density,
        rank_appearance=grid.rank_appearance,
        sh_degree=grid.sh_degree,
    )
    cfg = resolve_train_config(args, base=base)
    t1 = time.perf_counter()
    if strategy is style.Strategy.S1:
        start = style.fresh_like(grid, cfg)
    else:
        start = grid
    initial_loss = style.prior_reconstruction_loss(start, priors, cfg)
    log_every = max(1, cfg.total_iters // 10)

    def log(it, loss, parts, _g):
        if it % log_every == 0 or it + 1 == cfg.total_iters:
            print(f"iter {it:5d}  loss {loss:.6f}  mse {parts['mse']:.6f}", flush=True)

    adapted = style.adapt(start, priors, strategy, cfg, callback=log)
    final_loss = style.prior_reconstruction_loss(adapted, priors, cfg)
    t2 = time.perf_counter()
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(adapted, args.out)
    with open(os.path.join(out_dir, "run_config.json"), "w") as f:
        json.dump(config_to_json(cfg), f, indent=1, sort_keys=True)

    depth_rmse = None
    if args.depth_rmse_vs:
        depth_rmse = _depth_rmse(adapted, args.depth_rmse_vs, cfg, threads)
        print(f"depth RMSE vs ground truth: {depth_rmse['aggregate']:.4f}")
    t3 = time.perf_counter()
    manifest = _manifest_base(args, "adapt")
    manifest.update(
        seed=cfg.seed,
        config=config_to_json(cfg),
        strategy=strategy.value,
        inputs={"checkpoint": args.checkpoint, "priors": args.priors, "styled": args.styled},
        outputs={"checkpoint": args.out},
        initial_loss=initial_loss,
        final_loss=final_loss,
        depth_rmse=depth_rmse,
        threads=threads,
        timings={"load": t1 - t0, "adapt": t2 - t1, "eval": t3 - t2},
    )
    _write_manifest(args.out + ".manifest.json", manifest)
    print(f"prior loss {initial_loss:.6f} -> {final_loss:.6f}")
    return 0


def _depth_rmse(grid, data_dir, cfg, threads, split="test", opacity_min=0.5):
    """Pooled depth RMSE over ground-truth-opaque pixels of a split."""
    from .render import render_image

    dataset = scene.load_dataset(data_dir)
    gt = scene.load_ground_truth(data_dir, dataset)
    idx = dataset.split_indices(split)
    if not idx:
        raise DataError(f"no {split} frames for depth comparison", path=data_dir)
    sq, count, per_view = 0.0, 0, []
    for i in idx:
        out = render_image(grid, dataset.cameras[i], cfg.render, threads=threads)
        mask = gt[i]["opacity"] >= opacity_min
        d = out.depth.astype(np.float64)[mask] - gt[i]["depth"].astype(np.float64)[mask]
        sq += float((d * d).sum())
        count += d.size
        per_view.append(float(np.sqrt(np.mean(d * d))) if d.size else None)
    return {"aggregate": float(np.sqrt(sq / max(count, 1))), "per_view": per_view}


def cmd_eval(args):
    cfg = resolve_train_config(args)
    threads = _threads(args)
    deltas = [int(d) for d in args.deltas.split(",")]
    t0 = time.perf_counter()
    grid_real = load_checkpoint(args.real)
    grid_styled = grid_real if args.styled == args.real else load_checkpoint(args.styled)
    dataset = scene.load_dataset(args.data)
    cameras = _spiral_from_args(args, dataset)
    t1 = time.perf_counter()
    save_flow_dir = os.path.join(os.path.dirname(os.path.abspath(args.out)) or ".", "flows")
    report = consistency.eval_trajectory(
        grid_real,
        grid_styled,
        cameras,
        cfg.render,
        deltas=deltas,
        flow_dir=args.flow_dir,
        save_flow_dir=save_flow_dir if args.save_flows else None,
        threads=threads,
    )
    t2 = time.perf_counter()
    consistency.save_report(report, args.out)
    manifest = _manifest_base(args, "eval")
    manifest.update(
        seed=cfg.render.seed,
        config=config_to_json(cfg),
        inputs={"real": args.real, "styled": args.styled, "data": args.data,
                "flow_dir": args.flow_dir},
        outputs={"report": args.out},
        aggregate=report["aggregate"],
        threads=threads,
        timings={"load": t1 - t0, "eval": t2 - t1},
    )
    _write_manifest(args.out + ".manifest.json", manifest)
    for d in sorted(report["aggregate"]):
        print(f"delta {d}: {report['aggregate'][d]:.6f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="styletrf",
        description="Factored voxel radiance fields with appearance-only style adaptation",
    )
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: STYLETRF_THREADS or all cores)")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate the analytic synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--spec", default=None, help="scene spec JSON/TOML (default: desk scene)")
    sp.add_argument("--n-train", type=int, default=16)
    sp.add_argument("--n-test", type=int, default=4)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("fit", help="optimize a grid against a dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="output checkpoint path")
    _add_config_flags(sp)
    sp.set_defaults(fn=cmd_fit)

    sp = sub.add_parser("render", help="render frames from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--data", default=None, help="dataset dir (cameras / spiral reference)")
    sp.add_argument("--source", choices=("spiral", "train", "test"), default="spiral")
    sp.add_argument("--views", type=int, default=30)
    sp.add_argument("--radius", type=float, default=0.3)
    sp.add_argument("--turns", type=float, default=1.0)
    sp.add_argument("--pitch", type=float, default=0.0)
    sp.add_argument("--focus-depth", type=float, default=None)
    sp.add_argument("--reference-split", choices=("train", "test"), default="test")
    sp.add_argument("--reference-index", type=int, default=0)
    sp.add_argument(
        "--reference-fov",
        type=float,
        default=None,
        help="override the reference camera's horizontal fov (radians)",
    )
    sp.add_argument("--depth", action="store_true", help="also write raw depth + preview")
    _add_config_flags(sp)
    sp.set_defaults(fn=cmd_render)

    sp = sub.add_parser("adapt", help="fine-tune against stylized priors")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--priors", required=True, help="rendered priors dir (manifest.json)")
    sp.add_argument("--styled", default=None,
                    help="stylized image dir with the manifest's filenames (default: priors dir)")
    sp.add_argument("--strategy", default="S3")
    sp.add_argument("--out", required=True)
    sp.add_argument("--depth-rmse-vs", default=None,
                    help="dataset dir with gt_depth/ for a depth comparison")
    _add_config_flags(sp)
    sp.set_defaults(fn=cmd_adapt)

    sp = sub.add_parser("eval", help="flow-warped consistency along a spiral")
    sp.add_argument("--real", required=True, help="unstylized checkpoint")
    sp.add_argument("--styled", required=True, help="stylized checkpoint")
    sp.add_argument("--data", required=True, help="dataset dir for the reference camera")
    sp.add_argument("--out", required=True, help="report JSON path")
    sp.add_argument("--deltas", default="1,5")
    sp.add_argument("--views", type=int, default=12)
    sp.add_argument("--radius", type=float, default=0.3)
    sp.add_argument("--turns", type=float, default=1.0)
    sp.add_argument("--pitch", type=float, default=0.0)
    sp.add_argument("--focus-depth", type=float, default=None)
    sp.add_argument("--reference-split", choices=("train", "test"), default="test")
    sp.add_argument("--reference-index", type=int, default=0)
    sp.add_argument(
        "--reference-fov",
        type=float,
        default=None,
        help="override the reference camera's horizontal fov (radians)",
    )
    sp.add_argument("--flow-dir", default=None, help="external .flo directory")
    sp.add_argument("--save-flows", action="store_true")
    _add_config_flags(sp)
    sp.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericalFailure as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4
    except (ContractViolation, StyleTrfError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
