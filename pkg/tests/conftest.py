"""Session fixtures shared across the suite.

The expensive artifacts (the desk-scale fit and the three strategy
adaptations) are built once per session and reused by both the unit tests
and the acceptance suite.  Acceptance tests append one summary line each to
ACCEPTANCE_LINES; a terminal-summary hook prints them at the end of the run
so the pass/fail record survives pytest's output capture.
"""

import json
import os
import time

import numpy as np
import pytest

import helpers
from styletrf import cli
from styletrf.optim import desk_config, fit
from styletrf.render import render_image
from styletrf.scene import desk_scene, load_checkpoint, make_synthetic, save_checkpoint
from styletrf.style import (
    Strategy,
    adapt,
    adapt_config,
    fresh_like,
    load_priors,
    render_priors,
    spiral_trajectory,
)

ACCEPTANCE_LINES = []


def record_acceptance(number, ok, detail):
    status = "PASS" if ok else "FAIL"
    ACCEPTANCE_LINES.append(f"criterion {number:2d} {status}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("styletrf")


@pytest.fixture(scope="session")
def desk_data():
    """Analytic dataset for the three-primitive scene: 16 train / 4 test, 64x64."""
    dataset, gt = make_synthetic(desk_scene(), n_train=16, n_test=4, image_size=64)
    return {"dataset": dataset, "gt": gt}


@pytest.fixture(scope="session")
def desk_fit(desk_data):
    """Desk-scale fit (32^3 -> 64^3, 2000 iters); the base for all adaptation tests."""
    cfg = desk_config()
    mse_history = []

    def track(it, loss, parts, grid):
        mse_history.append(parts["mse"])

    t0 = time.perf_counter()
    grid = fit(desk_data["dataset"], cfg, callback=track)
    seconds = time.perf_counter() - t0
    return {"grid": grid, "cfg": cfg, "mse_history": mse_history, "seconds": seconds}


@pytest.fixture(scope="session")
def style_run(desk_fit, desk_data, workdir):
    """Channel-swapped style adaptation run through the CLI plus S1/S2 API runs.

    Builds the priors directory, a channel-swapped styled sibling, runs
    cmd_adapt (strategy S3, default 1000 iterations), and runs the same
    adaptation via the API under S2 and S1 for the ablation comparison.
    """
    base = workdir / "style"
    base.mkdir()
    fit_path = str(base / "fit.stf")
    priors_dir = str(base / "priors")
    styled_dir = str(base / "priors_styled")
    s3_path = str(base / "s3.stf")

    grid = desk_fit["grid"]
    cfg = desk_fit["cfg"]
    save_checkpoint(grid, fit_path)

    dataset = desk_data["dataset"]
    ref = dataset.cameras[dataset.split_indices("test")[0]]
    cams = spiral_trajectory(ref, n_views=12, radius=0.25)
    priors = render_priors(grid, cams, cfg.render, out_dir=priors_dir)

    os.makedirs(styled_dir, exist_ok=True)
    from styletrf.scene import read_png, write_png

    for i in range(len(priors.cameras)):
        name = f"frame_{i:04}.png"
        img = read_png(os.path.join(priors_dir, name))
        write_png(os.path.join(styled_dir, name), img[..., [1, 0, 2]])

    t0 = time.perf_counter()
    rc = cli.main(
        [
            "--threads", "1",
            "adapt",
            "--checkpoint", fit_path,
            "--priors", priors_dir,
            "--styled", styled_dir,
            "--out", s3_path,
        ]
    )
    cli_seconds = time.perf_counter() - t0

    styled_priors = load_priors(priors_dir, image_dir=styled_dir)
    acfg = adapt_config()
    s2 = adapt(grid, styled_priors, Strategy.S2, acfg)
    s1 = adapt(fresh_like(grid, acfg), styled_priors, Strategy.S1, acfg)
    return {
        "fit_path": fit_path,
        "priors_dir": priors_dir,
        "styled_dir": styled_dir,
        "s3_path": s3_path,
        "cli_rc": rc,
        "cli_seconds": cli_seconds,
        "s3": load_checkpoint(s3_path) if rc == 0 else None,
        "s2": s2,
        "s1": s1,
        "priors": styled_priors,
        "adapt_cfg": acfg,
    }


@pytest.fixture(scope="session")
def smooth_eval():
    """Self-consistency setup: a smooth hand-built grid over a 12-pose spiral."""
    from styletrf.consistency import eval_trajectory
    from styletrf.render import RenderConfig

    grid = helpers.make_smooth_grid()
    cams = spiral_trajectory(helpers.frontal_camera(), n_views=12, radius=0.3)
    cfg = RenderConfig(samples_per_ray=128)
    t0 = time.perf_counter()
    report = eval_trajectory(grid, grid, cams, cfg, deltas=(1, 5))
    seconds = time.perf_counter() - t0
    return {"grid": grid, "cams": cams, "cfg": cfg, "report": report, "seconds": seconds}


def run_cli(argv):
    """cli.main with the exit code returned, never raising SystemExit."""
    try:
        return cli.main(argv)
    except SystemExit as e:  # argparse errors
        return e.code


@pytest.fixture(scope="session")
def determinism_runs(workdir):
    """Two identical tiny cmd_fit + cmd_render runs for byte comparison."""
    base = workdir / "determinism"
    base.mkdir()
    data = str(base / "data")
    rc = run_cli(["synth", "--out", data, "--n-train", "8", "--n-test", "2", "--size", "32"])
    assert rc == 0
    fit_flags = [
        "--total-iters", "80",
        "--rays-per-iter", "256",
        "--init-resolution", "16",
        "--upsample-schedule", "40:24",
        "--final-resolution", "24",
        "--samples-per-ray", "48",
    ]
    outputs = {}
    for tag in ("a", "b"):
        run = base / tag
        run.mkdir()
        ckpt = str(run / "fit.stf")
        rc = run_cli(["--threads", "1", "fit", "--data", data, "--out", ckpt] + fit_flags)
        assert rc == 0
        frames = str(run / "frames")
        rc = run_cli(
            [
                "--threads", "1",
                "render",
                "--checkpoint", ckpt,
                "--data", data,
                "--out", frames,
                "--views", "3",
                "--depth",
                "--samples-per-ray", "48",
            ]
        )
        assert rc == 0
        outputs[tag] = {"ckpt": ckpt, "frames": frames, "run_dir": str(run)}
    return {"data": data, "runs": outputs}
