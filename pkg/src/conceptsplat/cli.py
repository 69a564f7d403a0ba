"""Command line entry point: ``conceptsplat generate | render | validate``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .gaussians import import_ply
from .layout import LayoutError, fallback_layout, make_controller, validate_layout
from .pipeline import PRESET_AZIMUTHS, render_turntable, run_pipeline, write_turntable
from .pointcloud import PointCloudError, make_generator
from .ply import PlyError
from .scene import SceneError, load_scene


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="conceptsplat", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="run both stages for a scene file")
    g.add_argument("--scene", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--layout", choices=("llm", "fixture", "fallback"), default="fallback")
    g.add_argument("--layout-fallback", action="store_true",
                   help="use the fallback layout if the controller fails")
    g.add_argument("--shape-source", default="procedural",
                   help="procedural, file:<path> or external")
    g.add_argument("--predictor", choices=("target", "affine"), default="target")
    g.add_argument("--seed", type=int)
    g.add_argument("--iters", type=int)
    g.add_argument("--delta-t", type=int)
    g.add_argument("--tau", type=float)
    g.add_argument("--lambda", dest="lam", type=float)
    g.add_argument("--t-min", type=int)
    g.add_argument("--t-max", type=int)
    g.add_argument("--turntable", type=int, default=4)

    r = sub.add_parser("render", help="turntable renders of a Gaussian PLY")
    r.add_argument("--ply", required=True)
    r.add_argument("--turntable", type=int, default=8)
    r.add_argument("--preset", choices=("eval",),
                   help="eval: 30 views evenly spaced over azimuth [-45, 45] (overrides --turntable)")
    r.add_argument("--out")
    r.add_argument("--resolution", type=int, default=64)
    r.add_argument("--center", type=float, nargs=3, default=(0.5, 0.5, 0.5))

    v = sub.add_parser("validate", help="parse a scene file and check its fallback layout")
    v.add_argument("--scene", required=True)
    return p


def _apply_overrides(scene, args):
    over = {k: getattr(args, a) for k, a in (("iters", "iters"), ("delta_t", "delta_t"), ("tau", "tau"),
                                            ("lam", "lam"), ("t_min", "t_min"), ("t_max", "t_max"))
            if getattr(args, a) is not None}
    if over:
        scene = dataclasses.replace(scene, stage2=dataclasses.replace(scene.stage2, **over))
    if args.seed is not None:
        scene = dataclasses.replace(scene, seed=args.seed)
    return scene


def cmd_generate(args) -> int:
    scene = _apply_overrides(load_scene(args.scene), args)
    controller = make_controller(args.layout)
    generator = make_generator(args.shape_source)
    out = Path(args.out)
    final, plan, man = run_pipeline(scene, out, generator=generator, predictor=args.predictor,
                                    controller=controller, allow_fallback=args.layout_fallback,
                                    turntable_views=args.turntable)
    last = man.metrics[-1] if man.metrics else None
    print(f"wrote {out} ({len(final)} Gaussians, layout={plan.provenance})")
    if last:
        for i in range(scene.k):
            print(f"  concept {i}: masked L2 {last['l2'][i]:.5f}, PSNR {last['psnr'][i]:.2f} dB")
    return 0


def cmd_render(args) -> int:
    with open(args.ply, "rb") as fh:
        cloud = import_ply(fh.read())
    views = render_turntable(cloud, args.turntable, args.resolution, center=np.array(args.center),
                             azimuths=PRESET_AZIMUTHS.get(args.preset))
    out = Path(args.out) if args.out else Path(args.ply).with_suffix("").parent / "turntable"
    files = write_turntable(views, out)
    print(f"wrote {len(files)} images to {out}")
    return 0


def cmd_validate(args) -> int:
    scene = load_scene(args.scene)
    rep = validate_layout(fallback_layout(scene), scene.global_bounds, scene.k)
    print(f"{args.scene}: {scene.k} concept(s), bounds {scene.global_bounds}, "
          f"effective t range {scene.stage2.t_range()}")
    for w in rep.warnings:
        print(f"  warning: {w}")
    for e in rep.errors:
        print(f"  error: {e}")
    return 0 if rep.valid else 1


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"generate": cmd_generate, "render": cmd_render, "validate": cmd_validate}
    try:
        return handlers[args.command](args)
    except (SceneError, LayoutError, PointCloudError, PlyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
