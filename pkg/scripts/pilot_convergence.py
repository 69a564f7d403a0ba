"""Three-seed convergence pilot for the two-concept scene.

Runs the full pipeline and the random-sphere baseline for seeds 0, 1, 2 and
writes per-concept initial/final masked L2 and PSNR to tests/data.

    python3 scripts/pilot_convergence.py [--iters 500]
"""
import argparse
import dataclasses
import json
from pathlib import Path

import numpy as np

from conceptsplat.pipeline import convergence_run
from conceptsplat.render import backend
from conceptsplat.scene import load_scene

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iters", type=int, default=500)
    ap.add_argument("--out", default=str(ROOT / "tests" / "data" / "pilot_convergence.json"))
    args = ap.parse_args()
    base = load_scene(ROOT / "scenes" / "two_concepts.yaml")
    runs = []
    for seed in (0, 1, 2):
        scene = dataclasses.replace(base, seed=seed)
        for init in ("layout", "random_sphere"):
            _, rows, secs = convergence_run(scene, init, iters=args.iters)
            first, last = rows[0], rows[-1]
            runs.append({"seed": seed, "init": init, "seconds": round(secs, 2),
                         "l2_initial": first["l2"], "l2_final": last["l2"],
                         "psnr_initial": first["psnr"], "psnr_final": last["psnr"],
                         "l2_ratio": (np.array(last["l2"]) / np.array(first["l2"])).tolist(),
                         "psnr_gain": (np.array(last["psnr"]) - np.array(first["psnr"])).tolist()})
            print(f"seed {seed} {init:13s} {secs:6.1f}s ratio "
                  f"{np.round(runs[-1]['l2_ratio'], 4)} gain {np.round(runs[-1]['psnr_gain'], 2)}")
    doc = {"scene": "scenes/two_concepts.yaml", "iters": args.iters, "resolution": base.stage2.resolution,
           "backend": backend.active(), "runs": runs}
    Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
