"""Two-stage orchestration: layout and point-cloud initialization, then concept-aware refinement."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io as img_io
from .camera import Camera, orbit_camera
from .gaussians import (INIT_OPACITY, GaussianCloud, export_ply, init_from_pointclouds, logit,
                        mean_neighbor_distance, rgb_to_sh)
from .guidance import (AffinePredictor, GuidanceConfig, ToyBackbone, TargetOraclePredictor,
                       cism_gradient, make_schedule)
from .layout import (LayoutController, LayoutPlan, bbox_transform, generate_layout,
                     make_controller)
from .pointcloud import (ProceduralGenerator, ShapeGenerator, generate_candidates,
                         normalize_pointcloud, place_pointcloud, select_pointcloud)
from .rca import ConceptLoRA, ConceptSet
from .render import RenderOutput, render, render_backward
from .scene import HashTextEmbedder, SceneSpec, null_prompt_embedding

log = logging.getLogger(__name__)

BACKGROUND = (1.0, 1.0, 1.0)
CAMERA_RADIUS = 2.2
FOV_DEG = 49.0
EVAL_AZIMUTHS = (45.0, 135.0, 225.0, 315.0)
EVAL_ELEVATION = 15.0
# optional evaluation preset: 30 views evenly spaced over azimuth [-45, 45]
PRESET_AZIMUTHS = {"eval": tuple(np.linspace(-45.0, 45.0, 30))}
ADAPTER_RANK = 4
D_TEXT = 32


class NonFiniteGradientError(RuntimeError):
    pass


@dataclass
class RunManifest:
    scene_hash: str
    layout_provenance: str | None = None
    timings: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    metrics: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self, include_timings: bool = True) -> str:
        d = asdict(self)
        if not include_timings:
            d.pop("timings")
        return json.dumps(d, indent=2, sort_keys=True)


def bounds_center(bounds) -> np.ndarray:
    return np.asarray(bounds, dtype=np.float64) / 2.0


def scene_extent(bounds) -> float:
    return float(np.linalg.norm(np.asarray(bounds, dtype=np.float64)))


# --------------------------------------------------------------------------- stage 1

def build_stage1_cloud(scene: SceneSpec, plan: LayoutPlan, generator: ShapeGenerator | None = None,
                       n_candidates: int = 4):
    """Candidates -> select -> normalize -> place, per concept. Returns (cloud, selected indices)."""
    generator = generator or ProceduralGenerator()
    placed, chosen = [], []
    for c in scene.concepts:
        cands = generate_candidates(c.shape_prompt, n_candidates, generator,
                                    seed=scene.seed * 1009 + c.id)
        idx, pcd = select_pointcloud(cands)
        chosen.append(idx)
        tr = bbox_transform(plan.box(c.id), scene.global_bounds)
        placed.append((place_pointcloud(normalize_pointcloud(pcd), tr), c.id))
    return init_from_pointclouds(placed, scene.k), chosen


def random_sphere_cloud(scene: SceneSpec, n_points: int, seed: int = 0) -> GaussianCloud:
    """Layout-free baseline: points uniform in a ball at the scene center, labels uniform at random."""
    rng = np.random.default_rng([seed, 104729])
    W, D, H = scene.global_bounds
    radius = 0.5 * min(W, D, H)
    v = rng.normal(size=(n_points, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    pos = bounds_center(scene.global_bounds) + radius * v * rng.random((n_points, 1)) ** (1 / 3)
    labels = rng.integers(0, scene.k, n_points)
    std = np.maximum(mean_neighbor_distance(pos), 1e-4)
    rot = np.zeros((n_points, 4))
    rot[:, 0] = 1.0
    return GaussianCloud(pos, np.repeat(np.log(std)[:, None], 3, axis=1), rot,
                         np.full(n_points, logit(INIT_OPACITY)),
                         rgb_to_sh(np.full((n_points, 3), 0.5)), labels, scene.k)


# --------------------------------------------------------------------------- stage 2 setup

def sample_camera(iteration: int, seed: int, bounds=(1.0, 1.0, 1.0), resolution: int = 64):
    """Camera and timestep draw for one iteration; deterministic in (seed, iteration).

    Returns (camera, rng) so the caller can keep drawing from the same stream.
    """
    rng = np.random.default_rng([seed, iteration])
    az = rng.uniform(-180.0, 180.0)
    el = rng.uniform(-10.0, 45.0)
    cam = orbit_camera(az, el, CAMERA_RADIUS, center=bounds_center(bounds), fov_deg=FOV_DEG,
                       resolution=(resolution, resolution))
    return cam, rng


def eval_cameras(bounds, resolution: int) -> list[Camera]:
    return [orbit_camera(az, EVAL_ELEVATION, CAMERA_RADIUS, center=bounds_center(bounds),
                         fov_deg=FOV_DEG, resolution=(resolution, resolution))
            for az in EVAL_AZIMUTHS]


def build_concept_set(scene: SceneSpec, embedder: HashTextEmbedder | None = None,
                      d: int = 32, rank: int = ADAPTER_RANK) -> ConceptSet:
    embedder = embedder or HashTextEmbedder(d_text=D_TEXT)
    prompts = [embedder.embed(c.concept_prompt) for c in scene.concepts]
    adapters = [ConceptLoRA.synthetic(embedder.d_text, d, rank, seed=c.adapter_seed)
                for c in scene.concepts]
    return ConceptSet(prompts=prompts, background=embedder.embed(scene.global_prompt),
                      adapters=adapters, lora_scale=scene.stage2.lam,
                      null=null_prompt_embedding(embedder))


def build_predictor(kind: str, scene: SceneSpec, concept_set: ConceptSet):
    res = scene.stage2.resolution
    if res % 4:
        raise ValueError("resolution must be a multiple of 4")
    bb = ToyBackbone(image_hw=(res, res), feat_hw=(res // 4, res // 4), d=32, d_text=D_TEXT,
                     seed=scene.seed)
    sch = make_schedule(scene.stage2.T, weight_fn=scene.stage2.weight)
    if kind == "target":
        return TargetOraclePredictor(bb, sch, concept_set, scene.target_colors(), BACKGROUND)
    if kind == "affine":
        return AffinePredictor(bb, sch)
    raise ValueError(f"unknown predictor {kind!r}")


# --------------------------------------------------------------------------- metrics

def masked_metrics(cloud: GaussianCloud, cams, targets, tau: float = 0.5):
    """Per-concept masked L2 (mean squared error) and PSNR, pooled over the views.

    A concept with an empty mask in every view scores L2 = 1 (the worst case
    for colors in [0, 1]) and PSNR = 0.
    """
    k = cloud.k
    sq = [[] for _ in range(k)]
    for cam in cams:
        out = render(cloud, cam, BACKGROUND, tau)
        for i in range(k):
            m = out.masks[i]
            if m.any():
                sq[i].append(((out.color[m] - np.asarray(targets[i])) ** 2).ravel())
    l2, psnr = [], []
    for i in range(k):
        if sq[i]:
            mse = float(np.mean(np.concatenate(sq[i])))
        else:
            mse = 1.0
        l2.append(mse)
        psnr.append(float(-10.0 * np.log10(max(mse, 1e-12))))
    return l2, psnr


def metrics_csv(rows, k: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration"] + [f"{m}_c{i}" for i in range(k) for m in ("l2", "psnr")])
    for r in rows:
        vals = []
        for i in range(k):
            vals += [f"{r['l2'][i]:.10e}", f"{r['psnr'][i]:.10e}"]
        w.writerow([r["iteration"]] + vals)
    return buf.getvalue()


# --------------------------------------------------------------------------- optimizer

class MomentumOptimizer:
    """First-moment smoothing m = beta * m + (1 - beta) * g per parameter group.

    ``update="sign"`` steps by ``lr * sign(m)``, so each learning rate is the
    per-coordinate step size; ``update="sgd"`` steps by ``lr * m``.
    """

    def __init__(self, lr: dict, beta: float = 0.9, update: str = "sign"):
        if update not in ("sign", "sgd"):
            raise ValueError(f"unknown update rule {update!r}")
        self.lr = dict(lr)
        self.beta = beta
        self.update = update
        self.m: dict[str, np.ndarray] = {}

    def step(self, cloud: GaussianCloud, grads: dict) -> None:
        params = cloud.params()
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None or m.shape != g.shape:
                m = np.zeros_like(g)
            m = self.beta * m + (1.0 - self.beta) * g
            self.m[name] = m
            params[name] -= self.lr[name] * (np.sign(m) if self.update == "sign" else m)
        cloud.normalize_rotations()

    def keep(self, keep: np.ndarray) -> None:
        for name in self.m:
            self.m[name] = self.m[name][keep]


def prune(cloud: GaussianCloud, threshold: float):
    keep = cloud.opacity >= threshold
    return cloud.subset(keep), keep


# --------------------------------------------------------------------------- stage 2 loop

def optimize(cloud: GaussianCloud, scene: SceneSpec, predictor, concept_set: ConceptSet,
             iters: int | None = None, seed: int | None = None, on_metrics=None):
    """CISM refinement. Returns (cloud, metric rows); the input cloud is not modified."""
    cfg = scene.stage2
    if cloud.k != scene.k:
        raise ValueError(f"cloud has k={cloud.k} but the scene has {scene.k} concepts")
    iters = cfg.iters if iters is None else iters
    seed = scene.seed if seed is None else seed
    cloud = cloud.copy()
    lr = dict(cfg.lr)
    lr["mu"] = lr["mu"] * scene_extent(scene.global_bounds)
    opt = MomentumOptimizer(lr, cfg.momentum)
    cams = eval_cameras(scene.global_bounds, cfg.resolution)
    targets = scene.target_colors()
    t_lo, t_hi = cfg.t_range()

    rows = []

    def record(it):
        l2, psnr = masked_metrics(cloud, cams, targets, cfg.tau)
        rows.append({"iteration": it, "l2": l2, "psnr": psnr})
        if on_metrics:
            on_metrics(rows[-1])

    record(0)
    for it in range(iters):
        cam, rng = sample_camera(it, seed, scene.global_bounds, cfg.resolution)
        t = int(rng.integers(t_lo, t_hi + 1))
        out = render(cloud, cam, BACKGROUND, cfg.tau)
        g_img = cism_gradient(out.color, out.masks, concept_set, t, cfg.delta_t, predictor, cfg.n_sub)
        if not np.all(np.isfinite(g_img)):
            raise NonFiniteGradientError(f"iteration {it}: non-finite image gradient at t={t}")
        grads = render_backward(out, g_img)
        if not grads.all_finite():
            bad = [k for k, v in grads.as_dict().items() if not np.all(np.isfinite(v))]
            raise NonFiniteGradientError(f"iteration {it}: non-finite gradient for {bad} at t={t}")
        opt.step(cloud, grads.as_dict())
        if cfg.prune_every and (it + 1) % cfg.prune_every == 0:
            cloud, keep = prune(cloud, cfg.prune_opacity)
            opt.keep(keep)
        if (it + 1) % cfg.metric_every == 0 or it + 1 == iters:
            record(it + 1)
    return cloud, rows


# --------------------------------------------------------------------------- turntable

@dataclass
class TurntableView:
    azimuth: float
    joint: RenderOutput
    isolated: list


def render_turntable(cloud: GaussianCloud, n_views: int, resolution: int = 64,
                     center=(0.5, 0.5, 0.5), elevation: float = EVAL_ELEVATION,
                     radius: float = CAMERA_RADIUS, azimuths=None) -> list[TurntableView]:
    """n evenly spaced azimuths from 0 (or explicit ``azimuths``); isolated renders keep
    only one concept's Gaussians."""
    if azimuths is None:
        if n_views < 1:
            raise ValueError("need at least one view")
        azimuths = [360.0 * j / n_views for j in range(n_views)]
    views = []
    for az in azimuths:
        az = float(az)
        cam = orbit_camera(az, elevation, radius, center=center, fov_deg=FOV_DEG,
                           resolution=(resolution, resolution))
        joint = render(cloud, cam, BACKGROUND)
        iso = [render(cloud.subset(cloud.labels == i), cam, BACKGROUND) for i in range(cloud.k)]
        views.append(TurntableView(az, joint, iso))
    return views


def write_turntable(views, out_dir) -> list[str]:
    """view_XXX.png and view_XXX_mask_cI.png per view; isolated colors under isolated/."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "isolated").mkdir(exist_ok=True)
    written = []
    for j, v in enumerate(views):
        p = out_dir / f"view_{j:03d}.png"
        img_io.save_png(p, v.joint.color)
        written.append(p)
        for i in range(len(v.isolated)):
            p = out_dir / f"view_{j:03d}_mask_c{i}.png"
            img_io.save_png(p, v.joint.masks[i])
            written.append(p)
            p = out_dir / "isolated" / f"view_{j:03d}_c{i}.png"
            img_io.save_png(p, v.isolated[i].color)
            written.append(p)
    return [str(p) for p in written]


# --------------------------------------------------------------------------- run

class _Outputs:
    """Tracks created files so a failed run can remove its partial outputs."""

    def __init__(self, root):
        self.root = Path(root)
        self.created: list[Path] = []
        self.dirs: list[Path] = []

    def mkdir(self, rel=""):
        d = self.root / rel
        new = []
        p = d
        while not p.exists():
            new.append(p)
            p = p.parent
        d.mkdir(parents=True, exist_ok=True)
        self.dirs.extend(reversed(new))
        return d

    def write(self, rel, data) -> str:
        p = self.root / rel
        self.mkdir(p.parent.relative_to(self.root))
        mode = "wb" if isinstance(data, bytes) else "w"
        with open(p, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        self.created.append(p)
        return rel

    def track(self, paths):
        self.created.extend(Path(p) for p in paths)

    @classmethod
    def wrap(cls, out_dir):
        """(outputs, owned): reuse a caller's tracker or start a new one."""
        if out_dir is None or isinstance(out_dir, cls):
            return out_dir, False
        return cls(out_dir), True

    def cleanup(self):
        for p in self.created:
            try:
                p.unlink()
            except FileNotFoundError:
                pass
        for d in sorted(self.dirs, key=lambda p: len(p.parts), reverse=True):
            try:
                d.rmdir()
            except OSError:
                pass


def run_stage1(scene: SceneSpec, out_dir=None, controller: LayoutController | None = None,
               generator: ShapeGenerator | None = None, allow_fallback: bool = False):
    """Layout, candidate selection, placement and labeled initialization."""
    t0 = time.perf_counter()
    manifest = RunManifest(scene_hash=scene.content_hash())
    controller = controller or make_controller("fallback")
    outs, owned = _Outputs.wrap(out_dir)
    try:
        plan = generate_layout(scene, controller, allow_fallback=allow_fallback)
        manifest.layout_provenance = plan.provenance
        cloud, chosen = build_stage1_cloud(scene, plan, generator)
        manifest.config["selected_candidates"] = chosen
        if outs is not None:
            outs.mkdir()
            manifest.outputs["layout"] = outs.write("layout.json", plan.to_json())
            manifest.outputs["cloud_stage1"] = outs.write("cloud_stage1.ply", export_ply(cloud))
            prev = outs.mkdir("renders/stage1")
            for j, cam in enumerate(eval_cameras(scene.global_bounds, scene.stage2.resolution)):
                p = prev / f"preview_{j:03d}.png"
                img_io.save_png(p, render(cloud, cam, BACKGROUND).color)
                outs.track([p])
            manifest.outputs["stage1_previews"] = "renders/stage1"
    except BaseException:
        if owned:
            outs.cleanup()
        raise
    manifest.timings["stage1"] = time.perf_counter() - t0
    return cloud, plan, manifest


def run_stage2(cloud: GaussianCloud, scene: SceneSpec, predictor_spec: str = "target",
               out_dir=None, manifest: RunManifest | None = None, iters: int | None = None,
               turntable_views: int = 4):
    t0 = time.perf_counter()
    if cloud.k != scene.k:
        raise ValueError(f"cloud has k={cloud.k} but the scene has {scene.k} concepts")
    manifest = manifest or RunManifest(scene_hash=scene.content_hash())
    cs = build_concept_set(scene)
    predictor = build_predictor(predictor_spec, scene, cs)
    outs, owned = _Outputs.wrap(out_dir)
    try:
        final, rows = optimize(cloud, scene, predictor, cs, iters=iters)
        manifest.metrics = rows
        manifest.config.update({"predictor": predictor_spec,
                                "iters": scene.stage2.iters if iters is None else iters,
                                "n_final": len(final), "n_initial": len(cloud)})
        if outs is not None:
            outs.mkdir()
            manifest.outputs["cloud_final"] = outs.write("cloud_final.ply", export_ply(final))
            manifest.outputs["metrics"] = outs.write("metrics.csv", metrics_csv(rows, scene.k))
            views = render_turntable(final, turntable_views, scene.stage2.resolution,
                                     center=bounds_center(scene.global_bounds))
            outs.mkdir("renders/isolated")
            outs.track(write_turntable(views, outs.root / "renders"))
            manifest.outputs["renders"] = "renders"
    except BaseException:
        if owned:
            outs.cleanup()
        raise
    manifest.timings["stage2"] = time.perf_counter() - t0
    return final, manifest


def run_pipeline(scene: SceneSpec, out_dir, layout: str = "fallback",
                 generator: ShapeGenerator | None = None, predictor: str = "target",
                 iters: int | None = None, controller: LayoutController | None = None,
                 allow_fallback: bool = False, turntable_views: int = 4):
    """Both stages plus manifest.json; removes everything it wrote if any step fails."""
    outs = _Outputs(out_dir)
    try:
        cloud, plan, man = run_stage1(scene, outs, controller or make_controller(layout), generator,
                                      allow_fallback)
        final, man = run_stage2(cloud, scene, predictor, outs, man, iters, turntable_views)
        man.outputs["manifest"] = "manifest.json"
        outs.write("manifest.json", man.to_json())
    except BaseException:
        outs.cleanup()
        raise
    return final, plan, man


def convergence_run(scene: SceneSpec, init: str = "layout", iters: int | None = None,
                    predictor: str = "target"):
    """Stage 2 from either the layout initialization or the random-sphere baseline.

    Returns (final cloud, metric rows, seconds). The baseline uses as many
    Gaussians as the layout initialization would.
    """
    t0 = time.perf_counter()
    cloud, _, _ = run_stage1(scene)
    if init == "random_sphere":
        cloud = random_sphere_cloud(scene, len(cloud), seed=scene.seed)
    elif init != "layout":
        raise ValueError(f"unknown initialization {init!r}")
    cs = build_concept_set(scene)
    final, rows = optimize(cloud, scene, build_predictor(predictor, scene, cs), cs, iters=iters)
    return final, rows, time.perf_counter() - t0
