"""Per-concept 3D bounding boxes and the box placement transform.

Coordinates are z-up; global bounds (W, D, H) run along (x, y, z) from the origin.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .scene import SceneSpec

log = logging.getLogger(__name__)

PROVENANCES = ("llm", "fixture", "fallback")


class LayoutError(RuntimeError):
    pass


@dataclass(frozen=True)
class Bbox3D:
    X: float
    Y: float
    Z: float
    W: float
    D: float
    H: float
    concept_id: int

    def as_list(self) -> list[float]:
        return [self.X, self.Y, self.Z, self.W, self.D, self.H]

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.X, self.Y, self.Z])

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.X + self.W, self.Y + self.D, self.Z + self.H])


@dataclass(frozen=True)
class PlacementTransform:
    scale: float
    translation: np.ndarray


@dataclass
class LayoutPlan:
    boxes: list[Bbox3D]
    provenance: str

    def box(self, concept_id: int) -> Bbox3D:
        for b in self.boxes:
            if b.concept_id == concept_id:
                return b
        raise KeyError(concept_id)

    def to_json(self) -> str:
        return json.dumps({"provenance": self.provenance,
                           "boxes": [{"concept_id": b.concept_id, "bbox": b.as_list()}
                                     for b in self.boxes]}, indent=2)


@dataclass
class ValidationReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.errors

    def __bool__(self) -> bool:
        return bool(self.errors or self.warnings)


def bbox_transform(box: Bbox3D, bounds) -> PlacementTransform:
    """s = min(W_i / W, H_i / H); t = box center."""
    W, _, H = bounds
    s = min(box.W / W, box.H / H)
    t = np.array([box.X + box.W / 2, box.Y + box.D / 2, box.Z + box.H / 2])
    return PlacementTransform(scale=s, translation=t)


def fallback_layout(scene: SceneSpec) -> LayoutPlan:
    """Boxes in a row along x on the floor.

    Each concept gets a W/k slot; the box is 90% of the slot, capped at W/2,
    centred in the slot. Depth is D/2 and height H/2, both centred / grounded.
    """
    W, D, H = scene.global_bounds
    k = scene.k
    slot = W / k
    bw = min(0.9 * slot, 0.5 * W)
    bd, bh = 0.5 * D, 0.5 * H
    boxes = [Bbox3D(X=i * slot + (slot - bw) / 2, Y=(D - bd) / 2, Z=0.0, W=bw, D=bd, H=bh,
                    concept_id=i) for i in range(k)]
    return LayoutPlan(boxes, "fallback")


def _overlap_volume(a: Bbox3D, b: Bbox3D) -> float:
    ext = np.clip(np.minimum(a.hi, b.hi) - np.maximum(a.lo, b.lo), 0.0, None)
    return float(np.prod(ext))


def validate_layout(plan: LayoutPlan, bounds, k: int | None = None) -> ValidationReport:
    W, D, H = bounds
    rep = ValidationReport()
    ids = [b.concept_id for b in plan.boxes]
    for cid in sorted(set(ids)):
        if ids.count(cid) > 1:
            rep.errors.append(f"concept {cid}: {ids.count(cid)} boxes")
    if k is not None:
        for cid in range(k):
            if cid not in ids:
                rep.errors.append(f"concept {cid}: no box")
        for cid in set(ids):
            if not 0 <= cid < k:
                rep.errors.append(f"concept {cid}: id out of range for k={k}")
    for b in plan.boxes:
        for name, v in (("W", b.W), ("D", b.D), ("H", b.H)):
            if not v > 0:
                rep.errors.append(f"concept {b.concept_id}: non-positive {name}={v}")
        for axis, lo, size, limit in (("x", b.X, b.W, W), ("y", b.Y, b.D, D), ("z", b.Z, b.H, H)):
            if lo < 0 or lo + size > limit + 1e-12:
                rep.errors.append(f"concept {b.concept_id}: {axis}-extent [{lo}, {lo + size}] "
                                  f"outside [0, {limit}]")
        if b.W > 0 and b.H > 0 and b.D > 0:
            s = bbox_transform(b, bounds).scale
            if s > b.D + 1e-12:
                rep.warnings.append(f"concept {b.concept_id}: placed depth {s:.4g} exceeds box depth {b.D:.4g}")
            if s > min(b.W, b.H) + 1e-12:
                rep.warnings.append(f"concept {b.concept_id}: scale {s:.4g} exceeds box width/height "
                                    "(global bounds below 1)")
    for i, a in enumerate(plan.boxes):
        for b in plan.boxes[i + 1:]:
            v = _overlap_volume(a, b)
            if v > 0:
                smaller = min(a.W * a.D * a.H, b.W * b.D * b.H)
                frac = v / smaller if smaller > 0 else 0.0
                rep.warnings.append(f"concepts {a.concept_id} and {b.concept_id} overlap: "
                                    f"volume {v:.4g} ({100 * frac:.1f}% of the smaller box)")
    return rep


def _repair(plan: LayoutPlan, bounds) -> LayoutPlan:
    """Clamp every box into the global bounds."""
    lim = np.asarray(bounds, dtype=float)
    boxes = []
    for b in plan.boxes:
        size = np.minimum(np.array([b.W, b.D, b.H]), lim)
        lo = np.clip(b.lo, 0.0, lim - size)
        boxes.append(Bbox3D(*lo.tolist(), *size.tolist(), concept_id=b.concept_id))
    return LayoutPlan(boxes, plan.provenance)


# --------------------------------------------------------------------------- controllers

INSTRUCTION = (
    "You place objects in a 3D scene. The scene occupies the box [0, W] x [0, D] x [0, H] "
    "with z pointing up. For every concept, output one bounding box "
    "[X, Y, Z, W_i, D_i, H_i] where (X, Y, Z) is the lowest-left corner. "
    'Answer with JSON only: {"boxes": [{"concept_id": int, "bbox": [6 numbers]}]}.'
)


def in_context_examples() -> list[dict]:
    """The three bundled in-context example blocks (multiple subjects, property change, interaction)."""
    base = resources.files("conceptsplat") / "fixtures" / "layout"
    return [json.loads((base / f"example_{name}.json").read_text())
            for name in ("multiple_subjects", "property_change", "interaction")]


def layout_request(scene: SceneSpec) -> dict:
    W, D, H = scene.global_bounds
    return {
        "instruction": INSTRUCTION,
        "examples": in_context_examples(),
        "prompt": {
            "text": scene.global_prompt,
            "bounds": {"W": W, "D": D, "H": H},
            "concepts": [{"concept_id": c.id, "class_prompt": c.class_prompt} for c in scene.concepts],
        },
    }


def request_key(request: dict) -> str:
    canon = json.dumps(request, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def parse_layout_response(text: str, provenance: str) -> LayoutPlan:
    """Strict schema check of a controller response."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LayoutError(f"layout response is not JSON: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("boxes"), list):
        raise LayoutError("layout response must be an object with a 'boxes' list")
    boxes = []
    for i, item in enumerate(doc["boxes"]):
        if not isinstance(item, dict) or set(item) != {"concept_id", "bbox"}:
            raise LayoutError(f"boxes[{i}]: expected keys concept_id and bbox")
        cid, bb = item["concept_id"], item["bbox"]
        if not isinstance(cid, int) or isinstance(cid, bool):
            raise LayoutError(f"boxes[{i}]: concept_id must be an integer")
        if (not isinstance(bb, list) or len(bb) != 6
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in bb)):
            raise LayoutError(f"boxes[{i}]: bbox must be 6 numbers")
        if not all(np.isfinite(bb)):
            raise LayoutError(f"boxes[{i}]: bbox has non-finite values")
        if min(bb[3:]) <= 0:
            raise LayoutError(f"boxes[{i}]: non-positive box size {bb[3:]}")
        boxes.append(Bbox3D(*(float(v) for v in bb), concept_id=cid))
    return LayoutPlan(boxes, provenance)


class LayoutController:
    provenance = "fallback"

    def respond(self, scene: SceneSpec) -> LayoutPlan:
        raise NotImplementedError


class FallbackController(LayoutController):
    provenance = "fallback"

    def respond(self, scene):
        return fallback_layout(scene)


class FixtureController(LayoutController):
    """Replays recorded responses stored as ``<store>/<request-hash>.json``."""

    provenance = "fixture"

    def __init__(self, store=None):
        self.store = Path(store) if store is not None else Path(
            str(resources.files("conceptsplat") / "fixtures" / "layout"))

    def path_for(self, scene: SceneSpec) -> Path:
        return self.store / f"{request_key(layout_request(scene))}.json"

    def respond(self, scene):
        path = self.path_for(scene)
        if not path.exists():
            raise LayoutError(f"no recorded layout for this scene (expected {path})")
        return parse_layout_response(path.read_text(encoding="utf-8"), "fixture")


class LLMController(LayoutController):
    """POSTs the layout request as JSON to ``base_url``; optionally records responses."""

    provenance = "llm"

    def __init__(self, base_url=None, api_key_env="CONCEPTSPLAT_LLM_KEY", timeout=60.0,
                 record_to=None):
        self.base_url = base_url or os.environ.get("CONCEPTSPLAT_LLM_URL")
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.record_to = Path(record_to) if record_to else None

    def respond(self, scene):
        if not self.base_url:
            raise LayoutError("no LLM endpoint configured (set CONCEPTSPLAT_LLM_URL)")
        req = layout_request(scene)
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        http_req = urllib.request.Request(self.base_url, data=json.dumps(req).encode("utf-8"),
                                          headers=headers, method="POST")
        try:
            with urllib.request.urlopen(http_req, timeout=self.timeout) as resp:
                text = resp.read().decode("utf-8")
        except (urllib.error.URLError, OSError) as exc:
            raise LayoutError(f"layout controller transport error: {exc}") from exc
        plan = parse_layout_response(text, "llm")
        if self.record_to is not None:
            self.record_to.mkdir(parents=True, exist_ok=True)
            (self.record_to / f"{request_key(req)}.json").write_text(text, encoding="utf-8")
        return plan


def make_controller(kind: str, **kwargs) -> LayoutController:
    if kind == "llm":
        return LLMController(**kwargs)
    if kind == "fixture":
        return FixtureController(**kwargs)
    if kind == "fallback":
        return FallbackController()
    raise ValueError(f"unknown layout controller {kind!r}")


def generate_layout(scene: SceneSpec, controller: LayoutController,
                    allow_fallback: bool = False) -> LayoutPlan:
    """Query the controller, validate, repair once by clamping, re-validate."""
    bounds = scene.global_bounds
    try:
        plan = controller.respond(scene)
    except LayoutError as exc:
        if not allow_fallback or isinstance(controller, FallbackController):
            raise
        log.warning("layout controller failed (%s); using the fallback layout", exc)
        plan = fallback_layout(scene)
    rep = validate_layout(plan, bounds, scene.k)
    if rep.valid:
        return plan
    repaired = _repair(plan, bounds)
    rep2 = validate_layout(repaired, bounds, scene.k)
    if not rep2.valid:
        raise LayoutError("layout invalid after repair: " + "; ".join(rep2.errors))
    log.warning("layout repaired by clamping: %s", "; ".join(rep.errors))
    return repaired


def plan_from_dict(d: dict) -> LayoutPlan:
    return LayoutPlan([Bbox3D(*b["bbox"], concept_id=b["concept_id"]) for b in d["boxes"]],
                      d.get("provenance", "fixture"))
