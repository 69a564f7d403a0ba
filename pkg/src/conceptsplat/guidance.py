"""Noise schedules, toy noise predictors, DDIM inversion and interval score matching.

Latents are images: arrays of shape (H, W, 3). Every predictor conditions on
the output of one regional cross-attention layer evaluated on a fixed
spatial feature grid, so prompts and adapters reach the prediction only
through that layer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rca import AttentionWeights, ConceptSet, downsample_masks, rca_forward


@dataclass
class GuidanceConfig:
    T: int = 1000
    delta_t: int = 200
    n_sub: int = 10
    t_min: int = 20
    t_max: int = 500
    iters: int = 500
    resolution: int = 64
    tau: float = 0.5
    lam: float = 1.0
    lr: dict = field(default_factory=lambda: {
        "mu": 2e-4, "log_scale": 5e-3, "rotation": 1e-3, "opacity_logit": 5e-2, "sh": 1e-2})
    momentum: float = 0.9
    prune_every: int = 100
    prune_opacity: float = 0.005
    metric_every: int = 10
    weight: str = "constant"

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if not 0 < self.delta_t < self.T:
            raise ValueError(f"delta_t must lie in (0, T), got {self.delta_t}")
        if self.n_sub < 1 or self.delta_t % self.n_sub:
            raise ValueError("n_sub must divide delta_t")
        if not 1 <= self.t_min <= self.t_max <= self.T:
            raise ValueError("need 1 <= t_min <= t_max <= T")
        if self.t_max - self.delta_t < 1:
            raise ValueError("t_max - delta_t must be >= 1")
        if not 0.0 <= self.tau < 1.0:
            raise ValueError("tau must lie in [0, 1)")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")

    def t_range(self) -> tuple[int, int]:
        """Timesteps actually sampled: the lower end is raised so that t - delta_t >= 1."""
        return max(self.t_min, self.delta_t + 1), self.t_max


# --------------------------------------------------------------------------- schedule

@dataclass
class NoiseSchedule:
    """``alpha_bar[t]`` for t = 0..T with ``alpha_bar[0] = 1`` (the clean level)."""

    T: int
    alpha_bar: np.ndarray
    weight_fn: object = "constant"

    def __post_init__(self):
        ab = self.alpha_bar[1:]
        if len(self.alpha_bar) != self.T + 1 or not np.all(np.diff(ab) < 0) or ab[-1] <= 0:
            raise ValueError("alpha_bar must be strictly decreasing and positive on 1..T")

    def weight(self, t: int) -> float:
        """w(t): ``"constant"``, ``"snr_inverse"`` or any callable of t."""
        if callable(self.weight_fn):
            return float(self.weight_fn(t))
        if self.weight_fn == "constant":
            return 1.0
        if self.weight_fn == "snr_inverse":
            return float(np.sqrt(1.0 - self.alpha_bar[t]) / np.sqrt(self.alpha_bar[t]))
        raise ValueError(f"unknown weight function {self.weight_fn!r}")

    def check(self, t: int) -> None:
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")


def make_schedule(T: int, kind: str = "linear", weight_fn: str = "constant") -> NoiseSchedule:
    """Linear betas from 1e-4 to 0.02 over T steps."""
    if T < 2:
        raise ValueError("T must be >= 2")
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    betas = np.linspace(1e-4, 0.02, T)
    return NoiseSchedule(T, np.concatenate([[1.0], np.cumprod(1.0 - betas)]), weight_fn)


# --------------------------------------------------------------------------- conditioning

@dataclass
class Conditioning:
    """What the predictor attends to: a concept set, pixel masks, and whether prompts are null."""

    concept_set: ConceptSet
    masks: np.ndarray  # (k, H, W) bool at image resolution
    is_null: bool = False

    @classmethod
    def regional(cls, concept_set: ConceptSet, masks, null: bool = False) -> "Conditioning":
        masks = np.asarray(masks, dtype=bool)
        if masks.ndim != 3 or masks.shape[0] != concept_set.k:
            raise ValueError(f"expected {concept_set.k} concept masks, got shape {masks.shape}")
        return cls(concept_set.as_null() if null else concept_set, masks, null)

    @classmethod
    def vanilla(cls, prompt: np.ndarray, image_hw: tuple[int, int], null: bool = False) -> "Conditioning":
        """Single-prompt conditioning: no concepts, the whole image is background."""
        cs = ConceptSet(prompts=[], background=np.asarray(prompt), adapters=[], lora_scale=0.0)
        return cls(cs, np.zeros((0,) + tuple(image_hw), dtype=bool), null)


class ToyBackbone:
    """One cross-attention layer on a fixed (h_a x w_a x d) feature grid.

    Features are a seeded spatial embedding, so each feature row only ever sees
    its own image patch: the backbone is patch-local by construction.
    """

    def __init__(self, image_hw=(64, 64), feat_hw=(16, 16), d=32, d_text=32, seed=0):
        self.image_hw = tuple(image_hw)
        self.feat_hw = tuple(feat_hw)
        H, W = self.image_hw
        ha, wa = self.feat_hw
        if H % ha or W % wa:
            raise ValueError("image size must be an integer multiple of the feature grid")
        self.patch = (H // ha, W // wa)
        rng = np.random.default_rng(seed)
        self.features = rng.normal(0.0, 1.0, (ha * wa, d))
        self.weights = AttentionWeights.seeded(d, d_text, seed + 1)
        self.W_out = rng.normal(0.0, 1.0 / np.sqrt(d), (d, self.patch[0] * self.patch[1] * 3))

    def attend(self, cond: Conditioning) -> np.ndarray:
        pooled, bg = downsample_masks(cond.masks, self.feat_hw) if len(cond.masks) else (
            np.zeros((0,) + self.feat_hw, dtype=bool), np.ones(self.feat_hw, dtype=bool))
        return rca_forward(self.features, pooled, cond.concept_set, self.weights, bg_mask=bg)

    def row_count(self, cond: Conditioning) -> np.ndarray:
        """Active masks (concepts + background) per feature row."""
        if not len(cond.masks):
            return np.ones(self.feat_hw[0] * self.feat_hw[1])
        pooled, bg = downsample_masks(cond.masks, self.feat_hw)
        return (pooled.sum(axis=0) + bg).reshape(-1).astype(np.float64)

    def upsample_rows(self, rows: np.ndarray) -> np.ndarray:
        """(h_a*w_a, c) per-row values -> (H, W, c) by patch replication."""
        ha, wa = self.feat_hw
        ph, pw = self.patch
        r = rows.reshape(ha, wa, -1)
        return np.repeat(np.repeat(r, ph, axis=0), pw, axis=1)

    def decode(self, A_hat: np.ndarray) -> np.ndarray:
        ha, wa = self.feat_hw
        ph, pw = self.patch
        patches = (A_hat @ self.W_out).reshape(ha, wa, ph, pw, 3)
        return patches.transpose(0, 2, 1, 3, 4).reshape(ha * ph, wa * pw, 3)


# --------------------------------------------------------------------------- predictors

class NoisePredictor:
    kind = "base"

    def __init__(self, backbone: ToyBackbone, schedule: NoiseSchedule):
        self.backbone = backbone
        self.schedule = schedule

    def __call__(self, x_t: np.ndarray, t: int, cond: Conditioning) -> np.ndarray:
        return predict_noise(self, x_t, t, cond)

    def _predict(self, x_t, t, cond, A_hat):
        raise NotImplementedError


class AffinePredictor(NoisePredictor):
    """eps = x_t @ A^T + b * decode(A_hat); A mixes the three channels per pixel."""

    kind = "affine"

    def __init__(self, backbone, schedule, A=None, b: float = 0.1):
        super().__init__(backbone, schedule)
        self.A = 0.01 * np.eye(3) if A is None else np.asarray(A, dtype=np.float64)
        self.b = float(b)

    def _predict(self, x_t, t, cond, A_hat):
        return x_t @ self.A.T + self.b * self.backbone.decode(A_hat)


class LearnedStubPredictor(NoisePredictor):
    """Placeholder for a trained denoiser: eps = decode(A_hat)."""

    kind = "learned-stub"

    def _predict(self, x_t, t, cond, A_hat):
        return self.backbone.decode(A_hat)


class TargetOraclePredictor(NoisePredictor):
    """Noise that makes the implied clean image equal a known per-concept target.

    For prompted conditioning, each feature row of the attention output is
    expressed in the basis of per-region reference outputs (each concept's
    prompt with its adapter, plus the background prompt); the coefficients
    pick the matching target images, averaged over the masks active in that
    row. Null conditioning predicts zero noise, so DDIM inversion under the
    null prompt reproduces its input.
    """

    kind = "target_oracle"

    def __init__(self, backbone, schedule, concept_set: ConceptSet, targets, background_target):
        super().__init__(backbone, schedule)
        H, W = backbone.image_hw
        k = concept_set.k
        if len(targets) != k:
            raise ValueError(f"need {k} concept targets, got {len(targets)}")
        imgs = [np.broadcast_to(np.asarray(t, dtype=np.float64), (H, W, 3)) for t in targets]
        imgs.append(np.broadcast_to(np.asarray(background_target, dtype=np.float64), (H, W, 3)))
        self.targets = np.stack(imgs)  # (k+1, H, W, 3), background last
        n_rows = backbone.feat_hw[0] * backbone.feat_hw[1]
        refs = []
        for i in range(k):
            masks = np.zeros((k,) + backbone.feat_hw, dtype=bool)
            masks[i] = True
            refs.append(rca_forward(backbone.features, masks, concept_set, backbone.weights))
        masks = np.zeros((k,) + backbone.feat_hw, dtype=bool)
        refs.append(rca_forward(backbone.features, masks, concept_set, backbone.weights))
        S = np.stack(refs, axis=1)  # (rows, k+1, d)
        self.readout = np.linalg.pinv(S)  # (rows, d, k+1)
        assert self.readout.shape[0] == n_rows

    def target_composite(self, cond: Conditioning, A_hat: np.ndarray | None = None) -> np.ndarray:
        if A_hat is None:
            A_hat = self.backbone.attend(cond)
        coef = np.einsum("rd,rdc->rc", A_hat, self.readout) / self.backbone.row_count(cond)[:, None]
        return np.einsum("hwc,chwj->hwj", self.backbone.upsample_rows(coef), self.targets)

    def _predict(self, x_t, t, cond, A_hat):
        if cond.is_null:
            return np.zeros_like(x_t)
        ab = self.schedule.alpha_bar[t]
        x_star = self.target_composite(cond, A_hat)
        return (x_t - np.sqrt(ab) * x_star) / np.sqrt(1.0 - ab)


def predict_noise(predictor: NoisePredictor, x_t: np.ndarray, t: int, cond: Conditioning) -> np.ndarray:
    if not 1 <= t <= predictor.schedule.T:
        raise ValueError(f"timestep {t} outside [1, {predictor.schedule.T}]")
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != predictor.backbone.image_hw + (3,):
        raise ValueError(f"latent shape {x_t.shape} does not match {predictor.backbone.image_hw + (3,)}")
    A_hat = predictor.backbone.attend(cond)
    return predictor._predict(x_t, t, cond, A_hat)


# --------------------------------------------------------------------------- DDIM

def ddim_invert_step(x_s, s: int, t: int, predictor: NoisePredictor, cond: Conditioning):
    """One deterministic inversion step x_s -> x_t (s <= t), noise predicted at x_s.

    The clean level s = 0 has alpha_bar = 1; the predictor is then queried at timestep 1.
    """
    sch = predictor.schedule
    sch.check(s)
    sch.check(t)
    if s > t:
        raise ValueError(f"inversion needs s <= t, got s={s}, t={t}")
    eps = predict_noise(predictor, x_s, max(s, 1), cond)
    ab_s, ab_t = sch.alpha_bar[s], sch.alpha_bar[t]
    x0 = (x_s - np.sqrt(1.0 - ab_s) * eps) / np.sqrt(ab_s)
    return np.sqrt(ab_t) * x0 + np.sqrt(1.0 - ab_t) * eps


@dataclass
class InversionTrajectory:
    x_s: np.ndarray
    x_t: np.ndarray
    s: int
    t: int
    timesteps: list[int]


def inversion_timesteps(t: int, delta_t: int, n_sub: int) -> tuple[list[int], int]:
    """Chain 0 -> s with stride delta_t / n_sub (first step may be shorter), then s -> t."""
    if delta_t < 0 or t - delta_t < 0:
        raise ValueError(f"invalid interval: t={t}, delta_t={delta_t}")
    s = t - delta_t
    if delta_t == 0:
        stride = 1
    else:
        if n_sub < 1 or delta_t % n_sub:
            raise ValueError(f"stride: n_sub={n_sub} must divide delta_t={delta_t}")
        stride = delta_t // n_sub
    lower = sorted(set(range(s, 0, -stride)) | {0})
    upper = list(range(s + stride, t + 1, stride)) if delta_t else []
    return lower + upper, s


def ddim_invert(x0, t: int, delta_t: int, predictor: NoisePredictor, cond: Conditioning,
                n_sub: int = 10) -> InversionTrajectory:
    if t - delta_t < 1 and delta_t > 0:
        raise ValueError(f"t - delta_t must be >= 1, got t={t}, delta_t={delta_t}")
    steps, s = inversion_timesteps(t, delta_t, n_sub)
    predictor.schedule.check(t)
    x = np.asarray(x0, dtype=np.float64)
    x_s = x if s == 0 else None
    for a, b in zip(steps[:-1], steps[1:]):
        x = ddim_invert_step(x, a, b, predictor, cond)
        if b == s:
            x_s = x
    return InversionTrajectory(x_s=x_s, x_t=x, s=s, t=t, timesteps=steps)


# --------------------------------------------------------------------------- interval scores

def _interval_score(x, t, delta_t, predictor, cond, null_cond, n_sub):
    traj = ddim_invert(x, t, delta_t, predictor, null_cond, n_sub)
    eps_t = predict_noise(predictor, traj.x_t, t, cond)
    eps_s = predict_noise(predictor, traj.x_s, max(traj.s, 1), null_cond)
    return predictor.schedule.weight(t) * (eps_t - eps_s)


def ism_gradient(x, t: int, delta_t: int, predictor: NoisePredictor, prompt: np.ndarray,
                 null_prompt: np.ndarray, n_sub: int = 10, inversion_prompt=None) -> np.ndarray:
    """Pixel-space interval score: w(t) (eps(x_t; y, t) - eps(x_s; null, s)).

    ``inversion_prompt`` overrides the null prompt for both inversion and the
    second term (used to check the degenerate identical-conditioning case).
    """
    hw = predictor.backbone.image_hw
    cond = Conditioning.vanilla(prompt, hw)
    null = inversion_prompt if inversion_prompt is not None else null_prompt
    null_cond = Conditioning.vanilla(null, hw, null=inversion_prompt is None)
    return _interval_score(x, t, delta_t, predictor, cond, null_cond, n_sub)


def cism_gradient(x, masks, concept_set: ConceptSet, t: int, delta_t: int,
                  predictor: NoisePredictor, n_sub: int = 10) -> np.ndarray:
    """Concept-aware interval score with regional attention on both terms.

    Inversion and the second term use null prompts with the concept adapters
    still active; the first term uses the concept and background prompts.
    """
    masks = np.asarray(masks, dtype=bool)
    if masks.shape[0] != concept_set.k:
        raise ValueError(f"got {masks.shape[0]} masks for {concept_set.k} concepts")
    cond = Conditioning.regional(concept_set, masks)
    null_cond = Conditioning.regional(concept_set, masks, null=True)
    return _interval_score(x, t, delta_t, predictor, cond, null_cond, n_sub)
