"""Scene files and prompt embeddings.

A scene file is YAML with an explicit ``version``::

    version: 1
    global_prompt: A <c0> ball next to a <c1> crate
    seed: 0
    bounds: {w: 1.0, d: 1.0, h: 1.0}
    concepts:
      - id: 0
        class_prompt: a ball
        concept_prompt: A <c0> ball next to a crate
        shape_prompt: a sphere
        adapter_seed: 0            # optional, defaults to id
        target_color: [0.85, 0.25, 0.2]  # optional, used by the target oracle
    stage2: {tau: 0.5, lambda: 1.0, delta_t: 200, iters: 500, resolution: 64}

``stage2`` also accepts ``T``, ``n_sub``, ``t_min``, ``t_max``, ``metric_every``
and an ``lr`` mapping.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, fields

import numpy as np
import yaml

from .guidance import GuidanceConfig

SCENE_VERSION = 1
MAX_CONCEPTS = 8
BOS, EOS = "<|bos|>", "<|eos|>"

DEFAULT_PALETTE = [
    (0.85, 0.25, 0.20), (0.20, 0.35, 0.85), (0.25, 0.75, 0.30), (0.90, 0.75, 0.20),
    (0.60, 0.30, 0.75), (0.20, 0.75, 0.80), (0.90, 0.50, 0.15), (0.55, 0.55, 0.55),
]


class SceneError(ValueError):
    """Scene file problem, with the offending line when known."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(field)
        super().__init__(f"{': '.join(where)}: {message}" if where else message)


@dataclass
class ConceptSpec:
    id: int
    class_prompt: str
    concept_prompt: str
    shape_prompt: str
    adapter_seed: int
    target_color: tuple[float, float, float] | None = None


@dataclass
class SceneSpec:
    global_prompt: str
    concepts: list[ConceptSpec]
    global_bounds: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    stage2: GuidanceConfig = field(default_factory=GuidanceConfig)

    @property
    def k(self) -> int:
        return len(self.concepts)

    def target_colors(self) -> list[tuple[float, float, float]]:
        return [c.target_color if c.target_color is not None
                else DEFAULT_PALETTE[c.id % len(DEFAULT_PALETTE)] for c in self.concepts]

    def content_hash(self) -> str:
        return hashlib.sha256(serialize_scene(self).encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------- parsing

def _to_python(node, path, lines):
    """Convert a composed YAML node tree to Python objects, recording line numbers by path."""
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for knode, vnode in node.value:
            key = knode.value
            if key in out:
                raise SceneError(f"duplicate key {key!r}", knode.start_mark.line + 1, ".".join(map(str, path)))
            out[key] = _to_python(vnode, path + (key,), lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_to_python(v, path + (i,), lines) for i, v in enumerate(node.value)]
    return yaml.SafeLoader("").construct_object(node)


def _fmt(path) -> str:
    s = ""
    for p in path:
        s += f"[{p}]" if isinstance(p, int) else (f".{p}" if s else p)
    return s


class _Reader:
    def __init__(self, lines):
        self.lines = lines

    def fail(self, msg, path):
        line = None
        for n in range(len(path), -1, -1):
            if path[:n] in self.lines:
                line = self.lines[path[:n]]
                break
        raise SceneError(msg, line, _fmt(path) or None)

    def get(self, d, key, path, kind, default=..., required=False):
        p = path + (key,)
        if key not in d:
            if required or default is ...:
                self.fail(f"missing required field {key!r}", path)
            return default
        v = d[key]
        if kind is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if kind is not None and (not isinstance(v, kind) or isinstance(v, bool) and kind is not bool):
            self.fail(f"expected {kind.__name__}, got {type(v).__name__}", p)
        return v


_STAGE2_KEYS = {"tau": ("tau", float), "lambda": ("lam", float), "delta_t": ("delta_t", int),
                "iters": ("iters", int), "resolution": ("resolution", int), "T": ("T", int),
                "n_sub": ("n_sub", int), "t_min": ("t_min", int), "t_max": ("t_max", int),
                "metric_every": ("metric_every", int), "lr": ("lr", dict)}


def parse_scene_spec(data: bytes | str) -> SceneSpec:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise SceneError(f"malformed YAML: {getattr(exc, 'problem', exc)}",
                         mark.line + 1 if mark else None) from None
    if node is None:
        raise SceneError("empty scene file")
    lines: dict = {}
    doc = _to_python(node, (), lines)
    if not isinstance(doc, dict):
        raise SceneError("scene file must be a mapping", 1)
    r = _Reader(lines)

    known = {"version", "global_prompt", "seed", "bounds", "concepts", "stage2"}
    for key in doc:
        if key not in known:
            r.fail(f"unknown field {key!r}", (key,))
    version = r.get(doc, "version", (), int, required=True)
    if version != SCENE_VERSION:
        r.fail(f"unsupported scene version {version}", ("version",))
    global_prompt = r.get(doc, "global_prompt", (), str, required=True)
    seed = r.get(doc, "seed", (), int, default=0)

    bounds = (1.0, 1.0, 1.0)
    if "bounds" in doc:
        b = r.get(doc, "bounds", (), dict)
        bounds = tuple(r.get(b, a, ("bounds",), float, default=1.0) for a in ("w", "d", "h"))
        for a, v in zip("wdh", bounds):
            if v <= 0:
                r.fail(f"bound must be > 0, got {v}", ("bounds", a))

    raw = r.get(doc, "concepts", (), list, required=True)
    if not 1 <= len(raw) <= MAX_CONCEPTS:
        r.fail(f"need between 1 and {MAX_CONCEPTS} concepts, got {len(raw)}", ("concepts",))
    concepts = []
    seen: dict[int, int] = {}
    for i, c in enumerate(raw):
        p = ("concepts", i)
        if not isinstance(c, dict):
            r.fail("concept entry must be a mapping", p)
        for key in c:
            if key not in {f.name for f in fields(ConceptSpec)}:
                r.fail(f"unknown field {key!r}", p + (key,))
        cid = r.get(c, "id", p, int, required=True)
        if cid in seen:
            r.fail(f"duplicate concept id {cid} (also used by concepts[{seen[cid]}])", p + ("id",))
        seen[cid] = i
        concept_prompt = r.get(c, "concept_prompt", p, str, required=True)
        if not concept_prompt.strip():
            r.fail("concept_prompt must be non-empty", p + ("concept_prompt",))
        class_prompt = r.get(c, "class_prompt", p, str, default=concept_prompt)
        color = None
        if "target_color" in c:
            tc = r.get(c, "target_color", p, list)
            if len(tc) != 3 or not all(isinstance(v, (int, float)) and 0 <= v <= 1 for v in tc):
                r.fail("target_color must be three numbers in [0, 1]", p + ("target_color",))
            color = tuple(float(v) for v in tc)
        concepts.append(ConceptSpec(
            id=cid,
            class_prompt=class_prompt,
            concept_prompt=concept_prompt,
            shape_prompt=r.get(c, "shape_prompt", p, str, default=class_prompt),
            adapter_seed=r.get(c, "adapter_seed", p, int, default=cid),
            target_color=color,
        ))
    if sorted(seen) != list(range(len(raw))):
        r.fail(f"concept ids must be contiguous 0..{len(raw) - 1}, got {sorted(seen)}", ("concepts",))
    concepts.sort(key=lambda c: c.id)

    kwargs = {}
    if "stage2" in doc:
        s2 = r.get(doc, "stage2", (), dict)
        for key in s2:
            if key not in _STAGE2_KEYS:
                r.fail(f"unknown field {key!r}", ("stage2", key))
        for key, (attr, kind) in _STAGE2_KEYS.items():
            if key in s2:
                kwargs[attr] = r.get(s2, key, ("stage2",), kind)
        if "lr" in kwargs:
            lr = GuidanceConfig().lr
            for name, v in kwargs["lr"].items():
                if name not in lr or not isinstance(v, (int, float)):
                    r.fail(f"bad learning rate entry {name!r}", ("stage2", "lr", name))
                lr[name] = float(v)
            kwargs["lr"] = lr
    try:
        stage2 = GuidanceConfig(**kwargs)
    except ValueError as exc:
        r.fail(str(exc), ("stage2",))
    return SceneSpec(global_prompt, concepts, bounds, seed, stage2)


def serialize_scene(spec: SceneSpec) -> str:
    """YAML text that parses back to an equal SceneSpec."""
    s2 = spec.stage2
    stage2 = {"tau": s2.tau, "lambda": s2.lam, "delta_t": s2.delta_t, "iters": s2.iters,
              "resolution": s2.resolution, "T": s2.T, "n_sub": s2.n_sub, "t_min": s2.t_min,
              "t_max": s2.t_max, "metric_every": s2.metric_every, "lr": dict(s2.lr)}
    concepts = []
    for c in spec.concepts:
        d = {"id": c.id, "class_prompt": c.class_prompt, "concept_prompt": c.concept_prompt,
             "shape_prompt": c.shape_prompt, "adapter_seed": c.adapter_seed}
        if c.target_color is not None:
            d["target_color"] = [float(v) for v in c.target_color]
        concepts.append(d)
    doc = {
        "version": SCENE_VERSION,
        "global_prompt": spec.global_prompt,
        "seed": spec.seed,
        "bounds": dict(zip("wdh", (float(v) for v in spec.global_bounds))),
        "concepts": concepts,
        "stage2": stage2,
    }
    return yaml.safe_dump(doc, sort_keys=False, allow_unicode=True, width=1000)


def load_scene(path) -> SceneSpec:
    with open(path, "rb") as fh:
        return parse_scene_spec(fh.read())


# --------------------------------------------------------------------------- text embedding

_TOKEN_RE = re.compile(r"<[^<>\s]+>|[a-z0-9]+")


class HashTextEmbedder:
    """Deterministic token embedder: each token string seeds its own vector.

    Sequences are ``[BOS] tokens [EOS]`` padded with EOS to ``max_length``; a
    seeded positional vector is added per slot.
    """

    def __init__(self, d_text: int = 32, max_length: int = 16, seed: int = 0):
        self.d_text = d_text
        self.max_length = max_length
        self.seed = seed
        rng = np.random.default_rng([seed, 7919])
        self._pos = rng.normal(0.0, 0.5 / np.sqrt(d_text), (max_length, d_text))
        self._cache: dict[str, np.ndarray] = {}

    def tokenize(self, text: str) -> list[str]:
        words = _TOKEN_RE.findall(text.lower())[: self.max_length - 2]
        toks = [BOS] + words + [EOS]
        return toks + [EOS] * (self.max_length - len(toks))

    def token_vector(self, token: str) -> np.ndarray:
        v = self._cache.get(token)
        if v is None:
            digest = hashlib.sha256(f"{self.seed}:{token}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            v = rng.normal(0.0, 1.0 / np.sqrt(self.d_text), self.d_text)
            self._cache[token] = v
        return v

    def embed_tokens(self, tokens: list[str]) -> np.ndarray:
        if len(tokens) != self.max_length:
            raise ValueError(f"expected {self.max_length} tokens, got {len(tokens)}")
        return np.stack([self.token_vector(t) for t in tokens]) + self._pos

    def embed(self, text: str) -> np.ndarray:
        return self.embed_tokens(self.tokenize(text))


def null_prompt_embedding(embedder: HashTextEmbedder) -> np.ndarray:
    """Embedding of BOS followed by EOS up to the maximum token length."""
    return embedder.embed_tokens([BOS] + [EOS] * (embedder.max_length - 1))
