"""Regional concept attention.

Cross-attention evaluated once per concept region: queries are masked image
features, keys/values come from the concept's own prompt and low-rank
adapter, and the per-concept outputs are recombined with the same masks.

Matrices follow the row convention: features ``F`` are (rows, d), prompt
embeddings are (L, d_text), and ``K = p @ (W_k + scale * psi_k)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

ADAPTER_MAGIC = b"CLRA"
ADAPTER_VERSION = 1


@dataclass
class ConceptLoRA:
    """Low-rank key/value deltas: psi_k = A_k @ B_k, psi_v = A_v @ B_v."""

    A_k: np.ndarray  # (d_text, r)
    B_k: np.ndarray  # (r, d)
    A_v: np.ndarray
    B_v: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int]:
        d_text, r = self.A_k.shape
        return d_text, self.B_k.shape[1], r

    @property
    def psi_k(self) -> np.ndarray:
        return self.A_k @ self.B_k

    @property
    def psi_v(self) -> np.ndarray:
        return self.A_v @ self.B_v

    @classmethod
    def init(cls, d_text: int, d: int, r: int, seed: int, std: float = 0.02) -> "ConceptLoRA":
        """Fresh adapter: Gaussian A factors, zero B factors (a no-op until trained)."""
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0, std, (d_text, r)), np.zeros((r, d)),
                   rng.normal(0, std, (d_text, r)), np.zeros((r, d)))

    @classmethod
    def synthetic(cls, d_text: int, d: int, r: int, seed: int, std: float = 0.5) -> "ConceptLoRA":
        """Adapter with both factors random; stands in for a trained concept adapter."""
        rng = np.random.default_rng(seed)
        s = std / np.sqrt(r)
        return cls(rng.normal(0, s, (d_text, r)), rng.normal(0, 1.0 / np.sqrt(d), (r, d)),
                   rng.normal(0, s, (d_text, r)), rng.normal(0, 1.0 / np.sqrt(d), (r, d)))

    def to_bytes(self) -> bytes:
        """Magic, version, (d_text, d, r) as little-endian uint32, then A_k, B_k, A_v, B_v as f8."""
        d_text, d, r = self.shape
        head = ADAPTER_MAGIC + struct.pack("<4I", ADAPTER_VERSION, d_text, d, r)
        body = b"".join(np.ascontiguousarray(m, dtype="<f8").tobytes()
                        for m in (self.A_k, self.B_k, self.A_v, self.B_v))
        return head + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "ConceptLoRA":
        if data[:4] != ADAPTER_MAGIC or len(data) < 20:
            raise ValueError("not a concept adapter file")
        version, d_text, d, r = struct.unpack("<4I", data[4:20])
        if version != ADAPTER_VERSION:
            raise ValueError(f"unsupported adapter version {version}")
        sizes = [d_text * r, r * d, d_text * r, r * d]
        if len(data) != 20 + 8 * sum(sizes):
            raise ValueError("adapter payload size does not match its header")
        flat = np.frombuffer(data[20:], dtype="<f8")
        parts, o = [], 0
        for n in sizes:
            parts.append(flat[o:o + n].copy())
            o += n
        return cls(parts[0].reshape(d_text, r), parts[1].reshape(r, d),
                   parts[2].reshape(d_text, r), parts[3].reshape(r, d))


@dataclass
class AttentionWeights:
    W_q: np.ndarray  # (d, d)
    W_k: np.ndarray  # (d_text, d)
    W_v: np.ndarray  # (d_text, d)

    @property
    def d(self) -> int:
        return self.W_q.shape[1]

    @classmethod
    def seeded(cls, d: int, d_text: int, seed: int) -> "AttentionWeights":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0, 1 / np.sqrt(d), (d, d)),
                   rng.normal(0, 1 / np.sqrt(d_text), (d_text, d)),
                   rng.normal(0, 1 / np.sqrt(d_text), (d_text, d)))


@dataclass
class ConceptSet:
    prompts: list[np.ndarray]      # per concept, (L, d_text)
    background: np.ndarray         # p_bg, (L, d_text)
    adapters: list[ConceptLoRA]
    lora_scale: float = 1.0
    null: np.ndarray | None = None  # null-prompt embedding, used by as_null()

    def __post_init__(self):
        if len(self.prompts) != len(self.adapters):
            raise ValueError("one adapter per concept prompt is required")

    @property
    def k(self) -> int:
        return len(self.prompts)

    def as_null(self) -> "ConceptSet":
        """Every prompt (concepts and background) replaced by the null embedding; adapters kept."""
        if self.null is None:
            raise ValueError("concept set has no null embedding")
        return replace(self, prompts=[self.null] * self.k, background=self.null)

    def with_prompt(self, i: int, prompt: np.ndarray) -> "ConceptSet":
        prompts = list(self.prompts)
        prompts[i] = prompt
        return replace(self, prompts=prompts)

    def with_adapter(self, i: int, adapter: ConceptLoRA) -> "ConceptSet":
        adapters = list(self.adapters)
        adapters[i] = adapter
        return replace(self, adapters=adapters)


def downsample_masks(masks: np.ndarray, target: tuple[int, int]):
    """Block max-pool binary masks to ``target``; returns (concept masks, background)."""
    masks = np.asarray(masks, dtype=bool)
    k, h, w = masks.shape
    ha, wa = target
    if ha > h or wa > w or h % ha or w % wa:
        raise ValueError(f"cannot pool {h}x{w} masks to {ha}x{wa}: ratios must be integers")
    pooled = masks.reshape(k, ha, h // ha, wa, w // wa).any(axis=(2, 4))
    return pooled, ~pooled.any(axis=0)


def concept_queries(F: np.ndarray, masks: np.ndarray, bg_mask: np.ndarray, W_q: np.ndarray):
    """Q_i = (M_i * F) @ W_q per concept, plus Q_bg. Masks are flattened to feature rows."""
    F = np.asarray(F)
    rows = F.shape[0]
    m = np.asarray(masks, dtype=np.float64)
    m = m.reshape(len(m), -1) if len(m) else np.zeros((0, rows))
    b = np.asarray(bg_mask, dtype=np.float64).reshape(-1)
    if m.shape[1] != rows or b.shape[0] != rows:
        raise ValueError(f"masks cover {b.shape[0]} rows but F has {rows}")
    if W_q.shape[0] != F.shape[1]:
        raise ValueError("W_q does not match the feature dimension")
    return [(mi[:, None] * F) @ W_q for mi in m], (b[:, None] * F) @ W_q


def concept_keys_values(p: np.ndarray, lora: ConceptLoRA | None, weights: AttentionWeights,
                        scale: float = 1.0):
    """(K, V) for one concept; ``lora=None`` gives the adapter-free background variant."""
    p = np.asarray(p)
    if p.ndim != 2 or p.shape[1] != weights.W_k.shape[0]:
        raise ValueError(f"prompt embedding must be (L, {weights.W_k.shape[0]}), got {p.shape}")
    if lora is None:
        return p @ weights.W_k, p @ weights.W_v
    if lora.shape[:2] != weights.W_k.shape:
        raise ValueError("adapter shape does not match the key/value projections")
    return p @ (weights.W_k + scale * lora.psi_k), p @ (weights.W_v + scale * lora.psi_v)


def attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray) -> np.ndarray:
    """softmax(Q K^T / sqrt(d)) V with a row-wise softmax."""
    logits = Q @ K.T / np.sqrt(Q.shape[1])
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    return p @ V


def cross_attention(F: np.ndarray, p: np.ndarray, weights: AttentionWeights) -> np.ndarray:
    """Plain single-prompt cross-attention, no masks and no adapters."""
    K, V = concept_keys_values(p, None, weights)
    return attention(F @ weights.W_q, K, V)


def rca_forward(F: np.ndarray, masks: np.ndarray, concept_set: ConceptSet,
                weights: AttentionWeights, bg_mask: np.ndarray | None = None) -> np.ndarray:
    """Aggregate M_bg * A_bg + sum_i M_i * A_i over feature rows.

    ``masks`` is (k, h_a, w_a) at feature resolution; the background mask
    defaults to the complement of their union.
    """
    masks = np.asarray(masks, dtype=bool)
    if masks.shape[0] != concept_set.k:
        raise ValueError(f"got {masks.shape[0]} masks for {concept_set.k} concepts")
    if bg_mask is None:
        bg_mask = ~masks.any(axis=0)
    Qs, Q_bg = concept_queries(F, masks, bg_mask, weights.W_q)
    K_bg, V_bg = concept_keys_values(concept_set.background, None, weights)
    out = np.asarray(bg_mask, dtype=np.float64).reshape(-1, 1) * attention(Q_bg, K_bg, V_bg)
    for i, (Q, p, lora) in enumerate(zip(Qs, concept_set.prompts, concept_set.adapters)):
        K, V = concept_keys_values(p, lora, weights, concept_set.lora_scale)
        out = out + masks[i].astype(np.float64).reshape(-1, 1) * attention(Q, K, V)
    return out
