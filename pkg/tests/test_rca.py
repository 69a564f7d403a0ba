import numpy as np
import pytest

from conceptsplat.rca import (AttentionWeights, ConceptLoRA, ConceptSet, attention,
                              concept_keys_values, concept_queries, cross_attention,
                              downsample_masks, rca_forward)

D, DT, L, R = 32, 32, 16, 4


@pytest.fixture
def weights():
    return AttentionWeights.seeded(D, DT, seed=3)


def _set(rng, k, scale=1.0):
    return ConceptSet([rng.normal(size=(L, DT)) for _ in range(k)], rng.normal(size=(L, DT)),
                      [ConceptLoRA.synthetic(DT, D, R, seed=i) for i in range(k)], scale,
                      null=rng.normal(size=(L, DT)))


def _dense_attention(Q, K, V):
    out = np.zeros((Q.shape[0], V.shape[1]))
    for i in range(Q.shape[0]):
        s = np.array([Q[i] @ K[j] for j in range(K.shape[0])]) / np.sqrt(Q.shape[1])
        p = np.exp(s - s.max())
        p /= p.sum()
        out[i] = sum(p[j] * V[j] for j in range(K.shape[0]))
    return out


# --------------------------------------------------------------------------- masks

def test_downsample_all_ones():
    pooled, bg = downsample_masks(np.ones((2, 64, 64), bool), (16, 16))
    assert pooled.all() and not bg.any()


def test_downsample_single_pixel_sets_block():
    m = np.zeros((1, 4, 4), bool)
    m[0, 1, 0] = True
    pooled, bg = downsample_masks(m, (2, 2))
    assert pooled[0].tolist() == [[True, False], [False, False]]
    assert bg.tolist() == [[False, True], [True, True]]


def test_downsample_union_superset(rng):
    for _ in range(20):
        m = rng.random((3, 16, 16)) < 0.1
        pooled, _ = downsample_masks(m, (4, 4))
        union_pooled, _ = downsample_masks(m.any(axis=0)[None], (4, 4))
        assert np.all(pooled.any(axis=0) >= union_pooled[0])


def test_downsample_bad_ratio():
    with pytest.raises(ValueError):
        downsample_masks(np.ones((1, 10, 10), bool), (4, 4))
    with pytest.raises(ValueError):
        downsample_masks(np.ones((1, 8, 8), bool), (16, 16))


# --------------------------------------------------------------------------- queries, keys, values

def test_queries_masks(rng, weights):
    F = rng.normal(size=(16, D))
    ones, zeros = np.ones((1, 4, 4), bool), np.zeros((4, 4), bool)
    (Q,), Qbg = concept_queries(F, ones, zeros, weights.W_q)
    assert np.allclose(Q, F @ weights.W_q) and np.all(Qbg == 0)
    m = rng.random((1, 4, 4)) < 0.5
    (Q,), Qbg = concept_queries(F, m, ~m[0], weights.W_q)
    assert np.allclose(Q + Qbg, F @ weights.W_q)


def test_queries_dimension_mismatch(rng, weights):
    with pytest.raises(ValueError):
        concept_queries(rng.normal(size=(15, D)), np.ones((1, 4, 4), bool), np.zeros((4, 4), bool), weights.W_q)


def test_keys_lambda_zero(rng, weights):
    p = rng.normal(size=(L, DT))
    lora = ConceptLoRA.synthetic(DT, D, R, seed=1)
    K, V = concept_keys_values(p, lora, weights, scale=0.0)
    assert np.array_equal(K, p @ weights.W_k) and np.array_equal(V, p @ weights.W_v)


def test_keys_zero_adapter(rng, weights):
    p = rng.normal(size=(L, DT))
    lora = ConceptLoRA.init(DT, D, R, seed=1)  # B = 0
    K, V = concept_keys_values(p, lora, weights, scale=3.0)
    assert np.allclose(K, p @ weights.W_k) and np.allclose(V, p @ weights.W_v)


def test_keys_rank_one_expansion(rng, weights):
    p = rng.normal(size=(L, DT))
    a_k, b_k, a_v, b_v = rng.normal(size=DT), rng.normal(size=D), rng.normal(size=DT), rng.normal(size=D)
    lora = ConceptLoRA(a_k[:, None], b_k[None], a_v[:, None], b_v[None])
    K, V = concept_keys_values(p, lora, weights, scale=1.0)
    K_ref = np.array([[sum(p[i, m] * (weights.W_k[m, j] + a_k[m] * b_k[j]) for m in range(DT))
                       for j in range(D)] for i in range(L)])
    assert np.allclose(K, K_ref)
    assert np.allclose(V, p @ (weights.W_v + np.outer(a_v, b_v)))


def test_keys_dimension_mismatch(rng, weights):
    with pytest.raises(ValueError):
        concept_keys_values(rng.normal(size=(L, DT + 1)), None, weights)


# --------------------------------------------------------------------------- attention

def test_attention_single_token(rng):
    Q, K, V = rng.normal(size=(5, 8)), rng.normal(size=(1, 8)), rng.normal(size=(1, 3))
    assert np.allclose(attention(Q, K, V), np.repeat(V, 5, axis=0))


def test_attention_zero_query(rng):
    K, V = rng.normal(size=(6, 8)), rng.normal(size=(6, 3))
    assert np.allclose(attention(np.zeros((4, 8)), K, V), V.mean(axis=0))


def test_attention_dense_oracle(rng):
    Q, K, V = rng.normal(size=(4, 8)), rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
    assert np.abs(attention(Q, K, V) - _dense_attention(Q, K, V)).max() < 1e-6


def test_attention_rows_stochastic(rng):
    Q, K = rng.normal(size=(7, 8)) * 10, rng.normal(size=(5, 8))
    # with V = I the output rows are the softmax rows
    P = attention(Q, K, np.eye(5))
    assert np.allclose(P.sum(axis=1), 1, atol=1e-6) and np.all(P >= 0)


# --------------------------------------------------------------------------- aggregation

def test_reduction_to_vanilla(rng, weights):
    F = rng.normal(size=(256, D))
    cs = _set(rng, 1, scale=0.0)
    cs = cs.with_prompt(0, cs.background)
    out = rca_forward(F, np.ones((1, 16, 16), bool), cs, weights)
    assert np.abs(out - cross_attention(F, cs.background, weights)).max() < 1e-6


def test_all_background(rng, weights):
    F = rng.normal(size=(256, D))
    cs = _set(rng, 2)
    out = rca_forward(F, np.zeros((2, 16, 16), bool), cs, weights)
    assert np.allclose(out, cross_attention(F, cs.background, weights))


def test_regional_locality_bitwise(rng, weights):
    F = rng.normal(size=(256, D))
    cs = _set(rng, 2)
    m = np.zeros((2, 16, 16), bool)
    m[0, :, :7] = True
    m[1, :, 9:] = True
    base = rca_forward(F, m, cs, weights)
    other = cs.with_prompt(1, rng.normal(size=(L, DT))).with_adapter(1, ConceptLoRA.synthetic(DT, D, R, 99))
    pert = rca_forward(F, m, other, weights)
    rows0 = m[0].reshape(-1)
    assert np.array_equal(base[rows0], pert[rows0])
    assert not np.array_equal(base[m[1].reshape(-1)], pert[m[1].reshape(-1)])


def test_mask_count_mismatch(rng, weights):
    with pytest.raises(ValueError):
        rca_forward(rng.normal(size=(256, D)), np.zeros((1, 16, 16), bool), _set(rng, 2), weights)


def test_adapter_bytes_round_trip():
    lora = ConceptLoRA.synthetic(DT, D, R, seed=5)
    blob = lora.to_bytes()
    assert blob[:4] == b"CLRA" and len(blob) == 20 + 8 * 4 * R * (DT + D) // 2 * 1
    back = ConceptLoRA.from_bytes(blob)
    for a, b in zip((lora.A_k, lora.B_k, lora.A_v, lora.B_v), (back.A_k, back.B_k, back.A_v, back.B_v)):
        assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        ConceptLoRA.from_bytes(blob[:-8])
    with pytest.raises(ValueError):
        ConceptLoRA.from_bytes(b"XXXX" + blob[4:])


def test_low_rank():
    lora = ConceptLoRA.synthetic(DT, D, R, seed=2)
    assert np.linalg.matrix_rank(lora.psi_k) <= R and np.linalg.matrix_rank(lora.psi_v) <= R
