import numpy as np
import pytest

from spatialmome.dataspace import FormatError
from spatialmome.encoders import (HE, ST, EmbeddingStore, SpotEmbedding, embed_one, encode_he, encode_st,
                                  load_embedding_store, make_backend, write_embedding_store)
from spatialmome.numerics import Tape, ag, forward_backward


def test_zero_linear_gives_zero_vector():
    b = make_backend("toy-linear", 10, 64, init="zeros")
    out = encode_st(np.random.default_rng(0).random(10), b)
    assert out.shape == (1, 64) and not out.data.any()


def test_identity_passthrough_and_injective():
    b = make_backend("toy-linear", 6, 6, init="identity")
    x = np.arange(6.0)
    np.testing.assert_array_equal(encode_he(x, b).data[0], x)
    assert not np.array_equal(encode_he(x + 1e-3, b).data, encode_he(x, b).data)


def test_default_dims_through_model_config():
    from spatialmome.core import ModelConfig
    cfg = ModelConfig(n_genes=20)
    he = make_backend(cfg.he_encoder, cfg.feature_dim, cfg.he_dim)
    st = make_backend(cfg.st_encoder, cfg.n_genes, cfg.st_dim)
    assert encode_he(np.zeros(cfg.feature_dim), he).shape == (1, 768)
    assert encode_st(np.zeros(20), st).shape == (1, 64)
    assert cfg.st_frozen and not cfg.he_frozen
    assert he.kind == "toy-mlp" and st.kind == "toy-linear"


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        encode_he(np.zeros(5), make_backend("toy-mlp", 4, 8))


@pytest.mark.parametrize("kind", ["toy-linear", "toy-mlp"])
def test_frozen_backend_gets_no_gradient(kind):
    rng = np.random.default_rng(1)
    b = make_backend(kind, 4, 3, rng, frozen=True)
    before = {k: v.data.copy() for k, v in b.params.items()}
    with Tape() as tape:
        out = ag.sum(ag.square(encode_st(rng.random((5, 4)), b)))
    assert tape.nodes == []  # nothing required a gradient
    grads = forward_backward(tape, out, b.params.values()) if out.requires_grad else {}
    assert all(not np.any(g) for g in grads.values())
    for k, v in b.params.items():
        np.testing.assert_array_equal(v.data, before[k])


def test_trainable_backend_gets_gradient():
    rng = np.random.default_rng(2)
    b = make_backend("toy-mlp", 4, 3, rng)
    with Tape() as tape:
        out = ag.sum(ag.square(encode_he(rng.random((5, 4)), b)))
    g = forward_backward(tape, out, b.params.values())
    assert any(np.any(g[t]) for t in b.params.values())


def test_encoders_are_deterministic():
    b = make_backend("toy-mlp", 4, 3, np.random.default_rng(3))
    x = np.random.default_rng(4).random((2, 4))
    np.testing.assert_array_equal(encode_he(x, b).data, encode_he(x, b).data)


def test_store_roundtrip_and_lookup(tmp_path):
    rng = np.random.default_rng(0)
    store = EmbeddingStore(8, {f"s{i}": rng.standard_normal(8).astype(np.float32).astype(np.float64)
                               for i in range(5)})
    path, index = write_embedding_store(tmp_path / "emb.strm", store)
    assert index.name == "emb.strm.index.csv"
    back = load_embedding_store(path)
    assert list(back.vectors) == list(store.vectors)
    for k in store.vectors:
        np.testing.assert_array_equal(back.vectors[k], store.vectors[k])
    np.testing.assert_array_equal(back.lookup(["s3", "s1"]), np.stack([store.vectors["s3"], store.vectors["s1"]]))
    with pytest.raises(KeyError, match="'nope'"):
        back.lookup(["s0", "nope"])


def test_store_dimension_disagreement(tmp_path):
    path, _ = write_embedding_store(tmp_path / "e.strm", EmbeddingStore(32, {"a": np.zeros(32)}))
    with pytest.raises(FormatError, match="32"):
        load_embedding_store(path, expected_dim=64)
    with pytest.raises(FormatError):
        EmbeddingStore(4, {"a": np.zeros(3)})


def test_precomputed_backend_is_frozen_and_interchangeable():
    store = EmbeddingStore(3, {"a": np.array([1.0, 2, 3]), "b": np.array([4.0, 5, 6])})
    b = make_backend("precomputed", 0, 3, store=store, frozen=False)
    assert b.frozen
    b.set_frozen(False)
    assert b.frozen
    np.testing.assert_array_equal(encode_st(["b", "a"], b).data, [[4, 5, 6], [1, 2, 3]])
    e = embed_one(HE, "a", b)
    assert e.modality == HE and e.vector.tolist() == [1, 2, 3]
    with pytest.raises(FormatError):
        make_backend("precomputed", 0, 4, store=store)


def test_spot_embedding_modality_tag():
    assert SpotEmbedding(ST, np.zeros(2)).modality == ST
    with pytest.raises(ValueError):
        SpotEmbedding("RNA", np.zeros(2))
