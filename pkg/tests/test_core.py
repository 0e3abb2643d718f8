import dataclasses

import numpy as np
import pytest

from reference import plain_transformer
from spatialmome.core import (ModelConfig, PretrainConfig, encode, forward, init_model, load_model, mome_block,
                              prepare_inputs, pretrain_loss, pretrain_run, sample_mask, save_model, weights_digest)
from spatialmome.core.checkpoint import decode_weights, encode_weights
from spatialmome.core.model import MaskPlan, alibi_bias, embed_slides
from spatialmome.dataspace import (FormatError, GenePanel, SlideDataset, SpotRecord, SynthConfig,
                                   build_neighborhoods, synth_tissue)
from spatialmome.encoders import HE, ST
from spatialmome.numerics import NumericError, OptimizerConfig, Tape, Tensor, forward_backward, no_record

TINY = dict(dim=16, n_blocks=2, n_heads=2, ffn_mult=2, feature_dim=8, he_dim=12, st_dim=6, decoder_dim=8,
            decoder_blocks=1)


def _perturb(model, seed=0, scale=0.3):
    """Move every weight off its structured init so no term vanishes by accident."""
    rng = np.random.default_rng(seed)
    for t in model.named_parameters().values():
        t.data = t.data + scale * rng.standard_normal(t.shape)
    return model


@pytest.fixture
def tiny(small_slide):
    cfg = ModelConfig(n_genes=len(small_slide.panel), **TINY)
    model = _perturb(init_model(cfg, seed=3))
    return model, prepare_inputs([small_slide], cfg)


def _full_interior(inputs):
    return [nb for nb in inputs.neighborhoods if len(nb) == 25]


# ---------------------------------------------------------------- tokens and bias


def test_alibi_examples():
    cfg = ModelConfig(n_heads=8, dim=16)
    slopes = cfg.slopes()
    assert slopes[0] == 0.5
    b = alibi_bias(np.array([[0.0, 0.0], [0.0, 2.0], [1.0, 1.0], [0.0, 0.0]]), slopes)
    assert b[0, 0, 1] == -1.0
    assert b[3, 0, 2] == pytest.approx(-slopes[3] * np.sqrt(2))
    assert b[0, 0, 3] == 0.0 and np.all(np.diagonal(b, axis1=1, axis2=2) == 0)
    assert np.all(b <= 0)
    np.testing.assert_array_equal(b, np.swapaxes(b, 1, 2))


def test_alibi_translation_invariant(rng):
    c = rng.random((7, 2))
    s = ModelConfig().slopes()
    np.testing.assert_allclose(alibi_bias(c + [13.0, -4.0], s), alibi_bias(c, s), atol=1e-12)


def test_zero_inputs_give_zero_tokens(small_slide):
    cfg = ModelConfig(n_genes=20, **{**TINY, "n_blocks": 0})
    model = init_model(cfg)
    for k in ("mod.he", "mod.st", "proj_he.b", "proj_st.b"):
        model.weights[k].data[:] = 0
    for t in model.he_encoder.params.values():
        t.data[:] = 0
    inputs = prepare_inputs([small_slide], cfg)
    fw = forward(model, inputs, inputs.neighborhoods[:3], modalities=(HE,))
    assert not fw.tokens.data.any()


def test_modality_tag_shifts_token_by_difference(small_slide):
    cfg = ModelConfig(n_genes=20, **{**TINY, "n_blocks": 0, "he_dim": 6, "he_encoder": "toy-linear"})
    model = init_model(cfg)
    # make the two spot encoders and projections agree so only the tag differs
    inputs = prepare_inputs([small_slide], cfg)
    inputs.he = inputs.st[:, :8].copy()
    model.he_encoder.params["w"].data = model.st_encoder.params["w"].data[:8]
    model.he_encoder.params["b"].data = model.st_encoder.params["b"].data.copy()
    inputs.st[:, 8:] = 0
    for s in ("w", "b"):
        model.weights[f"proj_he.{s}"].data = model.weights[f"proj_st.{s}"].data.copy()
    fw = forward(model, inputs, inputs.neighborhoods[:1])
    tok, mod = fw.tokens.data[0], fw.layout.mod[0]
    diff = tok[mod == 0] - tok[mod == 1]
    want = model.weights["mod.he"].data - model.weights["mod.st"].data
    np.testing.assert_allclose(diff, np.broadcast_to(want, diff.shape), atol=1e-12)


def test_token_count(tiny):
    model, inputs = tiny
    fw = forward(model, inputs, inputs.neighborhoods)
    counts = (fw.layout.spot >= 0).sum(1)
    assert counts.max() == 50
    for nb, c in zip(inputs.neighborhoods, counts):
        assert c == inputs.has_he[nb.members].sum() + inputs.has_st[nb.members].sum()


# ---------------------------------------------------------------- spatial block


def _block_inputs(model, inputs, nbhds):
    fw = forward(model, inputs, nbhds)
    return fw.tokens, fw.layout


def test_block_identity_when_branches_are_zero(tiny):
    model, inputs = tiny
    x, lay = _block_inputs(model, inputs, inputs.neighborhoods[:4])
    p = dict(model.weights)
    for k in ("blocks.0.attn.v.w", "blocks.0.attn.v.b", "blocks.0.attn.o.b", "blocks.0.ffn_he.fc2.w",
              "blocks.0.ffn_he.fc2.b", "blocks.0.ffn_st.fc2.w", "blocks.0.ffn_st.fc2.b"):
        p[k] = Tensor(np.zeros(p[k].shape))
    out = mome_block(p, "blocks.0", x, lay.mod, model.config.n_heads, lay.bias)
    np.testing.assert_array_equal(out.data, x.data)


def test_zeroing_he_expert_only_moves_he_tokens(tiny):
    model, inputs = tiny
    x, lay = _block_inputs(model, inputs, inputs.neighborhoods[:4])
    a = mome_block(model.weights, "blocks.1", x, lay.mod, 2, lay.bias).data
    p = dict(model.weights)
    p["blocks.1.ffn_he.fc2.w"] = Tensor(np.zeros(p["blocks.1.ffn_he.fc2.w"].shape))
    b = mome_block(p, "blocks.1", x, lay.mod, 2, lay.bias).data
    st_tok, he_tok = lay.mod == 1, lay.mod == 0
    np.testing.assert_array_equal(a[st_tok], b[st_tok])
    assert np.all(np.abs(a[he_tok] - b[he_tok]).max(-1) > 0)


def test_attention_rows_sum_to_one(tiny):
    model, inputs = tiny
    fw = forward(model, inputs, inputs.neighborhoods[:5], keep_attn=True)
    assert len(fw.attn) == model.config.n_blocks
    valid = fw.layout.spot >= 0
    for w in fw.attn:
        assert w.shape[1] == model.config.n_heads
        rows = w.sum(-1)  # (B, H, T)
        np.testing.assert_allclose(rows[np.broadcast_to(valid[:, None, :], rows.shape)], 1.0, atol=1e-12)


# ---------------------------------------------------------------- encode


@pytest.mark.parametrize("seed", [0, 1])
def test_unimodal_collapse_matches_plain_transformer(small_slide, seed):
    cfg = ModelConfig(n_genes=20, **TINY)
    model = _perturb(init_model(cfg, seed=seed), seed=seed)
    inputs = prepare_inputs([small_slide], cfg)
    picks = np.random.default_rng(seed).choice(len(inputs.neighborhoods), 20, replace=False)
    nbhds = [inputs.neighborhoods[i] for i in picks]
    enc = encode(model, inputs, nbhds, modalities=(HE,))
    for nb, toks in zip(nbhds, enc.tokens):
        ref = plain_transformer(model, inputs.he[nb.members], nb.rel_coords)
        assert np.abs(toks - ref).max() <= 1e-6


def test_zero_slopes_equal_bias_free_reference(tiny, monkeypatch):
    model, inputs = tiny
    H = model.config.n_heads
    monkeypatch.setattr(model.config, "slopes", lambda: np.zeros(H))
    nb = inputs.neighborhoods[44]
    toks = encode(model, inputs, [nb], modalities=(HE,)).tokens[0]
    ref = plain_transformer(model, inputs.he[nb.members], np.zeros_like(nb.rel_coords), slopes=np.zeros(H))
    assert np.abs(toks - ref).max() <= 1e-9


def test_member_permutation_leaves_outputs_unchanged(tiny):
    model, inputs = tiny
    nb = inputs.neighborhoods[55]
    perm = np.random.default_rng(0).permutation(len(nb))
    shuffled = dataclasses.replace(nb, members=nb.members[perm], rel_coords=nb.rel_coords[perm],
                                   member_ids=tuple(nb.member_ids[i] for i in perm))
    a, b = encode(model, inputs, [nb]), encode(model, inputs, [shuffled])
    np.testing.assert_allclose(a.fused[0], b.fused[0], atol=1e-12)
    key = lambda e: np.lexsort((e.token_modality[0], e.token_spot[0]))  # noqa: E731
    np.testing.assert_allclose(a.tokens[0][key(a)], b.tokens[0][key(b)], atol=1e-12)


def test_fused_is_concatenation_or_single_token(tiny):
    model, inputs = tiny
    enc = encode(model, inputs, inputs.neighborhoods[:3])
    assert all(len(f) == 2 * model.config.dim for f in enc.fused)
    he_only = encode(model, inputs, inputs.neighborhoods[:3], modalities=(HE,))
    assert all(len(f) == model.config.dim for f in he_only.fused)
    assert embed_slides(model, inputs).shape == (len(inputs), 2 * model.config.dim)


def test_grid_size_one_uses_only_the_anchor(small_slide):
    cfg = ModelConfig(n_genes=20, **{**TINY, "grid_size": 1, "visible": 1})
    model = _perturb(init_model(cfg))
    inputs = prepare_inputs([small_slide], cfg)
    assert all(len(nb) == 1 for nb in inputs.neighborhoods)
    base = embed_slides(model, inputs)
    inputs.he[10] += 5.0
    inputs.st[11] += 1.0
    moved = embed_slides(model, inputs)
    changed = np.flatnonzero(np.abs(moved - base).max(1) > 0)
    assert changed.tolist() == [10, 11]
    with pytest.raises(ValueError):
        sample_mask(inputs.neighborhoods[0], inputs, cfg, 0)


def test_continuous_translation_invariance():
    cfg_s = dict(rows=8, cols=8, n_genes=10, feature_dim=8, coordinate_mode="continuous", jitter_um=4.0, seed=1)
    a = synth_tissue(SynthConfig(**cfg_s))
    b = synth_tissue(SynthConfig(**cfg_s))
    for s in b.spots:
        s.coord = (s.coord[0] + 1000.0, s.coord[1] - 250.0)
    cfg = ModelConfig(n_genes=10, neighborhood_mode="knn", **TINY)
    model = _perturb(init_model(cfg))
    ea, eb = embed_slides(model, prepare_inputs([a], cfg)), embed_slides(model, prepare_inputs([b], cfg))
    np.testing.assert_allclose(ea, eb, atol=1e-9)


def test_spot_without_any_modality_is_rejected(tiny):
    model, inputs = tiny
    with pytest.raises(ValueError, match="no tokens"):
        forward(model, inputs, inputs.neighborhoods[:1], modalities=())


# ---------------------------------------------------------------- masking


def test_mask_plan_contract(tiny):
    model, inputs = tiny
    rng = np.random.default_rng(0)
    for nb in _full_interior(inputs):
        plan = sample_mask(nb, inputs, model.config, rng)
        for m in (HE, ST):
            vis, msk = set(plan.visible[m].tolist()), set(plan.masked[m].tolist())
            assert len(vis) == 5 and len(msk) == 20 and not vis & msk
            assert vis | msk == set(range(25))


def test_mask_is_deterministic_and_modalities_independent(tiny):
    model, inputs = tiny
    nb = _full_interior(inputs)[0]
    a = sample_mask(nb, inputs, model.config, 42)
    b = sample_mask(nb, inputs, model.config, 42)
    for m in (HE, ST):
        np.testing.assert_array_equal(a.visible[m], b.visible[m])
    same = [np.array_equal(*(sample_mask(nb, inputs, model.config, s).visible[m] for m in (HE, ST)))
            for s in range(20)]
    assert not all(same)


def test_small_neighbourhood_all_visible_with_warning():
    spots = [SpotRecord(f"s{i}", (r, c), {0: 1}, np.zeros(8, np.float32))
             for i, (r, c) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)])]
    ds = SlideDataset("four", GenePanel("p", ("A",)), spots, "grid", 8)
    cfg = ModelConfig(n_genes=1, **TINY)
    inputs = prepare_inputs([ds], cfg)
    with pytest.warns(UserWarning, match="only 4"):
        plan = sample_mask(inputs.neighborhoods[0], inputs, cfg, 0)
    assert len(plan.visible[HE]) == 4 and len(plan.masked[HE]) == 0


# ---------------------------------------------------------------- objective


def _plans(model, inputs, nbhds, seed=0):
    rng = np.random.default_rng(seed)
    return [sample_mask(nb, inputs, model.config, rng) for nb in nbhds]


def _hand_loss(parts):
    he = np.mean(((parts.he_pred.data - parts.he_target) ** 2).mean(1))
    m = parts.st_mask
    st = np.mean((((parts.st_pred.data - parts.st_target) * m) ** 2).sum(1) / m.sum(1))
    return he + st


def test_loss_matches_hand_assembled_sum(tiny):
    model, inputs = tiny
    nbhds = _full_interior(inputs)[:3]
    plans = _plans(model, inputs, nbhds)
    with no_record():
        parts = pretrain_loss(model, inputs, nbhds, plans)
    assert float(parts.total.data) == pytest.approx(_hand_loss(parts), rel=1e-12)
    assert len(parts.he_spots) == len(parts.st_spots) == 60

    # one ST spot moved from masked to visible: one summand fewer, oracle still holds
    p0 = plans[0]
    moved = int(p0.masked[ST][0])
    plans2 = [MaskPlan(dict(p0.visible, ST=np.sort(np.append(p0.visible[ST], moved))),
                       dict(p0.masked, ST=p0.masked[ST][1:]))] + plans[1:]
    with no_record():
        parts2 = pretrain_loss(model, inputs, nbhds, plans2)
    assert len(parts2.st_spots) == 59
    assert nbhds[0].members[moved] not in parts2.st_spots[:19]
    assert float(parts2.total.data) == pytest.approx(_hand_loss(parts2), rel=1e-12)


def test_perfect_reconstruction_gives_zero_loss(tiny):
    model, inputs = tiny
    nbhds = _full_interior(inputs)[:2]
    plans = _plans(model, inputs, nbhds)
    with no_record():
        parts = pretrain_loss(model, inputs, nbhds, plans)
        again = pretrain_loss(model, inputs, nbhds, plans,
                              targets_override={HE: parts.he_pred.data, ST: parts.st_pred.data})
    assert float(again.total.data) == 0.0


def _two_panel_inputs():
    a = synth_tissue(SynthConfig(rows=8, cols=8, n_genes=12, feature_dim=8, seed=0, slide_id="a"))
    b = synth_tissue(SynthConfig(rows=8, cols=8, n_genes=12, feature_dim=8, seed=1, slide_id="b"))
    # slide a lacks the last three genes: rename them so they only exist in b's panel
    a.panel = GenePanel("pa", a.panel.genes[:9] + ("x0", "x1", "x2"))
    cfg = ModelConfig(n_genes=15, **TINY)
    inputs = prepare_inputs([a, b], cfg)
    return cfg, inputs, [i for i, g in enumerate(inputs.union.genes) if g in b.panel.genes[9:]]


def test_absent_genes_get_exactly_zero_gradient():
    cfg, inputs, absent = _two_panel_inputs()
    model = _perturb(init_model(cfg))
    nbhds = [nb for nb in inputs.neighborhoods if inputs.slide_of[nb.anchor] == 0 and len(nb) == 25]
    plans = _plans(model, inputs, nbhds)
    with Tape() as tape:
        loss = pretrain_loss(model, inputs, nbhds, plans).total
    g = forward_backward(tape, loss, model.weights.values())
    gw, gb = g[model.weights["dec_st.head.w"]], g[model.weights["dec_st.head.b"]]
    assert np.all(gw[:, absent] == 0) and np.all(gb[absent] == 0)
    present = [i for i in range(15) if i not in absent]
    assert np.all(gb[present] != 0)


def test_absent_gene_target_perturbation_is_bit_identical():
    cfg, inputs, absent = _two_panel_inputs()
    model = _perturb(init_model(cfg))
    nbhds = [nb for nb in inputs.neighborhoods if inputs.slide_of[nb.anchor] == 0][:6]
    plans = _plans(model, inputs, nbhds)
    with no_record():
        parts = pretrain_loss(model, inputs, nbhds, plans)
        tgt = parts.st_target.copy()
        tgt[:, absent] += 123.0
        again = pretrain_loss(model, inputs, nbhds, plans, targets_override={ST: tgt})
    assert again.total.data == parts.total.data


def test_gradient_flow_respects_freezing(tiny):
    model, inputs = tiny
    nbhds = _full_interior(inputs)[:2]
    with Tape() as tape:
        loss = pretrain_loss(model, inputs, nbhds, _plans(model, inputs, nbhds)).total
    params = model.named_parameters()
    g = forward_backward(tape, loss, params.values())
    assert all(not np.any(g[params[k]]) for k in params if k.startswith("enc_st."))
    for k in ("mask.he", "mask.st", "mod.he", "mod.st", "enc_he.w1"):
        assert np.any(g[params[k]]), k


def test_no_masked_positions_is_rejected(tiny):
    model, inputs = tiny
    nb = inputs.neighborhoods[0]
    all_visible = MaskPlan({m: np.arange(len(nb)) for m in (HE, ST)}, {m: np.array([], int) for m in (HE, ST)})
    with pytest.raises(ValueError, match="no masked"):
        pretrain_loss(model, inputs, [nb], [all_visible])


# ---------------------------------------------------------------- training and checkpoints


def _short_run(small_slide, seed=0):
    cfg = ModelConfig(n_genes=20, **TINY)
    model = init_model(cfg, seed=seed)
    inputs = prepare_inputs([small_slide], cfg)
    opt = OptimizerConfig(base_lr=1e-3, warmup_epochs=1, total_epochs=3)
    return pretrain_run(model, inputs, opt, PretrainConfig(epochs=3, batch_size=25, seed=seed))


def test_pretrain_is_deterministic(small_slide):
    a, b = _short_run(small_slide), _short_run(small_slide)
    assert len(a.trace) == 3 and a.steps == 12
    assert a.trace == b.trace and a.step_losses == b.step_losses
    assert weights_digest(a.model.named_parameters()) == weights_digest(b.model.named_parameters())
    c = _short_run(small_slide, seed=1)
    assert c.step_losses != a.step_losses


def test_st_encoder_is_untouched_by_pretraining(small_slide):
    cfg = ModelConfig(n_genes=20, **TINY)
    before = {k: v.data.copy() for k, v in init_model(cfg).st_encoder.params.items()}
    after = _short_run(small_slide).model.st_encoder.params
    for k in before:
        np.testing.assert_array_equal(after[k].data, before[k])


def test_divergence_names_the_step(small_slide):
    cfg = ModelConfig(n_genes=20, **TINY)
    model = init_model(cfg)
    model.weights["blocks.0.ln1.g"].data[0] = np.nan
    inputs = prepare_inputs([small_slide], cfg)
    with pytest.raises(NumericError, match="step 0"):
        # the probe is evaluated without a tape, so NaN first surfaces in the first step
        pretrain_run(model, inputs, OptimizerConfig(total_epochs=1, warmup_epochs=0),
                     PretrainConfig(epochs=1, batch_size=10))


def test_checkpoint_roundtrip(tmp_path, tiny):
    model, inputs = tiny
    save_model(tmp_path, model)
    back = load_model(tmp_path)
    f32 = {k: v.data.astype(np.float32) for k, v in model.named_parameters().items()}
    assert set(back.named_parameters()) == set(f32)
    for k, v in back.named_parameters().items():
        np.testing.assert_array_equal(v.data, f32[k])
    assert weights_digest(back.named_parameters()) == weights_digest(model.named_parameters())
    assert back.st_encoder.frozen and not back.he_encoder.frozen
    slim = load_model(tmp_path, drop_decoders=True)
    assert not any(k.startswith("dec_") for k in slim.weights)
    a = embed_slides(back, inputs)
    np.testing.assert_array_equal(a, embed_slides(slim, inputs))


def test_checkpoint_rejects_corruption():
    payload = encode_weights({"a": np.ones((2, 3)), "b": np.zeros(1)})
    assert set(decode_weights(payload)) == {"a", "b"}
    with pytest.raises(FormatError):
        decode_weights(b"XXXXX" + payload[5:])
    with pytest.raises(FormatError):
        decode_weights(payload[:-2])
    with pytest.raises(FormatError):
        decode_weights(payload + b"\0")


@pytest.mark.parametrize("bad", [dict(dim=10, n_heads=4), dict(grid_size=4), dict(visible=26),
                                 dict(neighborhood_mode="radius")])
def test_model_config_validation(bad):
    with pytest.raises(ValueError):
        ModelConfig(**bad)


def test_knn_neighbourhoods_feed_the_encoder():
    ds = synth_tissue(SynthConfig(rows=8, cols=8, n_genes=10, feature_dim=8, coordinate_mode="continuous",
                                  jitter_um=4.0, seed=1))
    cfg = ModelConfig(n_genes=10, neighborhood_mode="knn", **TINY)
    inputs = prepare_inputs([ds], cfg)
    assert all(len(nb) == 9 for nb in inputs.neighborhoods)
    assert build_neighborhoods(ds, "knn")[0].rel_coords.shape == (9, 2)
    assert embed_slides(init_model(cfg), inputs).shape == (64, 32)
