"""Acceptance criteria, one test per criterion.

Each check returns ``(passed, detail)``; the outcome is printed as a single
``PASS``/``FAIL`` line and collected for pytest's terminal summary. Run the
file directly (``python tests/test_acceptance.py``) to print the lines
without pytest.
"""
from __future__ import annotations

import functools
import shutil
import sys
import tempfile
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gradcases import block_case, primitive_cases  # noqa: E402
from oracles import c_index_oracle, cox_loglik_oracle, oracle, random_labelings, random_survival  # noqa: E402
from reference import plain_transformer  # noqa: E402
from spatialmome.clinical import (CohortConfig, RiskConfig, attribute_bag, bootstrap_ci, c_index,  # noqa: E402
                                  cox_fit, integrated_gradients, km_curve, logrank, synth_cohort,
                                  train_risk_model)
from spatialmome.core import (ModelConfig, PretrainConfig, embed_slides, encode, init_model,  # noqa: E402
                              pretrain_loss, pretrain_run, prepare_inputs, sample_mask, weights_digest)
from spatialmome.dataspace import (GenePanel, SynthConfig, normalize_expression, select_hvg,  # noqa: E402
                                   synth_tissue)
from spatialmome.domains import external_metrics, kmeans, pca  # noqa: E402
from spatialmome.encoders import HE, ST  # noqa: E402
from spatialmome.numerics import OptimizerConfig, Tape, Tensor, ag, forward_backward, grad_check  # noqa: E402
from spatialmome.virtual_st import FinetuneConfig, finetune_head, head_forward, pcc_genewise  # noqa: E402

RESULTS: list[str] = []


def _report(title: str, check) -> None:
    t0 = time.perf_counter()
    ok, detail = check()
    line = f"{'PASS' if ok else 'FAIL'}  {title}: {detail} [{time.perf_counter() - t0:.1f}s]"
    print(line)
    RESULTS.append(line)
    assert ok, line


# ---------------------------------------------------------------- shared fixtures

SLIDE = SynthConfig(rows=32, cols=32, n_domains=4, n_genes=100, seed=0)
MODEL = dict(dim=64, feature_dim=32, he_dim=64, n_genes=100)
OPT = OptimizerConfig(base_lr=1e-3, warmup_epochs=1, total_epochs=4)
TRAIN = PretrainConfig(epochs=4, batch_size=16, max_steps=200, seed=0)


@functools.lru_cache(maxsize=None)
def pretrained(run: int = 0):
    """Pretrain on the 32x32 synthetic slide; ``run`` only separates cache entries."""
    ds = synth_tissue(SLIDE)
    cfg = ModelConfig(**MODEL)
    inputs = prepare_inputs([ds], cfg)
    model = init_model(cfg, seed=0)
    t0 = time.perf_counter()
    res = pretrain_run(model, inputs, OPT, TRAIN)
    return ds, inputs, res, time.perf_counter() - t0


# ---------------------------------------------------------------- criteria


def check_gradients():
    t0 = time.perf_counter()
    worst_prim = worst_block = 0.0
    failures = []
    for seed in range(3):
        for name, fn, point in primitive_cases(seed):
            rep = grad_check(fn, point)
            worst_prim = max(worst_prim, rep.max_rel_error)
            if not rep.passed(1e-5):
                failures.append(f"{name}@{seed}")
        fn, point = block_case(seed)
        rep = grad_check(fn, point)
        worst_block = max(worst_block, rep.max_rel_error)
        if not rep.passed(1e-4):
            failures.append(f"block@{seed}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 60
    return ok, (f"{len(primitive_cases(0))} primitives x 3 seeds max rel {worst_prim:.1e} (< 1e-5), "
                f"block max rel {worst_block:.1e} (< 1e-4), {elapsed:.1f}s (< 60s)"
                + (f", failed: {failures}" if failures else ""))


def check_unimodal_collapse():
    ds = synth_tissue(SynthConfig(rows=12, cols=12, n_genes=30, feature_dim=16, seed=3))
    cfg = ModelConfig(dim=32, n_blocks=2, n_heads=4, feature_dim=16, he_dim=24, st_dim=8, n_genes=30)
    model = init_model(cfg, seed=3)
    rng = np.random.default_rng(3)
    for t in model.named_parameters().values():  # move away from the structured init
        t.data = t.data + 0.3 * rng.standard_normal(t.shape)
    inputs = prepare_inputs([ds], cfg)
    picks = rng.choice(len(inputs.neighborhoods), 20, replace=False)
    nbhds = [inputs.neighborhoods[i] for i in picks]
    enc = encode(model, inputs, nbhds, modalities=(HE,))
    diff = max(np.abs(tok - plain_transformer(model, inputs.he[nb.members], nb.rel_coords)).max()
               for nb, tok in zip(nbhds, enc.tokens))
    return diff <= 1e-6, f"20 neighbourhoods, max |encoder - plain reference| = {diff:.1e} (<= 1e-6)"


def check_masking():
    ds = synth_tissue(SynthConfig(rows=10, cols=10, n_genes=12, feature_dim=8, seed=0, slide_id="a"))
    other = synth_tissue(SynthConfig(rows=10, cols=10, n_genes=12, feature_dim=8, seed=1, slide_id="b"))
    ds.panel = GenePanel("pa", ds.panel.genes[:9] + ("x0", "x1", "x2"))  # three genes only b measures
    cfg = ModelConfig(dim=16, n_blocks=1, n_heads=2, feature_dim=8, he_dim=12, st_dim=6, n_genes=15,
                      decoder_dim=8, decoder_blocks=1)
    inputs = prepare_inputs([ds, other], cfg)
    model = init_model(cfg, seed=0)
    rng = np.random.default_rng(0)
    for t in model.named_parameters().values():
        t.data = t.data + 0.3 * rng.standard_normal(t.shape)
    full = [nb for nb in inputs.neighborhoods if len(nb) == 25]
    counts = set()
    for nb in full:
        plan = sample_mask(nb, inputs, cfg, rng)
        counts |= {(len(plan.visible[m]), len(plan.masked[m])) for m in (HE, ST)}
    absent = [i for i, g in enumerate(inputs.union.genes) if g in other.panel.genes[9:]]
    nbhds = [nb for nb in full if inputs.slide_of[nb.anchor] == 0][:16]
    plans = [sample_mask(nb, inputs, cfg, rng) for nb in nbhds]
    with Tape() as tape:
        loss = pretrain_loss(model, inputs, nbhds, plans).total
    w = model.weights
    g = forward_backward(tape, loss, [w["dec_st.head.w"], w["dec_st.head.b"]])
    zero = (np.all(g[w["dec_st.head.w"]][:, absent] == 0) and np.all(g[w["dec_st.head.b"]][absent] == 0))
    ok = counts == {(5, 20)} and zero and len(absent) == 3
    return ok, (f"{len(full)} full 5x5 plans, (visible, masked) per modality = {sorted(counts)}; "
                f"absent-gene gradient exactly zero: {zero}")


def check_pretraining():
    _, _, a, secs = pretrained(0)
    _, _, b, _ = pretrained(1)
    ratio = a.probe_final / a.probe_initial
    same = a.step_losses == b.step_losses and a.trace == b.trace
    ok = a.steps == 200 and ratio <= 0.5 and secs < 300 and same
    return ok, (f"{a.steps} steps, probe loss {a.probe_initial:.3f} -> {a.probe_final:.3f} "
                f"(ratio {ratio:.3f} <= 0.5), {secs:.0f}s (< 300s), identical traces: {same}")


def check_domain_recovery():
    t0 = time.perf_counter()
    ds, inputs, res, secs = pretrained(0)
    truth = ds.labels()
    emb = embed_slides(res.model, inputs)
    fused = external_metrics(kmeans(emb, 4, seed=0).labels, truth)["ARI"]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        expr = normalize_expression(ds.counts())
    base = external_metrics(kmeans(pca(expr, 50), 4, seed=0).labels, truth)["ARI"]
    elapsed = time.perf_counter() - t0 + secs
    ok = fused >= 0.9 and fused - base >= 0.1 and elapsed < 600
    return ok, (f"fused ARI {fused:.3f} (>= 0.9), PCA(50) expression ARI {base:.3f} "
                f"(margin {fused - base:.3f} >= 0.1), {elapsed:.0f}s incl. pretraining (< 600s)")


VST_SLIDE = dict(seed=7, base_mean=30.0, morph_noise=0.3, joint_fraction=0.5)


def check_virtual_st():
    slides = [synth_tissue(SynthConfig(**VST_SLIDE, layout_seed=i, slide_id=f"v{i}")) for i in range(3)]
    cfg = ModelConfig(**MODEL)
    inputs = prepare_inputs(slides, cfg)
    model = init_model(cfg, seed=0)
    pretrain_run(model, inputs, OPT, PretrainConfig(epochs=4, batch_size=16, max_steps=200, seed=0))
    train = np.flatnonzero(inputs.slide_of < 2)
    test = np.flatnonzero(inputs.slide_of == 2)
    genes = np.sort(select_hvg(inputs.st[train], 50))
    Y = inputs.st[:, genes]
    fcfg = FinetuneConfig(epochs=30, batch_size=16, lr=1e-3)
    emb = embed_slides(model, inputs, fcfg.modalities)
    before = weights_digest(model.named_parameters())
    res = finetune_head(model, inputs, Y, train, fcfg, seed=0, embeddings=emb)
    after = weights_digest(model.named_parameters())
    scores = [s.pcc for s in pcc_genewise(head_forward(emb[test], res.head).data, Y[test]) if s.defined]
    med = float(np.median(scores))
    same = before == after == res.backbone_digest_before == res.backbone_digest_after
    return med >= 0.8 and same, (f"held-out slide median PCC over top-50 HVGs {med:.3f} (>= 0.8), "
                                 f"backbone checksum unchanged: {same}")


def check_metric_oracles():
    worst = 0.0
    for pred, truth in random_labelings(200):
        got, want = external_metrics(pred, truth), oracle(pred, truth)
        worst = max(worst, max(abs(got[k] - want[k]) for k in want))
    ex = external_metrics([0, 1, 0, 1], [0, 0, 1, 1])
    rng = np.random.default_rng(0)
    exact = done = 0
    while done < 100:
        n = int(rng.integers(2, 51))
        t, e = random_survival(rng, n)
        s = rng.integers(0, 6, n).astype(float)
        if not any(e[i] and t[i] < t.max() for i in range(n)):
            continue
        exact += c_index(s, t, e) == c_index_oracle(s, t, e)
        done += 1
    ok = worst <= 1e-12 and ex["ARI"] == -0.5 and ex["FMI"] == 0.0 and exact == 100
    return ok, (f"200 labelings max |diff| {worst:.1e} (<= 1e-12); worked example ARI {ex['ARI']}, "
                f"FMI {ex['FMI']}; c_index exact on {exact}/100 censored datasets")


def check_survival():
    # hand examples
    km = km_curve([5, 10], [1, 0])
    km_ok = km.at(4.999) == 1.0 and km.at(5) == 0.5 and km.at(10) == 0.5
    lr = logrank([1, 2], [1, 1], [3, 4], [1, 1])
    lr_ok = abs(lr.statistic - 49 / 17) <= 1e-12
    # planted beta
    rng = np.random.default_rng(0)
    x = rng.integers(0, 2, 500).astype(float)
    t = rng.exponential(1.0 / np.exp(0.7 * x))
    c = rng.exponential(4.0, 500)
    beta = cox_fit(x, np.minimum(t, c), (t <= c).astype(int)).beta[0]
    # n = 6 scan
    x6, t6, e6 = np.array([1.0, 0, 1, 1, 0, 0]), np.arange(1.0, 7), np.array([1, 1, 0, 1, 1, 0])
    grid = np.arange(-5, 5, 1e-3)
    b0 = grid[np.argmax([cox_loglik_oracle(x6, t6, e6, b) for b in grid])]
    fine = np.arange(b0 - 2e-3, b0 + 2e-3, 1e-6)
    best = fine[np.argmax([cox_loglik_oracle(x6, t6, e6, b) for b in fine])]
    scan_err = abs(cox_fit(x6, t6, e6).beta[0] - best)
    # bootstrap
    z = np.random.default_rng(5).standard_normal(50)
    det = bootstrap_ci(np.mean, z, 200, seed=3).values.tobytes() == \
        bootstrap_ci(np.mean, z, 200, seed=3).values.tobytes()
    hits = 0
    for i in range(100):
        r = bootstrap_ci(np.mean, np.random.default_rng(1000 + i).standard_normal(200), 1000, seed=i)
        hits += r.lower <= 0.0 <= r.upper
    ok = km_ok and lr_ok and abs(beta - 0.7) <= 0.15 and scan_err < 1e-4 and det and 92 <= hits <= 98
    return ok, (f"KM example {km_ok}, log-rank 49/17 {lr_ok}; planted beta 0.7 -> {beta:.3f} (+-0.15); "
                f"n=6 scan |diff| {scan_err:.1e} (< 1e-4); bootstrap deterministic {det}, "
                f"coverage {hits}/100 (95 +- 3)")


def check_attribution():
    w = Tensor(np.array([2.0, -3.0, 0.5]))
    x = np.array([1.5, 2.0, -4.0])
    lin = integrated_gradients(lambda d: ag.sum(d["x"] * w), x, steps=7)
    lin_err = float(np.abs(lin.values["x"] - x * w.data).max())
    co = synth_cohort(CohortConfig(n_subjects=60, n_patches=20, seed=0))
    times = np.array([r.time for r in co.records])
    events = np.array([r.event for r in co.records])
    model = train_risk_model(co.bags, times, events, RiskConfig(epochs=20), seed=0).model
    rel128, shrinks = [], []
    for bag in co.bags[:5]:
        a, b = attribute_bag(model, bag, 128), attribute_bag(model, bag, 256)
        rel128.append(a.relative_residual)
        shrinks.append(b.residual < a.residual)
    ok = lin_err <= 1e-12 and max(rel128) < 1e-4 and all(shrinks)
    return ok, (f"linear model max |IG - exact| {lin_err:.1e}; trained risk model max relative residual "
                f"at 128 steps {max(rel128):.1e} (< 1e-4), shrinks at 256 steps on {sum(shrinks)}/5 slides")


def check_cli_determinism():
    from test_cli import _outputs, _pipeline
    tmp = Path(tempfile.mkdtemp(prefix="acceptance_cli_"))
    try:
        a, b = _outputs(_pipeline(tmp / "a")), _outputs(_pipeline(tmp / "b"))
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    differ = sorted(k for k in a if a.get(k) != b.get(k)) + sorted(set(b) - set(a))
    cmds = {k.split("/")[0] for k in a} - {"cfg"}
    return not differ and len(cmds) == 9, (f"{len(cmds)} pipeline runs covering all 8 commands, {len(a)} files, "
                                           f"{len(differ)} differ between two seeded runs")


CRITERIA = {
    "gradients": ("Gradient suite", check_gradients),
    "collapse": ("Unimodal collapse", check_unimodal_collapse),
    "masking": ("Masking contract", check_masking),
    "pretraining": ("Pretraining sanity", check_pretraining),
    "domains": ("Domain recovery", check_domain_recovery),
    "virtual_st": ("Virtual-ST sanity", check_virtual_st),
    "metrics": ("Metric oracles", check_metric_oracles),
    "survival": ("Survival statistics", check_survival),
    "attribution": ("Attribution", check_attribution),
    "cli": ("Determinism", check_cli_determinism),
}


@pytest.mark.acceptance
@pytest.mark.parametrize("key", list(CRITERIA))
def test_criterion(key):
    _report(*CRITERIA[key])


if __name__ == "__main__":
    failed = 0
    for key in sys.argv[1:] or CRITERIA:
        try:
            _report(*CRITERIA[key])
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
