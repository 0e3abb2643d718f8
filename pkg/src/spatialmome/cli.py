"""Command-line pipelines: one subcommand per stage, composed through files.

Every run takes ``--config`` (JSON) and ``--out`` (directory). The config has
an optional top-level ``seed`` and exactly one block named after the
subcommand. Unknown keys are rejected. Each run writes its outputs, a
``resolved_config.json`` and a ``manifest.json`` listing every emitted file
with its SHA-256.

Exit status: 0 on success, 1 on invalid input (the message names the file
and field), 2 on usage errors.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import warnings
from pathlib import Path
from typing import Any

import numpy as np
from threadpoolctl import threadpool_limits

from .clinical import (CohortConfig, CoxFitError, RiskConfig, RiskModel, SlideBag, attribute_bag, bootstrap_ci,
                       c_index, cohort_csv, cox_fit, predict_risk, read_cohort, stratify_median, synth_cohort,
                       train_risk_model)
from .core import (ModelConfig, PretrainConfig, embed_slides, init_model, load_model, load_weights, prepare_inputs,
                   pretrain_run, save_model, save_weights)
from .dataspace import (FormatError, PanelRegistry, SynthConfig, load_slide, normalize_expression, panel_union,
                        read_features, select_hvg, synth_tissue, write_features, write_slide)
from .domains import bh_adjust, external_metrics, kmeans, ora_hypergeom, pca, spatial_metrics, wilcoxon_de
from .encoders import HE, ST
from .fileio import atomic_write_text, csv_text, read_csv
from .numerics import OptimizerConfig, Tensor
from .seeding import rng_for
from .virtual_st import FinetuneConfig, benchmark_report, finetune_head, head_forward, pcc_genewise, split_slides

COMMANDS = ("synth", "pretrain", "finetune", "predict", "cluster", "metrics", "survival", "attribute")


class ConfigError(ValueError):
    def __init__(self, path, field: str, message: str):
        super().__init__(f"{path}: field '{field}': {message}")


# ---------------------------------------------------------------- config plumbing

class _Block:
    """A config block that remembers where it came from and which keys were read."""

    def __init__(self, data: Any, path: Path, where: str, allowed: set[str]):
        if not isinstance(data, dict):
            raise ConfigError(path, where, "expected a JSON object")
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ConfigError(path, f"{where}.{unknown[0]}", "unknown key")
        self.data, self.path, self.where = data, path, where

    def get(self, key: str, default=None, kind=None):
        v = self.data.get(key, default)
        if kind is not None and v is not None and not isinstance(v, kind):
            raise ConfigError(self.path, f"{self.where}.{key}", f"expected {getattr(kind, '__name__', kind)}")
        return v

    def require(self, key: str, kind=None):
        if key not in self.data:
            raise ConfigError(self.path, f"{self.where}.{key}", "required")
        return self.get(key, kind=kind)

    def file(self, key: str, required: bool = True) -> Path | None:
        v = self.require(key, str) if required else self.get(key, kind=str)
        if v is None:
            return None
        p = Path(v)
        p = p if p.is_absolute() else self.path.parent / p
        if not p.exists():
            raise ConfigError(self.path, f"{self.where}.{key}", f"missing file: {p}")
        return p

    def files(self, key: str) -> list[Path]:
        vals = self.require(key, list)
        if not vals:
            raise ConfigError(self.path, f"{self.where}.{key}", "must not be empty")
        out = []
        for i, v in enumerate(vals):
            if not isinstance(v, str):
                raise ConfigError(self.path, f"{self.where}.{key}[{i}]", "expected a path string")
            p = Path(v) if Path(v).is_absolute() else self.path.parent / v
            if not p.exists():
                raise ConfigError(self.path, f"{self.where}.{key}[{i}]", f"missing file: {p}")
            out.append(p)
        return out

    def dataclass(self, key: str, cls, exclude: tuple[str, ...] = (), **fixed):
        raw = self.get(key, {}, dict)
        fields = {f.name for f in dataclasses.fields(cls)} - set(exclude) - set(fixed)
        unknown = sorted(set(raw) - fields)
        if unknown:
            raise ConfigError(self.path, f"{self.where}.{key}.{unknown[0]}", "unknown key")
        try:
            return cls(**raw, **fixed)
        except (TypeError, ValueError) as err:
            raise ConfigError(self.path, f"{self.where}.{key}", str(err)) from err


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _plain(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _json(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n"


class _Run:
    def __init__(self, out: Path, seed: int):
        self.out, self.seed = out, seed
        out.mkdir(parents=True, exist_ok=True)

    def text(self, rel: str, text: str) -> Path:
        return atomic_write_text(self.out / rel, text)

    def finish(self, command: str, resolved: dict) -> None:
        self.text("resolved_config.json", _json({"command": command, "seed": self.seed, command: resolved}))
        entries = []
        for p in sorted(self.out.rglob("*")):
            if p.is_file() and p.name != "manifest.json" and not p.name.startswith("."):
                data = p.read_bytes()
                entries.append({"path": p.relative_to(self.out).as_posix(), "bytes": len(data),
                                "sha256": hashlib.sha256(data).hexdigest()})
        self.text("manifest.json", _json({"command": command, "files": entries}))


def _slides(paths: list[Path]):
    slides = [load_slide(p) for p in paths]
    ids = [s.slide_id for s in slides]
    if len(set(ids)) != len(ids):
        raise FormatError(f"duplicate slide_id among {', '.join(map(str, paths))}")
    return slides


# ---------------------------------------------------------------- commands

def cmd_synth(b: _Block, run: _Run) -> dict:
    tissue_raw, cohort_raw = b.get("tissue", None, dict), b.get("cohort", None, dict)
    if (tissue_raw is None) == (cohort_raw is None):
        raise ConfigError(b.path, f"{b.where}", "give exactly one of 'tissue' or 'cohort'")
    n_slides = b.get("n_slides", 1, int)
    if cohort_raw is not None:
        cfg = b.dataclass("cohort", CohortConfig, seed=run.seed)
        co = synth_cohort(cfg)
        run.text("cohort.csv", cohort_csv(co.records))
        run.text("truth_risk.csv", csv_text(["subject_id", "latent_risk"],
                                            ((r.subject_id, float(v)) for r, v in zip(co.records, co.latent_risk))))
        for bag in co.bags:
            write_features(run.out / "bags" / f"{bag.slide_id}.he.strm", bag.he)
            write_features(run.out / "bags" / f"{bag.slide_id}.st.strm", bag.st)
        return {"cohort": cfg}
    if n_slides < 1:
        raise ConfigError(b.path, f"{b.where}.n_slides", "must be at least 1")
    base = b.dataclass("tissue", SynthConfig, seed=run.seed)
    written = []
    for i in range(n_slides):
        cfg = base if n_slides == 1 else dataclasses.replace(base, layout_seed=i, slide_id=f"{base.slide_id}_{i}")
        written.append(write_slide(synth_tissue(cfg), run.out / "slides").name)
    return {"tissue": base, "n_slides": n_slides, "slides": written}


def _model_config(b: _Block, slides, union_len: int) -> ModelConfig:
    raw = dict(b.get("model", {}, dict))
    raw.setdefault("feature_dim", slides[0].feature_dim)
    raw.setdefault("n_genes", union_len)
    sub = _Block(raw, b.path, f"{b.where}.model", {f.name for f in dataclasses.fields(ModelConfig)})
    try:
        cfg = ModelConfig(**sub.data)
    except (TypeError, ValueError) as err:
        raise ConfigError(b.path, f"{b.where}.model", str(err)) from err
    if cfg.feature_dim != slides[0].feature_dim:
        raise ConfigError(b.path, f"{b.where}.model.feature_dim",
                          f"slides carry {slides[0].feature_dim}-d features")
    return cfg


def cmd_pretrain(b: _Block, run: _Run) -> dict:
    paths = b.files("slides")
    slides = _slides(paths)
    union, _ = panel_union(PanelRegistry(tuple({d.panel.panel_id: d.panel for d in slides}.values())))
    cfg = _model_config(b, slides, len(union))
    opt = b.dataclass("optimizer", OptimizerConfig)
    train = b.dataclass("train", PretrainConfig, seed=run.seed)
    inputs = prepare_inputs(slides, cfg)
    model = init_model(cfg, run.seed)
    res = pretrain_run(model, inputs, opt, train)
    save_model(run.out / "model", res.model)
    run.text("loss_trace.csv", csv_text(["epoch", "loss"], res.trace))
    run.text("step_losses.csv", csv_text(["step", "loss"], enumerate(res.step_losses)))
    run.text("pretrain_summary.json", _json({"steps": res.steps, "probe_initial": res.probe_initial,
                                             "probe_final": res.probe_final,
                                             "probe_ratio": res.probe_final / res.probe_initial}))
    return {"slides": [str(p) for p in b.data["slides"]], "model": cfg, "optimizer": opt, "train": train}


def _finetune_cfg(b: _Block) -> FinetuneConfig:
    return b.dataclass("head", FinetuneConfig)


def cmd_finetune(b: _Block, run: _Run) -> dict:
    model_dir = b.file("model")
    slides = _slides(b.files("slides"))
    model = load_model(model_dir, drop_decoders=True)
    fcfg = _finetune_cfg(b)
    ids = [s.slide_id for s in slides]
    train_ids = b.get("train_slides", None, list)
    if train_ids is None:
        train_ids, test_ids = split_slides(ids, b.get("train_fraction", 0.8, (int, float)), run.seed)
    else:
        bad = [t for t in train_ids if t not in ids]
        if bad:
            raise ConfigError(b.path, f"{b.where}.train_slides", f"unknown slide_id {bad[0]!r}")
        test_ids = [i for i in ids if i not in train_ids]
    if not test_ids:
        raise ConfigError(b.path, f"{b.where}.train_slides", "no slide left for evaluation")
    top_k = b.get("top_k", [50], list)
    inputs = prepare_inputs(slides, model.config)
    if len(inputs.union) != model.config.n_genes:
        raise ConfigError(b.path, f"{b.where}.slides", "gene panel union does not match the model")
    sl = np.array([ids[i] for i in inputs.slide_of])
    tr = np.flatnonzero(np.isin(sl, train_ids) & inputs.has_st)
    te = np.flatnonzero(np.isin(sl, test_ids) & inputs.has_st)
    names = list(inputs.union.genes)
    if fcfg.genes:
        missing = [g for g in fcfg.genes if g not in names]
        if missing:
            raise ConfigError(b.path, f"{b.where}.head.genes", f"gene {missing[0]!r} not in the panel union")
        cols = np.array([names.index(g) for g in fcfg.genes])
    else:
        cols = np.sort(select_hvg(inputs.st[tr], fcfg.n_hvg))
    genes = [names[c] for c in cols]
    Y = inputs.st[:, cols]
    emb = embed_slides(model, inputs, fcfg.modalities)
    res = finetune_head(model, inputs, Y, tr, fcfg, run.seed, genes, embeddings=emb)
    if res.backbone_digest_before != res.backbone_digest_after:
        raise RuntimeError("backbone weights changed during head fine-tuning")
    save_weights(run.out / "head" / "head.strmw", res.head)
    run.text("head/head_config.json", _json({"finetune": fcfg, "genes": genes, "in_dim": int(emb.shape[1])}))
    run.text("loss_trace.csv", csv_text(["epoch", "loss"], enumerate(res.loss_trace)))
    scores = pcc_genewise(head_forward(emb[te], res.head).data, Y[te], genes)
    run.text("scores.csv", csv_text(["gene", "pcc", "n_spots"],
                                    ((s.gene, "" if s.pcc is None else s.pcc, s.n_spots) for s in scores)))
    rep = benchmark_report(scores, top_k)
    run.text("summary.csv", csv_text(["k", "median_pcc"], ((r["k"], "" if r["median_pcc"] is None else
                                                             r["median_pcc"]) for r in rep)))
    run.text("finetune_summary.json", _json({"train_slides": train_ids, "test_slides": test_ids,
                                             "backbone_digest": res.backbone_digest_after, "report": rep}))
    return {"model": b.data["model"], "slides": b.data["slides"], "train_slides": train_ids, "head": fcfg,
            "top_k": top_k}


def cmd_predict(b: _Block, run: _Run) -> dict:
    model = load_model(b.file("model"), drop_decoders=True)
    head_dir = b.file("head")
    slides = _slides(b.files("slides"))
    meta = json.loads((head_dir / "head_config.json").read_text(encoding="utf-8"))
    fcfg = FinetuneConfig(**meta["finetune"])
    head = {k: Tensor(v) for k, v in load_weights(head_dir / "head.strmw").items()}
    for ds in slides:
        inputs = prepare_inputs([ds], model.config, use_st=ST in fcfg.modalities)
        emb = embed_slides(model, inputs, fcfg.modalities)
        pred = head_forward(emb, head).data
        run.text(f"predictions_{ds.slide_id}.csv", csv_text(["spot_id", *meta["genes"]],
                                                            ([sid, *row] for sid, row in zip(inputs.spot_ids, pred))))
    return {"model": b.data["model"], "head": b.data["head"], "slides": b.data["slides"]}


FEATURE_SOURCES = ("embedding", "expression_pca", "morphology")


def cmd_cluster(b: _Block, run: _Run) -> dict:
    slides = _slides(b.files("slides"))
    source = b.get("features", "embedding", str)
    if source not in FEATURE_SOURCES:
        raise ConfigError(b.path, f"{b.where}.features", f"expected one of {FEATURE_SOURCES}")
    k = b.require("k", int)
    n_init = b.get("n_init", 10, int)
    max_iter = b.get("max_iter", 300, int)
    n_pcs = b.get("n_pcs", 50, int)
    modalities = tuple(b.get("modalities", [HE, ST], list))
    model = load_model(b.file("model"), drop_decoders=True) if source == "embedding" else None
    for ds in slides:
        if source == "embedding":
            X = embed_slides(model, prepare_inputs([ds], model.config), modalities)
        elif source == "expression_pca":
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                X = pca(normalize_expression(ds.counts()), n_pcs)
        else:
            X = ds.features().astype(np.float64)
        if not 1 <= k <= len(X):
            raise ConfigError(b.path, f"{b.where}.k", f"must lie in [1, {len(X)}]")
        res = kmeans(X, k, seed=run.seed, n_init=n_init, max_iter=max_iter)
        run.text(f"clusters_{ds.slide_id}.csv", csv_text(["spot_id", "cluster"], zip(ds.spot_ids, res.labels)))
        write_features(run.out / f"embedding_{ds.slide_id}.strm", X)
    return {"slides": b.data["slides"], "features": source, "k": k, "n_init": n_init, "max_iter": max_iter,
            "n_pcs": n_pcs, "modalities": list(modalities), "model": b.data.get("model")}


def cmd_metrics(b: _Block, run: _Run) -> dict:
    slides = _slides(b.files("slides"))
    cdir = b.file("clusters")
    pas_k = b.get("pas_k", 10, int)
    pas_t = b.get("pas_threshold", 6, int)
    gene_sets = b.get("gene_sets", {}, dict)
    q_cut = b.get("de_q", 0.05, (int, float))
    rows, ora_rows = [], []
    for ds in slides:
        cpath = cdir / f"clusters_{ds.slide_id}.csv"
        header, crow = read_csv(cpath)
        if header != ["spot_id", "cluster"]:
            raise FormatError(f"{cpath}: header must be spot_id,cluster")
        lab = dict((r[0], int(r[1])) for r in crow)
        missing = [s for s in ds.spot_ids if s not in lab]
        if missing:
            raise FormatError(f"{cpath}: no cluster for spot {missing[0]!r}")
        pred = np.array([lab[s] for s in ds.spot_ids])
        X = read_features(cdir / f"embedding_{ds.slide_id}.strm")
        m: dict[str, Any] = {"NMI": "", "ARI": "", "FMI": "", "HOM": "", "COM": ""}
        if ds.has_labels:
            m.update(external_metrics(pred, ds.labels()))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            m.update(spatial_metrics(pred, ds.coords(), X, pas_k, pas_t))
            expr, kept = normalize_expression(ds.counts(), return_kept=True)
        rows.append([ds.slide_id, len(np.unique(pred)), *(m[c] for c in ("NMI", "ARI", "FMI", "HOM", "COM",
                                                                         "CHAOS", "PAS", "ASW"))])
        pk = pred[kept]
        for c in np.unique(pk):
            if (pk == c).all():
                continue
            de = wilcoxon_de(expr[pk == c], expr[pk != c], ds.panel.genes)
            run.text(f"de_{ds.slide_id}_cluster{c}.csv", de.to_csv())
            hits_set = {g for g, q, d in zip(de.genes, de.q, de.direction) if q < q_cut and d == "up"}
            for name in sorted(gene_sets):
                members = set(gene_sets[name]) & set(ds.panel.genes)
                hits = len(members & hits_set)
                p = ora_hypergeom(hits, len(members), len(hits_set), len(ds.panel.genes))
                ora_rows.append([ds.slide_id, c, name, hits, len(members), len(hits_set), len(ds.panel.genes), p])
    run.text("metrics.csv", csv_text(["slide_id", "k", "NMI", "ARI", "FMI", "HOM", "COM", "CHAOS", "PAS", "ASW"],
                                     rows))
    if ora_rows:
        q = bh_adjust([r[-1] for r in ora_rows])
        run.text("ora.csv", csv_text(["slide_id", "cluster", "gene_set", "hits", "set_size", "draw_size",
                                      "universe", "p", "q"], ([*r, qi] for r, qi in zip(ora_rows, q))))
    return {"slides": b.data["slides"], "clusters": b.data["clusters"], "pas_k": pas_k, "pas_threshold": pas_t,
            "gene_sets": gene_sets, "de_q": q_cut}


def _load_bags(bag_dir: Path, slide_ids) -> list[SlideBag]:
    bags = []
    for sid in slide_ids:
        he_p, st_p = bag_dir / f"{sid}.he.strm", bag_dir / f"{sid}.st.strm"
        if not he_p.exists() and not st_p.exists():
            raise FileNotFoundError(f"missing file: {he_p}")
        bags.append(SlideBag(sid, read_features(he_p) if he_p.exists() else None,
                             read_features(st_p) if st_p.exists() else None))
    return bags


def _save_risk_model(directory: Path, model: RiskModel) -> None:
    save_weights(directory / "weights.strmw", model.params)
    atomic_write_text(directory / "risk_config.json", _json({"config": model.config, "in_dims": model.in_dims}))


def _load_risk_model(directory: Path) -> RiskModel:
    meta_path = directory / "risk_config.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"missing file: {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    params = {k: Tensor(v, True) for k, v in load_weights(directory / "weights.strmw").items()}
    return RiskModel(RiskConfig(**meta["config"]), params, meta["in_dims"])


def cmd_survival(b: _Block, run: _Run) -> dict:
    records = read_cohort(b.file("cohort"))
    bag_dir = b.file("bags")
    rcfg = b.dataclass("model", RiskConfig)
    fr_train = b.get("train_fraction", 0.6, (int, float))
    fr_val = b.get("val_fraction", 0.2, (int, float))
    if not (0 < fr_train and 0 < fr_val and fr_train + fr_val < 1):
        raise ConfigError(b.path, f"{b.where}.train_fraction", "train and validation fractions must leave a test set")
    n_boot = b.get("n_boot", 1000, int)
    covs = b.get("covariates", [], list)
    for c in covs:
        if any(c not in r.covariates for r in records):
            raise ConfigError(b.path, f"{b.where}.covariates", f"cohort lacks covariate {c!r}")
    bags = _load_bags(bag_dir, [r.slide_id for r in records])
    t = np.array([r.time for r in records])
    e = np.array([r.event for r in records])
    n = len(records)
    order = rng_for(run.seed, "split").permutation(n)
    n_tr, n_va = int(round(fr_train * n)), int(round(fr_val * n))
    split = np.empty(n, dtype=object)
    split[order[:n_tr]], split[order[n_tr:n_tr + n_va]], split[order[n_tr + n_va:]] = "train", "val", "test"
    tr = np.flatnonzero(split == "train")
    res = train_risk_model([bags[i] for i in tr], t[tr], e[tr], rcfg, run.seed)
    _save_risk_model(run.out / "risk_model", res.model)
    run.text("loss_trace.csv", csv_text(["epoch", "loss"], res.trace))
    risk = predict_risk(res.model, bags)
    run.text("risk.csv", csv_text(["subject_id", "slide_id", "split", "risk"],
                                  ((r.subject_id, r.slide_id, s, float(v)) for r, s, v in zip(records, split, risk))))
    crow = []
    for name in ("train", "val", "test"):
        idx = np.flatnonzero(split == name)
        try:
            ci = c_index(risk[idx], t[idx], e[idx])
            bs = bootstrap_ci(lambda s, tt, ee: c_index(s, tt, ee), (risk[idx], t[idx], e[idx]), n_boot, run.seed)
            crow.append([name, len(idx), ci, bs.mean, bs.sd, bs.lower, bs.upper])
        except (ValueError, RuntimeError):
            crow.append([name, len(idx), "", "", "", "", ""])
    run.text("cindex.csv", csv_text(["split", "n", "c_index", "boot_mean", "boot_sd", "ci_lower", "ci_upper"], crow))
    va, te = np.flatnonzero(split == "val"), np.flatnonzero(split == "test")
    strat = stratify_median(risk[va], risk[te], t[te], e[te])
    km = ""
    for g, curve in (("high", strat.km_high), ("low", strat.km_low)):
        if curve is not None:
            body = curve.to_csv(g)
            km += body if not km else body.split("\n", 1)[1]
    run.text("km.csv", km or "group,time,survival,at_risk,events\n")
    lr = strat.logrank
    run.text("stratification.csv", csv_text(["cutoff", "n_high", "n_low", "logrank_stat", "logrank_p", "flag"], [[
        strat.cutoff, len(strat.high), len(strat.low), "" if lr is None else lr.statistic,
        "" if lr is None else lr.p, strat.flag]]))
    if len(strat.high) and len(strat.low) and e[te].sum():
        high = np.zeros(len(te))
        high[np.isin(np.arange(len(te)), strat.high)] = 1.0
        X = np.column_stack([high] + [[records[i].covariates[c] for i in te] for c in covs])
        try:
            fit = cox_fit(X, t[te], e[te], ["risk_high", *covs])
            run.text("cox.csv", fit.to_csv())
        except (CoxFitError, ValueError) as err:  # reported, not fatal: small test cohorts can be degenerate
            run.text("cox.csv", csv_text(["term", "beta", "HR", "se", "p"], []) + f"# not estimable: {err}\n")
    return {"cohort": b.data["cohort"], "bags": b.data["bags"], "model": rcfg, "train_fraction": fr_train,
            "val_fraction": fr_val, "n_boot": n_boot, "covariates": covs}


def cmd_attribute(b: _Block, run: _Run) -> dict:
    model = _load_risk_model(b.file("risk_model"))
    bag_dir = b.file("bags")
    steps = b.get("steps", 128, int)
    ids = b.get("slides", None, list)
    if ids is None:
        ids = sorted({p.name.split(".")[0] for p in bag_dir.glob("*.strm")})
    rows = []
    for bag in _load_bags(bag_dir, ids):
        amap = attribute_bag(model, bag, steps)
        run.text(f"attribution/{bag.slide_id}.csv", amap.to_csv())
        rows.append([bag.slide_id, amap.f_x, amap.f_baseline, amap.residual, amap.relative_residual])
    run.text("attribution_summary.csv", csv_text(["slide_id", "risk", "baseline_risk", "residual",
                                                  "relative_residual"], rows))
    return {"risk_model": b.data["risk_model"], "bags": b.data["bags"], "steps": steps, "slides": ids}


_HANDLERS = {
    "synth": (cmd_synth, {"tissue", "cohort", "n_slides"}),
    "pretrain": (cmd_pretrain, {"slides", "model", "optimizer", "train"}),
    "finetune": (cmd_finetune, {"model", "slides", "train_slides", "train_fraction", "head", "top_k"}),
    "predict": (cmd_predict, {"model", "head", "slides"}),
    "cluster": (cmd_cluster, {"slides", "model", "features", "k", "n_init", "max_iter", "n_pcs", "modalities"}),
    "metrics": (cmd_metrics, {"slides", "clusters", "pas_k", "pas_threshold", "gene_sets", "de_q"}),
    "survival": (cmd_survival, {"cohort", "bags", "model", "train_fraction", "val_fraction", "n_boot",
                                "covariates"}),
    "attribute": (cmd_attribute, {"risk_model", "bags", "steps", "slides"}),
}


EPILOGS = {
    "metrics": """metric conventions:
  NMI      mutual information over the arithmetic mean of the two entropies;
           0 when either labeling has a single class (0/0 -> 0)
  HOM/COM  homogeneity 1 - H(C|K)/H(C), completeness 1 - H(K|C)/H(K); a
           single-class truth gives HOM 0 (0/0 -> 0), a single predicted
           cluster gives COM 1 (0/0 -> 1)
  ARI      exact integer pair counts; both labelings constant gives 1
  FMI      TP / sqrt((TP+FP)(TP+FN)); 0 when no pair shares both labels
  CHAOS    mean within-cluster nearest-neighbour distance divided by the
           mean nearest-neighbour distance over all spots; singleton
           clusters are skipped with a warning
  PAS      fraction of spots whose k nearest neighbours (ties by spot index)
           hold at least pas_threshold labels different from their own
  ASW      mean silhouette on the embedding, in [-1, 1]; members of
           singleton clusters score 0
  DE       each cluster against the rest, two-sided rank-sum test with
           midranks: exact permutation null when the smaller group has at
           most 8 members (p = twice the smaller tail, capped at 1), else the
           tie-corrected normal approximation with continuity correction;
           Benjamini-Hochberg q within each comparison
  ORA      hypergeometric upper tail P(X >= hits); BH over all tests
""",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spatialmome", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=f"run the {name} pipeline", epilog=EPILOGS.get(name),
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", required=True, help="JSON config with a top-level '%s' block" % name)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
        sp.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    return parser


def run_command(command: str, config_path: Path, out: Path, seed: int | None = None) -> None:
    if not config_path.exists():
        raise FileNotFoundError(f"missing file: {config_path}")
    try:
        cfg = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigError(config_path, "<root>", f"invalid JSON ({err})") from err
    other = [c for c in COMMANDS if c != command and isinstance(cfg, dict) and c in cfg]
    if other and command not in cfg:
        raise ConfigError(config_path, other[0], f"config holds a {other[0]!r} block, not {command!r}")
    top = _Block(cfg, config_path, "<root>", {"seed", "command", command})
    if top.get("command", command) != command:
        raise ConfigError(config_path, "command", f"config is for {top.data['command']!r}, not {command!r}")
    master = seed if seed is not None else top.get("seed", 0, int)
    handler, allowed = _HANDLERS[command]
    block = _Block(top.require(command), config_path, command, allowed)
    run = _Run(out, int(master))
    resolved = handler(block, run)
    run.finish(command, resolved)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads < 1:
        parser.print_usage(sys.stderr)
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(args.threads):
            run_command(args.command, Path(args.config), Path(args.out), args.seed)
    except (ConfigError, FormatError, FileNotFoundError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
