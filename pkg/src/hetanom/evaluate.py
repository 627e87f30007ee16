"""Evaluation harness: exact rank AUC, train/test protocols, baselines.

The two same-domain protocols differ only in how the training anomalies
are drawn: the general protocol samples them from every anomaly class,
the hard protocol from a single class so that all other classes are
unseen at training time. The cross-domain protocol trains on a source
dataset and fine-tunes on the target's normals only.
"""

from __future__ import annotations

import io
import csv as _csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .data import ANOMALY, FeatureDataset, SplitSpec, stratified_split
from .errors import ConfigurationError, ContractError, ShapeError, UndefinedMetricError
from .nets import ScorerNet
from .partition import FEW_SHOT, ONE_SHOT, build_distributions, kmeans
from .seeding import derive_seed, rng_for
from .train import (
    WEIGHTS_ACCURACY,
    FitResult,
    TrainConfig,
    fit,
    train_scorer,
)

#: the repo's fixed evaluation seeds
BENCHMARK_SEEDS = tuple(range(10))

VARIANTS = ("AHL", "HADG_only", "RamHADG", "RamFULL", "CDL_minus", "Homogeneous")
_VARIANT_LOOKUP = {v.lower().replace("_", "").replace("-", ""): v for v in VARIANTS}


def canonical_variant(name: str) -> str:
    key = name.lower().replace("_", "").replace("-", "")
    if key not in _VARIANT_LOOKUP:
        raise ConfigurationError(f"unknown variant {name!r}; known: {', '.join(VARIANTS)}")
    return _VARIANT_LOOKUP[key]


def auc(scores, labels) -> float:
    """P(anomaly scored above normal) with half credit for ties.

    Computed from doubled midranks so the arithmetic is exact integer
    work until the final division.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pos = labels == ANOMALY
    m = int(pos.sum())
    n_neg = int(len(labels) - m)
    if m == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    order = np.argsort(scores, kind="stable")
    s_sorted = scores[order]
    ranks2 = np.empty(len(scores), dtype=np.int64)  # doubled 1-based midrank
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        ranks2[order[i : j + 1]] = (i + 1) + (j + 1)
        i = j + 1
    sum_pos2 = int(ranks2[pos].sum())
    return (sum_pos2 - m * (m + 1)) / (2 * m * n_neg)


@dataclass(frozen=True)
class ProtocolSpec:
    kind: str  # general | hard | cross_domain
    m_anomalies: int = 10
    seen_class: str | None = None
    seeds: tuple[int, ...] = BENCHMARK_SEEDS
    fine_tune_epochs: int = 10
    train_fraction: float = 0.75

    def validate(self, prefix: str = "") -> None:
        def bad(name, msg):
            raise ConfigurationError(f"{prefix}{name}: {msg}")

        if self.kind not in ("general", "hard", "cross_domain"):
            bad("kind", "must be 'general', 'hard' or 'cross_domain'")
        if self.m_anomalies < 1:
            bad("m_anomalies", "must be >= 1")
        if self.kind == "hard" and not self.seen_class:
            bad("seen_class", "required for the hard protocol")
        if not self.seeds:
            bad("seeds", "must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            bad("seeds", "must be distinct")
        if self.fine_tune_epochs < 0:
            bad("fine_tune_epochs", "must be >= 0")
        if not (0.0 < self.train_fraction < 1.0):
            bad("train_fraction", "must lie in (0, 1)")


@dataclass(frozen=True)
class SeedResult:
    seed: int
    auc_overall: float
    auc_seen: float | None
    auc_unseen: float | None
    auc_unseen_macro: float | None
    seen_classes: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "auc_overall": self.auc_overall,
            "auc_seen": self.auc_seen,
            "auc_unseen": self.auc_unseen,
            "auc_unseen_macro": self.auc_unseen_macro,
            "seen_classes": list(self.seen_classes),
        }


@dataclass(frozen=True)
class EvalResult:
    variant: str
    kind: str
    per_seed: tuple[SeedResult, ...]

    def mean_std(self, metric: str) -> tuple[float, float] | None:
        values = [getattr(r, metric) for r in self.per_seed if getattr(r, metric) is not None]
        if not values:
            return None
        arr = np.asarray(values, dtype=np.float64)
        return float(arr.mean()), float(arr.std())

    def to_dict(self) -> dict:
        aggregate = {}
        for metric in ("auc_overall", "auc_seen", "auc_unseen", "auc_unseen_macro"):
            ms = self.mean_std(metric)
            aggregate[metric] = None if ms is None else {"mean": ms[0], "std": ms[1]}
        return {
            "variant": self.variant,
            "kind": self.kind,
            "per_seed": [r.to_dict() for r in self.per_seed],
            "aggregate": aggregate,
        }


@dataclass
class VariantModel:
    """A trained variant: one unified scorer or an ensemble of bases."""

    name: str
    nets: list[ScorerNet]
    exposure_ids: frozenset[str]
    fit_result: FitResult | None = None

    def scores(self, X: np.ndarray) -> np.ndarray:
        if len(self.nets) == 1:
            return self.nets[0].forward(X)
        return np.mean([net.forward(X) for net in self.nets], axis=0)


def run_variant(name: str, ds: FeatureDataset, cfg: TrainConfig) -> VariantModel:
    """Train one variant on ``ds``; the returned model records every sample
    id its training structures touched, for leakage audits."""
    name = canonical_variant(name)
    cfg.validate()
    if name == "AHL":
        res = fit(ds, cfg)
        return VariantModel(name, [res.unified], res.training_sample_ids(), res)
    if name == "CDL_minus":
        res = fit(ds, replace(cfg, weight_mode=WEIGHTS_ACCURACY))
        return VariantModel(name, [res.unified], res.training_sample_ids(), res)
    if name == "Homogeneous":
        net = ScorerNet.init(ds.dim, cfg.hidden, rng_for(cfg.seed, "plain-init", 0))
        net = train_scorer(net, ds.features, ds.labels, cfg, cfg.epochs,
                           seed=derive_seed(cfg.seed, "plain", 0))
        return VariantModel(name, [net], frozenset(ds.ids))
    if name == "RamFULL":
        nets = []
        for i in range(cfg.T):
            net = ScorerNet.init(ds.dim, cfg.hidden, rng_for(cfg.seed, "plain-init", i))
            nets.append(train_scorer(net, ds.features, ds.labels, cfg, cfg.epochs,
                                     seed=derive_seed(cfg.seed, "plain", i)))
        return VariantModel(name, nets, frozenset(ds.ids))
    if name == "RamHADG":
        nets = []
        exposed: set[str] = set()
        normal_rows = ds.normal_rows()
        anomaly_rows = ds.anomaly_rows()
        for i in range(cfg.T):
            rng = rng_for(cfg.seed, "random-subset", i)
            n_sel = rng.permutation(normal_rows)[: max(1, len(normal_rows) // 2)]
            a_sel = rng.permutation(anomaly_rows)[: max(1, len(anomaly_rows) // 2)]
            rows = np.sort(np.concatenate([n_sel, a_sel]))
            exposed.update(ds.ids[int(r)] for r in rows)
            net = ScorerNet.init(ds.dim, cfg.hidden, rng_for(cfg.seed, "plain-init", i))
            nets.append(train_scorer(net, ds.features[rows], ds.labels[rows], cfg,
                                     cfg.epochs, seed=derive_seed(cfg.seed, "plain", i)))
        return VariantModel(name, nets, frozenset(exposed))
    # HADG_only: the structured subsets, but each base trains independently
    # and inference averages the base scores (no unified model)
    clusters = kmeans(ds, cfg.C, seed=derive_seed(cfg.seed, "clusters"))
    mode = cfg.subset_mode or (ONE_SHOT if ds.n_anomaly == 1 else FEW_SHOT)
    collection = build_distributions(
        ds, clusters, cfg.T, mode=mode, strict_openness=cfg.strict_openness,
        seed=derive_seed(cfg.seed, "subsets"), pseudo_per_subset=cfg.pseudo_per_subset,
    )
    table = collection.training_table()
    nets = []
    for i in range(cfg.T):
        rows = table.support_rows[i]
        net = ScorerNet.init(ds.dim, cfg.hidden, rng_for(cfg.seed, "plain-init", i))
        nets.append(train_scorer(net, table.X[rows], table.y[rows], cfg, cfg.epochs,
                                 seed=derive_seed(cfg.seed, "plain", i)))
    return VariantModel(name, nets, frozenset(table.ids))


def _protocol_split(ds: FeatureDataset, spec: ProtocolSpec, seed: int):
    """Per-seed train/test construction: normals split by train_fraction,
    M training anomalies per the protocol, every other anomaly to test."""
    normals = ds.take(ds.normal_rows())
    norm_train, norm_test = stratified_split(
        normals, SplitSpec(seed=derive_seed(seed, "normal-split"),
                           fractions=(spec.train_fraction, 1.0 - spec.train_fraction)),
    )
    anomaly_rows = ds.anomaly_rows()
    if spec.kind == "hard":
        pool = np.array([r for r in anomaly_rows if ds.class_tags[r] == spec.seen_class],
                        dtype=np.int64)
        if pool.size == 0:
            raise ConfigurationError(f"seen_class: {spec.seen_class!r} not present in dataset")
    else:
        pool = anomaly_rows
    if spec.m_anomalies > pool.size:
        raise ConfigurationError(
            f"m_anomalies: {spec.m_anomalies} exceeds the {pool.size} available anomalies")
    picked = np.sort(rng_for(seed, "anomaly-pick").choice(pool, size=spec.m_anomalies,
                                                          replace=False))
    picked_set = set(picked.tolist())
    rest = np.array([r for r in anomaly_rows if int(r) not in picked_set], dtype=np.int64)

    train_rows = np.sort(np.concatenate(
        [np.array([ds.row_of(s) for s in norm_train.ids], dtype=np.int64), picked]))
    test_rows = np.sort(np.concatenate(
        [np.array([ds.row_of(s) for s in norm_test.ids], dtype=np.int64), rest]))
    seen_classes = tuple(sorted({ds.class_tags[int(r)] for r in picked}))
    return ds.take(train_rows), ds.take(test_rows), seen_classes


def _score_test(model: VariantModel, test_ds: FeatureDataset, seed: int,
                seen_classes) -> SeedResult:
    test_ids = set(test_ds.ids)
    leaked = test_ids & model.exposure_ids
    if leaked:
        raise ContractError(f"test samples leaked into training: {sorted(leaked)[:5]}")
    scores = model.scores(test_ds.features)
    labels = test_ds.labels
    overall = auc(scores, labels)

    normal_mask = labels == 0
    seen_mask = (labels == 1) & np.array([t in seen_classes for t in test_ds.class_tags])
    unseen_mask = (labels == 1) & ~seen_mask

    def _masked_auc(anomaly_mask):
        if not anomaly_mask.any():
            return None
        keep = normal_mask | anomaly_mask
        return auc(scores[keep], labels[keep])

    auc_seen = _masked_auc(seen_mask)
    auc_unseen = _masked_auc(unseen_mask)
    macro = None
    if unseen_mask.any():
        per_class = []
        for tag in sorted({t for t, u in zip(test_ds.class_tags, unseen_mask) if u}):
            cls_mask = unseen_mask & np.array([t == tag for t in test_ds.class_tags])
            per_class.append(_masked_auc(cls_mask))
        macro = float(np.mean(per_class))
    return SeedResult(seed=seed, auc_overall=overall, auc_seen=auc_seen,
                      auc_unseen=auc_unseen, auc_unseen_macro=macro,
                      seen_classes=tuple(seen_classes))


def run_protocol(ds: FeatureDataset, spec: ProtocolSpec, cfg: TrainConfig,
                 variant: str = "AHL", threads: int = 1,
                 model_sink=None) -> EvalResult:
    """Run one variant across the protocol's seeds and aggregate the AUCs.

    ``model_sink(seed, model)`` is invoked with each trained model (for
    persisting logs and checkpoints). Seeds may run in parallel;
    aggregation is by ascending seed.
    """
    spec.validate()
    if spec.kind == "cross_domain":
        raise ConfigurationError("kind: use run_cross_domain for cross_domain specs")
    variant = canonical_variant(variant)

    def one_seed(seed: int) -> SeedResult:
        root = derive_seed(cfg.seed, "protocol", seed)
        train_ds, test_ds, seen_classes = _protocol_split(ds, spec, root)
        seeded_cfg = replace(cfg, seed=derive_seed(root, "fit"))
        model = run_variant(variant, train_ds, seeded_cfg)
        if model_sink is not None:
            model_sink(seed, model)
        return _score_test(model, test_ds, seed, seen_classes)

    seeds = sorted(spec.seeds)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one_seed, seeds))
    else:
        results = [one_seed(s) for s in seeds]
    return EvalResult(variant=variant, kind=spec.kind, per_seed=tuple(results))


def run_cross_domain(source: FeatureDataset, target: FeatureDataset,
                     cfg: TrainConfig, spec: ProtocolSpec | None = None,
                     threads: int = 1) -> EvalResult:
    """Fit on the source domain, fine-tune on target normals only, then
    evaluate on the target test split (all target anomalies are unseen)."""
    if source.dim != target.dim:
        raise ShapeError(f"source dim {source.dim} != target dim {target.dim}")
    spec = spec or ProtocolSpec(kind="cross_domain")
    if spec.kind != "cross_domain":
        raise ConfigurationError("kind: run_cross_domain needs a cross_domain spec")
    spec.validate()

    def one_seed(seed: int) -> SeedResult:
        root = derive_seed(cfg.seed, "protocol", seed)
        src_spec = replace(spec, kind="general")
        src_train, _, _ = _protocol_split(source, src_spec, root)
        res = fit(src_train, replace(cfg, seed=derive_seed(root, "fit")))

        tgt_normals = target.take(target.normal_rows())
        tgt_train, tgt_test_norm = stratified_split(
            tgt_normals, SplitSpec(seed=derive_seed(root, "target-split"),
                                   fractions=(spec.train_fraction, 1.0 - spec.train_fraction)))
        net = res.unified
        if spec.fine_tune_epochs > 0:
            net = train_scorer(net, tgt_train.features,
                               np.zeros(len(tgt_train.ids), dtype=np.int64),
                               cfg, spec.fine_tune_epochs,
                               seed=derive_seed(root, "fine-tune"))
        test_rows = np.sort(np.concatenate(
            [np.array([target.row_of(s) for s in tgt_test_norm.ids], dtype=np.int64),
             target.anomaly_rows()]))
        test_ds = target.take(test_rows)
        # leakage is audited within the target namespace: only the
        # fine-tuning normals could overlap the target test set
        model = VariantModel("AHL", [net], frozenset(tgt_train.ids))
        return _score_test(model, test_ds, seed, seen_classes=())

    seeds = sorted(spec.seeds)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one_seed, seeds))
    else:
        results = [one_seed(s) for s in seeds]
    return EvalResult(variant="AHL", kind="cross_domain", per_seed=tuple(results))


def sweep(param: str, values, ds: FeatureDataset, spec: ProtocolSpec,
          cfg: TrainConfig, variant: str = "AHL", threads: int = 1):
    """One protocol run per hyperparameter value; returns [(value, EvalResult)].

    Sweeping the history length K raises the warmup so buffers still fill
    before first use.
    """
    if param not in ("C", "K"):
        raise ConfigurationError(f"param: can only sweep C or K, not {param!r}")
    if not values:
        raise ConfigurationError("values: must be non-empty")
    out = []
    for value in values:
        if param == "C":
            swept = replace(cfg, C=int(value))
        else:
            swept = replace(cfg, K=int(value),
                            warmup_epochs=max(cfg.warmup_epochs, int(value)))
        out.append((value, run_protocol(ds, spec, swept, variant, threads=threads)))
    return out


def sweep_csv(param: str, entries) -> str:
    """Plot-data CSV: one row per swept value with mean/std AUC columns."""
    buf = io.StringIO()
    writer = _csv.writer(buf)
    writer.writerow([
        "param", "value",
        "auc_overall_mean", "auc_overall_std",
        "auc_seen_mean", "auc_seen_std",
        "auc_unseen_mean", "auc_unseen_std",
    ])
    for value, result in entries:
        row = [param, value]
        for metric in ("auc_overall", "auc_seen", "auc_unseen"):
            ms = result.mean_std(metric)
            row.extend(["", ""] if ms is None else [repr(ms[0]), repr(ms[1])])
        writer.writerow(row)
    return buf.getvalue()


def results_csv(results) -> str:
    """One row per (variant, seed) with the three AUC columns."""
    buf = io.StringIO()
    writer = _csv.writer(buf)
    writer.writerow(["variant", "kind", "seed", "auc_overall", "auc_seen", "auc_unseen"])
    for result in results:
        for r in result.per_seed:
            writer.writerow([
                result.variant, result.kind, r.seed,
                repr(r.auc_overall),
                "" if r.auc_seen is None else repr(r.auc_seen),
                "" if r.auc_unseen is None else repr(r.auc_unseen),
            ])
    return buf.getvalue()
