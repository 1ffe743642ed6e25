"""ROC statistics and the 10-fold cross-validation experiment driver.

ROC curves sweep the distinct score values (inclusive rule: predict positive
at score >= threshold) plus one sentinel above the maximum, so a vote
likelihood with parameter k yields at most k+2 curve points.  AUC is the
trapezoidal integral over (fpr, tpr), which equals the Mann-Whitney pair
statistic with half credit for ties.  The operating threshold maximizes
Youden's index, sensitivity + specificity - 1.

The driver holds one fold out as the query set and searches the remaining
nine folds.  For the encoded pipeline the compressor is trained on each
fold's archive side only; the fold worker is handed the archive slice and
nothing else, so validation vectors cannot leak into encoder training.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datamodel import (DatasetManifest, FeatureConfig, FeatureMatrix, assign_folds,
                        derive_seed)
from .encoder import EncoderPipelineConfig, pca_fit, pca_project, train_encoder_pipeline
from .errors import ValidationError
from .search import build_index, knn_batch

PIPELINE_CONFIGS = ("c1", "c2", "c3", "autothorax")
_PIPELINE_STORE = {"c1": FeatureConfig.C1, "c2": FeatureConfig.C2,
                   "c3": FeatureConfig.C3, "autothorax": FeatureConfig.C3}

REPORT_VERSION = 1


# ---------------------------------------------------------------------------
# ROC / Youden / confusion

@dataclass(frozen=True)
class RocPoint:
    threshold: float
    sensitivity: float
    specificity: float

    @property
    def fpr(self) -> float:
        return 1.0 - self.specificity

    @property
    def youden(self) -> float:
        return self.sensitivity + self.specificity - 1.0


@dataclass(frozen=True)
class RocCurve:
    points: tuple[RocPoint, ...]
    auc: float = field(init=False)
    youden_argmax: int = field(init=False)

    def __post_init__(self):
        pts = tuple(self.points)
        if not pts:
            raise ValidationError("ROC curve needs at least one point")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "auc", _trapezoid_auc(pts))
        object.__setattr__(self, "youden_argmax", _youden_argmax(pts))


def _trapezoid_auc(points) -> float:
    auc = 0.0
    for a, b in zip(points, points[1:]):
        auc += 0.5 * (a.sensitivity + b.sensitivity) * (b.fpr - a.fpr)
    return auc


def _youden_argmax(points) -> int:
    best = 0
    for i, p in enumerate(points):
        q = points[best]
        # Maximize J; break ties by higher sensitivity, then lower threshold.
        if (p.youden, p.sensitivity, -p.threshold) > (q.youden, q.sensitivity, -q.threshold):
            best = i
    return best


def roc(scores, labels) -> RocCurve:
    """ROC over raw scores; requires both classes to be present."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or s.shape != y.shape:
        raise ValidationError("scores and labels must be aligned 1-D sequences")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("ROC needs at least one positive and one negative label")

    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    pos_sorted = (y[order] == 1).astype(np.int64)
    cum_pos = np.cumsum(pos_sorted)
    cum_neg = np.cumsum(1 - pos_sorted)
    # Last position of each run of equal scores = one threshold point.
    boundary = np.flatnonzero(np.append(s_sorted[1:] != s_sorted[:-1], True))

    points = [RocPoint(threshold=float(s_sorted[0] + 1.0), sensitivity=0.0, specificity=1.0)]
    for e in boundary:
        points.append(RocPoint(threshold=float(s_sorted[e]),
                               sensitivity=float(cum_pos[e] / n_pos),
                               specificity=float((n_neg - cum_neg[e]) / n_neg)))
    return RocCurve(points=tuple(points))


def youden(curve: RocCurve) -> tuple[float, float, float]:
    """(threshold, sensitivity, specificity) at the maximum of sens + spec - 1."""
    p = curve.points[curve.youden_argmax]
    return p.threshold, p.sensitivity, p.specificity


def confusion(scores, labels, threshold: float) -> tuple[int, int, int, int]:
    """(TP, FP, TN, FN) under the inclusive rule: positive iff score >= threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValidationError("scores and labels must be aligned")
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = int(np.sum(~pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    return tp, fp, tn, fn


# ---------------------------------------------------------------------------
# published reference results (10-fold averages, percent) for side-by-side
# display in reports; desk-scale runs cannot reproduce them.

REFERENCE_NOTE = ("published 10-fold averages from the large-scale study on three "
                  "public chest X-ray archives; annotations only, not desk-scale targets")

def _ref(mode, method, k, sens, spec, auc):
    return {"dataset_mode": mode, "method": method, "k": k,
            "sensitivity": sens, "specificity": spec, "auc": auc}

REFERENCE_RESULTS = (
    # semi-automated archive (pneumothorax vs. no finding)
    _ref("semi_automated", "chexnet_classifier", None, 86, 76, 88),
    _ref("semi_automated", "autothorax", 1001, 86, 84, 92),
    _ref("semi_automated", "autothorax", 501, 86, 83, 92),
    _ref("semi_automated", "autothorax", 251, 84, 85, 92),
    _ref("semi_automated", "autothorax", 101, 85, 84, 92),
    _ref("semi_automated", "autothorax", 51, 85, 84, 92),
    _ref("semi_automated", "autothorax", 11, 81, 86, 90),
    _ref("semi_automated", "c3", 1001, 85, 74, 88),
    _ref("semi_automated", "c3", 501, 84, 76, 88),
    _ref("semi_automated", "c3", 251, 81, 79, 89),
    _ref("semi_automated", "c3", 101, 84, 78, 89),
    _ref("semi_automated", "c3", 51, 86, 77, 89),
    _ref("semi_automated", "c3", 11, 83, 80, 88),
    _ref("semi_automated", "c2", 1001, 86, 70, 87),
    _ref("semi_automated", "c2", 501, 85, 73, 88),
    _ref("semi_automated", "c2", 251, 84, 75, 88),
    _ref("semi_automated", "c2", 101, 84, 77, 88),
    _ref("semi_automated", "c2", 51, 79, 81, 88),
    _ref("semi_automated", "c2", 11, 80, 81, 87),
    _ref("semi_automated", "c1", 1001, 80, 78, 88),
    _ref("semi_automated", "c1", 501, 81, 78, 88),
    _ref("semi_automated", "c1", 251, 80, 80, 89),
    _ref("semi_automated", "c1", 101, 81, 80, 89),
    _ref("semi_automated", "c1", 51, 83, 80, 89),
    _ref("semi_automated", "c1", 11, 86, 76, 88),
    # fully-automated archive (pneumothorax vs. everything else)
    _ref("fully_automated", "chexnet_classifier", None, 72, 67, 77),
    _ref("fully_automated", "autothorax", 1001, 73, 75, 82),
    _ref("fully_automated", "autothorax", 501, 73, 75, 82),
    _ref("fully_automated", "autothorax", 251, 72, 75, 82),
    _ref("fully_automated", "autothorax", 101, 69, 78, 81),
    _ref("fully_automated", "autothorax", 51, 70, 75, 80),
    _ref("fully_automated", "autothorax", 11, 72, 67, 74),
    _ref("fully_automated", "c3", 1001, 72, 63, 75),
    _ref("fully_automated", "c3", 501, 70, 67, 76),
    _ref("fully_automated", "c3", 251, 71, 67, 76),
    _ref("fully_automated", "c3", 101, 74, 65, 77),
    _ref("fully_automated", "c3", 51, 65, 74, 76),
    _ref("fully_automated", "c3", 11, 72, 65, 72),
    _ref("fully_automated", "c2", 1001, 67, 66, 74),
    _ref("fully_automated", "c2", 501, 64, 70, 75),
    _ref("fully_automated", "c2", 251, 74, 61, 75),
    _ref("fully_automated", "c2", 101, 70, 66, 75),
    _ref("fully_automated", "c2", 51, 73, 63, 75),
    _ref("fully_automated", "c2", 11, 68, 66, 70),
    # rows published at width 1024 describe the whole-image configuration
    _ref("fully_automated", "c1", 1001, 73, 61, 74),
    _ref("fully_automated", "c1", 501, 67, 68, 75),
    _ref("fully_automated", "c1", 251, 67, 69, 75),
    _ref("fully_automated", "c1", 101, 70, 65, 75),
    _ref("fully_automated", "c1", 51, 67, 68, 74),
    _ref("fully_automated", "c1", 11, 71, 60, 69),
    # 256-wide PCA compression of the fused features, same protocol
    _ref("fully_automated", "pca_256", 11, None, None, 72),
    _ref("fully_automated", "pca_256", 51, None, None, 76),
)


def reference_rows(dataset_mode: str) -> list[dict]:
    return [dict(r) for r in REFERENCE_RESULTS if r["dataset_mode"] == dataset_mode]


# ---------------------------------------------------------------------------
# cross-validation driver

@dataclass(frozen=True)
class FoldReport:
    fold: int
    k: int
    threshold: float
    sensitivity: float  # percent
    specificity: float  # percent
    auc: float          # percent
    tp: int
    fp: int
    tn: int
    fn: int
    roc: RocCurve


@dataclass(frozen=True)
class KSummary:
    k: int
    sensitivity_mean: float
    sensitivity_std: float
    specificity_mean: float
    specificity_std: float
    auc_mean: float
    auc_std: float
    pooled_auc: float
    pooled_sensitivity: float
    pooled_specificity: float


@dataclass(frozen=True)
class ExperimentReport:
    dataset_mode: str
    pipeline: str       # c1 | c2 | c3 | autothorax
    reducer: str | None  # autoencoder | pca (autothorax only)
    extractor_id: str
    k_list: tuple[int, ...]
    folds: int
    seed: int
    threshold_source: str
    fold_reports: tuple[FoldReport, ...]
    summaries: tuple[KSummary, ...]
    reference: tuple[dict, ...]
    run_config: dict
    version: int = REPORT_VERSION


def _likelihoods(neighbor_sets, k: int) -> np.ndarray:
    out = np.empty(len(neighbor_sets), dtype=np.float64)
    for i, ns in enumerate(neighbor_sets):
        labels = [label for _, _, label in ns.hits[:k]]
        out[i] = sum(labels) / len(labels)
    return out


def _fold_worker(fold, manifest, features, pipeline, k_list, seed, encoder_cfg,
                 reducer, encoder_loader, threshold_source):
    row_of = {rid: i for i, rid in enumerate(features.ids)}
    val_recs = [r for r in manifest.records if r.fold == fold]
    arch_recs = [r for r in manifest.records if r.fold != fold]
    ids_v = [r.id for r in val_recs]
    ids_a = [r.id for r in arch_recs]
    Xv = features.matrix[[row_of[i] for i in ids_v]]
    Xa = features.matrix[[row_of[i] for i in ids_a]]
    yv = np.array([r.label for r in val_recs], dtype=np.int8)
    ya = np.array([r.label for r in arch_recs], dtype=np.int8)

    if pipeline == "autothorax":
        fold_seed = derive_seed(seed, "encoder", fold)
        if encoder_loader is not None:
            enc = encoder_loader(fold)
            Za, Zv = enc.encode(Xa), enc.encode(Xv)
        elif reducer == "pca":
            model = pca_fit(Xa, k=encoder_cfg.bottleneck, seed=fold_seed)
            Za = pca_project(model, Xa).astype(np.float32)
            Zv = pca_project(model, Xv).astype(np.float32)
        else:
            enc, _, _ = train_encoder_pipeline(encoder_cfg, Xa, ya, fold_seed)
            Za, Zv = enc.encode(Xa), enc.encode(Xv)
        arch_matrix, val_matrix = Za, Zv
        index_config = FeatureConfig.ENCODED if Za.shape[1] == 256 else features.config
    else:
        arch_matrix, val_matrix = Xa, Xv
        index_config = features.config

    index = build_index(
        FeatureMatrix(ids=tuple(ids_a), matrix=arch_matrix, config=index_config,
                      extractor_id=features.extractor_id),
        manifest)
    k_max = max(k_list)
    val_sets = knn_batch(index, val_matrix, k_max, query_ids=ids_v)
    arch_sets = None
    if threshold_source == "archive":
        arch_sets = knn_batch(index, arch_matrix, k_max, query_ids=ids_a)

    reports = []
    pooled = {}
    for k in k_list:
        scores = _likelihoods(val_sets, k)
        curve = roc(scores, yv)
        if threshold_source == "archive":
            th, _, _ = youden(roc(_likelihoods(arch_sets, k), ya))
        else:
            th, _, _ = youden(curve)
        tp, fp, tn, fn = confusion(scores, yv, th)
        reports.append(FoldReport(
            fold=fold, k=k, threshold=th,
            sensitivity=100.0 * tp / (tp + fn),
            specificity=100.0 * tn / (tn + fp),
            auc=100.0 * curve.auc,
            tp=tp, fp=fp, tn=tn, fn=fn, roc=curve))
        pooled[k] = (scores, yv)
    return reports, pooled


def run_cv(manifest: DatasetManifest, features: FeatureMatrix, pipeline: str,
           k_list, folds: int = 10, seed: int = 0, *,
           encoder_cfg: EncoderPipelineConfig | None = None,
           reducer: str = "autoencoder",
           encoder_loader=None,
           threads: int = 1,
           threshold_source: str = "validation",
           run_config: dict | None = None) -> ExperimentReport:
    """Cross-validated retrieval-as-classifier experiment.

    Every record serves as a query exactly once; the archive for a fold is
    the other nine folds.  For ``autothorax`` the compressor is fit per fold
    on that fold's archive vectors/labels only (or loaded via
    ``encoder_loader(fold)`` from prebuilt checkpoints).
    """
    if pipeline not in PIPELINE_CONFIGS:
        raise ValidationError(f"pipeline must be one of {PIPELINE_CONFIGS}, got {pipeline!r}")
    if threshold_source not in ("validation", "archive"):
        raise ValidationError("threshold_source must be 'validation' or 'archive'")
    if reducer not in ("autoencoder", "pca"):
        raise ValidationError("reducer must be 'autoencoder' or 'pca'")
    k_list = tuple(int(k) for k in k_list)
    if not k_list or any(k < 1 for k in k_list):
        raise ValidationError("k_list must contain positive integers")

    expected = _PIPELINE_STORE[pipeline]
    if features.config is not expected:
        raise ValidationError(
            f"pipeline {pipeline!r} needs a {expected.value} store, got {features.config.value}")
    counts = manifest.counts()
    if counts["positive"] < folds or counts["negative"] < folds:
        raise ValidationError(
            f"need at least {folds} records per class, got {counts['positive']} positive "
            f"/ {counts['negative']} negative")
    missing = [r.id for r in manifest.records if r.id not in set(features.ids)]
    if missing:
        raise ValidationError(f"records missing feature vectors: {missing[:5]!r}"
                              + (" ..." if len(missing) > 5 else ""))

    if any(r.fold is None for r in manifest.records):
        manifest = assign_folds(manifest, folds, seed)
    bad = sorted({r.fold for r in manifest.records} - set(range(folds)))
    if bad:
        raise ValidationError(f"manifest fold ids {bad} out of range for folds={folds}")

    if pipeline == "autothorax" and encoder_loader is None:
        if encoder_cfg is None:
            encoder_cfg = EncoderPipelineConfig(input_dim=features.dim)
        if encoder_cfg.input_dim != features.dim:
            raise ValidationError(f"encoder input_dim {encoder_cfg.input_dim} != "
                                  f"store dim {features.dim}")

    def worker(f):
        return _fold_worker(f, manifest, features, pipeline, k_list, seed,
                            encoder_cfg, reducer, encoder_loader, threshold_source)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(worker, range(folds)))
    else:
        results = [worker(f) for f in range(folds)]

    fold_reports = tuple(rep for reports, _ in results for rep in reports)
    summaries = []
    for k in k_list:
        rows = [r for r in fold_reports if r.k == k]
        sens = np.array([r.sensitivity for r in rows])
        spec = np.array([r.specificity for r in rows])
        aucs = np.array([r.auc for r in rows])
        pooled_scores = np.concatenate([pooled[k][0] for _, pooled in results])
        pooled_labels = np.concatenate([pooled[k][1] for _, pooled in results])
        pooled_curve = roc(pooled_scores, pooled_labels)
        _, p_sens, p_spec = youden(pooled_curve)
        summaries.append(KSummary(
            k=k,
            sensitivity_mean=float(sens.mean()), sensitivity_std=float(sens.std(ddof=1)),
            specificity_mean=float(spec.mean()), specificity_std=float(spec.std(ddof=1)),
            auc_mean=float(aucs.mean()), auc_std=float(aucs.std(ddof=1)),
            pooled_auc=float(100.0 * pooled_curve.auc),
            pooled_sensitivity=float(100.0 * p_sens),
            pooled_specificity=float(100.0 * p_spec)))

    return ExperimentReport(
        dataset_mode=manifest.mode.value,
        pipeline=pipeline,
        reducer=reducer if pipeline == "autothorax" else None,
        extractor_id=features.extractor_id,
        k_list=k_list,
        folds=folds,
        seed=seed,
        threshold_source=threshold_source,
        fold_reports=fold_reports,
        summaries=tuple(summaries),
        reference=tuple(reference_rows(manifest.mode.value)),
        run_config=dict(run_config or {}))


def compare_reducers(manifest, features, k_list, folds=10, seed=0, *,
                     encoder_cfg=None, threads=1, run_config=None):
    """Run the encoded pipeline with both compressors; returns (ae, pca) reports."""
    ae = run_cv(manifest, features, "autothorax", k_list, folds, seed,
                encoder_cfg=encoder_cfg, reducer="autoencoder", threads=threads,
                run_config=run_config)
    pca = run_cv(manifest, features, "autothorax", k_list, folds, seed,
                 encoder_cfg=encoder_cfg, reducer="pca", threads=threads,
                 run_config=run_config)
    return ae, pca
