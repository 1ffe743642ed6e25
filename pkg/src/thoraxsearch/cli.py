"""Command-line pipeline: ingest, synth, extract, train-encoder, search, evaluate, report.

Exit codes: 0 ok, 1 usage error, 2 data error.  Every command is a pure
function of (config, input files, seed); reruns write byte-identical
artifacts.  A JSON config file supplies defaults and flags override it; the
resolved semantic configuration (with content hashes of the inputs, minus
execution-only settings like worker count) is embedded in evaluation reports.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import datamodel as dm
from . import evaluation, imaging, reporting, synth
from .encoder import EncoderPipelineConfig, load_encoder, save_encoder, train_encoder_pipeline
from .errors import DataError
from .search import build_index, knn

DEFAULT_K_LIST = (11, 51, 101, 251, 501, 1001)

CONFIG_DEFAULTS = {
    "version": 1,
    "seed": 0,
    "folds": 10,
    "k_list": list(DEFAULT_K_LIST),
    "dataset_mode": "fully_automated",
    "pipeline": "c3",
    "threshold_source": "validation",
    "threads": 1,
    "extractor": {"kind": "baseline_pool", "store": None},
    "encoder": {"bottleneck": 256, "hidden_schedule": None, "dropout": 0.2,
                "epochs": 10, "batch_size": 128, "learning_rate": 1e-3,
                "strict": True},
}


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; this pipeline reserves 2
    # for data errors.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _cache_dir() -> Path:
    return Path(os.environ.get("THORAXSEARCH_CACHE", "thoraxsearch_out"))


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_config(path) -> dict:
    cfg = json.loads(json.dumps(CONFIG_DEFAULTS))  # deep copy
    if path:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {path}: {exc}") from None
        for key, value in user.items():
            if isinstance(value, dict) and isinstance(cfg.get(key), dict):
                cfg[key].update(value)
            else:
                cfg[key] = value
    return cfg


def _parse_k_list(text) -> list[int]:
    try:
        ks = [int(tok) for tok in str(text).replace(",", " ").split()]
    except ValueError:
        raise DataError(f"bad k list {text!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise DataError("k values must be positive integers")
    for k in ks:
        if k % 2 == 0:
            print(f"warning: even k={k} can produce vote ties at threshold 0.5",
                  file=sys.stderr)
    return ks


def _require(path, what: str, hint: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing {what}: {path} ({hint})")
    return path


def _encoder_cfg(cfg: dict, input_dim: int, epochs=None) -> EncoderPipelineConfig:
    enc = cfg["encoder"]
    sched = enc.get("hidden_schedule")
    return EncoderPipelineConfig(
        input_dim=input_dim,
        bottleneck=enc.get("bottleneck", 256),
        hidden_schedule=tuple(sched) if sched else None,
        dropout=enc.get("dropout", 0.2),
        epochs=epochs if epochs is not None else enc.get("epochs", 10),
        batch_size=enc.get("batch_size", 128),
        learning_rate=enc.get("learning_rate", 1e-3),
        strict=enc.get("strict", True))


def _open_extractor(cfg: dict, args) -> object:
    kind = getattr(args, "extractor", None) or cfg["extractor"]["kind"]
    if kind in ("baseline", "baseline_pool"):
        return imaging.BaselinePoolExtractor()
    if kind in ("external", "external_file"):
        store = getattr(args, "external_store", None) or cfg["extractor"].get("store")
        if not store:
            raise DataError("external extractor needs --external-store")
        _require(store, "external vector store", "provide precomputed part vectors")
        return imaging.ExternalStoreExtractor(store)
    raise DataError(f"unknown extractor kind {kind!r}")


# ---------------------------------------------------------------------------
# subcommands

def cmd_ingest(args) -> int:
    cfg = _load_config(args.config)
    mode = dm.DatasetMode(args.mode or cfg["dataset_mode"])
    records = dm.load_listing(_require(args.listing, "listing", "id,path,finding,source CSV"))
    manifest = dm.assemble_manifest(records, mode)
    folds = args.folds if args.folds is not None else None
    if folds:
        manifest = dm.assign_folds(manifest, folds,
                                   args.seed if args.seed is not None else cfg["seed"])
    dm.save_manifest(manifest, args.out)
    counts = manifest.counts()
    print(f"wrote {args.out}: {counts['total']} records "
          f"(+{counts['positive']} / -{counts['negative']}), mode {mode.value}")
    return 0


def cmd_synth(args) -> int:
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    out_dir = Path(args.out_dir or (_cache_dir() / "synth"))
    kwargs = dict(n_pos=args.positives, n_neg=args.negatives,
                  separation=args.separation, seed=seed,
                  abnormal_frac=args.abnormal_frac, folds=args.folds)
    if args.mode == "images":
        result = synth.synth_images(out_dir, image_size=args.image_size, **kwargs)
    else:
        result = synth.synth_vectors(out_dir, base_dim=args.base_dim, **kwargs)
    print(f"wrote {len(result.records)} synthetic records under {out_dir}")
    for mode, path in sorted(result.manifest_paths.items()):
        print(f"  manifest[{mode}]: {path}")
    if result.store_paths:
        for config, path in sorted(result.store_paths.items()):
            print(f"  store[{config}]: {path}")
        print(f"  store[external parts]: {result.parts_store_path}")
    return 0


def cmd_extract(args) -> int:
    cfg = _load_config(args.config)
    manifest_path = _require(args.manifest, "manifest", "run `thoraxsearch ingest` or `synth` first")
    manifest = dm.load_manifest(manifest_path)
    extractor = _open_extractor(cfg, args)
    out_dir = Path(args.out_dir or (_cache_dir() / "features"))
    out_dir.mkdir(parents=True, exist_ok=True)
    configs = [dm.FeatureConfig(c) for c in _split_tokens(args.configs)]
    root = manifest_path.parent
    external = isinstance(extractor, imaging.ExternalStoreExtractor)

    images = {}
    if not external:
        for rec in manifest.records:
            if not rec.path:
                raise DataError(f"record {rec.id} has no image path; use an external "
                                f"feature store for pixel-free records")
            p = Path(rec.path)
            images[rec.id] = imaging.load_image(p if p.is_absolute() else root / p)

    for config in configs:
        vectors = [imaging.extract_config(images.get(rec.id), config, extractor,
                                          record_id=rec.id)
                   for rec in manifest.records]
        path = out_dir / f"features_{config.value}.fv"
        dm.write_store(vectors, path)
        print(f"wrote {path}: {len(vectors)} rows, dim {vectors[0].dim}")
    return 0


def _split_tokens(text) -> list[str]:
    return [tok for tok in str(text).replace(",", " ").split() if tok]


def cmd_train_encoder(args) -> int:
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    folds = args.folds if args.folds is not None else cfg["folds"]
    manifest_path = _require(args.manifest, "manifest", "run `thoraxsearch ingest` first")
    store_path = _require(args.store, "feature store", "run `thoraxsearch extract` first")
    manifest = dm.load_manifest(manifest_path)
    if any(r.fold is None for r in manifest.records):
        manifest = dm.assign_folds(manifest, folds, seed)
    features = dm.read_store_arrays(store_path)
    row_of = {rid: i for i, rid in enumerate(features.ids)}
    missing = [r.id for r in manifest.records if r.id not in row_of]
    if missing:
        raise DataError(f"records missing from store {store_path}: {missing[:5]!r}")

    pipeline_cfg = _encoder_cfg(cfg, features.dim, epochs=args.epochs)
    out_dir = Path(args.out_dir or (_cache_dir() / "encoders"))
    out_dir.mkdir(parents=True, exist_ok=True)
    provenance = {"manifest_sha256": _sha256_file(manifest_path),
                  "store_sha256": _sha256_file(store_path)}

    for fold in range(folds):
        arch = [r for r in manifest.records if r.fold != fold]
        x = features.matrix[[row_of[r.id] for r in arch]]
        y = np.array([r.label for r in arch], dtype=np.int8)
        fold_seed = dm.derive_seed(seed, "encoder", fold)
        encoder, _, history = train_encoder_pipeline(pipeline_cfg, x, y, fold_seed)
        path = out_dir / f"encoder_fold{fold}.nn"
        save_encoder(encoder, pipeline_cfg, path, seed=seed, fold=fold,
                     extra={**provenance,
                            "trained_records": len(arch),
                            "final_reconstruction_loss": history["step1_loss"][-1]
                            if history["step1_loss"] else None})
        print(f"fold {fold}: trained on {len(arch)} archive records -> {path}")
    return 0


def cmd_search(args) -> int:
    manifest = dm.load_manifest(_require(args.manifest, "manifest", "labels come from it"))
    archive = dm.read_store_arrays(_require(args.store, "archive store",
                                            "run `thoraxsearch extract` first"))
    queries = dm.read_store_arrays(_require(args.query_store, "query store",
                                            "a store holding the query vector"))
    try:
        q_row = queries.ids.index(args.query_id)
    except ValueError:
        raise DataError(f"query id {args.query_id!r} not in {args.query_store}") from None
    index = build_index(archive, manifest)
    ns = knn(index, queries.matrix[q_row], args.k, query_id=args.query_id,
             exclude_query=not args.include_self, threads=args.threads)
    payload = {"query_id": ns.query_id, "k": ns.k,
               "hits": [{"id": rid, "distance": dist, "label": label}
                        for rid, dist, label in ns.hits],
               "likelihood": ns.likelihood}
    text = json.dumps(payload, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0


def _resolved_run_config(cfg, *, pipeline, dataset_mode, seed, folds, k_list,
                         threshold_source, reducer, encoder_cfg, inputs) -> dict:
    # Worker count and output locations deliberately excluded: they must not
    # change report bytes.
    out = {"version": cfg["version"], "pipeline": pipeline, "dataset_mode": dataset_mode,
           "seed": seed, "folds": folds, "k_list": list(k_list),
           "threshold_source": threshold_source, "inputs": inputs}
    if pipeline == "autothorax":
        out["reducer"] = reducer
        out["encoder"] = encoder_cfg.to_dict() if encoder_cfg else dict(cfg["encoder"])
    return out


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    folds = args.folds if args.folds is not None else cfg["folds"]
    threads = args.threads if args.threads is not None else cfg["threads"]
    pipeline = args.pipeline or cfg["pipeline"]
    threshold_source = args.threshold_source or cfg["threshold_source"]
    k_list = _parse_k_list(args.k_list) if args.k_list else list(cfg["k_list"])
    dataset_mode = dm.DatasetMode(args.dataset_mode or cfg["dataset_mode"])

    manifest_path = _require(args.manifest, "manifest", "run `thoraxsearch ingest` first")
    store_path = _require(args.store, "feature store", "run `thoraxsearch extract` first")
    manifest = dm.load_manifest(manifest_path, mode=dataset_mode)
    features = dm.read_store_arrays(store_path)

    encoder_cfg = None
    encoder_loader = None
    if pipeline == "autothorax":
        if args.encoders_dir:
            manifest_sha = _sha256_file(manifest_path)
            enc_dir = Path(args.encoders_dir)

            def encoder_loader(fold):
                path = _require(enc_dir / f"encoder_fold{fold}.nn",
                                f"encoder checkpoint for fold {fold}",
                                "run `thoraxsearch train-encoder` first")
                enc, sidecar = load_encoder(path)
                if sidecar.get("fold") != fold:
                    raise DataError(f"{path}: sidecar fold {sidecar.get('fold')} != {fold}")
                if sidecar.get("manifest_sha256") not in (None, manifest_sha):
                    raise DataError(f"{path}: checkpoint was trained against a "
                                    f"different manifest")
                return enc
        else:
            encoder_cfg = _encoder_cfg(cfg, features.dim, epochs=args.epochs)

    inputs = {"manifest_sha256": _sha256_file(manifest_path),
              "store_sha256": _sha256_file(store_path)}
    run_config = _resolved_run_config(
        cfg, pipeline=pipeline, dataset_mode=dataset_mode.value, seed=seed, folds=folds,
        k_list=k_list, threshold_source=threshold_source, reducer=args.reducer,
        encoder_cfg=encoder_cfg, inputs=inputs)

    report = evaluation.run_cv(
        manifest, features, pipeline, k_list, folds, seed,
        encoder_cfg=encoder_cfg, reducer=args.reducer, encoder_loader=encoder_loader,
        threads=threads, threshold_source=threshold_source, run_config=run_config)

    out_dir = Path(args.out_dir or (_cache_dir() / "reports" / pipeline))
    paths = reporting.write_bundle(report, out_dir, figures=not args.no_figures)
    print(f"wrote {paths['json']}")
    for s in report.summaries:
        print(f"  k={s.k}: sensitivity {s.sensitivity_mean:.1f}  "
              f"specificity {s.specificity_mean:.1f}  auc {s.auc_mean:.1f}")

    if args.compare_pca:
        if pipeline != "autothorax":
            raise DataError("--compare-pca applies to the autothorax pipeline")
        pca_config = dict(run_config, reducer="pca")
        pca_report = evaluation.run_cv(
            manifest, features, pipeline, k_list, folds, seed,
            encoder_cfg=encoder_cfg, reducer="pca", threads=threads,
            threshold_source=threshold_source, run_config=pca_config)
        pca_paths = reporting.write_bundle(pca_report, out_dir / "pca",
                                           figures=not args.no_figures)
        print(f"wrote {pca_paths['json']}")
        for ae_s, pca_s in zip(report.summaries, pca_report.summaries):
            print(f"  k={ae_s.k}: autoencoder auc {ae_s.auc_mean:.1f} "
                  f"vs pca auc {pca_s.auc_mean:.1f}")
    return 0


def cmd_report(args) -> int:
    d = reporting.load_report_dict(_require(args.report, "report JSON",
                                            "run `thoraxsearch evaluate` first"))
    out_dir = Path(args.out_dir or Path(args.report).parent)
    paths = reporting.write_bundle(d, out_dir, figures=not args.no_figures)
    print(f"rendered {paths['table']}")
    return 0


# ---------------------------------------------------------------------------
# parser

def _build_parser() -> _Parser:
    parser = _Parser(prog="thoraxsearch",
                     description="chest X-ray retrieval-as-classifier pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON config file (flags override it)")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("ingest", help="build a manifest from a source listing")
    common(p)
    p.add_argument("--listing", required=True)
    p.add_argument("--mode", choices=[m.value for m in dm.DatasetMode], default=None)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--mode", choices=["images", "vectors"], default="images")
    p.add_argument("--positives", type=int, required=True)
    p.add_argument("--negatives", type=int, required=True)
    p.add_argument("--separation", type=float, default=1.0)
    p.add_argument("--abnormal-frac", type=float, default=0.2)
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--base-dim", type=int, default=1024)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="tag manifest records with feature vectors")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--configs", default="c1,c2,c3",
                   help="comma-separated subset of c1,c2,c3")
    p.add_argument("--extractor", choices=["baseline", "external"], default=None)
    p.add_argument("--external-store", default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-encoder", help="train one compressor per fold (archive side only)")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--store", required=True, help="feature store the encoder compresses")
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_train_encoder)

    p = sub.add_parser("search", help="query the archive for nearest neighbours")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--query-store", required=True)
    p.add_argument("--query-id", required=True)
    p.add_argument("--k", type=int, default=11)
    p.add_argument("--include-self", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("evaluate", help="run the cross-validated experiment")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--pipeline", choices=list(evaluation.PIPELINE_CONFIGS), default=None)
    p.add_argument("--dataset-mode", choices=[m.value for m in dm.DatasetMode], default=None)
    p.add_argument("--k-list", default=None, help="comma-separated k values")
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--threshold-source", choices=["validation", "archive"], default=None)
    p.add_argument("--reducer", choices=["autoencoder", "pca"], default="autoencoder")
    p.add_argument("--encoders-dir", default=None,
                   help="reuse per-fold checkpoints from train-encoder")
    p.add_argument("--epochs", type=int, default=None,
                   help="override encoder training epochs")
    p.add_argument("--compare-pca", action="store_true",
                   help="also run the PCA compressor and report both AUCs")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="re-render table/CSV/figures from a report JSON")
    common(p)
    p.add_argument("--report", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"thoraxsearch {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
