"""Report rendering: JSON, aligned text table, ROC-point CSV, and figures.

The JSON report is the full-precision artifact and is byte-stable for a given
run configuration (no timestamps, insertion-ordered keys).  The text table
rounds percentages to integers and appends the published reference rows for
side-by-side reading.  Figures (ROC curves per k, threshold trade-off,
pooled confusion matrix) are rendered next to the delimited outputs.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .evaluation import REFERENCE_NOTE, ExperimentReport

REPORT_JSON = "report.json"
REPORT_TABLE = "report.txt"
ROC_CSV = "roc_points.csv"


def report_to_dict(report: ExperimentReport) -> dict:
    return {
        "version": report.version,
        "dataset_mode": report.dataset_mode,
        "pipeline": report.pipeline,
        "reducer": report.reducer,
        "extractor_id": report.extractor_id,
        "k_list": list(report.k_list),
        "folds": report.folds,
        "seed": report.seed,
        "threshold_source": report.threshold_source,
        "summaries": [{
            "k": s.k,
            "sensitivity_mean": s.sensitivity_mean, "sensitivity_std": s.sensitivity_std,
            "specificity_mean": s.specificity_mean, "specificity_std": s.specificity_std,
            "auc_mean": s.auc_mean, "auc_std": s.auc_std,
            "pooled_auc": s.pooled_auc,
            "pooled_sensitivity": s.pooled_sensitivity,
            "pooled_specificity": s.pooled_specificity,
        } for s in report.summaries],
        "fold_reports": [{
            "fold": f.fold, "k": f.k, "threshold": f.threshold,
            "sensitivity": f.sensitivity, "specificity": f.specificity, "auc": f.auc,
            "tp": f.tp, "fp": f.fp, "tn": f.tn, "fn": f.fn,
            "roc_points": [[p.threshold, p.sensitivity, p.specificity]
                           for p in f.roc.points],
        } for f in report.fold_reports],
        "reference": {"note": REFERENCE_NOTE, "rows": [dict(r) for r in report.reference]},
        "run_config": dict(report.run_config),
    }


def report_json_bytes(report) -> bytes:
    d = report if isinstance(report, dict) else report_to_dict(report)
    return (json.dumps(d, indent=2) + "\n").encode("utf-8")


def load_report_dict(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _method_label(d: dict) -> str:
    label = f"search via {d['pipeline']} features"
    if d.get("reducer"):
        label += f" ({d['reducer']} 256)"
    return label


def render_text_table(d: dict) -> str:
    """Aligned table (Method | Sensitivity | Specificity | AUC), percentages
    rounded to integers, with reference rows appended."""
    rows = []
    label = _method_label(d)
    for s in d["summaries"]:
        rows.append((f"{label} (k={s['k']})",
                     f"{s['sensitivity_mean']:.0f}", f"{s['specificity_mean']:.0f}",
                     f"{s['auc_mean']:.0f}"))
    for r in d["reference"]["rows"]:
        k = f" (k={r['k']})" if r.get("k") else ""
        fmt = lambda v: "-" if v is None else f"{v:.0f}"
        rows.append((f"[reference] {r['method']}{k}",
                     fmt(r["sensitivity"]), fmt(r["specificity"]), fmt(r["auc"])))

    header = ("Method", "Sensitivity", "Specificity", "AUC")
    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) for i in range(4)]
    lines = [
        f"dataset mode: {d['dataset_mode']}   folds: {d['folds']}   seed: {d['seed']}",
        f"numbers are percent, averaged over {d['folds']} folds; reference rows are "
        f"{d['reference']['note']}",
        "",
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(header)),
    ]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(r[i].ljust(widths[i]) for i in range(4)))
    return "\n".join(lines) + "\n"


def roc_csv_text(d: dict) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["fold", "k", "threshold", "sensitivity", "specificity", "fpr"])
    for f in d["fold_reports"]:
        for t, sens, spec in f["roc_points"]:
            writer.writerow([f["fold"], f["k"], repr(t), repr(sens), repr(spec),
                             repr(1.0 - spec)])
    return out.getvalue()


# ---------------------------------------------------------------------------
# figures

def _fold_entries(d: dict, fold: int):
    return [f for f in d["fold_reports"] if f["fold"] == fold]


def _plot_roc_curves(d: dict, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 5))
    for f in _fold_entries(d, fold=0):
        pts = f["roc_points"]
        fpr = [1.0 - spec for _, _, spec in pts]
        tpr = [sens for _, sens, _ in pts]
        ax.plot(fpr, tpr, marker=".", markersize=3,
                label=f"k={f['k']} (AUC {f['auc'] / 100.0:.2f})")
    ax.plot([0, 1], [0, 1], linestyle="--", color="gray", linewidth=0.8)
    ax.set_xlabel("1 - specificity")
    ax.set_ylabel("sensitivity")
    ax.set_title(f"ROC, fold 0, {_method_label(d)}")
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _plot_threshold_tradeoff(d: dict, path: Path) -> None:
    k_big = max(d["k_list"])
    entry = next(f for f in _fold_entries(d, fold=0) if f["k"] == k_big)
    pts = sorted(entry["roc_points"], key=lambda p: p[0])
    th = [p[0] for p in pts]
    sens = [p[1] for p in pts]
    spec = [p[2] for p in pts]
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.plot(th, sens, label="sensitivity")
    ax.plot(th, spec, label="specificity")
    ax.axvline(entry["threshold"], color="gray", linestyle="--", linewidth=0.8,
               label=f"selected threshold {entry['threshold']:.3f}")
    ax.set_xlabel("vote-likelihood threshold")
    ax.set_ylabel("rate")
    ax.set_xlim(0, 1)
    ax.set_title(f"threshold trade-off, fold 0, k={k_big}")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _plot_confusion(d: dict, path: Path) -> None:
    best = max(d["summaries"], key=lambda s: s["auc_mean"])
    rows = [f for f in d["fold_reports"] if f["k"] == best["k"]]
    tp = sum(f["tp"] for f in rows)
    fp = sum(f["fp"] for f in rows)
    tn = sum(f["tn"] for f in rows)
    fn = sum(f["fn"] for f in rows)
    mat = [[tp, fn], [fp, tn]]
    fig, ax = plt.subplots(figsize=(4.2, 3.8))
    ax.imshow(mat, cmap="Blues")
    for i in range(2):
        for j in range(2):
            ax.text(j, i, f"{mat[i][j]:,}", ha="center", va="center", fontsize=12)
    ax.set_xticks([0, 1], ["pred +", "pred -"])
    ax.set_yticks([0, 1], ["true +", "true -"])
    ax.set_title(f"confusion over all folds, k={best['k']}")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_figures(d: dict, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for name, fn in (("roc_curves.png", _plot_roc_curves),
                     ("threshold_tradeoff.png", _plot_threshold_tradeoff),
                     ("confusion_matrix.png", _plot_confusion)):
        p = out_dir / name
        fn(d, p)
        paths.append(p)
    return paths


def write_bundle(report, out_dir, figures: bool = True) -> dict:
    """Write report.json, report.txt, roc_points.csv, and figures into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    d = report if isinstance(report, dict) else report_to_dict(report)
    paths = {"json": out_dir / REPORT_JSON, "table": out_dir / REPORT_TABLE,
             "roc_csv": out_dir / ROC_CSV}
    paths["json"].write_bytes(report_json_bytes(d))
    paths["table"].write_text(render_text_table(d), encoding="utf-8")
    paths["roc_csv"].write_text(roc_csv_text(d), encoding="utf-8")
    if figures:
        paths["figures"] = render_figures(d, out_dir)
    return paths
