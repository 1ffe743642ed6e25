import json

import numpy as np
import pytest

from thoraxsearch.cli import main
from thoraxsearch.datamodel import load_manifest, read_store_arrays


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory):
    """One synthetic image dataset, extracted once, shared across CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    synth_dir = root / "synth"
    feat_dir = root / "features"
    assert main(["synth", "--mode", "images", "--positives", "24", "--negatives", "24",
                 "--separation", "2.0", "--seed", "5", "--image-size", "128",
                 "--folds", "4", "--out-dir", str(synth_dir)]) == 0
    assert main(["extract", "--manifest", str(synth_dir / "manifest_fully_automated.csv"),
                 "--configs", "c1,c2,c3", "--out-dir", str(feat_dir)]) == 0
    return {"root": root, "synth": synth_dir, "features": feat_dir}


def test_extract_rerun_is_byte_identical(pipeline_dirs, tmp_path):
    first = (pipeline_dirs["features"] / "features_c3.fv").read_bytes()
    assert main(["extract",
                 "--manifest", str(pipeline_dirs["synth"] / "manifest_fully_automated.csv"),
                 "--configs", "c3", "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "features_c3.fv").read_bytes() == first


def test_extracted_stores_are_block_consistent(pipeline_dirs):
    c1 = read_store_arrays(pipeline_dirs["features"] / "features_c1.fv")
    c2 = read_store_arrays(pipeline_dirs["features"] / "features_c2.fv")
    c3 = read_store_arrays(pipeline_dirs["features"] / "features_c3.fv")
    assert (c1.dim, c2.dim, c3.dim) == (1024, 2048, 3072)
    assert np.array_equal(c3.matrix[:, :2048], c2.matrix)
    assert np.array_equal(c3.matrix[:, 2048:], c1.matrix)


def test_evaluate_writes_bundle(pipeline_dirs):
    out = pipeline_dirs["root"] / "report_c1"
    assert main(["evaluate",
                 "--manifest", str(pipeline_dirs["synth"] / "manifest_fully_automated.csv"),
                 "--store", str(pipeline_dirs["features"] / "features_c1.fv"),
                 "--pipeline", "c1", "--k-list", "5,11", "--folds", "4",
                 "--seed", "9", "--out-dir", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["pipeline"] == "c1"
    assert {f["k"] for f in report["fold_reports"]} == {5, 11}
    assert len(report["fold_reports"]) == 8
    assert report["reference"]["rows"]
    assert report["run_config"]["inputs"]["store_sha256"]
    assert "threads" not in report["run_config"]
    # delimited + rendered outputs land next to the JSON
    assert (out / "report.txt").exists()
    assert (out / "roc_points.csv").exists()
    for fig in ("roc_curves.png", "threshold_tradeoff.png", "confusion_matrix.png"):
        assert (out / fig).stat().st_size > 0
    header = (out / "roc_points.csv").read_text().splitlines()[0]
    assert header == "fold,k,threshold,sensitivity,specificity,fpr"


def test_evaluate_rerun_byte_identical(pipeline_dirs, tmp_path):
    args = ["evaluate",
            "--manifest", str(pipeline_dirs["synth"] / "manifest_fully_automated.csv"),
            "--store", str(pipeline_dirs["features"] / "features_c1.fv"),
            "--pipeline", "c1", "--k-list", "5", "--folds", "4", "--seed", "9",
            "--no-figures"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(args + ["--out-dir", str(a)]) == 0
    assert main(args + ["--out-dir", str(b), "--threads", "4"]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert (a / "roc_points.csv").read_bytes() == (b / "roc_points.csv").read_bytes()
    assert (a / "report.txt").read_bytes() == (b / "report.txt").read_bytes()


def test_train_encoder_then_evaluate(pipeline_dirs):
    enc_dir = pipeline_dirs["root"] / "encoders"
    manifest = str(pipeline_dirs["synth"] / "manifest_fully_automated.csv")
    store = str(pipeline_dirs["features"] / "features_c3.fv")
    assert main(["train-encoder", "--manifest", manifest, "--store", store,
                 "--folds", "4", "--seed", "9", "--epochs", "1",
                 "--out-dir", str(enc_dir)]) == 0
    for fold in range(4):
        assert (enc_dir / f"encoder_fold{fold}.nn").exists()
        sidecar = json.loads((enc_dir / f"encoder_fold{fold}.nn.json").read_text())
        assert sidecar["fold"] == fold
        assert sidecar["seed"] == 9
        assert sidecar["pipeline"]["hidden_schedule"] == [1024, 512]
        assert sidecar["manifest_sha256"]
    out = pipeline_dirs["root"] / "report_at"
    assert main(["evaluate", "--manifest", manifest, "--store", store,
                 "--pipeline", "autothorax", "--encoders-dir", str(enc_dir),
                 "--k-list", "5", "--folds", "4", "--seed", "9", "--no-figures",
                 "--out-dir", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["pipeline"] == "autothorax"


def test_tampered_checkpoint_rejected(pipeline_dirs, capsys):
    enc_dir = pipeline_dirs["root"] / "encoders"
    victim = enc_dir / "encoder_fold0.nn"
    raw = bytearray(victim.read_bytes())
    raw[100] ^= 0xFF
    tampered_dir = pipeline_dirs["root"] / "tampered"
    tampered_dir.mkdir()
    (tampered_dir / "encoder_fold0.nn").write_bytes(bytes(raw))
    (tampered_dir / "encoder_fold0.nn.json").write_text(
        (enc_dir / "encoder_fold0.nn.json").read_text())
    rc = main(["evaluate",
               "--manifest", str(pipeline_dirs["synth"] / "manifest_fully_automated.csv"),
               "--store", str(pipeline_dirs["features"] / "features_c3.fv"),
               "--pipeline", "autothorax", "--encoders-dir", str(tampered_dir),
               "--k-list", "5", "--folds", "4", "--no-figures",
               "--out-dir", str(pipeline_dirs["root"] / "never")])
    assert rc == 2
    assert "checksum" in capsys.readouterr().err


def test_search_json_schema(pipeline_dirs, capsys):
    store = str(pipeline_dirs["features"] / "features_c1.fv")
    rc = main(["search",
               "--manifest", str(pipeline_dirs["synth"] / "manifest_fully_automated.csv"),
               "--store", store, "--query-store", store,
               "--query-id", "syn-p00001", "--k", "5"])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["query_id"] == "syn-p00001"
    assert payload["k"] == 5
    assert len(payload["hits"]) == 5
    assert set(payload["hits"][0]) == {"id", "distance", "label"}
    assert "syn-p00001" not in [h["id"] for h in payload["hits"]]
    assert 0.0 <= payload["likelihood"] <= 1.0


def test_ingest_modes(pipeline_dirs, tmp_path):
    listing = str(pipeline_dirs["synth"] / "listing.csv")
    semi = tmp_path / "semi.csv"
    fully = tmp_path / "fully.csv"
    assert main(["ingest", "--listing", listing, "--mode", "semi_automated",
                 "--out", str(semi)]) == 0
    assert main(["ingest", "--listing", listing, "--mode", "fully_automated",
                 "--folds", "4", "--seed", "1", "--out", str(fully)]) == 0
    m_semi = load_manifest(semi)
    m_fully = load_manifest(fully)
    assert {r.id for r in m_semi.records} < {r.id for r in m_fully.records}
    assert all(r.fold in range(4) for r in m_fully.records)
    assert all(r.fold is None for r in m_semi.records)


def test_exit_codes(tmp_path, capsys):
    assert main(["evaluate", "--manifest", str(tmp_path / "nope.csv"),
                 "--store", str(tmp_path / "nope.fv")]) == 2
    err = capsys.readouterr().err
    assert "missing manifest" in err and "ingest" in err
    with pytest.raises(SystemExit) as exc:
        main(["not-a-command"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["evaluate"])  # required flags absent
    assert exc.value.code == 1


def test_config_file_defaults(pipeline_dirs, tmp_path):
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps({"seed": 77, "folds": 4, "k_list": [5],
                                    "pipeline": "c1"}))
    out = tmp_path / "rep"
    assert main(["evaluate", "--config", str(cfg_path),
                 "--manifest", str(pipeline_dirs["synth"] / "manifest_fully_automated.csv"),
                 "--store", str(pipeline_dirs["features"] / "features_c1.fv"),
                 "--no-figures", "--out-dir", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["seed"] == 77
    assert report["k_list"] == [5]
    # flag overrides file
    out2 = tmp_path / "rep2"
    assert main(["evaluate", "--config", str(cfg_path), "--seed", "78",
                 "--manifest", str(pipeline_dirs["synth"] / "manifest_fully_automated.csv"),
                 "--store", str(pipeline_dirs["features"] / "features_c1.fv"),
                 "--no-figures", "--out-dir", str(out2)]) == 0
    assert json.loads((out2 / "report.json").read_text())["seed"] == 78


def test_dataset_modes_subset_population(pipeline_dirs, tmp_path):
    # Same synthetic pool, two archive modes: the semi-automated report must
    # cover a strict subset of the fully-automated population.
    totals = {}
    for mode in ("semi_automated", "fully_automated"):
        out = tmp_path / mode
        assert main(["evaluate",
                     "--manifest", str(pipeline_dirs["synth"] / f"manifest_{mode}.csv"),
                     "--store", str(pipeline_dirs["features"] / "features_c1.fv"),
                     "--dataset-mode", mode, "--pipeline", "c1", "--k-list", "5",
                     "--folds", "4", "--seed", "9", "--no-figures",
                     "--out-dir", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["dataset_mode"] == mode
        totals[mode] = sum(f["tp"] + f["fp"] + f["tn"] + f["fn"]
                           for f in report["fold_reports"])
    assert totals["semi_automated"] < totals["fully_automated"]


def test_report_rerender(pipeline_dirs, tmp_path):
    src = pipeline_dirs["root"] / "report_c1" / "report.json"
    out = tmp_path / "rendered"
    assert main(["report", "--report", str(src), "--out-dir", str(out)]) == 0
    assert (out / "report.txt").exists()
    assert (out / "roc_curves.png").exists()
    assert (out / "report.txt").read_bytes() == \
           (pipeline_dirs["root"] / "report_c1" / "report.txt").read_bytes()


def test_external_extractor_cli(tmp_path):
    # vector-mode synth provides a part-keyed store; extraction through the
    # external interface must rebuild the exact same config stores.
    synth_dir = tmp_path / "vsynth"
    assert main(["synth", "--mode", "vectors", "--positives", "10", "--negatives", "10",
                 "--separation", "2.0", "--seed", "3", "--base-dim", "32",
                 "--out-dir", str(synth_dir)]) == 0
    out = tmp_path / "ext_features"
    assert main(["extract", "--manifest", str(synth_dir / "manifest_fully_automated.csv"),
                 "--configs", "c2,c3", "--extractor", "external",
                 "--external-store", str(synth_dir / "external_parts.fv"),
                 "--out-dir", str(out)]) == 0
    direct = read_store_arrays(synth_dir / "features_c3.fv")
    rebuilt = read_store_arrays(out / "features_c3.fv")
    assert direct.ids == rebuilt.ids
    assert np.array_equal(direct.matrix, rebuilt.matrix)


def test_compare_pca_flag(tmp_path):
    synth_dir = tmp_path / "vsynth"
    assert main(["synth", "--mode", "vectors", "--positives", "40", "--negatives", "40",
                 "--separation", "8.0", "--seed", "3", "--base-dim", "24",
                 "--folds", "4", "--out-dir", str(synth_dir)]) == 0
    out = tmp_path / "rep"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"encoder": {"bottleneck": 8, "hidden_schedule": [32],
                                           "epochs": 2, "strict": False}}))
    assert main(["evaluate", "--config", str(cfg),
                 "--manifest", str(synth_dir / "manifest_fully_automated.csv"),
                 "--store", str(synth_dir / "features_c3.fv"),
                 "--pipeline", "autothorax", "--k-list", "5", "--folds", "4",
                 "--seed", "2", "--compare-pca", "--no-figures",
                 "--out-dir", str(out)]) == 0
    ae = json.loads((out / "report.json").read_text())
    pca = json.loads((out / "pca" / "report.json").read_text())
    assert ae["reducer"] == "autoencoder"
    assert pca["reducer"] == "pca"
