import csv
import json

import pytest

from faceadapt import formats
from faceadapt.cli import EXIT_FORMAT, EXIT_MISSING, EXIT_PARAM, main
from pipeline import run, run_pipeline


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    work = tmp_path_factory.mktemp("pipeline")
    return work, run_pipeline(work)


def test_pipeline_emits_metric_reports(pipeline_dir):
    work, evals = pipeline_dir
    for feat, ev in evals.items():
        assert ev["name"] == feat
        assert set(ev["videos"]) == {"v000", "v001"}
        for rep in ev["videos"].values():
            assert 0.0 <= rep["v_measure"] <= 1.0 and rep["oci"] >= 1.0
        assert 0.0 <= ev["tpr_at_fpr"]["mean"] <= 1.0


def test_easy_corpus_clusters_perfectly_with_known_count(tmp_path):
    run(["synth", "--out", tmp_path / "c", "--n-identities", 4, "--tracks-per-identity", 5, "--dim", 16,
         "--noise", 0.01, "--distortion", 0.0, "--shift-prob", 0.0])
    tracks = tmp_path / "c/tracks.jsonl"
    assert run(["adapt", "--tracks", tracks, "--embeddings", tmp_path / "c/emb", "--out", tmp_path / "f"]) == 0
    assert run(["cluster", "--tracks", tracks, "--features", tmp_path / "f", "--n-clusters", 4,
                "--out", tmp_path / "cl.json"]) == 0
    assert run(["eval", "--tracks", tracks, "--clusters", tmp_path / "cl.json", "--out", tmp_path / "ev.json"]) == 0
    ev = json.loads((tmp_path / "ev.json").read_text())
    assert ev["mean"]["v_measure"] == 1.0 and ev["mean"]["oci"] == 1.0


def test_affinity_propagation_path(pipeline_dir, tmp_path):
    work, _ = pipeline_dir
    assert run(["cluster", "--tracks", work / "harvested.jsonl", "--features", work / "raw.feat",
                "--method", "ap", "--out", tmp_path / "ap.json"]) == 0
    out = json.loads((tmp_path / "ap.json").read_text())
    for r in out["videos"].values():
        assert len(r["exemplars"]) == r["n_clusters"]


def test_report_histograms_sum_to_sample_count(pipeline_dir):
    work, _ = pipeline_dir
    n = len(formats.load_samples(work / "samples.bin"))
    with open(work / "report/distance_histogram.csv") as f:
        rows = list(csv.DictReader(f))
    for col in ("pos_before", "neg_before", "pos_after", "neg_after"):
        assert sum(int(r[col]) for r in rows) == n
    summary = json.loads((work / "report/distance_summary.json").read_text())
    assert summary["n_samples"] == n


def test_training_writes_history(pipeline_dir):
    work, _ = pipeline_dir
    with open(work / "net.ckpt.history.csv") as f:
        assert len(f.read().strip().splitlines()) >= 2


def test_json_flag_before_or_after_subcommand(tmp_path, capsys, pipeline_dir):
    work, _ = pipeline_dir
    args = ["--tracks", work / "corpus/tracks.jsonl", "--out", tmp_path / "h.jsonl"]
    assert run(["--json", "harvest", *args]) == 0
    first = json.loads(capsys.readouterr().out)
    assert run(["harvest", *args, "--json"]) == 0
    assert json.loads(capsys.readouterr().out) == first


def test_exit_codes(tmp_path, pipeline_dir):
    work, _ = pipeline_dir
    assert main(["harvest", "--tracks", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "x")]) == EXIT_MISSING
    assert main(["mine", "--tracks", str(work / "harvested.jsonl"), "--embeddings", str(work / "corpus/emb"),
                 "--out", str(tmp_path / "s"), "--P", "0"]) == EXIT_PARAM
    assert main(["bogus-command"]) == EXIT_PARAM
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage!" * 4)
    assert main(["fit-mvcorr", "--samples", str(bad), "--out", str(tmp_path / "m")]) == EXIT_FORMAT
    assert main(["--threads", "0", "harvest", "--tracks", str(work / "harvested.jsonl"),
                 "--out", str(tmp_path / "y")]) == EXIT_PARAM


def test_config_file_supplies_defaults(tmp_path, capsys, pipeline_dir):
    work, _ = pipeline_dir
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"json": True, "harvest": {"min_frames": 60}}))
    assert main(["--config", str(cfg), "harvest", "--tracks", str(work / "corpus/tracks.jsonl"),
                 "--out", str(tmp_path / "h.jsonl")]) == 0
    assert json.loads(capsys.readouterr().out)["min_frames"] == 60
    cfg.write_text(json.dumps({"harvest": {"no_such_option": 1}}))
    assert main(["--config", str(cfg), "harvest", "--tracks", "t", "--out", "o"]) == EXIT_PARAM
    assert main(["--config", str(tmp_path / "missing.json"), "harvest", "--tracks", "t", "--out", "o"]) == EXIT_MISSING
    cfg.write_text("{not json")
    assert main(["--config", str(cfg), "harvest", "--tracks", "t", "--out", "o"]) == EXIT_FORMAT
