import json
import statistics

import pytest

from speechsem.cli import EXIT_CONFIG, EXIT_IO, EXIT_MISSING, EXIT_OK, main
from speechsem.config import parse_config
from speechsem.pipeline import Workspace, ablation_table, dir_hash

TINY = [
    "corpus.train = 30", "corpus.dev = 12", "corpus.test = 12", "corpus.text_only = 60",
    "gan.steps = 4", "gan.batch_size = 4", "gan.eval_every = 2", "gan.gen_hidden = 8", "gan.disc_hidden = 8",
    "lm.epochs = 1", "lm.d_model = 16", "lm.d_ff = 32",
    "task.steps = 3", "task.batch_size = 4",
]


def _run(tmp_path, *args, extra=()):
    argv = list(args) + ["--output-dir", str(tmp_path / "run")]
    for line in TINY + list(extra):
        argv += ["--set", line]
    return main(argv)


def _json_out(capsys):
    return json.loads(capsys.readouterr().out)


def test_gen_corpus_writes_files_and_is_stable(tmp_path, capsys):
    assert _run(tmp_path, "gen-corpus") == EXIT_OK
    first = _json_out(capsys)
    names = {p.name for p in (tmp_path / "run" / "corpus").iterdir() for p in p.iterdir()}
    assert {"spec.json", "labels.jsonl", "train.f32", "dev.f32", "test.f32", "text.txt"} <= names
    assert (tmp_path / "run" / "config.txt").read_text().startswith("corpus.train = 30")
    # a fresh output directory regenerates byte-identical artifacts
    assert main(["gen-corpus", "--output-dir", str(tmp_path / "again")] + sum([["--set", s] for s in TINY], [])) == 0
    second = _json_out(capsys)
    assert first["output_hash"] == second["output_hash"]
    manifest = [json.loads(line) for line in (tmp_path / "run" / "manifest.jsonl").read_text().splitlines()]
    assert manifest[0]["stage"] == "corpus" and manifest[0]["outputs"]["hash"] == first["output_hash"]


def test_unwritable_output_is_io_error(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-corpus", "--output-dir", str(blocker / "sub")]) == EXIT_IO
    assert "error" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    assert _run(tmp_path, "gen-corpus", extra=["gan.bogus = 1"]) == EXIT_CONFIG
    assert "bogus" in capsys.readouterr().err


def test_finetune_before_bridge(tmp_path, capsys):
    assert _run(tmp_path, "gen-corpus") == EXIT_OK
    capsys.readouterr()
    assert _run(tmp_path, "finetune", "--variant", "acoustic_only", "--task", "ic") == EXIT_MISSING
    assert "bridge checkpoint missing" in capsys.readouterr().err


def test_bridge_before_corpus(tmp_path, capsys):
    assert _run(tmp_path, "train-bridge") == EXIT_MISSING
    assert "corpus missing" in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    for stage in ("gen-corpus", "train-lm", "train-bridge"):
        assert _run(root, stage) == EXIT_OK
    return root


def test_bridge_log_has_all_loss_columns(pipeline_dir):
    logs = list((pipeline_dir / "run" / "bridge").glob("*/log.jsonl"))
    assert len(logs) == 1
    rec = json.loads(logs[0].read_text().splitlines()[0])
    assert {"gan", "gp", "sp", "pd", "ss"} <= set(rec)


def test_full_pipeline_emits_report(pipeline_dir, capsys):
    capsys.readouterr()
    assert _run(pipeline_dir, "finetune", "--variant", "ssp_tune", "--task", "ic", "--seed", "0") == EXIT_OK
    report = _json_out(capsys)
    assert report["variant"] == "ssp_tune" and 0 <= report["metrics"]["accuracy"] <= 1
    assert _run(pipeline_dir, "eval", "--variant", "ssp_tune", "--task", "ic", "--seed", "0") == EXIT_OK
    assert set(_json_out(capsys)["metrics"]) == {"accuracy"}
    run = next((pipeline_dir / "run" / "finetune").glob("ssp_tune-ic-s0-*"))
    assert {"report.json", "eval_test.json", "registry.json", "pooled_dev.f32", "predictions_dev.jsonl"} <= {
        p.name for p in run.iterdir()}


def test_rerun_reuses_stage(pipeline_dir, capsys):
    capsys.readouterr()
    n = len((pipeline_dir / "run" / "manifest.jsonl").read_text().splitlines())
    assert _run(pipeline_dir, "train-bridge") == EXIT_OK
    assert len((pipeline_dir / "run" / "manifest.jsonl").read_text().splitlines()) == n


def test_ablate_two_variants_one_seed(pipeline_dir, capsys):
    capsys.readouterr()
    code = _run(pipeline_dir, "ablate", "--variants", "acoustic_only", "ssp_base", "--seeds", "1", "--task", "ic")
    assert code == EXIT_OK
    table = _json_out(capsys)
    assert [r["variant"] for r in table] == ["acoustic_only", "ssp_base"]
    assert all(r["std"] is None and r["n"] == 1 for r in table)
    assert _run(pipeline_dir, "ablate", "--variants", "acoustic_only", "ssp_base", "--seeds", "1", "--task", "ic",
                "--format", "csv") == EXIT_OK
    assert capsys.readouterr().out.splitlines()[0] == "variant,metric,mean,std,n,trainable_fraction"


def test_oracle_decode_is_exact(pipeline_dir, capsys):
    capsys.readouterr()
    assert _run(pipeline_dir, "decode", "--oracle") == EXIT_OK
    out = _json_out(capsys)
    assert out["per"] == 0.0 and out["wer"] == 0.0


def test_eval_with_mismatched_corpus_hash(pipeline_dir, capsys):
    cfg = parse_config("\n".join(TINY + [f'output_dir = "{pipeline_dir / "run"}"']))
    Workspace(cfg).finetune("acoustic_only", "ic", 0)
    done_path = next((pipeline_dir / "run" / "finetune").glob("acoustic_only-ic-s0-*/DONE.json"))
    original = done_path.read_text()
    done = json.loads(original)
    done["inputs"]["corpus"] = "0" * 64
    done_path.write_text(json.dumps(done))
    try:
        capsys.readouterr()
        assert _run(pipeline_dir, "eval", "--variant", "acoustic_only", "--task", "ic", "--seed", "0") == EXIT_CONFIG
        assert "different corpus" in capsys.readouterr().err
    finally:
        done_path.write_text(original)


def test_stddev_column_matches_hand_computation():
    runs = {"v": [{"seed": s, "metrics": {"accuracy": a}, "trainable_fraction": 0.1}
                  for s, a in zip((1, 2, 3), (0.5, 0.7, 0.9))]}
    row = ablation_table(runs)[0]
    mean = (0.5 + 0.7 + 0.9) / 3
    hand = (sum((x - mean) ** 2 for x in (0.5, 0.7, 0.9)) / 2) ** 0.5
    assert abs(row["std"] - hand) < 1e-12 and abs(row["mean"] - mean) < 1e-12
    assert row["std"] == pytest.approx(statistics.stdev([0.5, 0.7, 0.9]))


def test_dir_hash_ignores_done_marker(tmp_path):
    (tmp_path / "a.txt").write_text("x")
    h = dir_hash(tmp_path)
    (tmp_path / "DONE.json").write_text("{}")
    assert dir_hash(tmp_path) == h
    (tmp_path / "a.txt").write_text("y")
    assert dir_hash(tmp_path) != h
