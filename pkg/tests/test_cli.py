import csv
import json

import jsonschema
import pytest

from eata.cli import DEFAULT_CONFIG, OUTPUT_ENV, load_config, main, metrics_schema
from eata.containers import load_checkpoint, load_dataset, load_fisher
from eata.errors import ConfigurationError
from eata.fisher import fisher_for

SMALL = ["--classes", "3", "--dim", "6", "--per-class", "100"]


def run(*argv):
    return main([str(a) for a in argv])


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("make-data", "source", *SMALL, "--seed", 1, "--out-dir", d) == 0
    assert run("make-data", "id", *SMALL, "--seed", 1, "--count", 64, "--out-dir", d) == 0
    assert run("make-data", "stream", *SMALL, "--seed", 1, "--shift", "gaussian-noise:5",
               "--batch-size", 16, "--out-dir", d, "--name", "noise.bin") == 0
    assert run("make-data", "stream", *SMALL, "--seed", 1, "--shift", "feature-scale:4",
               "--batch-size", 16, "--out-dir", d, "--name", "scale.bin") == 0
    assert run("pretrain", "--data", d / "train.bin", "--test", d / "test.bin", "--hidden", "8,8",
               "--epochs", 3, "--train-lr", 0.01, "--seed", 1, "--out-dir", d) == 0
    assert run("fisher", "--checkpoint", d / "base.ckpt", "--id-samples", d / "id.bin",
               "--q", 50, "--out-dir", d) == 0
    return d


def file_args(d, *streams):
    args = ["--checkpoint", d / "base.ckpt", "--fisher", d / "fisher.bin", "--clean", d / "test.bin"]
    for s in streams or ("noise.bin",):
        args += ["--stream", d / s]
    return args


def validate(path):
    doc = read_json(path)
    jsonschema.validate(doc, metrics_schema())
    return doc


def test_pretrain_report(files):
    report = read_json(files / "pretrain.json")
    assert 0.5 < report["test_accuracy"] <= 1.0
    assert report["arch"]["hidden_dims"] == [8, 8]
    assert len(report["checkpoint_sha256"]) == 64


def test_pretrain_deterministic(files, tmp_path):
    assert run("pretrain", "--data", files / "train.bin", "--hidden", "8,8", "--epochs", 3,
               "--train-lr", 0.01, "--seed", 1, "--out-dir", tmp_path) == 0
    assert (tmp_path / "base.ckpt").read_bytes() == (files / "base.ckpt").read_bytes()


def test_pretrain_rejects_one_class(tmp_path):
    assert run("pretrain", "--classes", 1, "--out-dir", tmp_path) == 2


def test_fisher_matches_library(files):
    params = load_checkpoint(files / "base.ckpt")
    ids = load_dataset(files / "id.bin")
    f, arch = load_fisher(files / "fisher.bin")
    lib = fisher_for(params, ids.features[:50])
    assert arch == params.arch and f.sample_count == 50
    assert f.omega.tobytes() == lib.omega.tobytes()


def test_fisher_q_too_large(files, tmp_path):
    assert run("fisher", "--checkpoint", files / "base.ckpt", "--id-samples", files / "id.bin",
               "--q", 65, "--out-dir", tmp_path) == 2


def test_source_clean_equals_pretrain_report(files, tmp_path):
    assert run("adapt", *file_args(files), "--method", "source", "--out-dir", tmp_path) == 0
    doc = validate(tmp_path / "metrics.json")
    run_ = doc["repetitions"][0]["runs"][0]
    assert run_["clean_accuracy"] == read_json(files / "pretrain.json")["test_accuracy"]
    assert run_["n_backward_samples"] == 0


def test_adapt_outputs_and_accounting(files, tmp_path):
    assert run("adapt", *file_args(files), "--method", "eata", "--out-dir", tmp_path) == 0
    doc = validate(tmp_path / "metrics.json")
    r = doc["repetitions"][0]["runs"][0]
    assert r["n_backward_samples"] + r["n_skipped_samples"] == r["n_forward_samples"] == r["total"]
    assert doc["adapt"]["selection"]["epsilon"] == pytest.approx(0.4 * (10 / 3) ** 0.5)
    trace = read_csv(tmp_path / "trace.csv")
    assert len(trace) == len(r["batch_accuracy"])
    assert set(doc["inputs"]) >= {"checkpoint:base.ckpt", "fisher:fisher.bin", "stream:noise.bin"}


@pytest.mark.parametrize("kind", ["sequential-forgetting", "lifelong-forgetting"])
def test_forgetting_tables(files, tmp_path, kind):
    assert run("adapt", *file_args(files, "noise.bin", "scale.bin"), "--kind", kind,
               "--method", "tent", "--out-dir", tmp_path) == 0
    doc = validate(tmp_path / "metrics.json")
    rows = read_csv(tmp_path / "forgetting.csv")
    assert [r["shift"] for r in rows] == ["gaussian-noise-5", "feature-scale-4"]
    assert len(doc["repetitions"][0]["runs"]) == 2
    for r in rows:
        assert float(r["clean_drop"]) == pytest.approx(float(r["clean_before"]) - float(r["clean_accuracy"]))


def test_rerun_is_byte_identical(files, tmp_path):
    for sub in ("a", "b"):
        assert run("adapt", *file_args(files), "--method", "eta", "--out-dir", tmp_path / sub) == 0
    for name in ("metrics.json", "trace.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_output_env_var(files, tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert run("adapt", *file_args(files), "--method", "tent", "--no-trace") == 0
    assert (tmp_path / "env" / "metrics.json").exists()
    assert not (tmp_path / "env" / "trace.csv").exists()
    assert run("adapt", *file_args(files), "--method", "tent", "--no-trace",
               "--out-dir", tmp_path / "flag") == 0
    assert (tmp_path / "flag" / "metrics.json").read_bytes() == \
        (tmp_path / "env" / "metrics.json").read_bytes()


def test_config_precedence(tmp_path, monkeypatch):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"adapt": {"lr": 0.2, "method": "tent"},
                                "paths": {"output_dir": "from-file"}}))
    cfg = load_config(path)
    assert cfg["adapt"]["lr"] == 0.2 and cfg["adapt"]["momentum"] == 0.9
    monkeypatch.setenv(OUTPUT_ENV, "from-env")
    cfg = load_config(path, flags={"adapt.lr": 0.3})
    assert cfg["paths"]["output_dir"] == "from-env" and cfg["adapt"]["lr"] == 0.3
    cfg = load_config(path, sets=["adapt.lr=0.4", "paths.output_dir=from-set"], flags={"adapt.lr": 0.3})
    assert cfg["adapt"]["lr"] == 0.4 and cfg["paths"]["output_dir"] == "from-set"
    assert DEFAULT_CONFIG["adapt"]["lr"] != 0.4
    with pytest.raises(ConfigurationError):
        load_config(sets=["adapt.learning_rate=1"])
    path.write_text(json.dumps({"adapt": {"speed": 1}}))
    with pytest.raises(ConfigurationError):
        load_config(path)


def test_grid_of_one_equals_adapt(files, tmp_path):
    assert run("adapt", *file_args(files), "--method", "tent", "--lr", 0.02,
               "--out-dir", tmp_path / "a") == 0
    assert run("sweep", *file_args(files), "--grid", "lr", "--lrs", "0.02", "--methods", "tent",
               "--out-dir", tmp_path / "s") == 0
    adapt = validate(tmp_path / "a" / "metrics.json")["repetitions"][0]["runs"][0]
    rows = read_csv(tmp_path / "s" / "sweep.csv")
    assert len(rows) == 1
    assert float(rows[0]["stream_accuracy"]) == adapt["stream_accuracy"]
    assert int(rows[0]["n_backward_samples"]) == adapt["n_backward_samples"]


def test_sweep_rows_match_grid(files, tmp_path):
    assert run("sweep", *file_args(files), "--grid", "length", "--lengths", "100,200,300",
               "--methods", "tent,eata", "--out-dir", tmp_path) == 0
    validate(tmp_path / "metrics.json")
    rows = read_csv(tmp_path / "sweep.csv")
    assert len(rows) == 6
    assert sorted({int(r["n"]) for r in rows}) == [100, 200, 300]


def test_partition_study(files, tmp_path):
    assert run("partition-study", *file_args(files), "--percents", "20,100",
               "--out-dir", tmp_path) == 0
    validate(tmp_path / "metrics.json")
    rows = read_csv(tmp_path / "partition.csv")
    assert len(rows) == 4
    full = [r for r in rows if float(r["percent"]) == 100]
    assert full[0]["final_accuracy"] == full[1]["final_accuracy"]
    assert int(rows[0]["n_samples"]) < int(full[0]["n_samples"])
    assert run("partition-study", *file_args(files), "--percents", "0",
               "--out-dir", tmp_path) == 2


def test_desk_mode_repetitions(tmp_path):
    assert run("adapt", "--method", "eta", "--repetitions", 2, "--seed", 3,
               "--set", "desk.stream_len=256", "--out-dir", tmp_path) == 0
    doc = validate(tmp_path / "metrics.json")
    assert [r["seed"] for r in doc["repetitions"]] == [3, 4]
    assert (tmp_path / "trace_seed3.csv").exists() and (tmp_path / "trace_seed4.csv").exists()
    assert doc["repetitions"][0]["runs"][0]["total"] == 256


def test_exit_codes(files, tmp_path):
    assert run("adapt", "--checkpoint", tmp_path / "missing.ckpt", "--stream", files / "noise.bin",
               "--method", "tent", "--out-dir", tmp_path) == 2
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"EATATENS\x01\x00")
    assert run("adapt", "--checkpoint", bad, "--stream", files / "noise.bin", "--method", "tent",
               "--out-dir", tmp_path) == 4
    assert run("adapt", *file_args(files), "--method", "tent", "--lr", "inf",
               "--out-dir", tmp_path) == 3
    assert run("adapt", *file_args(files), "--set", "adapt.nope=1", "--out-dir", tmp_path) == 2
    assert run("adapt", *file_args(files), "--method", "sgd") == 2
    assert run("frobnicate") == 2
    assert run("adapt", "--checkpoint", files / "base.ckpt", "--stream", files / "noise.bin",
               "--method", "eata", "--out-dir", tmp_path) == 2


def test_make_data_csv(tmp_path):
    assert run("make-data", "stream", *SMALL, "--shift", "mask-dropout:2", "--shift", "rotation:1",
               "--order", "mixed", "--n", 150, "--csv", "--out-dir", tmp_path) == 0
    rows = read_csv(tmp_path / "stream.csv")
    assert len(rows) == 150 and {r["tag"] for r in rows} == {"0", "1"}


def test_schema_is_valid_draft():
    schema = metrics_schema()
    jsonschema.Draft202012Validator.check_schema(schema)
    assert schema["properties"]["schema_version"]["const"] == 1
