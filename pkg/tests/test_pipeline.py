import json
import shutil

import pytest
import yaml

from gerea import cli
from gerea.caption_engine import MockCaptionBackend
from gerea.config import CACHE_ENV, STAGES, checkpoint_cache_dir, config_from_dict, load_config
from gerea.data_io import read_artifact
from gerea.exceptions import ConfigError, StageError
from gerea.pipeline import Pipeline


@pytest.fixture(scope="module")
def completed_run(tmp_path_factory, fixture_dir):
    d = tmp_path_factory.mktemp("run")
    shutil.copytree(fixture_dir / "data", d / "data")
    shutil.copy(fixture_dir / "config.yaml", d / "config.yaml")
    assert cli.main(["run", "--config", str(d / "config.yaml")]) == 0
    return d


def _edit(cfg_path, **changes):
    data = yaml.safe_load(cfg_path.read_text())
    for dotted, value in changes.items():
        node = data
        *head, last = dotted.split("__")
        for k in head:
            node = node[k] if not k.isdigit() else node[int(k)]
        node[last] = value
    cfg_path.write_text(yaml.safe_dump(data))


def test_full_run_artifacts(completed_run):
    out = completed_run / "run"
    for name in ("regions.jsonl", "captions.jsonl", "zeroshot.jsonl", "exemplars.jsonl", "neighbors.jsonl",
                 "predictions.jsonl", "report.json", "report_table.txt", "analysis.json", "manifest.json"):
        assert (out / name).is_file(), name
    cfg = load_config(completed_run / "config.yaml")
    caps = read_artifact(out / "captions.jsonl")
    b = cfg.backends[0]
    assert len(caps) == 16 * b.m * b.n_prompts
    preds = read_artifact(out / "predictions.jsonl")
    assert len(preds) == 8 and all(len(p["seed_answers"]) == 3 for p in preds)
    report = json.loads((out / "report.json").read_text())
    assert report["n_samples"] == 8 and 0 <= report["overall_accuracy"] <= 100
    assert report["caption_count"] == b.m * b.n_prompts
    analysis = json.loads((out / "analysis.json").read_text())
    curve = analysis["caption_curves"][b.backend_id]["n_prompts"]
    assert [p["k"] for p in curve] == list(range(1, b.n_prompts + 1))
    # more prompts can only add hits
    assert all(x["ahr"] <= y["ahr"] for x, y in zip(curve, curve[1:]))
    for seed in cfg.seeds:
        assert (out / "checkpoints" / f"seed{seed}" / "weights.safetensors").is_file()


def test_rerun_skips_everything_and_calls_no_backend(completed_run, capsys):
    cfg = load_config(completed_run / "config.yaml")
    counting = MockCaptionBackend(backend_id=cfg.backends[0].backend_id)
    pipe = Pipeline(cfg, backends=[counting])
    assert pipe.run() == {s: "skipped" for s in STAGES}
    assert counting.calls == 0
    assert cli.main(["evaluate", "--config", str(completed_run / "config.yaml")]) == 0
    assert "evaluate: skipped" in capsys.readouterr().out


def test_tampered_artifact_is_regenerated(completed_run):
    out = completed_run / "run"
    table = out / "report_table.txt"
    original = table.read_text()
    table.write_text("tampered\n")
    pipe = Pipeline(load_config(completed_run / "config.yaml"))
    assert pipe.run_stage("evaluate") == "done"
    assert table.read_text() == original


def test_evaluate_without_predictions_names_predict(fresh_fixture, capsys):
    assert cli.main(["evaluate", "--config", str(fresh_fixture / "config.yaml")]) == 1
    err = capsys.readouterr().err
    assert "predictions.jsonl" in err and "gerea predict" in err


def test_config_change_refused_without_force(fresh_fixture, capsys):
    cfg_path = fresh_fixture / "config.yaml"
    assert cli.main(["regions", "--config", str(cfg_path)]) == 0
    assert cli.main(["regions", "--config", str(cfg_path), "--seed", "3"]) == 1
    assert "--force" in capsys.readouterr().err
    assert cli.main(["regions", "--config", str(cfg_path), "--seed", "3", "--force"]) == 0
    # captions now see regions from another config than their own hash records
    assert cli.main(["captions", "--config", str(cfg_path)]) == 1


def test_workers_do_not_change_outputs(fresh_fixture):
    cfg_path = fresh_fixture / "config.yaml"
    one = Pipeline(load_config(cfg_path))
    one.run(("regions", "captions"))
    a = (one.out / "captions.jsonl").read_bytes()
    _edit(cfg_path, output_dir="run2")
    two = Pipeline(load_config(cfg_path, workers=3))
    two.run(("regions", "captions"))
    assert (two.out / "captions.jsonl").read_bytes() == a


def test_caption_methods_change_grid(fresh_fixture):
    cfg_path = fresh_fixture / "config.yaml"
    for method, per_sample in (("generic", 1), ("question_relevant", load_config(cfg_path).backends[0].m)):
        _edit(cfg_path, caption_method=method, output_dir=f"run-{method}")
        pipe = Pipeline(load_config(cfg_path))
        pipe.run(("regions", "captions"))
        caps = read_artifact(pipe.out / "captions.jsonl")
        assert len(caps) == 16 * per_sample
        assert {c["prompt"] for c in caps} == {"a picture of"}


def test_stage_hashes_are_cumulative():
    base = config_from_dict({})
    other = config_from_dict({"reasoner": {"lr": 1e-3}})
    a, b = base.stage_hashes(), other.stage_hashes()
    assert [a[s] == b[s] for s in STAGES] == [True, True, True] + [False] * 5
    moved = config_from_dict({"output_dir": "elsewhere", "workers": 4, "dataset": {"root": "/x"}})
    assert moved.stage_hashes() == a


def test_config_validation():
    with pytest.raises(ConfigError, match="unknown top-level"):
        config_from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="dataset"):
        config_from_dict({"dataset": {"nme": "okvqa"}})
    with pytest.raises(ConfigError, match="reasoner"):
        config_from_dict({"reasoner": {"learning_rate": 1}})
    with pytest.raises(ConfigError, match="unique"):
        config_from_dict({"backends": [{"backend_id": "a"}, {"backend_id": "a"}]})
    with pytest.raises(ConfigError):
        config_from_dict({"seeds": [1, 1]})
    with pytest.raises(ConfigError):
        config_from_dict({"backends": [{"decoding": {"top_p": 2}}]})


def test_config_defaults():
    cfg = config_from_dict({"backends": [{"backend_id": "l", "style": "llava"}, {"backend_id": "i", "style": "instructblip"}]})
    assert cfg.budgets() == {"l": 80, "i": 40}
    assert cfg.exemplar_N() == 5
    assert [b.resolved_K() for b in cfg.backends] == [30, 20]
    single = config_from_dict({})
    assert single.exemplar_N() == 10 and single.budgets() == {"mock-instructblip": 120}
    assert single.backends[0].decoding_params("test").do_sample is False
    assert single.backends[0].decoding_params("default").do_sample is True


def test_cache_dir_env(monkeypatch):
    monkeypatch.delenv(CACHE_ENV, raising=False)
    assert checkpoint_cache_dir() is None
    monkeypatch.setenv(CACHE_ENV, "/tmp/ckpts")
    assert checkpoint_cache_dir() == "/tmp/ckpts"


def test_cli_exit_codes(tmp_path, fresh_fixture, monkeypatch, capsys):
    assert cli.main(["regions", "--config", str(tmp_path / "missing.yaml")]) == 1
    (tmp_path / "bad.yaml").write_text("a: [1,\n")
    assert cli.main(["regions", "--config", str(tmp_path / "bad.yaml")]) == 1

    def boom(self, stage):
        raise RuntimeError("kaput")

    monkeypatch.setattr(Pipeline, "run_stage", boom)
    assert cli.main(["regions", "--config", str(fresh_fixture / "config.yaml")]) == 2
    assert "kaput" in capsys.readouterr().err


def test_cli_fixture_command(tmp_path, capsys):
    assert cli.main(["fixture", str(tmp_path / "fx")]) == 0
    cfg_path = capsys.readouterr().out.strip()
    cfg = load_config(cfg_path)
    assert cfg.profile == "test"
    pipe = Pipeline(cfg)
    assert len(pipe.samples["train"]) == 8 and len(pipe.samples["eval"]) == 8


def test_unknown_stage():
    with pytest.raises(StageError):
        Pipeline(config_from_dict({})).run_stage("deploy")
