import csv
import json
import shutil

import pytest

from nucleiseg.cli import EXIT_CONFIG, EXIT_RUNTIME, main
from nucleiseg.stages import STAGES

TINY = ["--set", "data.n_train=6", "--set", "data.n_test=3", "--set", "ssl.epochs=1",
        "--set", "detect.epochs=1", "--set", "segment.epochs=1",
        "--set", "saliency.n_reference=4"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "out"
    assert main(["run", "--out", str(out), *TINY]) == 0
    return out


def _stage_dirs(out):
    return sorted(p.name for p in (out / "stages").iterdir())


def test_run_writes_every_stage_with_metadata(run_dir):
    names = _stage_dirs(run_dir)
    assert [n.rsplit("-", 1)[0] for n in names] == sorted(STAGES)
    meta = json.loads((run_dir / "stages" / names[0] / "meta.json").read_text())
    for key in ("config_hash", "stage_key", "data_hash", "seed", "wall_time_s"):
        assert key in meta
    rows = list(csv.DictReader(open(run_dir / "results.csv")))
    assert len(rows) == 4 and rows[-1]["image"] == "summary"
    assert float(rows[-1]["match_radius"]) == 5.0


def test_rerun_is_up_to_date(run_dir, capsys):
    log_lines = len((run_dir / "run.log").read_text().splitlines())
    assert main(["run", "--out", str(run_dir), *TINY]) == 0
    out = capsys.readouterr().out
    assert all(f"{s}: up-to-date" in out for s in STAGES)
    assert len((run_dir / "run.log").read_text().splitlines()) == log_lines


def test_postprocessing_change_reuses_training(run_dir, capsys):
    before = set(_stage_dirs(run_dir))
    assert main(["segment", "--out", str(run_dir), *TINY, "--set", "segment.threshold=0.3"]) == 0
    new = set(_stage_dirs(run_dir)) - before
    assert [n.rsplit("-", 1)[0] for n in new] == ["segment"]
    assert "train-nsn" not in capsys.readouterr().out


def test_missing_upstream_names_stage(run_dir, capsys):
    code = main(["evaluate", "--out", str(run_dir), *TINY, "--set", "segment.lambda_=3"])
    assert code == EXIT_RUNTIME
    assert "'segment'" in capsys.readouterr().err


def test_output_from_environment(run_dir, monkeypatch, capsys):
    monkeypatch.setenv("NUCLEISEG_OUTPUT", str(run_dir))
    assert main(["evaluate", *TINY]) == 0
    assert "evaluate: up-to-date" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["bogus"],
    ["run", "--set", "pseudo.beta=abc"],
    ["run", "--set", "pseudo.nope=1"],
    ["run", "--set", "detect.t_fg=2"],
    ["run", "--config", "/nonexistent.yaml"],
    ["sweep", "--param", "beta"],
])
def test_configuration_errors_exit_1(argv, tmp_path, capsys):
    assert main([*argv, "--out", str(tmp_path)] if argv[0] != "bogus" else argv) == EXIT_CONFIG
    assert capsys.readouterr().err


def test_config_file_layers_over_profile(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("pseudo:\n  beta: 1\n")
    assert main(["synth-data", "--out", str(tmp_path), "--config", str(cfg), *TINY]) == 0
    assert (tmp_path / "data" / "train" / "images").is_dir()
    meta = json.loads((tmp_path / "data" / "DATASET.json").read_text())
    assert meta["data"]["n_train"] == 6


def test_missing_dataset_is_runtime_error(tmp_path, capsys):
    assert main(["pretrain", "--profile", "mask", "--out", str(tmp_path)]) == EXIT_RUNTIME
    assert "does not exist" in capsys.readouterr().err


def test_predictions_from_other_data_are_rejected(run_dir, tmp_path, capsys):
    seg = next((run_dir / "stages").glob("segment-*"))
    copy = tmp_path / "seg"
    shutil.copytree(seg, copy)
    meta = json.loads((copy / "meta.json").read_text())
    meta["data_hash"]["test"] = "0" * 16
    (copy / "meta.json").write_text(json.dumps(meta))
    code = main(["evaluate", "--out", str(run_dir), *TINY, "--predictions", str(copy)])
    assert code == EXIT_RUNTIME
    assert "mismatch" in capsys.readouterr().err
    assert main(["evaluate", "--out", str(run_dir), *TINY, "--predictions", str(seg)]) == 0


def test_sweep_writes_csv_and_chart(run_dir, capsys):
    assert main(["sweep", "--out", str(run_dir), *TINY, "--param", "beta",
                 "--values", "0", "1", "--until", "pseudomask"]) == 0
    path = capsys.readouterr().out.strip().splitlines()[-1]
    rows = list(csv.DictReader(open(path)))
    assert [r["value"] for r in rows] == ["0.0", "1.0"]
    assert all(r["pseudo_f1"] and not r["error"] for r in rows)
    assert open(path[:-4] + ".png", "rb").read(4) == b"\x89PNG"


def test_sweep_failure_keeps_partial_results(run_dir, monkeypatch, capsys):
    from nucleiseg import stages

    real = stages.Workspace.run_until

    def flaky(self, stage):
        if self.cfg.pseudo.beta == 3.0:
            raise RuntimeError("boom")
        return real(self, stage)

    monkeypatch.setattr(stages.Workspace, "run_until", flaky)
    code = main(["sweep", "--out", str(run_dir), *TINY, "--param", "beta",
                 "--values", "0", "3", "--until", "pseudomask"])
    assert code == EXIT_RUNTIME
    path = capsys.readouterr().out.strip().splitlines()[-1]
    rows = list(csv.DictReader(open(path)))
    assert rows[0]["error"] == "" and rows[1]["error"] == "boom"
