import csv
import io
import json

import numpy as np
import pytest

from a2fm import cli, harness
from a2fm.config import ExperimentConfig, dump_config
from a2fm.io import load_artifact
from a2fm.metrics import fooling_rate


def small_cfg(**attack):
    return ExperimentConfig().replace(attack={"max_videos": 6, "coherence_videos": 4, **attack})


def run_cli(args, capsys):
    code = cli.main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def cfg_file(tmp_path):
    return dump_config(small_cfg(), tmp_path / "small.yaml")


def test_config_command_prints_canonical_yaml(capsys, tmp_path):
    code, out, _ = run_cli(["config", "--seed", "5", "--out", str(tmp_path)], capsys)
    assert code == 0
    assert (tmp_path / "config.yaml").read_text() == out
    c = ExperimentConfig().replace(dataset={"seed": 5, "eval_seed": 6}, model={"seed": 5}, attack={"seed": 5})
    assert out == c.to_yaml()


def test_gen_data_writes_tensors(capsys, tmp_path):
    code, out, _ = run_cli(["gen-data", "--out", str(tmp_path)], capsys)
    assert code == 0
    info = json.loads(out)
    assert (info["train"], info["test"], info["eval"]) == (144, 16, 64)
    x = load_artifact(tmp_path / "train_x.a2fm")
    y = load_artifact(tmp_path / "train_y.a2fm")
    assert x.shape == (144, 12, 16, 16, 1) and y.shape == (144,)
    data, _ = harness.make_data(ExperimentConfig())
    assert x.tobytes() == data.arrays("train")[0].tobytes()


def test_train_command_writes_checkpoints(capsys, tmp_path):
    cfg = ExperimentConfig().replace(
        dataset={"K": 2, "clips_per_class": 5, "T": 3, "W": 8, "H": 8}, model={"epochs": 1}
    )
    path = dump_config(cfg, tmp_path / "tiny.yaml")
    code, out, _ = run_cli(["train", "--config", str(path), "--out", str(tmp_path / "m")], capsys)
    assert code == 0
    assert out.splitlines()[0] == "model,epochs,train_accuracy,test_accuracy"
    zoo = harness.load_zoo(cfg, tmp_path / "m")
    assert sorted(zoo) == sorted(cfg.model.kinds)


def test_single_attack_csv_is_deterministic(capsys, cfg_file, models_dir, tmp_path):
    args = ["attack", "single", "--config", str(cfg_file), "--models", str(models_dir)]
    code1, out1, _ = run_cli(args + ["--out", str(tmp_path / "a")], capsys)
    code2, out2, _ = run_cli(args + ["--out", str(tmp_path / "b")], capsys)
    assert code1 == code2 == 0
    assert out1 == out2
    assert (tmp_path / "a" / "attack_single.csv").read_bytes() == (tmp_path / "b" / "attack_single.csv").read_bytes()
    rows = list(csv.DictReader(io.StringIO(out1)))
    assert tuple(rows[0]) == harness.COLUMNS
    assert [r["method"] for r in rows] == ["A2FM", "BAM"] * 3
    assert all(r["wallclock_s"] == "" for r in rows)
    assert all(0.0 <= float(r["FR_percent"]) <= 100.0 for r in rows)


def test_json_report_mirrors_csv(capsys, cfg_file, models_dir, tmp_path):
    base = ["attack", "single", "--config", str(cfg_file), "--models", str(models_dir)]
    _, csv_out, _ = run_cli(base, capsys)
    _, json_out, _ = run_cli(base + ["--format", "json"], capsys)
    rows = json.loads(json_out)
    assert [list(r) for r in rows] == [list(harness.COLUMNS)] * len(rows)
    for r, c in zip(rows, csv.DictReader(io.StringIO(csv_out))):
        assert r["FR_percent"] == float(c["FR_percent"]) and r["model"] == c["model"]
        assert r["DIFF"] is None and c["DIFF"] == ""
    p = tmp_path / "r.csv"
    p.write_text(csv_out)
    code, out, _ = run_cli(["report", str(p), "--format", "json"], capsys)
    assert code == 0 and [r["model"] for r in json.loads(out)] == [r["model"] for r in rows]


def test_timing_column_is_opt_in(zoo, eval_clips):
    cfg = small_cfg(method="appended").replace(report={"include_timing": True})
    rows = harness.run_single(cfg, {"Conv3DTiny": zoo["Conv3DTiny"]}, eval_clips[:3])
    with_time = list(csv.DictReader(io.StringIO(harness.render(rows, "csv", True))))
    assert float(with_time[0]["wallclock_s"]) > 0
    assert list(csv.DictReader(io.StringIO(harness.render(rows))))[0]["wallclock_s"] == ""


def test_missing_and_corrupt_checkpoints_are_distinct(capsys, cfg_file, models_dir, tmp_path):
    code, _, err = run_cli(["attack", "single", "--config", str(cfg_file), "--models", str(tmp_path)], capsys)
    assert code != 0 and json.loads(err)["error"] == "CheckpointMissing"
    for f in models_dir.iterdir():
        (tmp_path / f.name).write_bytes(f.read_bytes())
    (tmp_path / "Conv3DTiny.ckpt").write_bytes(b"A2FMCKPT\x01\x00\x05")
    code, _, err = run_cli(["attack", "single", "--config", str(cfg_file), "--models", str(tmp_path)], capsys)
    assert code != 0 and json.loads(err)["error"] == "CheckpointCorrupt"


def test_bad_config_is_reported_with_key(capsys, tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("attack:\n  step: 0.1\n")
    code, out, err = run_cli(["attack", "single", "--config", str(p)], capsys)
    line = json.loads(err)
    assert code != 0 and out == ""
    assert line["error"] == "ConfigError" and "attack.step" in line["message"]


def test_unknown_subcommand_exits_nonzero(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["dance"])
    assert e.value.code != 0


def test_transfer_matrix(zoo, eval_clips):
    cfg = small_cfg(universal_batch=3)
    matrices, rows = harness.loo_transfer(cfg, zoo, eval_clips[:6])
    assert [m.method for m in matrices] == ["A2FM", "BAM"]
    for m in matrices:
        assert m.cells.shape == (3, 3) and m.rows == [f"-{n}" for n in zoo]
        assert ((0 <= m.cells) & (m.cells <= 100)).all()
        assert m.held_out().tolist() == np.diag(m.cells).tolist()
    first = [r for r in rows if r.method == "A2FM-AM(-Conv3DTiny)"]
    assert [r.FR_percent for r in first] == matrices[0].cells[0].tolist()
    with pytest.raises(harness.HarnessError):
        harness.loo_transfer(cfg, {"Conv3DTiny": zoo["Conv3DTiny"]}, eval_clips[:3])


def test_transfer_cells_come_from_fooling_rate(zoo, eval_clips):
    from a2fm import attacks as atk

    cfg = small_cfg(universal_batch=6, method="appended")
    matrices, _ = harness.loo_transfer(cfg, zoo, eval_clips[:6])
    names = list(zoo)
    dummy = harness._dummy(cfg)
    support = atk.support_for(2)
    res = atk.attack_ensemble_models([zoo[n] for n in names[1:]], eval_clips[:6], dummy, harness.attack_config(cfg, support))
    outs = atk.evaluate_perturbation(zoo[names[0]], eval_clips[:6], dummy, res.E, support)
    assert matrices[0].cells[0, 0] == fooling_rate(outs)


def test_universal_rows_include_held_out_batches(zoo, eval_clips):
    cfg = small_cfg(universal_batch=3, method="appended")
    rows = harness.run_universal(cfg, {"Conv3DTiny": zoo["Conv3DTiny"]}, eval_clips[:6])
    assert [r.method for r in rows] == ["A2FM-AV", "A2FM-AV(held-out)"]


def test_sweeps(zoo, eval_clips):
    one = {"Conv3DTiny": zoo["Conv3DTiny"]}
    cfg = small_cfg()
    rows = harness.sweep("spatial_rate", [1.0, 0.2], cfg, one, eval_clips[:3])
    assert [r.method for r in rows] == ["A2FM(rate=1)", "A2FM(rate=0.2)"]
    rows = harness.sweep("pattern", ["GlyphOnDark", "GlyphLarge"], cfg, one, eval_clips[:3])
    assert [r.method for r in rows] == ["A2FM(pattern=GlyphOnDark)", "A2FM(pattern=GlyphLarge)"]
    rows = harness.sweep("lambda_l", [0.0], cfg.replace(attack={"max_iters": 5}), one, eval_clips[:3])
    assert rows[0].method == "A2FM-FS(lambda_l=0)" and rows[0].DIFF >= 0
    with pytest.raises(harness.HarnessError):
        harness.sweep("colour", [1], cfg, one, eval_clips[:3])
    with pytest.raises(harness.HarnessError):
        harness.sweep("pattern", [], cfg, one, eval_clips[:3])


def test_sweep_cli_grid(capsys, cfg_file, models_dir):
    code, out, _ = run_cli(["sweep", "spatial_rate", "--grid", "0.5", "--config", str(cfg_file), "--models", str(models_dir)], capsys)
    assert code == 0
    assert {r["method"] for r in csv.DictReader(io.StringIO(out))} == {"A2FM(rate=0.5)"}


def test_run_config_record(models_dir, tmp_path):
    cfg = small_cfg(mode="targeted")
    rec = harness.run_config(cfg, models_dir, tmp_path)
    again = harness.run_config(cfg, models_dir, tmp_path / "again")
    assert rec.config_hash == cfg.digest() and rec.seed == 0
    assert [r.method for r in rec.rows] == ["A2FM-T", "BAM-T"] * 3
    assert open(rec.artifacts[0], "rb").read() == open(again.artifacts[0], "rb").read()


def test_read_csv_rows_checks_columns(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(harness.HarnessError):
        harness.read_csv_rows(p)
