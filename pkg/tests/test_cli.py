from __future__ import annotations

import json

import numpy as np
import pytest

from lntune.cli import dispatch, read_config
from lntune.containers import load_checkpoint
from lntune.fisher import FisherMap, MaskSpec
from lntune.model import param_shapes, preset

DEV_BITFIT = [0.9145, 0.9278, 0.8399, 0.8457, 0.6364, 0.9183, 0.9043, 0.7473, 0.8476]
DEV_LAYERNORM = [0.9072, 0.9312, 0.8285, 0.8348, 0.6412, 0.9130, 0.9039, 0.7401, 0.8361]


@pytest.fixture(autouse=True)
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("LNTUNE_SEED", raising=False)
    return tmp_path


def run(capsys, *argv):
    code = dispatch(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def _write_vec(path, name, values):
    path.write_text(name + "\n" + "\n".join(map(str, values)) + "\n")


def test_count_params_golden(capsys):
    code, out, _ = run(capsys, "count-params", "--preset", "bert-large-cased", "--selector", "all")
    assert code == 0 and out.strip() == "333581314"


def test_count_params_on_checkpoint(capsys, workdir):
    assert run(capsys, "init", "--preset", "tiny", "--out", "t.ckpt")[0] == 0
    code, out, _ = run(capsys, "count-params", "--checkpoint", "t.ckpt", "--selector", "output.LayerNorm")
    assert out.strip() == "32"


def test_kwtest_dev_rows(capsys, workdir):
    _write_vec(workdir / "a.csv", "bitfit", DEV_BITFIT)
    _write_vec(workdir / "b.csv", "layernorm", DEV_LAYERNORM)
    code, out, _ = run(capsys, "kwtest", "a.csv", "b.csv")
    assert code == 0
    p = float(out.splitlines()[1].split("=")[1])
    assert abs(p - 0.56599) <= 0.005
    manifest = json.loads((workdir / "lntune-kwtest.manifest.json").read_text())
    assert set(manifest["inputs"]) == {"a.csv", "b.csv"}


def _fisher_files(workdir, rng):
    shapes = {p: s for p, s in param_shapes(preset("tiny")).items() if ".LayerNorm." in p}
    names = []
    for t in ("T1", "T2", "T3"):
        FisherMap({p: rng.random(s) for p, s in shapes.items()}, t, 10).save(workdir / f"{t}.fisher")
        names.append(f"{t}.fisher")
    return names


def test_cv_mask_equals_global_over_rest(capsys, workdir, rng):
    files = _fisher_files(workdir, rng)
    assert run(capsys, "mask", "--mode", "cv", "--exclude", "T1", "-f", "0.4", "--fisher", *files,
               "--out", "cv.mask")[0] == 0
    assert run(capsys, "mask", "--mode", "global", "-f", "0.4", "--fisher", *files[1:], "--out", "g.mask")[0] == 0
    assert (workdir / "cv.mask").read_bytes() == (workdir / "g.mask").read_bytes()
    assert MaskSpec.load(workdir / "cv.mask").count() == 13  # round-half-up(0.4 * 32)


def test_mask_task_mode_and_errors(capsys, workdir, rng):
    files = _fisher_files(workdir, rng)
    assert run(capsys, "mask", "--mode", "task", "--task", "T2", "-f", "0.5", "--fisher", *files,
               "--out", "t.mask")[0] == 0
    assert MaskSpec.load(workdir / "t.mask").sources == ("T2",)
    code, _, err = run(capsys, "mask", "--mode", "cv", "-f", "0.5", "--fisher", *files, "--out", "x.mask")
    assert code == 1 and "exclude" in err


def test_usage_errors_exit_2(capsys):
    assert run(capsys, "count-params", "--no-such-flag")[0] == 2
    assert run(capsys, "frobnicate")[0] == 2
    assert run(capsys)[0] == 2
    assert run(capsys, "mask", "--mode", "sideways", "-f", "1", "--fisher", "a", "--out", "b")[0] == 2


def test_runtime_failure_exit_1(capsys, workdir):
    code, _, err = run(capsys, "drift", "missing1.ckpt", "missing2.ckpt", "--out", "d.csv")
    assert code == 1 and "missing1.ckpt" in err
    assert not (workdir / "d.csv.manifest.json").exists()


def test_rank_components_and_heatmap(capsys, workdir, rng):
    shapes = param_shapes(preset("tiny"))
    for t in ("A", "B"):
        FisherMap({p: rng.random(s) for p, s in shapes.items()}, t, 4).save(workdir / f"{t}.fisher")
    code, out, _ = run(capsys, "rank-components", "A.fisher", "B.fisher", "--out", "rank.csv")
    assert code == 0 and len(out.splitlines()) == 8
    assert (workdir / "rank.csv").read_text().startswith("rank,component,score\n1,")
    code, _, _ = run(capsys, "heatmap", "A.fisher", "B.fisher", "--out", "hm.csv", "--svg", "hm.svg")
    assert code == 0
    assert (workdir / "hm.csv").read_text().splitlines()[0] == "layer,weight_sum,bias_sum"
    assert (workdir / "hm.svg").read_text().startswith("<svg")
    # two maps, each normalized to unit total over the output.LayerNorm cells
    rows = [line.split(",") for line in (workdir / "hm.csv").read_text().splitlines()[1:]]
    assert len(rows) == 2
    assert sum(float(w) + float(b) for _, w, b in rows) == pytest.approx(2.0, abs=1e-12)


def test_drift_between_checkpoints(capsys, workdir):
    run(capsys, "init", "--preset", "tiny", "--out", "a.ckpt", "--seed", "1")
    params, cfg = load_checkpoint(workdir / "a.ckpt")
    from lntune.containers import save_checkpoint

    params["encoder.layer.0.output.dense.bias"] = params["encoder.layer.0.output.dense.bias"] + 0.25
    save_checkpoint(workdir / "b.ckpt", params, cfg)
    assert run(capsys, "drift", "a.ckpt", "b.ckpt", "--out", "d.csv", "--svg", "d.svg")[0] == 0
    lines = (workdir / "d.csv").read_text().splitlines()
    assert lines[0] == "layer,component,D" and len(lines) == 1 + 2 * 8
    nonzero = [line for line in lines[1:] if float(line.split(",")[2]) != 0]
    # biases start at zero, so the 8 shifted elements move by exactly 0.25; 8*16 + 8 elements in the cell
    assert len(nonzero) == 1 and nonzero[0].startswith("0,output.dense,")
    assert float(nonzero[0].split(",")[2]) == 0.25 * 8 / 136


def test_manifest_contents(capsys, workdir):
    assert run(capsys, "init", "--preset", "tiny", "--out", "m.ckpt", "--seed", "4")[0] == 0
    manifest = json.loads((workdir / "m.ckpt.manifest.json").read_text())
    assert manifest["command"] == "init" and manifest["seeds"] == {"seed": 4}
    assert set(manifest["outputs"]) == {"m.ckpt"} and len(manifest["outputs"]["m.ckpt"]) == 64
    assert manifest["tool_version"]
    text = (workdir / "m.ckpt.manifest.json").read_text()
    assert text == json.dumps(manifest, indent=2, sort_keys=True) + "\n"


def test_env_seed_overrides(capsys, workdir, monkeypatch):
    monkeypatch.setenv("LNTUNE_SEED", "9")
    run(capsys, "init", "--preset", "tiny", "--out", "a.ckpt", "--seed", "1")
    monkeypatch.delenv("LNTUNE_SEED")
    run(capsys, "init", "--preset", "tiny", "--out", "b.ckpt", "--seed", "9")
    assert (workdir / "a.ckpt").read_bytes() == (workdir / "b.ckpt").read_bytes()


def test_config_file_supplies_defaults(capsys, workdir):
    (workdir / "run.cfg").write_text("# tiny model\npreset = tiny\nseed = 3\nout = c.ckpt\n")
    assert run(capsys, "init", "--config", "run.cfg")[0] == 0
    assert run(capsys, "init", "--preset", "tiny", "--seed", "3", "--out", "d.ckpt")[0] == 0
    assert (workdir / "c.ckpt").read_bytes() == (workdir / "d.ckpt").read_bytes()
    # flags beat the file
    assert run(capsys, "init", "--config", "run.cfg", "--seed", "5", "--out", "e.ckpt")[0] == 0
    assert (workdir / "e.ckpt").read_bytes() != (workdir / "d.ckpt").read_bytes()
    manifest = json.loads((workdir / "c.ckpt.manifest.json").read_text())
    assert "run.cfg" in manifest["inputs"]
    (workdir / "bad.cfg").write_text("colour = blue\n")
    assert run(capsys, "init", "--config", "bad.cfg", "--out", "x.ckpt")[0] == 2


def test_read_config_syntax(workdir):
    (workdir / "c.cfg").write_text("a = 1\n\n  lr-scale = 100  # inline\n")
    assert read_config(workdir / "c.cfg") == {"a": "1", "lr_scale": "100"}
    (workdir / "d.cfg").write_text("oops\n")
    with pytest.raises(ValueError, match="line 1"):
        read_config(workdir / "d.cfg")


def test_train_writes_artifacts(capsys, workdir):
    code, out, _ = run(capsys, "train", "--preset", "tiny", "--train", "synth://single/1/16",
                       "--validation", "synth://single/2/8", "--strategy", "bitfit", "--epochs", "2",
                       "--lr-grid", "0.01", "--out-dir", "run")
    # the tiny vocabulary is too small for the synthetic word ids
    assert code == 1
    code, out, _ = run(capsys, "train", "--train", "synth://single/1/16", "--validation", "synth://single/2/8",
                       "--strategy", "bitfit", "--epochs", "2", "--lr-grid", "0.01,0.02", "--out-dir", "run")
    assert code == 0 and out.startswith("bitfit: lr=")
    files = sorted(p.name for p in (workdir / "run").iterdir())
    assert files == ["best.ckpt", "manifest.json", "metrics.csv", "report.json", "start.ckpt"]
    report = json.loads((workdir / "run" / "report.json").read_text())
    assert report["frozen_checksum_before"] == report["frozen_checksum_after"]
    assert len((workdir / "run" / "metrics.csv").read_text().splitlines()) == 1 + 2 * 2


def test_train_with_mask_file(capsys, workdir):
    run(capsys, "init", "--out", "base.ckpt")
    params, _ = load_checkpoint(workdir / "base.ckpt")
    ln = {p: np.ones(v.shape) for p, v in params.items() if ".output.LayerNorm." in p}
    FisherMap(ln, "x", 1).save(workdir / "x.fisher")
    run(capsys, "mask", "--mode", "task", "-f", "0.25", "--fisher", "x.fisher", "--out", "q.mask")
    code, out, _ = run(capsys, "train", "--checkpoint", "base.ckpt", "--train", "synth://single/1/16",
                       "--validation", "synth://single/2/8", "--strategy", "mask", "--mask", "q.mask",
                       "--epochs", "1", "--lr-grid", "0.01", "--out-dir", "m")
    assert code == 0 and out.rstrip().endswith(f"trainable={32 + 66}")
    assert run(capsys, "train", "--train", "synth://single/1/16", "--validation", "synth://single/2/8",
               "--strategy", "mask", "--epochs", "1", "--out-dir", "n")[0] == 1


def test_pretrain_and_regression_head(capsys, workdir):
    assert run(capsys, "pretrain", "--samples", "32", "--epochs", "1", "--out", "p.ckpt")[0] == 0
    _, cfg = load_checkpoint(workdir / "p.ckpt")
    assert cfg.head_outputs == 8
    code, out, _ = run(capsys, "fisher", "--checkpoint", "p.ckpt", "--train", "synth://pairreg/1/4",
                       "--max-samples", "9", "--out", "r.fisher")
    assert code == 0
    fm = FisherMap.load(workdir / "r.fisher")
    assert fm.n_samples == 4 and fm.warnings and fm.values["classifier.weight"].shape == (1, 32)
