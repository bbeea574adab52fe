import csv
import json

import numpy as np
import pytest

from npft.checkpoint import load_checkpoint
from npft.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from npft.config import ConfigError, ExperimentConfig, from_dict, load_config, save_config, to_dict
from npft.data import synthetic_text
from npft.pipeline import sweep_grid

TINY = {
    "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "context_len": 32},
    "train": {"steps": 12, "batch_size": 4, "seq_len": 32, "warmup": 2, "log_every": 100},
    "npft": {"epochs": 2, "steps_per_epoch": 2, "batch_size": 2, "seq_len": 32, "gamma": 0.02},
    "data": {"calib_n": 4, "calib_len": 32, "eval_max_tokens": 400},
    "bench": {"n_tokens": [4, 8], "repeats": 2, "warmup_tokens": 2},
    "sweep": {"gamma": [0.01, 0.02], "layers": ["attn_only", "mlp_only", "all"]},
}


def _write_cfg(tmp, **over):
    d = json.loads(json.dumps(TINY))
    d["data"]["corpus"] = str(tmp / "corpus.txt")
    d.update(over)
    p = tmp / "cfg.json"
    p.write_text(json.dumps(d))
    return p


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    (tmp / "corpus.txt").write_text(synthetic_text(60000, 3))
    cfg = _write_cfg(tmp)
    out = tmp / "out"
    args = ["--config", str(cfg), "--out", str(out), "--deterministic"]
    assert main(["train-base", *args]) == EXIT_OK
    assert main(["npft", *args]) == EXIT_OK
    assert main(["npft", "--control", *args]) == EXIT_OK
    return tmp, cfg, out, args


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig()
    back = load_config(save_config(cfg, tmp_path / "c.json"))
    assert to_dict(back) == to_dict(cfg)
    assert back == cfg


@pytest.mark.parametrize("bad", [{"modle": {}}, {"npft": {"gamma": "high"}}, {"npft": {"gamma": 2.0}},
                                 {"seed": True}, {"quant_arms": [{"bits": 12}]}, {"data": {"split_fractions": [1]}},
                                 {"npft": {"noise": {"distribution": "cauchy"}}}])
def test_config_rejects_bad_input(bad):
    with pytest.raises(ConfigError):
        from_dict(ExperimentConfig, bad)


def test_config_nested_conversion():
    cfg = from_dict(ExperimentConfig, {"npft": {"noise": {"distribution": "laplace"}},
                                       "quant_arms": [{"bits": 2, "scheme": "kmeans_nonuniform"}]})
    assert cfg.npft.noise.distribution == "laplace"
    assert cfg.quant_arms[0].bits == 2 and isinstance(cfg.quant_arms, tuple)


def test_exit_code_for_config_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"npft": {"epochs": 0}}')
    assert main(["train-base", "--config", str(p)]) == EXIT_CONFIG
    assert main(["train-base", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    p.write_text("{not json")
    assert main(["train-base", "--config", str(p)]) == EXIT_CONFIG
    p.write_text(json.dumps({"data": {"corpus": str(tmp_path / "nope.txt")}}))
    assert main(["train-base", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["train-base", "--seed", "-1"]) == EXIT_CONFIG
    assert main(["npft", "--out", str(tmp_path / "empty")]) == EXIT_CONFIG


def test_exit_code_for_numeric_failure(run, tmp_path):
    tmp, cfg, out, _ = run
    d = json.loads(cfg.read_text())
    d["train"]["lr"] = 1e30
    d["train"]["grad_clip"] = 0.0
    p = tmp_path / "explode.json"
    p.write_text(json.dumps(d))
    with np.errstate(all="ignore"):
        code = main(["train-base", "--config", str(p), "--out", str(tmp_path / "x")])
    assert code == EXIT_NUMERIC


def test_train_base_outputs(run):
    _, _, out, _ = run
    for name in ("base.ckpt", "base_loss.csv", "base_summary.json", "manifest_train-base.json"):
        assert (out / name).is_file()
    man = json.loads((out / "manifest_train-base.json").read_text())
    assert {"config", "seed", "code_version", "wall_time", "final_grad_norm"} <= set(man)
    assert man["config"]["model"]["d_model"] == 16 and man["config"]["bench"]["threads"] == 1
    ck = load_checkpoint(out / "base.ckpt")
    assert ck.meta["train_step"] == 12 and ck.optimizer


def test_resume_reproduces_next_loss_bitwise(run, tmp_path):
    _, cfg, out, _ = run
    a = ["--config", str(cfg), "--deterministic"]
    assert main(["train-base", *a, "--out", str(tmp_path / "r"), "--until", "7"]) == EXIT_OK
    assert main(["train-base", *a, "--out", str(tmp_path / "r"), "--resume", str(tmp_path / "r/base.ckpt")]) == 0
    full = (out / "base_loss.csv").read_text()
    resumed = (tmp_path / "r/base_loss.csv").read_text()
    assert full == resumed
    assert all(np.array_equal(v, load_checkpoint(out / "base.ckpt").model.params[k])
               for k, v in load_checkpoint(tmp_path / "r/base.ckpt").model.params.items())


def test_npft_and_control_outputs(run):
    _, _, out, _ = run
    for name in ("npft", "control"):
        assert (out / f"{name}.ckpt").is_file() and (out / f"manifest_{name}.json").is_file()
        log = json.loads((out / f"{name}_log.json").read_text())
        assert len(log["steps"]) == 4
    assert json.loads((out / "control_log.json").read_text())["epochs"][0]["mask_size"] == 0
    masks = np.load(out / "npft_masks.npz")
    assert any(k.startswith("epoch1/") for k in masks.files)


def test_npft_is_reproducible(run, tmp_path):
    _, cfg, out, _ = run
    assert main(["npft", "--config", str(cfg), "--out", str(tmp_path), "--base", str(out / "base.ckpt")]) == 0
    assert (tmp_path / "npft_log.json").read_text() == (out / "npft_log.json").read_text()
    assert (tmp_path / "npft_log.csv").read_text() == (out / "npft_log.csv").read_text()


def test_quantize_and_eval(run):
    _, _, out, args = run
    cks = [str(out / "npft.ckpt"), str(out / "control.ckpt")]
    assert main(["quantize", *args, *cks]) == EXIT_OK
    qdir = out / "quant"
    report = json.loads((qdir / "bits_report.json").read_text())
    assert set(report) == {f"{c}.rtn-w{b}" for c in ("npft", "control") for b in (4, 3)}
    assert all(r["effective_bits"] > 3 for r in report.values())
    qck = load_checkpoint(qdir / "npft.rtn-w4.ckpt")
    assert qck.quantized and qck.meta["quant_config"]["bits"] == 4
    assert main(["eval", *args, *cks, *map(str, sorted(qdir.glob("*.ckpt")))]) == EXIT_OK
    rows = list(csv.DictReader((out / "eval.csv").open()))
    assert len(rows) == 6 and all(float(r["ppl"]) > 1 for r in rows)
    assert {r["quant"] for r in rows} == {"fp", "rtn-w4", "rtn-w3"}


def test_quantize_requires_arms(run, tmp_path):
    tmp, _, out, _ = run
    p = _write_cfg(tmp_path, quant_arms=[])
    (tmp_path / "corpus.txt").write_text((tmp / "corpus.txt").read_text())
    assert main(["quantize", "--config", str(p), "--out", str(tmp_path), str(out / "npft.ckpt")]) == EXIT_CONFIG


def test_sweep_layers_rows(run):
    _, _, out, args = run
    assert main(["sweep", "--axis", "layers", *args]) == EXIT_OK
    rows = json.loads((out / "sweep_layers.json").read_text())
    assert [r["value"] for r in rows if r["quant"] == "fp"] == ["attn_only", "mlp_only", "all"]
    assert all(r["seed"] == 0 and r["manifest"] == "manifest_sweep-layers.json" for r in rows)
    assert (out / "manifest_sweep-layers.json").is_file()


def test_sweep_grids_cover_every_axis():
    cfg = ExperimentConfig()
    assert [v for v, _ in sweep_grid(cfg, "gamma")] == ["0.0005", "0.005", "0.01", "0.02"]
    assert [c.beta for _, c in sweep_grid(cfg, "beta")] == [0.0, 0.5]
    assert len(sweep_grid(cfg, "noise")) == 4
    with pytest.raises(ConfigError):
        sweep_grid(cfg, "lr")


def test_bench_and_report(run):
    _, _, out, args = run
    assert main(["bench", *args, "--checkpoint", str(out / "npft.ckpt")]) == EXIT_OK
    rows = list(csv.DictReader((out / "bench.csv").open()))
    assert len(rows) == 2 * 2 * 3 and {r["threads"] for r in rows} == {"1"}
    assert main(["report", *args]) == EXIT_OK
    summary = json.loads((out / "report" / "summary.json").read_text())
    assert summary
    assert len(list((out / "report").glob("*.pre.csv"))) == len(list((out / "report").glob("*.post.csv"))) > 0
    assert (out / "manifest_report.json").is_file()
