import json

import numpy as np
import pytest

from npft import autodiff as ad
from npft.autodiff import NonFiniteError
from npft.data import CalibrationSet
from npft.finetune import NpftConfig, TrainLog, init_adapters, npft_finetune, npft_objective, weights_hash
from npft.model import ModelConfig, build_model
from npft.noise import NoiseSpec, sample_noise
from npft.sensitivity import filter_outliers, fisher_diag
from npft.train import TrainConfig, train_base

from helpers import bigram_stream, central_diff, max_rel_err, toy_model


@pytest.fixture(scope="module")
def trained():
    cfg = ModelConfig(vocab_size=16, d_model=16, n_layers=2, n_heads=2, d_ff=32, context_len=32, seed=0)
    m = build_model(cfg, np.float64)
    toks = bigram_stream(20000, 16, 0)
    train_base(m, toks, TrainConfig(steps=150, lr=1e-2, warmup=10, batch_size=8, seq_len=32))
    cal = CalibrationSet(toks[:8 * 32].reshape(8, 32), 0)
    return m, toks, cal


def _small(**kw):
    base = dict(gamma=0.05, epochs=2, steps_per_epoch=4, batch_size=4, seq_len=32, lr=1e-3)
    base.update(kw)
    return NpftConfig(**base)


def _noise(m, seed=0):
    toks = np.random.default_rng(seed).integers(0, m.cfg.vocab_size, (4, m.cfg.context_len))
    F = fisher_diag(m, CalibrationSet(toks, 0))
    return sample_noise(m, filter_outliers(F, 0.1, m.weight_ids("all")), NoiseSpec(mask_mode="whole_channel"))


def _adapters(m, seed=0):
    ads = init_adapters(m, NpftConfig(seed=seed))
    rng = np.random.default_rng(seed)
    for a in ads:
        a.U.data[...] = rng.normal(0, 0.1, a.U.data.shape)
    return ads


def test_objective_terms():
    m = toy_model(1)
    ads = _adapters(m)
    batch = np.random.default_rng(0).integers(0, 16, (3, 8))
    z = _noise(m)
    total, t1, t2 = npft_objective(m, z, ads, batch, 0.5)
    assert float(t1.data) == m.forward(batch, z.overlays(), ads)[0].item()
    assert float(t2.data) == m.forward(batch, (), ads)[0].item()
    assert float(total.data) == float(t1.data) + 0.5 * float(t2.data)
    total, t1, _ = npft_objective(m, z, ads, batch, 0.0)
    assert float(total.data) == float(t1.data)


def test_objective_without_noise_is_scaled_base_loss():
    m = toy_model(2)
    ads = _adapters(m)
    batch = np.random.default_rng(0).integers(0, 16, (3, 8))
    total, t1, t2 = npft_objective(m, (), ads, batch, 0.5)
    assert float(total.data) == 1.5 * m.forward(batch, (), ads)[0].item()
    assert float(t1.data) == float(t2.data)


def test_objective_gradient_matches_finite_differences():
    m = toy_model(3)
    ads = _adapters(m)
    batch = np.random.default_rng(1).integers(0, 16, (2, 8))
    z = _noise(m, 1)
    total, _, _ = npft_objective(m, z, ads, batch, 0.5)
    ad.backward(total)
    for a in ads[:4]:
        for t in (a.U, a.V):
            fd = central_diff(lambda: float(npft_objective(m, z, ads, batch, 0.5)[0].data), t.data)
            assert max_rel_err(t.grad, fd, floor=1e-6) < 1e-4


def test_zero_lr_single_epoch_is_bitwise_identity(trained):
    m, toks, cal = trained
    merged, log = npft_finetune(m, toks, cal, _small(epochs=1, lr=0.0))
    assert all(merged.params[k].tobytes() == m.params[k].tobytes() for k in m.params)
    assert len(log.steps) == 4


def test_epochs_zero_forbidden():
    with pytest.raises(ValueError):
        NpftConfig(epochs=0)
    with pytest.raises(ValueError):
        NpftConfig(gamma=1.5)
    with pytest.raises(ValueError):
        NpftConfig(layer_subset="embeddings")


def test_base_is_frozen_and_run_is_deterministic(trained):
    m, toks, cal = trained
    h = weights_hash(m)
    a, la = npft_finetune(m, toks, cal, _small(seed=3))
    b, lb = npft_finetune(m, toks, cal, _small(seed=3))
    assert la.base_hash_start == la.base_hash_before_merge == h == weights_hash(m)
    assert la.steps == lb.steps
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert any(not np.array_equal(a.params[k], m.params[k]) for k in m.params)
    c, _ = npft_finetune(m, toks, cal, _small(seed=4))
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)


def test_log_contents(trained, tmp_path):
    m, toks, cal = trained
    _, log = npft_finetune(m, toks, cal, _small(layer_subset="mlp_only"))
    assert [s[0] for s in log.steps] == list(range(8))
    assert all(np.isfinite(v) for s in log.steps for v in s[1:])
    assert [e["epoch"] for e in log.epochs] == [0, 1]
    assert all(e["mask_size"] > 0 and e["noise_rms"] > 0 for e in log.epochs)
    assert all(k.endswith(("mlp_in", "mlp_out")) for k in log.masks[0].keys())
    assert np.isfinite(log.initial_grad_norm)
    d = json.loads(log.to_json(tmp_path / "log.json").read_text())
    assert len(d["steps"]) == 8 and d["epochs"][1]["epoch"] == 1
    lines = log.to_csv(tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,total,perturbed,base" and len(lines) == 9
    assert float(lines[3].split(",")[2]) == log.steps[2][2]


def test_no_noise_no_beta_is_plain_lora(trained):
    m, toks, cal = trained
    _, log = npft_finetune(m, toks, cal, _small(gamma=0.0, beta=0.0))
    assert all(s[1] == s[2] == s[3] for s in log.steps)
    assert all(e["mask_size"] == 0 for e in log.epochs)


def test_per_step_resampling_differs_from_per_epoch(trained):
    m, toks, cal = trained
    _, le = npft_finetune(m, toks, cal, _small())
    _, ls = npft_finetune(m, toks, cal, _small(resample="step"))
    assert le.steps[0][3] == ls.steps[0][3]
    assert le.steps[1:] != ls.steps[1:]


def test_empty_mask_warns():
    m = toy_model(4)
    toks = np.random.default_rng(0).integers(0, 16, 4000)
    cal = CalibrationSet(toks[:32].reshape(4, 8), 0)
    with pytest.warns(UserWarning, match="selects no outliers"):
        npft_finetune(m, toks, cal, _small(gamma=0.001, epochs=1, steps_per_epoch=1, seq_len=8))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts():
    m = toy_model(5)
    m.params["L0.attn_q"][0, 0] = np.inf
    toks = np.random.default_rng(0).integers(0, 16, 4000)
    cal = CalibrationSet(toks[:32].reshape(4, 8), 0)
    with pytest.raises((NonFiniteError, FloatingPointError)):
        npft_finetune(m, toks, cal, _small(gamma=0.0, epochs=1, steps_per_epoch=1, seq_len=8))


def test_final_epoch_mean():
    log = TrainLog(steps=[(0, 3.0, 2.0, 1.0), (1, 3.0, 4.0, 1.0)], epochs=[{}, {}])
    assert log.final_epoch_mean(2) == 4.0
    assert log.final_epoch_mean(3) == 1.0
