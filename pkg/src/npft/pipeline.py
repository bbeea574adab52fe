"""Experiment stages shared by the command line, the scripts and the tests.

Every stage reads an :class:`ExperimentConfig`, writes its outputs under a run
directory and returns the paths it produced.  Result files hold no wall-clock
data, so identical config and seed reproduce them byte for byte; timings live
in the per-stage manifest.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import platform
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .bench import bench_generate
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, to_dict
from .data import CalibrationSet, Corpus, default_corpus_path, load_corpus, sample_calibration
from .finetune import NpftConfig, npft_finetune
from .model import LanguageModel, build_model, perplexity
from .quant import QuantConfig, quantize_model
from .sensitivity import fisher_diag, sensitivity_report
from .train import Adam, TrainState, subseed, train_base


@dataclass
class Corpora:
    train: Corpus
    valid: Corpus
    calib: Corpus


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, wall_time: float, outputs, extra=None) -> Path:
    m = {"command": command, "config": to_dict(cfg), "config_hash": config_hash(cfg), "seed": cfg.seed,
         "code_version": code_version(), "python": sys.version.split()[0], "numpy": np.__version__,
         "platform": platform.platform(), "argv": sys.argv, "wall_time": wall_time,
         "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
         "outputs": [str(Path(p).relative_to(out)) if Path(p).is_relative_to(out) else str(p) for p in outputs]}
    m.update(extra or {})
    path = out / f"manifest_{command}.json"
    path.write_text(json.dumps(m, indent=2))
    return path


def _resolve(path: str | None) -> Path:
    p = default_corpus_path() if path is None else Path(path)
    if not p.is_file():
        raise ConfigError(f"corpus not found: {p}")
    return p


def load_data(cfg: ExperimentConfig) -> Corpora:
    tr, va, ca = load_corpus(_resolve(cfg.data.corpus), cfg.data.split_fractions)
    if cfg.data.calib_corpus is not None:
        ca, _, _ = load_corpus(_resolve(cfg.data.calib_corpus), (1.0, 0.0, 0.0))
    return Corpora(tr, va, ca)


def calibration(cfg: ExperimentConfig, corpora: Corpora, seed: int | None = None) -> CalibrationSet:
    seed = cfg.seed if seed is None else seed
    return sample_calibration(corpora.calib, cfg.data.calib_n, cfg.data.calib_len, subseed(seed, "calib"))


def eval_sets(cfg: ExperimentConfig, corpora: Corpora) -> dict[str, np.ndarray]:
    out = {}
    for name in cfg.data.eval_corpora:
        if name == "valid":
            toks = corpora.valid.tokens
        elif name == "calib":
            toks = corpora.calib.tokens
        else:
            toks = load_corpus(_resolve(name), (1.0, 0.0, 0.0))[0].tokens
        if cfg.data.eval_max_tokens:
            toks = toks[: cfg.data.eval_max_tokens]
        out[name] = toks
    return out


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_train_base(cfg: ExperimentConfig, out: Path, resume: Path | None = None, until: int | None = None,
                     log=print) -> dict[str, Path]:
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    data = load_data(cfg)
    tcfg = dataclasses.replace(cfg.train, seed=cfg.seed)
    if resume is not None:
        ck = load_checkpoint(resume)
        model = ck.model
        opt = Adam(tcfg.lr)
        opt.load_state(ck.optimizer)
        state = TrainState(step=int(ck.meta["train_step"]),
                           losses=[tuple(x) for x in ck.meta.get("losses", [])])
    else:
        model = build_model(dataclasses.replace(cfg.model, seed=subseed(cfg.seed, "init") % (2 ** 31)),
                            np.float32)
        opt, state = None, None
    opt, state = train_base(model, data.train.tokens, tcfg, opt, state, until=until, log=log)
    ckpt = save_checkpoint(out / "base.ckpt", model,
                           {"stage": "train-base", "train_step": state.step,
                            "final_grad_norm": state.final_grad_norm,
                            "losses": [list(x) for x in state.losses]},
                           optimizer=opt.state())
    loss_csv = out / "base_loss.csv"
    with loss_csv.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for s, l in state.losses:
            w.writerow([s, repr(float(l))])
    summary = out / "base_summary.json"
    summary.write_text(json.dumps({"steps": state.step, "final_loss": state.losses[-1][1] if state.losses else None,
                                   "final_grad_norm": state.final_grad_norm}, indent=2))
    if log:
        log(f"final gradient norm {state.final_grad_norm:.4f}")
    outputs = {"checkpoint": ckpt, "loss_csv": loss_csv, "summary": summary}
    write_manifest(out, "train-base", cfg, time.perf_counter() - t0, outputs.values(),
                   {"final_grad_norm": state.final_grad_norm})
    return outputs


def stage_npft(cfg: ExperimentConfig, out: Path, base_ckpt: Path, control: bool = False, log=print) -> dict[str, Path]:
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    data = load_data(cfg)
    base = load_checkpoint(_exists(base_ckpt)).model
    ncfg = dataclasses.replace(cfg.npft, seed=cfg.seed)
    if control:
        ncfg = dataclasses.replace(ncfg, gamma=0.0)
    name = "control" if control else "npft"
    calib = calibration(cfg, data, ncfg.seed)
    merged, tlog = npft_finetune(base, data.train, calib, ncfg, log_fn=log)
    ckpt = save_checkpoint(out / f"{name}.ckpt", merged,
                           {"stage": name, "npft_config": to_dict(ncfg), "base": str(base_ckpt)})
    j = out / f"{name}_log.json"
    d = tlog.to_dict()
    d.pop("wall_time")
    d["epochs"] = [{k: v for k, v in e.items() if k != "wall_time"} for e in d["epochs"]]
    j.write_text(json.dumps(d, indent=2))
    c = tlog.to_csv(out / f"{name}_log.csv")
    masks = out / f"{name}_masks.npz"
    np.savez(masks, **{f"epoch{i}/{k}": v for i, m in enumerate(tlog.masks) for k, v in m.positions.items()})
    outputs = {"checkpoint": ckpt, "log_json": j, "log_csv": c, "masks": masks}
    write_manifest(out, name, cfg, time.perf_counter() - t0, outputs.values(),
                   {"epoch_wall_times": [e["wall_time"] for e in tlog.epochs]})
    return outputs


def _exists(p) -> Path:
    p = Path(p)
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {p}")
    return p


def quantize_with(model: LanguageModel, qcfg: QuantConfig, calib: CalibrationSet):
    needs_f = qcfg.scheme == "kmeans_nonuniform" or (qcfg.keep_outliers_fp and qcfg.outlier_ratio > 0)
    F = fisher_diag(model, calib, model.weight_ids("all")) if needs_f else None
    return quantize_model(model, qcfg, F)


def stage_quantize(cfg: ExperimentConfig, out: Path, checkpoints, log=print) -> dict[str, Path]:
    if not cfg.quant_arms:
        raise ConfigError("quant_arms must not be empty")
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    data = load_data(cfg)
    calib = calibration(cfg, data)
    outputs = {}
    reports = {}
    for ck_path in checkpoints:
        ck_path = _exists(ck_path)
        model = load_checkpoint(ck_path).model
        for q in cfg.quant_arms:
            qm = quantize_with(model, q, calib)
            name = f"{ck_path.stem}.{q.label}"
            outputs[name] = save_checkpoint(out / f"{name}.ckpt", qm.model,
                                            {"stage": "quantize", "source": str(ck_path),
                                             "quant_config": dataclasses.asdict(q)}, quantized=qm.matrices)
            reports[name] = qm.report.to_dict()
            if log:
                log(f"{name}: {qm.report.effective_bits:.3f} effective bits")
    rpath = out / "bits_report.json"
    rpath.write_text(json.dumps(reports, indent=2))
    outputs["bits_report"] = rpath
    write_manifest(out, "quantize", cfg, time.perf_counter() - t0, outputs.values())
    return outputs


def stage_eval(cfg: ExperimentConfig, out: Path, checkpoints, log=print) -> dict[str, Path]:
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    sets = eval_sets(cfg, load_data(cfg))
    rows = []
    for ck_path in checkpoints:
        ck = load_checkpoint(_exists(ck_path))
        q = ck.meta.get("quant_config")
        for name, toks in sets.items():
            ppl = perplexity(ck.model, toks)
            rows.append({"checkpoint": Path(ck_path).stem, "quant": QuantConfig(**q).label if q else "fp",
                         "corpus": name, "ppl": ppl})
            if log:
                log(f"{Path(ck_path).stem:40s} {name:8s} ppl {ppl:.4f}")
    paths = _write_rows(out / "eval", rows)
    write_manifest(out, "eval", cfg, time.perf_counter() - t0, paths.values())
    return paths


def _write_rows(stem: Path, rows: list[dict]) -> dict[str, Path]:
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    fields = list(rows[0]) if rows else []
    with csv_path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    json_path.write_text(json.dumps(rows, indent=2))
    return {"csv": csv_path, "json": json_path}


SWEEP_AXES = ("gamma", "beta", "layers", "noise")


def sweep_grid(cfg: ExperimentConfig, axis: str) -> list[tuple[str, NpftConfig]]:
    base = dataclasses.replace(cfg.npft, seed=cfg.seed)
    if axis == "gamma":
        return [(f"{g:g}", dataclasses.replace(base, gamma=g)) for g in cfg.sweep.gamma]
    if axis == "beta":
        return [(f"{b:g}", dataclasses.replace(base, beta=b)) for b in cfg.sweep.beta]
    if axis == "layers":
        return [(s, dataclasses.replace(base, layer_subset=s)) for s in cfg.sweep.layers]
    if axis == "noise":
        out = []
        for spec in cfg.sweep.noise:
            label = f"{spec.distribution}+{spec.axis}"
            if spec.magnitude != "quant_bin" or spec.mask_mode != "outliers_only":
                label += f"+{spec.magnitude}+{spec.mask_mode}"
            out.append((label, dataclasses.replace(base, noise=spec)))
        return out
    raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


def stage_sweep(cfg: ExperimentConfig, out: Path, base_ckpt: Path, axis: str, log=print) -> dict[str, Path]:
    grid = sweep_grid(cfg, axis)
    if not cfg.quant_arms:
        raise ConfigError("quant_arms must not be empty")
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    data = load_data(cfg)
    sets = eval_sets(cfg, data)
    base = load_checkpoint(_exists(base_ckpt)).model
    calib = calibration(cfg, data)
    h = config_hash(cfg)
    rows = []
    for value, ncfg in grid:
        merged, tlog = npft_finetune(base, data.train, calibration(cfg, data, ncfg.seed), ncfg)
        arms = [("fp", merged)] + [(q.label, quantize_with(merged, q, calib).model) for q in cfg.quant_arms]
        for label, m in arms:
            for name, toks in sets.items():
                ppl = perplexity(m, toks)
                rows.append({"axis": axis, "value": value, "quant": label, "corpus": name, "ppl": ppl,
                             "final_perturbed_loss": tlog.final_epoch_mean(2), "seed": cfg.seed,
                             "config_hash": h, "manifest": f"manifest_sweep-{axis}.json"})
        if log:
            log(f"{axis}={value}: " + "  ".join(f"{r['quant']} {r['ppl']:.4f}" for r in rows[-len(arms) * len(sets):]))
    paths = _write_rows(out / f"sweep_{axis}", rows)
    write_manifest(out, f"sweep-{axis}", cfg, time.perf_counter() - t0, paths.values(),
                   {"axis": axis, "grid": [v for v, _ in grid]})
    return paths


def stage_bench(cfg: ExperimentConfig, out: Path, checkpoint: Path | None = None, log=print) -> dict[str, Path]:
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if checkpoint is not None:
        model = load_checkpoint(_exists(checkpoint)).model
    else:
        model = build_model(cfg.model, np.float32)
    res = bench_generate(model, cfg.bench)
    path = res.to_csv(out / "bench.csv")
    summary = {f"{a}@{n}": v for (a, n), v in res.summary().items()}
    spath = out / "bench_summary.json"
    spath.write_text(json.dumps(summary, indent=2))
    if log:
        for k, v in summary.items():
            log(f"{k:16s} median {v['median'] * 1e3:9.2f} ms  p10 {v['p10'] * 1e3:9.2f}  p90 {v['p90'] * 1e3:9.2f}")
    write_manifest(out, "bench", cfg, time.perf_counter() - t0, [path, spath], {"threads": cfg.bench.threads})
    return {"csv": path, "summary": spath}


def stage_report(cfg: ExperimentConfig, run_dir: Path, log=print) -> dict[str, Path]:
    """Per-channel Fisher sensitivities of the base and fine-tuned models.

    For every matrix, the output channel holding the most epoch-0 outliers is
    written before and after fine-tuning.
    """
    run_dir = Path(run_dir)
    t0 = time.perf_counter()
    base = load_checkpoint(_exists(run_dir / "base.ckpt")).model
    tuned = load_checkpoint(_exists(run_dir / "npft.ckpt")).model
    masks_path = _exists(run_dir / "npft_masks.npz")
    masks = np.load(masks_path)
    data = load_data(cfg)
    calib = calibration(cfg, data, cfg.seed)
    ids = base.weight_ids(cfg.npft.layer_subset)
    F0 = fisher_diag(base, calib, ids)
    F1 = fisher_diag(tuned, calib, ids)
    rep = run_dir / "report"
    rep.mkdir(exist_ok=True)
    outputs, summary = [], {}
    for wid in ids:
        pos = masks[f"epoch0/{wid.key}"] if f"epoch0/{wid.key}" in masks else np.zeros((0, 2), np.int64)
        rows = pos[:, 0] if len(pos) else np.argmax(F0[wid].sum(axis=1), keepdims=True)
        channel = int(np.bincount(rows).argmax())
        for tag, F in (("pre", F0), ("post", F1)):
            outputs.append(sensitivity_report(F, wid, channel, axis="output").to_csv(rep / f"{wid.key}.{tag}.csv"))
        summary[wid.key] = {"channel": channel,
                            "mask_mass_pre": float(F0[wid][pos[:, 0], pos[:, 1]].sum()) if len(pos) else 0.0,
                            "mask_mass_post": float(F1[wid][pos[:, 0], pos[:, 1]].sum()) if len(pos) else 0.0}
    spath = rep / "summary.json"
    spath.write_text(json.dumps(summary, indent=2))
    outputs.append(spath)
    if log:
        pre = sum(v["mask_mass_pre"] for v in summary.values())
        post = sum(v["mask_mass_post"] for v in summary.values())
        log(f"Fisher mass on epoch-0 outliers: {pre:.5g} -> {post:.5g}")
    write_manifest(run_dir, "report", cfg, time.perf_counter() - t0, outputs)
    return {"dir": rep, "summary": spath}
