"""Run orchestration: sectioned plain-text configs, task assembly, training
and evaluation entry points, scaling sweeps, and FLOP/NFE accounting.

A run is reproducible from its config plus seed alone; the serializer emits a
canonical form so serialize -> parse -> serialize is byte-identical.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autodiff import ContractViolation, Value, make_rng, set_precision
from .model import (
    EnergyModel,
    InstabilityError,
    ModelConfig,
    _CONFIG_PARSERS as MODEL_PARSERS,
    _fmt_value,
    load_model,
    save_model,
)
from .tasks import (
    ToyCorpus,
    apply_noise,
    bundled_images,
    cross_entropy,
    gen_continuous,
    gen_corpus,
    images_to_patches,
    make_schedule,
    make_textures,
    patches_to_images,
    perplexity,
    psnr,
    mse,
    mse_pixel,
)
from .thinking import export_trace, self_verify, thinking_gain
from .training import TrainConfig, Trainer, sequence_smooth_l1

DISCRETE_TASKS = ("copy", "ngram", "dyck")
ALL_TASKS = DISCRETE_TASKS + ("continuous", "denoise")


# ---------------------------------------------------------------------------
# run configuration

@dataclass
class RunSettings:
    task: str = "copy"
    vocab: int = 16
    seq_len: int = 16
    feature_dim: int = 16
    corpus_count: int = 2000
    corpus_seed: int = 0
    max_depth: int = 4
    noise_fraction: float = 0.1
    seed: int = 0
    precision: int = 64
    out_dir: str = "runs/run"
    checkpoint_every: int = 0
    batch_scale_with_params: bool = False

    def validate(self) -> "RunSettings":
        if self.task not in ALL_TASKS:
            raise ContractViolation(f"unknown task {self.task!r}")
        if self.precision not in (32, 64):
            raise ContractViolation(f"precision must be 32 or 64, got {self.precision}")
        if self.checkpoint_every < 0:
            raise ContractViolation("checkpoint_every must be >= 0")
        return self


@dataclass
class ThinkSettings:
    n_steps: int = 0  # 0: use the model's training step budget
    candidates: int = 1
    sigma: float = 0.0
    early_stop_tol: float = 0.0  # 0: no early stopping
    eval_sequences: int = 200

    def validate(self) -> "ThinkSettings":
        if self.n_steps < 0 or self.candidates < 1:
            raise ContractViolation("bad thinking budget")
        if self.eval_sequences < 1:
            raise ContractViolation("eval_sequences must be >= 1")
        return self

    @property
    def tol(self) -> Optional[float]:
        return self.early_stop_tol if self.early_stop_tol > 0 else None


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    think: ThinkSettings = field(default_factory=ThinkSettings)

    def validate(self) -> "RunConfig":
        self.run.validate()
        self.model.validate()
        self.train.validate()
        self.think.validate()
        reconcile(self)
        return self


def _parse_bool(s: str) -> bool:
    if s not in ("true", "false"):
        raise ContractViolation(f"expected true/false, got {s!r}")
    return s == "true"


RUN_PARSERS = {
    "task": str, "vocab": int, "seq_len": int, "feature_dim": int,
    "corpus_count": int, "corpus_seed": int, "max_depth": int,
    "noise_fraction": float, "seed": int, "precision": int, "out_dir": str,
    "checkpoint_every": int, "batch_scale_with_params": _parse_bool,
}
TRAIN_PARSERS = {
    "lr": float, "beta1": float, "beta2": float, "eps": float,
    "weight_decay": float, "grad_clip": float, "warmup_steps": int,
    "total_steps": int, "batch_size": int,
}
THINK_PARSERS = {
    "n_steps": int, "candidates": int, "sigma": float,
    "early_stop_tol": float, "eval_sequences": int,
}

_SECTIONS = (("run", RUN_PARSERS, RunSettings),
             ("model", MODEL_PARSERS, ModelConfig),
             ("train", TRAIN_PARSERS, TrainConfig),
             ("think", THINK_PARSERS, ThinkSettings))


def serialize_run_config(cfg: RunConfig) -> str:
    lines: List[str] = []
    for name, _, _ in _SECTIONS:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(section):
            lines.append(f"{f.name} = {_fmt_value(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"


def parse_run_config(text: str) -> RunConfig:
    sections: Dict[str, Dict[str, str]] = {name: {} for name, _, _ in _SECTIONS}
    current: Optional[str] = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            if current not in sections:
                raise ContractViolation(f"line {lineno}: unknown section [{current}]")
            continue
        if current is None:
            raise ContractViolation(f"line {lineno}: key outside any section")
        key, sep, value = line.partition(" = ")
        if not sep:
            raise ContractViolation(f"line {lineno}: expected 'key = value', got {line!r}")
        sections[current][key] = value

    built = {}
    for name, parsers, cls in _SECTIONS:
        kwargs = {}
        for key, raw in sections[name].items():
            parser = parsers.get(key)
            if parser is None:
                raise ContractViolation(f"unknown key {key!r} in section [{name}]")
            try:
                kwargs[key] = parser(raw)
            except ValueError as err:
                raise ContractViolation(f"bad value for {name}.{key}: {err}") from err
        built[name] = cls(**kwargs)
    return RunConfig(**built).validate()


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            return parse_run_config(fh.read())
    except OSError as err:
        raise ContractViolation(f"cannot read config {path}: {err}") from err


def reconcile(cfg: RunConfig) -> None:
    """Task and model must agree on mode and dimensions."""
    run, model = cfg.run, cfg.model
    if run.task in DISCRETE_TASKS:
        if model.mode != "discrete":
            raise ContractViolation(f"task {run.task} needs a discrete model")
        if model.vocab_size != run.vocab:
            raise ContractViolation(
                f"model vocab {model.vocab_size} != task vocab {run.vocab}")
        if model.bidirectional:
            raise ContractViolation("discrete tasks are causal")
    elif run.task == "continuous":
        if model.mode != "continuous" or model.bidirectional:
            raise ContractViolation("continuous task needs a causal continuous model")
        if model.feature_dim != run.feature_dim:
            raise ContractViolation(
                f"model feature_dim {model.feature_dim} != task {run.feature_dim}")
    else:  # denoise
        if model.mode != "continuous" or not model.bidirectional:
            raise ContractViolation("denoise needs a bidirectional continuous model")
        if model.feature_dim != 16 or run.seq_len != 64:
            raise ContractViolation("denoise uses 4x4 patches of 32x32 images "
                                    "(feature_dim 16, seq_len 64)")


# ---------------------------------------------------------------------------
# FLOP accounting

@dataclass
class FlopReport:
    nonembed_params: float
    per_step_flops: float
    per_token_flops: float
    total: float
    ratio_vs_ff: Fraction


def flops_ff_per_token(n) -> float:
    """Forward+backward training cost of a feed-forward pass: 6 per weight."""
    if n <= 0:
        raise ContractViolation(f"param count must be positive, got {n}")
    return 6 * n


def flops_ebt_per_token(n, steps: int, tokens: int = 1) -> FlopReport:
    """Per descent step: forward, backward to the prediction, backward through
    that gradient, doubled for the outer pass; 20 per weight per step."""
    if n <= 0:
        raise ContractViolation(f"param count must be positive, got {n}")
    if steps < 1:
        raise ContractViolation(f"steps must be >= 1, got {steps}")
    per_step = 20 * n
    per_token = per_step * steps
    return FlopReport(nonembed_params=n, per_step_flops=per_step,
                      per_token_flops=per_token, total=per_token * tokens,
                      ratio_vs_ff=Fraction(20 * steps, 6))


def nonembed_count(model_cfg: ModelConfig) -> int:
    """Closed form for the energy model's capacity-bearing parameter count."""
    d = model_cfg.embed_dim
    hidden = int(d * model_cfg.ffn_mult)
    per_layer = 4 * d * d + 3 * d * hidden + 2 * d
    if not model_cfg.share_pair_weights:
        per_layer += 3 * d * d  # prediction-stream q/k/v; output proj is shared
    return model_cfg.layers * per_layer + 2 * d


def scaled_batch_size(base_batch: int, base_params: int, params: int) -> int:
    """Square-root batch scaling policy for parameter sweeps."""
    if base_batch < 1 or base_params <= 0 or params <= 0:
        raise ContractViolation("bad batch scaling inputs")
    return max(1, int(round(base_batch * math.sqrt(params / base_params))))


# ---------------------------------------------------------------------------
# task assembly

class TaskBundle:
    """Training sampler plus a fixed held-out evaluation set."""

    def __init__(self, run: RunSettings, eval_sequences: int):
        self.run = run
        self.kind = run.task
        self.loss_mask: Optional[np.ndarray] = None
        if run.task in DISCRETE_TASKS:
            corpus = gen_corpus(run.task, run.vocab, run.seq_len,
                                run.corpus_count, run.corpus_seed,
                                max_depth=run.max_depth)
            self.corpus: Optional[ToyCorpus] = corpus
            self.train_rows = corpus.train
            self.loss_mask = corpus.loss_mask
            val = corpus.val[:eval_sequences]
            self.val_ctx, self.val_tgt = val[:, :-1], val[:, 1:]
        elif run.task == "continuous":
            data = gen_continuous(run.corpus_count, run.seq_len,
                                  run.feature_dim, run.corpus_seed)
            n_val = max(1, int(round(0.1 * len(data))))
            order = make_rng(run.corpus_seed).permutation(len(data))
            self.train_rows = data[order[n_val:]]
            val = data[order[:n_val]][:eval_sequences]
            self.val_ctx, self.val_tgt = val[:, :-1], val[:, 1:]
        else:  # denoise
            self.schedule = make_schedule()
            self.train_images = make_textures(run.corpus_count, run.corpus_seed)
            fill = make_textures(max(eval_sequences, 8), run.corpus_seed + 1)
            self.val_clean = np.concatenate([bundled_images(), fill])[:eval_sequences]
            self.val_ctx, self.val_tgt, self.val_noised = \
                self._noised_pairs(self.val_clean, run.noise_fraction)

    def _noised_pairs(self, clean: np.ndarray, fraction: float):
        rng = make_rng(self.run.corpus_seed + 9999)
        sample = apply_noise(clean, fraction, self.schedule, rng)
        return (images_to_patches(sample.noised), images_to_patches(clean),
                sample.noised)

    def val_pair(self, noise_fraction: Optional[float] = None):
        if noise_fraction is not None and self.kind == "denoise" \
                and noise_fraction != self.run.noise_fraction:
            ctx, tgt, _ = self._noised_pairs(self.val_clean, noise_fraction)
            return ctx, tgt
        return self.val_ctx, self.val_tgt

    def sample_batch(self, rng: np.random.Generator, batch_size: int):
        if self.kind == "denoise":
            picks = rng.integers(0, len(self.train_images), size=batch_size)
            sample = apply_noise(self.train_images[picks], self.run.noise_fraction,
                                 self.schedule, rng)
            return images_to_patches(sample.noised), images_to_patches(sample.clean)
        rows = self.train_rows[rng.integers(0, len(self.train_rows), size=batch_size)]
        return rows[:, :-1], rows[:, 1:]


# ---------------------------------------------------------------------------
# evaluation and run entry points

def evaluate(model: EnergyModel, task: TaskBundle, n_steps: int, candidates: int,
             seed: int, sigma: float = 0.0, tol: Optional[float] = None,
             noise_fraction: Optional[float] = None) -> dict:
    """Task metrics on the held-out set at a given thinking budget."""
    ctx, tgt = task.val_pair(noise_fraction)
    pred, trace = self_verify(model, ctx, n_steps=n_steps, candidates=candidates,
                              base_seed=seed, sigma=sigma, early_stop_tol=tol)
    report = {"n_steps": n_steps, "candidates": candidates, "nfe": trace.nfe,
              "sequences": int(ctx.shape[0])}
    if task.kind in DISCRETE_TASKS:
        report["loss"] = cross_entropy(pred, tgt, task.loss_mask)
        report["perplexity"] = perplexity(report["loss"])
    else:
        report["loss"] = float(sequence_smooth_l1(Value(pred), tgt).data)
        if task.kind == "denoise":
            images = patches_to_images(pred)
            clean = patches_to_images(tgt)
            fraction = noise_fraction if noise_fraction is not None \
                else task.run.noise_fraction
            _, _, noised = task._noised_pairs(task.val_clean, fraction)
            report["mse"] = mse(images, clean)
            report["mse_pixel"] = mse_pixel(images, clean)
            report["psnr"] = float(np.mean([psnr(i, c) for i, c in zip(images, clean)]))
            report["psnr_noised"] = float(np.mean(
                [psnr(n, c) for n, c in zip(noised, clean)]))
            report["psnr_gain_db"] = report["psnr"] - report["psnr_noised"]
    return report


def run_train(cfg: RunConfig) -> dict:
    cfg.validate()
    run = cfg.run
    set_precision(run.precision)
    os.makedirs(run.out_dir, exist_ok=True)
    with open(os.path.join(run.out_dir, "config.txt"), "w") as fh:
        fh.write(serialize_run_config(cfg))

    task = TaskBundle(run, cfg.think.eval_sequences)
    model = EnergyModel(cfg.model, seed=run.seed)
    csv_path = os.path.join(run.out_dir, "metrics.csv")
    trainer = Trainer(model, cfg.train, seed=run.seed + 1, csv_path=csv_path,
                      loss_mask=task.loss_mask)
    data_rng = make_rng(run.seed + 2)
    record: dict = {}
    try:
        for step in range(1, cfg.train.total_steps + 1):
            ctx, tgt = task.sample_batch(data_rng, cfg.train.batch_size)
            record = trainer.train_step(ctx, tgt)
            if run.checkpoint_every and step % run.checkpoint_every == 0:
                save_model(model, os.path.join(run.out_dir, f"step{step}.ckpt"))
    finally:
        trainer.close()
    checkpoint = os.path.join(run.out_dir, "model.ckpt")
    save_model(model, checkpoint)
    val = evaluate(model, task, n_steps=model.cfg.num_steps, candidates=1,
                   seed=run.seed + 77, sigma=cfg.think.sigma, tol=cfg.think.tol)
    return {
        "final_loss": record.get("loss"),
        "val_loss": val["loss"],
        "val": val,
        "checkpoint": checkpoint,
        "csv": csv_path,
        "steps": cfg.train.total_steps,
        "nfe_cum": trainer.nfe_cum,
        "flops_cum": trainer.flops_cum,
        "nonembed_params": model.nonembed_param_count(),
    }


def run_eval(checkpoint: str, cfg: RunConfig, n_steps: Optional[int] = None,
             candidates: Optional[int] = None, trace_path: Optional[str] = None,
             noise_fraction: Optional[float] = None) -> dict:
    run = cfg.run
    set_precision(run.precision)
    model = load_model(checkpoint)
    probe = replace(cfg, model=model.cfg)
    reconcile(probe)
    task = TaskBundle(run, cfg.think.eval_sequences)
    n = n_steps if n_steps is not None else (cfg.think.n_steps or model.cfg.num_steps)
    m = candidates if candidates is not None else cfg.think.candidates
    seed = run.seed + 77
    baseline = evaluate(model, task, model.cfg.num_steps, 1, seed,
                        sigma=cfg.think.sigma, tol=cfg.think.tol,
                        noise_fraction=noise_fraction)
    at_budget = evaluate(model, task, n, m, seed, sigma=cfg.think.sigma,
                         tol=cfg.think.tol, noise_fraction=noise_fraction)
    gain = thinking_gain(baseline["loss"], at_budget["loss"],
                         higher_is_better=False).gain
    report = {"baseline": baseline, "at_budget": at_budget,
              "thinking_gain": gain, "nfe": at_budget["nfe"]}
    if trace_path is not None:
        ctx, _ = task.val_pair(noise_fraction)
        pred, trace = self_verify(model, ctx[:1], n_steps=n, candidates=m,
                                  base_seed=seed, sigma=cfg.think.sigma,
                                  early_stop_tol=cfg.think.tol)
        payload = export_trace(trace, ctx[:1],
                               prediction=pred if model.cfg.mode == "discrete" else None)
        with open(trace_path, "w") as fh:
            json.dump(payload, fh, indent=1)
        report["trace"] = trace_path
    return report


# ---------------------------------------------------------------------------
# scaling sweeps

SWEEP_AXES = ("width", "depth", "data", "steps")


def fit_power_law(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log(y) against log(x)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if len(xs) < 2:
        raise ContractViolation("power-law fit needs at least 2 points")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ContractViolation("power-law fit needs positive values")
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def _point_config(base: RunConfig, axis: str, value: int) -> RunConfig:
    run = replace(base.run, out_dir=os.path.join(base.run.out_dir, f"{axis}{value}"))
    model, train = base.model, base.train
    if axis == "width":
        model = replace(model, embed_dim=value)
    elif axis == "depth":
        model = replace(model, layers=value)
    elif axis == "data":
        run = replace(run, corpus_count=value)
    else:  # steps
        model = replace(model, num_steps=value, min_steps=value, max_steps=value)
    if run.batch_scale_with_params and axis in ("width", "depth"):
        train = replace(train, batch_size=scaled_batch_size(
            base.train.batch_size, nonembed_count(base.model), nonembed_count(model)))
    return RunConfig(run=run, model=model, train=train, think=base.think)


def run_sweep(axis: str, grid: Sequence[int], base: RunConfig) -> dict:
    if axis not in SWEEP_AXES:
        raise ContractViolation(f"unknown sweep axis {axis!r} (use {SWEEP_AXES})")
    if len(grid) < 3:
        raise ContractViolation("sweep grid needs at least 3 points")
    points = []
    partial = False
    for value in grid:
        point = {"value": int(value)}
        try:
            cfg = _point_config(base, axis, int(value))
            record = run_train(cfg)
            flops = flops_ebt_per_token(record["nonembed_params"], cfg.model.num_steps)
            point.update(loss=record["val_loss"],
                         nonembed_params=record["nonembed_params"],
                         flops_per_token=float(flops.per_token_flops))
        except (ContractViolation, InstabilityError) as err:
            partial = True
            point["error"] = str(err)
        points.append(point)
    good = [p for p in points if "loss" in p]
    slope = fit_power_law([p["value"] for p in good], [p["loss"] for p in good]) \
        if len(good) >= 2 else None
    return {"axis": axis, "points": points, "slope": slope, "partial": partial}
