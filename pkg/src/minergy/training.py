"""Training engine: backprop through the unrolled energy descent.

Each train step draws an optimization schedule (step count, per-position step
sizes, exploration noise), descends the energy from fresh noise or a replay
snapshot, computes the task loss on the optimized prediction, and
differentiates through the whole unrolled descent to update parameters.
AdamW with decoupled weight decay, global-norm clipping, linear warmup into
cosine decay, and a fixed-column metrics CSV round out the loop.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .autodiff import (
    ContractViolation,
    Value,
    as_value,
    concat,
    grad,
    logsumexp,
    make_rng,
    mean,
    mul,
    no_grad,
    reshape,
    smooth_l1,
    sub,
    sum_,
)
from .model import (
    EnergyModel,
    InstabilityError,
    PredictionState,
)

CSV_COLUMNS = ("step", "loss", "lr", "grad_norm", "e_init_mean", "e_final_mean",
               "n_real", "nfe_cum", "flops_cum")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    warmup_steps: int = 10_000
    total_steps: int = 100_000
    batch_size: int = 8

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ContractViolation("lr must be positive")
        if self.warmup_steps > self.total_steps:
            raise ContractViolation(
                f"warmup {self.warmup_steps} exceeds total steps {self.total_steps}")
        if self.grad_clip <= 0:
            raise ContractViolation("grad_clip must be positive")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")
        return self


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> lr over warmup, then cosine from lr down to lr/10."""
    if step < 0:
        raise ContractViolation("step must be >= 0")
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    progress = 1.0 if span <= 0 else min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * progress)))


class AdamW:
    """Decoupled weight decay; the step-size scalar gets its own learning-rate
    multiplier and no decay."""

    def __init__(self, params: Dict[str, Value], cfg: TrainConfig,
                 alpha_lr_multiplier: float = 1.0):
        self.cfg = cfg
        self.alpha_lr_multiplier = alpha_lr_multiplier
        self.m = {k: np.zeros(v.shape, dtype=v.data.dtype) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape, dtype=v.data.dtype) for k, v in params.items()}
        self.t = 0

    def update(self, params: Dict[str, Value], grads: Dict[str, np.ndarray],
               lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, value in params.items():
            g = grads[name]
            self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            decay = 0.0 if name == "alpha" else c.weight_decay
            lr_p = lr * (self.alpha_lr_multiplier if name == "alpha" else 1.0)
            new = value.data - lr_p * (m_hat / (np.sqrt(v_hat) + c.eps) + decay * value.data)
            params[name] = Value._wrap(new.astype(value.data.dtype, copy=False),
                                       requires_grad=True, producer=None)


# ---------------------------------------------------------------------------
# schedule randomization and replay

@dataclass
class OptimizationSchedule:
    """Realized inner-loop settings for one train step."""
    n_real: int
    alpha_base: float
    alpha_multiplier: Optional[np.ndarray]  # [batch, S] draws, None when factor == 1
    sigma: float
    detach: bool
    truncate: bool


def draw_schedule(cfg, rng: np.random.Generator, batch: int = 1,
                  seq: int = 1) -> OptimizationSchedule:
    cfg.validate()
    if cfg.min_steps == cfg.max_steps:
        n = cfg.num_steps
    else:
        n = int(rng.integers(cfg.min_steps, cfg.max_steps + 1))
    r = cfg.alpha_random_factor
    multiplier = None if r == 1.0 else rng.uniform(1.0 / r, r, size=(batch, seq))
    return OptimizationSchedule(
        n_real=n, alpha_base=cfg.alpha, alpha_multiplier=multiplier,
        sigma=cfg.langevin_sigma, detach=cfg.detach_between_steps,
        truncate=cfg.truncate_loss_to_last_step)


@dataclass
class ReplayEntry:
    context: np.ndarray
    target: np.ndarray
    yhat: np.ndarray
    steps_taken: int


class ReplayBuffer:
    """Bounded FIFO of optimized-prediction snapshots."""

    def __init__(self, capacity: int, sample_probability: float):
        if capacity < 1:
            raise ContractViolation("replay capacity must be >= 1")
        if not 0.0 <= sample_probability <= 1.0:
            raise ContractViolation("sample_probability must be in [0, 1]")
        self.entries: deque = deque(maxlen=capacity)
        self.sample_probability = sample_probability

    def __len__(self) -> int:
        return len(self.entries)


def replay_push(buffer: ReplayBuffer, context: np.ndarray, target: np.ndarray,
                yhat: np.ndarray, steps_taken: int) -> None:
    buffer.entries.append(ReplayEntry(
        context=np.array(context), target=np.array(target),
        yhat=np.array(yhat), steps_taken=steps_taken))


def replay_sample(buffer: ReplayBuffer, rng: np.random.Generator) -> Optional[ReplayEntry]:
    """A stored snapshot with probability sample_probability, else None
    (meaning: start from fresh noise)."""
    if buffer.entries and rng.random() < buffer.sample_probability:
        return buffer.entries[int(rng.integers(len(buffer.entries)))]
    return None


# ---------------------------------------------------------------------------
# differentiable losses

def sequence_cross_entropy(yhat: Value, targets: np.ndarray,
                           mask: Optional[np.ndarray] = None) -> Value:
    """Mean CE of [batch, S, V] logits vs ids; mask weights positions."""
    targets = np.asarray(targets)
    if yhat.shape[:2] != targets.shape:
        raise ContractViolation(f"shape mismatch: {yhat.shape} vs {targets.shape}")
    one_hot = np.zeros(yhat.shape)
    np.put_along_axis(one_hot, targets[..., None], 1.0, axis=-1)
    per_pos = sub(logsumexp(yhat, axis=-1), sum_(mul(yhat, Value(one_hot)), axis=-1))
    return _masked_mean(per_pos, mask)


def sequence_smooth_l1(yhat: Value, targets: np.ndarray,
                       mask: Optional[np.ndarray] = None, beta: float = 1.0) -> Value:
    if yhat.shape != tuple(np.shape(targets)):
        raise ContractViolation(f"shape mismatch: {yhat.shape} vs {np.shape(targets)}")
    per_pos = mean(smooth_l1(sub(yhat, Value(targets)), beta), axis=-1)
    return _masked_mean(per_pos, mask)


def _masked_mean(per_pos: Value, mask: Optional[np.ndarray]) -> Value:
    if mask is None:
        return mean(per_pos)
    weights = np.broadcast_to(np.asarray(mask, dtype=np.float64), per_pos.shape)
    total = float(weights.sum())
    if total == 0:
        raise ContractViolation("empty loss mask")
    return sum_(mul(per_pos, Value(weights / total)))


# ---------------------------------------------------------------------------
# the trainer

class Trainer:
    """Owns the model parameters and optimizer state; one thread."""

    def __init__(self, model: EnergyModel, train_cfg: TrainConfig, seed: int,
                 csv_path: Optional[str] = None, loss_mask: Optional[np.ndarray] = None):
        train_cfg.validate()
        self.model = model
        self.train_cfg = train_cfg
        self.rng = make_rng(seed)
        self.optimizer = AdamW(model.params, train_cfg,
                               alpha_lr_multiplier=model.cfg.alpha_lr_multiplier)
        self.buffer = ReplayBuffer(model.cfg.replay_capacity,
                                   model.cfg.replay_probability) \
            if model.cfg.replay_buffer_enabled else None
        self.loss_mask = loss_mask
        self.step = 0
        self.nfe_cum = 0
        self.flops_cum = 0
        self._nonembed = model.nonembed_param_count()
        self._csv = None
        if csv_path is not None:
            self._csv = open(csv_path, "w")
            self._csv.write(",".join(CSV_COLUMNS) + "\n")

    def close(self) -> None:
        if self._csv is not None:
            self._csv.close()
            self._csv = None

    def _loss(self, yhat: Value, target: np.ndarray) -> Value:
        if self.model.cfg.mode == "discrete":
            return sequence_cross_entropy(yhat, target, self.loss_mask)
        return sequence_smooth_l1(yhat, target, self.loss_mask)

    def train_step(self, context: np.ndarray, target: np.ndarray,
                   n_steps: Optional[int] = None) -> dict:
        cfg = self.model.cfg
        target = np.asarray(target)
        batch, seq = target.shape[:2]
        sched = draw_schedule(cfg, self.rng, batch, seq)
        n = sched.n_real if n_steps is None else n_steps
        if n < 1:
            raise ContractViolation("train_step needs at least one inner step")

        y_init = self.rng.standard_normal((batch, seq, cfg.pred_dim))
        ctx = np.array(context)
        tgt = np.array(target)
        base_steps = np.zeros(batch, dtype=np.int64)
        replayed = 0
        if self.buffer is not None:
            for b in range(batch):
                entry = replay_sample(self.buffer, self.rng)
                if entry is not None and entry.yhat.shape == y_init[b].shape \
                        and entry.context.shape == ctx[b].shape:
                    ctx[b], tgt[b], y_init[b] = entry.context, entry.target, entry.yhat
                    base_steps[b] = entry.steps_taken
                    replayed += 1

        if sched.alpha_multiplier is None:
            alpha_eff = self.model.alpha_value()
        else:
            alpha_eff = mul(as_value(self.model.alpha_value()),
                            Value(sched.alpha_multiplier[..., None]))

        nfe_before = self.model.forward_count
        state = PredictionState(Value(y_init, requires_grad=True), step_index=0)
        step_losses = []
        e_init = 0.0
        try:
            for k in range(n):
                state, out = self.model.think_step(
                    ctx, state, alpha_eff, sched.sigma, self.rng, create_graph=True)
                if k == 0:
                    e_init = out.mean_energy()
                if not sched.truncate or k == n - 1:
                    step_losses.append(self._loss(state.yhat, tgt))
        except InstabilityError as err:
            raise InstabilityError(
                f"train step {self.step}: {err} "
                f"[alpha stats: {self._alpha_stats(alpha_eff)}]",
                err.step_index, err.grad_norm) from err

        loss = step_losses[0] if len(step_losses) == 1 \
            else mul(sum_(_stack_scalars(step_losses)), 1.0 / len(step_losses))
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise InstabilityError(
                f"train step {self.step}: non-finite loss {loss_val} "
                f"[n_real={n}, alpha stats: {self._alpha_stats(alpha_eff)}]", n, loss_val)

        names = list(self.model.params)
        grads = grad(loss, [self.model.params[k] for k in names])
        grad_arrays = {k: g.data for k, g in zip(names, grads)}
        gnorm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64)))
                              for g in grad_arrays.values()))
        if not np.isfinite(gnorm):
            raise InstabilityError(
                f"train step {self.step}: non-finite gradient norm "
                f"[loss={loss_val}, alpha stats: {self._alpha_stats(alpha_eff)}]", n, gnorm)
        clip = self.train_cfg.grad_clip
        if gnorm > clip:
            factor = clip / gnorm
            grad_arrays = {k: g * factor for k, g in grad_arrays.items()}

        self.step += 1
        lr = lr_at(self.step, self.train_cfg)
        self.optimizer.update(self.model.params, grad_arrays, lr)

        with no_grad():
            final_state = PredictionState(state.yhat.detach(), step_index=n)
            e_final = self.model.energy(ctx, final_state).mean_energy()
        if self.buffer is not None:
            for b in range(batch):
                replay_push(self.buffer, ctx[b], tgt[b],
                            state.yhat.data[b], int(base_steps[b]) + n)

        self.nfe_cum += self.model.forward_count - nfe_before
        self.flops_cum += batch * seq * self._nonembed * (20 * n + 2)
        record = {
            "step": self.step,
            "loss": loss_val,
            "lr": lr,
            "grad_norm": gnorm,
            "e_init_mean": e_init,
            "e_final_mean": e_final,
            "n_real": n,
            "nfe_cum": self.nfe_cum,
            "flops_cum": self.flops_cum,
            "grad_norm_post": min(gnorm, clip),
            "energy_gap": e_init - e_final,
            "step_losses": [float(sl.data) for sl in step_losses],
            "replayed": replayed,
            "mean_trajectory_len": float(np.mean(base_steps + n)),
        }
        if self._csv is not None:
            self._csv.write(",".join(
                repr(record[c]) if isinstance(record[c], float) else str(record[c])
                for c in CSV_COLUMNS) + "\n")
            self._csv.flush()
        return record

    def _alpha_stats(self, alpha_eff) -> str:
        arr = alpha_eff.data if isinstance(alpha_eff, Value) else np.asarray(alpha_eff)
        return f"min={float(np.min(arr)):.6g} max={float(np.max(arr)):.6g}"


def _stack_scalars(values) -> Value:
    return concat([reshape(v, (1,)) for v in values], axis=0)
