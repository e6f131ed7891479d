"""Inference-time reasoning on the energy landscape.

Thinking longer runs more descent steps per prediction; self-verification
optimizes several candidates in parallel and keeps, per position, the one
whose final energy is lowest.  Both record an energy trace (the energy of the
state entering each step) and an NFE count equal to the forward passes
performed.  The relative-improvement metric compares a task metric at some
compute budget against the single-trajectory training-budget baseline.

No parameter gradients flow here: states are detached between steps and the
descent runs without building the higher-order graph.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ContractViolation, Value, make_rng
from .model import EnergyModel, InstabilityError, PredictionState, init_prediction

DEFAULT_EARLY_STOP_TOL = 1e-4


@dataclass
class EnergyTrace:
    """energies[candidate, batch, position, step]; chosen[batch, position] is
    the selected candidate index (all zeros for a single trajectory)."""

    energies: np.ndarray
    chosen: np.ndarray
    nfe: int


def _seq_len(context) -> int:
    shape = context.shape if hasattr(context, "shape") else np.shape(context)
    return shape[1]


def think(model: EnergyModel, context, n_steps: int, alpha=None,
          sigma: float = 0.0, seed: int = 0,
          early_stop_tol: Optional[float] = None) -> Tuple[np.ndarray, EnergyTrace]:
    """Descend the energy from fresh noise for up to n_steps.

    The final performed step is always noise-free.  With `early_stop_tol`,
    descent finishes early (one noise-free step after the mean absolute
    energy change drops below the tolerance), so nfe may be below n_steps.
    """
    if n_steps < 1:
        raise ContractViolation("n_steps must be >= 1")
    if alpha is None:
        alpha = model.alpha_value()
    if isinstance(alpha, Value):
        alpha = float(alpha.data)
    rng = make_rng(seed)
    batch, seq = np.shape(context)[0], _seq_len(context)
    state = init_prediction(batch, seq, model.cfg.pred_dim, rng)

    recorded: List[np.ndarray] = []
    finish = False
    k = 0
    while k < n_steps:
        last = finish or k == n_steps - 1
        state, out = model.think_step(context, state, alpha,
                                      0.0 if last else sigma, rng,
                                      create_graph=False)
        energies = out.energies.data
        if not np.all(np.isfinite(energies)):
            raise InstabilityError("non-finite energy during thinking", k,
                                   float(np.max(np.abs(energies))))
        recorded.append(np.array(energies))
        state = PredictionState(state.yhat.detach(), state.step_index)
        if last:
            break
        if early_stop_tol is not None and len(recorded) >= 2:
            delta = float(np.mean(np.abs(recorded[-1] - recorded[-2])))
            if delta < early_stop_tol:
                finish = True  # wrap up with one noise-free step
        k += 1

    energies = np.stack(recorded, axis=-1)[None]  # [1, batch, seq, steps]
    trace = EnergyTrace(energies=energies,
                        chosen=np.zeros((batch, seq), dtype=np.int64),
                        nfe=len(recorded))
    return state.yhat.data, trace


def self_verify(model: EnergyModel, context, n_steps: int, candidates: int,
                seeds: Optional[Sequence[int]] = None, alpha=None,
                sigma: float = 0.0, base_seed: int = 0,
                early_stop_tol: Optional[float] = None) -> Tuple[np.ndarray, EnergyTrace]:
    """Best-of-N: optimize `candidates` independent trajectories and keep the
    minimum-final-energy candidate per position."""
    if candidates < 1:
        raise ContractViolation("candidates must be >= 1")
    if seeds is None:
        seeds = [base_seed + j for j in range(candidates)]
    if len(seeds) != candidates:
        raise ContractViolation(f"got {len(seeds)} seeds for {candidates} candidates")

    predictions = []
    traces = []
    max_steps = 0
    for seed in seeds:
        pred, trace = think(model, context, n_steps, alpha=alpha, sigma=sigma,
                            seed=seed, early_stop_tol=early_stop_tol)
        predictions.append(pred)
        traces.append(trace)
        max_steps = max(max_steps, trace.energies.shape[-1])

    batch, seq = traces[0].energies.shape[1:3]
    energies = np.empty((candidates, batch, seq, max_steps))
    for j, trace in enumerate(traces):
        row = trace.energies[0]
        if row.shape[-1] < max_steps:  # early-stopped: pad with the settled value
            pad = np.repeat(row[..., -1:], max_steps - row.shape[-1], axis=-1)
            row = np.concatenate([row, pad], axis=-1)
        energies[j] = row

    chosen = np.argmin(energies[..., -1], axis=0)  # [batch, seq]
    stacked = np.stack(predictions)  # [M, batch, seq, dims]
    b_idx, s_idx = np.meshgrid(np.arange(batch), np.arange(seq), indexing="ij")
    prediction = stacked[chosen, b_idx, s_idx]
    trace = EnergyTrace(energies=energies, chosen=chosen,
                        nfe=sum(t.nfe for t in traces))
    return prediction, trace


def count_nfe(trace: EnergyTrace) -> int:
    return trace.nfe


@dataclass
class ImprovementReport:
    """Relative gain of spending more inference compute: gain = ratio - 1,
    with the ratio oriented so that positive means better."""

    baseline_metric: float
    metric_at_budget: float
    gain: float


def thinking_gain(baseline_metric: float, metric_at_budget: float,
                  higher_is_better: bool = False) -> ImprovementReport:
    if baseline_metric <= 0:
        raise ContractViolation(f"baseline metric must be positive, got {baseline_metric}")
    if higher_is_better:
        gain = metric_at_budget / baseline_metric - 1.0
    else:
        if metric_at_budget == 0:
            raise ContractViolation("loss-like metric of 0 cannot be ratio-compared")
        gain = baseline_metric / metric_at_budget - 1.0
    return ImprovementReport(baseline_metric=baseline_metric,
                             metric_at_budget=metric_at_budget, gain=gain)


# ---------------------------------------------------------------------------
# JSON trace export

def context_id(context) -> str:
    arr = np.ascontiguousarray(context.data if isinstance(context, Value) else context)
    digest = hashlib.sha1()
    digest.update(str(arr.shape).encode())
    digest.update(arr.tobytes())
    return digest.hexdigest()


def export_trace(trace: EnergyTrace, context, prediction: Optional[np.ndarray] = None) -> dict:
    """Single-context trace as a JSON-ready dict:
    {context_id, positions: [{tokens, energies: [[step]...], chosen}], nfe}."""
    if trace.energies.shape[1] != 1:
        raise ContractViolation("trace export covers a single context (batch of 1)")
    m, _, seq, _ = trace.energies.shape
    tokens_per_pos = None
    if prediction is not None and prediction.ndim == 3:  # [batch, seq, vocab] logits
        tokens_per_pos = np.argmax(prediction, axis=-1)
    positions = []
    for s in range(seq):
        entry = {
            "tokens": None if tokens_per_pos is None else [int(tokens_per_pos[0, s])],
            "energies": [trace.energies[j, 0, s].tolist() for j in range(m)],
            "chosen": int(trace.chosen[0, s]),
        }
        positions.append(entry)
    return {"context_id": context_id(context), "positions": positions, "nfe": trace.nfe}


def validate_trace_json(obj) -> dict:
    """Returns the parsed trace; raises on schema violations.  Accepts dicts
    or JSON text."""
    if isinstance(obj, str):
        obj = json.loads(obj)
    for key in ("context_id", "positions", "nfe"):
        if key not in obj:
            raise ContractViolation(f"trace missing key {key!r}")
    if not isinstance(obj["nfe"], int) or obj["nfe"] < 1:
        raise ContractViolation("trace nfe must be a positive integer")
    for i, pos in enumerate(obj["positions"]):
        for key in ("tokens", "energies", "chosen"):
            if key not in pos:
                raise ContractViolation(f"position {i} missing key {key!r}")
        rows = pos["energies"]
        if not rows or not all(isinstance(r, list) and r for r in rows):
            raise ContractViolation(f"position {i} has empty energy rows")
        if not 0 <= pos["chosen"] < len(rows):
            raise ContractViolation(f"position {i} chosen index out of range")
    return obj
