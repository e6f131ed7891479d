"""The energy model: embeddings, paired-stream transformer blocks, and a
per-position scalar energy head, plus the single descent step shared by
training and inference.

Discrete mode scores a context of token ids against per-position prediction
logits; the logits are softmax-normalized and projected through the (tied)
embedding table, so the energy is differentiable in the prediction.
Continuous mode scores feature sequences directly.  The bidirectional variant
concatenates observed and predicted features per position and attends
all-to-all (used for denoising).

A learnable per-descent-step embedding can be prepended to the observed
stream.  The "s1" regime gives each step its own slot; the "s2" regime shares
slot 0 across steps so every step sees one energy landscape.  When inference
runs more steps than the table holds, the index clamps to the last slot (the
`step_embedding` block op itself rejects out-of-range indices).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, fields, replace
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np

from . import blocks
from .autodiff import (
    ContractViolation,
    Value,
    broadcast_to,
    clamp,
    concat,
    gather_rows,
    grad,
    make_rng,
    matmul,
    mul,
    reshape,
    softmax,
    sum_,
)


class InstabilityError(RuntimeError):
    """Non-finite numbers in the optimization; carries diagnostics."""

    def __init__(self, message: str, step_index: int, grad_norm: float):
        super().__init__(f"{message} (step {step_index}, grad norm {grad_norm})")
        self.step_index = step_index
        self.grad_norm = grad_norm


@dataclass
class ModelConfig:
    """Architecture plus inner-optimization settings.

    `variant` names the regime the defaults were tuned for: "s1" favours
    stable one-pass-style training (detach between steps, loss at every step,
    learnable step size); "s2" favours inference-time reasoning (no detach,
    loss truncated to the final step, randomized step count and step size,
    exploration noise, replay buffer)."""

    variant: str = "s1"
    mode: str = "discrete"
    layers: int = 2
    embed_dim: int = 64
    heads: int = 4
    vocab_size: int = 16
    feature_dim: int = 0
    ffn_mult: float = 1.0
    rotary_base: Optional[float] = 10000.0
    attention_impl: str = "efficient"
    bidirectional: bool = False
    share_pair_weights: bool = True
    tie_vocab_embedding: bool = True
    use_step_embedding: bool = True
    step_embedding_mode: str = "per_step"
    max_step_embeddings: int = 8
    num_steps: int = 2
    alpha: float = 500.0
    alpha_learnable: bool = True
    alpha_lr_multiplier: float = 1500.0
    alpha_random_factor: float = 1.0
    langevin_sigma: float = 0.0
    detach_between_steps: bool = True
    truncate_loss_to_last_step: bool = False
    min_steps: int = 2
    max_steps: int = 2
    replay_buffer_enabled: bool = False
    replay_capacity: int = 256
    replay_probability: float = 0.05
    grad_clamp: Optional[float] = None

    def validate(self) -> "ModelConfig":
        if self.variant not in ("s1", "s2"):
            raise ContractViolation(f"unknown variant {self.variant!r}")
        if self.mode not in ("discrete", "continuous"):
            raise ContractViolation(f"unknown mode {self.mode!r}")
        if self.embed_dim % self.heads:
            raise ContractViolation(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.mode == "discrete" and not (0 < self.vocab_size <= 4096):
            raise ContractViolation(f"vocab_size {self.vocab_size} out of range")
        if self.mode == "continuous" and self.feature_dim <= 0:
            raise ContractViolation("continuous mode needs feature_dim > 0")
        if self.num_steps < 1:
            raise ContractViolation("num_steps must be >= 1")
        if not 1 <= self.min_steps <= self.max_steps:
            raise ContractViolation(
                f"bad randomized-step range [{self.min_steps}, {self.max_steps}]")
        if self.alpha_random_factor < 1.0:
            raise ContractViolation("alpha_random_factor must be >= 1")
        if self.langevin_sigma < 0:
            raise ContractViolation("langevin_sigma must be >= 0")
        if not 0.0 <= self.replay_probability <= 1.0:
            raise ContractViolation("replay_probability must be in [0, 1]")
        if self.step_embedding_mode not in ("per_step", "shared"):
            raise ContractViolation(f"unknown step_embedding_mode {self.step_embedding_mode!r}")
        if self.attention_impl not in ("efficient", "simplified"):
            raise ContractViolation(f"unknown attention_impl {self.attention_impl!r}")
        return self

    @property
    def pred_dim(self) -> int:
        return self.vocab_size if self.mode == "discrete" else self.feature_dim

    def attention(self) -> blocks.AttentionConfig:
        return blocks.AttentionConfig(
            heads=self.heads,
            head_dim=self.embed_dim // self.heads,
            rotary_base=self.rotary_base,
            causal=not self.bidirectional,
        )


def s1_config(mode: str = "discrete", **overrides) -> ModelConfig:
    """Stability-tuned regime: detach between steps, loss every step, learnable
    step size with a boosted learning rate, no landscape regularizers."""
    alpha = 500.0 if mode == "discrete" else 30000.0
    cfg = ModelConfig(
        variant="s1", mode=mode,
        num_steps=2, min_steps=2, max_steps=2,
        alpha=alpha, alpha_learnable=True, alpha_lr_multiplier=3.0 * alpha,
        alpha_random_factor=1.0, langevin_sigma=0.0,
        detach_between_steps=True, truncate_loss_to_last_step=False,
        replay_buffer_enabled=False, step_embedding_mode="per_step",
    )
    return replace(cfg, **overrides).validate()


def s2_config(mode: str = "discrete", **overrides) -> ModelConfig:
    """Thinking-tuned regime: fully differentiable unroll, loss at the final
    step only, randomized step count and step size, exploration noise, replay."""
    cfg = ModelConfig(
        variant="s2", mode=mode,
        num_steps=2, min_steps=2, max_steps=3,
        alpha=5.0, alpha_learnable=False, alpha_lr_multiplier=1.0,
        alpha_random_factor=2.0, langevin_sigma=3.0,
        detach_between_steps=False, truncate_loss_to_last_step=True,
        replay_buffer_enabled=True, step_embedding_mode="shared",
    )
    return replace(cfg, **overrides).validate()


@dataclass
class EnergyOutput:
    """Per-position unnormalized energies, shape [batch, S]; lower = more
    compatible.  No normalization constraint applies."""

    energies: Value

    def mean_energy(self) -> float:
        return float(np.mean(self.energies.data))


@dataclass
class PredictionState:
    """Candidate prediction: logits [batch, S, V] (discrete) or features
    [batch, S, feature_dim] (continuous), plus the descent step counter."""

    yhat: Value
    step_index: int = 0


def init_prediction(batch: int, s: int, dims: int,
                    seed: Union[int, np.random.Generator]) -> PredictionState:
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    y = Value(rng.standard_normal((batch, s, dims)), requires_grad=True)
    return PredictionState(yhat=y, step_index=0)


def descend_energy(energy_fn: Callable[[PredictionState], EnergyOutput],
                   state: PredictionState,
                   alpha_eff,
                   sigma: float,
                   rng: Optional[np.random.Generator] = None,
                   *,
                   grad_clamp: Optional[float] = None,
                   detach_between_steps: bool = False,
                   create_graph: bool = True) -> Tuple[PredictionState, EnergyOutput]:
    """One descent step: y' = y - alpha_eff * dE/dy + noise.

    `alpha_eff` may be a scalar, a scalar Value (learnable step size), or a
    per-(batch, position) array broadcast over the prediction dim.  With
    `detach_between_steps` the incoming state is severed from its history
    first, so gradients of a later loss reach parameters only through this
    step's energy gradient.  The update itself stays differentiable whenever
    `create_graph` is set (training); inference passes False and detaches.
    """
    if sigma < 0:
        raise ContractViolation("sigma must be >= 0")
    y = state.yhat
    if detach_between_steps or not y.requires_grad:
        y = y.detach(requires_grad=True)
    out = energy_fn(PredictionState(yhat=y, step_index=state.step_index))
    (g,) = grad(sum_(out.energies), [y], create_higher_order_graph=create_graph)
    gnorm = float(np.sqrt(np.sum(np.square(g.data, dtype=np.float64))))
    if not np.isfinite(gnorm):
        raise InstabilityError("non-finite energy gradient", state.step_index, gnorm)
    if grad_clamp is not None:
        g = clamp(g, -grad_clamp, grad_clamp)

    if isinstance(alpha_eff, Value):
        alpha_v = alpha_eff
    else:
        arr = np.asarray(alpha_eff)
        if np.any(arr < 0):
            raise ContractViolation("alpha_eff must be >= 0 elementwise")
        alpha_v = Value(arr.reshape(arr.shape + (1,)) if arr.ndim == 2 else arr)
    updated = y - mul(alpha_v, g)
    if sigma > 0:
        if rng is None:
            raise ContractViolation("sigma > 0 requires an rng")
        updated = updated + Value(rng.normal(0.0, sigma, size=y.shape))
    return PredictionState(yhat=updated, step_index=state.step_index + 1), out


class EnergyModel:
    """E(context, prediction) with per-position scalar outputs.

    Parameters live in an ordered name->Value dict; `forward_count` counts
    energy evaluations (the NFE instrumentation cross-checked by the thinking
    engine)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.forward_count = 0
        self.params: Dict[str, Value] = {}
        rng = make_rng(seed)
        d = cfg.embed_dim
        hidden = int(d * cfg.ffn_mult)

        if cfg.mode == "discrete":
            self.params["tok_embed"] = blocks.xavier_uniform(rng, cfg.vocab_size, d)
            if not cfg.tie_vocab_embedding:
                self.params["vocab_proj"] = blocks.xavier_uniform(rng, cfg.vocab_size, d)
        else:
            in_dim = 2 * cfg.feature_dim if cfg.bidirectional else cfg.feature_dim
            self.params["in_proj"] = blocks.xavier_uniform(rng, in_dim, d)
        if cfg.use_step_embedding and not cfg.bidirectional:
            self.params["step_table"] = blocks.xavier_uniform(rng, cfg.max_step_embeddings, d)

        for i in range(cfg.layers):
            attn = blocks.init_attention_params(rng, d, shared_pair=cfg.share_pair_weights)
            for k, v in attn.items():
                self.params[f"layer{i}.attn.{k}"] = v
            self.params[f"layer{i}.norm1"] = Value(np.ones(d), requires_grad=True)
            self.params[f"layer{i}.norm2"] = Value(np.ones(d), requires_grad=True)
            mlp = blocks.init_mlp_params(rng, d, hidden)
            for k, v in mlp.items():
                self.params[f"layer{i}.mlp.{k}"] = v
        self.params["final_norm"] = Value(np.ones(d), requires_grad=True)
        self.params["energy_head"] = blocks.xavier_uniform(rng, d, 1)
        if cfg.alpha_learnable:
            self.params["alpha"] = Value(np.array(cfg.alpha), requires_grad=True)

    # -- parameter bookkeeping -------------------------------------------------

    EMBEDDING_PARAMS = ("tok_embed", "vocab_proj", "in_proj", "step_table")

    def nonembed_param_count(self) -> int:
        """Parameter count excluding embedding tables, input projections and
        the step-size scalar (capacity-bearing weights only)."""
        return sum(v.size for k, v in self.params.items()
                   if k not in self.EMBEDDING_PARAMS and k != "alpha")

    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())

    def alpha_value(self):
        return self.params["alpha"] if self.cfg.alpha_learnable else self.cfg.alpha

    def _attn_params(self, i: int) -> dict:
        prefix = f"layer{i}.attn."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def _mlp_params(self, i: int) -> dict:
        prefix = f"layer{i}.mlp."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    # -- forward ---------------------------------------------------------------

    def vocab_to_embed(self, distribution: Value) -> Value:
        """Weighted sum of embedding rows under a probability vector."""
        table = self.params["tok_embed"] if self.cfg.tie_vocab_embedding \
            else self.params["vocab_proj"]
        return matmul(distribution, table)

    def _embed_context(self, context) -> Value:
        if self.cfg.mode == "discrete":
            ids = np.asarray(context)
            if ids.ndim != 2:
                raise ContractViolation(f"context ids must be [batch, S], got {ids.shape}")
            return gather_rows(self.params["tok_embed"], ids)
        feats = context if isinstance(context, Value) else Value(context)
        return feats

    def energy(self, context, state: PredictionState) -> EnergyOutput:
        """Per-position energies [batch, S]; counts one forward pass."""
        cfg = self.cfg
        acfg = cfg.attention()
        if cfg.bidirectional:
            obs = self._embed_context(context)
            if obs.shape[:2] != state.yhat.shape[:2]:
                raise ContractViolation(
                    f"context/prediction length mismatch: {obs.shape} vs {state.yhat.shape}")
            stream = matmul(concat([obs, state.yhat], axis=-1), self.params["in_proj"])
            for i in range(cfg.layers):
                normed = blocks.rms_normalize(stream, self.params[f"layer{i}.norm1"])
                stream = stream + blocks.bidirectional_attention(normed, acfg, self._attn_params(i))
                normed = blocks.rms_normalize(stream, self.params[f"layer{i}.norm2"])
                stream = stream + blocks.gated_mlp(normed, self._mlp_params(i))
            final = blocks.rms_normalize(stream, self.params["final_norm"])
        else:
            obs = self._embed_context(context)
            if cfg.mode == "discrete":
                pred = self.vocab_to_embed(softmax(state.yhat, axis=-1))
            else:
                obs = matmul(obs, self.params["in_proj"])
                pred = matmul(state.yhat, self.params["in_proj"])
            if obs.shape[1] != pred.shape[1]:
                raise ContractViolation(
                    f"context/prediction length mismatch: {obs.shape} vs {pred.shape}")
            if cfg.use_step_embedding:
                idx = state.step_index if cfg.step_embedding_mode == "per_step" else 0
                idx = min(idx, cfg.max_step_embeddings - 1)  # think-longer clamps to last slot
                slot = blocks.step_embedding(self.params["step_table"], idx)
                b = obs.shape[0]
                slot = reshape(slot, (1, 1, cfg.embed_dim))
                obs = concat([broadcast_to(slot, (b, 1, cfg.embed_dim)), obs], axis=1)
            attend = blocks.pair_attention_efficient if cfg.attention_impl == "efficient" \
                else blocks.pair_attention_simplified
            z_o, z_p = obs, pred
            for i in range(cfg.layers):
                n_o = blocks.rms_normalize(z_o, self.params[f"layer{i}.norm1"])
                n_p = blocks.rms_normalize(z_p, self.params[f"layer{i}.norm1"])
                att = attend(blocks.SequencePair(z_o=n_o, z_p=n_p), acfg, self._attn_params(i))
                z_o = z_o + att.z_o
                z_p = z_p + att.z_p
                z_o = z_o + blocks.gated_mlp(
                    blocks.rms_normalize(z_o, self.params[f"layer{i}.norm2"]), self._mlp_params(i))
                z_p = z_p + blocks.gated_mlp(
                    blocks.rms_normalize(z_p, self.params[f"layer{i}.norm2"]), self._mlp_params(i))
            final = blocks.rms_normalize(z_p, self.params["final_norm"])
        energies = reshape(matmul(final, self.params["energy_head"]), final.shape[:2])
        self.forward_count += 1
        return EnergyOutput(energies=energies)

    def think_step(self, context, state: PredictionState, alpha_eff, sigma: float,
                   rng: Optional[np.random.Generator] = None,
                   create_graph: bool = True) -> Tuple[PredictionState, EnergyOutput]:
        return descend_energy(
            lambda st: self.energy(context, st), state, alpha_eff, sigma, rng,
            grad_clamp=self.cfg.grad_clamp,
            detach_between_steps=self.cfg.detach_between_steps and create_graph,
            create_graph=create_graph)


# ---------------------------------------------------------------------------
# checkpoint container: text header + flat little-endian float32 payload

_MAGIC = "minergy-checkpoint v1"


def _fmt_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_opt_float(s: str):
    return None if s == "none" else float(s)


def _parse_bool(s: str) -> bool:
    if s not in ("true", "false"):
        raise ContractViolation(f"expected true/false, got {s!r}")
    return s == "true"


_CONFIG_PARSERS = {
    "variant": str, "mode": str, "layers": int, "embed_dim": int, "heads": int,
    "vocab_size": int, "feature_dim": int, "ffn_mult": float,
    "rotary_base": _parse_opt_float, "attention_impl": str,
    "bidirectional": _parse_bool, "share_pair_weights": _parse_bool,
    "tie_vocab_embedding": _parse_bool, "use_step_embedding": _parse_bool,
    "step_embedding_mode": str, "max_step_embeddings": int,
    "num_steps": int, "alpha": float, "alpha_learnable": _parse_bool,
    "alpha_lr_multiplier": float, "alpha_random_factor": float,
    "langevin_sigma": float, "detach_between_steps": _parse_bool,
    "truncate_loss_to_last_step": _parse_bool, "min_steps": int, "max_steps": int,
    "replay_buffer_enabled": _parse_bool, "replay_capacity": int,
    "replay_probability": float, "grad_clamp": _parse_opt_float,
}


def config_to_pairs(cfg: ModelConfig) -> list:
    return [(f.name, _fmt_value(getattr(cfg, f.name))) for f in fields(cfg)]


def config_from_pairs(pairs: dict) -> ModelConfig:
    kwargs = {}
    for key, raw in pairs.items():
        parser = _CONFIG_PARSERS.get(key)
        if parser is None:
            raise ContractViolation(f"unknown model config key {key!r}")
        kwargs[key] = parser(raw)
    return ModelConfig(**kwargs).validate()


def write_checkpoint(path: str, config_pairs: list, params: Dict[str, Value]) -> None:
    header = io.StringIO()
    header.write(_MAGIC + "\n[config]\n")
    for k, v in config_pairs:
        header.write(f"{k} = {v}\n")
    header.write("[tensors]\n")
    offset = 0
    for name, value in params.items():
        shape = ",".join(str(e) for e in value.shape) or "scalar"
        header.write(f"{name} {shape} {offset}\n")
        offset += value.size * 4
    header.write("[data]\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("utf-8"))
        for value in params.values():
            fh.write(np.ascontiguousarray(value.data, dtype="<f4").tobytes())


def read_checkpoint(path: str) -> Tuple[dict, Dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as err:
        raise ContractViolation(f"cannot read checkpoint {path}: {err}") from err
    marker = b"[data]\n"
    split = blob.find(marker)
    if split < 0 or not blob.startswith(_MAGIC.encode()):
        raise ContractViolation(f"not a checkpoint file: {path}")
    header = blob[:split].decode("utf-8").splitlines()
    payload = blob[split + len(marker):]
    config: dict = {}
    tensors: Dict[str, np.ndarray] = {}
    section = ""
    for line in header[1:]:
        if line in ("[config]", "[tensors]"):
            section = line
            continue
        if section == "[config]":
            key, _, val = line.partition(" = ")
            config[key] = val
        elif section == "[tensors]":
            name, shape_s, off_s = line.rsplit(" ", 2)
            shape = () if shape_s == "scalar" else tuple(int(x) for x in shape_s.split(","))
            count = int(np.prod(shape)) if shape else 1
            off = int(off_s)
            arr = np.frombuffer(payload[off:off + 4 * count], dtype="<f4").reshape(shape)
            tensors[name] = arr
    return config, tensors


def save_model(model: EnergyModel, path: str) -> None:
    write_checkpoint(path, config_to_pairs(model.cfg), model.params)


def load_model(path: str) -> EnergyModel:
    config, tensors = read_checkpoint(path)
    cfg = config_from_pairs(config)
    model = EnergyModel(cfg, seed=0)
    if set(tensors) != set(model.params):
        missing = set(model.params) ^ set(tensors)
        raise ContractViolation(f"checkpoint/model parameter mismatch: {sorted(missing)}")
    for name, arr in tensors.items():
        if tuple(arr.shape) != model.params[name].shape:
            raise ContractViolation(
                f"shape mismatch for {name}: {arr.shape} vs {model.params[name].shape}")
        model.params[name] = Value(arr, requires_grad=True)
    return model
