"""Feed-forward decoder baseline: the same blocks predicting next-token
logits directly in one forward pass (per-token NFE is always 1).  Serves as
the reference point for FLOP ratios and task-loss comparisons."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Dict, Optional

import numpy as np

from . import blocks
from .autodiff import (
    ContractViolation,
    Value,
    gather_rows,
    grad,
    make_rng,
    matmul,
    transpose,
)
from .model import _fmt_value, _parse_opt_float, read_checkpoint, write_checkpoint
from .training import AdamW, TrainConfig, lr_at, sequence_cross_entropy


@dataclass
class BaselineConfig:
    layers: int = 2
    embed_dim: int = 64
    heads: int = 4
    vocab_size: int = 16
    ffn_mult: float = 1.0
    rotary_base: Optional[float] = 10000.0

    def validate(self) -> "BaselineConfig":
        if self.embed_dim % self.heads:
            raise ContractViolation(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not 0 < self.vocab_size <= 4096:
            raise ContractViolation(f"vocab_size {self.vocab_size} out of range")
        return self

    def attention(self) -> blocks.AttentionConfig:
        return blocks.AttentionConfig(heads=self.heads,
                                      head_dim=self.embed_dim // self.heads,
                                      rotary_base=self.rotary_base, causal=True)


_BASELINE_PARSERS = {
    "layers": int, "embed_dim": int, "heads": int, "vocab_size": int,
    "ffn_mult": float, "rotary_base": _parse_opt_float,
}


class FeedForwardLM:
    """Pre-norm causal transformer with a tied output head."""

    def __init__(self, cfg: BaselineConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.forward_count = 0
        self.params: Dict[str, Value] = {}
        rng = make_rng(seed)
        d = cfg.embed_dim
        hidden = int(d * cfg.ffn_mult)
        self.params["tok_embed"] = blocks.xavier_uniform(rng, cfg.vocab_size, d)
        for i in range(cfg.layers):
            for k, v in blocks.init_attention_params(rng, d).items():
                self.params[f"layer{i}.attn.{k}"] = v
            self.params[f"layer{i}.norm1"] = Value(np.ones(d), requires_grad=True)
            self.params[f"layer{i}.norm2"] = Value(np.ones(d), requires_grad=True)
            for k, v in blocks.init_mlp_params(rng, d, hidden).items():
                self.params[f"layer{i}.mlp.{k}"] = v
        self.params["final_norm"] = Value(np.ones(d), requires_grad=True)

    def nonembed_param_count(self) -> int:
        return sum(v.size for k, v in self.params.items() if k != "tok_embed")

    def forward(self, ids: np.ndarray) -> Value:
        """Next-token logits [batch, S, V]; one forward pass, NFE 1/token."""
        cfg = self.cfg
        acfg = cfg.attention()
        x = gather_rows(self.params["tok_embed"], np.asarray(ids))
        for i in range(cfg.layers):
            prefix = f"layer{i}."
            attn_params = {k[len(prefix) + 5:]: v for k, v in self.params.items()
                           if k.startswith(prefix + "attn.")}
            mlp_params = {k[len(prefix) + 4:]: v for k, v in self.params.items()
                          if k.startswith(prefix + "mlp.")}
            normed = blocks.rms_normalize(x, self.params[prefix + "norm1"])
            x = x + blocks.standard_causal_attention(normed, acfg, attn_params)
            normed = blocks.rms_normalize(x, self.params[prefix + "norm2"])
            x = x + blocks.gated_mlp(normed, mlp_params)
        final = blocks.rms_normalize(x, self.params["final_norm"])
        logits = matmul(final, transpose(self.params["tok_embed"], (1, 0)))
        self.forward_count += 1
        return logits


def baseline_ff_transformer(cfg: BaselineConfig, seed: int = 0) -> FeedForwardLM:
    return FeedForwardLM(cfg, seed)


class BaselineTrainer:
    """Plain supervised loop sharing the optimizer and LR schedule."""

    def __init__(self, model: FeedForwardLM, train_cfg: TrainConfig, seed: int,
                 loss_mask: Optional[np.ndarray] = None):
        train_cfg.validate()
        self.model = model
        self.train_cfg = train_cfg
        self.rng = make_rng(seed)
        self.optimizer = AdamW(model.params, train_cfg)
        self.loss_mask = loss_mask
        self.step = 0

    def train_step(self, context: np.ndarray, target: np.ndarray) -> dict:
        logits = self.model.forward(context)
        loss = sequence_cross_entropy(logits, target, self.loss_mask)
        names = list(self.model.params)
        grads = grad(loss, [self.model.params[k] for k in names])
        arrays = {k: g.data for k, g in zip(names, grads)}
        gnorm = float(np.sqrt(sum(np.sum(np.square(g, dtype=np.float64))
                                  for g in arrays.values())))
        clip = self.train_cfg.grad_clip
        if gnorm > clip:
            arrays = {k: g * (clip / gnorm) for k, g in arrays.items()}
        self.step += 1
        self.optimizer.update(self.model.params, arrays, lr_at(self.step, self.train_cfg))
        return {"step": self.step, "loss": float(loss.data), "grad_norm": gnorm}


def save_baseline(model: FeedForwardLM, path: str) -> None:
    pairs = [("arch", "ff")] + [(f.name, _fmt_value(getattr(model.cfg, f.name)))
                                for f in fields(model.cfg)]
    write_checkpoint(path, pairs, model.params)


def load_baseline(path: str) -> FeedForwardLM:
    config, tensors = read_checkpoint(path)
    if config.pop("arch", None) != "ff":
        raise ContractViolation(f"not a feed-forward baseline checkpoint: {path}")
    kwargs = {}
    for key, raw in config.items():
        parser = _BASELINE_PARSERS.get(key)
        if parser is None:
            raise ContractViolation(f"unknown baseline config key {key!r}")
        kwargs[key] = parser(raw)
    model = FeedForwardLM(BaselineConfig(**kwargs).validate(), seed=0)
    if set(tensors) != set(model.params):
        raise ContractViolation("checkpoint/model parameter mismatch")
    for name, arr in tensors.items():
        model.params[name] = Value(arr, requires_grad=True)
    return model
