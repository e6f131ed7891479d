"""Desk-scale data and metrics.

Synthetic token corpora (copy, bigram chain, typed balanced brackets),
synthetic continuous sequences, 32x32 grayscale images with a linear-beta
forward-noising schedule, patch packing for the denoiser, PGM io, and the
cross-entropy / perplexity / MSE / PSNR metrics.  Everything here is pure
numpy on plain arrays; differentiable losses live in the training engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .autodiff import ContractViolation, make_rng

BETA_START = 1e-4
BETA_END = 2e-2
DEFAULT_SCHEDULE_STEPS = 1000
PEAK = 255.0


# ---------------------------------------------------------------------------
# noise schedule and denoising samples

@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.betas)


def make_schedule(t: int = DEFAULT_SCHEDULE_STEPS) -> NoiseSchedule:
    """Linear betas from 1e-4 to 2e-2 inclusive; t >= 2."""
    if t < 2:
        raise ContractViolation(f"schedule needs at least 2 steps, got {t}")
    betas = np.linspace(BETA_START, BETA_END, t)
    betas.setflags(write=False)
    alpha_bars = np.cumprod(1.0 - betas)
    alpha_bars.setflags(write=False)
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars)


@dataclass
class DenoiseSample:
    clean: np.ndarray
    noised: np.ndarray
    sigma_fraction: float


def apply_noise(clean: np.ndarray, sigma_fraction: float,
                schedule: NoiseSchedule, rng: np.random.Generator) -> DenoiseSample:
    """Forward-noise `clean` at schedule index round(sigma_fraction * steps)."""
    if not 0.0 < sigma_fraction <= 1.0:
        raise ContractViolation(f"sigma_fraction must be in (0, 1], got {sigma_fraction}")
    idx = min(int(round(sigma_fraction * schedule.steps)), schedule.steps - 1)
    ab = schedule.alpha_bars[idx]
    eps = rng.standard_normal(clean.shape)
    noised = np.sqrt(ab) * clean + np.sqrt(1.0 - ab) * eps
    return DenoiseSample(clean=clean, noised=noised, sigma_fraction=sigma_fraction)


# ---------------------------------------------------------------------------
# metrics

def mse(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.square(np.asarray(a, dtype=np.float64) - b)))


def mse_pixel(a: np.ndarray, b: np.ndarray) -> float:
    """MSE after rescaling [0,1] pixels to [0,255]."""
    return mse(a, b) * PEAK * PEAK


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    m = mse_pixel(a, b)
    if m == 0.0:
        return float("inf")
    return 10.0 * math.log10(PEAK * PEAK / m)


def cross_entropy(logits: np.ndarray, targets: np.ndarray,
                  mask: Optional[np.ndarray] = None) -> float:
    """Mean categorical cross-entropy of [batch, S, V] logits against id
    targets; `mask` (broadcastable to [batch, S]) selects scored positions."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    if logits.shape[:2] != targets.shape:
        raise ContractViolation(f"shape mismatch: {logits.shape} vs {targets.shape}")
    if np.any(targets < 0) or np.any(targets >= logits.shape[-1]):
        raise ContractViolation("target id out of vocabulary")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1)) + logits.max(axis=-1)
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    per_position = lse - picked
    if mask is None:
        return float(np.mean(per_position))
    weights = np.broadcast_to(np.asarray(mask, dtype=np.float64), per_position.shape)
    total = float(np.sum(weights))
    if total == 0:
        raise ContractViolation("empty loss mask")
    return float(np.sum(per_position * weights) / total)


def perplexity(ce: float) -> float:
    return math.exp(ce)


# ---------------------------------------------------------------------------
# token corpora

@dataclass
class ToyCorpus:
    kind: str
    vocab_size: int
    seq_len: int
    train: np.ndarray
    val: np.ndarray
    loss_mask: Optional[np.ndarray] = None  # [S-1] over next-token positions
    transition: Optional[np.ndarray] = None


def _copy_row(rng: np.random.Generator, vocab: int, seq_len: int) -> np.ndarray:
    half = rng.integers(0, vocab, size=seq_len // 2)
    return np.concatenate([half, half])


def _ngram_row(rng: np.random.Generator, transition: np.ndarray, seq_len: int) -> np.ndarray:
    vocab = transition.shape[0]
    row = np.empty(seq_len, dtype=np.int64)
    row[0] = rng.integers(0, vocab)
    for i in range(1, seq_len):
        row[i] = rng.choice(vocab, p=transition[row[i - 1]])
    return row


def _dyck_row(rng: np.random.Generator, types: int, seq_len: int,
              max_depth: int) -> np.ndarray:
    # symbol 2t opens bracket type t, 2t+1 closes it
    row = np.empty(seq_len, dtype=np.int64)
    stack: List[int] = []
    for i in range(seq_len):
        remaining = seq_len - i
        can_open = len(stack) < max_depth and len(stack) + 1 <= remaining - 1
        can_close = len(stack) > 0
        if can_open and (not can_close or rng.random() < 0.5):
            t = int(rng.integers(0, types))
            stack.append(t)
            row[i] = 2 * t
        else:
            row[i] = 2 * stack.pop() + 1
    return row


def gen_corpus(kind: str, vocab: int, seq_len: int, count: int, seed: int,
               val_fraction: float = 0.1, max_depth: int = 4) -> ToyCorpus:
    """Deterministic deduplicated corpus split into disjoint train/val."""
    if not 0 < vocab <= 64:
        raise ContractViolation(f"vocab {vocab} out of range (1..64)")
    if not 0 < seq_len <= 64:
        raise ContractViolation(f"seq_len {seq_len} out of range (1..64)")
    if count < 2:
        raise ContractViolation("need at least 2 sequences to split")
    rng = make_rng(seed)
    transition = None
    if kind == "copy":
        if seq_len % 2:
            raise ContractViolation("copy task needs even seq_len")
        draw = lambda: _copy_row(rng, vocab, seq_len)
    elif kind == "ngram":
        # bigram chain: fixed random row-stochastic matrix, all entries > 0
        raw = rng.random((vocab, vocab)) + 0.1
        transition = raw / raw.sum(axis=1, keepdims=True)
        draw = lambda: _ngram_row(rng, transition, seq_len)
    elif kind == "dyck":
        if vocab % 2 or seq_len % 2:
            raise ContractViolation("dyck needs even vocab (open/close pairs) and even seq_len")
        if max_depth < 1:
            raise ContractViolation("max_depth must be >= 1")
        types = vocab // 2
        draw = lambda: _dyck_row(rng, types, seq_len, max_depth)
    else:
        raise ContractViolation(f"unknown corpus kind {kind!r}")

    seen = set()
    rows = []
    attempts = 0
    while len(rows) < count:
        attempts += 1
        if attempts > 200 * count:
            raise ContractViolation(
                f"cannot draw {count} distinct sequences for {kind} V={vocab} S={seq_len}")
        row = draw()
        key = row.tobytes()
        if key not in seen:
            seen.add(key)
            rows.append(row)
    data = np.stack(rows)
    n_val = max(1, int(round(count * val_fraction)))
    order = rng.permutation(count)
    val, train = data[order[:n_val]], data[order[n_val:]]
    loss_mask = None
    if kind == "copy":
        # next-token positions: predicting targets[i] = tokens[i+1]; only the
        # copied half is determined by the context
        loss_mask = np.arange(seq_len - 1) >= (seq_len // 2 - 1)
    return ToyCorpus(kind=kind, vocab_size=vocab, seq_len=seq_len,
                     train=train, val=val, loss_mask=loss_mask, transition=transition)


def save_corpus(path: str, sequences: np.ndarray) -> None:
    with open(path, "w") as fh:
        for row in sequences:
            fh.write(" ".join(str(int(tok)) for tok in row) + "\n")


def load_corpus(path: str) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rows.append([int(tok) for tok in line.split()])
    return np.asarray(rows, dtype=np.int64)


# ---------------------------------------------------------------------------
# continuous sequences

def gen_continuous(count: int, seq_len: int, feature_dim: int,
                   seed: int) -> np.ndarray:
    """Smooth sinusoid mixtures [count, seq_len, feature_dim], standardized
    over the whole dataset (zero mean, unit variance)."""
    rng = make_rng(seed)
    t = np.arange(seq_len)[None, :, None]
    freq = rng.uniform(0.05, 0.5, size=(count, 1, feature_dim))
    phase = rng.uniform(0, 2 * np.pi, size=(count, 1, feature_dim))
    amp = rng.uniform(0.5, 1.5, size=(count, 1, feature_dim))
    data = amp * np.sin(freq * t + phase) + 0.1 * rng.standard_normal((count, seq_len, feature_dim))
    return (data - data.mean()) / data.std()


# ---------------------------------------------------------------------------
# images: procedural textures, patch packing, PGM io, bundled set

def make_textures(count: int, seed: int, size: int = 32) -> np.ndarray:
    """[count, size, size] grayscale textures in [0,1]: sinusoid gratings,
    checkerboards, and box-smoothed noise, cycled."""
    rng = make_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    out = np.empty((count, size, size))
    for i in range(count):
        kind = i % 3
        if kind == 0:
            theta = rng.uniform(0, np.pi)
            freq = rng.uniform(0.2, 1.2)
            phase = rng.uniform(0, 2 * np.pi)
            img = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        elif kind == 1:
            cell = int(rng.integers(2, 9))
            ox, oy = rng.integers(0, cell, size=2)
            img = (((xx + ox) // cell + (yy + oy) // cell) % 2).astype(np.float64)
        else:
            img = rng.standard_normal((size, size))
            k = int(rng.integers(2, 6))
            kernel = np.ones(k) / k
            img = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), 1, img)
            img = np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="same"), 0, img)
        lo, hi = img.min(), img.max()
        out[i] = (img - lo) / (hi - lo) if hi > lo else np.full_like(img, 0.5)
    return out


def images_to_patches(images: np.ndarray, patch: int = 4) -> np.ndarray:
    """[n, H, W] -> [n, (H//p)*(W//p), p*p], row-major patch order, pixels
    rescaled from [0,1] to [-1,1]."""
    n, h, w = images.shape
    if h % patch or w % patch:
        raise ContractViolation(f"image {h}x{w} not divisible by patch {patch}")
    grid = images.reshape(n, h // patch, patch, w // patch, patch)
    seq = grid.transpose(0, 1, 3, 2, 4).reshape(n, (h // patch) * (w // patch), patch * patch)
    return seq * 2.0 - 1.0


def patches_to_images(seq: np.ndarray, size: int = 32, patch: int = 4) -> np.ndarray:
    n, s, f = seq.shape
    side = size // patch
    if s != side * side or f != patch * patch:
        raise ContractViolation(f"patch grid mismatch: {seq.shape} for size {size}")
    grid = seq.reshape(n, side, side, patch, patch).transpose(0, 1, 3, 2, 4)
    return (grid.reshape(n, size, size) + 1.0) / 2.0


def write_pgm(path: str, image: np.ndarray) -> None:
    """Binary P5 graymap, maxval 255; accepts [0,1] floats or uint8."""
    if image.dtype != np.uint8:
        image = np.clip(np.round(np.asarray(image, dtype=np.float64) * PEAK), 0, 255).astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path: str) -> np.ndarray:
    """P5 graymap as [0,1] floats."""
    with open(path, "rb") as fh:
        blob = fh.read()
    fields: List[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if fields[0] != b"P5":
        raise ContractViolation(f"not a binary graymap: {path}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ContractViolation(f"unsupported maxval {maxval}")
    pixels = np.frombuffer(blob[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    return pixels.reshape(h, w).astype(np.float64) / PEAK


def bundled_images() -> np.ndarray:
    """The small public-domain 32x32 set shipped with the package."""
    from importlib import resources

    root = resources.files("minergy").joinpath("data")
    images = []
    for entry in sorted(root.iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".pgm"):
            with resources.as_file(entry) as path:
                images.append(read_pgm(str(path)))
    if not images:
        raise ContractViolation("no bundled images found")
    return np.stack(images)
