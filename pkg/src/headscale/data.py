"""Byte-level corpus handling and the toy pretraining loop."""

from __future__ import annotations

import logging
import math
import sys
import sysconfig
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import DataError, ParameterError
from .model import Model, ModelConfig, init_model
from .optim import OptimState, adamw_step, cosine_schedule

log = logging.getLogger(__name__)

SAMPLE_CORPUS = Path(__file__).with_name("sample_corpus.txt")


def tokenize(text: str | bytes) -> np.ndarray:
    """Map text (UTF-8 encoded) or raw bytes to byte ids 0..255."""
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> bytes:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() > 255):
        raise DataError("byte ids must lie in [0, 255]")
    return ids.astype(np.uint8).tobytes()


def collect_files(root: str | Path, suffixes: Sequence[str] = (".py",), max_bytes: int | None = None) -> list[Path]:
    """Sorted list of files under ``root`` with the given suffixes, capped at ``max_bytes`` total."""
    root = Path(root)
    if root.is_file():
        return [root]
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix in suffixes
                   and "site-packages" not in p.parts and "dist-packages" not in p.parts)
    if max_bytes is None:
        return files
    picked, total = [], 0
    for p in files:
        if total >= max_bytes:
            break
        picked.append(p)
        total += p.stat().st_size
    return picked


def default_corpus_files(max_bytes: int = 8_000_000) -> list[Path]:
    """Python standard-library sources: a multi-megabyte UTF-8 corpus present on any install."""
    return collect_files(sysconfig.get_paths()["stdlib"], (".py",), max_bytes)


@dataclass
class Corpus:
    """Token stream split into train/validation by shuffled contiguous blocks."""

    files: list[str]
    train: np.ndarray
    val: np.ndarray
    val_fraction: float
    seed: int
    block_size: int

    @classmethod
    def from_files(cls, files: Sequence[str | Path], val_fraction: float = 0.1, seed: int = 0,
                   block_size: int = 65536) -> "Corpus":
        if not files:
            raise DataError("corpus needs at least one file")
        parts = []
        for f in files:
            try:
                raw = Path(f).read_bytes()
            except OSError as exc:
                raise DataError(f"cannot read corpus file {f}: {exc}") from exc
            parts.append(raw)
        stream = tokenize(b"\n".join(parts))
        return cls._split(stream, [str(f) for f in files], val_fraction, seed, block_size)

    @classmethod
    def from_text(cls, text: str, val_fraction: float = 0.1, seed: int = 0, block_size: int = 4096) -> "Corpus":
        return cls._split(tokenize(text), ["<text>"], val_fraction, seed, block_size)

    @classmethod
    def _split(cls, stream, files, val_fraction, seed, block_size) -> "Corpus":
        if not 0.0 < val_fraction < 1.0:
            raise ParameterError(f"val_fraction must be in (0, 1), got {val_fraction}")
        n_blocks = max(2, math.ceil(stream.size / block_size))
        bounds = np.linspace(0, stream.size, n_blocks + 1).astype(np.int64)
        order = np.random.default_rng(seed).permutation(n_blocks)
        n_val = max(1, int(round(val_fraction * n_blocks)))

        def cat(ids):
            return np.concatenate([stream[bounds[i]:bounds[i + 1]] for i in np.sort(ids)])

        return cls(files, cat(order[n_val:]), cat(order[:n_val]), val_fraction, seed, block_size)


def sequences(stream: np.ndarray, length: int, count: int | None = None, seed: int | None = None,
              stride: int | None = None) -> np.ndarray:
    """Cut ``stream`` into windows of ``length`` tokens, shape (count, length).

    Windows start every ``stride`` tokens (default: non-overlapping). With a
    seed the window order is shuffled before the first ``count`` are taken.
    """
    stride = length if stride is None else stride
    if stream.size < length:
        raise DataError(f"stream of {stream.size} tokens is shorter than one window of {length}")
    starts = np.arange(0, stream.size - length + 1, stride)
    if seed is not None:
        starts = np.random.default_rng(seed).permutation(starts)
    if count is not None:
        if count > starts.size:
            raise DataError(f"requested {count} windows of {length} tokens but stream only holds {starts.size}")
        starts = starts[:count]
    return np.stack([stream[s:s + length] for s in starts]) if starts.size else np.zeros((0, length), np.int64)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-3
    warmup: int = 100
    final_lr_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    check_finite: bool = False
    log_every: int = 100


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)


def pretrain_toy(config: ModelConfig, corpus: Corpus, train: TrainConfig,
                 on_step: Callable[[int, float], None] | None = None) -> tuple[Model, TrainLog]:
    """Cross-entropy pretraining at ``config.train_len`` from a fresh initialization.

    Every window of L+1 tokens is used at most once; window order is fixed
    by ``train.seed``. Deterministic for fixed seeds on one machine.
    """
    model = init_model(config)
    history = TrainLog()
    if train.steps == 0:
        return model, history
    L = config.train_len
    needed = train.steps * train.batch_size
    available = (corpus.train.size - 1) // L
    if available < needed:
        raise DataError(f"corpus too small: {train.steps} steps x batch {train.batch_size} need {needed} "
                        f"windows of {L}+1 tokens, corpus has {available} ({corpus.train.size} tokens)")
    windows = sequences(corpus.train, L + 1, count=needed, seed=train.seed, stride=L)

    model.requires_grad_(True)
    decay = {name for name, p in model.params.items() if p.data.ndim >= 2}
    state = OptimState(lr=train.lr, beta1=train.beta1, beta2=train.beta2, eps=train.eps,
                       weight_decay=train.weight_decay)
    arrays = {name: p.data for name, p in model.params.items()}
    with T.finite_checks(train.check_finite):
        for step in range(1, train.steps + 1):
            batch = windows[(step - 1) * train.batch_size: step * train.batch_size]
            logits, _ = model.forward(batch[:, :-1])
            loss = T.cross_entropy(logits, batch[:, 1:])
            loss.backward()
            grads = {name: p.grad for name, p in model.params.items()}
            if train.grad_clip:
                norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if norm > train.grad_clip:
                    grads = {k: g * (train.grad_clip / norm) for k, g in grads.items()}
            lr_t = cosine_schedule(step, train.steps, train.warmup, train.lr, train.final_lr_ratio)
            adamw_step(arrays, grads, state, lr_t, decay)
            model.zero_grad()
            history.losses.append(loss.item())
            if on_step is not None:
                on_step(step, loss.item())
            if train.log_every and step % train.log_every == 0:
                log.info("step %d/%d loss %.4f lr %.2e", step, train.steps, loss.item(), lr_t)
    model.requires_grad_(False)
    return model, history
