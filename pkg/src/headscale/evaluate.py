"""Perplexity evaluation (direct and sliding-window) and the passkey retrieval harness."""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import detokenize, tokenize
from .errors import DataError, ParameterError
from .tensor import Tensor, token_nll

KEY_TEMPLATE = "The pass key is {key}. Remember it. "
QUESTION = " What is the pass key? The pass key is "
DIGITS = tokenize("0123456789")


def _logits(model, tokens, scales) -> np.ndarray:
    logits, _ = model.forward(tokens, scales=scales)
    return logits.data if isinstance(logits, Tensor) else np.asarray(logits)


def position_nll(model, sequences, scales=None, batch_size: int = 8) -> np.ndarray:
    """Mean NLL by context length over equal-length sequences.

    Entry ``i - 1`` is the loss of predicting token ``i + 1`` from the first
    ``i`` tokens, averaged over sequences; shape (T - 1,).
    """
    seqs = np.asarray(sequences)
    if seqs.ndim != 2 or seqs.shape[1] < 2:
        raise DataError(f"need sequences of shape (n, T >= 2), got {seqs.shape}")
    total = np.zeros(seqs.shape[1] - 1)
    for start in range(0, seqs.shape[0], batch_size):
        batch = seqs[start:start + batch_size]
        total += token_nll(_logits(model, batch[:, :-1], scales), batch[:, 1:]).sum(axis=0)
    return total / seqs.shape[0]


def mean_nll(model, sequences, scales=None, batch_size: int = 8) -> float:
    """Average NLL over every predicted token of equal-length sequences."""
    return float(position_nll(model, sequences, scales, batch_size).mean())


@dataclass
class SlidingWindowResult:
    """Per-token NLL from sliding-window evaluation.

    ``nll[t]`` scores token ``t`` (0-based) and ``context[t]`` is how many
    tokens it was conditioned on; unscored tokens hold NaN / 0.
    """

    nll: np.ndarray
    context: np.ndarray
    window: int
    stride: int

    @property
    def scored(self) -> np.ndarray:
        return self.context > 0

    @property
    def token_count(self) -> int:
        return int(self.scored.sum())

    @property
    def nll_sum(self) -> float:
        return float(self.nll[self.scored].sum())

    @property
    def ppl(self) -> float:
        return math.exp(self.nll_sum / self.token_count)

    def buckets(self, width: int = 16) -> list[dict]:
        """NLL sums grouped by context length in buckets ``(k*width, (k+1)*width]``."""
        ctx = self.context[self.scored]
        vals = self.nll[self.scored]
        ids = (ctx - 1) // width
        out = []
        for b in np.unique(ids):
            sel = ids == b
            out.append({"context_lo": int(b * width + 1), "context_hi": int((b + 1) * width),
                        "count": int(sel.sum()), "nll_sum": float(vals[sel].sum()),
                        "log_ppl": float(vals[sel].mean())})
        return out


def window_plan(n_tokens: int, window: int, stride: int) -> list[tuple[int, int, int]]:
    """(begin, end, first_scored) for each window over ``n_tokens`` tokens.

    Windows span ``[begin, end)`` with ``end - begin == window``; tokens from
    ``first_scored`` to ``end - 1`` are scored in that window.
    """
    if window < 2:
        raise ParameterError(f"window must be >= 2, got {window}")
    if stride < 1 or stride > window:
        raise ParameterError(f"stride must satisfy 1 <= S <= W, got S={stride}, W={window}")
    if n_tokens < window:
        raise DataError(f"{n_tokens} tokens is fewer than one window of {window}")
    plan = [(0, window, 1)]
    end = window
    while end < n_tokens:
        new_end = min(end + stride, n_tokens)
        begin = new_end - window
        plan.append((begin, new_end, max(end, begin + 1)))
        end = new_end
    return plan


def sliding_window_nll(model, tokens, scales=None, window: int = 256, stride: int = 64) -> SlidingWindowResult:
    """Score a long token stream window by window.

    The first window scores every token it can (all but the first); each
    later window advances by ``stride`` and scores only its final ``stride``
    tokens, so each token is scored once, with the longest left context the
    window allows. The final window is aligned to the end of the stream.
    With ``stride == window`` the windows are disjoint chunks and each
    chunk's first token goes unscored (it has no in-window context).
    """
    tokens = np.asarray(tokens)
    plan = window_plan(tokens.size, window, stride)
    nll = np.full(tokens.size, np.nan)
    ctx = np.zeros(tokens.size, dtype=np.int64)
    for begin, end, first in plan:
        chunk = tokens[begin:end]
        logits = _logits(model, chunk[None, :-1], scales)[0]
        per = token_nll(logits, chunk[1:])
        idx = np.arange(first, end)
        nll[idx] = per[idx - begin - 1]
        ctx[idx] = idx - begin
    return SlidingWindowResult(nll, ctx, window, stride)


@dataclass
class EvalReport:
    buckets: list[dict]
    token_count: int
    nll_sum: float
    metadata: dict = field(default_factory=dict)

    @property
    def ppl(self) -> float:
        return math.exp(self.nll_sum / self.token_count)

    @classmethod
    def from_sliding(cls, result: SlidingWindowResult, width: int = 16, metadata: dict | None = None) -> "EvalReport":
        return cls(result.buckets(width), result.token_count, result.nll_sum, dict(metadata or {}))

    def recomputed_ppl(self) -> float:
        """PPL rebuilt from the stored bucket sums."""
        total = math.fsum(b["nll_sum"] for b in self.buckets)
        count = sum(b["count"] for b in self.buckets)
        return math.exp(total / count)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["context_lo", "context_hi", "count", "nll_sum", "log_ppl"])
        for b in self.buckets:
            w.writerow([b["context_lo"], b["context_hi"], b["count"], repr(b["nll_sum"]), repr(b["log_ppl"])])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"ppl": self.ppl, "token_count": self.token_count, "nll_sum": self.nll_sum,
                           "metadata": self.metadata}, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# passkey retrieval


@dataclass
class PasskeySample:
    context_length: int
    depth: float
    passkey: int
    prompt: np.ndarray
    answer: np.ndarray
    key_start: int

    @property
    def prompt_text(self) -> str:
        return detokenize(self.prompt).decode("utf-8", errors="replace")


def _filler(source: np.ndarray, length: int, rng: np.random.Generator, forbidden: bytes) -> np.ndarray:
    if length == 0:
        return source[:0]
    if source.size < length:
        reps = length // max(source.size, 1) + 1
        source = np.tile(source, reps)
    for _ in range(64):
        start = int(rng.integers(0, source.size - length + 1))
        piece = source[start:start + length]
        if forbidden not in detokenize(piece):
            return piece
    # scrub digits as a last resort so the key stays unique
    piece = source[:length].copy()
    piece[np.isin(piece, DIGITS)] = ord(" ")
    return piece


def gen_passkey_sample(context_length: int, depth: float, key: int, filler: np.ndarray, seed: int = 0) -> PasskeySample:
    """Build a prompt of exactly ``context_length`` bytes hiding ``key``.

    Layout: filler prefix, the key sentence, filler suffix, the question.
    The key sentence starts at ``floor(depth * usable)`` where ``usable`` is
    the filler budget; the answer is the five key digits.
    """
    if not 10000 <= key <= 99999:
        raise ParameterError(f"passkey must have 5 digits, got {key}")
    if not 0.0 <= depth <= 1.0:
        raise ParameterError(f"depth must be in [0, 1], got {depth}")
    sentence = tokenize(KEY_TEMPLATE.format(key=key))
    question = tokenize(QUESTION)
    usable = context_length - sentence.size - question.size
    if usable < 0:
        raise ParameterError(f"context_length {context_length} cannot hold the key sentence and question "
                             f"({sentence.size + question.size} bytes)")
    rng = np.random.default_rng(seed)
    forbidden = str(key).encode()
    pre_len = int(math.floor(depth * usable))
    prefix = _filler(np.asarray(filler), pre_len, rng, forbidden)
    suffix = _filler(np.asarray(filler), usable - pre_len, rng, forbidden)
    prompt = np.concatenate([prefix, sentence, suffix, question]).astype(np.int64)
    return PasskeySample(context_length, depth, key, prompt, tokenize(str(key)), pre_len)


def greedy_decode(model, prompts: np.ndarray, n_tokens: int, scales=None) -> np.ndarray:
    """Append ``n_tokens`` argmax tokens to each prompt (no cache: full re-forward per token)."""
    seqs = np.asarray(prompts)
    out = []
    for _ in range(n_tokens):
        nxt = _logits(model, seqs, scales)[:, -1, :].argmax(axis=-1)
        out.append(nxt)
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return np.stack(out, axis=1)


@dataclass
class PasskeyGrid:
    lengths: list[int]
    depths: list[float]
    accuracy: np.ndarray  # (len(lengths), len(depths))
    trials: int

    def mean_by_length(self) -> dict[int, float]:
        return {L: float(self.accuracy[i].mean()) for i, L in enumerate(self.lengths)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["context_length", "depth", "accuracy", "trials"])
        for i, L in enumerate(self.lengths):
            for j, d in enumerate(self.depths):
                w.writerow([L, repr(float(d)), repr(float(self.accuracy[i, j])), self.trials])
        return buf.getvalue()


def eval_passkey(model, filler: np.ndarray, lengths: Sequence[int], scales=None, depths: int = 10,
                 keys_per_depth: int = 10, seed: int = 0) -> PasskeyGrid:
    """Exact-match accuracy of greedily decoded 5-digit keys on a length x depth grid."""
    depth_grid = [float(d) for d in np.linspace(0.0, 1.0, depths)]
    rng = np.random.default_rng(seed)
    acc = np.zeros((len(lengths), depths))
    for i, L in enumerate(lengths):
        for j, d in enumerate(depth_grid):
            keys = rng.integers(10000, 100000, size=keys_per_depth)
            samples = [gen_passkey_sample(int(L), d, int(k), filler, seed=int(rng.integers(2**31)))
                       for k in keys]
            prompts = np.stack([s.prompt for s in samples])
            decoded = greedy_decode(model, prompts, 5, scales)
            gold = np.stack([s.answer for s in samples])
            acc[i, j] = float((decoded == gold).all(axis=1).mean())
    return PasskeyGrid([int(L) for L in lengths], depth_grid, acc, keys_per_depth)


class CopyOracle:
    """Stub model that reads the passkey out of its own context."""

    vocab_size = 256
    _pat = re.compile(rb"The pass key is (\d{5})\. Remember it\.")

    def forward(self, tokens, scales=None, trace=False):
        tokens = np.atleast_2d(np.asarray(tokens))
        logits = np.zeros(tokens.shape + (self.vocab_size,))
        for b, row in enumerate(tokens):
            text = detokenize(row)
            m = self._pat.search(text)
            tail = text[text.rfind(b"The pass key is ") + len(b"The pass key is "):]
            if m and text.rfind(b"The pass key is ") != m.start() and len(tail) < 5:
                logits[b, -1, m.group(1)[len(tail)]] = 1.0
        return logits, None


class RandomStub:
    """Stub model with uniformly random next-token logits."""

    vocab_size = 256

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def forward(self, tokens, scales=None, trace=False):
        tokens = np.atleast_2d(np.asarray(tokens))
        return self.rng.normal(size=tokens.shape + (self.vocab_size,)), None
