"""Attention-entropy diagnostics: per-row entropy, averaged curves, and inflection detection."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, DataError, ParameterError

MODEL_SCOPE = "model"


def head_entropy(probs_row, atol: float = 1e-6) -> float:
    """Shannon entropy (nats) of one attention row, with 0 ln 0 = 0."""
    p = np.asarray(probs_row, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ContractError(f"expected a non-empty 1-D probability row, got shape {p.shape}")
    if (p < 0).any() or abs(p.sum() - 1.0) > atol:
        raise ContractError(f"attention row is not a distribution (sum={p.sum():.9f}, min={p.min():.3g})")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def entropy_upper_bound(i: float) -> float:
    """ln i: the entropy of a uniform row over i keys (the largest possible)."""
    if i < 1:
        raise ParameterError(f"position must be >= 1, got {i}")
    return math.log(i)


def scope_label(scope) -> str:
    if scope == MODEL_SCOPE:
        return MODEL_SCOPE
    layer, head = scope
    return f"L{layer}H{head}"


@dataclass
class EntropyCurve:
    positions: np.ndarray
    mean_entropy: np.ndarray
    n: int
    scope: object = MODEL_SCOPE

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.mean_entropy = np.asarray(self.mean_entropy, dtype=np.float64)
        if self.positions.shape != self.mean_entropy.shape:
            raise ContractError("positions and values differ in length")
        if self.positions.size > 1 and not (np.diff(self.positions) > 0).all():
            raise ContractError("curve positions must be strictly increasing")

    def within_bound(self, tol: float = 1e-12) -> bool:
        bound = np.log(self.positions.astype(np.float64))
        return bool(((self.mean_entropy >= -tol) & (self.mean_entropy <= bound + tol)).all())

    def to_rows(self) -> list[tuple]:
        label = scope_label(self.scope)
        return [(int(p), float(v), label, self.n) for p, v in zip(self.positions, self.mean_entropy)]


def decimated_positions(max_position: int, every: int = 16, include_first: bool = True) -> np.ndarray:
    """1-based grid ``every, 2*every, ...`` up to ``max_position`` (plus position 1)."""
    grid = list(range(every, max_position + 1, every))
    if include_first and (not grid or grid[0] != 1):
        grid = [1] + grid
    if grid[-1] != max_position:
        grid.append(max_position)
    return np.asarray(grid, dtype=np.int64)


def entropy_sums(model, dataset: np.ndarray, scales=None, batch_size: int = 8) -> tuple[np.ndarray, int]:
    """Sum over samples of each head's row entropy, shape (layers, heads, T), plus the sample count.

    Summation runs batch by batch in dataset order, so splitting a dataset
    and adding the partial sums reproduces the whole up to rounding.
    """
    dataset = np.asarray(dataset)
    total = None
    for start in range(0, dataset.shape[0], batch_size):
        _, tr = model.forward(dataset[start:start + batch_size], scales=scales, trace=True)
        part = tr.entropy.sum(axis=2)
        total = part if total is None else total + part
    return total, int(dataset.shape[0])


def average_entropy_curve(model, dataset, scales=None, scope=MODEL_SCOPE, positions: Sequence[int] | None = None,
                          batch_size: int = 8) -> EntropyCurve:
    """Mean attention entropy per query position over ``dataset`` and the heads in ``scope``.

    Args:
        model: anything with ``forward(tokens, scales, trace=True)``.
        dataset: token sequences, a list or an array of shape (n, T).
        scales: forwarded to the model.
        scope: ``"model"`` to average over every head, or ``(layer, head)``.
        positions: 1-based positions to report; defaults to every 16th.
    """
    seqs = list(dataset)
    if not seqs:
        raise DataError("empty dataset")
    need = int(max(positions)) if positions is not None else min(len(s) for s in seqs)
    for idx, s in enumerate(seqs):
        if len(s) < need:
            raise DataError(f"sequence {idx} has {len(s)} tokens, need at least {need}")
    arr = np.stack([np.asarray(s)[:need] for s in seqs])
    sums, n = entropy_sums(model, arr, scales, batch_size)
    if positions is None:
        positions = decimated_positions(need)
    positions = np.asarray(positions, dtype=np.int64)
    if scope == MODEL_SCOPE:
        per_pos = sums.mean(axis=(0, 1)) / n
    else:
        layer, head = scope
        per_pos = sums[layer, head] / n
    return EntropyCurve(positions, per_pos[positions - 1], n, scope)


def head_curves(sums: np.ndarray, n: int, positions: Sequence[int]) -> list[EntropyCurve]:
    positions = np.asarray(positions, dtype=np.int64)
    return [EntropyCurve(positions, sums[l, h, positions - 1] / n, n, (l, h))
            for l in range(sums.shape[0]) for h in range(sums.shape[1])]


def find_inflection(positions, values, train_len: int, window: int = 64, threshold: float = 4.0) -> int | None:
    """First position past ``train_len`` where the curve turns sharply upward.

    Slopes are taken between consecutive points. The trailing moving-average
    slope at a point averages the point slopes inside the last ``window``
    positions. The reference is the median point slope over
    [train_len/2, train_len]; the reported position is the smallest one
    beyond ``train_len`` whose moving-average slope exceeds
    ``threshold * reference``. Returns None if that never happens.
    """
    x = np.asarray(positions, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError("positions and values must be 1-D and equal length")
    if x.size < 3:
        raise DataError(f"need at least 3 points, got {x.size}")
    slopes = np.diff(y) / np.diff(x)
    at = x[1:]
    ref_mask = (at >= train_len / 2) & (at <= train_len)
    if ref_mask.sum() < 1:
        raise DataError(f"no points in the reference range [{train_len / 2}, {train_len}]")
    if not (at > train_len).any():
        raise DataError(f"curve does not extend beyond train length {train_len}")
    reference = float(np.median(slopes[ref_mask]))
    cut = threshold * reference
    for k in np.nonzero(at > train_len)[0]:
        win = (at > at[k] - window) & (at <= at[k])
        if slopes[win].mean() > cut:
            return int(at[k])
    return None


def write_curves_csv(curves: Sequence[EntropyCurve], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["position", "value", "scope", "n"])
    for c in curves:
        for pos, val, label, n in c.to_rows():
            w.writerow([pos, repr(val), label, n])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def read_curves_csv(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    series: dict[str, tuple[list, list]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            xs, ys = series.setdefault(row["scope"], ([], []))
            xs.append(int(row["position"]))
            ys.append(float(row["value"]))
    return {k: (np.asarray(xs), np.asarray(ys)) for k, (xs, ys) in series.items()}
