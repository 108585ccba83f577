"""Uniform-scale sweeps, the log-law fit, and constrained head-scale tuning."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from . import tensor as T
from .errors import ContractError, DataError, ParameterError
from .evaluate import position_nll
from .model import Model, ScaleVector
from .optim import OptimState, adamw_step, cosine_schedule, project_scales
from .probe import entropy_sums
from .tensor import Tensor

log = logging.getLogger(__name__)

BEST_UNIFORM = "best-uniform"
DEFAULT_INIT = "default"


def scale_grid(d_head: int, start: float = 0.8, stop: float = 2.0, interval: float = 0.01) -> np.ndarray:
    """Ascending grid ``(start + k*interval) / sqrt(d_head)`` up to ``stop / sqrt(d_head)``.

    ``start``, ``stop`` and ``interval`` are in units of 1/sqrt(d_head).
    """
    if interval <= 0 or start <= 0 or stop < start:
        raise ParameterError(f"bad grid: start={start}, stop={stop}, interval={interval}")
    n = int(math.floor((stop - start) / interval + 1e-9)) + 1
    return (start + interval * np.arange(n)) / math.sqrt(d_head)


@dataclass
class SweepResult:
    """Per-position log-PPL for every uniform scale on the grid.

    ``log_ppl[i, g]`` is the mean NLL at (1-based) context position
    ``positions[i]`` under scale ``grid[g]``.
    """

    grid: np.ndarray
    positions: np.ndarray
    log_ppl: np.ndarray
    train_len: int
    d_head: int

    @property
    def best_index(self) -> np.ndarray:
        # argmin returns the first minimum; the grid is ascending, so ties go to the smaller scale
        return self.log_ppl.argmin(axis=1)

    @property
    def best_scale(self) -> np.ndarray:
        return self.grid[self.best_index]

    @property
    def best_log_ppl(self) -> np.ndarray:
        return self.log_ppl[np.arange(self.positions.size), self.best_index]

    @property
    def extension_ratio(self) -> np.ndarray:
        return self.positions / self.train_len

    def best_at(self, position: int) -> float:
        hits = np.nonzero(self.positions == position)[0]
        if not hits.size:
            raise ParameterError(f"sweep does not cover position {position} "
                                 f"(covers {self.positions[0]}..{self.positions[-1]})")
        return float(self.best_scale[hits[0]])

    def mean_over(self, lo: int, hi: int) -> np.ndarray:
        """Per-grid-value mean log-PPL over positions in ``(lo, hi]``."""
        sel = (self.positions > lo) & (self.positions <= hi)
        if not sel.any():
            raise ParameterError(f"no sweep positions in ({lo}, {hi}]")
        return self.log_ppl[sel].mean(axis=0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["position", "s", "scale", "scale_x_sqrt_d", "log_ppl", "is_best"])
        root = math.sqrt(self.d_head)
        best = self.best_index
        for i, pos in enumerate(self.positions):
            for g, lam in enumerate(self.grid):
                w.writerow([int(pos), repr(pos / self.train_len), repr(float(lam)), repr(float(lam * root)),
                            repr(float(self.log_ppl[i, g])), int(g == best[i])])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"grid": self.grid.tolist(), "positions": self.positions.tolist(),
                           "log_ppl": self.log_ppl.tolist(), "train_len": self.train_len,
                           "d_head": self.d_head}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SweepResult":
        o = json.loads(text)
        return cls(np.asarray(o["grid"]), np.asarray(o["positions"], dtype=np.int64),
                   np.asarray(o["log_ppl"]), int(o["train_len"]), int(o["d_head"]))


def bucket_positions(per_position: np.ndarray, bucket: int) -> tuple[np.ndarray, np.ndarray]:
    """Average a per-position series (index 0 = position 1) over trailing buckets.

    Returns bucket end positions and the bucket means.
    """
    n = per_position.shape[0]
    if bucket <= 1:
        return np.arange(1, n + 1), per_position
    ends = np.arange(bucket, n + 1, bucket)
    means = np.stack([per_position[e - bucket:e].mean(axis=0) for e in ends])
    return ends, means


def uniform_scale_sweep(model: Model, valset: np.ndarray, grid: Sequence[float], target_len: int,
                        bucket: int = 1, batch_size: int = 8) -> SweepResult:
    """Evaluate per-position log-PPL up to ``target_len`` once per grid value."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ParameterError("empty scale grid")
    if not (grid > 0).all():
        raise ParameterError("every grid value must be positive")
    if grid.size > 1 and not (np.diff(grid) > 0).all():
        raise ParameterError("grid must be strictly ascending")
    valset = np.asarray(valset)
    if valset.ndim != 2 or valset.shape[1] < target_len + 1:
        raise DataError(f"validation sequences must hold target_len + 1 = {target_len + 1} tokens, "
                        f"got shape {valset.shape}")
    seqs = valset[:, :target_len + 1]
    cols = [position_nll(model, seqs, float(lam), batch_size) for lam in grid]
    positions, table = bucket_positions(np.stack(cols, axis=1), bucket)
    return SweepResult(grid, positions, table, model.config.train_len, model.config.d_head)


@dataclass
class FitResult:
    c: float
    r2: float
    i_min: int
    i_max: int
    n_points: int

    def render(self) -> str:
        return f"λ=(1+{self.c:.4f} ln s)/√d, R²={self.r2:.4f} over i∈[{self.i_min},{self.i_max}]"

    def to_json(self) -> str:
        return json.dumps({"c": self.c, "r2": self.r2, "i_min": self.i_min, "i_max": self.i_max,
                           "n_points": self.n_points, "formula": self.render()}, sort_keys=True, ensure_ascii=False)


def fit_scale_curve(s, y, i_range: tuple[int, int] | None = None) -> FitResult:
    """Least-squares ``c`` in ``y = 1 + c ln s`` where ``y`` is scale * sqrt(d).

    The intercept is pinned at 1 (no rescaling at s = 1), so the normal
    equation has the closed form c = sum((y-1) ln s) / sum(ln^2 s).
    """
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if s.shape != y.shape or s.ndim != 1:
        raise DataError("s and y must be 1-D arrays of equal length")
    if (s <= 0).any():
        raise DataError("extension ratios must be positive")
    if (s > 1).sum() < 2:
        raise DataError("need at least two points with s > 1")
    if np.all(s == s[0]):
        raise DataError("degenerate fit: every point has the same extension ratio")
    ls = np.log(s)
    c = float(np.dot(y - 1.0, ls) / np.dot(ls, ls))
    resid = y - (1.0 + c * ls)
    ss_res = float(np.dot(resid, resid))
    ss_tot = float(np.dot(y - y.mean(), y - y.mean()))
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res == 0.0 else -math.inf
    else:
        r2 = 1.0 - ss_res / ss_tot
    lo, hi = i_range if i_range is not None else (0, 0)
    return FitResult(c, r2, int(lo), int(hi), int(s.size))


def fit_from_sweep(sweep: SweepResult, i_min: int | None = None, i_max: int | None = None) -> FitResult:
    """Fit the log law to the sweep's per-position optimal scales over ``[i_min, i_max]``."""
    L = sweep.train_len
    i_min = L if i_min is None else i_min
    i_max = 8 * L if i_max is None else i_max
    sel = (sweep.positions >= i_min) & (sweep.positions <= i_max)
    s = sweep.extension_ratio[sel]
    y = sweep.best_scale[sel] * math.sqrt(sweep.d_head)
    return fit_scale_curve(s, y, (i_min, i_max))


def init_head_scales(config, sweep: SweepResult | None, target_len: int, mode: str = BEST_UNIFORM,
                     constraint: bool = True) -> ScaleVector:
    """Constant ScaleVector: the sweep's best scale at ``target_len`` or the default 1/sqrt(d)."""
    if mode == DEFAULT_INIT:
        return ScaleVector.constant(config, None, constraint)
    if mode != BEST_UNIFORM:
        raise ParameterError(f"unknown init mode {mode!r}")
    if sweep is None:
        raise ParameterError("best-uniform initialization needs a sweep result")
    return ScaleVector.constant(config, sweep.best_at(target_len), constraint)


@dataclass
class TuneResult:
    scales: ScaleVector
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)


def scale_loss_and_grad(model: Model, batch: np.ndarray, values: np.ndarray) -> tuple[float, np.ndarray]:
    """LM loss on ``batch`` and its exact gradient with respect to the head scales."""
    lam = Tensor(values, requires_grad=True)
    logits, _ = model.forward(batch[:, :-1], scales=lam)
    loss = T.cross_entropy(logits, batch[:, 1:])
    loss.backward()
    for name, p in model.params.items():
        if p.grad is not None:
            raise ContractError(f"frozen base-model parameter {name!r} received a gradient")
    return loss.item(), lam.grad


def scale_grad_fd(model: Model, batch: np.ndarray, values: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central finite differences of the LM loss with respect to each head scale."""
    def loss_at(v):
        logits, _ = model.forward(batch[:, :-1], scales=v)
        return float(T.token_nll(logits.data, batch[:, 1:]).mean())

    grad = np.zeros_like(values)
    for idx in np.ndindex(values.shape):
        up, down = values.copy(), values.copy()
        up[idx] += step
        down[idx] -= step
        grad[idx] = (loss_at(up) - loss_at(down)) / (2 * step)
    return grad


def tune_head_scales(model: Model, dataset: np.ndarray, init: ScaleVector, steps: int = 200, lr: float = 0.05,
                     batch_size: int = 8, warmup: int = 20, final_lr_ratio: float = 0.1,
                     betas: tuple[float, float] = (0.9, 0.95), weight_decay: float = 0.0,
                     constraint: bool | None = None, gradient: str = "exact", seed: int = 0,
                     check_finite: bool = False, objective=None) -> TuneResult:
    """Fit only the per-head scales to the LM loss, with the base model frozen.

    Each step draws ``batch_size`` sequences (order fixed by ``seed``),
    takes an AdamW step on the scales under the warmup + cosine schedule and,
    when the focus constraint is on, clamps them back to >= 1/sqrt(d).

    Args:
        model: pretrained model; its weights are never modified.
        dataset: token sequences of shape (n, T), T being the tuning length + 1.
        init: starting scales.
        constraint: focus constraint on/off; defaults to ``init.constraint``.
        gradient: ``"exact"`` (reverse mode) or ``"fd"`` (central differences).
        objective: optional ``f(batch, values) -> (loss, grad)`` replacing the
            LM loss; the optimizer, schedule and projection are unchanged.
    """
    constraint = init.constraint if constraint is None else constraint
    values = init.values.copy()
    result = TuneResult(ScaleVector(values.copy(), init.d_head, constraint))
    if steps == 0:
        return result
    dataset = np.asarray(dataset)
    if dataset.ndim != 2 or dataset.shape[0] < 1:
        raise DataError(f"tuning data must be (n, T), got shape {dataset.shape}")
    if gradient not in ("exact", "fd"):
        raise ParameterError(f"gradient mode must be 'exact' or 'fd', got {gradient!r}")
    model.requires_grad_(False)
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(dataset.shape[0])
                            for _ in range(math.ceil(steps * batch_size / dataset.shape[0]))])
    state = OptimState(lr=lr, beta1=betas[0], beta2=betas[1], weight_decay=weight_decay)
    params = {"scales": values}
    with T.finite_checks(check_finite):
        for step in range(1, steps + 1):
            batch = dataset[order[(step - 1) * batch_size: step * batch_size]]
            if objective is not None:
                loss, grad = objective(batch, values)
            elif gradient == "exact":
                loss, grad = scale_loss_and_grad(model, batch, values)
            else:
                grad = scale_grad_fd(model, batch, values)
                logits, _ = model.forward(batch[:, :-1], scales=values)
                loss = float(T.token_nll(logits.data, batch[:, 1:]).mean())
            lr_t = cosine_schedule(step, steps, min(warmup, steps - 1), lr, final_lr_ratio)
            adamw_step(params, {"scales": grad}, state, lr_t)
            if constraint:
                values[...] = project_scales(values, init.d_head, True)
            if not (values > 0).all():
                # an unconstrained step can overshoot past zero; keep the temperature valid
                values[...] = np.maximum(values, 1e-6)
            result.losses.append(loss)
            result.lrs.append(lr_t)
            log.info("tune step %d/%d loss %.4f", step, steps, loss)
    result.scales = ScaleVector(values.copy(), init.d_head, constraint)
    return result


@dataclass
class CorrelationReport:
    rows: list[tuple[int, int, float, float]]  # (layer, head, entropy, scale)
    spearman: dict[int, float]
    degenerate: dict[int, bool]
    position: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "head", "entropy", "scale", "layer_spearman", "degenerate"])
        for layer, head, ent, lam in self.rows:
            w.writerow([layer, head, repr(float(ent)), repr(float(lam)),
                        repr(float(self.spearman[layer])), int(self.degenerate[layer])])
        return buf.getvalue()


def layer_rank_correlation(entropy: np.ndarray, scale: np.ndarray) -> tuple[float, bool]:
    """Spearman correlation; (nan, True) when either side has no variance."""
    if np.ptp(entropy) == 0 or np.ptp(scale) == 0 or entropy.size < 2:
        return math.nan, True
    return float(stats.spearmanr(entropy, scale).statistic), False


def correlation_table(entropy: np.ndarray, scales: np.ndarray, position: int) -> CorrelationReport:
    """Pair each head's entropy with its scale; rank-correlate within each layer.

    Both inputs have shape (layers, heads).
    """
    rows, rho, degenerate = [], {}, {}
    for layer in range(entropy.shape[0]):
        for head in range(entropy.shape[1]):
            rows.append((layer, head, float(entropy[layer, head]), float(scales[layer, head])))
        rho[layer], degenerate[layer] = layer_rank_correlation(entropy[layer], scales[layer])
    return CorrelationReport(rows, rho, degenerate, position)


def scale_entropy_correlation(model: Model, scales: ScaleVector, valset: np.ndarray, position: int,
                              batch_size: int = 8) -> CorrelationReport:
    """Converged per-head entropy at ``position`` (under ``scales``) against the searched scale."""
    valset = np.asarray(valset)
    if position < 1 or position > valset.shape[1]:
        raise ParameterError(f"position {position} outside evaluated length {valset.shape[1]}")
    sums, n = entropy_sums(model, valset[:, :position], scales, batch_size)
    return correlation_table(sums[:, :, position - 1] / n, scales.values, position)
