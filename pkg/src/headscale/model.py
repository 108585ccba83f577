"""Causal decoder-only transformer with a pluggable position scheme and per-head temperatures."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ParameterError, TokenIndexError
from .tensor import Tensor

NOPE = "nope"
ROPE = "rope"
CHECKPOINT_MAGIC = b"HSCKPT01"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    vocab_size: int = 256
    train_len: int = 128
    d_ff: int = 256
    position_scheme: str = NOPE
    rope_base: float = 10000.0
    tie_embeddings: bool = False
    norm_eps: float = 1e-6
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "vocab_size", "train_len", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.position_scheme not in (NOPE, ROPE):
            raise ConfigError(f"position_scheme must be '{NOPE}' or '{ROPE}', got {self.position_scheme!r}")
        if self.position_scheme == ROPE and self.d_head % 2:
            raise ConfigError(f"rotary encoding needs an even head width, got d_head={self.d_head}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def total_heads(self) -> int:
        return self.n_layers * self.n_heads

    @property
    def default_scale(self) -> float:
        return 1.0 / math.sqrt(self.d_head)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_count(config: ModelConfig) -> int:
    """Closed-form number of weights for ``config``."""
    d, v, f = config.d_model, config.vocab_size, config.d_ff
    per_layer = 4 * d * d + 3 * d * f + 2 * d
    head = 0 if config.tie_embeddings else v * d
    return v * d + config.n_layers * per_layer + d + head


@dataclass
class ScaleVector:
    """Per-head softmax temperatures, shape (n_layers, n_heads)."""

    values: np.ndarray
    d_head: int
    constraint: bool = True

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ParameterError(f"scale values must be 2-D (layers, heads), got shape {self.values.shape}")
        if not np.all(self.values > 0):
            raise ParameterError("every head scale must be positive")

    @property
    def floor(self) -> float:
        return 1.0 / math.sqrt(self.d_head)

    @property
    def size(self) -> int:
        return int(self.values.size)

    @classmethod
    def constant(cls, config: ModelConfig, value: float | None = None, constraint: bool = True) -> "ScaleVector":
        value = config.default_scale if value is None else float(value)
        return cls(np.full((config.n_layers, config.n_heads), value), config.d_head, constraint)

    def satisfies_floor(self) -> bool:
        return bool(np.all(self.values >= self.floor))

    def copy(self) -> "ScaleVector":
        return ScaleVector(self.values.copy(), self.d_head, self.constraint)

    def to_json(self) -> str:
        return json.dumps({"d_head": self.d_head, "constraint": self.constraint,
                           "values": self.values.tolist()}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ScaleVector":
        obj = json.loads(text)
        return cls(np.asarray(obj["values"]), int(obj["d_head"]), bool(obj.get("constraint", True)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ScaleVector":
        return cls.from_json(Path(path).read_text())


@dataclass
class AttentionTrace:
    """Entropy of every attention row, shape (layers, heads, batch, T), 1-based positions.

    ``rows`` maps a probed 1-based query position to its full attention rows,
    shape (layers, heads, batch, position).
    """

    entropy: np.ndarray
    rows: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def positions(self) -> np.ndarray:
        return np.arange(1, self.entropy.shape[-1] + 1)


def row_entropy(probs: np.ndarray) -> np.ndarray:
    """-sum p ln p over the last axis with 0 ln 0 = 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def rope_apply(x, positions, base: float = 10000.0):
    """Rotary encoding of rows of ``x`` (array or Tensor, shape (..., T, d))."""
    if isinstance(x, Tensor):
        return T.rope(x, positions, base)
    return T.rope(Tensor(x), positions, base).data


def attention_head(q: Tensor, k: Tensor, v: Tensor, lam, scheme: str = NOPE,
                   positions=None, rope_base: float = 10000.0) -> tuple[Tensor, Tensor]:
    """Causal scaled dot-product attention for one head (or a batch of heads).

    ``q``, ``k``, ``v`` have shape (..., i, d). ``lam`` is a positive float or
    a Tensor broadcastable to the (..., i, i) score matrix. Returns the
    attention output and the lower-triangular probability matrix.
    """
    n = q.shape[-2]
    if scheme == ROPE:
        pos = np.arange(n) if positions is None else np.asarray(positions)
        q = T.rope(q, pos, rope_base)
        k = T.rope(k, pos, rope_base)
    elif scheme != NOPE:
        raise ConfigError(f"unknown position scheme {scheme!r}")
    scores = T.matmul(q, T.transpose(k))
    probs = T.softmax_temp(scores, lam, T.causal_mask(n))
    return T.matmul(probs, v), probs


def _param_names(config: ModelConfig) -> list[str]:
    names = ["tok_emb"]
    for i in range(config.n_layers):
        p = f"layers.{i}."
        names += [p + "attn_norm", p + "wq", p + "wk", p + "wv", p + "wo",
                  p + "ffn_norm", p + "w_gate", p + "w_up", p + "w_down"]
    names.append("final_norm")
    if not config.tie_embeddings:
        names.append("lm_head")
    return names


def _param_shape(config: ModelConfig, name: str) -> tuple[int, ...]:
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    leaf = name.rsplit(".", 1)[-1]
    return {
        "tok_emb": (v, d), "lm_head": (d, v), "final_norm": (d,),
        "attn_norm": (d,), "ffn_norm": (d,),
        "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "w_gate": (d, f), "w_up": (d, f), "w_down": (f, d),
    }[leaf]


class Model:
    """Weights plus the forward pass. Build one with :func:`init_model`."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def requires_grad_(self, flag: bool) -> "Model":
        for p in self.params.values():
            p.requires_grad = flag
            if not flag:
                p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _scale_tensor(self, scales) -> Tensor | float | np.ndarray:
        cfg = self.config
        if scales is None:
            return cfg.default_scale
        if isinstance(scales, ScaleVector):
            scales = scales.values
        if isinstance(scales, Tensor):
            if scales.shape != (cfg.n_layers, cfg.n_heads):
                raise ParameterError(f"scale tensor shape {scales.shape} != {(cfg.n_layers, cfg.n_heads)}")
            return scales
        if np.isscalar(scales):
            return float(scales)
        arr = np.asarray(scales, dtype=np.float64)
        if arr.shape != (cfg.n_layers, cfg.n_heads):
            raise ParameterError(f"scale array shape {arr.shape} != {(cfg.n_layers, cfg.n_heads)}")
        return arr

    def forward(self, tokens, scales=None, trace: bool = False, probe_positions: Iterable[int] = (),
                position_offset: int = 0) -> tuple[Tensor, AttentionTrace | None]:
        """Logits for every position of ``tokens`` (shape (T,) or (B, T)).

        ``scales`` may be None (conventional 1/sqrt(d) everywhere), a float
        (uniform scale), a ScaleVector / (layers, heads) array (head-based
        scale), or a Tensor of that shape when gradients into the scales are
        wanted. With ``trace`` on, per-row attention entropies are returned.
        """
        cfg = self.config
        tokens = np.asarray(tokens)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None, :]
        if tokens.ndim != 2 or tokens.shape[1] < 1:
            raise ParameterError(f"tokens must have shape (T,) or (B, T) with T >= 1, got {tokens.shape}")
        if tokens.dtype.kind not in "iu":
            raise TokenIndexError(f"token ids must be integers, got dtype {tokens.dtype}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise TokenIndexError(f"token id out of range [0, {cfg.vocab_size}): "
                                  f"min={tokens.min()}, max={tokens.max()}")
        B, n = tokens.shape
        H, dh = cfg.n_heads, cfg.d_head
        lam_all = self._scale_tensor(scales)
        positions = np.arange(n) + position_offset
        probe_positions = [int(p) for p in probe_positions]
        entropies = []
        rows: dict[int, list[np.ndarray]] = {p: [] for p in probe_positions}
        P = self.params

        x = T.embedding(P["tok_emb"], tokens)
        for li in range(cfg.n_layers):
            pre = f"layers.{li}."
            h = T.rms_norm(x, P[pre + "attn_norm"], cfg.norm_eps)

            def heads(w):
                return T.transpose(T.reshape(T.matmul(h, w), (B, n, H, dh)), (0, 2, 1, 3))

            q, k, v = heads(P[pre + "wq"]), heads(P[pre + "wk"]), heads(P[pre + "wv"])
            if isinstance(lam_all, Tensor):
                lam = T.reshape(T.take(lam_all, li), (H, 1, 1))
            elif isinstance(lam_all, np.ndarray):
                lam = lam_all[li].reshape(H, 1, 1)
            else:
                lam = lam_all
            out, probs = attention_head(q, k, v, lam, cfg.position_scheme, positions, cfg.rope_base)
            if trace:
                ent = row_entropy(probs.data)
                bound = np.log(np.arange(1, n + 1, dtype=np.float64))
                entropies.append(np.clip(ent, 0.0, bound).transpose(1, 0, 2))
                for p in probe_positions:
                    rows[p].append(probs.data[:, :, p - 1, :p].transpose(1, 0, 2).copy())
            merged = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, n, cfg.d_model))
            x = T.add(x, T.matmul(merged, P[pre + "wo"]))
            h = self._ffn_input(x, pre)
            x = T.add(x, self._ffn(h, pre))

        x = T.rms_norm(x, P["final_norm"], cfg.norm_eps)
        head = T.transpose(P["tok_emb"]) if cfg.tie_embeddings else P["lm_head"]
        logits = T.matmul(x, head)
        if squeeze:
            logits = T.reshape(logits, (n, cfg.vocab_size))
        tr = None
        if trace:
            tr = AttentionTrace(np.stack(entropies), {p: np.stack(r) for p, r in rows.items()})
        return logits, tr

    __call__ = forward

    def _ffn_input(self, x: Tensor, pre: str) -> Tensor:
        return T.rms_norm(x, self.params[pre + "ffn_norm"], self.config.norm_eps)

    def _ffn(self, h: Tensor, pre: str) -> Tensor:
        """Gated feed-forward sublayer; acts on each position independently."""
        P = self.params
        gated = T.mul(T.silu(T.matmul(h, P[pre + "w_gate"])), T.matmul(h, P[pre + "w_up"]))
        return T.matmul(gated, P[pre + "w_down"])

    def ffn_sublayer(self, x: np.ndarray, layer: int) -> np.ndarray:
        pre = f"layers.{layer}."
        return self._ffn(self._ffn_input(Tensor(x), pre), pre).data

    # -- checkpoints -------------------------------------------------------

    def to_bytes(self) -> bytes:
        manifest = {"format": "headscale-checkpoint", "version": 1, "config": self.config.to_dict(),
                    "dtype": "<f8", "tensors": []}
        payloads = []
        offset = 0
        for name in _param_names(self.config):
            arr = np.ascontiguousarray(self.params[name].data, dtype="<f8")
            manifest["tensors"].append({"name": name, "shape": list(arr.shape),
                                        "offset": offset, "nbytes": arr.nbytes})
            payloads.append(arr.tobytes())
            offset += arr.nbytes
        head = json.dumps(manifest, sort_keys=True).encode("utf-8")
        return CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + b"".join(payloads)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Model":
        if blob[:8] != CHECKPOINT_MAGIC:
            raise ContractError("not a headscale checkpoint (bad magic)")
        (hlen,) = struct.unpack("<Q", blob[8:16])
        manifest = json.loads(blob[16:16 + hlen].decode("utf-8"))
        config = ModelConfig.from_dict(manifest["config"])
        base = 16 + hlen
        params = {}
        for entry in manifest["tensors"]:
            start = base + entry["offset"]
            arr = np.frombuffer(blob[start:start + entry["nbytes"]], dtype="<f8").reshape(entry["shape"])
            params[entry["name"]] = Tensor(arr.astype(np.float64), name=entry["name"])
        if list(params) != _param_names(config):
            raise ContractError("checkpoint tensor list does not match its config")
        return cls(config, params)

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        return cls.from_bytes(Path(path).read_bytes())


def init_model(config: ModelConfig) -> Model:
    """Deterministic scaled-normal initialization from ``config.seed``.

    Residual-branch output projections are shrunk by 1/sqrt(2 * n_layers);
    normalization gains start at one.
    """
    rng = np.random.default_rng(config.seed)
    resid_std = config.init_std / math.sqrt(2 * config.n_layers)
    params = {}
    for name in _param_names(config):
        shape = _param_shape(config, name)
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("norm"):
            arr = np.ones(shape)
        elif leaf in ("wo", "w_down"):
            arr = rng.normal(0.0, resid_std, size=shape)
        else:
            arr = rng.normal(0.0, config.init_std, size=shape)
        params[name] = Tensor(arr, name=name)
    return Model(config, params)
