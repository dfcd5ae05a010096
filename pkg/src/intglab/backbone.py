"""Llama-style decoder-only language model with per-layer attention variants."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import (
    AttentionWeights,
    ScoreVariant,
    check_layout,
    multi_head_attention,
    truncated_normal,
)
from .errors import ConfigError, ContractError, DataError, DimensionError
from .tensor import Tensor

# Keys written to / read from config files.
CONFIG_KEYS = (
    "d_model", "n_layers", "n_heads", "intermediate_size", "vocab_size", "max_seq_len",
    "variant", "signals", "denoise_ratio", "placement", "lambda_schedule",
    "tie_embeddings", "seed",
)
EXTRA_KEYS = ("rope_theta", "norm_eps", "diff_head_norm", "init_std")


def layer_schedule(n_layers: int, denoise_ratio: float, placement: str,
                   variant: ScoreVariant) -> list[ScoreVariant]:
    """Variant per layer: ``round(ratio * n_layers)`` denoising layers at one end, Vanilla elsewhere."""
    if n_layers < 1:
        raise ConfigError(f"n_layers must be >= 1, got {n_layers}")
    if not 0.0 <= denoise_ratio <= 1.0:
        raise ConfigError(f"denoise_ratio must lie in [0, 1], got {denoise_ratio}")
    if placement not in ("top", "bottom"):
        raise ConfigError(f"placement must be 'top' or 'bottom', got {placement!r}")
    # round half up so 0.5 * odd counts is deterministic and documented
    k = int(np.floor(denoise_ratio * n_layers + 0.5))
    vanilla = ScoreVariant.vanilla()
    if placement == "top":
        return [vanilla] * (n_layers - k) + [variant] * k
    return [variant] * k + [vanilla] * (n_layers - k)


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    intermediate_size: int = 344
    vocab_size: int = 512
    max_seq_len: int = 256
    variant: str = "vanilla"
    signals: int = 8
    denoise_ratio: float = 1.0
    placement: str = "top"
    lambda_schedule: str | float = "default"
    tie_embeddings: bool = True
    seed: int = 0
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5
    diff_head_norm: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        self.validate()

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def score_variant(self) -> ScoreVariant:
        return ScoreVariant(self.variant, signals=int(self.signals))

    @property
    def variant_schedule(self) -> list[ScoreVariant]:
        return layer_schedule(self.n_layers, self.denoise_ratio, self.placement, self.score_variant)

    def validate(self) -> None:
        for key in ("d_model", "n_layers", "n_heads", "intermediate_size", "vocab_size", "max_seq_len"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.norm_eps <= 0:
            raise ConfigError("norm_eps must be positive")
        sched = self.variant_schedule
        if len(sched) != self.n_layers:
            raise ConfigError("variant schedule length differs from n_layers")
        for v in sched:
            d_h = check_layout(self.d_model, self.n_heads, v)
            if d_h % 2:
                raise ConfigError(f"{v}: signal width d_h={d_h} must be even for rotary embeddings")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ModelConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(raw)

    def with_overrides(self, **kw) -> "ModelConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


PRESETS: dict[str, dict] = {
    "toy": dict(d_model=16, n_layers=2, n_heads=2, intermediate_size=32, vocab_size=16,
                max_seq_len=32, signals=2),
    "desk": dict(d_model=128, n_layers=4, n_heads=4, intermediate_size=344, vocab_size=512,
                 max_seq_len=256, signals=8),
    "125m": dict(d_model=768, n_layers=20, n_heads=8, intermediate_size=1155, vocab_size=32000,
                 max_seq_len=2048, signals=8),
    "1.2b": dict(d_model=2048, n_layers=22, n_heads=32, intermediate_size=5632, vocab_size=32000,
                 max_seq_len=2048, signals=8),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    params = dict(PRESETS[name])
    params.update({k: v for k, v in overrides.items() if v is not None})
    return ModelConfig(**params)


def param_shapes(config: ModelConfig, include_lambda: bool = False) -> dict[str, tuple]:
    """Name -> shape of every trainable tensor, in initialization order."""
    d, f, v = config.d_model, config.intermediate_size, config.vocab_size
    shapes: dict[str, tuple] = {"embed": (v, d)}
    for i, var in enumerate(config.variant_schedule):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (d,)
        for name in ("wq", "wk", "wv", "wo"):
            shapes[p + name] = (d, d)
        if include_lambda and var.tag == "diff":
            shapes[p + "lambda"] = ()
        shapes[p + "mlp_norm"] = (d,)
        shapes[p + "w_gate"] = (d, f)
        shapes[p + "w_up"] = (d, f)
        shapes[p + "w_down"] = (f, d)
    shapes["final_norm"] = (d,)
    if not config.tie_embeddings:
        shapes["lm_head"] = (d, v)
    return shapes


def param_count(config: ModelConfig, include_lambda: bool = False) -> int:
    """Number of weight entries; Diff lambda scalars only with ``include_lambda``."""
    return int(sum(int(np.prod(s)) for s in param_shapes(config, include_lambda).values()))


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------
def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    """``x / sqrt(mean(x^2) + eps) * weight`` over the last axis."""
    if eps < 0:
        raise ContractError("eps must be non-negative")
    xd, w = x.data, weight.data
    if xd.shape[-1] != w.shape[-1]:
        raise DimensionError(f"rms_norm: weight {w.shape} does not match input {xd.shape}")
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xn = xd * r
    d = xd.shape[-1]

    def vjp(g):
        gw = (g * xn).reshape(-1, d).sum(axis=0) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gn = g * w
            gx = r * gn - xn * r * (gn * xn).sum(axis=-1, keepdims=True) / d
        return gx, gw

    return Tensor.from_op(xn * w, (x, weight), vjp, "rms_norm")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    v = weight.shape[0]

    def vjp(g):
        full = np.zeros(weight.shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise DataError(f"token id out of range for vocabulary of size {v}")
    return Tensor.from_op(weight.data[ids], (weight,), vjp, "embedding")


class AttentionCaptureSink(list):
    """List of per-layer score arrays filled during a forward pass."""


class TransformerLM:
    """Decoder-only LM: embedding, ``n_layers`` pre-norm blocks, final norm, (tied) head."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.schedule = config.variant_schedule
        if params is None:
            params = self._init_params(config)
        self.params = params
        expected = param_shapes(config, include_lambda=True)
        missing = set(expected) - set(params)
        if missing:
            raise DataError(f"missing parameters: {sorted(missing)[:5]}")
        for k, shape in expected.items():
            if tuple(params[k].shape) != tuple(shape):
                raise DataError(f"parameter {k} has shape {params[k].shape}, expected {shape}")

    @staticmethod
    def _init_params(config: ModelConfig) -> dict[str, Tensor]:
        rng = np.random.Generator(np.random.Philox(config.seed))
        std = config.init_std
        params: dict[str, Tensor] = {}
        for name, shape in param_shapes(config, include_lambda=True).items():
            if name.endswith("norm"):
                arr = np.ones(shape)
            elif name.endswith("lambda"):
                layer = int(name.split(".")[1]) + 1
                from .attention import lambda_init_value
                arr = np.array(lambda_init_value(layer, config.lambda_schedule))
            else:
                arr = truncated_normal(rng, shape, std)
            params[name] = Tensor(arr, requires_grad=True, name=name)
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_params(self, include_lambda: bool = False) -> int:
        return sum(p.size for k, p in self.params.items() if include_lambda or not k.endswith("lambda"))

    def attention_weights(self, i: int) -> AttentionWeights:
        p = f"layers.{i}."
        c = self.config
        lam = self.params.get(p + "lambda")
        lam_init = 0.0
        if lam is not None:
            from .attention import lambda_init_value
            lam_init = lambda_init_value(i + 1, c.lambda_schedule)
        return AttentionWeights(self.params[p + "wq"], self.params[p + "wk"], self.params[p + "wv"],
                                self.params[p + "wo"], n_heads=c.n_heads, lam=lam, lam_init=lam_init)

    def forward(self, tokens, capture: list | None = None) -> Tensor:
        """Logits ``(B, N, vocab)`` for token ids ``(B, N)`` (or ``(N, vocab)`` for 1-D input)."""
        ids = np.asarray(tokens, dtype=np.int64)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None, :]
        c = self.config
        if ids.shape[1] > c.max_seq_len:
            raise DataError(f"sequence of length {ids.shape[1]} exceeds max_seq_len {c.max_seq_len}")
        if ids.shape[1] < 1:
            raise DataError("empty token sequence")
        P = self.params
        h = embedding(P["embed"], ids)
        for i, variant in enumerate(self.schedule):
            p = f"layers.{i}."
            a = rms_norm(h, P[p + "attn_norm"], c.norm_eps)
            h = h + multi_head_attention(a, self.attention_weights(i), variant, causal=True,
                                         rope_theta=c.rope_theta, head_norm=c.diff_head_norm,
                                         capture=capture)
            m = rms_norm(h, P[p + "mlp_norm"], c.norm_eps)
            gated = T.silu(m @ P[p + "w_gate"]) * (m @ P[p + "w_up"])
            h = h + gated @ P[p + "w_down"]
        h = rms_norm(h, P["final_norm"], c.norm_eps)
        head = T.transpose(P["embed"]) if c.tie_embeddings else P["lm_head"]
        logits = h @ head
        return logits[0] if squeeze else logits

    __call__ = forward

    def logits(self, tokens) -> np.ndarray:
        with T.no_grad():
            return self.forward(tokens).data

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    @classmethod
    def from_state(cls, config: ModelConfig, state: dict[str, np.ndarray]) -> "TransformerLM":
        return cls(config, {k: Tensor(v, requires_grad=True, name=k) for k, v in state.items()})


def forward_lm(tokens, config: ModelConfig, weights: TransformerLM | dict, capture: list | None = None) -> Tensor:
    model = weights if isinstance(weights, TransformerLM) else TransformerLM(config, weights)
    return model.forward(tokens, capture=capture)
