"""Score functions (Vanilla, Cog, Diff, Intg) and the multi-head attention layer.

All four variants spend the same query/key budget: a head of width
``head_dim`` is split into ``n_signals`` query/key pairs of width
``d_h = head_dim / n_signals`` (1 signal for Vanilla/Cog, 2 for Diff,
``S`` for Intg). Keys are scaled by ``1/sqrt(d_h)`` before the product.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

VARIANTS = ("vanilla", "cog", "diff", "intg")


@dataclass(frozen=True)
class ScoreVariant:
    tag: str
    signals: int = 8
    lambda_init: float | None = None

    def __post_init__(self):
        tag = self.tag.lower()
        if tag not in VARIANTS:
            raise ConfigError(f"unknown variant {self.tag!r}; expected one of {VARIANTS}")
        object.__setattr__(self, "tag", tag)
        if tag == "intg" and self.signals < 1:
            raise ConfigError(f"intg needs at least one signal, got {self.signals}")

    @classmethod
    def vanilla(cls) -> "ScoreVariant":
        return cls("vanilla")

    @classmethod
    def cog(cls) -> "ScoreVariant":
        return cls("cog")

    @classmethod
    def diff(cls, lambda_init: float | None = None) -> "ScoreVariant":
        return cls("diff", lambda_init=lambda_init)

    @classmethod
    def intg(cls, signals: int = 8) -> "ScoreVariant":
        return cls("intg", signals=signals)

    @property
    def n_signals(self) -> int:
        return {"vanilla": 1, "cog": 1, "diff": 2}.get(self.tag, self.signals)

    @property
    def signed(self) -> bool:
        """True when scores may be negative."""
        return self.tag in ("cog", "diff")

    def __str__(self) -> str:
        return f"intg(S={self.signals})" if self.tag == "intg" else self.tag


def head_dim_split(variant: ScoreVariant, head_dim: int) -> int:
    """Width ``d_h`` of each query/key signal inside a head."""
    n = variant.n_signals
    if head_dim < 1 or head_dim % n:
        raise ConfigError(
            f"{variant}: head_dim {head_dim} is not divisible by {n} signals"
        )
    return head_dim // n


# ---------------------------------------------------------------------------
# Logits and score functions
# ---------------------------------------------------------------------------
def qk_logits(x: Tensor, wq: Tensor, wk: Tensor, d_h: int | None = None) -> Tensor:
    """``(X Wq)(X Wk / sqrt(d_h))^T``; ``d_h`` defaults to the projection width."""
    if wq.shape != wk.shape:
        raise DimensionError(f"query/key widths differ: {wq.shape} vs {wk.shape}")
    d_h = wq.shape[-1] if d_h is None else d_h
    if d_h < 1:
        raise ContractError("d_h must be >= 1")
    q = x @ wq
    k = (x @ wk) * (1.0 / math.sqrt(d_h))
    return q @ T.swap_last(k)


def _softmax(z: Tensor, mask, causal: bool) -> Tensor:
    return T.softmax_rows(z, mask=mask, causal=causal)


def score_vanilla(z: Tensor, mask=None, causal: bool = False) -> Tensor:
    return _softmax(z, mask, causal)


def score_cog(z: Tensor, mask=None, causal: bool = False) -> Tensor:
    """``sign(Z) * softmax(|Z|)``; masking is applied to ``|Z|`` so masked weights are 0.

    A zero logit takes sign +1, which keeps absolute rows summing to 1 and
    makes Cog coincide with Vanilla on nonnegative logits.
    """
    sign = Tensor(np.where(z.data >= 0.0, 1.0, -1.0))
    return sign * _softmax(T.tabs(z), mask, causal)


def score_diff(z1: Tensor, z2: Tensor, lam, mask=None, causal: bool = False) -> Tensor:
    if z1.shape != z2.shape:
        raise DimensionError(f"diff logits differ in shape: {z1.shape} vs {z2.shape}")
    lam = lam if isinstance(lam, Tensor) else Tensor(float(lam))
    return _softmax(z1, mask, causal) - lam * _softmax(z2, mask, causal)


def score_intg(zs: Sequence[Tensor], mask=None, causal: bool = False) -> Tensor:
    """Softmax of the arithmetic mean of the signal logits."""
    zs = list(zs)
    if not zs:
        raise ContractError("intg needs at least one signal")
    if any(z.shape != zs[0].shape for z in zs):
        raise DimensionError(f"signal logits differ in shape: {[z.shape for z in zs]}")
    avg = T.stack_sum(zs) * (1.0 / len(zs))
    return _softmax(avg, mask, causal)


@dataclass
class ScoreMatrix:
    """Score matrix of one head, with the invariants each variant must satisfy."""

    values: np.ndarray
    variant: ScoreVariant
    causal: bool = True
    lam: float = 0.0

    def row_identity_error(self) -> float:
        v = self.values
        if self.variant.tag == "cog":
            return float(np.abs(np.abs(v).sum(-1) - 1.0).max())
        target = 1.0 - self.lam if self.variant.tag == "diff" else 1.0
        return float(np.abs(v.sum(-1) - target).max())

    def causal_violation(self) -> float:
        """Largest magnitude strictly above the diagonal (must be exactly 0)."""
        n = self.values.shape[-1]
        upper = np.triu(np.ones((n, n), dtype=bool), 1)
        return float(np.abs(self.values[..., upper]).max(initial=0.0))


# ---------------------------------------------------------------------------
# Diff lambda
# ---------------------------------------------------------------------------
def lambda_init_value(layer_index: int, schedule="default") -> float:
    """Initial lambda for a 1-based layer index.

    ``"default"`` is ``0.8 - 0.6 * exp(-0.3 * (l - 1))``; a number gives a
    constant schedule.
    """
    if layer_index < 1:
        raise ContractError(f"layer_index is 1-based, got {layer_index}")
    if schedule in (None, "default"):
        return 0.8 - 0.6 * math.exp(-0.3 * (layer_index - 1))
    if isinstance(schedule, str) and schedule.startswith("constant:"):
        schedule = schedule.split(":", 1)[1]
    try:
        return float(schedule)
    except (TypeError, ValueError):
        raise ConfigError(f"bad lambda schedule {schedule!r}") from None


def lambda_value(raw_params, layer_index: int, lambda_init_schedule="default") -> float:
    """Current lambda of a Diff layer; falls back to the schedule before init."""
    if raw_params is None:
        return lambda_init_value(layer_index, lambda_init_schedule)
    data = raw_params.data if isinstance(raw_params, Tensor) else np.asarray(raw_params)
    return float(np.asarray(data).reshape(()))


# ---------------------------------------------------------------------------
# Weights and the multi-head layer
# ---------------------------------------------------------------------------
def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Zero-mean normal truncated at two standard deviations."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


@dataclass
class AttentionWeights:
    """Fused projections of one attention layer.

    ``wq``/``wk`` are ``d_m x d_m``; column block ``[h*head_dim + s*d_h, +d_h)``
    holds signal ``s`` of head ``h``. ``lam`` is the per-layer Diff scalar.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    n_heads: int
    lam: Tensor | None = None
    lam_init: float = 0.0

    @classmethod
    def init(cls, d_m: int, n_heads: int, variant: ScoreVariant, rng: np.random.Generator,
             layer_index: int = 1, lambda_schedule="default", std: float = 0.02) -> "AttentionWeights":
        check_layout(d_m, n_heads, variant)
        mats = [Tensor(truncated_normal(rng, (d_m, d_m), std), requires_grad=True) for _ in range(4)]
        lam = None
        if variant.tag == "diff":
            init = variant.lambda_init
            if init is None:
                init = lambda_init_value(layer_index, lambda_schedule)
            lam = Tensor(float(init), requires_grad=True)
        return cls(*mats, n_heads=n_heads, lam=lam, lam_init=float(init) if lam is not None else 0.0)

    @property
    def d_m(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d_m // self.n_heads

    def signal_weights(self, variant: ScoreVariant, head: int, s: int) -> tuple[np.ndarray, np.ndarray]:
        """The ``d_m x d_h`` query/key matrices of one signal."""
        d_h = head_dim_split(variant, self.head_dim)
        lo = head * self.head_dim + s * d_h
        return self.wq.data[:, lo:lo + d_h], self.wk.data[:, lo:lo + d_h]

    def qk_param_count(self) -> int:
        return self.wq.size + self.wk.size

    def parameters(self) -> list[Tensor]:
        out = [self.wq, self.wk, self.wv, self.wo]
        if self.lam is not None:
            out.append(self.lam)
        return out


def check_layout(d_m: int, n_heads: int, variant: ScoreVariant) -> int:
    if n_heads < 1 or d_m % n_heads:
        raise ConfigError(f"d_m {d_m} is not divisible by {n_heads} heads")
    return head_dim_split(variant, d_m // n_heads)


def rope_tables(n: int, dim: int, theta: float, positions=None) -> tuple[np.ndarray, np.ndarray]:
    if dim % 2:
        raise DimensionError(f"rotary embedding needs an even width, got {dim}")
    pos = np.arange(n, dtype=np.float64) if positions is None else np.asarray(positions, dtype=np.float64)
    freqs = theta ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    ang = pos[:, None] * freqs[None, :]
    return np.cos(ang), np.sin(ang)


def rope_apply(x: Tensor, positions=None, theta: float = 10000.0) -> Tensor:
    """Rotate adjacent pairs ``(x[2i], x[2i+1])`` by ``position * theta^(-2i/d)``.

    ``x`` is ``(..., N, d)``; positions default to ``0..N-1``.
    """
    n, d = x.shape[-2], x.shape[-1]
    cos, sin = rope_tables(n, d, theta, positions)
    return _rotate(x, cos, sin)


def _rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    def rot(a, c, s):
        a0, a1 = a[..., 0::2], a[..., 1::2]
        out = np.empty_like(a)
        out[..., 0::2] = a0 * c - a1 * s
        out[..., 1::2] = a0 * s + a1 * c
        return out

    return Tensor.from_op(rot(x.data, cos, sin), (x,), lambda g: (rot(g, cos, -sin),), "rope")


def _split_signals(t: Tensor, n_heads: int, n_sig: int, d_h: int) -> Tensor:
    # (..., N, H*S*d_h) -> (..., H, S, N, d_h)
    lead = t.shape[:-2]
    n = t.shape[-2]
    t = t.reshape(lead + (n, n_heads, n_sig, d_h))
    k = len(lead)
    axes = tuple(range(k)) + (k + 1, k + 2, k, k + 3)
    return T.transpose(t, axes)


def _join_signals(t: Tensor) -> Tensor:
    # (..., H, S, N, d_h) -> (..., H, N, S*d_h)
    *lead, s, n, d_h = t.shape
    k = len(lead)
    t = T.transpose(t, tuple(range(k)) + (k + 1, k, k + 2))
    return t.reshape(tuple(lead) + (n, s * d_h))


def attention_scores(x: Tensor, weights: AttentionWeights, variant: ScoreVariant,
                     causal: bool = True, mask=None, rope_theta: float | None = None) -> Tensor:
    """Score matrices ``(..., H, N, N)`` of every head."""
    H = weights.n_heads
    d_h = check_layout(weights.d_m, H, variant)
    n_sig = variant.n_signals
    q = _split_signals(x @ weights.wq, H, n_sig, d_h)
    k = _split_signals(x @ weights.wk, H, n_sig, d_h)
    if rope_theta is not None:
        cos, sin = rope_tables(x.shape[-2], d_h, rope_theta)
        q, k = _rotate(q, cos, sin), _rotate(k, cos, sin)
    k = k * (1.0 / math.sqrt(d_h))
    if mask is not None and np.ndim(mask) == 3:
        mask = np.asarray(mask, dtype=bool)[:, None]  # per-sequence mask, shared by heads
    if variant.tag == "intg" and n_sig > 1:
        # mean_s q_s k_s^T is one product over the concatenated signal axes, scaled by 1/S
        return score_vanilla(_join_signals(q) @ T.swap_last(_join_signals(k)) * (1.0 / n_sig), mask, causal)
    z = q @ T.swap_last(k)  # (..., H, S, N, N)

    def sig(s):
        return z[(Ellipsis, s, slice(None), slice(None))]

    tag = variant.tag
    if tag == "vanilla":
        return score_vanilla(sig(0), mask, causal)
    if tag == "cog":
        return score_cog(sig(0), mask, causal)
    if tag == "diff":
        if weights.lam is None:
            raise ConfigError("diff layer has no lambda parameter")
        return score_diff(sig(0), sig(1), weights.lam, mask, causal)
    avg = z.mean(axis=-3) if n_sig > 1 else sig(0)
    return score_vanilla(avg, mask, causal)


def multi_head_attention(x: Tensor, weights: AttentionWeights, variant: ScoreVariant,
                         causal: bool = True, mask=None, rope_theta: float | None = None,
                         head_norm: bool = False, capture: list | None = None) -> Tensor:
    """``concat_h(phi_h(X) X W_V^h) W_O`` for ``X`` of shape ``(N, d_m)`` or ``(B, N, d_m)``.

    When ``capture`` is a list the per-head score arrays are appended to it.
    ``head_norm`` rescales each head output to unit RMS times ``1 - lambda_init``
    (Diff only; off by default).
    """
    if x.shape[-1] != weights.d_m:
        raise DimensionError(f"input width {x.shape[-1]} does not match d_m {weights.d_m}")
    H, hd = weights.n_heads, weights.head_dim
    phi = attention_scores(x, weights, variant, causal, mask, rope_theta)
    if capture is not None:
        capture.append(phi.data.copy())
    lead = x.shape[:-2]
    n = x.shape[-2]
    k = len(lead)
    v = (x @ weights.wv).reshape(lead + (n, H, hd))
    v = T.transpose(v, tuple(range(k)) + (k + 1, k, k + 2))  # (..., H, N, hd)
    out = phi @ v
    if head_norm and variant.tag == "diff":
        out = _unit_rms(out, 1e-5) * (1.0 - weights.lam_init)
    out = T.transpose(out, tuple(range(k)) + (k + 1, k, k + 2)).reshape(lead + (n, H * hd))
    return out @ weights.wo


def _unit_rms(x: Tensor, eps: float) -> Tensor:
    xd = x.data
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    d = xd.shape[-1]

    def vjp(g):
        return (r * g - xd * r ** 3 * (g * xd).sum(axis=-1, keepdims=True) / d,)

    return Tensor.from_op(xd * r, (x,), vjp, "unit_rms")
