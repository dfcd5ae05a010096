"""Verification batteries behind ``intglab verify``.

Each battery returns a list of :class:`Check` records holding the measured
value, the tolerance and the verdict.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .analysis import consistency_curve, geometric_mean_identity_error, oversmoothing_demo
from .attention import (
    AttentionWeights,
    ScoreMatrix,
    ScoreVariant,
    multi_head_attention,
    qk_logits,
    score_cog,
    score_diff,
    score_intg,
    score_vanilla,
)
from .backbone import ModelConfig, TransformerLM, param_count, preset
from .tensor import Tensor
from .training import cross_entropy_lm


@dataclass
class Check:
    name: str
    value: float
    tol: float
    passed: bool
    note: str = ""

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        extra = f"  [{self.note}]" if self.note else ""
        return f"{verdict}  {self.name}: {self.value:.3e} (tol {self.tol:.1e}){extra}"


def _leq(name: str, value: float, tol: float, note: str = "") -> Check:
    return Check(name, float(value), tol, bool(value <= tol), note)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------
def toy_config(variant: str, **kw) -> ModelConfig:
    params = dict(d_model=16, n_layers=2, n_heads=2, intermediate_size=24, vocab_size=11,
                  max_seq_len=16, variant=variant, signals=2, denoise_ratio=1.0, init_std=0.3, seed=3)
    params.update(kw)
    return ModelConfig(**params)


def model_grad_error(config: ModelConfig, n_tokens: int = 6, batch: int = 2,
                     max_entries: int = 24, step: float = 1e-5, seed: int = 0) -> float:
    """Max relative backprop/central-difference error over sampled entries of every parameter."""
    model = TransformerLM(config)
    rng = np.random.Generator(np.random.Philox(seed))
    ids = rng.integers(0, config.vocab_size, size=(batch, n_tokens + 1))
    worst = 0.0
    for name, p in model.params.items():
        base = p

        def f(x, name=name):
            model.params[name] = x
            try:
                return cross_entropy_lm(model.forward(ids[:, :-1]), ids[:, 1:])
            finally:
                model.params[name] = base

        n = p.size
        picks = range(n) if n <= max_entries else rng.choice(n, size=max_entries, replace=False)
        worst = max(worst, T.grad_check(f, p.data, step, indices=[int(i) for i in picks]))
    return worst


def grad_checks(variants=("vanilla", "cog", "diff", "intg"), tol: float = 1e-4) -> list[Check]:
    return [_leq(f"grad {v}: 2-layer toy model vs central differences",
                 model_grad_error(toy_config(v)), tol) for v in variants]


# ---------------------------------------------------------------------------
# Score identities
# ---------------------------------------------------------------------------
def _random_logits(rng, n):
    return Tensor(rng.standard_normal((n, n)) * 3.0)


def identity_checks(n_instances: int = 1000, max_n: int = 16, seed: int = 0) -> list[Check]:
    return row_identity_checks(n_instances, max_n, seed) + degeneracy_checks(seed=seed)


def row_identity_checks(n_instances: int = 1000, max_n: int = 16, seed: int = 0) -> list[Check]:
    """Row-sum identities and the causal zero region on random logits."""
    rng = np.random.Generator(np.random.Philox(seed))
    worst = {"vanilla": 0.0, "intg": 0.0, "cog": 0.0, "diff": 0.0}
    causal_worst = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(1, max_n + 1))
        z1, z2 = _random_logits(rng, n), _random_logits(rng, n)
        S = int(rng.integers(1, 9))
        zs = [_random_logits(rng, n) for _ in range(S)]
        lam = float(rng.uniform(0.0, 1.0))
        mats = {
            "vanilla": ScoreMatrix(score_vanilla(z1, causal=True).data, ScoreVariant.vanilla()),
            "intg": ScoreMatrix(score_intg(zs, causal=True).data, ScoreVariant.intg(S)),
            "cog": ScoreMatrix(score_cog(z1, causal=True).data, ScoreVariant.cog()),
            "diff": ScoreMatrix(score_diff(z1, z2, lam, causal=True).data, ScoreVariant.diff(), lam=lam),
        }
        for k, m in mats.items():
            worst[k] = max(worst[k], m.row_identity_error())
            causal_worst = max(causal_worst, m.causal_violation())
    return [
        _leq("vanilla rows sum to 1", worst["vanilla"], 1e-10),
        _leq("intg rows sum to 1", worst["intg"], 1e-10),
        _leq("cog absolute rows sum to 1", worst["cog"], 1e-10),
        _leq("diff rows sum to 1 - lambda", worst["diff"], 1e-10),
        Check("causal entries exactly 0", causal_worst, 0.0, causal_worst == 0.0),
    ]


def degeneracy_checks(n_instances: int = 50, seed: int = 0) -> list[Check]:
    """Intg(S=1), Diff(lambda=0) and Cog on nonnegative logits all reduce to Vanilla."""
    rng = np.random.Generator(np.random.Philox(seed + 7))
    intg_dev = diff_dev = cog_dev = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(1, 17))
        d_m, heads = 16, 2
        x = Tensor(rng.standard_normal((n, d_m)))
        w = AttentionWeights.init(d_m, heads, ScoreVariant.vanilla(), rng, std=0.5)
        out_v = multi_head_attention(x, w, ScoreVariant.vanilla(), causal=True, rope_theta=10000.0)
        out_i = multi_head_attention(x, w, ScoreVariant.intg(1), causal=True, rope_theta=10000.0)
        intg_dev = max(intg_dev, float(np.abs(out_v.data - out_i.data).max()))

        wq1, wk1 = Tensor(rng.standard_normal((d_m, 4))), Tensor(rng.standard_normal((d_m, 4)))
        wq2, wk2 = Tensor(rng.standard_normal((d_m, 4))), Tensor(rng.standard_normal((d_m, 4)))
        z1, z2 = qk_logits(x, wq1, wk1), qk_logits(x, wq2, wk2)
        d = score_diff(z1, z2, 0.0, causal=True).data - score_vanilla(z1, causal=True).data
        diff_dev = max(diff_dev, float(np.abs(d).max()))

        zpos = Tensor(np.abs(z1.data))
        c = score_cog(zpos, causal=True).data - score_vanilla(zpos, causal=True).data
        cog_dev = max(cog_dev, float(np.abs(c).max()))
    return [
        _leq("intg(S=1) == vanilla (shared weights)", intg_dev, 1e-12),
        _leq("diff(lambda=0) == vanilla on Z1", diff_dev, 1e-12),
        _leq("cog == vanilla on nonnegative logits", cog_dev, 1e-12),
    ]


# ---------------------------------------------------------------------------
# Logit averaging
# ---------------------------------------------------------------------------
def oversmooth_checks(seed: int = 0, n_samples: int = 100_000) -> list[Check]:
    rng = np.random.Generator(np.random.Philox(seed))
    z = rng.uniform(-10.0, 10.0, size=(8, 64, 64))
    checks = [_leq("geometric-mean identity (|z| <= 10)", geometric_mean_identity_error(z), 1e-10)]
    demo = oversmoothing_demo(8, isotropic_std=1.0, n_samples=n_samples, seed=seed)
    margin = demo.inflation - 3.0 * demo.entropy_mc_std
    checks.append(Check("entropy(E[softmax z]) - entropy(softmax E[z]) beyond 3 sigma",
                        margin, 0.0, margin > 0.0,
                        f"inflation {demo.inflation:.4f}, sigma {demo.entropy_mc_std:.2e}, "
                        f"fitted T {demo.fitted_temperature:.3f}"))
    clean = np.random.Generator(np.random.Philox(seed + 1)).standard_normal((8, 8)) * 2.0
    curve = consistency_curve(clean, 1.0, (1, 4, 16, 64), seed=seed)
    ordered = all(curve[a] >= curve[b] for a, b in ((1, 4), (4, 16), (16, 64)))
    checks.append(Check("signal averaging deviation S=64 below S=1", curve[64] - curve[1], 0.0,
                        curve[64] < curve[1],
                        ", ".join(f"S={k}: {v:.4f}" for k, v in curve.items())))
    checks.append(Check("signal averaging deviation monotone in S", 0.0 if ordered else 1.0, 0.0, ordered))
    return checks


# ---------------------------------------------------------------------------
# Parameter counts
# ---------------------------------------------------------------------------
def param_checks() -> list[Check]:
    checks = []
    target = 125_000_000
    n = param_count(preset("125m"))
    rel = abs(n - target) / target
    checks.append(Check("125m preset within 3% of 125M", rel, 0.03, rel <= 0.03, f"{n:,} parameters"))
    for name in ("desk", "125m", "1.2b"):
        counts = set()
        for v in ("vanilla", "cog", "diff", "intg"):
            for ratio in (0.5, 1.0):
                counts.add(param_count(preset(name, variant=v, denoise_ratio=ratio)))
        checks.append(Check(f"{name}: identical count across variant schedules",
                            float(len(counts) - 1), 0.0, len(counts) == 1,
                            f"{sorted(counts)[0]:,} parameters"))
    return checks


SCOPES: dict[str, Callable[[], list[Check]]] = {
    "grad": grad_checks,
    "identities": identity_checks,
    "oversmooth": oversmooth_checks,
    "params": param_checks,
}
