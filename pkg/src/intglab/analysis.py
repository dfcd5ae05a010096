"""Attention capture, the per-layer attention metrics, and logit-averaging demos."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from . import kernels
from .data import CATEGORY_NAMES, MCTask, TokenCategory, Vocabulary, build_prompt, categorize_sequence
from .errors import ContractError, DataError

REPORT_SCHEMA_VERSION = 1


@dataclass
class AttentionCapture:
    """Score matrices ``scores[layer]`` of shape ``(H, N, N)`` for one sample."""

    scores: list[np.ndarray]
    token_ids: list[int]
    categories: list[TokenCategory]
    span: tuple[int, int]
    variants: list[str]
    sample_id: int = 0

    def __post_init__(self):
        n = len(self.token_ids)
        heads = {s.shape[0] for s in self.scores}
        if len(heads) > 1 or any(s.shape[1:] != (n, n) for s in self.scores):
            raise DataError("capture matrices disagree on head count or sequence length")
        if len(self.categories) != n:
            raise DataError("one category per token is required")

    @property
    def n_layers(self) -> int:
        return len(self.scores)

    @property
    def n_heads(self) -> int:
        return self.scores[0].shape[0]


def capture_sample(model, vocab: Vocabulary, task: MCTask, continuation: int | None = None,
                   sample_id: int = 0) -> AttentionCapture:
    """Forward the templated sample (gold continuation by default) and record every score matrix."""
    from .tensor import no_grad

    idx = task.gold if continuation is None else continuation
    ids, span = build_prompt(task, idx, vocab)
    sink: list[np.ndarray] = []
    with no_grad():
        model.forward(np.asarray(ids)[None, :], capture=sink)
    return AttentionCapture(scores=[s[0] for s in sink], token_ids=ids,
                            categories=categorize_sequence(ids, vocab), span=span,
                            variants=[str(v) for v in model.schedule], sample_id=sample_id)


def select_samples(tasks: Sequence[MCTask], per_task: int, seed: int = 0) -> list[tuple[int, MCTask]]:
    """Fixed-seed random subset of ``per_task`` samples from each task group, sorted by id."""
    groups: dict[str, list[int]] = {}
    for i, t in enumerate(tasks):
        groups.setdefault(t.task, []).append(i)
    rng = np.random.Generator(np.random.Philox(seed))
    chosen: list[int] = []
    for name in sorted(groups):
        ids = groups[name]
        k = min(per_task, len(ids))
        chosen.extend(int(ids[j]) for j in rng.choice(len(ids), size=k, replace=False))
    return [(i, tasks[i]) for i in sorted(chosen)]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------
@dataclass
class AnalysisReport:
    """Per-layer ``(mean, std)`` series keyed by series name."""

    metric: str
    model: str = ""
    sample_count: int = 0
    series: dict[str, list[tuple[int, float, float]]] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def add(self, series: str, layer: int, mean: float, std: float) -> None:
        if std < 0:
            raise ContractError("std must be non-negative")
        self.series.setdefault(series, []).append((int(layer), float(mean), float(std)))

    def rows(self) -> list[tuple[int, str, float, float]]:
        return [(layer, name, m, s) for name, pts in self.series.items() for layer, m, s in pts]

    def to_json(self) -> str:
        return json.dumps({"schema_version": REPORT_SCHEMA_VERSION, "metric": self.metric,
                           "model": self.model, "sample_count": self.sample_count,
                           "flags": self.flags,
                           "series": {k: [list(p) for p in v] for k, v in self.series.items()}},
                          indent=2)

    @classmethod
    def from_json(cls, text: str) -> "AnalysisReport":
        raw = json.loads(text)
        if raw.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise DataError("unsupported report schema version")
        return cls(metric=raw["metric"], model=raw.get("model", ""), sample_count=raw["sample_count"],
                   flags=raw.get("flags", []),
                   series={k: [tuple(p) for p in v] for k, v in raw["series"].items()})

    def merged(self, other: "AnalysisReport", prefix_self: str, prefix_other: str) -> "AnalysisReport":
        out = AnalysisReport(self.metric, f"{prefix_self},{prefix_other}",
                             self.sample_count, {}, self.flags + other.flags)
        for name, pts in self.series.items():
            out.series[f"{prefix_self}:{name}"] = list(pts)
        for name, pts in other.series.items():
            out.series[f"{prefix_other}:{name}"] = list(pts)
        return out


def _require(captures: Sequence[AttentionCapture]) -> None:
    if not captures:
        raise ContractError("no captures given")
    layers = {c.n_layers for c in captures}
    if len(layers) != 1:
        raise DataError("captures disagree on layer count")


def _mean_std(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------
def bos_profile(captures: Sequence[AttentionCapture], layer: int) -> list[tuple[int, float, float]]:
    """Per source position ``i >= 1``: mean/std of ``phi[i][0]`` across heads and samples."""
    _require(captures)
    by_pos: dict[int, list[float]] = {}
    for c in captures:
        phi = c.scores[layer]
        for i in range(1, phi.shape[1]):
            by_pos.setdefault(i, []).extend(phi[:, i, 0].tolist())
    return [(i, *_mean_std(v)) for i, v in sorted(by_pos.items())]


def bos_report(captures: Sequence[AttentionCapture], model: str = "") -> AnalysisReport:
    """Attention to position 0 from all other tokens, per layer, plus the last layer's positional profile."""
    _require(captures)
    rep = AnalysisReport("bos_profile", model, len(captures))
    n_layers = captures[0].n_layers
    for layer in range(n_layers):
        vals = np.concatenate([c.scores[layer][:, 1:, 0].ravel() for c in captures])
        rep.add("all_tokens", layer, *_mean_std(vals))
    for pos, m, s in bos_profile(captures, n_layers - 1):
        rep.add(f"last_layer_pos{pos}", n_layers - 1, m, s)
    return rep


def category_distribution(captures: Sequence[AttentionCapture], normalization: str = "linear",
                          model: str = "") -> AnalysisReport:
    """Share of continuation-token attention landing on each token category.

    Per head: attention mass from each continuation token to each category,
    averaged over continuation tokens, then over samples; the four values are
    normalized (``"linear"``: divide by their sum, ``"softmax"``). Reported
    as mean/std across heads.
    """
    _require(captures)
    if normalization not in ("linear", "softmax"):
        raise ContractError(f"unknown normalization {normalization!r}")
    rep = AnalysisReport("categories", model, len(captures))
    for layer in range(captures[0].n_layers):
        per_sample = []
        for c in captures:
            s, e = c.span
            if e <= s:
                raise DataError(f"sample {c.sample_id} has an empty continuation span")
            onehot = np.zeros((len(c.categories), 4))
            onehot[np.arange(len(c.categories)), [int(k) for k in c.categories]] = 1.0
            rows = c.scores[layer][:, s:e, :]  # (H, span, N)
            per_sample.append((rows @ onehot).mean(axis=1))  # (H, 4)
        mass = np.mean(per_sample, axis=0)
        shares = _normalize_shares(mass, normalization, rep, layer)
        for k, name in enumerate(CATEGORY_NAMES):
            rep.add(name, layer, *_mean_std(shares[:, k]))
    return rep


def _normalize_shares(mass: np.ndarray, normalization: str, rep: AnalysisReport, layer: int) -> np.ndarray:
    if normalization == "linear":
        total = mass.sum(axis=1, keepdims=True)
        if (total > 0).all():
            return mass / total
        rep.flags.append(f"layer {layer}: non-positive category mass, softmax normalization used")
    z = mass - mass.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def normalized_entropy(row: np.ndarray) -> tuple[float, bool]:
    """Entropy of ``(a - min a) / sum``; ``0 log 0 = 0``.

    Returns ``(entropy, degenerate)``; an all-equal row has zero mass after the
    shift and is assigned the uniform limit ``log n``.
    """
    a = np.asarray(row, dtype=np.float64)
    if a.size == 0:
        raise ContractError("empty attention row")
    shifted = a - a.min()
    total = shifted.sum()
    if total <= 0:
        return math.log(a.size), True
    p = shifted / total
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum()), False


def attention_entropy(captures: Sequence[AttentionCapture], model: str = "") -> AnalysisReport:
    """Entropy of the last continuation token's scores over the positions it may attend to."""
    _require(captures)
    rep = AnalysisReport("entropy", model, len(captures))
    degenerate = 0
    for layer in range(captures[0].n_layers):
        per_sample = []
        for c in captures:
            i = c.span[1] - 1
            if not 0 <= i < len(c.token_ids):
                raise DataError(f"sample {c.sample_id}: invalid last continuation index {i}")
            ents = []
            for h in range(c.n_heads):
                e, deg = normalized_entropy(c.scores[layer][h, i, : i + 1])
                ents.append(e)
                degenerate += deg
            per_sample.append(np.mean(ents))
        rep.add("last_continuation_token", layer, *_mean_std(per_sample))
    if degenerate:
        rep.flags.append(f"{degenerate} degenerate rows assigned log(n)")
    return rep


def negative_fraction_bos(captures: Sequence[AttentionCapture], model: str = "") -> AnalysisReport:
    """Percentage of heads with a negative score to position 0, averaged over tokens."""
    _require(captures)
    rep = AnalysisReport("neg_fraction", model, len(captures))
    for layer in range(captures[0].n_layers):
        per_sample = [100.0 * (c.scores[layer][:, :, 0] < 0).mean(axis=0).mean() for c in captures]
        rep.add("percent_heads_negative", layer, *_mean_std(per_sample))
    return rep


def effective_rank(phi, rel_tol: float = 1e-6) -> int:
    """Singular values above ``rel_tol`` times the largest (one-sided Jacobi SVD)."""
    a = np.asarray(phi, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ContractError(f"expected a non-empty matrix, got shape {a.shape}")
    if rel_tol <= 0:
        raise ContractError("rel_tol must be positive")
    if not np.isfinite(a).all():
        raise DataError("matrix has non-finite entries")
    sv = kernels.jacobi_singular_values(a)
    if sv[0] == 0:
        return 0
    return int((sv > rel_tol * sv[0]).sum())


def entropy_effective_rank(phi) -> float:
    """``exp`` of the entropy of the normalized singular value spectrum."""
    sv = kernels.jacobi_singular_values(np.asarray(phi, dtype=np.float64))
    total = sv.sum()
    if total == 0:
        return 0.0
    p = sv[sv > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))


def median_ranks(captures: Sequence[AttentionCapture], layer: int, rel_tol: float = 1e-6) -> np.ndarray:
    return np.array([np.median([effective_rank(c.scores[layer][h], rel_tol) for h in range(c.n_heads)])
                     for c in captures])


def rank_report(captures: Sequence[AttentionCapture], model: str = "", rel_tol: float = 1e-6) -> AnalysisReport:
    """Per layer: mean/std over samples of the median effective rank across heads."""
    _require(captures)
    rep = AnalysisReport("rank", model, len(captures))
    for layer in range(captures[0].n_layers):
        rep.add("median_head_rank", layer, *_mean_std(median_ranks(captures, layer, rel_tol)))
    return rep


def rank_compare(captures_a: Sequence[AttentionCapture], captures_b: Sequence[AttentionCapture],
                 last_k_layers: int = 3, rel_tol: float = 1e-6) -> dict[int, float]:
    """Percentage of samples where A's median head rank strictly exceeds B's, for layers -1..-k."""
    _require(captures_a)
    _require(captures_b)
    if len(captures_a) != len(captures_b) or any(
            a.token_ids != b.token_ids for a, b in zip(captures_a, captures_b)):
        raise DataError("rank_compare needs the same samples under both models")
    n_layers = min(captures_a[0].n_layers, captures_b[0].n_layers)
    out = {}
    for k in range(1, min(last_k_layers, n_layers) + 1):
        ra = median_ranks(captures_a, captures_a[0].n_layers - k, rel_tol)
        rb = median_ranks(captures_b, captures_b[0].n_layers - k, rel_tol)
        out[-k] = 100.0 * float((ra > rb).mean())
    return out


def rank_compare_report(captures_a, captures_b, last_k_layers: int = 3, model: str = "") -> AnalysisReport:
    rep = AnalysisReport("rank_compare", model, len(captures_a))
    for offset, pct in rank_compare(captures_a, captures_b, last_k_layers).items():
        rep.add("percent_samples_a_exceeds_b", offset, pct, 0.0)
    return rep


# ---------------------------------------------------------------------------
# Logit averaging versus probability averaging
# ---------------------------------------------------------------------------
def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def shannon_entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def geometric_mean_identity_error(z: np.ndarray) -> float:
    """Max relative gap between ``exp(mean_s z_s)`` and ``(prod_s exp z_s)^(1/S)``.

    ``z`` has the signal index on axis 0.
    """
    z = np.asarray(z, dtype=np.float64)
    lhs = np.exp(z.mean(axis=0))
    rhs = np.prod(np.exp(z), axis=0) ** (1.0 / z.shape[0])
    return float(np.max(np.abs(lhs - rhs) / np.abs(lhs)))


@dataclass
class OversmoothingResult:
    mc_mean: np.ndarray
    entropy_mc: float
    entropy_mc_std: float
    entropy_logit_mean: float
    fitted_temperature: float
    fitted_sigma2: float

    @property
    def inflation(self) -> float:
        return self.entropy_mc - self.entropy_logit_mean

    @property
    def significant(self) -> bool:
        """Inflation exceeds three bootstrap standard deviations."""
        return self.inflation > 3.0 * self.entropy_mc_std


def oversmoothing_demo(dim: int, mean_logits=None, isotropic_std: float = 1.0, n_samples: int = 100_000,
                       seed: int = 0, n_boot: int = 200) -> OversmoothingResult:
    """Monte Carlo ``E[softmax(z)]`` for ``z ~ N(mean, std^2 I)`` versus ``softmax(E[z])``.

    ``mean_logits`` defaults to a standard normal draw from ``seed``. The
    fitted temperature minimizes ``KL(MC estimate || softmax(mean / T))``.
    """
    if n_samples < 1 or isotropic_std < 0:
        raise ContractError("need n_samples >= 1 and std >= 0")
    rng = np.random.Generator(np.random.Philox(seed))
    mu = rng.standard_normal(dim) if mean_logits is None else np.asarray(mean_logits, dtype=np.float64)
    if isotropic_std == 0:
        probs = np.broadcast_to(_softmax(mu), (n_samples, dim))
    else:
        z = mu + isotropic_std * rng.standard_normal((n_samples, dim))
        probs = _softmax(z)
    mc = probs.mean(axis=0)
    h_mc = shannon_entropy(mc)
    h_mu = shannon_entropy(_softmax(mu))
    boot = []
    if isotropic_std > 0 and n_boot > 0:
        for _ in range(n_boot):
            idx = rng.integers(0, n_samples, size=n_samples)
            boot.append(shannon_entropy(probs[idx].mean(axis=0)))
    h_std = float(np.std(boot)) if boot else 0.0

    def kl(log_t):
        q = _softmax(mu / math.exp(log_t))
        return float((mc * (np.log(mc) - np.log(q))).sum())

    fit = minimize_scalar(kl, bounds=(-3.0, 3.0), method="bounded", options={"xatol": 1e-10})
    t = math.exp(fit.x)
    return OversmoothingResult(mc, h_mc, h_std, h_mu, t, t * t - 1.0)


def signal_average_consistency(clean_logits, noise_std: float, S: int, seed: int = 0) -> float:
    """Max ``|softmax(mean_s(Z + eps_s)) - softmax(Z)|`` over all rows and entries."""
    if S < 1:
        raise ContractError("S must be >= 1")
    z = np.atleast_2d(np.asarray(clean_logits, dtype=np.float64))
    rng = np.random.Generator(np.random.Philox(seed))
    noise = noise_std * rng.standard_normal((S,) + z.shape) if noise_std > 0 else np.zeros((S,) + z.shape)
    avg = (z + noise).mean(axis=0)
    return float(np.abs(_softmax(avg) - _softmax(z)).max())


def consistency_curve(clean_logits, noise_std: float, signals: Sequence[int] = (1, 4, 16, 64),
                      seed: int = 0, trials: int = 64) -> dict[int, float]:
    """Mean deviation over ``trials`` seeded draws for each signal count."""
    return {s: float(np.mean([signal_average_consistency(clean_logits, noise_std, s, seed + t)
                              for t in range(trials)]))
            for s in signals}


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------
def export(report: AnalysisReport, path, fmt: str | None = None) -> Path:
    """Write CSV (``layer,series,mean,std``), SVG or JSON, chosen by ``fmt`` or suffix."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    try:
        if fmt == "csv":
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["layer", "series", "mean", "std"])
                for layer, name, m, s in report.rows():
                    w.writerow([layer, name, repr(m), repr(s)])
        elif fmt == "svg":
            path.write_text(render_svg(report), encoding="utf-8")
        elif fmt == "json":
            path.write_text(report.to_json() + "\n", encoding="utf-8")
        else:
            raise ContractError(f"unknown export format {fmt!r}")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror}") from None
    return path


def read_csv(path) -> list[tuple[int, str, float, float]]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != ["layer", "series", "mean", "std"]:
            raise DataError(f"{path}: unexpected header {header}")
        return [(int(a), b, float(c), float(d)) for a, b, c, d in r]


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def render_svg(report: AnalysisReport, width: int = 640, height: int = 400) -> str:
    """Line chart of each series' mean with a shaded +-1 std band."""
    series = {k: sorted(v) for k, v in report.series.items() if v}
    # positional profiles would swamp the per-layer chart; keep the layer series only
    plotted = {k: v for k, v in series.items() if len({p[0] for p in v}) == len(v)} or series
    pad = 50
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<title>{report.metric} {report.model}</title>',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    pts = [p for v in plotted.values() for p in v]
    if pts:
        xs = [p[0] for p in pts]
        lo = min(p[1] - p[2] for p in pts)
        hi = max(p[1] + p[2] for p in pts)
        x0, x1 = min(xs), max(xs)
        if x1 == x0:
            x1 = x0 + 1
        if hi == lo:
            hi, lo = hi + 0.5, lo - 0.5

        def sx(x):
            return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

        def sy(y):
            return height - pad - (y - lo) / (hi - lo) * (height - 2 * pad)

        parts.append(f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>')
        parts.append(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>')
        parts.append(f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12">layer</text>')
        parts.append(f'<text x="6" y="{pad - 10}" font-size="11">{hi:.3g}</text>')
        parts.append(f'<text x="6" y="{height - pad}" font-size="11">{lo:.3g}</text>')
        for n, (name, v) in enumerate(plotted.items()):
            color = _PALETTE[n % len(_PALETTE)]
            upper = " ".join(f"{sx(x):.2f},{sy(m + s):.2f}" for x, m, s in v)
            lower = " ".join(f"{sx(x):.2f},{sy(m - s):.2f}" for x, m, s in reversed(v))
            parts.append(f'<polygon points="{upper} {lower}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
            line = " ".join(f"{sx(x):.2f},{sy(m):.2f}" for x, m, _ in v)
            parts.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
            parts.append(f'<text x="{width - pad + 4}" y="{pad + 14 * n}" font-size="10" fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
