"""Self-attention variants with K/V injection, plus attention-mass diagnostics.

Four row-space attention flavors over a generated token stream and an
optionally injected prompt stream: original, replacement (prompt K/V swap in
for the host's), concatenation (one joint softmax over both key sets), and
stratified (two independent softmaxes blended by fixed convex weights).
The mass diagnostics report how the joint softmax splits probability between
the two key sets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError, Tensor, concat_seq, matmul, softmax_rows

WEIGHT_SUM_TOL = 1e-12


@dataclass(frozen=True)
class StratifiedWeights:
    """Convex mixing weights for the two attention streams."""

    lambda_g: float
    lambda_p: float

    def __post_init__(self):
        if not (0.0 <= self.lambda_g <= 1.0 and 0.0 <= self.lambda_p <= 1.0):
            raise ValueError(f"weights must lie in [0,1]: {self}")
        if abs(self.lambda_g + self.lambda_p - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"weights must sum to 1: {self}")


@dataclass(frozen=True)
class AttentionMode:
    """One of original / replacement / concatenation / stratified(weights)."""

    kind: str
    weights: StratifiedWeights | None = None

    def __post_init__(self):
        if self.kind not in ("original", "replacement", "concatenation", "stratified"):
            raise ValueError(f"unknown attention mode {self.kind!r}")
        if self.kind == "stratified" and self.weights is None:
            raise ValueError("stratified mode requires weights")
        if self.kind != "stratified" and self.weights is not None:
            raise ValueError(f"{self.kind} mode takes no weights")


ORIGINAL = AttentionMode("original")
REPLACEMENT = AttentionMode("replacement")
CONCATENATION = AttentionMode("concatenation")


def stratified(lambda_g: float, lambda_p: float) -> AttentionMode:
    return AttentionMode("stratified", StratifiedWeights(lambda_g, lambda_p))


@dataclass
class AttentionInputs:
    """Queries plus host keys/values for one head; d is the 1/sqrt(d) scale dim."""

    q: Tensor  # (n_G, d)
    k: Tensor  # (n, d)
    v: Tensor  # (n, d_v)
    d: int

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.k = np.asarray(self.k, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.q.ndim != 2 or self.k.ndim != 2 or self.v.ndim != 2:
            raise ShapeError("q, k, v must be 2-D")
        if self.q.shape[1] != self.k.shape[1]:
            raise ShapeError(f"q/k trailing dims disagree: {self.q.shape} vs {self.k.shape}")
        if self.k.shape[0] != self.v.shape[0]:
            raise ShapeError(f"k/v row counts disagree: {self.k.shape} vs {self.v.shape}")
        if self.d != self.q.shape[1]:
            raise ShapeError(f"scale dim {self.d} != projected dim {self.q.shape[1]}")


@dataclass
class InjectionContext:
    """Prompt-stream keys/values harvested at (source_timestep, source_layer)."""

    k_p: Tensor  # (n_P, d)
    v_p: Tensor  # (n_P, d_v)
    source_timestep: int = -1
    source_layer: int = -1

    def __post_init__(self):
        self.k_p = np.asarray(self.k_p, dtype=np.float64)
        self.v_p = np.asarray(self.v_p, dtype=np.float64)
        if self.k_p.ndim != 2 or self.v_p.ndim != 2:
            raise ShapeError("k_p, v_p must be 2-D")
        if self.k_p.shape[0] != self.v_p.shape[0]:
            raise ShapeError(f"k_p/v_p row counts disagree: {self.k_p.shape} vs {self.v_p.shape}")


def _check_ctx(inp: AttentionInputs, ctx: InjectionContext):
    if ctx.k_p.shape[1] != inp.k.shape[1]:
        raise ShapeError(f"k_p dim {ctx.k_p.shape[1]} != host k dim {inp.k.shape[1]}")
    if ctx.v_p.shape[1] != inp.v.shape[1]:
        raise ShapeError(f"v_p dim {ctx.v_p.shape[1]} != host v dim {inp.v.shape[1]}")


def _logits(q: Tensor, k: Tensor, d: int) -> Tensor:
    return matmul(q, k.T) / math.sqrt(d)


def self_attention(inp: AttentionInputs) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the host stream only."""
    return matmul(softmax_rows(_logits(inp.q, inp.k, inp.d)), inp.v)


def kv_replacement(q: Tensor, ctx: InjectionContext, d: int) -> Tensor:
    """Attend the queries over the prompt stream's K/V; host K/V unused."""
    return self_attention(AttentionInputs(q=q, k=ctx.k_p, v=ctx.v_p, d=d))


def kv_concatenation(inp: AttentionInputs, ctx: InjectionContext) -> Tensor:
    """One joint softmax over host keys followed by prompt keys."""
    _check_ctx(inp, ctx)
    k_all = concat_seq(inp.k, ctx.k_p)
    v_all = concat_seq(inp.v, ctx.v_p)
    return matmul(softmax_rows(_logits(inp.q, k_all, inp.d)), v_all)


def stratified_attention(
    inp: AttentionInputs, ctx: InjectionContext, w: StratifiedWeights
) -> Tensor:
    """Blend two independently normalized streams: lg*A_G + lp*A_P."""
    _check_ctx(inp, ctx)
    a_g = self_attention(inp)
    a_p = kv_replacement(inp.q, ctx, inp.d)
    # Exact at the degenerate weights so lambda in {0,1} reproduces one stream
    # bit for bit.
    if w.lambda_p == 0.0:
        return a_g
    if w.lambda_g == 0.0:
        return a_p
    return w.lambda_g * a_g + w.lambda_p * a_p


def dispatch(
    mode: AttentionMode, inp: AttentionInputs, ctx: InjectionContext | None = None
) -> Tensor:
    """Route to the variant named by mode; Original ignores ctx."""
    if mode.kind == "original":
        return self_attention(inp)
    if ctx is None:
        raise ValueError(f"mode {mode.kind!r} requires an injection context")
    if mode.kind == "replacement":
        _check_ctx(inp, ctx)
        return kv_replacement(inp.q, ctx, inp.d)
    if mode.kind == "concatenation":
        return kv_concatenation(inp, ctx)
    return stratified_attention(inp, ctx, mode.weights)


def mass_split(inp: AttentionInputs, ctx: InjectionContext) -> tuple[Tensor, Tensor]:
    """Per-query joint-softmax mass on host keys vs prompt keys."""
    _check_ctx(inp, ctx)
    k_all = concat_seq(inp.k, ctx.k_p)
    weights = softmax_rows(_logits(inp.q, k_all, inp.d))
    n = inp.k.shape[0]
    return weights[:, :n].sum(axis=1), weights[:, n:].sum(axis=1)


def score_difference(inp: AttentionInputs, ctx: InjectionContext) -> float:
    """Mean over queries of (host mass - prompt mass); lies in [-1, 1]."""
    mass_g, mass_p = mass_split(inp, ctx)
    return float(np.mean(mass_g - mass_p))
