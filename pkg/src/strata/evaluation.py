"""Desk-scale metric proxies and trend analyses.

Alignment blends pooled mid-block denoiser features with per-channel color
histograms, so both semantic class content and palette/texture details move
the score. Sweeps re-run generation across guidance scales, guidance modes,
and stratified lambda weights, and aggregate per-seed scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import ModelWeights, forward
from .numerics import Rng, ShapeError, Tensor
from .sampler import (
    FusionSchedule,
    GuidanceConfig,
    LatentChain,
    NoiseSchedule,
    Trace,
    fusion_stratified_all,
    generate,
)

HIST_BINS = 16


def pooled_features(image: Tensor, w: ModelWeights) -> Tensor:
    """Token-mean hidden state of the mid block at t=0, null conditioning."""
    mid = w.config.num_blocks // 2
    res = forward(w, image, 0, 0, capture_hidden=mid)
    return res.hidden.mean(axis=0)


def color_histograms(image: Tensor) -> Tensor:
    """Per-channel normalized histograms over [-1, 1]; (C, HIST_BINS)."""
    image = np.asarray(image, dtype=np.float64)
    out = np.zeros((image.shape[0], HIST_BINS))
    for c in range(image.shape[0]):
        counts, _ = np.histogram(image[c], bins=HIST_BINS, range=(-1.0, 1.0))
        out[c] = counts / image[c].size
    return out


def _cosine(a: Tensor, b: Tensor) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def alignment_score(gen: Tensor, prompt: Tensor, w: ModelWeights) -> float:
    """0.5*feature cosine + 0.5*(1 - mean per-channel histogram L1/2)."""
    gen = np.asarray(gen, dtype=np.float64)
    prompt = np.asarray(prompt, dtype=np.float64)
    if gen.shape != prompt.shape:
        raise ShapeError(f"shape mismatch {gen.shape} vs {prompt.shape}")
    cos = _cosine(pooled_features(gen, w), pooled_features(prompt, w))
    hg, hp = color_histograms(gen), color_histograms(prompt)
    # L1 between two distributions lies in [0, 2]; halve to get [0, 1].
    hist_dist = float(np.abs(hg - hp).sum(axis=1).mean()) / 2.0
    return 0.5 * cos + 0.5 * (1.0 - hist_dist)


def class_prototypes(dataset, w: ModelWeights) -> dict[int, Tensor]:
    """Mean pooled features of the training images of each label."""
    labels = np.asarray(dataset.labels)
    feats: dict[int, list[Tensor]] = {}
    for image, label in zip(dataset.images, labels):
        feats.setdefault(int(label), []).append(pooled_features(image, w))
    return {label: np.mean(rows, axis=0) for label, rows in sorted(feats.items())}


def cond_alignment_score(
    gen: Tensor, cond_id: int, prototypes: dict[int, Tensor], w: ModelWeights
) -> float:
    """Cosine between gen's pooled features and the class prototype."""
    if cond_id not in prototypes:
        raise KeyError(f"no prototype for class {cond_id}")
    return _cosine(pooled_features(gen, w), prototypes[cond_id])


def diversity_score(images: list, w: ModelWeights) -> float:
    """Mean pairwise L2 distance between pooled features."""
    if len(images) < 2:
        raise ValueError("diversity needs at least 2 images")
    feats = [pooled_features(img, w) for img in images]
    dists = [
        float(np.linalg.norm(feats[i] - feats[j]))
        for i in range(len(feats))
        for j in range(i + 1, len(feats))
    ]
    return float(np.mean(dists))


def score_difference_trace(trace: Trace, num_steps: int) -> Tensor:
    """Per-step mean of score_difference over injected layers; length checked."""
    sums = np.zeros(num_steps)
    counts = np.zeros(num_steps, dtype=np.int64)
    for step, _t, _layer, _mg, _mp, sd in trace.rows:
        if not (0 <= step < num_steps):
            raise ValueError(f"trace row at step {step} outside [0, {num_steps})")
        sums[step] += sd
        counts[step] += 1
    if np.any(counts == 0):
        missing = int(np.argmin(counts))
        raise ValueError(f"trace has no rows for step {missing}")
    return sums / counts


@dataclass
class SweepSetup:
    """Everything a sweep needs to re-run generation."""

    weights: ModelWeights
    schedule: NoiseSchedule
    chain: LatentChain
    prompt_image: Tensor
    positive_cond: int
    negative_cond: int
    seeds: list[int]
    base_rng_seed: int = 1000003
    prototypes: dict[int, Tensor] | None = None

    def rng_for(self, seed: int) -> Rng:
        return Rng(self.base_rng_seed).derive(seed)


def _mean_scores(setup: SweepSetup, g: GuidanceConfig, f: FusionSchedule):
    align, cond_align = [], []
    for seed in setup.seeds:
        image, _ = generate(
            setup.weights, setup.chain, g, f, setup.schedule,
            setup.rng_for(seed), collect_trace=False,
        )
        align.append(alignment_score(image, setup.prompt_image, setup.weights))
        if setup.prototypes is not None:
            cond_align.append(
                cond_alignment_score(
                    image, setup.chain.cond_id, setup.prototypes, setup.weights
                )
            )
    mean_cond = float(np.mean(cond_align)) if cond_align else float("nan")
    return float(np.mean(align)), mean_cond


def guidance_sweep(
    scales: list[float], modes: list[str], setup: SweepSetup, f: FusionSchedule
) -> list[dict]:
    """Mean alignment per (scale, mode); positive conditioning as configured."""
    rows = []
    for scale in scales:
        for mode in modes:
            g = GuidanceConfig(
                scale=scale, mode=mode,
                positive_cond=setup.positive_cond, negative_cond=setup.negative_cond,
            )
            mean_align, mean_cond = _mean_scores(setup, g, f)
            rows.append(
                {"scale": scale, "mode": mode,
                 "alignment": mean_align, "cond_alignment": mean_cond}
            )
    return rows


LAMBDA_GRID = (0.0, 0.33, 0.5, 0.67, 1.0)


def lambda_sweep(
    lambdas: list[float], setup: SweepSetup, g: GuidanceConfig, num_steps: int
) -> list[dict]:
    """Mean alignment per lambda_p under all-steps stratified fusion."""
    rows = []
    for lambda_p in lambdas:
        f = fusion_stratified_all(lambda_p, num_steps)
        mean_align, mean_cond = _mean_scores(setup, g, f)
        rows.append(
            {"lambda_p": lambda_p, "alignment": mean_align, "cond_alignment": mean_cond}
        )
    return rows


def mode_trend(
    setup: SweepSetup,
    variants: dict[str, tuple[GuidanceConfig, FusionSchedule]],
    num_steps: int,
) -> dict[str, tuple[float, float]]:
    """Mean and standard error of the per-run mean score_difference.

    Each variant is rerun for every seed; a run's score is its trace's mean
    score_difference over steps and layers.
    """
    out = {}
    for name, (g, f) in variants.items():
        per_run = []
        for seed in setup.seeds:
            _, trace = generate(
                setup.weights, setup.chain, g, f, setup.schedule,
                setup.rng_for(seed), collect_trace=True,
            )
            curve = score_difference_trace(trace, num_steps)
            per_run.append(float(curve.mean()))
        per_run = np.asarray(per_run)
        se = float(per_run.std(ddof=1) / np.sqrt(len(per_run))) if len(per_run) > 1 else 0.0
        out[name] = (float(per_run.mean()), se)
    return out


def spearman_rank_correlation(x: list[float], y: list[float]) -> float:
    """Spearman rho via Pearson correlation of ranks (average-rank ties)."""
    def ranks(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        i = 0
        sorted_v = v[order]
        while i < len(v):
            j = i
            while j + 1 < len(v) and sorted_v[j + 1] == sorted_v[i]:
                j += 1
            r[order[i : j + 1]] = (i + j) / 2.0 + 1.0
            i = j + 1
        return r

    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx**2).sum() * (ry**2).sum())
    if denom == 0.0:
        return 0.0
    return float((rx * ry).sum() / denom)
