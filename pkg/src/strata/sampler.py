"""DDIM sampling and inversion, AdaIN init, and guidance branch wiring.

The sampler owns the noise schedule, the deterministic DDIM update and its
algebraic inverse, the inverted latent chain of an image prompt, AdaIN
initialization of the starting noise, classifier-free guidance in four branch
wirings (conflicting, conflict-free, negative-image, none), and the
per-timestep attention fusion schedule.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attention as attn
from .denoiser import KvRecord, ModelWeights, forward
from .numerics import Rng, ShapeError, Tensor, channel_stats, randn, standardize
from .tensorio import FormatError, load_tensors, save_tensors

GUIDANCE_MODES = ("conflicting", "conflict_free", "negative_image", "none")


@dataclass
class NoiseSchedule:
    num_train_steps: int
    alpha_bar: Tensor  # (num_train_steps,), strictly decreasing in (0, 1]
    inference_steps: list[int]  # strictly decreasing

    def step_pairs(self) -> list[tuple[int, int]]:
        """(t, t_prev) hops walked by sampling, ending at t_prev = 0."""
        steps = list(self.inference_steps)
        if steps[-1] != 0:
            steps.append(0)
        return [(steps[i], steps[i + 1]) for i in range(len(steps) - 1)]


def make_schedule(
    num_train_steps: int = 1000,
    num_inference_steps: int = 50,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> NoiseSchedule:
    """Linear-beta schedule with an evenly spaced inference subsequence."""
    if not (0.0 <= beta_start <= beta_end < 1.0):
        raise ValueError(f"invalid beta range [{beta_start}, {beta_end}]")
    if not (1 <= num_inference_steps <= num_train_steps):
        raise ValueError(
            f"need 1 <= inference steps {num_inference_steps} <= train steps {num_train_steps}"
        )
    betas = np.linspace(beta_start, beta_end, num_train_steps)
    alpha_bar = np.cumprod(1.0 - betas)
    ratio = num_train_steps // num_inference_steps
    steps = [(i + 1) * ratio - 1 for i in range(num_inference_steps)]
    return NoiseSchedule(
        num_train_steps=num_train_steps,
        alpha_bar=alpha_bar,
        inference_steps=steps[::-1],
    )


@dataclass
class LatentChain:
    """Inverted latents of an image prompt keyed by timestep."""

    latents: dict[int, Tensor]
    cond_id: int

    def __getitem__(self, t: int) -> Tensor:
        if t not in self.latents:
            raise KeyError(f"chain has no latent at t={t}")
        return self.latents[t]


@dataclass
class GuidanceConfig:
    scale: float = 7.5
    mode: str = "conflict_free"
    positive_cond: int = 0
    negative_cond: int = 0
    negative_chain: LatentChain | None = None

    def __post_init__(self):
        if self.mode not in GUIDANCE_MODES:
            raise ValueError(f"unknown guidance mode {self.mode!r}")
        if self.scale < 0.0:
            raise ValueError(f"guidance scale must be >= 0: {self.scale}")
        if self.mode == "negative_image" and self.negative_chain is None:
            raise ValueError("negative_image guidance requires a negative chain")


@dataclass
class FusionSchedule:
    """Per inference-step attention mode."""

    modes: list[attn.AttentionMode]

    def __len__(self):
        return len(self.modes)


def fusion_default(
    num_steps: int = 50,
    stratified_steps: int = 10,
    lambda_g: float = 0.5,
    lambda_p: float = 0.5,
) -> FusionSchedule:
    """Stratified for the first steps, then concatenation."""
    strat = attn.stratified(lambda_g, lambda_p)
    return FusionSchedule(
        [strat if i < stratified_steps else attn.CONCATENATION for i in range(num_steps)]
    )


def fusion_rival(num_steps: int = 50, replace_steps: int = 25) -> FusionSchedule:
    """Replacement early, concatenation late."""
    return FusionSchedule(
        [attn.REPLACEMENT if i < replace_steps else attn.CONCATENATION for i in range(num_steps)]
    )


def fusion_uniform(mode: attn.AttentionMode, num_steps: int = 50) -> FusionSchedule:
    return FusionSchedule([mode] * num_steps)


def fusion_stratified_all(lambda_p: float, num_steps: int = 50) -> FusionSchedule:
    return fusion_uniform(attn.stratified(1.0 - lambda_p, lambda_p), num_steps)


def _ab(s: NoiseSchedule, t: int) -> float:
    if not (0 <= t < s.num_train_steps):
        raise ValueError(f"timestep {t} outside schedule")
    return float(s.alpha_bar[t])


def ddim_step(z_t: Tensor, eps: Tensor, t: int, t_prev: int, s: NoiseSchedule) -> Tensor:
    """One deterministic denoising hop t -> t_prev."""
    if t <= t_prev:
        raise ValueError(f"ddim_step needs t > t_prev, got {t} -> {t_prev}")
    ab_t, ab_prev = _ab(s, t), _ab(s, t_prev)
    x0 = (z_t - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    return math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps


def ddim_invert_step(
    z_prev: Tensor, eps: Tensor, t_prev: int, t: int, s: NoiseSchedule
) -> Tensor:
    """Algebraic inverse of ddim_step under the same eps: t_prev -> t."""
    if t <= t_prev:
        raise ValueError(f"ddim_invert_step needs t > t_prev, got {t_prev} -> {t}")
    ab_t, ab_prev = _ab(s, t), _ab(s, t_prev)
    x0 = (z_prev - math.sqrt(1.0 - ab_prev) * eps) / math.sqrt(ab_prev)
    return math.sqrt(ab_t) * x0 + math.sqrt(1.0 - ab_t) * eps


def invert_image(
    image: Tensor, cond_id: int, w: ModelWeights, s: NoiseSchedule
) -> LatentChain:
    """Walk the image up the chain z_0 -> z_T with Original attention.

    Each hop t_prev -> t evaluates the denoiser at the target timestep t on
    the current latent.
    """
    z = np.asarray(image, dtype=np.float64)
    latents = {0: z.copy()}
    for t, t_prev in reversed(s.step_pairs()):
        eps = forward(w, z, t, cond_id).eps
        z = ddim_invert_step(z, eps, t_prev, t, s)
        latents[t] = z.copy()
    return LatentChain(latents=latents, cond_id=cond_id)


def adain_init(z: Tensor, z_target: Tensor) -> Tensor:
    """Re-standardize z per channel to the mean/std of z_target."""
    z = np.asarray(z, dtype=np.float64)
    z_target = np.asarray(z_target, dtype=np.float64)
    if z.shape != z_target.shape:
        raise ShapeError(f"shape mismatch {z.shape} vs {z_target.shape}")
    target = channel_stats(z_target)
    out = standardize(z, channel_stats(z))
    return out * target.std[:, None, None] + target.mean[:, None, None]


def _executed_mass(mode: attn.AttentionMode, joint: tuple) -> tuple:
    """Mass actually routed to generation vs prompt keys by the executed mode.

    Concatenation's joint softmax is the measured split; the other modes fix
    the split by construction: original never sees prompt keys, replacement
    sees only them, stratified routes exactly its lambda weights.
    """
    if mode.kind == "concatenation":
        return joint
    if mode.kind == "original":
        return (1.0, 0.0, 1.0)
    if mode.kind == "replacement":
        return (0.0, 1.0, -1.0)
    lg, lp = mode.weights.lambda_g, mode.weights.lambda_p
    return (lg, lp, lg - lp)


def guided_epsilon(
    w: ModelWeights,
    z_t: Tensor,
    t: int,
    chain: LatentChain,
    g: GuidanceConfig,
    mode: attn.AttentionMode,
    collect_mass: bool = False,
):
    """Classifier-free guidance step with prompt-stream K/V injection.

    Returns (eps, mass) where mass maps layer -> (mass_g, mass_p,
    score_difference): the executed positive-branch attention split between
    generation keys and the prompt stream's keys (None unless collect_mass).
    """
    prompt_rec: KvRecord = forward(w, chain[t], t, g.positive_cond, record=True).kv
    inj = (
        {layer: mode for layer in w.config.injection_layers}
        if mode.kind != "original"
        else {}
    )
    pos = forward(
        w, z_t, t, g.positive_cond, modes=inj, ctx=prompt_rec,
        mass_ctx=prompt_rec if collect_mass else None,
    )
    mass = (
        {layer: _executed_mass(mode, vals) for layer, vals in pos.mass.items()}
        if pos.mass is not None
        else None
    )
    if g.mode == "none":
        return pos.eps, mass
    if g.mode == "conflicting":
        neg = forward(w, z_t, t, g.negative_cond, modes=inj, ctx=prompt_rec)
    elif g.mode == "conflict_free":
        neg = forward(w, z_t, t, g.negative_cond)
    else:  # negative_image
        other_rec = forward(
            w, g.negative_chain[t], t, g.negative_cond, record=True
        ).kv
        neg = forward(w, z_t, t, g.negative_cond, modes=inj, ctx=other_rec)
    if g.scale == 1.0:
        return pos.eps, mass
    return neg.eps + g.scale * (pos.eps - neg.eps), mass


def sample_plain(
    w: ModelWeights, z_T: Tensor, cond_id: int, s: NoiseSchedule
) -> Tensor:
    """Plain DDIM sampling: no guidance, no injection."""
    z = np.asarray(z_T, dtype=np.float64)
    for t, t_prev in s.step_pairs():
        z = ddim_step(z, forward(w, z, t, cond_id).eps, t, t_prev, s)
    return np.clip(z, -1.0, 1.0)


@dataclass
class Trace:
    """Per-step, per-layer attention-mass rows from one generation run."""

    rows: list[tuple[int, int, int, float, float, float]] = field(default_factory=list)

    HEADER = ("step", "t", "layer", "mass_g", "mass_p", "score_difference")

    def save(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(self.HEADER)
            writer.writerows(self.rows)


def load_trace(path) -> Trace:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader))
        if header != Trace.HEADER:
            raise FormatError(f"{path}: unexpected trace header {header}")
        rows = [
            (int(r[0]), int(r[1]), int(r[2]), float(r[3]), float(r[4]), float(r[5]))
            for r in reader
        ]
    return Trace(rows=rows)


def generate(
    w: ModelWeights,
    chain: LatentChain,
    g: GuidanceConfig,
    f: FusionSchedule,
    s: NoiseSchedule,
    rng: Rng,
    collect_trace: bool = True,
) -> tuple[Tensor, Trace]:
    """Full guided generation from AdaIN-initialized noise."""
    pairs = s.step_pairs()
    if len(f) != len(pairs):
        raise ValueError(f"fusion schedule length {len(f)} != {len(pairs)} steps")
    cfg = w.config
    noise = randn((cfg.channels, cfg.image_size, cfg.image_size), rng)
    z = adain_init(noise, chain[s.inference_steps[0]])
    trace = Trace()
    for i, (t, t_prev) in enumerate(pairs):
        eps, mass = guided_epsilon(
            w, z, t, chain, g, f.modes[i], collect_mass=collect_trace
        )
        if collect_trace:
            for layer in sorted(mass):
                mg, mp, sd = mass[layer]
                trace.rows.append((i, t, layer, mg, mp, sd))
        z = ddim_step(z, eps, t, t_prev, s)
    return np.clip(z, -1.0, 1.0), trace


def _schedule_hash(s: NoiseSchedule) -> int:
    h = hashlib.sha256()
    h.update(np.asarray(s.alpha_bar, dtype="<f8").tobytes())
    h.update(np.asarray(s.inference_steps, dtype="<i8").tobytes())
    return int.from_bytes(h.digest()[:8], "little")


def save_chain(chain: LatentChain, s: NoiseSchedule, path):
    """Persist a chain with its conditioning id and schedule fingerprint."""
    out: dict[str, Tensor] = {
        "meta.cond_id": np.array([float(chain.cond_id)]),
        "meta.schedule_hash": _hash_limbs(_schedule_hash(s)),
    }
    for t in sorted(chain.latents):
        out[f"z_{t}"] = chain.latents[t]
    save_tensors(out, path)


def load_chain(path, s: NoiseSchedule | None = None) -> LatentChain:
    """Load a chain; if a schedule is given, verify the fingerprint."""
    raw = load_tensors(path)
    try:
        cond_id = int(raw.pop("meta.cond_id")[0])
        limbs = raw.pop("meta.schedule_hash")
    except KeyError as exc:
        raise FormatError(f"{path}: missing chain metadata {exc}") from exc
    if s is not None and not np.array_equal(limbs, _hash_limbs(_schedule_hash(s))):
        raise FormatError(f"{path}: chain was built under a different schedule")
    latents = {}
    for name, value in raw.items():
        if not name.startswith("z_"):
            raise FormatError(f"{path}: unexpected tensor {name!r}")
        latents[int(name[2:])] = value
    return LatentChain(latents=latents, cond_id=cond_id)


def _hash_limbs(h: int) -> Tensor:
    """64-bit hash as four 16-bit limbs, exactly representable in f32."""
    return np.array([float((h >> (16 * i)) & 0xFFFF) for i in range(4)])
