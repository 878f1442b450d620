"""Toy textured-shape dataset, flat config, PPM codec, and run orchestration.

The dataset draws filled polygons (square, diamond, plus, disc) with random
palettes and stripe/dot textures on solid backgrounds; the last class id is a
noise-speckled variant used as a negative. Class id 0 is reserved for null
conditioning and never appears as a label. Experiments are described by a
flat dotted-key config; every artifact of a run lands in a directory keyed by
the config hash, listed in a sorted-line manifest.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attention as attn
from .denoiser import (
    DenoiserConfig,
    TrainParams,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .evaluation import alignment_score, class_prototypes, cond_alignment_score, diversity_score
from .numerics import Rng, ShapeError, Tensor
from .sampler import (
    GUIDANCE_MODES,
    FusionSchedule,
    GuidanceConfig,
    NoiseSchedule,
    fusion_default,
    fusion_rival,
    fusion_uniform,
    generate,
    invert_image,
    make_schedule,
    save_chain,
)
from .tensorio import FormatError

SHAPE_KINDS = ("square", "diamond", "plus", "disc")
SPECKLE_PROB = 0.35


@dataclass(frozen=True)
class DatasetSpec:
    num_per_class: int = 40
    image_size: int = 16
    channels: int = 3
    num_classes: int = 6  # id 0 = null cond, ids 1..n-2 = shapes, id n-1 = speckled

    def __post_init__(self):
        if self.num_classes < 3:
            raise ValueError("need >= 3 class ids: null, one shape, speckled")
        if self.num_per_class < 1:
            raise ValueError("num_per_class must be >= 1")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8 to draw shapes")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")

    @property
    def labels_used(self) -> tuple[int, ...]:
        return tuple(range(1, self.num_classes))


@dataclass
class ToyDataset:
    images: Tensor  # (N, C, H, W) in [-1, 1]
    labels: Tensor  # (N,) int64, values in spec.labels_used
    spec: DatasetSpec


def _shape_mask(kind: str, size: int, cx: float, cy: float, r: float) -> Tensor:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r * 0.8)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= r * 1.3
    if kind == "plus":
        bar = r * 0.45
        return ((np.abs(dx) <= bar) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= bar) & (np.abs(dx) <= r)
        )
    if kind == "disc":
        return dx**2 + dy**2 <= r**2
    raise ValueError(f"unknown shape kind {kind!r}")


def _render(spec: DatasetSpec, label: int, rng: Rng) -> Tensor:
    size, c = spec.image_size, spec.channels
    speckled = label == spec.num_classes - 1
    if speckled:
        kind = SHAPE_KINDS[int(rng.randint(0, len(SHAPE_KINDS), 1)[0])]
    else:
        kind = SHAPE_KINDS[(label - 1) % len(SHAPE_KINDS)]
    jitter = rng.uniform(2) * 2.0 - 1.0
    cx = (size - 1) / 2.0 + jitter[0]
    cy = (size - 1) / 2.0 + jitter[1]
    r = size * (0.28 + 0.10 * rng.uniform(1)[0])
    mask = _shape_mask(kind, size, cx, cy, r)

    fg1 = rng.uniform(c) * 1.8 - 0.9
    fg2 = rng.uniform(c) * 1.8 - 0.9
    bg = rng.uniform(c) * 1.8 - 0.9
    # Keep the shape visible against the background.
    for _ in range(4):
        if np.abs(fg1 - bg).sum() >= 1.0:
            break
        bg = rng.uniform(c) * 1.8 - 0.9

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = rng.uniform(1)[0] * np.pi
    freq = 1.5 + 2.0 * rng.uniform(1)[0]
    phase = rng.uniform(1)[0] * 2.0 * np.pi
    u = (xx * np.cos(theta) + yy * np.sin(theta)) / size
    if int(rng.randint(0, 2, 1)[0]) == 0:
        tex = np.sin(2.0 * np.pi * freq * u + phase) >= 0.0  # stripes
    else:
        v = (xx * -np.sin(theta) + yy * np.cos(theta)) / size
        tex = (np.sin(2.0 * np.pi * freq * u + phase) * np.sin(2.0 * np.pi * freq * v)) >= 0.0

    fg_pix = np.where(tex[None], fg1[:, None, None], fg2[:, None, None])
    img = np.where(mask[None], fg_pix, bg[:, None, None])
    if speckled:
        hit = (rng.uniform(size * size) < SPECKLE_PROB).reshape(size, size)
        noise = (rng.uniform(c * size * size) * 1.9 - 0.95).reshape(c, size, size)
        img = np.where(hit[None], noise, img)
    return img


def make_dataset(spec: DatasetSpec, rng: Rng) -> ToyDataset:
    """Balanced dataset over labels 1..num_classes-1, deterministic in rng."""
    images, labels = [], []
    for label in spec.labels_used:
        for i in range(spec.num_per_class):
            images.append(_render(spec, label, rng.derive(label).derive(i)))
            labels.append(label)
    return ToyDataset(
        images=np.stack(images), labels=np.asarray(labels, dtype=np.int64), spec=spec
    )


def encode_image(image: Tensor, path) -> None:
    """Write a (3, H, W) image in [-1, 1] as a binary P6 PPM."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W), got {image.shape}")
    pix = np.clip(np.rint((image + 1.0) * 127.5), 0, 255).astype(np.uint8)
    _, h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pix.transpose(1, 2, 0).tobytes())


def decode_image(path) -> Tensor:
    """Read a binary P6 PPM back to (3, H, W) in [-1, 1]."""
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P6"):
        raise FormatError(f"{path}: not a P6 file")
    pos, fields = 2, []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and blob[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: malformed header")
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    data = blob[pos:]
    if len(data) != 3 * w * h:
        raise FormatError(f"{path}: payload is {len(data)} bytes, expected {3 * w * h}")
    pix = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    return pix.astype(np.float64).transpose(2, 0, 1) / 127.5 - 1.0


# --- flat dotted-key experiment config ---------------------------------------

class ConfigError(ValueError):
    pass


_INT, _FLOAT, _STR, _INT_LIST, _FLOAT_LIST = "int", "float", "str", "int_list", "float_list"

SCHEMA: dict[str, tuple[str, str]] = {
    "analyze.scales": (_FLOAT_LIST, "1.0,3.0,5.0,7.5"),
    "data.num_per_class": (_INT, "40"),
    "data.seed": (_INT, "0"),
    "model.checkpoint": (_STR, ""),
    "model.image_size": (_INT, "16"),
    "model.channels": (_INT, "3"),
    "model.token_dim": (_INT, "32"),
    "model.num_heads": (_INT, "4"),
    "model.num_blocks": (_INT, "4"),
    "model.num_classes": (_INT, "6"),
    "schedule.num_train_steps": (_INT, "1000"),
    "schedule.num_inference_steps": (_INT, "50"),
    "schedule.beta_start": (_FLOAT, "0.0001"),
    "schedule.beta_end": (_FLOAT, "0.02"),
    "guidance.scale": (_FLOAT, "7.5"),
    "guidance.mode": (_STR, "conflict_free"),
    "guidance.negative_cond": (_INT, "5"),
    "fusion.kind": (_STR, "default"),
    "fusion.stratified_steps": (_INT, "10"),
    "fusion.lambda_g": (_FLOAT, "0.5"),
    "fusion.lambda_p": (_FLOAT, "0.5"),
    "run.seeds": (_INT_LIST, "0,1"),
    "run.prompt_ids": (_INT_LIST, "0"),
    "run.images_per_prompt": (_INT, "4"),
    "run.inversion_cond": (_STR, "prompt"),
    "train.steps": (_INT, "4000"),
    "train.batch_size": (_INT, "32"),
    "train.lr": (_FLOAT, "0.1"),
    "train.lr_final": (_FLOAT, "0.02"),
    "train.grad_clip": (_FLOAT, "2.0"),
    "train.cond_drop_prob": (_FLOAT, "0.1"),
    "train.t_min": (_INT, "19"),
    "train.seed": (_INT, "0"),
}

FUSION_KINDS = ("default", "rival", "original", "replacement", "concat", "stratified")


def _parse_value(key: str, text: str):
    kind = SCHEMA[key][0]
    text = text.strip()
    try:
        if kind == _INT:
            return int(text)
        if kind == _FLOAT:
            return float(text)
        if kind == _INT_LIST:
            return tuple(int(p.strip()) for p in text.split(",") if p.strip())
        if kind == _FLOAT_LIST:
            return tuple(float(p.strip()) for p in text.split(",") if p.strip())
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from None


def _canonical(key: str, value) -> str:
    kind = SCHEMA[key][0]
    if kind == _FLOAT:
        return repr(float(value))
    if kind == _INT_LIST:
        return ",".join(str(int(v)) for v in value)
    if kind == _FLOAT_LIST:
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def default_config() -> dict:
    return {key: _parse_value(key, default) for key, (_, default) in SCHEMA.items()}


def apply_overrides(cfg: dict, pairs: list[str]) -> dict:
    """Apply key=value strings in order; last write wins; unknown keys fail."""
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} must be key=value")
        key, text = pair.split("=", 1)
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _parse_value(key, text)
    return cfg


def parse_config_text(text: str) -> dict:
    """Defaults overlaid with key = value lines; '#' starts a comment."""
    cfg = default_config()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        apply_overrides(cfg, [line])
    return cfg


def validate_config(cfg: dict) -> dict:
    """Cross-field checks; error messages name the offending key."""
    def _require(ok: bool, key: str, msg: str):
        if not ok:
            raise ConfigError(f"{key}: {msg}")

    _require(cfg["guidance.mode"] in GUIDANCE_MODES, "guidance.mode",
             f"must be one of {GUIDANCE_MODES}")
    _require(cfg["guidance.scale"] >= 0.0, "guidance.scale", "must be >= 0")
    _require(cfg["fusion.kind"] in FUSION_KINDS, "fusion.kind",
             f"must be one of {FUSION_KINDS}")
    lam_sum = cfg["fusion.lambda_g"] + cfg["fusion.lambda_p"]
    _require(abs(lam_sum - 1.0) <= 1e-9, "fusion.lambda_p",
             f"lambda_g + lambda_p must sum to 1, got {lam_sum}")
    _require(0.0 <= cfg["fusion.lambda_p"] <= 1.0, "fusion.lambda_p", "must lie in [0, 1]")
    _require(0.0 <= cfg["schedule.beta_start"] <= cfg["schedule.beta_end"],
             "schedule.beta_start", "need 0 <= beta_start <= beta_end")
    _require(cfg["schedule.beta_end"] < 1.0, "schedule.beta_end", "must be < 1")
    nsteps = cfg["schedule.num_inference_steps"]
    _require(1 <= nsteps <= cfg["schedule.num_train_steps"],
             "schedule.num_inference_steps", "must lie in [1, num_train_steps]")
    _require(0 <= cfg["fusion.stratified_steps"] <= nsteps, "fusion.stratified_steps",
             f"must lie in [0, {nsteps}]")
    _require(cfg["run.inversion_cond"] in ("prompt", "null"), "run.inversion_cond",
             "must be 'prompt' or 'null'")
    _require(cfg["run.images_per_prompt"] >= 1, "run.images_per_prompt", "must be >= 1")
    _require(len(cfg["run.seeds"]) >= 1, "run.seeds", "must list at least one seed")
    _require(len(cfg["run.prompt_ids"]) >= 1, "run.prompt_ids",
             "must list at least one prompt image id")
    _require(all(p >= 0 for p in cfg["run.prompt_ids"]), "run.prompt_ids",
             "ids must be >= 0")
    _require(0 <= cfg["guidance.negative_cond"] < cfg["model.num_classes"],
             "guidance.negative_cond", "must be a valid class id")
    _require(len(cfg["analyze.scales"]) >= 1, "analyze.scales",
             "must list at least one guidance scale")
    _require(all(s >= 0.0 for s in cfg["analyze.scales"]), "analyze.scales",
             "scales must be >= 0")
    _require(cfg["data.num_per_class"] >= 1, "data.num_per_class", "must be >= 1")
    _require(cfg["train.steps"] >= 1, "train.steps", "must be >= 1")
    _require(cfg["train.batch_size"] >= 1, "train.batch_size", "must be >= 1")
    _require(cfg["train.lr"] > 0.0, "train.lr", "must be > 0")
    _require(cfg["train.lr_final"] >= 0.0, "train.lr_final",
             "must be >= 0 (0 disables decay)")
    _require(cfg["train.grad_clip"] > 0.0, "train.grad_clip", "must be > 0")
    _require(0.0 <= cfg["train.cond_drop_prob"] <= 1.0, "train.cond_drop_prob",
             "must lie in [0, 1]")
    _require(0 <= cfg["train.t_min"] < cfg["schedule.num_train_steps"], "train.t_min",
             "must lie in [0, num_train_steps)")
    try:
        model_config_from(cfg)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None
    try:
        dataset_spec_from(cfg)
    except ValueError as exc:
        raise ConfigError(f"data: {exc}") from None
    return cfg


def config_text(cfg: dict) -> str:
    lines = [f"{key} = {_canonical(key, cfg[key])}" for key in sorted(SCHEMA)]
    return "\n".join(lines) + "\n"


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(config_text(cfg).encode("ascii")).hexdigest()[:12]


def dataset_spec_from(cfg: dict) -> DatasetSpec:
    return DatasetSpec(
        num_per_class=cfg["data.num_per_class"],
        image_size=cfg["model.image_size"],
        channels=cfg["model.channels"],
        num_classes=cfg["model.num_classes"],
    )


def model_config_from(cfg: dict) -> DenoiserConfig:
    return DenoiserConfig(
        image_size=cfg["model.image_size"],
        channels=cfg["model.channels"],
        token_dim=cfg["model.token_dim"],
        num_heads=cfg["model.num_heads"],
        num_blocks=cfg["model.num_blocks"],
        num_classes=cfg["model.num_classes"],
    )


def schedule_from(cfg: dict) -> NoiseSchedule:
    return make_schedule(
        num_train_steps=cfg["schedule.num_train_steps"],
        num_inference_steps=cfg["schedule.num_inference_steps"],
        beta_start=cfg["schedule.beta_start"],
        beta_end=cfg["schedule.beta_end"],
    )


def fusion_from(cfg: dict, num_steps: int) -> FusionSchedule:
    kind = cfg["fusion.kind"]
    if kind == "default":
        return fusion_default(
            num_steps, cfg["fusion.stratified_steps"],
            cfg["fusion.lambda_g"], cfg["fusion.lambda_p"],
        )
    if kind == "rival":
        return fusion_rival(num_steps, cfg["fusion.stratified_steps"])
    if kind == "original":
        return fusion_uniform(attn.ORIGINAL, num_steps)
    if kind == "replacement":
        return fusion_uniform(attn.REPLACEMENT, num_steps)
    if kind == "concat":
        return fusion_uniform(attn.CONCATENATION, num_steps)
    return fusion_uniform(
        attn.stratified(cfg["fusion.lambda_g"], cfg["fusion.lambda_p"]), num_steps
    )


def guidance_from_config(
    cfg: dict, positive_cond: int, mode: str | None = None,
    scale: float | None = None, negative_chain=None,
) -> GuidanceConfig:
    return GuidanceConfig(
        scale=cfg["guidance.scale"] if scale is None else scale,
        mode=cfg["guidance.mode"] if mode is None else mode,
        positive_cond=positive_cond,
        negative_cond=cfg["guidance.negative_cond"],
        negative_chain=negative_chain,
    )


def train_params_from(cfg: dict, schedule: NoiseSchedule) -> TrainParams:
    return TrainParams(
        steps=cfg["train.steps"],
        batch_size=cfg["train.batch_size"],
        lr=cfg["train.lr"],
        lr_final=cfg["train.lr_final"] or None,
        grad_clip=cfg["train.grad_clip"],
        cond_drop_prob=cfg["train.cond_drop_prob"],
        num_train_steps=cfg["schedule.num_train_steps"],
        t_min=cfg["train.t_min"],
        alpha_bar=schedule.alpha_bar,
    )


# --- run orchestration --------------------------------------------------------

class StageError(RuntimeError):
    """A run stage failed; .stage names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class RunResult:
    run_dir: Path
    manifest_path: Path
    artifacts: list[str]
    config_hash: str


def _file_size(path: Path) -> int:
    return path.stat().st_size


def _write_manifest(run_dir: Path, cfg: dict, h: str,
                    artifacts: list[str], reports: list[str]) -> Path:
    lines = [f"artifact.{rel} = {_file_size(run_dir / rel)}" for rel in artifacts]
    lines += [f"config.{key} = {_canonical(key, cfg[key])}" for key in sorted(SCHEMA)]
    lines.append(f"config_hash = {h}")
    lines += [f"report.{rel} = {_file_size(run_dir / rel)}" for rel in reports]
    path = run_dir / "manifest.txt"
    path.write_text("\n".join(sorted(lines)) + "\n")
    return path


def train_model(cfg: dict, out_dir) -> tuple[Path, list[tuple[int, float]]]:
    """Train from config; writes checkpoint.bin and history.csv under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = make_dataset(dataset_spec_from(cfg), Rng(cfg["data.seed"]))
    schedule = schedule_from(cfg)
    params = train_params_from(cfg, schedule)
    w, history = train(dataset, model_config_from(cfg), params, Rng(cfg["train.seed"]))
    ckpt = out_dir / "checkpoint.bin"
    save_checkpoint(w, ckpt)
    with open(out_dir / "history.csv", "w") as f:
        f.write("step,loss\n")
        for step, loss in history:
            f.write(f"{step},{loss}\n")
    return ckpt, history


def run_experiment(cfg: dict, out_dir) -> RunResult:
    """Invert, generate, and evaluate every (prompt, seed) of the config.

    Layout: <out>/run_<hash>/prompt<p>_seed<s>/{chain.bin, img<k>.ppm, trace.csv}
    plus metrics.csv and manifest.txt at the run root. Any stage failure
    persists a partial manifest and raises StageError naming the stage.
    """
    h = config_hash(cfg)
    run_dir = Path(out_dir) / f"run_{h}"
    run_dir.mkdir(parents=True, exist_ok=True)
    artifacts: list[str] = []
    reports: list[str] = []

    def _fail(stage: str, exc: Exception):
        _write_manifest(run_dir, cfg, h, artifacts, reports)
        raise StageError(stage, str(exc)) from exc

    try:
        path = cfg["model.checkpoint"]
        if not path:
            raise ValueError("model.checkpoint is not set")
        w = load_checkpoint(path)
        want = model_config_from(cfg)
        if w.config != want:
            raise ValueError(f"checkpoint config {w.config} does not match model.* keys")
    except Exception as exc:
        _fail("load-checkpoint", exc)

    try:
        dataset = make_dataset(dataset_spec_from(cfg), Rng(cfg["data.seed"]))
    except Exception as exc:
        _fail("make-data", exc)

    schedule = schedule_from(cfg)
    fusion = fusion_from(cfg, len(schedule.inference_steps))
    num_images = cfg["run.images_per_prompt"]

    chains = {}
    negative_chain = None
    try:
        for pid in cfg["run.prompt_ids"]:
            if pid >= dataset.images.shape[0]:
                raise ValueError(f"run.prompt_ids: {pid} outside dataset of "
                                 f"{dataset.images.shape[0]} images")
            label = int(dataset.labels[pid])
            inv_cond = label if cfg["run.inversion_cond"] == "prompt" else 0
            chains[pid] = invert_image(dataset.images[pid], inv_cond, w, schedule)
        if cfg["guidance.mode"] == "negative_image":
            neg_cond = cfg["guidance.negative_cond"]
            hits = np.nonzero(dataset.labels == neg_cond)[0]
            if hits.size == 0:
                raise ValueError(f"no dataset image with label {neg_cond} "
                                 "for negative_image guidance")
            negative_chain = invert_image(
                dataset.images[int(hits[0])], neg_cond, w, schedule
            )
    except Exception as exc:
        _fail("invert", exc)

    metrics_rows = []
    try:
        prototypes = class_prototypes(dataset, w)
        for pid in cfg["run.prompt_ids"]:
            label = int(dataset.labels[pid])
            g = guidance_from_config(cfg, positive_cond=label,
                                     negative_chain=negative_chain)
            for seed in cfg["run.seeds"]:
                sub = run_dir / f"prompt{pid}_seed{seed}"
                sub.mkdir(exist_ok=True)
                save_chain(chains[pid], schedule, sub / "chain.bin")
                artifacts.append(f"prompt{pid}_seed{seed}/chain.bin")
                images = []
                for k in range(num_images):
                    rng = Rng(seed).derive(pid).derive(k)
                    image, trace = generate(
                        w, chains[pid], g, fusion, schedule, rng,
                        collect_trace=(k == 0),
                    )
                    encode_image(image, sub / f"img{k}.ppm")
                    artifacts.append(f"prompt{pid}_seed{seed}/img{k}.ppm")
                    if k == 0:
                        trace.save(sub / "trace.csv")
                        artifacts.append(f"prompt{pid}_seed{seed}/trace.csv")
                    images.append(image)
                align = float(np.mean(
                    [alignment_score(im, dataset.images[pid], w) for im in images]
                ))
                cond_align = float(np.mean(
                    [cond_alignment_score(im, label, prototypes, w) for im in images]
                ))
                div = diversity_score(images, w) if len(images) >= 2 else float("nan")
                metrics_rows.append((pid, seed, align, cond_align, div))
    except Exception as exc:
        _fail("generate", exc)

    try:
        with open(run_dir / "metrics.csv", "w") as f:
            f.write("prompt_id,seed,alignment,cond_alignment,diversity\n")
            for pid, seed, align, cond_align, div in metrics_rows:
                f.write(f"{pid},{seed},{align!r},{cond_align!r},{div!r}\n")
        reports.append("metrics.csv")
    except Exception as exc:
        _fail("evaluate", exc)

    manifest = _write_manifest(run_dir, cfg, h, artifacts, reports)
    return RunResult(run_dir=run_dir, manifest_path=manifest,
                     artifacts=artifacts, config_hash=h)
