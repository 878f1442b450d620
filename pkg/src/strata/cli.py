"""Command-line front end: train, make-data, invert, generate, ablate, analyze.

Exit codes: 0 success, 1 config/usage errors (message names the offending
key), 2 runtime failures (message names the failed stage).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .denoiser import TrainingDiverged, load_checkpoint
from .evaluation import (
    LAMBDA_GRID,
    SweepSetup,
    class_prototypes,
    guidance_sweep,
    lambda_sweep,
    mode_trend,
)
from .numerics import Rng
from .pipeline import (
    SCHEMA,
    ConfigError,
    StageError,
    apply_overrides,
    config_hash,
    dataset_spec_from,
    default_config,
    encode_image,
    fusion_from,
    guidance_from_config,
    make_dataset,
    model_config_from,
    parse_config_text,
    run_experiment,
    schedule_from,
    train_model,
    validate_config,
)
from .sampler import fusion_uniform, invert_image, save_chain
from . import attention as attn

DEFAULT_OUT = "out"


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as ConfigError (exit 1)."""

    def error(self, message):
        raise ConfigError(message)


def _config_key_help() -> str:
    lines = ["config keys (key = default):"]
    for key in sorted(SCHEMA):
        lines.append(f"  {key} = {SCHEMA[key][1]}")
    return "\n".join(lines)


def _build_parser() -> _Parser:
    epilog = (
        "defaults: guidance scale 7.5, 50 inference steps, stratified lambda\n"
        "0.5/0.5 for the first 10 steps then concatenation.\n\n" + _config_key_help()
    )
    p = _Parser(
        prog="strata",
        description="tiny diffusion sandbox for image-prompt K/V injection",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True)
    for name, doc in [
        ("train", "train a denoiser; writes checkpoint.bin and history.csv"),
        ("make-data", "render the toy dataset to PPM images plus labels.csv"),
        ("invert", "invert one prompt image into a latent chain file"),
        ("generate", "run inversion + guided generation + metrics + manifest"),
        ("ablate", "sweep stratified lambda_p over the standard grid"),
        ("analyze", "guidance-scale/mode sweep and attention-mass trend tables"),
    ]:
        q = sub.add_parser(name, help=doc, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        q.add_argument("--config", help="config file of key = value lines")
        q.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable, last wins)")
        q.add_argument("--seed", type=int, default=None,
                       help="use this single seed for training and generation")
        q.add_argument("--out", default=None,
                       help="output directory (default $STRATA_OUT_DIR or ./out)")
    return p


def _load_config(args) -> dict:
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"--config: {exc}") from exc
        cfg = parse_config_text(text)
    else:
        cfg = default_config()
    apply_overrides(cfg, args.set)
    if args.seed is not None:
        apply_overrides(cfg, [f"train.seed={args.seed}", f"run.seeds={args.seed}"])
    return validate_config(cfg)


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("STRATA_OUT_DIR") or DEFAULT_OUT
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _cmd_train(cfg, out):
    try:
        ckpt, history = train_model(cfg, out)
    except TrainingDiverged as exc:
        raise StageError("train", str(exc)) from exc
    print(f"wrote {ckpt}")
    print(f"wrote {out / 'history.csv'}")
    print(f"final loss {history[-1][1]:.6f}")
    return 0


def _cmd_make_data(cfg, out):
    dataset = make_dataset(dataset_spec_from(cfg), Rng(cfg["data.seed"]))
    data_dir = out / f"dataset_{config_hash(cfg)}"
    data_dir.mkdir(parents=True, exist_ok=True)
    with open(data_dir / "labels.csv", "w") as f:
        f.write("index,label\n")
        for i, label in enumerate(dataset.labels):
            encode_image(dataset.images[i], data_dir / f"img{i:03d}.ppm")
            f.write(f"{i},{int(label)}\n")
    print(f"wrote {data_dir} ({dataset.images.shape[0]} images)")
    return 0


def _load_model_and_data(cfg, stage="load-checkpoint"):
    try:
        path = cfg["model.checkpoint"]
        if not path:
            raise ValueError("model.checkpoint is not set")
        w = load_checkpoint(path)
        if w.config != model_config_from(cfg):
            raise ValueError("checkpoint config does not match model.* keys")
    except Exception as exc:
        raise StageError(stage, str(exc)) from exc
    try:
        dataset = make_dataset(dataset_spec_from(cfg), Rng(cfg["data.seed"]))
    except Exception as exc:
        raise StageError("make-data", str(exc)) from exc
    return w, dataset


def _first_prompt(cfg, dataset):
    pid = cfg["run.prompt_ids"][0]
    if pid >= dataset.images.shape[0]:
        raise StageError(
            "invert", f"run.prompt_ids: {pid} outside dataset of "
            f"{dataset.images.shape[0]} images"
        )
    return pid, int(dataset.labels[pid])


def _cmd_invert(cfg, out):
    w, dataset = _load_model_and_data(cfg)
    schedule = schedule_from(cfg)
    pid, label = _first_prompt(cfg, dataset)
    inv_cond = label if cfg["run.inversion_cond"] == "prompt" else 0
    try:
        chain = invert_image(dataset.images[pid], inv_cond, w, schedule)
        path = out / f"chain_prompt{pid}_{config_hash(cfg)}.bin"
        save_chain(chain, schedule, path)
    except Exception as exc:
        raise StageError("invert", str(exc)) from exc
    print(f"wrote {path}")
    return 0


def _cmd_generate(cfg, out):
    result = run_experiment(cfg, out)
    print(f"wrote {result.manifest_path}")
    print(f"run dir {result.run_dir} ({len(result.artifacts)} artifacts)")
    return 0


def _sweep_setup(cfg, w, dataset, schedule):
    pid, label = _first_prompt(cfg, dataset)
    inv_cond = label if cfg["run.inversion_cond"] == "prompt" else 0
    try:
        chain = invert_image(dataset.images[pid], inv_cond, w, schedule)
        prototypes = class_prototypes(dataset, w)
    except Exception as exc:
        raise StageError("invert", str(exc)) from exc
    return SweepSetup(
        weights=w, schedule=schedule, chain=chain,
        prompt_image=dataset.images[pid], positive_cond=label,
        negative_cond=cfg["guidance.negative_cond"],
        seeds=list(cfg["run.seeds"]), prototypes=prototypes,
    ), pid


def _cmd_ablate(cfg, out):
    w, dataset = _load_model_and_data(cfg)
    schedule = schedule_from(cfg)
    setup, pid = _sweep_setup(cfg, w, dataset, schedule)
    g = guidance_from_config(cfg, positive_cond=setup.positive_cond)
    try:
        rows = lambda_sweep(list(LAMBDA_GRID), setup, g, len(schedule.inference_steps))
        path = out / f"ablation_{config_hash(cfg)}.csv"
        with open(path, "w") as f:
            f.write("lambda_p,alignment,cond_alignment\n")
            for r in rows:
                f.write(f"{r['lambda_p']!r},{r['alignment']!r},{r['cond_alignment']!r}\n")
    except Exception as exc:
        raise StageError("ablate", str(exc)) from exc
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


def _cmd_analyze(cfg, out):
    w, dataset = _load_model_and_data(cfg)
    schedule = schedule_from(cfg)
    setup, pid = _sweep_setup(cfg, w, dataset, schedule)
    num_steps = len(schedule.inference_steps)
    fusion = fusion_from(cfg, num_steps)
    h = config_hash(cfg)
    try:
        sweep_rows = guidance_sweep(
            list(cfg["analyze.scales"]), ["conflicting", "conflict_free", "none"],
            setup, fusion,
        )
        sweep_path = out / f"guidance_sweep_{h}.csv"
        with open(sweep_path, "w") as f:
            f.write("scale,mode,alignment,cond_alignment\n")
            for r in sweep_rows:
                f.write(f"{r['scale']!r},{r['mode']},{r['alignment']!r},"
                        f"{r['cond_alignment']!r}\n")

        concat_all = fusion_uniform(attn.CONCATENATION, num_steps)
        scale = cfg["guidance.scale"]
        variants = {
            mode: (
                guidance_from_config(
                    cfg, positive_cond=setup.positive_cond, mode=mode, scale=scale
                ),
                concat_all,
            )
            for mode in ("conflicting", "conflict_free", "none")
        }
        trend = mode_trend(setup, variants, num_steps)
        trend_path = out / f"mode_trend_{h}.csv"
        with open(trend_path, "w") as f:
            f.write("mode,score_difference_mean,score_difference_se\n")
            for mode in sorted(trend):
                mean, se = trend[mode]
                f.write(f"{mode},{mean!r},{se!r}\n")
    except Exception as exc:
        raise StageError("analyze", str(exc)) from exc
    print(f"wrote {sweep_path} ({len(sweep_rows)} rows)")
    print(f"wrote {trend_path} ({len(trend)} rows)")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "make-data": _cmd_make_data,
    "invert": _cmd_invert,
    "generate": _cmd_generate,
    "ablate": _cmd_ablate,
    "analyze": _cmd_analyze,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_config(args)
        out = _out_dir(args)
        return _COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"stage error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
