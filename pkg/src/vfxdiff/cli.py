"""Command-line surface: data generation, training, sampling, evaluation,
mask inspection, and the gradient-check suite.

Global flags (before the subcommand): --seed, --config FILE, --preset NAME.
Config files are plain key=value lines with dotted keys; presets seed the
config and the file and CLI flags overlay it.
"""

from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import metrics
from .conditioning import ConditionPair, build_iif_mask, build_layout
from .config import PRESET_NAMES, RunConfig, config_snapshot, load_config_file, model_config_from_snapshot, preset
from .diffusion import SamplerConfig, ddim_generate, make_schedule
from .judge_client import make_remote_judge
from .model import Denoiser, ModelConfig, MoEConfig
from .numerics import add, constant, finite_diff_check, matmul, mse, parameter, scale
from .storage import load_checkpoint, load_dataset, save_checkpoint, save_dataset, save_video
from .synthvfx import EFFECT_IDS, EFFECT_ORDER, effect_from_name, make_dataset
from .trainer import train_dual_phase

EVAL_COLUMNS = ("id", "rdd", "inner_diff", "outer_diff", "controllable", "eor", "dynamic_degree")


def _build_config(args) -> RunConfig:
    cfg = preset(args.preset)
    if args.config:
        load_config_file(cfg, args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
        cfg.sampler.seed = args.seed
    return cfg


def _denoiser_from_checkpoint(path: str) -> tuple[Denoiser, dict]:
    snapshot, arrays = load_checkpoint(path)
    model_cfg = model_config_from_snapshot(snapshot)
    den = Denoiser(model_cfg, seed=0)
    named = den.parameters()
    missing = set(named) - set(arrays)
    extra = set(arrays) - set(named)
    if missing or extra:
        raise ValueError(f"checkpoint parameter mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    for name, tensor in named.items():
        if arrays[name].shape != tensor.data.shape:
            raise ValueError(f"checkpoint {name}: shape {arrays[name].shape} != {tensor.data.shape}")
        tensor.data[:] = arrays[name]
    return den, snapshot


def _parse_condition(spec: str, height: int, width: int) -> ConditionPair:
    """effect:r0,c0,r1,c1 with a half-open pixel rectangle."""
    try:
        name, rect = spec.split(":", 1)
        r0, c0, r1, c1 = (int(v) for v in rect.split(","))
    except ValueError:
        raise SystemExit(f"bad condition spec {spec!r}; expected effect:r0,c0,r1,c1") from None
    effect = effect_from_name(name)
    if not (0 <= r0 < r1 <= height and 0 <= c0 < c1 <= width):
        raise SystemExit(f"condition rectangle {rect} outside {height}x{width} frame")
    mask = np.zeros((height, width))
    mask[r0:r1, c0:c1] = 1.0
    return ConditionPair(EFFECT_IDS[effect], mask)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig) -> int:
    kinds = tuple(effect_from_name(n) for n in args.kinds.split(",")) if args.kinds else EFFECT_ORDER
    rng = np.random.default_rng(cfg.seed)
    records = make_dataset(args.count, rng, kinds=kinds, config=cfg.synth)
    save_dataset(args.out, records)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    pool = load_dataset(args.data)
    den = Denoiser(cfg.model, seed=cfg.seed, use_iif_mask=not args.no_iif_mask)
    schedule = make_schedule(cfg.schedule_steps)
    trace = train_dual_phase(pool, den, schedule, cfg.train)
    arrays = {name: t.data for name, t in den.parameters().items()}
    save_checkpoint(args.out, config_snapshot(cfg), arrays)
    trace_path = args.loss_csv or str(Path(args.out).with_suffix(".loss.csv"))
    with open(trace_path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("step", "stage", "mse", "aux_term"))
        for row in trace:
            writer.writerow((row.step, row.stage, _fmt(row.mse), _fmt(row.aux_term)))
    print(f"trained {len(trace)} steps; checkpoint {args.out}, loss trace {trace_path}")
    return 0


def cmd_generate(args, cfg: RunConfig) -> int:
    den, snapshot = _denoiser_from_checkpoint(args.checkpoint)
    mc = den.config
    conditions = [_parse_condition(spec, mc.height, mc.width) for spec in args.cond or []]
    sampler = SamplerConfig(steps=cfg.sampler.steps, cfg_scale=cfg.sampler.cfg_scale, seed=cfg.seed)
    schedule = make_schedule(int(snapshot.get("schedule_steps", cfg.schedule_steps)))
    video = ddim_generate(conditions, den, schedule, sampler)
    names = save_video(args.out, video)
    print(f"wrote {len(names)} frames to {args.out}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    records = load_dataset(args.data)
    judge = make_remote_judge(args.judge_url) if args.judge_url else metrics.procedural_judge

    tasks = []
    for rec in records:
        for k, c in enumerate(rec.conditions):
            if not c.mask.any() or c.mask.all():
                continue  # no-op triggers and full-frame masks have no ECR region
            tasks.append((f"{rec.id}-c{k}", rec.target, EFFECT_ORDER[c.effect_id], c.mask))

    def run_one(task):
        sample_id, video, effect, mask = task
        return metrics.evaluate_condition(sample_id, video, effect, mask, judge)

    if args.judge_url and args.max_in_flight > 1:
        with ThreadPoolExecutor(max_workers=args.max_in_flight) as pool:
            reports = list(pool.map(run_one, tasks))
    else:
        reports = [run_one(t) for t in tasks]
    reports.sort(key=lambda r: r.sample_id)

    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EVAL_COLUMNS)
        for r in reports:
            eor_text = "unevaluable" if r.eor_answer is None else ("yes" if r.eor_answer else "no")
            writer.writerow(
                (
                    r.sample_id,
                    _fmt(r.rdd),
                    _fmt(r.inner_diff),
                    _fmt(r.outer_diff),
                    _fmt(r.controllable),
                    eor_text,
                    _fmt(r.dynamic_degree),
                )
            )
    print(f"evaluated {len(reports)} conditions -> {args.out}")
    return 0


def cmd_mask_dump(args, cfg: RunConfig) -> int:
    layout = build_layout(args.n_conditions, args.text_len, args.spatial_len, args.latent_len)
    mask = build_iif_mask(layout)
    print(f"IIF mask, l={layout.total_len}, N={layout.n_conditions} (rows attend to columns; # open, . blocked)")
    for row in mask:
        print("".join("#" if v == 0.0 else "." for v in row))
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    rng = np.random.default_rng(cfg.seed)
    worst = 0.0

    a = parameter(rng.normal(size=(4, 3)))
    b = parameter(rng.normal(size=(3, 5)))
    worst = max(worst, finite_diff_check(lambda: mse(matmul(a, b), constant(np.zeros((4, 5)))), [a, b]))

    mc = ModelConfig(
        frames=1, height=2, width=2, channels=1, patch=1, dim=8, heads=2, blocks=2, ffn_dim=16,
        text_len=2, vocab=4, moe=MoEConfig(n_experts=2, top_k=1, rank=2, alpha=2.0),
    )
    den = Denoiser(mc, seed=cfg.seed)
    for t in den.parameters().values():
        t.data += rng.normal(0.0, 0.02, t.data.shape)
    x_t = rng.standard_normal(mc.video_shape)
    mask = np.zeros((2, 2))
    mask[:, :1] = 1.0
    conditions = [ConditionPair(1, mask)]
    target = rng.standard_normal(mc.video_shape)

    def full_model():
        v_hat, aux = den.forward_graph(x_t, 7, conditions, train_mode=True)
        loss = mse(v_hat, constant(target))
        for a_node in aux:
            loss = add(loss, scale(a_node, 0.01 / len(aux)))
        return loss

    worst = max(worst, finite_diff_check(full_model, list(den.parameters().values())))
    print(f"max relative gradient error: {worst:.3e}")
    return 0 if worst <= 1e-4 else 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vfxdiff", description=__doc__)
    parser.add_argument("--seed", type=int, default=None, help="master seed for the subcommand")
    parser.add_argument("--config", type=str, default=None, help="key=value config file")
    parser.add_argument("--preset", type=str, default="toy", choices=PRESET_NAMES)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic effect dataset")
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--kinds", type=str, default=None, help="comma-separated effect names")
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="dual-phase training to a checkpoint")
    p.add_argument("--data", type=str, required=True, help="dataset root with manifest.json")
    p.add_argument("--out", type=str, required=True, help="checkpoint path")
    p.add_argument("--loss-csv", type=str, default=None)
    p.add_argument("--no-iif-mask", action="store_true", help="ablate: full attention instead of the IIF mask")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample a video from a checkpoint")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--cond", action="append", help="effect:r0,c0,r1,c1 (repeatable)")
    p.add_argument("--out", type=str, required=True, help="output frame directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="controllability metrics to CSV")
    p.add_argument("--data", type=str, required=True, help="dataset root with manifest.json")
    p.add_argument("--out", type=str, required=True, help="metrics CSV path")
    p.add_argument("--judge-url", type=str, default=None, help="remote judge endpoint (default: procedural judge)")
    p.add_argument("--max-in-flight", type=int, default=4, help="bound on concurrent judge queries")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mask-dump", help="print the attention mask grid for a layout")
    p.add_argument("--n-conditions", type=int, default=1)
    p.add_argument("--text-len", type=int, default=1)
    p.add_argument("--spatial-len", type=int, default=1)
    p.add_argument("--latent-len", type=int, default=1)
    p.set_defaults(func=cmd_mask_dump)

    p = sub.add_parser("gradcheck", help="finite-difference check of ops and the tiny full model")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _build_config(args)
        return args.func(args, cfg)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
