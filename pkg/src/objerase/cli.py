"""Command-line entry point wiring data generation, masks, training,
removal, window planning, evaluation, and gradient verification."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .errors import GradientCheckError, TrainingDivergedError, ValidationError

log = logging.getLogger("objerase")


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return (int(h), int(w))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got {text!r}") from exc


def _overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValidationError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k] = v
    return out


def cmd_gen_data(args) -> int:
    from .synth import SpecSampler, make_dataset

    effects = tuple(args.effects.split(",")) if args.effects else ("shadow", "reflection")
    sampler = SpecSampler(resolution=args.size, frames=args.frames, side_effects=effects)
    manifest = make_dataset(args.out, args.clips, sampler, seed=args.seed)
    print(f"wrote {len(manifest.entries)} clips to {args.out}")
    return 0


def cmd_derive_masks(args) -> int:
    from .masks import diff_mask, side_effect_mask
    from .video import load_clip, load_mask_dir, save_mask

    v_ori, _ = load_clip(args.ori)
    v_gt, _ = load_clip(args.gt)
    m_obj = load_mask_dir(args.obj_mask)
    m_diff = diff_mask(v_ori, v_gt, args.delta)
    m_se = side_effect_mask(m_diff, m_obj)
    out = Path(args.out)
    save_mask(m_diff, out / "diff")
    save_mask(m_se, out / "se")
    print(f"wrote diff/se masks to {out}")
    return 0


def cmd_train(args) -> int:
    from .denoiser import build_model
    from .training import train

    cfg = cfgmod.resolve(args.config, _overrides(args.set))
    cfgmod.log_resolved(cfg)
    model = build_model(cfgmod.model_config(cfg), seed=cfg["train.seed"])
    n_params = sum(p.numel() for p in model.parameters())
    log.info("trainable parameters: %d", n_params)
    log_path = args.log or (Path(args.out).with_suffix(".metrics.jsonl"))
    metrics = train(
        args.data, model, cfgmod.train_config(cfg), args.out,
        log_path=log_path, run_config=cfg,
    )
    print(f"trained {len(metrics)} steps; checkpoint {args.out}, metrics {log_path}")
    return 0


def cmd_remove(args) -> int:
    from .denoiser import load_checkpoint
    from .propagation import ClipRemover, remove_long
    from .video import load_clip, load_mask_dir, save_clip

    model = load_checkpoint(args.ckpt)
    v_ori, co_mask = load_clip(args.input_dir)
    m_obj = load_mask_dir(args.mask) if args.mask else co_mask
    if m_obj is None:
        raise ValidationError("no mask: pass --mask or co-locate mask_*.png with frames")
    remover = ClipRemover(model, steps=args.steps)
    out = remove_long(remover, v_ori, m_obj, window=args.window, seed=args.seed)
    save_clip(out, args.out)
    print(f"wrote {out.frames} frames to {args.out}")
    return 0


def cmd_plan_windows(args) -> int:
    from .propagation import plan, plan_as_dict

    schedule, wplan = plan(args.frames, args.window)
    payload = plan_as_dict(schedule, wplan)
    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        print(f"frames={payload['frames']} window={payload['window']} stride={payload['stride']}")
        print(f"keyframes: {len(payload['keyframes'])} starting {payload['keyframes'][:8]}...")
        for i, win in enumerate(payload["windows"]):
            print(f"window {i}: [{win['start']}, {win['end']}) keeps {win['keep']}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import run_benchmark, write_report

    report = run_benchmark(args.pred, args.gt, delta=args.delta)
    write_report(report, args.out)
    agg = report["aggregate"]
    print(f"clips={len(report['per_clip'])} psnr={agg['psnr']:.4f} ssim={agg['ssim']:.6f}")
    return 0


def cmd_grad_check(args) -> int:
    from .denoiser import DiTConfig, ModelConfig, build_model
    from .synth import SceneSpec, generate_pair
    from .training import TrainConfig, model_gradient_check

    cfg = ModelConfig(
        dit=DiTConfig(depth=2, hidden=24, heads=2, patch=4),
        cond_dim=16, cond_patch=4, teacher_dim=16, teacher_patch=4,
    )
    model = build_model(cfg, seed=args.seed)
    spec = SceneSpec(
        resolution=(16, 16), frames=2, object_size=2, start=(6.0, 6.0),
        velocity=(0.5, 0.5), shadow_offset=(4, 4), seed=args.seed,
    )
    v_ori, v_gt, m_obj = generate_pair(spec)
    batch = [(
        type(v_ori)(v_ori.data.double()),
        type(v_gt)(v_gt.data.double()),
        type(m_obj)(m_obj.data.double()),
    )]
    tcfg = TrainConfig(lambda_=args.oird_weight, steps=1)
    try:
        report = model_gradient_check(model, batch, tcfg, n_probes=args.probes, seed=args.seed)
    except GradientCheckError as exc:
        print(f"FAIL: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({k: report[k] for k in ("probes", "max_rel_err", "worst_param", "passed")}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="objerase",
        description="Video object removal: synthetic data, training, inference, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate paired synthetic clips")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, required=True)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--size", type=_parse_size, default=(64, 64), help="HxW, e.g. 64x64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--effects", default=None, help="comma list: shadow,reflection,none")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("derive-masks", help="difference and side-effect masks for a pair")
    p.add_argument("--ori", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--obj-mask", required=True)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_derive_masks)

    p = sub.add_parser("train", help="train the removal model on a manifest")
    p.add_argument("--data", required=True, help="path to manifest.json")
    p.add_argument("--config", default=None, help="JSON file of namespaced keys")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="metrics JSONL path")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("remove", help="remove the masked object from a clip")
    p.add_argument("--in", required=True, dest="input_dir", help="input frame directory")
    p.add_argument("--mask", default=None, help="mask directory (mask_*.png)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=81)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_remove)

    p = sub.add_parser("plan-windows", help="show the long-video window plan")
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--window", type=int, default=81)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_plan_windows)

    p = sub.add_parser("eval", help="paired-benchmark metrics report")
    p.add_argument("--pred", required=True, help="predictions manifest")
    p.add_argument("--gt", required=True, help="ground-truth manifest")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--delta", type=float, default=0.1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probes", type=int, default=50)
    p.add_argument("--oird-weight", type=float, default=0.1)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
