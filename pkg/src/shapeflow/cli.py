"""Command-line interface.

Subcommands: gen-data, verify-data, train-vae, train-flow, refine, eval.
All take --config (JSON RunConfig, defaults apply when omitted), --seed
(overrides the per-stage seeds), and --out (overrides the output path).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .geometry import ShapeSpec
from .meshing import export_obj
from .pipeline import ConfigError, RunConfig


def _load_config(args) -> RunConfig:
    config = pipeline.load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        config.dataset.seed = args.seed
        config.vae.seed = args.seed
        config.flow.seed = args.seed
        config.eval.seed = args.seed
    return config


def _add_common(parser):
    parser.add_argument("--config", help="path to a RunConfig JSON document")
    parser.add_argument("--seed", type=int, help="override all stage seeds")
    parser.add_argument("--out", help="override the output directory")


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    data_dir = args.out or config.paths.data_dir
    manifest = pipeline.gen_dataset(config, data_dir=data_dir)
    print(f"wrote {manifest['num_entries']} entries to {data_dir} "
          f"(mean duplicate fraction "
          f"{manifest['mean_duplicate_fraction']:.4f})")
    return 0


def cmd_verify_data(args) -> int:
    config = _load_config(args)
    data_dir = args.data or config.paths.data_dir
    problems = pipeline.verify_dataset(data_dir)
    if problems:
        for p in problems:
            print(f"FAIL {p}")
        return 1
    manifest = pipeline.load_manifest(data_dir)
    print(f"OK {manifest['num_entries']} entries pass all invariants")
    return 0


def cmd_train_vae(args) -> int:
    config = _load_config(args)
    ckpt = pipeline.train_vae(config,
                              data_dir=args.data,
                              out_dir=args.out,
                              resume=args.resume)
    print(f"vae checkpoint: {ckpt}")
    return 0


def cmd_train_flow(args) -> int:
    config = _load_config(args)
    if args.no_token_matching:
        config.flow.token_matching = False
    if args.t_aug_train is not None:
        config.flow.t_aug_train = args.t_aug_train
    ckpt = pipeline.train_flow(config,
                               data_dir=args.data,
                               vae_ckpt=args.vae,
                               out_dir=args.out,
                               resume=args.resume)
    print(f"flow checkpoint: {ckpt}")
    return 0


def _load_condition(path_or_none, length: int) -> np.ndarray:
    if path_or_none is None:
        return np.zeros(length)
    with open(path_or_none) as f:
        data = json.load(f)
    if isinstance(data, dict):  # a ShapeSpec: derive its detail parameters
        from .geometry import condition_vector
        return condition_vector(ShapeSpec.from_json_dict(data),
                                max_terms=length // 5)
    return np.asarray(data, dtype=np.float64)


def cmd_refine(args) -> int:
    config = _load_config(args)
    ckpt_dir = Path(config.paths.checkpoint_dir)
    vae = pipeline.load_vae_bundle(args.vae or ckpt_dir / "vae.ckpt")
    flow = pipeline.load_flow_bundle(args.flow or ckpt_dir / "flow.ckpt")

    overrides = {}
    if args.steps is not None:
        overrides["num_steps"] = args.steps
    if args.cfg_scale is not None:
        overrides["cfg_scale"] = args.cfg_scale
    if args.t_aug is not None:
        overrides["t_aug_infer"] = args.t_aug
    use_noise_aug = args.noise_aug == "on"

    condition = _load_condition(args.condition, flow.cond_param_len)
    truth = ShapeSpec.load(args.truth) if args.truth else None
    seed = args.seed if args.seed is not None else config.eval.seed

    result = pipeline.refine(
        args.input, condition, vae, flow,
        eval_config=config.eval, seed=seed,
        hyper_overrides=overrides or None,
        use_noise_aug=use_noise_aug,
        record_trajectory=args.dump_trajectory is not None,
        truth_spec=truth)

    out_dir = Path(args.out or config.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pipeline.write_resolved_config(config, out_dir)
    mesh_path = out_dir / "refined.obj"
    export_obj(result.mesh, mesh_path)
    print(f"refined mesh: {mesh_path} "
          f"({len(result.mesh.vertices)} vertices, "
          f"{len(result.mesh.triangles)} triangles)")

    if args.dump_trajectory is not None:
        from .flow import path_straightness
        norms = [float(np.linalg.norm(b - a))
                 for a, b in zip(result.states, result.states[1:])]
        payload = {"step_norms": norms,
                   "straightness": path_straightness(result.states)}
        with open(args.dump_trajectory, "w") as f:
            json.dump(payload, f, indent=2)
        print(f"trajectory diagnostics: {args.dump_trajectory}")

    if result.metrics is not None:
        metrics_path = out_dir / "refine_metrics.csv"
        with open(metrics_path, "w") as f:
            keys = sorted(result.metrics.keys())
            f.write(",".join(["shape_id"] + keys) + "\n")
            f.write(",".join(["0"] + [f"{result.metrics[k]:.8f}"
                                      for k in keys]) + "\n")
        print(f"metrics: {metrics_path}")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    summary = pipeline.evaluate(config,
                                data_dir=args.data,
                                vae_ckpt=args.vae,
                                flow_ckpt=args.flow,
                                out_dir=args.out)
    print(f"refined beats coarse on {summary['wins']}/"
          f"{summary['num_shapes']} held-out shapes "
          f"(mean improvement {100 * summary['mean_improvement']:.1f}%)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shapeflow",
        description="coarse-to-fine 3D shape refinement via latent flows")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a coarse/fine pair dataset")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("verify-data", help="check dataset invariants")
    _add_common(p)
    p.add_argument("--data", help="dataset directory")
    p.set_defaults(fn=cmd_verify_data)

    p = sub.add_parser("train-vae", help="train the shape autoencoder")
    _add_common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train_vae)

    p = sub.add_parser("train-flow", help="train the latent velocity network")
    _add_common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--vae", help="vae checkpoint path")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--no-token-matching", action="store_true",
                   help="ablation: pair coarse anchors independently")
    p.add_argument("--t-aug-train", type=int,
                   help="override the training noise-augmentation index")
    p.set_defaults(fn=cmd_train_flow)

    p = sub.add_parser("refine", help="refine a coarse shape into a mesh")
    _add_common(p)
    p.add_argument("--input", required=True,
                   help="coarse input: spec .json, mesh .obj, or cloud .npy")
    p.add_argument("--condition",
                   help="condition: JSON float list or a fine-spec .json")
    p.add_argument("--truth", help="ground-truth spec .json for metrics")
    p.add_argument("--vae", help="vae checkpoint path")
    p.add_argument("--flow", help="flow checkpoint path")
    p.add_argument("--steps", type=int, help="Euler steps")
    p.add_argument("--cfg-scale", type=float, help="guidance scale")
    p.add_argument("--noise-aug", choices=("on", "off"), default="off",
                   help="noise-augment the coarse latent before sampling")
    p.add_argument("--t-aug", type=int,
                   help="noise-augmentation index used when --noise-aug on")
    p.add_argument("--dump-trajectory",
                   help="write per-step velocity norms to this JSON file")
    p.set_defaults(fn=cmd_refine)

    p = sub.add_parser("eval", help="evaluate refinement on the held-out split")
    _add_common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--vae", help="vae checkpoint path")
    p.add_argument("--flow", help="flow checkpoint path")
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
