"""Command-line entry point: ``stgrasp {gen-data,train,eval,plan,heatmap,pipeline}``.

Settings come from an optional JSON ``--config`` file whose sections are
``dataset``, ``train``, ``crop`` and ``eval``; explicit flags override it.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dataset import DatasetConfig, DatasetError, generate_dataset, load_manifest, load_split, read_sample
from .evaluate import (EvalSetup, SuccessStats, clutter_stats, export_heatmap, isolated_object_set,
                       run_isolated, write_results_json, write_summary_csv)
from .net import load_network
from .policy import POLICY_NAMES, CropSamplerConfig, NoValidCrop, Policy, PolicyKind, score_scene, \
    select_argmax, select_cropped
from .scene import random_template
from .teacher import AnalyticTeacher
from .train import DESK_CONFIG, ConfigurationError, TrainConfig, TrainingDiverged, train

log = logging.getLogger("stgrasp")

EXIT_OK, EXIT_INTERNAL, EXIT_BAD_INPUT, EXIT_DIVERGED, EXIT_NO_CROP = 0, 1, 2, 3, 4
DEFAULT_SEED = 7
# wide preset keeps a 0.65 x 0.38 table aspect at a size divisible by the student stride
WORKSPACES = {"desk": None, "wide": (0.34, 0.20)}
STUDENT_STRIDE = 4


class BadInput(Exception):
    """A missing path or invalid setting; maps to exit code 2."""


class AllCropsDeclined(Exception):
    """Every clutter attempt of every trial was a declined crop; maps to exit code 4."""


# ---------------------------------------------------------------- configuration

EVAL_DEFAULTS = {"trials": 5, "objects": 15, "clutter_objects": 5, "object_seed": 0}


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise BadInput(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise BadInput(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise BadInput(f"config file {p} must hold a JSON object")
    known = {"dataset": set(DatasetConfig.__dataclass_fields__), "train": set(TrainConfig.__dataclass_fields__),
             "crop": set(CropSamplerConfig.__dataclass_fields__), "eval": set(EVAL_DEFAULTS)}
    unknown = set(cfg) - set(known)
    if unknown:
        raise BadInput(f"unknown config sections: {sorted(unknown)}")
    for section, values in cfg.items():
        if not isinstance(values, dict):
            raise BadInput(f"config section {section!r} must be a JSON object")
        if set(values) - known[section]:
            raise BadInput(f"config section {section!r} has unknown keys: {sorted(set(values) - known[section])}")
    return cfg


def _override(base: dict, **flags) -> dict:
    out = dict(base)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _train_config(cfg: dict, args) -> TrainConfig:
    merged = _override({**DESK_CONFIG.to_dict(), **cfg.get("train", {})}, seed=args.seed,
                       max_steps=getattr(args, "steps", None), learning_rate=getattr(args, "lr", None),
                       batch_size=getattr(args, "batch_size", None))
    return TrainConfig.from_dict(merged)


def _crop_config(cfg: dict, args) -> CropSamplerConfig:
    merged = _override(cfg.get("crop", {}), crop_size=getattr(args, "crop_size", None),
                       score_threshold=getattr(args, "crop_threshold", None))
    return CropSamplerConfig(**merged)


def _dataset_config(cfg: dict, args) -> DatasetConfig:
    merged = _override(cfg.get("dataset", {}), seed=args.seed, n_opaque=getattr(args, "n_opaque", None),
                       n_transparent=getattr(args, "n_transparent", None),
                       n_specular=getattr(args, "n_specular", None), n_validation=getattr(args, "n_val", None))
    size = WORKSPACES[getattr(args, "workspace", None) or "desk"]
    if size is not None:
        merged["size_x"], merged["size_y"] = size
    if "lux_range" in merged:
        merged["lux_range"] = tuple(merged["lux_range"])
    return DatasetConfig(**merged)


def _eval_config(cfg: dict, args) -> dict:
    return _override({**EVAL_DEFAULTS, **cfg.get("eval", {})}, trials=getattr(args, "trials", None),
                     objects=getattr(args, "objects", None))


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise BadInput(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------- policies

def _load_student(path, channels: int):
    params, _ = load_network(_existing(path, "student checkpoint"))
    if params.input_channels != channels:
        raise BadInput(f"{path} holds a {params.input_channels}-channel network, expected {channels}")
    return params


def build_policies(names, rgb_ckpt=None, rgbd_ckpt=None) -> dict[str, Policy]:
    teacher = AnalyticTeacher(grid_stride=STUDENT_STRIDE)
    rgb = _load_student(rgb_ckpt, 3) if rgb_ckpt and {"rgb-st", "rgbd-m"} & set(names) else None
    rgbd = _load_student(rgbd_ckpt, 4) if rgbd_ckpt and "rgbd-st" in names else None
    out = {}
    for name in names:
        kind = POLICY_NAMES[name]
        if kind in (PolicyKind.RGB_STUDENT, PolicyKind.LATE_FUSION) and rgb is None:
            raise BadInput(f"policy {name} needs --rgb-student")
        if kind == PolicyKind.RGBD_STUDENT and rgbd is None:
            raise BadInput(f"policy {name} needs --rgbd-student")
        student = rgbd if kind == PolicyKind.RGBD_STUDENT else rgb
        out[name] = Policy(kind, teacher=teacher if kind in (PolicyKind.DEPTH_ONLY, PolicyKind.LATE_FUSION)
                           else None, student=student if kind != PolicyKind.DEPTH_ONLY else None)
    return out


def _policy_names(arg) -> list[str]:
    return list(POLICY_NAMES) if arg in (None, "all") else [arg]


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args, cfg) -> int:
    dcfg = _dataset_config(cfg, args)
    try:
        manifest = generate_dataset(dcfg, args.out, force=args.force)
    except DatasetError as exc:
        raise BadInput(str(exc)) from exc
    n = sum(len(v) for v in manifest["splits"].values())
    print(f"wrote {n} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    data = _existing(args.data, "dataset")
    try:
        load_manifest(data)
    except (FileNotFoundError, DatasetError) as exc:
        raise BadInput(str(exc)) from exc
    tcfg = _train_config(cfg, args)
    out = Path(args.out)
    params, report = train(tcfg, load_split(data, "train"), args.modality,
                           validation=load_split(data, "val") or None, out_dir=out)
    final = report.val_loss[-1][1] if report.val_loss else float("nan")
    print(f"trained {args.modality} student for {report.steps} steps; "
          f"final validation loss {final:.4f}; checkpoint {report.checkpoint or '(none)'}")
    return EXIT_OK


def _evaluate(policies: dict[str, Policy], ecfg: dict, crop: CropSamplerConfig, crop_modes, seed: int,
              out: Path, protocols) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    setup = EvalSetup()
    objects = isolated_object_set(ecfg["object_seed"], ecfg["objects"])
    rng = np.random.default_rng(ecfg["object_seed"] + 1)
    clutter_templates = [random_template(rng) for _ in range(ecfg["clutter_objects"])]
    results: dict = {"seed": seed, "isolated": {}, "clutter": {}}
    if "isolated" in protocols:
        table: dict[str, SuccessStats] = {}
        for name, pol in policies.items():
            table[name] = run_isolated(pol, objects, ecfg["trials"], seed, setup)
            results["isolated"][name] = table[name].to_dict()
            log.info("isolated %s: %s", name, table[name].to_dict())
        write_summary_csv(out / "isolated_summary.csv", table)
    if "clutter" in protocols:
        declined_everywhere = True
        for mode in crop_modes:
            table = {}
            results["clutter"][mode] = {}
            for name, pol in policies.items():
                stats, records = clutter_stats(pol, clutter_templates, ecfg["trials"], seed,
                                               crop if mode == "crop" else None, setup)
                table[name] = stats
                results["clutter"][mode][name] = {"stats": stats.to_dict(), "trials": records}
                declined_everywhere &= all(all(a["candidate"] is None for a in r["attempts"]) for r in records)
            write_summary_csv(out / f"clutter_{mode}_summary.csv", table)
        if declined_everywhere and "crop" in crop_modes:
            write_results_json(out / "results.json", results)
            raise AllCropsDeclined("every clutter attempt in every trial found no valid crop")
    write_results_json(out / "results.json", results)
    return results


def _crop_modes(arg) -> list[str]:
    return {"on": ["crop"], "off": ["nocrop"], "both": ["nocrop", "crop"]}[arg]


def cmd_eval(args, cfg) -> int:
    policies = build_policies(_policy_names(args.policy), args.rgb_student, args.rgbd_student)
    protocols = ["isolated", "clutter"] if args.protocol == "both" else [args.protocol]
    _evaluate(policies, _eval_config(cfg, args), _crop_config(cfg, args), _crop_modes(args.crop_sampling),
              args.seed, Path(args.out), protocols)
    print(f"wrote evaluation reports to {args.out}")
    return EXIT_OK


def _scene_sample(path):
    folder = _existing(path, "scene directory")
    if not (folder / "scene.json").is_file():
        raise BadInput(f"{folder} is not a scene directory (no scene.json)")
    return read_sample(folder)


def cmd_plan(args, cfg) -> int:
    sample = _scene_sample(args.scene)
    policy = build_policies([args.policy], args.rgb_student, args.rgbd_student)[args.policy]
    vol = score_scene(policy, sample)
    if args.crop_sampling == "on":
        q = select_cropped(vol, _crop_config(cfg, args), sample.resolution, seed=args.seed)
    else:
        q = select_argmax(vol)
    if isinstance(q, NoValidCrop):
        print(json.dumps({"grasp": None, "reason": "NoValidCrop", "attempts": q.attempts}))
        return EXIT_OK
    cx, cy = q.center_px
    plan = {"grasp": q.to_dict(), "score": float(vol.scores[q.theta_bin, q.y, q.x]),
            "center_m": [cx * sample.resolution, cy * sample.resolution], "theta_rad": q.theta}
    print(json.dumps(plan, sort_keys=True))
    return EXIT_OK


def _theta(arg: str):
    if arg == "max":
        return "max"
    try:
        k = int(arg)
    except ValueError as exc:
        raise BadInput(f"--theta must be 0..15 or 'max', got {arg!r}") from exc
    if not 0 <= k < 16:
        raise BadInput(f"--theta must be 0..15 or 'max', got {k}")
    return k


def cmd_heatmap(args, cfg) -> int:
    sample = _scene_sample(args.scene)
    policy = build_policies([args.policy], args.rgb_student, args.rgbd_student)[args.policy]
    export_heatmap(score_scene(policy, sample), _theta(args.theta), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_pipeline(args, cfg) -> int:
    out = Path(args.out)
    data = out / "data"
    dcfg = _dataset_config(cfg, args)
    generate_dataset(dcfg, data, force=True)
    train_set, val_set = load_split(data, "train"), load_split(data, "val")
    tcfg = _train_config(cfg, args)
    checkpoints = {}
    for modality in ("rgb", "rgbd"):
        _, report = train(tcfg, train_set, modality, validation=val_set or None,
                          out_dir=out / "models" / f"{modality}-st")
        checkpoints[modality] = report.checkpoint
        log.info("trained %s student: %d steps", modality, report.steps)
    policies = build_policies(list(POLICY_NAMES), checkpoints["rgb"], checkpoints["rgbd"])
    ecfg = _eval_config(cfg, args)
    _evaluate(policies, ecfg, _crop_config(cfg, args), ["nocrop", "crop"], args.seed, out / "eval",
              ["isolated", "clutter"])
    heat = out / "heatmaps"
    heat.mkdir(parents=True, exist_ok=True)
    for scene_id in [e["id"] for e in load_manifest(data)["splits"]["val"][:2]]:
        sample = read_sample(data / "scenes" / scene_id)
        for name, pol in policies.items():
            vol = score_scene(pol, sample)
            export_heatmap(vol, "max", heat / f"{scene_id}_{name}_max.pgm")
            export_heatmap(vol, 0, heat / f"{scene_id}_{name}_theta00.pgm")
    print(f"pipeline finished; reports in {out / 'eval'}, heatmaps in {heat}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with dataset/train/crop/eval sections")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"master seed (default {DEFAULT_SEED})")
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (default: library default)")
    p.add_argument("-v", "--verbose", action="store_true")


def _policy_flags(p: argparse.ArgumentParser, allow_all: bool) -> None:
    choices = list(POLICY_NAMES) + (["all"] if allow_all else [])
    p.add_argument("--policy", choices=choices, default="all" if allow_all else "depth")
    p.add_argument("--rgb-student", help="checkpoint of the RGB student (rgb-st, rgbd-m)")
    p.add_argument("--rgbd-student", help="checkpoint of the RGB-D student (rgbd-st)")


def _crop_flags(p: argparse.ArgumentParser, modes) -> None:
    p.add_argument("--crop-sampling", choices=modes, default=modes[0])
    p.add_argument("--crop-size", type=float, help="crop side in meters")
    p.add_argument("--crop-threshold", type=float, help="minimum best score inside an accepted crop")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, help="maximum training steps")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--batch-size", type=int)


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-opaque", type=int)
    p.add_argument("--n-transparent", type=int)
    p.add_argument("--n-specular", type=int)
    p.add_argument("--n-val", type=int, help="opaque validation scenes")
    p.add_argument("--workspace", choices=sorted(WORKSPACES), default="desk",
                   help="desk: 0.24 m square; wide: 0.34 x 0.20 m table")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stgrasp", description="Grasp planning by depth-to-RGB supervision transfer.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a paired RGB-D dataset")
    _common(p)
    _data_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="distil the depth teacher into a student")
    _common(p)
    _train_flags(p)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--modality", choices=["rgb", "rgbd"], default="rgb")
    p.add_argument("--out", required=True, help="directory for checkpoints and the loss log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="isolated and clutter grasping evaluation")
    _common(p)
    _policy_flags(p, allow_all=True)
    _crop_flags(p, ["both", "on", "off"])
    p.add_argument("--protocol", choices=["isolated", "clutter", "both"], default="both")
    p.add_argument("--trials", type=int)
    p.add_argument("--objects", type=int, help="object shapes in the isolated set")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plan", help="print the chosen grasp for one stored scene")
    _common(p)
    _policy_flags(p, allow_all=False)
    _crop_flags(p, ["off", "on"])
    p.add_argument("--scene", required=True, help="scene directory (contains scene.json)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("heatmap", help="write a grasp-probability heatmap as PGM")
    _common(p)
    _policy_flags(p, allow_all=False)
    p.add_argument("--scene", required=True)
    p.add_argument("--theta", default="max", help="theta bin 0..15 or 'max'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("pipeline", help="gen-data, train both students, evaluate, export heatmaps")
    _common(p)
    _data_flags(p)
    _train_flags(p)
    p.add_argument("--trials", type=int)
    p.add_argument("--objects", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=args.threads)
    else:
        limiter = nullcontext()
    try:
        with limiter:
            cfg = _load_config(args.config)
            return args.func(args, cfg)
    except (BadInput, ConfigurationError, DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except AllCropsDeclined as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_CROP
    except ValueError as exc:
        print(f"error: invalid setting: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        # config sections become dataclass kwargs, so an unknown key surfaces as a TypeError
        if isinstance(exc, TypeError) and "unexpected keyword" in str(exc):
            print(f"error: invalid setting: {exc}", file=sys.stderr)
            return EXIT_BAD_INPUT
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
