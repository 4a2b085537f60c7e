"""Command-line entry point: ``poseaug <command> [options]``.

Every command reads an optional JSON config file (``--config`` or the
``POSEAUG_CONFIG`` environment variable) whose keys mirror the
``TrainConfig`` / ``SyntheticConfig`` field names, either flat or grouped
under ``"train"`` and ``"synthetic"``.  Command-line flags override file values.

Exit status: 0 success, 1 usage or configuration error, 2 data error,
3 training abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import typing
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DatasetError, PoseAugError, TrainingAbort
from ..evaluation import evaluate, export_rt_distribution
from ..augmentor import augment_numpy
from ..estimator import estimate
from ..numerics import load_arrays
from ..skeleton import SkeletonTopology
from ..training import TrainConfig, Trainer, load_estimator, pretrain, save_estimator, seed_streams
from .dataset import PoseDataset, load_dataset, save_dataset
from .synthetic import SyntheticConfig, generate_synthetic

log = logging.getLogger("poseaug")

EXIT_USAGE, EXIT_DATA, EXIT_ABORT = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config plumbing -------------------------------------------------------------------

_SKIP_FLAGS = {"bone_lengths", "angle_ranges"}  # nested tables: config file only


def _add_dataclass_flags(parser, cls):
    hints = typing.get_type_hints(cls)
    group = parser.add_argument_group(f"{cls.__name__} overrides")
    for f in dataclasses.fields(cls):
        if f.name in _SKIP_FLAGS:
            continue
        flag = "--" + f.name.replace("_", "-")
        hint = hints[f.name]
        default = f.default if f.default is not dataclasses.MISSING else None
        if hint is bool:
            group.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif f.name == "ops":
            group.add_argument(flag, dest=f.name, nargs="*", choices=("ba", "bl", "rt"), default=None,
                               help="augmentation operations to enable (none for plain training)")
        elif f.name == "t0":
            group.add_argument(flag, dest=f.name, nargs="+", default=None, metavar="V",
                               help="translation anchor x y z in mm, or 'none' for the source root")
        elif isinstance(default, tuple) or "tuple" in str(hint):
            group.add_argument(flag, dest=f.name, nargs="+", type=float, default=None, metavar="V")
        elif hint in (int, float, str):
            group.add_argument(flag, dest=f.name, type=hint, default=None)


def _overrides(args, cls):
    out = {}
    for f in dataclasses.fields(cls):
        v = getattr(args, f.name, None)
        if v is None:
            continue
        if f.name == "t0":
            if len(v) == 1 and v[0].lower() == "none":
                v = None
            else:
                try:
                    v = tuple(float(x) for x in v)
                except ValueError:
                    raise ConfigError("--t0 takes three numbers or 'none'") from None
        out[f.name] = v
    return out


def _load_config_file(args):
    path = args.config or os.environ.get("POSEAUG_CONFIG")
    if not path:
        return {}, {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    train = dict(raw.pop("train", {}))
    synth = dict(raw.pop("synthetic", {}))
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    synth_keys = {f.name for f in dataclasses.fields(SyntheticConfig)}
    for k, v in raw.items():
        if k in train_keys:
            train[k] = v
        elif k in synth_keys:
            synth[k] = v
        else:
            raise ConfigError(f"{path}: unknown config key {k!r}")
    return train, synth


def _train_config(args):
    file_train, _ = _load_config_file(args)
    return TrainConfig.from_dict({**file_train, **_overrides(args, TrainConfig)})


def _synth_config(args):
    _, file_synth = _load_config_file(args)
    return SyntheticConfig.from_dict({**file_synth, **_overrides(args, SyntheticConfig)})


def _existing(path, what):
    if path is None or not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _topology(args):
    if getattr(args, "topology", None):
        return SkeletonTopology.from_json(_existing(args.topology, "topology file"))
    return SkeletonTopology.default()


def _load(args, path, what="dataset"):
    return load_dataset(_existing(path, what), _topology(args))



# -- commands ---------------------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _synth_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pools = generate_synthetic(cfg, seed=args.seed, topology=_topology(args))
    for name, ds in pools.items():
        save_dataset(out / f"{name}.jsonl", ds)
        print(f"{name}: {len(ds)} records -> {out / f'{name}.jsonl'}")
    return 0


def cmd_pretrain(args):
    cfg = _train_config(args)
    ds = _load(args, args.data)
    est = Trainer(ds.topology, cfg).estimator
    history = pretrain(est, ds, cfg, shuffle_rng=seed_streams(cfg.seed)["shuffle"])
    save_estimator(args.out, est, cfg, history)
    for i, loss in enumerate(history):
        print(f"pretrain epoch {i}: loss {loss:.6g}")
    print(f"estimator checkpoint -> {args.out}")
    return 0


def cmd_train(args):
    ds = _load(args, args.data)
    external = _load(args, args.extra_2d, "external 2D pool") if args.extra_2d else None
    if args.resume:
        trainer = Trainer.load(_existing(args.resume, "checkpoint"), external_2d=external)
        cfg_over = _overrides(args, TrainConfig)
        if "epochs" in cfg_over:
            trainer.config = trainer.config.replace(epochs=cfg_over["epochs"])
    else:
        trainer = Trainer(ds.topology, _train_config(args), external_2d=external)
        if args.init_estimator:
            est, _ = load_estimator(_existing(args.init_estimator, "estimator checkpoint"))
            trainer.estimator.load_state_dict(est.state_dict())
            trainer.pretrain_done = trainer.config.pretrain_epochs
    trainer.fit(ds, args.out)
    last = trainer.history[-1] if trainer.history else {}
    print(f"trained {trainer.epoch} epochs; final estimator loss {last.get('l_est', float('nan')):.6g}; "
          f"checkpoints and metrics.csv in {args.out}")
    return 0


def cmd_eval(args):
    est, _ = load_estimator(_existing(args.checkpoint, "checkpoint"))
    ds = load_dataset(_existing(args.data, "dataset"), est.topo)
    rep = evaluate(est, ds)
    if not args.per_sample:
        rep.per_sample_mpjpe = []
    text = rep.to_json(args.out)
    print(text)
    return 0


def _read_2d(path, topo):
    """Records with ``pose2d`` and ``camera`` (pose3d optional); a header line is skipped."""
    poses, cams = [], []
    for i, line in enumerate(ln for ln in Path(path).read_text().splitlines() if ln.strip()):
        d = json.loads(line)
        if "format" in d:
            continue
        try:
            p2 = np.asarray(d["pose2d"], dtype=np.float64)
            cam = np.asarray(d["camera"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"malformed record ({exc})", i) from None
        if p2.shape != (topo.joint_count, 2) or cam.shape != (4,):
            raise DatasetError("pose2d or camera has the wrong shape", i)
        if not (np.all(np.isfinite(p2)) and np.all(np.isfinite(cam))):
            raise DatasetError("non-finite values", i)
        poses.append(p2)
        cams.append(cam)
    return np.array(poses).reshape(-1, topo.joint_count, 2), np.array(cams).reshape(-1, 4)


def cmd_infer(args):
    est, _ = load_estimator(_existing(args.checkpoint, "checkpoint"))
    pose2d, cams = _read_2d(_existing(args.data, "input"), est.topo)
    pred = estimate(est, pose2d, cams) if len(pose2d) else np.zeros((0, est.topo.joint_count, 3))
    lines = [json.dumps({"pose3d_root_relative": p.tolist()}) for p in pred]
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).write_text(text)
        print(f"{len(pred)} predictions -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _trainer(args):
    path = _existing(args.checkpoint, "checkpoint")
    _, meta = load_arrays(path)
    if meta.get("kind") != "poseaug-trainer":
        raise UsageError(f"{path} is not a training checkpoint (augmentor weights are needed)")
    return Trainer.load(path)


def cmd_augment_dump(args):
    trainer = _trainer(args)
    ds = load_dataset(_existing(args.data, "dataset"), trainer.topo)
    rng = np.random.default_rng(args.seed)
    idx = rng.choice(len(ds), args.n, replace=args.n > len(ds))
    trainer.augmentor.eval()
    res = augment_numpy(trainer.augmentor, ds.pose3d[idx], ds.cams[idx], rng)
    keep = idx[res.accepted]
    out = PoseDataset(res.pose3d, res.pose2d, ds.cams[keep], trainer.topo,
                      [ds.subjects[i] for i in keep], [f"aug-{ds.sequences[i]}" for i in keep])
    save_dataset(args.out, out)
    print(f"{len(out)} augmented records ({res.rejected} rejected) -> {args.out}")
    return 0


def cmd_plot_dist(args):
    trainer = _trainer(args)
    ds = load_dataset(_existing(args.data, "dataset"), trainer.topo)
    dist = export_rt_distribution(trainer.augmentor, ds, args.n, np.random.default_rng(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dist.write_csv(out / "distribution.csv")
    dist.write_gnuplot(out / "distribution.dat")
    src, aug = dist.position_spread()
    summary = {"n_samples": args.n, "position_trace_source": src, "position_trace_augmented": aug,
               "position_trace_ratio": aug / src if src > 0 else float("inf"),
               "view_trace_source": dist.view_spread()[0], "view_trace_augmented": dist.view_spread()[1],
               "rejected": dist.rejected}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    log.info("position covariance trace: source %.4g, augmented %.4g (ratio %.3g)",
             src, aug, summary["position_trace_ratio"])
    print(json.dumps(summary, indent=2))
    return 0


# -- parser -----------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="poseaug", description="Online differentiable pose augmentation toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, train=False, synth=False):
        p.add_argument("--config", help="JSON config file (default: $POSEAUG_CONFIG)")
        p.add_argument("--topology", help="skeleton topology JSON (default: bundled 16-joint skeleton)")
        if train:
            _add_dataclass_flags(p, TrainConfig)
        if synth:
            _add_dataclass_flags(p, SyntheticConfig)

    p = sub.add_parser("gen-data", help="write synthetic source/target pose pools")
    common(p, synth=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train the estimator on original pairs only")
    common(p, train=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="estimator checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="pretrain, then jointly train augmentor, discriminators, estimator")
    common(p, train=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory (checkpoints, metrics.csv)")
    p.add_argument("--resume", help="continue from a training checkpoint")
    p.add_argument("--init-estimator", help="start from a pretrained estimator, skipping pretraining")
    p.add_argument("--extra-2d", help="dataset whose 2D poses feed the 2D discriminator as real samples")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint's estimator on a dataset (JSON report)")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="also write the report to this file")
    p.add_argument("--per-sample", action="store_true", help="include per-sample MPJPE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="lift 2D poses to root-relative 3D")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="JSON lines with pose2d and camera")
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("augment-dump", help="write N augmented pose records")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("-n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment_dump)

    p = sub.add_parser("plot-dist", help="export view-point/position distributions (CSV + gnuplot)")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("-n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_plot_dist)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:   # --help, usage errors
        return exc.code
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"poseaug {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetError as exc:
        print(f"poseaug {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingAbort as exc:
        print(f"poseaug {args.command}: training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except PoseAugError as exc:
        print(f"poseaug {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError) as exc:
        print(f"poseaug {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
