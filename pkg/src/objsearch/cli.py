"""Command-line entry point: scene generation, training, evaluation, exports.

Subcommands: gen, train-detector, train-policy, eval, entropy-map. Every
seeded subcommand is reproducible: identical flags give identical primary
outputs (single-worker mode). Output paths that are relative are resolved
against $OBJSEARCH_OUT_DIR when it is set.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Failures print one
`error: ...` line to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import detector as detector_mod
from . import evaluation as eval_mod
from . import policy as policy_mod
from . import trainer as trainer_mod
from .detector import DetectorConfig
from .nn import NonFiniteError
from .reward import make_scheme
from .scene import SceneError, generate_synthetic, load_scene, save_scene
from .trainer import TrainConfig, TrainingDiverged

OUT_DIR_ENV = "OBJSEARCH_OUT_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 instead of argparse's 2
        raise UsageError(message)


def _out_path(raw: str) -> Path:
    path = Path(raw)
    base = os.environ.get(OUT_DIR_ENV)
    if base and not path.is_absolute():
        path = Path(base) / path
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise UsageError(f"--grid expects WIDTHxHEIGHT (e.g. 5x5), got {text!r}") from None


def _load_scenes(paths: list[str]) -> list[tuple[str, object]]:
    scenes = []
    for p in paths:
        scenes.append((Path(p).stem, load_scene(p)))
    ids = [sid for sid, _ in scenes]
    if len(set(ids)) != len(ids):
        raise UsageError(f"scene file stems must be unique, got {ids}")
    return scenes


def build_parser() -> _Parser:
    parser = _Parser(prog="objsearch", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic scene file",
                       description="Generate a deterministic synthetic scene and write it as JSON.")
    p.add_argument("--seed", type=int, required=True, help="generation seed (controls everything)")
    p.add_argument("--grid", default="5x5", help="grid size as WIDTHxHEIGHT (cells), default 5x5")
    p.add_argument("--objects", type=int, default=4, help="number of objects to place, default 4")
    p.add_argument("--feature-dim", type=int, default=32,
                   help="view/target feature dimensionality, default 32")
    p.add_argument("--blocked", type=int, default=0, help="impassable cells to add, default 0")
    p.add_argument("--out", required=True, help="output scene JSON path")

    p = sub.add_parser("train-detector", help="train the recognition network",
                       description="Train the target-conditioned detector on one or more scenes.")
    p.add_argument("--scene", action="append", required=True, help="scene JSON (repeatable)")
    p.add_argument("--epochs", type=int, default=400, help="training epochs, default 400")
    p.add_argument("--lr", type=float, default=0.3, help="SGD learning rate, default 0.3")
    p.add_argument("--batch-size", type=int, default=32, help="minibatch size, default 32")
    p.add_argument("--box-weight", type=float, default=0.5,
                   help="weight of the box regression loss term, default 0.5")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="presence probability threshold, default 0.5")
    p.add_argument("--embed-dim", type=int, default=16, help="embedding width, default 16")
    p.add_argument("--seed", type=int, default=0, help="init/shuffle seed, default 0")
    p.add_argument("--out", required=True, help="output checkpoint (.npz)")
    p.add_argument("--curve", default=None, help="optional CSV for the per-epoch loss curve")

    p = sub.add_parser("train-policy", help="train the navigation policy",
                       description="Actor-critic training over all (scene, object) pairs.")
    p.add_argument("--scene", action="append", required=True, help="scene JSON (repeatable)")
    p.add_argument("--objects", default=None,
                   help="comma-separated object ids to train on (default: all)")
    p.add_argument("--detector", default=None, help="detector checkpoint feeding the policy")
    p.add_argument("--truth-detections", action="store_true",
                   help="use ground-truth boxes instead of a detector")
    p.add_argument("--reward", choices=["sparse", "cumulative", "record"], default="record",
                   help="reward scheme, default record")
    p.add_argument("--gamma", type=float, default=None, help="discount factor, default 0.99")
    p.add_argument("--beta", type=float, default=None,
                   help="entropy weight (exploration rate), default 0.01")
    p.add_argument("--lr", type=float, default=None, help="SGD learning rate, default 7e-4")
    p.add_argument("--n-step", type=int, default=None, help="bootstrap horizon, default 5")
    p.add_argument("--episodes", type=int, default=None, help="episode budget, default 30000")
    p.add_argument("--max-steps", type=int, default=None,
                   help="per-episode step cap during training, default 300")
    p.add_argument("--workers", type=int, default=None,
                   help="worker threads, default 1 (single worker is bit-deterministic)")
    p.add_argument("--optimizer", choices=["sgd", "rmsprop"], default=None,
                   help="update rule for the shared parameters, default sgd")
    p.add_argument("--seed", type=int, default=None, help="training seed, default 0")
    p.add_argument("--config", default=None, help="JSON file with training-config fields")
    p.add_argument("--checkpoint-every", type=int, default=None,
                   help="write a checkpoint every K episodes, default off")
    p.add_argument("--checkpoint-dir", default=None, help="directory for periodic checkpoints")
    p.add_argument("--out", required=True, help="output policy checkpoint (.npz)")
    p.add_argument("--curves", default=None, help="optional CSV for per-episode training curves")

    p = sub.add_parser("eval", help="evaluate a policy or baseline",
                       description="Seeded evaluation episodes; reports success rate and length.")
    p.add_argument("--scene", required=True, help="scene JSON")
    p.add_argument("--objects", default=None,
                   help="comma-separated object ids (default: all in the scene)")
    p.add_argument("--policy", default=None, help="policy checkpoint (omit with --baseline)")
    p.add_argument("--detector", default=None, help="detector checkpoint")
    p.add_argument("--truth-detections", action="store_true",
                   help="feed the policy ground-truth detections")
    p.add_argument("--baseline", choices=["random", "oracle"], default=None,
                   help="evaluate a baseline instead of a policy checkpoint")
    p.add_argument("--episodes", type=int, default=10, help="episodes per object, default 10")
    p.add_argument("--max-steps", type=int, default=5000, help="step limit per episode, default 5000")
    p.add_argument("--argmax", action="store_true", help="greedy action selection during eval")
    p.add_argument("--seed", type=int, default=0, help="evaluation seed, default 0")
    p.add_argument("--report", required=True, help="output report CSV")
    p.add_argument("--trace-svg", default=None,
                   help="optional SVG path for the first episode's trajectory")

    p = sub.add_parser("entropy-map", help="export the per-cell policy entropy map",
                       description="Mean policy entropy per 2-d cell, exported as CSV.")
    p.add_argument("--scene", required=True, help="scene JSON")
    p.add_argument("--object", required=True, help="object id to condition on")
    p.add_argument("--policy", required=True, help="policy checkpoint")
    p.add_argument("--detector", default=None, help="detector checkpoint")
    p.add_argument("--truth-detections", action="store_true",
                   help="feed the policy ground-truth detections")
    p.add_argument("--out", required=True, help="output CSV path")

    return parser


def _cmd_gen(args) -> int:
    if args.objects < 1:
        raise UsageError("--objects must be >= 1")
    if args.feature_dim < 8:
        raise UsageError("--feature-dim must be >= 8")
    grid = _parse_grid(args.grid)
    if grid[0] < 2 or grid[1] < 2:
        raise UsageError("--grid must be at least 2x2")
    scene = generate_synthetic(args.seed, grid, args.objects, args.feature_dim,
                               n_blocked=args.blocked)
    save_scene(scene, _out_path(args.out))
    print(f"wrote scene with {len(scene.view_features)} states to {args.out}")
    return 0


def _cmd_train_detector(args) -> int:
    scenes = [scene for _, scene in _load_scenes(args.scene)]
    config = DetectorConfig(
        feature_dim=scenes[0].feature_dim,
        embed_dim=args.embed_dim,
        box_weight=args.box_weight,
        lr=args.lr,
        threshold=args.threshold,
        batch_size=args.batch_size,
    )
    model, curve = detector_mod.train(scenes, config, seed=args.seed, epochs=args.epochs)
    detector_mod.save_detector(model, _out_path(args.out))
    if args.curve:
        with open(_out_path(args.curve), "w", encoding="utf-8") as fh:
            fh.write("epoch,loss\n")
            for i, v in enumerate(curve):
                fh.write(f"{i},{v!r}\n")
    print(f"trained detector over {args.epochs} epochs; "
          f"loss {curve[0]:.4f} -> {curve[-1]:.4f}; wrote {args.out}")
    return 0


def _train_config_from_args(args) -> TrainConfig:
    fields: dict = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            fields.update(json.load(fh))
    overrides = {
        "gamma": args.gamma,
        "beta": args.beta,
        "lr": args.lr,
        "n_step": args.n_step,
        "episodes": args.episodes,
        "max_steps_per_episode": args.max_steps,
        "workers": args.workers,
        "optimizer": args.optimizer,
        "seed": args.seed,
        "checkpoint_every": args.checkpoint_every,
        "checkpoint_dir": args.checkpoint_dir,
    }
    fields.update({k: v for k, v in overrides.items() if v is not None})
    if args.truth_detections:
        fields["use_truth_detections"] = True
    try:
        return TrainConfig(**fields)
    except TypeError as exc:
        raise UsageError(f"bad training config: {exc}") from exc


def _cmd_train_policy(args) -> int:
    scenes = _load_scenes(args.scene)
    config = _train_config_from_args(args)
    detector = detector_mod.load_detector(args.detector) if args.detector else None
    if detector is None and not config.use_truth_detections:
        raise UsageError("provide --detector or pass --truth-detections")
    object_ids = args.objects.split(",") if args.objects else None
    scheme = make_scheme(args.reward, gamma=config.gamma)
    model, curves = trainer_mod.train(scenes, object_ids, detector, config, scheme)
    policy_mod.save_policy(model, _out_path(args.out))
    if args.curves:
        trainer_mod.write_curves_csv(curves, _out_path(args.curves))
    tail = curves[-50:]
    print(f"trained policy for {len(curves)} episodes; "
          f"tail mean length {np.mean([c.length for c in tail]):.1f}, "
          f"tail mean entropy {np.mean([c.mean_entropy for c in tail]):.3f}; wrote {args.out}")
    return 0


def _make_actor(args, model, scene_id):
    if args.baseline == "random":
        return eval_mod.RandomWalkActor()
    if args.baseline == "oracle":
        return eval_mod.ShortestPathActor()
    detector = detector_mod.load_detector(args.detector) if args.detector else None
    return eval_mod.PolicyActor(
        model, scene_id,
        detector=detector,
        use_truth=args.truth_detections,
        argmax=args.argmax,
    )


def _cmd_eval(args) -> int:
    scene_id = Path(args.scene).stem
    scene = load_scene(args.scene)
    model = None
    if args.baseline is None:
        if not args.policy:
            raise UsageError("provide --policy or --baseline")
        model = policy_mod.load_policy(args.policy)
    actor = _make_actor(args, model, scene_id)
    object_ids = args.objects.split(",") if args.objects else [o.id for o in scene.objects]
    reports = []
    for oid in object_ids:
        reports.append(eval_mod.evaluate(actor, scene, oid,
                                         n_episodes=args.episodes,
                                         max_steps=args.max_steps,
                                         seed=args.seed))
    report = eval_mod.merge_reports(reports)
    eval_mod.write_report_csv(report, _out_path(args.report))
    if args.trace_svg and report.traces:
        eval_mod.write_trace_svg(scene, report.traces[0], _out_path(args.trace_svg),
                                 object_ids=object_ids)
    avg = report.avg_length
    print(f"evaluated {report.n_episodes} episodes: success rate {report.success_rate:.3f}, "
          f"avg length {'-' if avg is None else f'{avg:.1f}'}; wrote {args.report}")
    return 0


def _cmd_entropy_map(args) -> int:
    scene_id = Path(args.scene).stem
    scene = load_scene(args.scene)
    model = policy_mod.load_policy(args.policy)
    detector = detector_mod.load_detector(args.detector) if args.detector else None
    actor = eval_mod.PolicyActor(model, scene_id, detector=detector,
                                 use_truth=args.truth_detections)
    matrix = eval_mod.entropy_map(actor, scene, args.object)
    eval_mod.write_entropy_map_csv(matrix, _out_path(args.out))
    print(f"wrote entropy map (mean {np.nanmean(matrix):.4f}) to {args.out}")
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "train-detector": _cmd_train_detector,
    "train-policy": _cmd_train_policy,
    "eval": _cmd_eval,
    "entropy-map": _cmd_entropy_map,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 1
    except (SceneError, NonFiniteError, TrainingDiverged, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
