"""Command-line interface: dataset generation, training, registration,
evaluation, the feature-head ablation runner, and the ICP baseline.

Exit codes: 0 success, 1 usage/configuration, 2 data error, 3 numeric failure.
All artifacts embed the effective configuration and tool version; wall-clock
timing goes to stderr so reruns stay byte-identical.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import (
    PairConfig,
    example_basename,
    make_pair,
    read_dataset,
    read_example,
    write_example,
    write_manifest,
)
from .errors import (
    ConfigError,
    DataFormatError,
    EmptyEvaluationError,
    InsufficientCorrespondenceError,
    NumericError,
    ShapeError,
    SizeError,
)
from .geometry import PointCloud, RigidTransform, apply_transform
from .metrics import PairRecord, build_report, ccd, mae, mie
from .pipeline import IcpConfig, ModelConfig, RegistrationModel, icp, register
from .plyio import read_ply
from .training import TrainConfig, load_weights, save_weights, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

ABLATION_VARIANTS = (
    ("location encoder", "location_only"),
    ("feature encoder", "feature_only"),
    ("additive fusion", "additive"),
    ("MLP fusion", "mlp"),
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_thresholds(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected ROT_DEG,TRANS (e.g. 1,0.1)")
    return float(parts[0]), float(parts[1])


def _apply_config_file(parser: argparse.ArgumentParser, args: argparse.Namespace,
                       argv: list[str]) -> None:
    """Merge key=value lines from --config; explicit flags take precedence,
    unknown keys are rejected."""
    if not getattr(args, "config", None):
        return
    dest_to_action = {a.dest: a for a in parser._actions}
    explicit = set()
    for a in parser._actions:
        if any(opt in argv for opt in a.option_strings):
            explicit.add(a.dest)
    path = Path(args.config)
    if not path.exists():
        raise DataFormatError(f"config file not found: {path}")
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        dest = key.replace("-", "_")
        action = dest_to_action.get(dest)
        if action is None or dest in ("help", "config"):
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        if dest in explicit:
            continue
        convert = action.type or str
        try:
            setattr(args, dest, convert(value))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc


def _unit_sphere_scaling(clouds):
    """Shared centering + scaling placing both clouds inside the unit sphere."""
    stacked = np.vstack([c.positions for c in clouds])
    center = stacked.mean(axis=0)
    radius = float(np.linalg.norm(stacked - center, axis=1).max())
    if radius < 1e-12:
        radius = 1.0
    scaled = [PointCloud((c.positions - center) / radius, c.normals) for c in clouds]
    return scaled, center, radius


def _unscale_transform(t: RigidTransform, center: np.ndarray, radius: float) -> RigidTransform:
    # q = r (R (p-c)/r + t') + c  =>  rotation unchanged, t = r t' + c - R c
    return RigidTransform(t.rotation,
                          radius * t.translation + center - t.rotation @ center)


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, sort_keys=True, indent=1)
        handle.write("\n")


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

_GEN_WORKER_STATE: dict = {}


def _gen_one(task) -> str:
    model_path, label, out_dir, name, config_values = task
    model = read_ply(model_path)
    config = PairConfig(**config_values)
    example = make_pair(model, config, label=label)
    write_example(out_dir, name, example)
    return name


def cmd_gen(args) -> int:
    models_dir = Path(args.models)
    if not models_dir.is_dir():
        raise DataFormatError(f"model directory not found: {models_dir}")
    ply_files = sorted(models_dir.glob("*.ply"))
    if not ply_files:
        raise DataFormatError(f"no .ply files in {models_dir}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = PairConfig(
        points_per_cloud=args.points, rotation_max_deg=args.rot_max,
        translation_range=args.trans_range, noise_sigma=args.noise_sigma,
        noise_clip=args.noise_clip, crop_fraction=args.crop_fraction,
        correspondence_max_dist=args.max_dist, regime=args.regime, seed=args.seed,
        normal_neighbors=args.normal_neighbors)
    tasks = []
    index = 0
    for path in ply_files:
        for _ in range(args.pairs_per_model):
            cfg = dataclasses.replace(base, seed=args.seed + index)
            tasks.append((str(path), path.stem, str(out_dir),
                          example_basename(index), dataclasses.asdict(cfg)))
            index += 1
    failures = []
    names = []
    started = time.perf_counter()
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            outcomes = list(pool.map(_gen_one_safe, tasks))
    else:
        outcomes = [_gen_one_safe(task) for task in tasks]
    for task, outcome in zip(tasks, outcomes):
        if outcome is None:
            names.append(task[3])
        else:
            failures.append((task[0], outcome))
            print(f"error: {task[0]}: {outcome}", file=sys.stderr)
    elapsed = time.perf_counter() - started
    if not names:
        raise DataFormatError("all model files failed to generate examples")
    labels = {task[3]: task[1] for task in tasks}
    seeds = {task[3]: task[4]["seed"] for task in tasks}
    write_manifest(out_dir, names, base, __version__, extra={
        "regime": args.regime,
        "labels": {name: labels[name] for name in names},
        "seeds": {name: seeds[name] for name in names},
    })
    print(f"generated {len(names)} examples in {elapsed:.2f}s "
          f"({len(failures)} failures)", file=sys.stderr)
    return EXIT_OK


def _gen_one_safe(task):
    try:
        _gen_one(task)
        return None
    except (DataFormatError, SizeError, ConfigError, OSError) as exc:
        return str(exc)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _split_examples(examples, val_fraction: float):
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError("val fraction must lie in [0, 1)")
    val_count = int(np.floor(val_fraction * len(examples)))
    if val_count == 0:
        return examples, []
    return examples[:-val_count], examples[-val_count:]


def _model_config_from_args(args) -> ModelConfig:
    return ModelConfig.for_dim(
        args.d, k=args.k, stacks=args.stacks, heads=args.heads, fusion=args.fusion,
        sinkhorn_iterations=args.sinkhorn_iters, match_threshold=args.threshold,
        min_matches=args.min_matches)


def cmd_train(args) -> int:
    examples, _ = read_dataset(args.data)
    train_set, val_set = _split_examples(examples, args.val_fraction)
    model = RegistrationModel(_model_config_from_args(args), seed=args.seed)
    resume = load_weights(args.resume) if args.resume else None
    if resume is not None:
        model.load_state(resume.tensors)  # fails fast on architecture mismatch
    cfg = TrainConfig(
        learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs,
        seed=args.seed, eval_every=args.eval_every,
        rot_thresh_deg=args.val_thresholds[0], trans_thresh=args.val_thresholds[1],
        target_val_rr=args.target_val_rr, target_train_rr=args.target_train_rr)
    started = time.perf_counter()
    checkpoint = train(train_set, val_set, model, cfg, log_path=args.log, resume=resume)
    elapsed = time.perf_counter() - started
    save_weights(checkpoint, args.out)
    print(f"trained {cfg.epochs} epochs in {elapsed:.1f}s; "
          f"best epoch {checkpoint.epoch} "
          f"(val_rr={checkpoint.config.get('val_rr')})", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# register / icp
# ---------------------------------------------------------------------------


def _load_model(weights_path, threshold=None, min_matches=None) -> RegistrationModel:
    checkpoint = load_weights(weights_path)
    if "model" not in checkpoint.config:
        raise DataFormatError(f"{weights_path}: checkpoint lacks a model config echo")
    config = ModelConfig.from_dict(checkpoint.config["model"])
    overrides = {}
    if threshold is not None:
        overrides["match_threshold"] = threshold
    if min_matches is not None:
        overrides["min_matches"] = min_matches
    if overrides:
        config = dataclasses.replace(config, **overrides)
    model = RegistrationModel(config, seed=0)
    model.load_state(checkpoint.tensors)
    return model


def cmd_register(args) -> int:
    source = read_ply(args.source)
    reference = read_ply(args.reference)
    (scaled_source, scaled_reference), center, radius = _unit_sphere_scaling(
        [source, reference])
    effective = {
        "tool_version": __version__,
        "source": str(args.source),
        "reference": str(args.reference),
        "iterations": args.iterations,
        "threshold": args.threshold,
        "min_matches": args.min_matches,
        "baseline": args.baseline,
        "scaling": {"center": [float(v) for v in center], "radius": radius},
    }
    started = time.perf_counter()
    if args.baseline == "icp":
        icp_config = IcpConfig(max_iterations=args.icp_max_iterations,
                               max_pair_dist=args.icp_max_pair_dist,
                               convergence_eps=args.icp_eps)
        result = icp(scaled_source, scaled_reference, config=icp_config)
        transform = _unscale_transform(result.transform, center, radius)
        payload = {
            "rotation": [float(v) for v in transform.rotation.reshape(-1)],
            "translation": [float(v) for v in transform.translation],
            "matches": [],
            "valid": not result.no_progress,
            "converged": result.converged,
            "iterations_used": result.iterations,
            "config": {**effective, "icp": dataclasses.asdict(icp_config)},
        }
    else:
        if not args.weights:
            raise ConfigError("--weights is required unless --baseline icp is given")
        model = _load_model(args.weights, args.threshold, args.min_matches)
        result = register(scaled_source, scaled_reference, model, args.iterations)
        transform = _unscale_transform(result.transform, center, radius)
        payload = {
            "rotation": [float(v) for v in transform.rotation.reshape(-1)],
            "translation": [float(v) for v in transform.translation],
            "matches": [[int(i), int(j), float(s)]
                        for i, j, s in result.correspondences.pairs],
            "valid": result.valid,
            "iterations_used": result.iterations_used,
            "config": {**effective, "weights": str(args.weights)},
        }
    elapsed = time.perf_counter() - started
    _write_json(args.out, payload)
    print(f"registered in {elapsed:.3f}s (valid={payload['valid']})", file=sys.stderr)
    return EXIT_OK


def cmd_icp(args) -> int:
    args.baseline = "icp"
    args.weights = None
    args.iterations = 1
    args.threshold = 0.5
    args.min_matches = 3
    return cmd_register(args)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

_EVAL_WORKER_MODEL: list = []


def _eval_worker_init(weights_path, threshold, min_matches):
    _EVAL_WORKER_MODEL.clear()
    _EVAL_WORKER_MODEL.append(_load_model(weights_path, threshold, min_matches))


def _eval_worker(task):
    data_dir, name, index, iterations, ccd_clip = task
    example = read_example(data_dir, name)
    return _evaluate_example(example, _EVAL_WORKER_MODEL[0], index, iterations, ccd_clip)


def _evaluate_example(example, model, index: int, iterations: int,
                      ccd_clip: float) -> PairRecord:
    result = register(example.source, example.reference, model, iterations)
    mie_r, mie_t = mie(result.transform, example.gt_transform)
    mae_r, mae_t = mae(result.transform, example.gt_transform)
    moved = apply_transform(result.transform, example.source)
    chamfer = ccd(moved, example.reference, ccd_clip)
    return PairRecord(index=index, valid=result.valid,
                      match_count=len(result.correspondences),
                      mie_r=mie_r, mie_t=mie_t, mae_r=mae_r, mae_t=mae_t,
                      ccd=chamfer)


def cmd_eval(args) -> int:
    examples, manifest = read_dataset(args.data)
    names = manifest["examples"]
    rot_thresh, trans_thresh = args.thresholds
    started = time.perf_counter()
    if args.workers > 1:
        tasks = [(str(args.data), name, i, args.iterations, args.ccd_clip)
                 for i, name in enumerate(names)]
        with ProcessPoolExecutor(
                max_workers=args.workers, initializer=_eval_worker_init,
                initargs=(args.weights, args.threshold, args.min_matches)) as pool:
            records = list(pool.map(_eval_worker, tasks))
    else:
        model = _load_model(args.weights, args.threshold, args.min_matches)
        records = [
            _evaluate_example(example, model, i, args.iterations, args.ccd_clip)
            for i, example in enumerate(examples)
        ]
    elapsed = time.perf_counter() - started
    report = build_report(records, rot_thresh, trans_thresh)
    payload = {
        "tool_version": __version__,
        "config": {
            "data": str(args.data),
            "weights": str(args.weights),
            "iterations": args.iterations,
            "thresholds": list(args.thresholds),
            "ccd_clip": args.ccd_clip,
        },
        "report": report.to_dict(),
    }
    _write_json(f"{args.out_prefix}.json", payload)
    report.write_csv(f"{args.out_prefix}.csv")
    rate = len(records) / elapsed if elapsed > 0 else float("inf")
    print(f"evaluated {len(records)} pairs in {elapsed:.2f}s "
          f"({rate:.1f} registrations/second); RR={report.rr:.4f} "
          f"valid={report.valid_fraction:.4f}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def cmd_ablate(args) -> int:
    examples, _ = read_dataset(args.data)
    train_set, val_set = _split_examples(examples, args.val_fraction)
    if not val_set:
        raise ConfigError("ablation needs a validation split (val-fraction > 0)")
    rot_thresh, trans_thresh = args.thresholds
    rows = []
    for variant_name, fusion in ABLATION_VARIANTS:
        model_config = ModelConfig.for_dim(
            args.d, k=args.k, stacks=args.stacks, heads=args.heads, fusion=fusion,
            sinkhorn_iterations=args.sinkhorn_iters)
        model = RegistrationModel(model_config, seed=args.seed)
        cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                          epochs=args.epochs, seed=args.seed,
                          eval_every=max(args.epochs, 1),
                          rot_thresh_deg=rot_thresh, trans_thresh=trans_thresh)
        checkpoint = train(train_set, val_set, model, cfg)
        final = RegistrationModel(model_config, seed=args.seed)
        final.load_state(checkpoint.tensors)
        records = [
            _evaluate_example(example, final, i, args.iterations, args.ccd_clip)
            for i, example in enumerate(val_set)
        ]
        report = build_report(records, rot_thresh, trans_thresh)
        rows.append({
            "variant": variant_name,
            "fusion": fusion,
            "mie_r": report.mean_mie_r,
            "mie_t": report.mean_mie_t,
            "rr": report.rr,
            "valid_fraction": report.valid_fraction,
        })
        print(f"{variant_name}: RR={report.rr:.4f} MIE(R)={report.mean_mie_r:.4f}",
              file=sys.stderr)
    payload = {
        "tool_version": __version__,
        "config": {
            "data": str(args.data), "epochs": args.epochs, "seed": args.seed,
            "d": args.d, "stacks": args.stacks, "k": args.k,
            "thresholds": list(args.thresholds), "iterations": args.iterations,
        },
        "rows": rows,
    }
    _write_json(args.out, payload)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="attnreg",
                     description="attention-based rigid point-cloud registration")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="key=value config file (flags take precedence)")

    gen = sub.add_parser("gen", help="generate a synthetic registration dataset")
    add_common(gen)
    gen.add_argument("--models", required=True, help="directory of input PLY models")
    gen.add_argument("--out", required=True, help="output dataset directory")
    gen.add_argument("--regime", choices=("clean", "noise", "crop"), default="clean")
    gen.add_argument("--points", type=int, default=1024)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--pairs-per-model", type=int, default=1)
    gen.add_argument("--rot-max", type=float, default=80.0)
    gen.add_argument("--trans-range", type=float, default=0.5)
    gen.add_argument("--noise-sigma", type=float, default=0.01)
    gen.add_argument("--noise-clip", type=float, default=0.05)
    gen.add_argument("--crop-fraction", type=float, default=0.7)
    gen.add_argument("--max-dist", type=float, default=0.05)
    gen.add_argument("--normal-neighbors", type=int, default=20)
    gen.add_argument("--workers", type=int, default=1)
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="train the matching network")
    add_common(tr)
    tr.add_argument("--data", required=True, help="dataset directory from gen")
    tr.add_argument("--out", required=True, help="output checkpoint path")
    tr.add_argument("--epochs", type=int, default=100)
    tr.add_argument("--d", type=int, default=128)
    tr.add_argument("--stacks", type=int, default=9)
    tr.add_argument("--heads", type=int, default=2)
    tr.add_argument("--k", type=int, default=20)
    tr.add_argument("--fusion", choices=("mlp", "additive", "location_only",
                                         "feature_only"), default="mlp")
    tr.add_argument("--sinkhorn-iters", type=int, default=10)
    tr.add_argument("--threshold", type=float, default=0.5)
    tr.add_argument("--min-matches", type=int, default=3)
    tr.add_argument("--lr", type=float, default=1e-4)
    tr.add_argument("--batch-size", type=int, default=8)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--eval-every", type=int, default=10)
    tr.add_argument("--val-fraction", type=float, default=0.2)
    tr.add_argument("--val-thresholds", type=_parse_thresholds, default=(5.0, 0.05),
                    metavar="ROT,TRANS")
    tr.add_argument("--target-val-rr", type=float, default=None)
    tr.add_argument("--target-train-rr", type=float, default=None)
    tr.add_argument("--log", default=None, help="JSONL training log path")
    tr.add_argument("--resume", default=None, help="checkpoint to resume from")
    tr.set_defaults(func=cmd_train)

    reg = sub.add_parser("register", help="register two PLY point clouds")
    add_common(reg)
    reg.add_argument("--weights", default=None)
    reg.add_argument("--source", required=True)
    reg.add_argument("--reference", required=True)
    reg.add_argument("--out", required=True, help="output result JSON")
    reg.add_argument("--iterations", type=int, default=2)
    reg.add_argument("--threshold", type=float, default=0.5)
    reg.add_argument("--min-matches", type=int, default=3)
    reg.add_argument("--baseline", choices=("icp",), default=None)
    reg.add_argument("--icp-max-iterations", type=int, default=50)
    reg.add_argument("--icp-max-pair-dist", type=float, default=0.1)
    reg.add_argument("--icp-eps", type=float, default=1e-8)
    reg.set_defaults(func=cmd_register)

    ev = sub.add_parser("eval", help="evaluate a checkpoint over a dataset")
    add_common(ev)
    ev.add_argument("--weights", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out-prefix", required=True,
                    help="writes <prefix>.json and <prefix>.csv")
    ev.add_argument("--iterations", type=int, default=2)
    ev.add_argument("--thresholds", type=_parse_thresholds, default=(1.0, 0.1),
                    metavar="ROT,TRANS", help="recall thresholds (5,2 for outdoor preset)")
    ev.add_argument("--threshold", type=float, default=None,
                    help="override the checkpoint match threshold")
    ev.add_argument("--min-matches", type=int, default=None)
    ev.add_argument("--ccd-clip", type=float, default=0.1)
    ev.add_argument("--workers", type=int, default=1)
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="train and compare the feature-head variants")
    add_common(ab)
    ab.add_argument("--data", required=True)
    ab.add_argument("--out", required=True, help="output comparison JSON")
    ab.add_argument("--epochs", type=int, default=30)
    ab.add_argument("--d", type=int, default=32)
    ab.add_argument("--stacks", type=int, default=2)
    ab.add_argument("--heads", type=int, default=2)
    ab.add_argument("--k", type=int, default=8)
    ab.add_argument("--sinkhorn-iters", type=int, default=10)
    ab.add_argument("--lr", type=float, default=1e-3)
    ab.add_argument("--batch-size", type=int, default=8)
    ab.add_argument("--seed", type=int, default=0)
    ab.add_argument("--val-fraction", type=float, default=0.25)
    ab.add_argument("--iterations", type=int, default=2)
    ab.add_argument("--thresholds", type=_parse_thresholds, default=(5.0, 0.05),
                    metavar="ROT,TRANS")
    ab.add_argument("--ccd-clip", type=float, default=0.1)
    ab.set_defaults(func=cmd_ablate)

    icp_cmd = sub.add_parser("icp", help="ICP baseline registration")
    add_common(icp_cmd)
    icp_cmd.add_argument("--source", required=True)
    icp_cmd.add_argument("--reference", required=True)
    icp_cmd.add_argument("--out", required=True)
    icp_cmd.add_argument("--icp-max-iterations", type=int, default=50)
    icp_cmd.add_argument("--icp-max-pair-dist", type=float, default=0.1)
    icp_cmd.add_argument("--icp-eps", type=float, default=1e-8)
    icp_cmd.set_defaults(func=cmd_icp)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        subparser = None
        for action in parser._actions:
            if isinstance(action, argparse._SubParsersAction):
                subparser = action.choices.get(args.command)
        if subparser is not None:
            _apply_config_file(subparser, args, argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except ConfigError as exc:
        print(f"attnreg: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, SizeError, ShapeError, InsufficientCorrespondenceError,
            EmptyEvaluationError, FileNotFoundError, OSError) as exc:
        print(f"attnreg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"attnreg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
