"""
Command-line front end: edge tooling, dataset generation and remapping,
toy training, self-calibration and evaluation sweeps.

Every command writes files and prints a short summary. Exit codes are
0 on success, 1 on usage errors, 2 on data errors and 3 on numeric failures.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .core.califormer import load_checkpoint, save_checkpoint
from .core.config import DEFAULT_SEED, SEED_ENV, EdgeSource, Estimator, ExitCode, PriorName, ZAxis, derive_rng
from .core.dataset import (
    ClassMapping,
    Dataset,
    dataset_edge,
    load_annotations,
    remap_dataset,
    save_coco,
    split_subsets,
)
from .core.edge import EdgeMatrix, delta, edge_mae, flat_prior, flip_edge
from .core.errors import AnnotationError, DetectorError, EdgeValidationError, NumericalError
from .core.evaluation import EvalConfig, format_subset_table, prior_sweep, standard_priors, subset_eval
from .core.selfcal import SelfCalConfig, selfcal_run
from .core.training import EdgeSamplerConfig, ToyTrainConfig, sample_edge, train_toy
from .core.world import WorldFactory, WorldSpec, gen_dataset, make_feature_map
from .detectors import Detector, DetectorFactory


class UsageError(Exception):
    pass


class RunConfig(BaseModel):
    """
    Settings shared by every command. The seed comes from the --seed flag,
    then $CALIDET_SEED, then the command's config file, then the default.
    """

    model_config = ConfigDict(extra="forbid")

    seed: int = Field(DEFAULT_SEED, ge=0)
    verbosity: int = Field(0, ge=0)

    @classmethod
    def resolve(cls, flag_seed: int | None, config_seed: int | None = None, verbosity: int = 0) -> "RunConfig":
        if flag_seed is not None:
            seed = flag_seed
        elif os.environ.get(SEED_ENV):
            try:
                seed = int(os.environ[SEED_ENV])
            except ValueError:
                raise UsageError(f"{SEED_ENV}={os.environ[SEED_ENV]!r} is not an integer.")
        elif config_seed is not None:
            seed = config_seed
        else:
            seed = DEFAULT_SEED
        return cls(seed=seed, verbosity=verbosity)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ExitCode.USAGE, f"{self.prog}: error: {message}\n")


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"No such file: {path}")
    return p


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Expected comma-separated integers, got {text!r}.")


def _write_json(document, path: str) -> None:
    Path(path).write_text(json.dumps(document, indent=2) + "\n")


def _load_world(path: str) -> WorldSpec:
    return WorldFactory().world_from_file(_existing(path))


#########
# edges #
#########


def cmd_edges(args) -> int:
    action = args.action
    if action == "stats":
        dataset = load_annotations(_existing(args.annotations))
        edge = dataset_edge(dataset)
        edge.save(args.out)
        if args.csv:
            edge.to_csv(args.csv)
        print(f"Edge over {len(dataset)} images, k={edge.k}, written to {args.out}")
    elif action == "flat":
        edge = flat_prior(args.k)
        edge.save(args.out)
        print(f"Flat prior k={args.k} written to {args.out}")
    elif action == "flip":
        edge = flip_edge(EdgeMatrix.load(_existing(args.input)))
        edge.save(args.out)
        print(f"Flipped edge written to {args.out}")
    elif action == "delta":
        edge = EdgeMatrix.load(_existing(args.input))
        _write_json({"k": edge.k, "class_ids": list(edge.class_ids), "values": delta(edge).values.tolist()}, args.out)
        print(f"Delta edge written to {args.out}")
    elif action == "compare":
        comparison = edge_mae(EdgeMatrix.load(_existing(args.a)), EdgeMatrix.load(_existing(args.b)))
        print(f"MAE {comparison.mae:.6f}")
        for p, v in comparison.percentiles.items():
            print(f"p{p:<3} {v:.6f}")
    elif action == "sample":
        run = RunConfig.resolve(args.seed)
        e_x, e_b, e_t = (EdgeMatrix.load(_existing(p)) for p in (args.ex, args.eb, args.et))
        cfg = EdgeSamplerConfig(sigma=args.sigma, sources=args.sources)
        edge = sample_edge(e_x, e_b, e_t, cfg, derive_rng(run.seed, "sampler"))
        edge.save(args.out)
        print(f"Sampled edge (seed {run.seed}) written to {args.out}")
    return ExitCode.SUCCESS


##################
# world and data #
##################


def cmd_world(args) -> int:
    run = RunConfig.resolve(args.seed)
    overrides = {"lam": args.lam, "fp_rate": args.fp_rate, "logit_noise": args.logit_noise}
    world = WorldFactory(reference_size=args.reference_size).world_from_generator(
        k=args.k, scene_count=args.scenes, seed=run.seed, **overrides
    )
    world.save(args.out)
    print(f"World k={world.k} with {world.scene_count} scenes (seed {run.seed}) written to {args.out}")
    return ExitCode.SUCCESS


def cmd_data(args) -> int:
    if args.action == "gen":
        run = RunConfig.resolve(args.seed)
        if args.n < 0:
            raise UsageError("--n must be non-negative.")
        world = _load_world(args.world)
        dataset = gen_dataset(world, args.n, run.seed)
        save_coco(dataset, args.out)
        print(f"{len(dataset)} images, {dataset.annotation_count()} boxes written to {args.out}")
        if len(dataset):
            print(f"MAE to world reference: {WorldFactory.check_reference(world, dataset):.4f}")
    else:
        dataset = load_annotations(_existing(args.annotations))
        mapping = ClassMapping.load(_existing(args.mapping))
        remapped, report = remap_dataset(dataset, mapping, args.targets)
        save_coco(remapped, args.out)
        if args.report:
            _write_json(report.to_dict(), args.report)
        print(
            f"Images {report.images_before} -> {report.images_after} ({report.image_retention:.1f}%), "
            f"annotations {report.annotations_before} -> {report.annotations_after} "
            f"({report.annotation_retention:.1f}%)"
        )
    return ExitCode.SUCCESS


#########
# train #
#########


def cmd_train(args) -> int:
    cfg = ToyTrainConfig.model_validate_json(_existing(args.config).read_text()) if args.config else ToyTrainConfig()
    run = RunConfig.resolve(args.seed, cfg.seed)
    updates = {"seed": run.seed}
    if args.epochs is not None:
        updates["epochs"] = args.epochs
    cfg = ToyTrainConfig.model_validate({**cfg.model_dump(by_alias=True), **updates})
    result = train_toy(cfg, args.metrics)
    if args.checkpoint:
        save_checkpoint(result.model, args.checkpoint)
    if args.world_out:
        result.world.save(args.world_out)
    final = result.final()["map"]
    print("Final presence mAP: " + ", ".join(f"{name} {value:.2f}" for name, value in final.items()))
    print(f"Metrics written to {args.metrics}")
    return ExitCode.SUCCESS


#####################
# selfcal and eval #
#####################


def _dataset_for(args, world: WorldSpec | None, seed: int) -> Dataset:
    if args.annotations:
        return load_annotations(_existing(args.annotations))
    if world is None:
        raise UsageError("Either --annotations or --world is required.")
    return gen_dataset(world, args.n, seed)


def _training_prior(args, world: WorldSpec | None, dataset: Dataset) -> EdgeMatrix:
    if args.et:
        return EdgeMatrix.load(_existing(args.et))
    if world is None:
        raise UsageError("--et is required without --world.")
    edge = world.reference()
    if edge.class_ids != dataset.class_ids:
        edge = EdgeMatrix(edge.values, dataset.class_ids)
    return edge


def _build_detector(args, world: WorldSpec | None, k: int, seed: int) -> Detector:
    if args.detector == "sim":
        if world is None:
            raise UsageError("The sim detector needs --world.")
        return DetectorFactory.make_detector("sim", world=world, seed=seed)
    if args.detector == "constant":
        return DetectorFactory.make_detector("constant", k=k, score=args.constant_score)
    if args.detector == "http":
        if not args.url:
            raise UsageError("The http detector needs --url.")
        return DetectorFactory.make_detector("http", url=args.url, timeout=args.timeout, retries=args.retries)
    if not args.checkpoint or world is None:
        raise UsageError("The toy detector needs --checkpoint and --world.")
    model = load_checkpoint(_existing(args.checkpoint))
    feature_map = make_feature_map(world, model.config.d, args.feature_noise, args.feature_seed)
    return DetectorFactory.make_detector("toy", model=model, feature_map=feature_map, seed=seed)


def cmd_selfcal(args) -> int:
    run = RunConfig.resolve(args.seed)
    world = _load_world(args.world) if args.world else None
    dataset = _dataset_for(args, world, run.seed)
    if args.subset_size:
        subsets = split_subsets(dataset, args.subset_size, run.seed)
        if not subsets:
            raise UsageError(f"--subset-size {args.subset_size} exceeds the {len(dataset)} available images.")
        dataset = subsets[0]
    e_t = _training_prior(args, world, dataset)
    detector = _build_detector(args, world, dataset.k, run.seed)
    cfg = SelfCalConfig(
        eta=args.eta,
        max_iterations=args.iters,
        presence_threshold=args.threshold,
        z_axis=args.z_axis,
        estimator=args.estimator,
        init=args.init,
        workers=args.workers,
    )
    try:
        trace = selfcal_run(detector, dataset, cfg, e_t)
    except DetectorError as exc:
        if exc.trace is not None and len(exc.trace):
            exc.trace.store(args.out)
        raise
    trace.store(args.out)
    last = trace.entries[-1]
    print(
        f"{len(trace)} iterations ({'converged' if trace.converged else 'not converged'}), "
        f"last step MAE {last.step_mae:.6f}, step MAX {last.step_max:.6f}"
    )
    return ExitCode.SUCCESS


def cmd_eval(args) -> int:
    run = RunConfig.resolve(args.seed)
    world = _load_world(args.world) if args.world else None
    dataset = _dataset_for(args, world, run.seed)
    e_t = _training_prior(args, world, dataset)
    detector = _build_detector(args, world, dataset.k, run.seed)
    cfg = EvalConfig.coco() if args.coco else EvalConfig()

    if args.action == "sweep":
        priors = standard_priors(dataset, e_t, [p for p in args.priors.split(",") if p], args.batch_size)
        report = prior_sweep(detector, dataset, priors, cfg, e_t, args.workers)
        Path(args.out).write_text(report.to_json() + "\n")
        print(report.to_text())
    else:
        reports = [subset_eval(detector, dataset, size, run.seed, cfg, e_t, args.workers) for size in args.sizes]
        _write_json({"subsets": [r.to_dict() for r in reports]}, args.out)
        print(format_subset_table(reports))
    return ExitCode.SUCCESS


##########
# parser #
##########


def _add_detector_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--world", help="World file (JSON); also the source of generated images and E_t")
    parser.add_argument("--annotations", help="COCO annotations to use instead of generated images")
    parser.add_argument("--n", type=int, default=1000, help="Number of generated images (default: 1000)")
    parser.add_argument("--et", help="Training prior edge file; defaults to the world's reference edge")
    parser.add_argument("--detector", choices=["sim", "toy", "constant", "http"], default="sim")
    parser.add_argument("--checkpoint", help="Toy model checkpoint (toy detector)")
    parser.add_argument("--feature-noise", type=float, default=1.0, help="Feature noise of the toy model")
    parser.add_argument("--feature-seed", type=int, default=1, help="Seed the toy model was trained with")
    parser.add_argument("--constant-score", type=float, default=0.2, help="Score of the constant detector")
    parser.add_argument("--url", help="Endpoint of the http detector")
    parser.add_argument("--timeout", type=float, default=30.0, help="Http detector timeout in seconds")
    parser.add_argument("--retries", type=int, default=2, help="Http detector retry count")
    parser.add_argument("--workers", type=int, default=1, help="Parallel detector calls")
    parser.add_argument("--seed", type=int, help=f"Global seed (default: ${SEED_ENV} or {DEFAULT_SEED})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="calidet", description="Prior calibration tooling for object detectors.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug logging")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    edges = commands.add_parser("edges", help="Build, transform and compare edge matrices")
    edge_actions = edges.add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = edge_actions.add_parser("stats", help="Edge of an annotation file")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="Also export the edge as CSV")
    p = edge_actions.add_parser("flat", help="Flat prior E0")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True)
    for name, help_text in (("flip", "Flipped edge"), ("delta", "E - E0")):
        p = edge_actions.add_parser(name, help=help_text)
        p.add_argument("--in", dest="input", required=True)
        p.add_argument("--out", required=True)
    p = edge_actions.add_parser("compare", help="MAE and percentiles between two edges")
    p.add_argument("a")
    p.add_argument("b")
    p = edge_actions.add_parser("sample", help="Draw one training prior")
    p.add_argument("--ex", required=True)
    p.add_argument("--eb", required=True)
    p.add_argument("--et", required=True)
    p.add_argument("--sigma", type=float, default=EdgeSamplerConfig().sigma)
    p.add_argument("--sources", type=lambda s: [EdgeSource(v) for v in s.split(",")], default=list(EdgeSource))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    world = commands.add_parser("world", help="Simulated worlds")
    world_actions = world.add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = world_actions.add_parser("gen", help="Generate a world")
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--scenes", type=int, default=3)
    p.add_argument("--lambda", dest="lam", type=float, default=4.0, help="Detector sensitivity to the prior")
    p.add_argument("--fp-rate", type=float, default=1.0)
    p.add_argument("--logit-noise", type=float, default=1.0)
    p.add_argument("--reference-size", type=int, default=10_000)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    data = commands.add_parser("data", help="Datasets")
    data_actions = data.add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = data_actions.add_parser("gen", help="Generate a COCO-format dataset from a world")
    p.add_argument("--world", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p = data_actions.add_parser("remap", help="Remap classes into a target taxonomy")
    p.add_argument("--annotations", required=True)
    p.add_argument("--mapping", required=True, help='JSON list of {"source": id, "target": id}')
    p.add_argument("--targets", type=_int_list, required=True, help="Comma-separated target class ids")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="Write the filter report as JSON")

    train = commands.add_parser("train", help="Training")
    train_actions = train.add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = train_actions.add_parser("toy", help="Train the toy presence model")
    p.add_argument("--config", help="ToyTrainConfig JSON")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--metrics", required=True, help="Per-epoch metrics (JSON lines)")
    p.add_argument("--checkpoint", help="Write the trained model here")
    p.add_argument("--world-out", help="Write the training world here")

    selfcal = commands.add_parser("selfcal", help="Self-calibration")
    selfcal_actions = selfcal.add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = selfcal_actions.add_parser("run", help="Run self-calibration and store its trace")
    _add_detector_flags(p)
    p.add_argument("--subset-size", type=int, help="Calibrate on one random subset of this size")
    p.add_argument("--eta", type=float, default=SelfCalConfig().eta)
    p.add_argument("--iters", type=int, default=SelfCalConfig().max_iterations)
    p.add_argument("--threshold", type=float, default=SelfCalConfig().presence_threshold)
    p.add_argument("--z-axis", type=ZAxis, choices=list(ZAxis), default=ZAxis.COLUMNS)
    p.add_argument("--estimator", type=Estimator, choices=list(Estimator), default=Estimator.FULL)
    p.add_argument("--init", choices=["et", "e0"], default="et")
    p.add_argument("--out", required=True, help="Trace file (JSON lines)")

    evaluate = commands.add_parser("eval", help="Evaluation protocols")
    eval_actions = evaluate.add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = eval_actions.add_parser("sweep", help="AP under each injected prior")
    _add_detector_flags(p)
    p.add_argument("--priors", default=",".join(PriorName), help="Comma-separated prior names")
    p.add_argument("--batch-size", type=int, default=2, help="Images per batch for the eb prior")
    p.add_argument("--coco", action="store_true", help="Cap at 100 detections and add area splits")
    p.add_argument("--out", required=True)
    p = eval_actions.add_parser("subsets", help="E_t versus subset statistics")
    _add_detector_flags(p)
    p.add_argument("--sizes", type=_int_list, default=[8, 16, 32, 64])
    p.add_argument("--coco", action="store_true", help="Cap at 100 detections and add area splits")
    p.add_argument("--out", required=True)
    return parser


COMMANDS = {
    "edges": cmd_edges,
    "world": cmd_world,
    "data": cmd_data,
    "train": cmd_train,
    "selfcal": cmd_selfcal,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return int(COMMANDS[args.command](args))
    except UsageError as exc:
        print(f"calidet: error: {exc}", file=sys.stderr)
        return ExitCode.USAGE
    except NumericalError as exc:
        print(f"calidet: numeric failure: {exc}", file=sys.stderr)
        return ExitCode.NUMERIC
    except (
        AnnotationError,
        EdgeValidationError,
        DetectorError,
        FileNotFoundError,
        ValidationError,
        json.JSONDecodeError,
        ValueError,
        KeyError,
    ) as exc:
        print(f"calidet: data error: {exc}", file=sys.stderr)
        return ExitCode.DATA


if __name__ == "__main__":
    sys.exit(main())
