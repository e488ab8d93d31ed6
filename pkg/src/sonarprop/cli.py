"""Command-line entry point: ``sonarprop <subcommand> ...``.

Exit status 0 on success, 1 for bad input (arguments, files, formats),
2 when a run aborts (training divergence, sampling exhaustion).
"""

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import annotations as ann_io
from . import datagen, synth, trainer
from .eval_harness import (
    MATCH_THRESHOLD,
    ExternalProposalGenerator,
    MapProposalGenerator,
    curve_filename,
    import_external_proposals,
    recall_curve,
    timing_bench,
    write_curve_csv,
)
from .estimators import ObjectnessRegressor, TemplateMatchingRegressor
from .exceptions import (
    AnnotationParseError,
    RejectedInputError,
    SamplingExhaustedError,
    TrainingDivergedError,
)
from .proposals import NMS_THRESHOLD, extract_proposals, write_map_pgm, write_proposals_csv
from .tm_baseline import load_templates, save_templates
from .weights_io import file_kind

logger = logging.getLogger("sonarprop")

EXIT_OK, EXIT_INPUT, EXIT_ABORT = 0, 1, 2
DEFAULT_SWEEP = {"ranking": "1,2,5,10,20,50,100,200,500", "threshold": "0.05,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,0.95"}


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _unit(text):
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is outside [0, 1]")
    return value


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"{text} must be >= 1")
    return value


def _common(p, model=True):
    if model:
        p.add_argument("--model", choices=("fcn", "cnn", "tm"), default="fcn")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=_positive, default=1, help="images processed in parallel")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON file whose keys mirror the long flags")


def _extraction(p):
    p.add_argument("--mode", choices=("ranking", "threshold"), default="ranking")
    p.add_argument("--t-o", type=_unit, default=0.5, help="objectness threshold (threshold mode)")
    p.add_argument("--k", type=int, default=100, help="proposals kept before NMS (ranking mode)")
    p.add_argument("--t-s", type=_unit, default=NMS_THRESHOLD, help="NMS IoU threshold")
    p.add_argument("--stride", type=_positive, default=4)
    p.add_argument("--nms-first", action="store_true", help="run NMS over all windows, then truncate to k")
    p.add_argument("--sliding", action="store_true", help="score windows one by one instead of one full-image pass")


def build_parser():
    parser = _Parser(prog="sonarprop", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic annotated dataset")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--max-objects", type=int, default=2)
    _common(p, model=False)

    p = sub.add_parser("train", help="train an objectness model (or build a template bank)")
    p.add_argument("dataset", help="annotation JSON")
    p.add_argument("--max-epochs", type=_positive, default=50)
    p.add_argument("--patience", type=_positive, default=5)
    p.add_argument("--batch-size", type=_positive, default=64)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--train-stride", type=_positive, default=4, help="grid step for positive training windows")
    p.add_argument("--n-negative", type=int, default=10)
    p.add_argument("--templates", type=_positive, default=100, help="bank size for --model tm")
    _common(p)

    p = sub.add_parser("propose", help="proposals (and objectness maps) for images")
    p.add_argument("weights")
    p.add_argument("images", nargs="+")
    p.add_argument("--map", action="store_true", help="also write the objectness map as PGM")
    p.add_argument("--png", action="store_true", help="with --map, also write a PNG")
    _extraction(p)
    _common(p)

    p = sub.add_parser("eval", help="recall curve and timing on an annotated dataset")
    p.add_argument("dataset", help="annotation JSON")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--weights")
    src.add_argument("--proposals", help="directory of <image stem>.csv files from an external method")
    p.add_argument("--sweep", help="comma-separated k or T_o values")
    p.add_argument("--t-d", type=_unit, default=MATCH_THRESHOLD)
    p.add_argument("--timing-reps", type=int, default=3, help="0 disables timing")
    p.add_argument("--name", help="method name used in file names")
    _extraction(p)
    _common(p)

    p = sub.add_parser("convert-annotations", help="Pascal VOC XML directory to the JSON exchange format")
    p.add_argument("xml_dir")
    p.add_argument("--image-dir", help="directory of the images, relative to --out")
    p.add_argument("--image-suffix", default=".png")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config")
    return parser


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            config = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        if not isinstance(config, dict):
            parser.error("config file must hold a JSON object")
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = set(k.replace("-", "_") for k in config) - known
        if unknown:
            parser.error(f"unknown config keys: {', '.join(sorted(unknown))}")
        # config supplies defaults; flags given on the command line win
        subparser.set_defaults(**{k.replace("-", "_"): v for k, v in config.items()})
        args = parser.parse_args(argv)
    return args


def _out_dir(args):
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from None
    return out


def _require(path, what):
    if not Path(path).exists():
        raise InputError(f"{what} not found: {path}")


def cmd_synth(args):
    if args.count < 0:
        raise InputError("--count must be >= 0")
    if min(args.width, args.height) < synth.MIN_EXTENT:
        raise InputError(f"--width and --height must be >= {synth.MIN_EXTENT}")
    out = _out_dir(args)
    anns = synth.synth_dataset(args.count, args.width, args.height, args.seed, args.max_objects)
    ann_io.save_annotations(out / "annotations.json", anns)
    for a in anns:
        for w in a.warnings:
            logger.warning("%s: %s", a.file, w)
    print(f"wrote {len(anns)} images to {out}")


def _load_model(path, model):
    _require(path, "weights file")
    kind = file_kind(path)
    if (kind == "templates") != (model == "tm"):
        raise InputError(f"weights file {path} holds a {kind} record set, incompatible with --model {model}")
    if kind == "templates":
        est = TemplateMatchingRegressor()
        est.bank_ = load_templates(path)
        return est
    est = ObjectnessRegressor.load(path)
    if est.architecture != model:
        raise InputError(f"weights file {path} holds the {est.architecture} network, incompatible with --model {model}")
    return est


def _map_fn(est, args):
    if isinstance(est, ObjectnessRegressor):
        full = est.architecture == "fcn" and not args.sliding and args.stride == 4
        return lambda image: est.objectness_map(image, stride=args.stride, full_image=full)
    return lambda image: est.objectness_map(image, stride=args.stride)


def cmd_train(args):
    _require(args.dataset, "dataset")
    anns = ann_io.load_annotations(args.dataset)
    out = _out_dir(args)
    train_set, val_set = datagen.build_patch_dataset(
        anns, seed=args.seed, n_negative=args.n_negative, stride=args.train_stride
    )
    if len(train_set) == 0 or len(val_set) == 0:
        raise InputError("dataset too small: the 70/30 image split left an empty side")
    logger.info("%d training / %d validation patches", len(train_set), len(val_set))
    if args.model == "tm":
        est = TemplateMatchingRegressor(args.templates, args.seed).fit(train_set.patches, train_set.objectness)
        save_templates(out / "templates.spnw", est.bank_)
        print(f"wrote {out / 'templates.spnw'}")
        return
    est = ObjectnessRegressor(args.model, args.lr, args.batch_size, args.max_epochs, args.patience, random_state=args.seed)
    est.fit(train_set.patches, train_set.objectness, eval_set=(val_set.patches, val_set.objectness))
    est.save(out / "weights.spnw")
    est.history_.write_csv(out / "history.csv")
    h = est.history_
    print(f"wrote {out / 'weights.spnw'}: best epoch {h.best_epoch} of {len(h.epochs)}, val_mse {h.best_val_mse:.5f}")


def _parallel_map(fn, items, workers):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def cmd_propose(args):
    for image in args.images:
        _require(image, "image")
    est = _load_model(args.weights, args.model)
    out = _out_dir(args)
    map_fn = _map_fn(est, args)

    def run(path):
        omap = map_fn(ann_io.read_image(path))
        props = extract_proposals(omap, args.mode, k=args.k, t_o=args.t_o, t_s=args.t_s, nms_first=args.nms_first)
        stem = Path(path).stem
        write_proposals_csv(out / f"{stem}.csv", props)
        if args.map:
            write_map_pgm(out / f"{stem}_objectness.pgm", omap, png=args.png)
        return len(props)

    counts = _parallel_map(run, args.images, args.workers)
    print(f"wrote proposals for {len(counts)} images to {out}")


def _sweep(args):
    text = args.sweep or DEFAULT_SWEEP[args.mode]
    try:
        values = [int(v) if args.mode == "ranking" else float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"bad --sweep {text!r}") from None
    if not values:
        raise InputError("--sweep is empty")
    return values


def cmd_eval(args):
    _require(args.dataset, "dataset")
    anns = ann_io.load_annotations(args.dataset)
    if not anns:
        raise InputError("dataset has no images")
    sweep = _sweep(args)
    out = _out_dir(args)
    if args.proposals:
        _require(args.proposals, "proposals directory")
        generator = ExternalProposalGenerator(import_external_proposals(args.proposals))
        name = args.name or "external"
    else:
        est = _load_model(args.weights, args.model)
        map_fn = _map_fn(est, args)
        generator = MapProposalGenerator(map_fn, args.mode, args.t_s, args.nms_first)
        name = args.name or args.model
        generator.precompute(anns, args.workers)
    results = recall_curve(generator, anns, sweep, args.t_d, method=name)
    csv_path = out / curve_filename(f"{name}Proposals", args.mode, args.t_d, args.t_s)
    write_curve_csv(csv_path, results, "k" if args.mode == "ranking" else "threshold")
    print(f"wrote {csv_path}")
    failures = sorted({f for r in results for f in r.failures})
    if failures:
        log = out / "failures.log"
        log.write_text("".join(f"{i}\t{file}\t{err}\n" for i, file, err in failures))
        logger.warning("%d image evaluations failed, see %s", len(failures), log)
    if not args.proposals and args.timing_reps:
        if args.timing_reps < 3:
            raise InputError("--timing-reps must be 0 or >= 3")

        def pipeline(image):
            return extract_proposals(map_fn(image), args.mode, k=args.k, t_o=args.t_o, t_s=args.t_s,
                                     nms_first=args.nms_first)

        timing = timing_bench(pipeline, [a.image for a in anns], args.timing_reps, name)
        timing.write_json(out / f"{name}-timing.json")
        print(f"{name}: {timing.mean_s:.4f} +- {timing.std_s:.4f} s per image")


def cmd_convert(args):
    _require(args.xml_dir, "annotation directory")
    out = _out_dir(args)
    anns = ann_io.convert_voc_annotations(args.xml_dir, args.image_dir, args.image_suffix)
    ann_io.save_annotations(out / "annotations.json", anns, write_images=False)
    print(f"converted {len(anns)} annotation files to {out / 'annotations.json'}")


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "propose": cmd_propose,
    "eval": cmd_eval,
    "convert-annotations": cmd_convert,
}


def main(argv=None):
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except (InputError, RejectedInputError, AnnotationParseError, FileNotFoundError) as exc:
        print(f"sonarprop {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingDivergedError, SamplingExhaustedError) as exc:
        print(f"sonarprop {args.command}: aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
