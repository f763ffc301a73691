"""``concept-probe`` command line.

Every subcommand prints a one-line JSON summary on stdout and logs JSON
lines on stderr. Exit codes: 0 success, 2 config error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import jsonlog, prt
from .cav import CavError, CavOptions, fit_cav, tcav_experiment
from .concepts import explain
from .datasets import (
    load_excerpt_dir,
    write_class_sets,
    write_concept_set,
    write_excerpt_dir,
    write_random_sets,
)
from .errors import ConfigError, DataError, NumericError, ProbeError
from .factorization import (
    FactorizationOptions,
    compression_ratio,
    nmf,
    ntd,
    reconstruct,
    relative_error,
    save_factors,
)
from .midi_roll import (
    DEFAULT_LENGTH,
    MidiParseError,
    PianoRoll,
    parse_midi,
    sample_excerpts,
    segment,
)
from .model import Classifier, ModelConfig, TrainConfig, train
from .pipeline import SEED_ENV, STAGES, RunConfig, run_pipeline, save_explain
from .prt import PrtError
from .render import RenderSpec, render_roll, write_renders

log = logging.getLogger("concept_probe.cli")


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _names(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _seed(arg: int | None) -> int:
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    return 0 if arg is None else arg


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


def _load_model(path: str) -> Classifier:
    if not (Path(path) / "manifest.json").exists():
        raise DataError(f"{path}: not a model directory")
    return Classifier.load(path)


def _steps(model: Classifier) -> int:
    return model.config.input_shape[1]


# -- subcommands ---------------------------------------------------------------
def cmd_dataset(args) -> None:
    seed = _seed(args.seed)
    out = Path(args.out)
    try:
        if args.random:
            dirs = write_random_sets(out, args.count, args.excerpts, seed, args.length)
            _emit({"random_sets": [str(d) for d in dirs], "excerpts": args.excerpts})
        elif args.concept:
            write_concept_set(out, args.concept, args.excerpts, seed, args.length)
            _emit({"concept": args.concept, "dir": str(out), "excerpts": args.excerpts})
        else:
            sizes = {"train": args.train, "val": args.val, "eval": args.eval}
            written = write_class_sets(out, args.classes, {k: v for k, v in sizes.items() if v > 0}, seed, args.length)
            _emit({"classes": args.classes, "splits": sorted(written), "dir": str(out)})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_roll(args) -> None:
    try:
        seq = parse_midi(Path(args.midi).read_bytes())
    except FileNotFoundError:
        raise DataError(f"{args.midi} not found") from None
    name = Path(args.midi).stem
    if args.excerpts:
        rolls = sample_excerpts(seq, args.excerpts, args.length, _seed(args.seed), source=name)
    else:
        rolls = segment(seq, args.length, source=name)
    write_excerpt_dir(args.out, rolls, name, str(args.midi), args.length)
    _emit({"dir": args.out, "excerpts": len(rolls), "notes": len(seq), "dropped_out_of_range": seq.dropped_out_of_range})


def cmd_train(args) -> None:
    seed = _seed(args.seed)
    root = Path(args.data)
    xs, ys, vx, vy = [], [], [], []
    steps = int(round(args.length / 0.05))
    for o, name in enumerate(args.classes):
        x, _, _ = load_excerpt_dir(root / "train" / name, steps)
        xs.append(x)
        ys.append(np.full(len(x), o))
        if (root / "val" / name).is_dir():
            v, _, _ = load_excerpt_dir(root / "val" / name, steps)
            vx.append(v)
            vy.append(np.full(len(v), o))
    cfg = ModelConfig(channels=tuple(args.channels), num_classes=len(args.classes), input_shape=(88, steps), seed=seed)
    model = Classifier(cfg, args.classes)
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, rng_seed=seed)
    empty = np.zeros((0, 88, steps), np.float32)
    try:
        result = train(
            model, np.concatenate(xs), np.concatenate(ys),
            np.concatenate(vx) if vx else empty, np.concatenate(vy) if vy else np.zeros(0, int), tcfg,
        )
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    model.save(args.out)
    _emit({"model": args.out, "accuracy": result.accuracy, "macro_f1": result.macro_f1})


def cmd_activations(args) -> None:
    model = _load_model(args.model)
    x, ids, _ = load_excerpt_dir(args.input, _steps(model))
    layer = model._layer(args.layer)
    acts = model.activations_at(x, layer)
    prt.save(args.out, acts, {"layer": layer, "excerpts": ids, "source": str(args.input)})
    _emit({"out": args.out, "shape": list(acts.shape), "layer": layer})


def cmd_cav(args) -> None:
    model = _load_model(args.model)
    layer = model._layer(args.layer)
    concept, _, manifest = load_excerpt_dir(args.concept, _steps(model))
    rand, _, _ = load_excerpt_dir(args.random, _steps(model))
    name = manifest.get("concept", Path(args.concept).name)
    cav = fit_cav(model.activations_at(concept, layer), model.activations_at(rand, layer), CavOptions(seed=_seed(args.seed)), layer, name)
    prt.save(args.out, cav.v, {"layer": layer, "concept": name, "accuracy": cav.classifier_accuracy, "bias": cav.bias})
    _emit({"out": args.out, "concept": name, "accuracy": cav.classifier_accuracy})


def _class_pieces(model: Classifier, root: Path, classes: list[str] | None):
    names = classes or model.class_names
    pieces, ids = {}, {}
    for name in names:
        if name not in model.class_names:
            raise ConfigError(f"class {name!r} not in model classes {model.class_names}")
        o = model.class_names.index(name)
        x, names_o, _ = load_excerpt_dir(root / name, _steps(model))
        pieces[o] = x
        ids[o] = [f"{name}/{i}" for i in names_o]
    return pieces, ids


def cmd_tcav(args) -> None:
    model = _load_model(args.model)
    concept, _, manifest = load_excerpt_dir(args.concept, _steps(model))
    randoms = [load_excerpt_dir(d, _steps(model))[0] for d in args.random_dirs]
    if len(randoms) < 2:
        raise ConfigError("need at least two --random-dirs")
    pieces, _ = _class_pieces(model, Path(args.eval), args.classes)
    name = manifest.get("concept", Path(args.concept).name)
    report = tcav_experiment(
        model, concept, randoms, pieces, args.layer, args.alpha, name, CavOptions(seed=_seed(args.seed)), controls=args.controls
    ).to_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True))
    _emit({row["class"]: {"sign": row["sign"], "mean": row["mean"], "p": row["p"]} for row in report["per_class"]})


def cmd_ntd(args) -> None:
    x, meta = prt.load(args.input)
    x = x.astype(np.float64)
    opts = FactorizationOptions(max_outer_iters=args.max_iters, tolerance=args.tol, rng_seed=_seed(args.seed))
    if args.variant == "2d" or x.ndim == 2:
        flat = x.reshape(-1, x.shape[-1])
        f = nmf(flat, args.ranks[-1], opts)
        err = relative_error(flat, reconstruct(f))
    else:
        target = x.reshape(x.shape[0], -1, x.shape[-1]) if args.variant == "3d" and x.ndim == 4 else x
        ranks = args.ranks
        if args.variant == "3d" and x.ndim == 4 and len(ranks) == 4:
            ranks = [ranks[0], min(ranks[1] * ranks[2], target.shape[1]), ranks[3]]
        if len(ranks) != target.ndim:
            raise ConfigError(f"need {target.ndim} ranks for a {target.ndim}-way tensor, got {len(ranks)}")
        f = ntd(target, ranks, opts)
        err = relative_error(target, reconstruct(f))
    ratio = compression_ratio(f, x.shape)
    save_factors(args.out, f, args.variant, opts.rng_seed, {"input": str(args.input), "relative_error": err, "compression_ratio": ratio})
    _emit({"out": args.out, "relative_error": err, "compression_ratio": ratio, "iterations": len(f.loss_history) - 1})


def cmd_explain(args) -> None:
    model = _load_model(args.model)
    pieces, ids = _class_pieces(model, Path(args.pieces), args.composers)
    if len(pieces) > 2:
        log.warning("more than two classes; opposing-concept selection is skipped", extra={"event": "pairwise_only"})
    ranks = list(args.ranks) + [args.ccavs]
    opts = FactorizationOptions(max_outer_iters=args.max_iters, rng_seed=_seed(args.seed))
    result = explain(model, pieces, args.variant, ranks, args.layer, opts, args.k, ids)
    save_explain(args.out, result, args.variant, opts.rng_seed)
    r = result.report
    _emit({"out": args.out, "fidelity": r["fidelity"], "compression_ratio": r["compression_ratio"], "opposing": r["opposing"]})


def cmd_render(args) -> None:
    grid, meta = prt.load(args.roll)
    roll = PianoRoll(grid, meta.get("step", 0.05))
    heatmap, peak = None, None
    if args.heatmap:
        heatmap, hm_meta = prt.load(args.heatmap)
        peak = hm_meta.get("peak")
    try:
        spec = RenderSpec(thresholds=tuple(args.thresholds))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        images = render_roll(roll, heatmap, spec, peak)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    name = args.name or Path(args.roll).stem
    paths = write_renders(args.out, name, images, roll)
    _emit({"files": [p.name for p in paths]})


def cmd_pipeline(args) -> None:
    cfg = RunConfig.load(args.config)
    done = run_pipeline(args.out, cfg, args.stage)
    _emit({"run": args.out, "seed": cfg.seed, "stages": done})


# -- parser --------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="concept-probe", description="Concept-based explanations for symbolic-music CNNs.")
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dataset", help="synthesize concept, random or labeled class datasets")
    kind = d.add_mutually_exclusive_group(required=True)
    kind.add_argument("--concept", help="synthetic concept pattern, e.g. alberti")
    kind.add_argument("--random", action="store_true", help="write --count random datasets")
    kind.add_argument("--classes", type=_names, help="comma-separated class patterns, e.g. alberti,random")
    d.add_argument("--excerpts", type=int, default=30)
    d.add_argument("--count", type=int, default=10)
    d.add_argument("--train", type=int, default=200)
    d.add_argument("--val", type=int, default=50)
    d.add_argument("--eval", type=int, default=50)
    d.add_argument("--length", type=float, default=DEFAULT_LENGTH)
    d.add_argument("--seed", type=int)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dataset)

    r = sub.add_parser("roll", help="turn a MIDI file into piano-roll excerpts")
    r.add_argument("midi")
    r.add_argument("--out", required=True)
    r.add_argument("--length", type=float, default=DEFAULT_LENGTH)
    r.add_argument("--excerpts", type=int, default=0, help="random excerpts instead of non-overlapping segments")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_roll)

    t = sub.add_parser("train", help="train the classifier on DATA/train/<class>")
    t.add_argument("--data", required=True)
    t.add_argument("--classes", type=_names, required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--channels", type=_ints, default=[8, 16, 32])
    t.add_argument("--length", type=float, default=DEFAULT_LENGTH)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("activations", help="write layer activations of a dataset as PRT1")
    a.add_argument("--model", required=True)
    a.add_argument("--input", required=True)
    a.add_argument("--layer", type=int)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_activations)

    c = sub.add_parser("cav", help="fit one CAV")
    c.add_argument("--model", required=True)
    c.add_argument("--concept", required=True)
    c.add_argument("--random", required=True)
    c.add_argument("--layer", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_cav)

    tc = sub.add_parser("tcav", help="run the TCAV significance experiment")
    tc.add_argument("--model", required=True)
    tc.add_argument("--concept", required=True)
    tc.add_argument("--random-dirs", nargs="+", required=True)
    tc.add_argument("--eval", required=True, help="directory with one subdirectory per class")
    tc.add_argument("--classes", type=_names)
    tc.add_argument("--layer", type=int)
    tc.add_argument("--alpha", type=float, default=0.05)
    tc.add_argument("--controls", choices=("pairs", "cyclic"), default="pairs")
    tc.add_argument("--seed", type=int)
    tc.add_argument("--out")
    tc.set_defaults(func=cmd_tcav)

    n = sub.add_parser("ntd", help="factorize a non-negative PRT1 tensor")
    n.add_argument("--input", required=True)
    n.add_argument("--ranks", type=_ints, required=True)
    n.add_argument("--variant", choices=("4d", "3d", "2d"), default="4d")
    n.add_argument("--max-iters", type=int, default=200)
    n.add_argument("--tol", type=float, default=1e-6)
    n.add_argument("--seed", type=int)
    n.add_argument("--out", required=True)
    n.set_defaults(func=cmd_ntd)

    e = sub.add_parser("explain", help="discover concepts with NTD or NMF")
    e.add_argument("--model", required=True)
    e.add_argument("--pieces", required=True, help="directory with one subdirectory per class")
    e.add_argument("--composers", type=_names)
    e.add_argument("--ccavs", type=int, default=4)
    e.add_argument("--ranks", type=_ints, default=[10, 4, 8], help="N',H',W'")
    e.add_argument("--variant", choices=("4d", "3d", "2d"), default="4d")
    e.add_argument("--layer", type=int)
    e.add_argument("--k", type=int, default=5)
    e.add_argument("--max-iters", type=int, default=200)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_explain)

    rd = sub.add_parser("render", help="render a roll with an optional heatmap overlay")
    rd.add_argument("--roll", required=True)
    rd.add_argument("--heatmap")
    rd.add_argument("--thresholds", type=_floats, default=[0.4, 0.6, 0.8])
    rd.add_argument("--name")
    rd.add_argument("--out", required=True)
    rd.set_defaults(func=cmd_render)

    pl = sub.add_parser("pipeline", help="run all stages from one config")
    pl.add_argument("--config")
    pl.add_argument("--out", required=True)
    pl.add_argument("--stage", choices=STAGES)
    pl.set_defaults(func=cmd_pipeline)
    return p


def _categorize(exc: Exception) -> ProbeError:
    if isinstance(exc, ProbeError):
        return exc
    if isinstance(exc, (MidiParseError, PrtError, FileNotFoundError, NotADirectoryError)):
        return DataError(str(exc))
    if isinstance(exc, (CavError, FloatingPointError, np.linalg.LinAlgError)):
        return NumericError(str(exc))
    if isinstance(exc, ValueError):
        return ConfigError(str(exc))
    raise exc


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else ConfigError.exit_code
    jsonlog.configure(args.log_level.upper())
    try:
        if args.command == "explain" and args.ranks and len(args.ranks) != 3:
            raise ConfigError("--ranks takes N',H',W'; set C' with --ccavs")
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped onto exit codes below
        err = _categorize(exc)
        log.error(str(err), extra={"event": "error", "error": type(exc).__name__, "exit_code": err.exit_code})
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
