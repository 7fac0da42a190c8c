"""Command-line entry point: ``pscnn <command> [options]``.

Commands: gen, train-loc, train-cls, eval, schedule, explain, geometry.
Every command that writes files refuses a non-empty ``--out`` unless
``--force`` is given, and finishes by writing ``run_manifest.json``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

import argparse
import json
import logging
import os
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, GenConfig, config_hash, load_json
from .errors import ConfigurationError, TrainingError

logger = logging.getLogger("pscnn")

MANIFEST = "run_manifest.json"


class UsageError(ConfigurationError):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1 with the same structured stderr line as other validation failures."""

    def error(self, message):
        sys.exit(_fail(1, UsageError(f"{self.prog}: {message}")))


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _git_describe():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _prepare_out(path, force, inputs=()):
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"--out {out} is not empty; pass --force to overwrite")
        resolved = out.resolve()
        for p in [Path.cwd(), *map(Path, inputs)]:
            p = p.resolve()
            if p == resolved or resolved in p.parents:
                raise UsageError(f"refusing to clear {out}: it contains {p}")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(out, name, text):
    p = Path(out) / name
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)
    return p


def _write_json(out, name, obj):
    return _write(out, name, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _experiment(args):
    cfg = ExperimentConfig.from_dict(load_json(args.config)) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _load_data(directory):
    from .synthetic import Dataset

    d = Path(directory)
    for part in ("train", "test"):
        if not (d / part / "manifest.jsonl").is_file():
            raise UsageError(f"{d} has no {part}/manifest.jsonl; run `pscnn gen` first")
    return Dataset.load(d / "train"), Dataset.load(d / "test")


def _need(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required for `{args.command}`")


def _parse_parts(text, num_parts):
    if text is None or text == "all":
        return tuple(range(1, num_parts + 1))
    if text in ("", "none"):
        return ()
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise UsageError(f"--parts must be 'all', 'none' or comma-separated ids, got {text!r}") from None


def _model_config(cfg, fcn_config, num_classes):
    from .classification import ClassifierConfig

    m = cfg.model
    return ClassifierConfig(
        fcn_config.geometry,
        fcn_config.num_parts,
        num_classes,
        reduce_dim=m.reduce_dim,
        crop_side=m.crop_side,
        fc6=m.fc6,
        fc7=m.fc7,
        in_channels=fcn_config.in_channels,
        input_mean=m.input_mean,
    )


def _load_fcn(path):
    from .training import checkpoint_exists, load_fcn

    if not checkpoint_exists(path):
        raise UsageError(f"{path} is not a checkpoint directory")
    return load_fcn(path)


# ---------------------------------------------------------------------------
# commands; each returns (config dict, seed, timings)
# ---------------------------------------------------------------------------


def cmd_gen(args, out):
    from .synthetic import generate, split

    cfg = GenConfig.from_dict(load_json(args.config)) if args.config else GenConfig()
    seed = 7 if args.seed is None else args.seed
    spec = cfg.creature_spec()
    t0 = time.perf_counter()
    data = generate(spec, spec.num_classes * cfg.per_class, seed)
    train, test = split(data, cfg.fractions, seed)
    train.save(out / "train")
    test.save(out / "test")
    if args.ppm:
        train.dump_ppm(out / "ppm", limit=args.ppm)
    logger.info(f"generated {len(train)} train / {len(test)} test samples")
    return cfg.to_dict() | {"spec": spec.to_dict()}, seed, {"gen": time.perf_counter() - t0}


def cmd_train_loc(args, out):
    from .localization import FCNConfig
    from .geometry import desk_geometry
    from .training import save_fcn, train_localizer

    _need(args, "data")
    cfg = _experiment(args)
    train, test = _load_data(args.data)
    fcn_cfg = FCNConfig(desk_geometry(train.spec.image_side), train.num_parts, hidden=cfg.model.hidden)
    try:
        res = train_localizer(train, test, cfg.localizer, fcn_cfg, cfg.inference)
    except TrainingError as exc:
        if exc.checkpoint is not None:
            from .io import save_checkpoint

            save_checkpoint(out / "last_good", exc.checkpoint, {"kind": "fcn", "config": fcn_cfg.to_dict(), "epoch": exc.epoch})
        raise
    save_fcn(out / "fcn", res.model, cfg.inference)
    _write(out, "log.jsonl", res.log.to_jsonl())
    _write_json(out, "report.json", res.report.to_dict())
    _write(out, "table1.txt", res.report.summary_table("FCN") + "\n" + res.report.part_table())
    print(res.report.summary_table("FCN"), end="")
    return cfg.to_dict(), cfg.localizer.seed, res.log.wall_time


def cmd_train_cls(args, out):
    from .training import load_classifier, locate, save_classifier, train_classifier

    _need(args, "data", "fcn")
    cfg = _experiment(args)
    train, test = _load_data(args.data)
    fcn, inference = _load_fcn(args.fcn)
    parts = _parse_parts(args.parts, train.num_parts)
    init = load_classifier(args.init) if args.init else None
    model_cfg = init.config if init is not None else _model_config(cfg, fcn.config, train.num_classes)
    locs = (locate(fcn, train, inference), locate(fcn, test, inference))
    res = train_classifier(train, test, fcn, parts, cfg.classifier, model_cfg, init=init, locations=locs)
    save_classifier(out / "classifier", res.model)
    _write(out, "log.jsonl", res.log.to_jsonl())
    _write_json(out, "result.json", {"accuracy": res.accuracy, "active_parts": list(parts)})
    print(f"accuracy {100 * res.accuracy:.2f}% with parts {list(parts) or 'none'}")
    return cfg.to_dict() | {"parts": list(parts)}, cfg.classifier.seed, res.log.wall_time


def cmd_eval(args, out):
    from .evaluation import accuracy, confusion_matrix
    from .training import evaluate_fcn, load_classifier, locate

    _need(args, "data", "ckpt")
    train, test = _load_data(args.data)
    t0 = time.perf_counter()
    if args.mode == "loc":
        fcn, inference = _load_fcn(args.ckpt)
        report = evaluate_fcn(fcn, test, inference)
        _write_json(out, "report.json", report.to_dict())
        _write(out, "table1.txt", report.summary_table("FCN") + "\n" + report.part_table())
        print(report.summary_table("FCN"), end="")
    else:
        _need(args, "fcn")
        fcn, inference = _load_fcn(args.fcn)
        model = load_classifier(args.ckpt)
        pred = model.predict(test.images, locate(fcn, test, inference))
        acc = accuracy(pred, test.labels)
        cm = confusion_matrix(pred, test.labels, test.num_classes)
        _write_json(out, "result.json", {"accuracy": acc, "confusion": cm.tolist(), "predictions": pred.tolist()})
        print(f"accuracy {100 * acc:.2f}%")
    return {"mode": args.mode, "ckpt": str(args.ckpt)}, None, {"eval": time.perf_counter() - t0}


def cmd_schedule(args, out):
    from .training import incremental_schedule, locate, rank_parts, save_classifier

    _need(args, "data", "fcn")
    cfg = _experiment(args)
    train, test = _load_data(args.data)
    fcn, inference = _load_fcn(args.fcn)
    model_cfg = _model_config(cfg, fcn.config, train.num_classes)
    locs = (locate(fcn, train, inference), locate(fcn, test, inference))
    order = cfg.classifier.part_order
    timings = {}
    if order is None:
        t0 = time.perf_counter()
        ranked, results = rank_parts(train, test, fcn, cfg.classifier, locations=locs, model_config=model_cfg)
        timings["rank_parts"] = time.perf_counter() - t0
        _write_json(out, "ranking.json", {"ranking": [{"part": p, "accuracy": a} for p, a in ranked]})
        order = tuple(p for p, _ in ranked)
        rank_log = "".join(r.log.to_jsonl() for r in results)
    else:
        rank_log = ""
    res = incremental_schedule(train, test, fcn, cfg.classifier, order, model_cfg, locations=locs)
    for i, r in enumerate(res.results):
        save_classifier(out / "stages" / f"stage{i}", r.model)
    _write(out, "log.jsonl", rank_log + res.log.to_jsonl())
    _write(out, "table3.txt", res.table())
    _write_json(out, "stages.json", {"part_order": list(res.part_order), "stages": [list(s) for s in res.stages]})
    print(res.table(), end="")
    timings.update(res.log.wall_time)
    return cfg.to_dict(), cfg.classifier.seed, timings


def cmd_explain(args, out):
    from .interpretation import Interpreter, build_index, build_tables
    from .training import load_classifier, locate

    _need(args, "data", "fcn", "ckpt", "sample")
    cfg = _experiment(args)
    train, test = _load_data(args.data)
    if args.sample not in test.ids:
        raise UsageError(f"sample {args.sample!r} is not in the test split")
    fcn, inference = _load_fcn(args.fcn)
    model = load_classifier(args.ckpt)
    locs = (locate(fcn, train, inference), locate(fcn, test, inference))
    t0 = time.perf_counter()
    tables = build_tables(train, test, fcn, cfg.classifier, locs, model.config, top_k=cfg.manual.top_k)
    t_tables = time.perf_counter() - t0
    _write_json(
        out,
        "tables.json",
        {"gain": tables.gain.to_dict(), "confidence": {str(p): np.round(t, 6).tolist() for p, t in tables.confidence.items()}},
    )
    _write(out, "log.jsonl", "".join(r.log.to_jsonl() for _, r in sorted(tables.results.items())))
    build_index(train, model).save(out)
    interp = Interpreter(model, train, locs[0], tables)
    i = test.ids.index(args.sample)
    m = cfg.manual
    from .interpretation import render_manual

    entry, _, _ = render_manual(test.images[i], locs[1][i], interp, m.K, m.R, m.T, args.sample, out)
    print(f"{args.sample}: predicted class {entry.predicted} (true {int(test.labels[i])})")
    return cfg.to_dict() | {"sample": args.sample}, cfg.classifier.seed, {"tables": t_tables, "manual": time.perf_counter() - t0 - t_tables}


def cmd_geometry(args, out):
    from .geometry import NetworkGeometry, caffenet_geometry, desk_geometry, format_rf_table

    if args.geometry:
        d = load_json(args.geometry)
        if args.input_side:
            d = dict(d, input_side=args.input_side)
        geom = NetworkGeometry.from_dict(d)
    else:
        presets = {
            "caffenet": lambda s: caffenet_geometry(s or 454),
            "caffenet-unpadded": lambda s: caffenet_geometry(s or 454, padded=False),
            "desk": lambda s: desk_geometry(s or 64),
        }
        geom = presets[args.preset](args.input_side)
    table = format_rf_table(geom)
    print(table, end="")
    if out is not None:
        _write(out, "rf_table.txt", table)
    return geom.to_dict(), None, {}


COMMANDS = {
    "gen": cmd_gen,
    "train-loc": cmd_train_loc,
    "train-cls": cmd_train_cls,
    "eval": cmd_eval,
    "schedule": cmd_schedule,
    "explain": cmd_explain,
    "geometry": cmd_geometry,
}


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="seed for every stochastic step")
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="clear a non-empty --out")
    common.add_argument("--threads", type=int, help="BLAS threads (default: $PSNET_THREADS)")
    common.add_argument("--quiet", action="store_true", help="suppress epoch lines")

    p = _Parser(prog="pscnn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"pscnn {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--ppm", type=int, default=0, metavar="N", help="also dump N training images as PPM")

    t = sub.add_parser("train-loc", parents=[common], help="train the part localizer")
    t.add_argument("--data", help="dataset directory from `gen`")

    c = sub.add_parser("train-cls", parents=[common], help="train the classifier on frozen part locations")
    c.add_argument("--data")
    c.add_argument("--fcn", help="localizer checkpoint")
    c.add_argument("--parts", help="'all' (default), 'none' or ids like 1,3")
    c.add_argument("--init", help="classifier checkpoint to warm-start from")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    e.add_argument("--data")
    e.add_argument("--ckpt", help="checkpoint to evaluate")
    e.add_argument("--mode", choices=("loc", "cls"), default="loc")
    e.add_argument("--fcn", help="localizer checkpoint (cls mode)")

    s = sub.add_parser("schedule", parents=[common], help="incremental part insertion")
    s.add_argument("--data")
    s.add_argument("--fcn")

    x = sub.add_parser("explain", parents=[common], help="render the manual for one test sample")
    x.add_argument("--data")
    x.add_argument("--fcn")
    x.add_argument("--ckpt", help="classifier checkpoint used for predictions and embeddings")
    x.add_argument("--sample", help="test sample id")

    r = sub.add_parser("geometry", parents=[common], help="receptive-field table")
    r.add_argument("geometry", nargs="?", help="geometry JSON file")
    r.add_argument("--preset", choices=("caffenet", "caffenet-unpadded", "desk"), default="caffenet")
    r.add_argument("--input-side", type=int)
    return p


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("PSNET_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"PSNET_THREADS must be an integer, got {env!r}") from None
    return None


def _fail(code, exc):
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    logger.handlers[:] = [handler]
    logger.setLevel(logging.WARNING if args.quiet else logging.INFO)
    logger.propagate = False
    try:
        threads = _threads(args)
        if threads is not None and threads < 1:
            raise UsageError(f"--threads must be ≥ 1, got {threads}")
        if args.out is None and args.command != "geometry":
            raise UsageError(f"--out is required for `{args.command}`")
        if args.config and not Path(args.config).is_file():
            raise UsageError(f"config file {args.config} does not exist")
        inputs = [getattr(args, k) for k in ("data", "fcn", "ckpt", "init", "config") if getattr(args, k, None)]
        out = _prepare_out(args.out, args.force, inputs) if args.out else None
        from threadpoolctl import threadpool_limits

        t0 = time.perf_counter()
        with threadpool_limits(limits=threads):
            cfg, seed, timings = COMMANDS[args.command](args, out)
        timings = dict(timings, total=time.perf_counter() - t0)
        if out is not None:
            outputs = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file())
            manifest = {
                "command": args.command,
                "config_hash": config_hash(cfg),
                "config": cfg,
                "seed": seed,
                "git_describe": _git_describe(),
                "version": __version__,
                "outputs": outputs,
                "timings": {k: round(v, 3) for k, v in timings.items()},
            }
            _write_json(out, MANIFEST, manifest)
    except TrainingError as exc:
        return _fail(2, exc)
    except (ValueError, LookupError, FileNotFoundError, NotADirectoryError) as exc:
        return _fail(1, exc)
    except (RuntimeError, FloatingPointError, OSError) as exc:
        return _fail(2, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
