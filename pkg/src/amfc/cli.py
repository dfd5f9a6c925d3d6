"""``amfc`` command-line interface."""

import argparse
import datetime
import json
import logging
import os
import platform
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .analysis import export_curve_csv, export_eigenimages, export_mean_image, representation_curve
from .bench import emit_report, run_grid
from .chain import AmfcModel, classify, fit_head, load_amfc_model, project_dataset, save_amfc_model
from .cnn import load_model, mini_vgg, predict_one, save_model, train
from .config import bench_settings, config_hash, load_config
from .data import load_corpus, load_image, save_corpus, stratified_holdout, synth_corpus
from .errors import AmfcError, ConfigurationError
from .featurespace import build_bank, load_bank, save_bank

logger = logging.getLogger("amfc")


def _dataset(cfg):
    ds_cfg = cfg["dataset"]
    h = cfg["architecture"]["input_h"]
    if "synth" in ds_cfg:
        s = {"classes": 3, "per_class": 125, "jitter_px": 2, "noise": 0.05, "seed": cfg["seed"], **ds_cfg["synth"]}
        return synth_corpus(s["classes"], s["per_class"], h, s["jitter_px"], s["seed"], s["noise"])
    if "corpus_dir" in ds_cfg:
        return load_corpus(ds_cfg["corpus_dir"], ds_cfg["labels_csv"], h)
    raise ConfigurationError("config: 1 violation(s): dataset: corpus_dir/labels_csv or synth is required")


def _out(cfg, name):
    os.makedirs(cfg["out_dir"], exist_ok=True)
    return os.path.join(cfg["out_dir"], name)


def _resolve(path_arg, cfg, default_name, create=False):
    """Explicit path, or ``default_name`` inside the output directory."""
    path = path_arg if path_arg else os.path.join(cfg["out_dir"], default_name)
    if create:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    return path


def _split(cfg, ds):
    return stratified_holdout(ds, cfg["validation_fraction"], cfg["seed"])


def cmd_synth_data(args):
    ds = synth_corpus(args.classes, args.per_class, args.size, args.jitter, args.seed or 0, args.noise)
    csv_path = save_corpus(ds, args.out)
    return {"corpus_dir": args.out, "labels_csv": csv_path}, None


def cmd_train(args, cfg):
    ds = _dataset(cfg)
    fit_ds, val_ds = _split(cfg, ds)
    arch = cfg["architecture"]
    spec = mini_vgg(ds.n_classes, arch["input_h"], arch["channels"], arch["pool_after"], arch["hidden"])
    model = train(spec, fit_ds, val_ds, seed=cfg["seed"], **cfg["cnn"])
    path = _resolve(args.model, cfg, "model.amfcw", create=True)
    save_model(model, path)
    return {"model": path}


def cmd_extract_spaces(args, cfg):
    model = load_model(_resolve(args.model, cfg, "model.amfcw"))
    ds = _dataset(cfg)
    fit_ds, _ = _split(cfg, ds)
    schedule = cfg["p_schedule"][: args.layers] if args.layers else cfg["p_schedule"]
    bank = build_bank(model, fit_ds.images, min(cfg["M"], len(fit_ds)), schedule, cfg["selection"], cfg["seed"])
    path = _resolve(args.bank, cfg, "bank.amfcb", create=True)
    save_bank(bank, path)
    return {"bank": path}


def cmd_fit(args, cfg):
    bank_path = _resolve(args.bank, cfg, "bank.amfcb")
    bank = load_bank(bank_path)
    ds = _dataset(cfg)
    fit_ds, val_ds = _split(cfg, ds)
    kind = args.kind or cfg["head"]
    hyper = dict(cfg["head_hyper"].get(kind, {}))
    if kind == "mlp":
        hyper.setdefault("random_state", cfg["seed"])
    head = fit_head(kind, project_dataset(bank, fit_ds), project_dataset(bank, val_ds), hyper, ds.n_classes)
    path = _resolve(args.head, cfg, "head.amfcm", create=True)
    rel_bank = os.path.relpath(os.path.abspath(bank_path), os.path.dirname(os.path.abspath(path)))
    save_amfc_model(AmfcModel(bank, head, bank.input_h), path, bank_path=rel_bank)
    return {"head": path}


def cmd_classify(args):
    bank = load_bank(args.bank) if args.bank else None
    model = load_amfc_model(args.head, bank)
    image = load_image(args.image, model.input_h)
    label, scores = classify(model, image)
    lines = [f"class={label}", "scores=" + ",".join(f"{s:.6f}" for s in scores)]
    if args.model:
        cnn = load_model(args.model)
        probs = predict_one(cnn, image)
        lines.append(f"cnn_class={int(np.argmax(probs))}")
    return lines


def cmd_bench(args, cfg):
    ds = _dataset(cfg)
    report = run_grid(ds, cfg["scenarios"], cfg["heads"], bench_settings(cfg), threads=args.threads)
    json_path, csv_path = _out(cfg, "report.json"), _out(cfg, "report.csv")
    emit_report(report, json_path, "json")
    emit_report(report, csv_path, "csv")
    return {"report_json": json_path, "report_csv": csv_path}


def cmd_analyze(args, cfg):
    bank = load_bank(_resolve(args.bank, cfg, "bank.amfcb"))
    out_dir = _out(cfg, "analysis")
    os.makedirs(out_dir, exist_ok=True)
    spectra = None
    if args.full_spectrum:
        model = load_model(_resolve(args.model, cfg, "model.amfcw"))
        fit_ds, _ = _split(cfg, _dataset(cfg))
        spectra = []
        schedule = [s.p for s in bank.spaces]
        build_bank(model, fit_ds.images, min(cfg["M"], len(fit_ds)), schedule, cfg["selection"],
                   cfg["seed"], spectra=spectra)
    artifacts = {}
    for layer, space in enumerate(bank.spaces, start=1):
        lam = spectra[layer - 1] if spectra else space.eigenvalues
        curve_path = os.path.join(out_dir, f"l{layer}_representation.csv")
        export_curve_csv(representation_curve(lam, layer), curve_path)
        artifacts[f"l{layer}_curve"] = curve_path
        if space.h_in is not None:
            export_eigenimages(space, args.first, args.last, out_dir, layer)
            artifacts[f"l{layer}_mean"] = export_mean_image(space, os.path.join(out_dir, f"l{layer}_mean.pgm"), layer)
    return artifacts


def _write_manifest(cfg, command, started, artifacts):
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg) if cfg else None,
        "seed": cfg["seed"] if cfg else None,
        "versions": {
            "amfc": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
        "started": started,
        "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "artifacts": artifacts,
    }
    out_dir = cfg["out_dir"] if cfg else None
    if out_dir is None:
        return None
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "run-manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="cap BLAS worker threads")
    common.add_argument("--out", help="output directory (overrides config out_dir)")

    parser = argparse.ArgumentParser(prog="amfc", description="CNN acceleration by chained per-layer PCA projections")
    parser.add_argument("--version", action="version", version=f"amfc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", parents=[common], help="write a synthetic PGM corpus")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--per-class", type=int, default=125)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--jitter", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.05)

    p = sub.add_parser("train", parents=[common], help="train the CNN")
    p.add_argument("--model", help="weights output path")

    p = sub.add_parser("extract-spaces", parents=[common], help="build the layer-space bank")
    p.add_argument("--model")
    p.add_argument("--bank", help="bank output path")
    p.add_argument("--layers", type=int, help="use only the first N layers of p_schedule")

    p = sub.add_parser("fit", parents=[common], help="fit a classifier head on projected samples")
    p.add_argument("--bank")
    p.add_argument("--head", help="head output path")
    p.add_argument("--kind", choices=["mlp", "knn", "gnb"])

    p = sub.add_parser("classify", parents=[common], help="classify one image")
    p.add_argument("--head", required=True)
    p.add_argument("--bank", help="bank file (default: the one referenced by the head)")
    p.add_argument("--model", help="CNN weights; also report the CNN's class")
    p.add_argument("--image", required=True)

    p = sub.add_parser("bench", parents=[common], help="run the scenario x head x fold grid")

    p = sub.add_parser("analyze", parents=[common], help="representation curves and eigenimages")
    p.add_argument("--bank")
    p.add_argument("--model")
    p.add_argument("--first", type=int, default=20)
    p.add_argument("--last", type=int, default=20)
    p.add_argument("--full-spectrum", action="store_true",
                   help="recompute every valid eigenvalue instead of the stored selection")
    return parser


def _configure_logging():
    level = os.environ.get("AMFC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _configure_logging()
    args = build_parser().parse_args(argv)
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    try:
        with threadpool_limits(limits=args.threads):
            if args.command == "classify":
                cfg = load_config(args.config, args.seed, args.out) if args.config else None
                lines = cmd_classify(args)
                if cfg is None and args.out:
                    cfg = {"out_dir": args.out, "seed": args.seed}
                if cfg is not None:
                    _write_manifest(cfg, "classify", started, {"head": args.head, "image": args.image})
                for line in lines:
                    print(line)
                return 0
            if args.command == "synth-data":
                if not args.out:
                    raise ConfigurationError("synth-data: --out is required")
                artifacts, _ = cmd_synth_data(args)
                cfg = {"out_dir": args.out, "seed": args.seed or 0, "synth": vars(args).copy()}
                cfg["synth"].pop("func", None)
            else:
                if not args.config:
                    raise ConfigurationError(f"{args.command}: --config is required")
                cfg = load_config(args.config, args.seed, args.out)
                handler = {
                    "train": cmd_train,
                    "extract-spaces": cmd_extract_spaces,
                    "fit": cmd_fit,
                    "bench": cmd_bench,
                    "analyze": cmd_analyze,
                }[args.command]
                artifacts = handler(args, cfg)
            artifacts["manifest"] = _write_manifest(cfg, args.command, started, artifacts)
    except (AmfcError, OSError) as exc:
        message = " ".join(str(exc).split())
        print(f"amfc: error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigurationError) else 1
    for key, path in artifacts.items():
        print(f"{key}={path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
