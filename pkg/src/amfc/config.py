"""JSON run configuration shared by the CLI subcommands."""

import copy
import hashlib
import json

import jsonschema

from .bench import SCENARIOS, BenchSettings
from .errors import ConfigurationError
from .featurespace import SELECTION_MODES, isqrt_exact
from .heads import HEAD_KINDS

_POS_INT = {"type": "integer", "minimum": 1}
_INT_LIST = {"type": "array", "items": _POS_INT}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "architecture": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "input_h": _POS_INT,
                "channels": {**_INT_LIST, "minItems": 1},
                "pool_after": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "hidden": _INT_LIST,
            },
        },
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "corpus_dir": {"type": "string"},
                "labels_csv": {"type": "string"},
                "synth": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "classes": {"type": "integer", "minimum": 2, "maximum": 5},
                        "per_class": _POS_INT,
                        "jitter_px": {"type": "integer", "minimum": 0},
                        "noise": {"type": "number", "minimum": 0},
                        "seed": {"type": "integer", "minimum": 0},
                    },
                },
            },
        },
        "M": _POS_INT,
        "p_schedule": {**_INT_LIST, "minItems": 1},
        "scenarios": {"type": "array", "items": {"enum": sorted(SCENARIOS)}, "minItems": 1},
        "heads": {"type": "array", "items": {"enum": list(HEAD_KINDS)}, "minItems": 1},
        "selection": {"enum": list(SELECTION_MODES)},
        "head": {"enum": list(HEAD_KINDS)},
        "cnn": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch": _POS_INT,
                "max_epochs": {"type": "integer", "minimum": 0},
                "patience": _POS_INT,
            },
        },
        "head_hyper": {
            "type": "object",
            "additionalProperties": False,
            "properties": {kind: {"type": "object"} for kind in HEAD_KINDS},
        },
        "folds": {"type": "integer", "minimum": 2},
        "validation_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "timing": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"repeats": {"type": "integer", "minimum": 30}, "warmup": {"type": "integer", "minimum": 0}},
        },
        "seed": {"type": "integer", "minimum": 0},
        "out_dir": {"type": "string"},
    },
}

DEFAULTS = {
    "architecture": {"input_h": 32, "channels": [8, 16, 16, 32], "pool_after": [1, 3], "hidden": [64]},
    "dataset": {},
    "M": 200,
    "p_schedule": [196, 144, 100, 64],
    "scenarios": [1, 2, 3, 4, 5, 6],
    "heads": ["mlp", "knn"],
    "selection": "first_ranked",
    "head": "mlp",
    "cnn": {"lr": 0.05, "batch": 20, "max_epochs": 30, "patience": 5},
    "head_hyper": {},
    "folds": 5,
    "validation_fraction": 0.1,
    "timing": {"repeats": 30, "warmup": 5},
    "seed": 0,
    "out_dir": "amfc-out",
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _semantic_errors(cfg):
    errors = []
    arch = cfg["architecture"]
    h = arch["input_h"]
    for i in sorted(arch["pool_after"]):
        if i >= len(arch["channels"]):
            errors.append(f"architecture.pool_after: layer {i} does not exist")
        elif h % 2:
            errors.append(f"architecture.pool_after: cannot pool odd map size {h} after layer {i}")
        else:
            h //= 2
    sched = cfg["p_schedule"]
    if len(sched) > len(arch["channels"]):
        errors.append(f"p_schedule: {len(sched)} entries but only {len(arch['channels'])} conv layers")
    bad = [p for p in sched[:-1] if isqrt_exact(p) is None]
    if bad:
        errors.append(f"p_schedule: interior entries must be perfect squares, got {bad}")
    if sched and sched[0] > arch["input_h"] ** 2:
        errors.append(f"p_schedule: first entry {sched[0]} exceeds input dimension {arch['input_h'] ** 2}")
    for i in range(1, len(sched)):
        if sched[i] > sched[i - 1]:
            errors.append(f"p_schedule[{i}]={sched[i]} exceeds the previous layer's dimension {sched[i - 1]}")
    ds = cfg["dataset"]
    has_corpus = "corpus_dir" in ds or "labels_csv" in ds
    if has_corpus and "synth" in ds:
        errors.append("dataset: give either corpus_dir/labels_csv or synth, not both")
    if has_corpus and not ("corpus_dir" in ds and "labels_csv" in ds):
        errors.append("dataset: corpus_dir and labels_csv must be given together")
    return errors


def validate_config(raw):
    """Validate and fill defaults. Raises ConfigurationError listing every violation."""
    if not isinstance(raw, dict):
        raise ConfigurationError("config: top level must be a JSON object")
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = []
    for err in sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path))):
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        errors.append(f"{where}: {err.message}")
    cfg = _merge(DEFAULTS, raw)
    try:
        errors.extend(_semantic_errors(cfg))
    except (TypeError, KeyError, ValueError, AttributeError):
        pass  # mistyped fields are already reported by the schema pass
    if errors:
        raise ConfigurationError(f"config: {len(errors)} violation(s): " + "; ".join(errors))
    return cfg


def load_config(path, seed=None, out_dir=None):
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config: {path} is not valid JSON ({exc})") from None
    cfg = validate_config(raw)
    if seed is not None:
        cfg["seed"] = seed
    if out_dir is not None:
        cfg["out_dir"] = out_dir
    return cfg


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def bench_settings(cfg):
    arch = cfg["architecture"]
    return BenchSettings(
        channels=tuple(arch["channels"]),
        pool_after=tuple(arch["pool_after"]),
        hidden=tuple(arch["hidden"]),
        cnn_hyper=dict(cfg["cnn"]),
        head_hyper={k: dict(v) for k, v in cfg["head_hyper"].items()},
        m=cfg["M"],
        p_schedule=tuple(cfg["p_schedule"]),
        k=cfg["folds"],
        seed=cfg["seed"],
        repeats=cfg["timing"]["repeats"],
        warmup=cfg["timing"]["warmup"],
        validation_fraction=cfg["validation_fraction"],
    )
