"""Speed-up and accuracy benchmarking over the scenario grid with k-fold splits."""

import csv
import json
import logging
import math
import platform
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .chain import AmfcModel, classify, fit_head, project_dataset
from .cnn import accuracy, mini_vgg, predict_one, train
from .data import fold_view, make_folds, stratified_holdout
from .errors import BenchError, ConfigurationError, FormatError
from .featurespace import build_bank

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "amfc-report/1"
CSV_COLUMNS = ("fold", "scenario", "head", "acc_amfc", "acc_cnn", "t_cnn_ns", "t_amfc_ns", "spu")

# scenario id -> (layers used, eigenvector selection)
SCENARIOS = {
    1: ("all", "first_ranked"),
    2: ("first_half", "first_ranked"),
    3: ("all", "last_ranked"),
    4: ("all", "random"),
    5: ("first_half", "last_ranked"),
    6: ("first_half", "random"),
}

# Full-scale VGG-16 figures (database 1, scenario 1, MLP head); documentation only,
# not reproduced at desk scale.
REFERENCE_FIGURES = {
    "database": 1,
    "scenario": 1,
    "head": "mlp",
    "acc_amfc": 0.973,
    "acc_cnn": 0.988,
    "spu": 16.9,
}

TIMING_LOCK = threading.Lock()


def first_half_layers(n_layers):
    """Layers kept by the "first half" scenarios: 7 of 13 scaled to ``n_layers``."""
    return max(1, math.floor(n_layers * 7 / 13 + 0.5))


@dataclass(frozen=True)
class ScenarioConfig:
    id: int
    layers: str
    selection: str

    @classmethod
    def from_id(cls, scenario_id):
        if scenario_id not in SCENARIOS:
            raise ConfigurationError(f"scenario id must be one of {sorted(SCENARIOS)}, got {scenario_id}")
        return cls(scenario_id, *SCENARIOS[scenario_id])

    def layer_count(self, n_layers):
        return n_layers if self.layers == "all" else first_half_layers(n_layers)


@dataclass(frozen=True)
class TimingStats:
    median_ns: float
    iqr_ns: float
    repeats: int
    warmup: int


def time_classifier(f, samples, repeats=30, warmup=5):
    """Median and IQR wall time of single-sample calls ``f(sample)``.

    Runs ``warmup`` untimed calls first, then ``repeats`` timed ones cycling
    through ``samples``.  Measurements are serialized through a global lock.
    """
    if repeats < 30:
        raise ConfigurationError(f"repeats must be >= 30, got {repeats}")
    if len(samples) == 0:
        raise ConfigurationError("need at least one sample to time")
    if not time.get_clock_info("perf_counter").monotonic:
        raise BenchError("perf_counter is not monotonic on this platform")
    clock = time.perf_counter_ns
    times = np.empty(repeats)
    with TIMING_LOCK:
        for i in range(warmup):
            f(samples[i % len(samples)])
        for i in range(repeats):
            sample = samples[i % len(samples)]
            t0 = clock()
            f(sample)
            times[i] = clock() - t0
    if not np.all(np.isfinite(times)) or times.min() < 0:
        raise BenchError("clock returned invalid intervals")
    q1, med, q3 = np.percentile(times, [25, 50, 75])
    return TimingStats(float(med), float(q3 - q1), repeats, warmup)


@dataclass
class BenchSettings:
    channels: tuple = (8, 16, 16, 32)
    pool_after: tuple = (1, 3)
    hidden: tuple = (64,)
    cnn_hyper: dict = field(default_factory=lambda: {"lr": 0.05, "batch": 20, "max_epochs": 30, "patience": 5})
    head_hyper: dict = field(default_factory=dict)
    m: int = 200
    p_schedule: tuple = (196, 144, 100, 64)
    k: int = 5
    seed: int = 0
    repeats: int = 30
    warmup: int = 5
    validation_fraction: float = 0.1

    def to_dict(self):
        d = asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


@dataclass
class FoldRecord:
    fold: int
    scenario: int
    head: str
    acc_amfc: float
    acc_cnn: float
    t_cnn: TimingStats = None
    t_amfc: TimingStats = None
    spu: float = float("nan")
    layers_used: int = 0
    error: str = None


@dataclass
class BenchReport:
    records: list
    environment: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    def rows(self):
        """Flat CSV rows in report order."""
        out = []
        for r in self.records:
            out.append({
                "fold": r.fold,
                "scenario": r.scenario,
                "head": r.head,
                "acc_amfc": r.acc_amfc,
                "acc_cnn": r.acc_cnn,
                "t_cnn_ns": r.t_cnn.median_ns if r.t_cnn else float("nan"),
                "t_amfc_ns": r.t_amfc.median_ns if r.t_amfc else float("nan"),
                "spu": r.spu,
            })
        return out

    def mean_accuracy(self, scenario, head):
        accs = [r.acc_amfc for r in self.records if r.scenario == scenario and r.head == head]
        return float(np.mean(accs)) if accs else float("nan")


def environment_note(threads=None):
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "threads": threads,
        "timed_cnn_path": "full forward pass: conv, ReLU, pool, fc, softmax; no preprocessing",
        "timed_amfc_path": "projection chain and head; no preprocessing",
    }


def _train_fold_model(train_ds, settings, fold):
    fit_ds, val_ds = stratified_holdout(train_ds, settings.validation_fraction, settings.seed + fold)
    spec = mini_vgg(train_ds.n_classes, train_ds.size, settings.channels, settings.pool_after, settings.hidden)
    hyper = dict(settings.cnn_hyper)
    return train(spec, fit_ds, val_ds, seed=settings.seed + fold, **hyper)


def _head_hyper(settings, kind, fold):
    hyper = dict(settings.head_hyper.get(kind, {}))
    if kind == "mlp":
        hyper.setdefault("random_state", settings.seed + fold)
    return hyper


def _run_fold(ds, plan, fold, scenarios, heads, settings, model=None):
    train_ds, test_ds = fold_view(ds, plan, fold)
    fit_ds, val_ds = stratified_holdout(train_ds, settings.validation_fraction, settings.seed + fold)
    if model is None:
        model = _train_fold_model(train_ds, settings, fold)
    acc_cnn = accuracy(model, test_ds)
    n_layers = len(model.spec.conv_layers)
    timing_samples = list(test_ds.images)
    records = []
    for scenario in scenarios:
        layers = scenario.layer_count(n_layers)
        try:
            schedule = list(settings.p_schedule)[:layers]
            bank = build_bank(model, train_ds.images, min(settings.m, len(train_ds)), schedule,
                              scenario.selection, settings.seed + fold, scenario=scenario.id)
            z_fit = project_dataset(bank, fit_ds)
            z_val = project_dataset(bank, val_ds)
            z_test = np.array([s.z for s in project_dataset(bank, test_ds)])
        except Exception as exc:  # keep going, mark every head of this cell
            logger.warning("fold %d scenario %d failed: %s", fold, scenario.id, exc)
            for kind in heads:
                records.append(FoldRecord(fold, scenario.id, kind, float("nan"), acc_cnn,
                                          layers_used=layers, error=f"{type(exc).__name__}: {exc}"))
            continue
        for kind in heads:
            try:
                head = fit_head(kind, z_fit, z_val, _head_hyper(settings, kind, fold), n_classes=ds.n_classes)
                acc = float(np.mean(head.predict(z_test) == test_ds.labels))
                amfc = AmfcModel(bank, head, ds.size)
                t_cnn = time_classifier(lambda img: predict_one(model, img), timing_samples,
                                        settings.repeats, settings.warmup)
                t_amfc = time_classifier(lambda img: classify(amfc, img), timing_samples,
                                         settings.repeats, settings.warmup)
                records.append(FoldRecord(fold, scenario.id, kind, acc, acc_cnn, t_cnn, t_amfc,
                                          t_cnn.median_ns / t_amfc.median_ns, layers))
            except Exception as exc:
                logger.warning("fold %d scenario %d head %s failed: %s", fold, scenario.id, kind, exc)
                records.append(FoldRecord(fold, scenario.id, kind, float("nan"), acc_cnn,
                                          layers_used=layers, error=f"{type(exc).__name__}: {exc}"))
    return model, records


def run_scenario(ds, scenario_id, head_kind, settings=None, models=None):
    """Fold records for one scenario and head over the k folds."""
    report = run_grid(ds, [scenario_id], [head_kind], settings, models)
    return report.records


def run_grid(ds, scenario_ids, heads, settings=None, models=None, threads=None):
    """Cartesian product of scenarios and heads over shared folds.

    One CNN is trained per fold (or taken from ``models``) and reused by every
    scenario; one bank is built per fold and scenario and shared by the heads.
    Returns the report and leaves trained fold models in ``report.models``.
    """
    settings = settings or BenchSettings()
    scenarios = [ScenarioConfig.from_id(s) for s in scenario_ids]
    plan = make_folds(ds, settings.k, settings.seed)
    records, fold_models = [], []
    for fold in range(settings.k):
        model = models[fold] if models is not None else None
        model, fold_records = _run_fold(ds, plan, fold, scenarios, heads, settings, model)
        fold_models.append(model)
        records.extend(fold_records)
        logger.info("fold %d done", fold)
    report = BenchReport(records, environment_note(threads), settings.to_dict())
    report.models = fold_models
    report.plan = plan
    return report


# -- report I/O -------------------------------------------------------------------------

def _timing_dict(t):
    return None if t is None else asdict(t)


def report_to_dict(report):
    results, timings = [], []
    for r in report.records:
        results.append({
            "fold": r.fold, "scenario": r.scenario, "head": r.head,
            "layers_used": r.layers_used, "acc_amfc": r.acc_amfc, "acc_cnn": r.acc_cnn,
            "error": r.error,
        })
        timings.append({
            "fold": r.fold, "scenario": r.scenario, "head": r.head,
            "t_cnn": _timing_dict(r.t_cnn), "t_amfc": _timing_dict(r.t_amfc), "spu": r.spu,
        })
    return {
        "schema": REPORT_SCHEMA,
        "environment": report.environment,
        "settings": report.settings,
        "reference_figures": REFERENCE_FIGURES,
        "results": results,
        "timings": timings,
    }


def report_from_dict(d):
    if not isinstance(d, dict):
        raise FormatError("report must be a JSON object")
    if d.get("schema") != REPORT_SCHEMA:
        raise FormatError(f"unsupported report schema {d.get('schema')!r}")
    try:
        results, timings = d["results"], d["timings"]
        if len(results) != len(timings):
            raise FormatError("results and timings have different lengths")
        records = []
        for res, tim in zip(results, timings):
            if (res["fold"], res["scenario"], res["head"]) != (tim["fold"], tim["scenario"], tim["head"]):
                raise FormatError("results and timings are not aligned")
            records.append(FoldRecord(
                res["fold"], res["scenario"], res["head"], res["acc_amfc"], res["acc_cnn"],
                TimingStats(**tim["t_cnn"]) if tim["t_cnn"] else None,
                TimingStats(**tim["t_amfc"]) if tim["t_amfc"] else None,
                tim["spu"], res["layers_used"], res["error"],
            ))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed report ({exc})") from None
    return BenchReport(records, d.get("environment", {}), d.get("settings", {}))


def emit_report(report, path, fmt="json"):
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(report_to_dict(report), fh, indent=2, sort_keys=True)
            fh.write("\n")
    elif fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for row in report.rows():
                writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in CSV_COLUMNS])
    else:
        raise ConfigurationError(f"unknown report format {fmt!r}")


def load_report(path):
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from None
    return report_from_dict(d)


def read_report_csv(path):
    """Parse a report CSV back into typed row dicts."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise FormatError(f"{path}: unexpected CSV header {reader.fieldnames}")
        rows = []
        for r in reader:
            line = reader.line_num
            if None in r or any(r[c] is None for c in CSV_COLUMNS):
                raise FormatError(f"{path}:{line}: expected {len(CSV_COLUMNS)} columns")
            try:
                rows.append({
                    "fold": int(r["fold"]), "scenario": int(r["scenario"]), "head": r["head"],
                    **{c: float(r[c]) for c in CSV_COLUMNS[3:]},
                })
            except ValueError as exc:
                raise FormatError(f"{path}:{line}: {exc}") from None
    return rows
