"""Experiment config, execution and artifacts.

Configs are INI files. Every section is optional and an empty file gives the
defaults. Unknown sections or keys are rejected::

    [experiment]  run_name, master_seed, kind, output_dir
    [dataset]     source (synth_blobs | idx | csv), n, dim, num_classes, separation, noise,
                  test_n, images, labels, test_images, test_labels, csv, test_csv,
                  label_column, n_server
    [partition]   mode, num_clients, k, alpha
    [model]       hidden_dims, conv_channels, image_shape, sbn_epsilon
    [augment]     preset (vectors | images | identity), jitter_std, pad, magnitude, n_ops
    [protocol]    every ProtocolConfig field
    [theory]      TheoryConfig fields plus seeds, beta, unlabeled_scale

``kind`` selects semifl, one of the baselines, or theory.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, data, protocol, theory
from .augment import AugmentPolicy
from .baselines import BaselineKind
from .errors import ConfigError, FormatError, SemiFLError
from .model import Model, ModelConfig, save_checkpoint

OUTPUT_ROOT_ENV = "SEMIFL_OUTPUT_ROOT"
KINDS = ("semifl", "theory") + tuple(k.value for k in BaselineKind)
TEST_SEED_OFFSET = 10**6


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synth_blobs"
    n: int = 10000
    dim: int = 50
    num_classes: int = 10
    separation: float = 5.0
    noise: float = 1.0
    test_n: int = 2000
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    csv: str = ""
    test_csv: str = ""
    label_column: str = "label"
    n_server: int = 100

    def __post_init__(self):
        if self.source not in ("synth_blobs", "idx", "csv"):
            raise ConfigError(f"unknown dataset source {self.source!r}")
        if self.source == "idx" and not (self.images and self.labels and self.test_images and self.test_labels):
            raise ConfigError("idx source needs images, labels, test_images and test_labels")
        if self.source == "csv" and not (self.csv and self.test_csv):
            raise ConfigError("csv source needs csv and test_csv")
        if self.source == "synth_blobs" and (self.n < self.num_classes or self.test_n < 1 or self.dim < 1):
            raise ConfigError("synth_blobs needs n >= num_classes, test_n >= 1 and dim >= 1")
        if self.num_classes < 2 or self.n_server < 1:
            raise ConfigError("num_classes must be >= 2 and n_server >= 1")


@dataclass(frozen=True)
class ModelSection:
    hidden_dims: tuple[int, ...] = (64,)
    conv_channels: tuple[int, ...] = ()
    image_shape: tuple[int, ...] | None = None
    sbn_epsilon: float = 1e-5


@dataclass(frozen=True)
class AugmentSection:
    preset: str = "vectors"
    jitter_std: float = 0.1
    pad: int = 4
    magnitude: int = 10
    n_ops: int = 2

    def __post_init__(self):
        if self.preset not in ("vectors", "images", "identity"):
            raise ConfigError(f"unknown augment preset {self.preset!r}")


@dataclass(frozen=True)
class TheorySection:
    config: theory.TheoryConfig = field(default_factory=theory.TheoryConfig)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    beta: tuple[float, ...] = (2.0,)
    unlabeled_scale: float = 2.0


@dataclass(frozen=True)
class ExperimentConfig:
    run_name: str = "semifl"
    master_seed: int = 0
    kind: str = "semifl"
    output_dir: str = "runs"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    partition: data.PartitionSpec = field(default_factory=data.PartitionSpec)
    model: ModelSection = field(default_factory=ModelSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    protocol: protocol.ProtocolConfig = field(default_factory=protocol.ProtocolConfig)
    theory: TheorySection = field(default_factory=TheorySection)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; choose from {KINDS}")
        if not self.run_name or "/" in self.run_name:
            raise ConfigError("run_name must be a non-empty name without '/'")

    def canonical(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self), sort_keys=True, default=list))

    def config_hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, master_seed=int(seed))


# -- parsing ---------------------------------------------------------------

def _to_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _to_tuple(cast):
    def parse(text: str):
        parts = [p.strip() for p in text.replace(";", ",").split(",") if p.strip()]
        return tuple(cast(p) for p in parts)
    return parse


def _optional_shape(text: str):
    return _to_tuple(int)(text) or None


def _caster(ftype):
    kinds = {"int": int, "float": float, "str": str, "bool": _to_bool,
             "tuple[int, ...]": _to_tuple(int), "tuple[float, ...]": _to_tuple(float),
             "tuple[int, ...] | None": _optional_shape}
    if ftype not in kinds:
        raise TypeError(f"no parser for field type {ftype}")
    return kinds[ftype]


def _build(cls, section: str, values: dict[str, str], skip=()):
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}
    kwargs = {}
    for key, raw in values.items():
        if key not in fields:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        try:
            kwargs[key] = _caster(fields[key].type)(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"[{section}] {exc}") from None
    except SemiFLError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


SECTIONS = ("experiment", "dataset", "partition", "model", "augment", "protocol", "theory")
_THEORY_EXTRA = ("seeds", "beta", "unlabeled_scale")


def parse_config(path: str | Path | None = None, overrides: dict[str, str] | None = None,
                 text: str | None = None) -> ExperimentConfig:
    """Read an INI config; ``overrides`` maps ``"section.key"`` to a value and wins over the file."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        if path is not None:
            with open(path) as fh:
                cp.read_file(fh, source=str(path))
        if text is not None:
            cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    for dotted, value in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        sec, key = dotted.split(".", 1)
        if not cp.has_section(sec):
            cp.add_section(sec)
        cp.set(sec, key, str(value))
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown config section [{sec}]")
    get = lambda sec: dict(cp.items(sec)) if cp.has_section(sec) else {}

    exp = get("experiment")
    known = {"run_name", "master_seed", "kind", "output_dir"}
    for key in exp:
        if key not in known:
            raise ConfigError(f"[experiment] unknown key {key!r}")
    try:
        seed = int(exp.get("master_seed", 0))
    except ValueError as exc:
        raise ConfigError(f"[experiment] master_seed: {exc}") from None

    part = get("partition")
    if "seed" in part:
        raise ConfigError("[partition] seed is derived from master_seed")
    partition_spec = _build(data.PartitionSpec, "partition", part, skip=("seed",))
    partition_spec = dataclasses.replace(partition_spec, seed=seed)

    th = get("theory")
    extra = {k: th.pop(k) for k in list(th) if k in _THEORY_EXTRA}
    tcfg = _build(theory.TheoryConfig, "theory", th)
    try:
        tsec = TheorySection(
            tcfg,
            _to_tuple(int)(extra["seeds"]) if "seeds" in extra else TheorySection.seeds,
            _to_tuple(float)(extra["beta"]) if "beta" in extra else TheorySection.beta,
            float(extra.get("unlabeled_scale", 2.0)),
        )
    except ValueError as exc:
        raise ConfigError(f"[theory] {exc}") from None
    if not tsec.seeds or not tsec.beta or not tsec.unlabeled_scale > 0:
        raise ConfigError("[theory] seeds and beta must be non-empty and unlabeled_scale > 0")

    return ExperimentConfig(
        run_name=exp.get("run_name", "semifl"),
        master_seed=seed,
        kind=exp.get("kind", "semifl"),
        output_dir=exp.get("output_dir", "runs"),
        dataset=_build(DatasetSpec, "dataset", get("dataset")),
        partition=partition_spec,
        model=_build(ModelSection, "model", get("model")),
        augment=_build(AugmentSection, "augment", get("augment")),
        protocol=_build(protocol.ProtocolConfig, "protocol", get("protocol")),
        theory=tsec,
    )


# -- building a run --------------------------------------------------------

@dataclass
class Prepared:
    setup: protocol.FederatedSetup
    full: data.LabeledDataset
    manifest: dict


def load_data(spec: DatasetSpec, seed: int) -> tuple[data.LabeledDataset, data.LabeledDataset]:
    if spec.source == "synth_blobs":
        train = data.synth_blobs(spec.n, spec.dim, spec.num_classes, spec.separation, seed, spec.noise)
        test = data.synth_blobs(spec.test_n, spec.dim, spec.num_classes, spec.separation,
                                seed + TEST_SEED_OFFSET, spec.noise)
        return train, test
    if spec.source == "idx":
        return (data.load_idx(spec.images, spec.labels, spec.num_classes),
                data.load_idx(spec.test_images, spec.test_labels, spec.num_classes))
    return (data.load_csv(spec.csv, spec.label_column, spec.num_classes),
            data.load_csv(spec.test_csv, spec.label_column, spec.num_classes))


def _policy(cfg: ExperimentConfig) -> AugmentPolicy:
    a = cfg.augment
    if a.preset == "identity":
        return AugmentPolicy.identity()
    if a.preset == "images":
        if cfg.model.image_shape is None:
            raise ConfigError("[augment] images preset needs [model] image_shape")
        return AugmentPolicy.for_images(cfg.model.image_shape, a.pad, a.magnitude, a.n_ops)
    return AugmentPolicy.for_vectors(a.jitter_std, a.magnitude, a.n_ops)


def prepare(cfg: ExperimentConfig) -> Prepared:
    train, test = load_data(cfg.dataset, cfg.master_seed)
    server, shards, manifest = data.split_server_clients(train, cfg.dataset.n_server, cfg.partition,
                                                         cfg.master_seed)
    m = cfg.model
    model = Model(ModelConfig(train.x.shape[1], m.hidden_dims, train.num_classes, m.sbn_epsilon,
                              image_shape=m.image_shape, conv_channels=m.conv_channels))
    setup = protocol.FederatedSetup(model, server, shards, test, _policy(cfg), cfg.master_seed)
    return Prepared(setup, train, manifest)


# -- running ---------------------------------------------------------------

@dataclass
class RunSummary:
    final_accuracy: float | None
    best_accuracy: float | None
    records_path: Path
    wall_clock: float
    config_hash: str
    out_dir: Path
    extra: dict = field(default_factory=dict)


def resolve_out_dir(cfg: ExperimentConfig, out: str | Path | None = None) -> Path:
    if out is not None:
        return Path(out)
    root = os.environ.get(OUTPUT_ROOT_ENV) or cfg.output_dir
    return Path(root) / cfg.run_name


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def run(cfg: ExperimentConfig, out: str | Path | None = None) -> RunSummary:
    """Execute ``cfg`` and write its artifacts.

    Protocol and baseline runs write ``records.jsonl`` (one line per round,
    flushed as it completes), ``summary.csv``, ``checkpoint.json``,
    ``partition.json`` and ``config.json``. Theory runs write ``rates.csv``
    in place of the records, checkpoint and partition.
    """
    out_dir = resolve_out_dir(cfg, out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.canonical(), indent=1, sort_keys=True) + "\n")
    start = time.perf_counter()
    if cfg.kind == "theory":
        return _run_theory(cfg, out_dir, start)

    prep = prepare(cfg)
    data.write_manifest(out_dir / "partition.json", prep.manifest)
    records_path = out_dir / "records.jsonl"
    with open(records_path, "w") as fh:
        def on_record(rec: protocol.RoundRecord):
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
            fh.flush()
        if cfg.kind == "semifl":
            result = protocol.run_semifl(prep.setup, cfg.protocol, on_record)
        else:
            result = baselines.run_baseline(BaselineKind(cfg.kind), prep.setup, cfg.protocol,
                                            full=prep.full, on_record=on_record)
    save_checkpoint(out_dir / "checkpoint.json", result.params, result.sbn)
    accs = [r.test_accuracy for r in result.records] + [result.final_accuracy]
    summary = RunSummary(result.final_accuracy, max(accs), records_path, time.perf_counter() - start,
                         cfg.config_hash(), out_dir)
    _write_csv(out_dir / "summary.csv",
               ("run_name", "kind", "master_seed", "final_accuracy", "best_accuracy", "rounds", "config_hash",
                "wall_clock_s"),
               [(cfg.run_name, cfg.kind, cfg.master_seed, f"{summary.final_accuracy:.6f}",
                 f"{summary.best_accuracy:.6f}", len(result.records), summary.config_hash,
                 f"{summary.wall_clock:.3f}")])
    summary.extra["result"] = result
    return summary


def _run_theory(cfg: ExperimentConfig, out_dir: Path, start: float) -> RunSummary:
    th = cfg.theory
    task = theory.SyntheticTask(th.beta, th.unlabeled_scale)
    table = theory.rate_experiment(task, th.config, [s + cfg.master_seed for s in th.seeds])
    rates = out_dir / "rates.csv"
    _write_csv(rates, theory.RateTable.CSV_COLUMNS, table.csv_rows())
    summary = RunSummary(None, None, rates, time.perf_counter() - start, cfg.config_hash(), out_dir,
                         {"table": table})
    _write_csv(out_dir / "summary.csv",
               ("run_name", "kind", "master_seed", "slope_fit", "theory_exponent", "critical_zeta", "config_hash",
                "wall_clock_s"),
               [(cfg.run_name, cfg.kind, cfg.master_seed, table.slope_fit, table.theory_exponent,
                 table.critical_zeta, summary.config_hash, f"{summary.wall_clock:.3f}")])
    return summary


# -- plot data -------------------------------------------------------------

_RECORD_KEYS = ("round", "test_accuracy", "pseudo_quantity", "pseudo_quality")


def read_records(path: str | Path) -> list[dict]:
    """Parse a records file; errors carry the 1-based line number."""
    out = []
    last = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or any(k not in rec for k in _RECORD_KEYS):
                raise FormatError(f"{path}: line {lineno}: record needs keys {_RECORD_KEYS}")
            if not isinstance(rec["round"], int) or rec["round"] <= last:
                raise FormatError(f"{path}: line {lineno}: round index must be an increasing integer")
            last = rec["round"]
            out.append(rec)
    return out


def _fmt(v) -> str:
    return "" if v is None else repr(v)


def emit_plot_data(records_path: str | Path, out_dir: str | Path, rates_path: str | Path | None = None) -> dict:
    """Write ``accuracy.csv``, ``pseudo.csv`` and ``theory_risk.csv`` series.

    ``rates_path`` defaults to a ``rates.csv`` beside the records; the risk
    series is header-only when there is none. Returns the written paths.
    """
    records_path = Path(records_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    recs = read_records(records_path) if records_path.suffix != ".csv" else []
    paths = {"accuracy": out_dir / "accuracy.csv", "pseudo": out_dir / "pseudo.csv",
             "theory_risk": out_dir / "theory_risk.csv"}
    _write_csv(paths["accuracy"], ("round", "test_accuracy"),
               [(r["round"], _fmt(r["test_accuracy"])) for r in recs])
    _write_csv(paths["pseudo"], ("round", "pseudo_quantity", "pseudo_quality"),
               [(r["round"], _fmt(r["pseudo_quantity"]), _fmt(r["pseudo_quality"])) for r in recs])
    if rates_path is None:
        rates_path = records_path if records_path.suffix == ".csv" else records_path.with_name("rates.csv")
    rows = _read_rates(Path(rates_path)) if Path(rates_path).exists() else []
    _write_csv(paths["theory_risk"], theory.RateTable.CSV_COLUMNS, rows)
    return paths


def _read_rates(path: Path) -> list[list[str]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(header) != theory.RateTable.CSV_COLUMNS:
            raise FormatError(f"{path}: line 1: expected columns {theory.RateTable.CSV_COLUMNS}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                [float(v) for v in row[:5]]
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from None
            rows.append(row)
    return rows
