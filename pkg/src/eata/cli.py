"""Command-line experiment runner.

Verbs: ``pretrain``, ``fisher``, ``make-data``, ``adapt``, ``partition-study``
and ``sweep``. Run ``eata <verb> --help`` for the flags of each.

Configuration precedence, lowest first: built-in defaults (:data:`DEFAULT_CONFIG`),
the JSON document given with ``--config``, the ``EATA_OUTPUT_DIR`` environment
variable (output directory only), then command-line flags. ``--set a.b=value``
overrides any single field; the value is parsed as JSON when it can be.

When ``paths.checkpoint`` is empty the seeded desk benchmark stands in for the
base model, Fisher and test data. With repetitions ``r > 1`` the seeds are
``seed, seed + 1, ..., seed + r - 1``.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys
from dataclasses import asdict
from importlib import resources

import numpy as np

from . import experiments as ex
from .containers import (
    export_csv,
    export_stream_csv,
    load_checkpoint,
    load_dataset,
    load_fisher,
    load_stream,
    save_checkpoint,
    save_dataset,
    save_fisher,
    save_stream,
)
from .engine import AdaptConfig, write_trace_csv
from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateVectorError,
    DivergenceError,
    FormatError,
    InsufficientBatchError,
    NumericDomainError,
)
from .fisher import fisher_for
from .network import BATCH_STATS, BN_MODES, ArchSpec, TrainHyper, accuracy, train_base
from .selection import SelectionConfig
from .shiftgen import SHIFT_KINDS, ShiftSpec, SourceSpec, make_id_samples, make_source, make_stream

OUTPUT_ENV = "EATA_OUTPUT_DIR"
SCHEMA_VERSION = 1

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4

ADAPT_KINDS = ("single-stream", "sequential-forgetting", "lifelong-forgetting")
SWEEP_KINDS = ("lr-sweep", "stream-length-sweep")
KINDS = ADAPT_KINDS + ("entropy-partition",) + SWEEP_KINDS

DEFAULT_CONFIG = {
    "kind": "single-stream",
    "seed": 0,
    "repetitions": 1,
    "trace": True,
    "paths": {"checkpoint": None, "fisher": None, "streams": [], "clean": None, "output_dir": "."},
    "adapt": {
        "method": "eata", "lr": ex.DESK_LR, "momentum": 0.9, "beta": None,
        "batch_size": ex.DESK_BATCH, "reset_policy": "per-stream", "window_len": None,
        "e0_fraction": 0.4, "epsilon": None, "alpha": 0.1, "beta_reference_shift": 0.1,
    },
    "desk": {"stream_len": ex.DESK_STREAM_LEN, "severity": 5,
             "per_kind": ex.DESK_LIFELONG_PER_KIND, "kinds": list(SHIFT_KINDS)},
    "source": {},
    "hidden": list(ex.DESK_HIDDEN),
    "train": {"lr": ex.DESK_TRAIN.lr, "momentum": ex.DESK_TRAIN.momentum,
              "epochs": ex.DESK_TRAIN.epochs, "batch_size": ex.DESK_TRAIN.batch_size},
    "percents": [10, 30, 50],
    "methods": ["tent", "eata"],
    "lrs": [0.005, 0.01, 0.05],
    "lengths": [1000, 2000, 5000, 10000],
}


def metrics_schema() -> dict:
    """The JSON schema that every ``metrics.json`` validates against."""
    text = resources.files("eata").joinpath("schemas/run_metrics.schema.json").read_text()
    return json.loads(text)


# configuration ---------------------------------------------------------------

def _merge(base, override, where=""):
    for key, value in override.items():
        if key not in base:
            raise ConfigurationError(f"unknown config field {where}{key}")
        if isinstance(base[key], dict) and key not in ("source",):
            if not isinstance(value, dict):
                raise ConfigurationError(f"config field {where}{key} must be an object")
            _merge(base[key], value, f"{where}{key}.")
        else:
            base[key] = value


def _set_path(cfg, dotted, value):
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigurationError(f"unknown config field {dotted}")
        node = node[p]
    if parts[-1] not in node and node is not cfg.get("source"):
        raise ConfigurationError(f"unknown config field {dotted}")
    node[parts[-1]] = value


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path=None, sets=(), flags=None):
    """Merge defaults, an optional JSON file, the env var and flag overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigurationError(f"{path}: config must be a JSON object")
        _merge(cfg, doc)
    if os.environ.get(OUTPUT_ENV):
        cfg["paths"]["output_dir"] = os.environ[OUTPUT_ENV]
    for dotted, value in (flags or {}).items():
        if value is not None:
            _set_path(cfg, dotted, value)
    for item in sets:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        _set_path(cfg, key.strip(), _parse_value(value))
    if cfg["kind"] not in KINDS:
        raise ConfigurationError(f"kind must be one of {KINDS}")
    if not isinstance(cfg["repetitions"], int) or cfg["repetitions"] < 1:
        raise ConfigurationError("repetitions must be a positive integer")
    return cfg


def adapt_config(cfg, class_count) -> AdaptConfig:
    a = cfg["adapt"]
    selection = SelectionConfig.for_classes(class_count, e0_fraction=a["e0_fraction"],
                                            epsilon=a["epsilon"], alpha=a["alpha"])
    beta = a["beta"] if a["method"] == "eata" else None
    try:
        return AdaptConfig(method=a["method"], lr=float(a["lr"]), momentum=float(a["momentum"]),
                           beta=beta, batch_size=int(a["batch_size"]),
                           reset_policy=a["reset_policy"], window_len=a["window_len"],
                           selection=selection, seed=cfg["seed"],
                           beta_reference_shift=float(a["beta_reference_shift"]))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"bad adapt config: {exc}") from None


def output_dir(cfg, flag=None):
    out = flag or cfg["paths"]["output_dir"] or "."
    os.makedirs(out, exist_ok=True)
    return out


# inputs ----------------------------------------------------------------------

def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(path, what):
    if not path:
        raise ConfigurationError(f"missing {what}")
    if not os.path.isfile(path):
        raise ConfigurationError(f"{what} {path!r} does not exist")
    return path


class Inputs:
    """Base model, Fisher, clean set and streams for one repetition."""

    def __init__(self, cfg, seed, needs_fisher=False):
        paths = cfg["paths"]
        self.digests = {}
        if paths["checkpoint"]:
            if cfg["repetitions"] != 1:
                raise ConfigurationError("repetitions > 1 needs the desk benchmark (no checkpoint)")
            self.params = load_checkpoint(self._file(paths["checkpoint"], "checkpoint"))
            self.fisher = None
            if paths["fisher"]:
                self.fisher, arch = load_fisher(self._file(paths["fisher"], "fisher"))
                if arch != self.params.arch:
                    raise ConfigurationError("fisher file was computed for another architecture")
            elif needs_fisher:
                raise ConfigurationError("method eata needs paths.fisher")
            self.clean = None
            if paths["clean"]:
                clean = load_dataset(self._file(paths["clean"], "clean set"))
                self.clean = (clean.features, clean.labels)
            if not paths["streams"]:
                raise ConfigurationError("paths.streams is empty")
            self.bench = None
        else:
            self.bench = ex.desk_benchmark(seed)
            self.digests["desk_seed"] = seed
            self.params = self.bench.params
            self.fisher = self.bench.fisher
            self.clean = self.bench.clean()
            if paths["clean"]:
                clean = load_dataset(self._file(paths["clean"], "clean set"))
                self.clean = (clean.features, clean.labels)
        self.file_streams = [load_stream(self._file(p, "stream")) for p in paths["streams"]]

    def _file(self, path, what):
        _require(path, what)
        self.digests[f"{what}:{os.path.basename(path)}"] = _digest(path)
        return path

    def streams(self, cfg, forgetting=False):
        if self.file_streams:
            return self.file_streams
        d = cfg["desk"]
        if forgetting:
            for k in d["kinds"]:
                if k not in SHIFT_KINDS:
                    raise ConfigurationError(f"unknown shift kind {k!r}")
            return self.bench.kind_streams(int(d["per_kind"]), int(d["severity"]), d["kinds"])
        return [self.bench.noise_stream(int(d["stream_len"]), int(d["severity"]))]

    def make_stream(self, cfg, n):
        if self.file_streams:
            return self.file_streams[0].head(n)
        return self.bench.noise_stream(int(n), int(cfg["desk"]["severity"]))


# outputs ---------------------------------------------------------------------

def _run_dict(metrics, stream):
    d = metrics.to_dict()
    d["streams"] = list(stream.shift_tags)
    return d


def write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def write_rows(path, rows):
    if not rows:
        open(path, "w").close()
        return
    fields = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow({k: "" if row.get(k) is None else row.get(k) for k in fields})


def _document(cfg, config: AdaptConfig, inputs_digests, reps):
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": cfg["kind"],
        "seed": cfg["seed"],
        "adapt": config.to_dict(),
        "inputs": inputs_digests,
        "repetitions": reps,
    }


def _seeds(cfg):
    return [cfg["seed"] + r for r in range(cfg["repetitions"])]


def _trace_name(cfg, seed):
    return "trace.csv" if cfg["repetitions"] == 1 else f"trace_seed{seed}.csv"


# verbs -----------------------------------------------------------------------

def run_adapt(cfg, out):
    """Single-stream and forgetting experiments. Returns the metrics document."""
    kind = cfg["kind"]
    if kind not in ADAPT_KINDS:
        raise ConfigurationError(f"adapt runs kinds {ADAPT_KINDS}, got {kind!r}")
    reps, digests, table, config = [], {}, [], None
    for seed in _seeds(cfg):
        inputs = Inputs(cfg, seed, needs_fisher=cfg["adapt"]["method"] == "eata")
        config = adapt_config(dict(cfg, seed=seed), inputs.params.arch.class_count)
        fisher = inputs.fisher if config.method == "eata" else None
        trace = [] if cfg["trace"] else None
        if kind == "single-stream":
            stream = inputs.streams(cfg)[0]
            m, recs = ex.single_stream(inputs.params, stream, config, fisher, inputs.clean,
                                       trace=cfg["trace"])
            runs, rows = [_run_dict(m, stream)], []
            trace = recs if cfg["trace"] else None
        else:
            if inputs.clean is None:
                raise ConfigurationError("forgetting experiments need a clean set (paths.clean)")
            streams = inputs.streams(cfg, forgetting=True)
            rows, ms = ex.forgetting(inputs.params, streams, config, fisher, inputs.clean,
                                     lifelong=kind == "lifelong-forgetting", trace=trace)
            runs = [_run_dict(m, s) for m, s in zip(ms, streams)]
            table += [dict(row, seed=seed) for row in rows]
        if trace is not None:
            write_trace_csv(os.path.join(out, _trace_name(cfg, seed)), trace)
        reps.append({"seed": seed, "runs": runs, "rows": rows})
        digests.update(inputs.digests)
    doc = _document(cfg, config, digests, reps)
    write_json(os.path.join(out, "metrics.json"), doc)
    if table:
        write_rows(os.path.join(out, "forgetting.csv"), table)
    return doc


def run_partition(cfg, out):
    reps, digests, table, config = [], {}, [], None
    for seed in _seeds(cfg):
        inputs = Inputs(cfg, seed)
        config = adapt_config(dict(cfg, seed=seed), inputs.params.arch.class_count)
        stream = inputs.streams(cfg)[0]
        rows = ex.partition_study(inputs.params, stream, cfg["percents"], config.lr, config.momentum)
        reps.append({"seed": seed, "runs": [], "rows": rows})
        table += [dict(row, seed=seed) for row in rows]
        digests.update(inputs.digests)
    doc = _document(dict(cfg, kind="entropy-partition"), config, digests, reps)
    write_json(os.path.join(out, "metrics.json"), doc)
    write_rows(os.path.join(out, "partition.csv"), table)
    return doc


def run_sweep(cfg, out):
    kind = cfg["kind"]
    if kind not in SWEEP_KINDS:
        raise ConfigurationError(f"sweep runs kinds {SWEEP_KINDS}, got {kind!r}")
    for m in cfg["methods"]:
        if m not in ("source", "tent", "eta", "eata"):
            raise ConfigurationError(f"unknown method {m!r}")
    reps, digests, table, config = [], {}, [], None
    for seed in _seeds(cfg):
        inputs = Inputs(cfg, seed, needs_fisher="eata" in cfg["methods"])
        config = adapt_config(dict(cfg, seed=seed), inputs.params.arch.class_count)
        if kind == "lr-sweep":
            rows = ex.lr_sweep(inputs.params, inputs.streams(cfg)[0], cfg["lrs"], cfg["methods"],
                               inputs.fisher, config, inputs.clean)
        else:
            rows = ex.length_sweep(inputs.params, lambda n: inputs.make_stream(cfg, n),
                                   cfg["lengths"], cfg["methods"], inputs.fisher, config,
                                   inputs.clean)
        reps.append({"seed": seed, "runs": [], "rows": rows})
        table += [dict(row, seed=seed) for row in rows]
        digests.update(inputs.digests)
    doc = _document(cfg, config, digests, reps)
    write_json(os.path.join(out, "metrics.json"), doc)
    write_rows(os.path.join(out, "sweep.csv"), table)
    return doc


def _source_spec(cfg, seed):
    fields = dict(cfg["source"])
    fields["seed"] = seed
    try:
        return SourceSpec(**fields)
    except TypeError as exc:
        raise ConfigurationError(f"bad source config: {exc}") from None


def run_pretrain(cfg, out, data=None, test=None, ckpt_name="base.ckpt", report_name="pretrain.json"):
    seed = cfg["seed"]
    try:
        hyper = TrainHyper(seed=seed, **cfg["train"])
    except TypeError as exc:
        raise ConfigurationError(f"bad train config: {exc}") from None
    if data:
        train = load_dataset(_require(data, "training set"))
        test_set = load_dataset(_require(test, "test set")) if test else None
        spec = train.source
        c = spec.class_count if spec else int(train.labels.max()) + 1
        arch = ArchSpec(train.features.shape[1], tuple(cfg["hidden"]), c)
    else:
        spec = _source_spec(cfg, seed)
        train, test_set = make_source(spec)
        arch = ArchSpec(spec.input_dim, tuple(cfg["hidden"]), spec.class_count)
    params = train_base(arch, train.features, train.labels, hyper)
    path = os.path.join(out, ckpt_name)
    save_checkpoint(path, params)
    report = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "arch": arch.to_dict(),
        "train": asdict(hyper),
        "source": asdict(spec) if spec else None,
        "train_accuracy": accuracy(params, train.features, train.labels),
        "test_accuracy": (accuracy(params, test_set.features, test_set.labels)
                          if test_set is not None else None),
        "checkpoint_sha256": _digest(path),
    }
    write_json(os.path.join(out, report_name), report)
    return report


def run_fisher(checkpoint, id_samples, q, out_path, bn_mode=BATCH_STATS):
    params = load_checkpoint(_require(checkpoint, "checkpoint"))
    data = load_dataset(_require(id_samples, "id sample file"))
    if q is None:
        q = len(data)
    if not 1 <= q <= len(data):
        raise ConfigurationError(f"Q={q} but the id sample file holds {len(data)} samples")
    fisher = fisher_for(params, data.features[:q], bn_mode)
    save_fisher(out_path, fisher, params.arch)
    return fisher


def _parse_shift(text, seed):
    kind, _, sev = text.partition(":")
    if kind not in SHIFT_KINDS:
        raise ConfigurationError(f"unknown shift kind {kind!r}")
    try:
        return ShiftSpec(kind, int(sev or 5), seed)
    except ValueError:
        raise ConfigurationError(f"bad shift {text!r}") from None


def run_make_data(args, cfg, out):
    seed = cfg["seed"]
    spec = _source_spec(cfg, seed)
    written = []
    if args.what == "source":
        train, test = make_source(spec)
        for name, data in (("train", train), ("test", test)):
            path = os.path.join(out, f"{name}.bin")
            save_dataset(path, data)
            written.append(path)
            if args.csv:
                export_csv(os.path.join(out, f"{name}.csv"), data.features, data.labels)
    elif args.what == "id":
        data = make_id_samples(spec, args.count)
        path = os.path.join(out, "id.bin")
        save_dataset(path, data)
        written.append(path)
        if args.csv:
            export_csv(os.path.join(out, "id.csv"), data.features, data.labels)
    else:
        base = load_dataset(_require(args.source_file, "source file")) if args.source_file \
            else make_source(spec)[1]
        shifts = [_parse_shift(s, seed) for s in (args.shift or ["gaussian-noise:5"])]
        stream = make_stream(base, shifts, order=args.order, n=args.n, batch_size=args.batch_size,
                             seed=seed, allow_repeat=args.allow_repeat)
        path = os.path.join(out, args.name)
        save_stream(path, stream)
        written.append(path)
        if args.csv:
            export_stream_csv(os.path.splitext(path)[0] + ".csv", stream)
    return written


# argument parsing ------------------------------------------------------------

def _float_list(text):
    return [float(t) for t in text.split(",") if t.strip()]


def _int_list(text):
    return [int(t) for t in text.split(",") if t.strip()]


def _common(p, experiment=True):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field (dotted path)")
    p.add_argument("--seed", type=int, help="top-level seed")
    p.add_argument("--out-dir", help=f"output directory (beats ${OUTPUT_ENV} and the config)")
    if experiment:
        p.add_argument("--kind", choices=KINDS)
        p.add_argument("--method", choices=("source", "tent", "eta", "eata"))
        p.add_argument("--lr", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--reset-policy", choices=("per-stream", "lifelong", "episodic"))
        p.add_argument("--window-len", type=int)
        p.add_argument("--repetitions", type=int)
        p.add_argument("--checkpoint")
        p.add_argument("--fisher")
        p.add_argument("--stream", action="append", help="stream file (repeatable)")
        p.add_argument("--clean", help="clean labelled set for forgetting checks")
        p.add_argument("--no-trace", action="store_true", help="skip the per-batch trace CSV")


def _flags(args):
    get = lambda name: getattr(args, name, None)  # noqa: E731
    flags = {
        "seed": get("seed"),
        "kind": get("kind"),
        "repetitions": get("repetitions"),
        "adapt.method": get("method"),
        "adapt.lr": get("lr"),
        "adapt.beta": get("beta"),
        "adapt.reset_policy": get("reset_policy"),
        "adapt.window_len": get("window_len"),
        "paths.checkpoint": get("checkpoint"),
        "paths.fisher": get("fisher"),
        "paths.streams": get("stream"),
        "paths.clean": get("clean"),
    }
    if get("no_trace"):
        flags["trace"] = False
    return flags


def _cfg(args, extra=None):
    flags = _flags(args)
    flags.update(extra or {})
    cfg = load_config(args.config, args.set, flags)
    return cfg, output_dir(cfg, args.out_dir)


def cmd_pretrain(args):
    extra = {"train.epochs": args.epochs, "train.lr": args.train_lr,
             "hidden": _int_list(args.hidden) if args.hidden else None}
    for key in ("class_count", "input_dim", "per_class", "center_scale", "within_std"):
        extra[f"source.{key}"] = getattr(args, key)
    cfg, out = _cfg(args, extra)
    report = run_pretrain(cfg, out, args.data, args.test, args.out, args.report)
    print(json.dumps({k: report[k] for k in ("train_accuracy", "test_accuracy")}))


def cmd_fisher(args):
    cfg, out = _cfg(args)
    path = args.out if os.path.isabs(args.out) else os.path.join(out, args.out)
    f = run_fisher(args.checkpoint, args.id_samples, args.q, path, args.bn_mode)
    print(json.dumps({"fisher": path, "sample_count": f.sample_count, "omega_sum": float(f.omega.sum())}))


def cmd_make_data(args):
    extra = {f"source.{k}": getattr(args, k)
             for k in ("class_count", "input_dim", "per_class", "center_scale", "within_std")}
    cfg, out = _cfg(args, extra)
    for path in run_make_data(args, cfg, out):
        print(path)


def cmd_adapt(args):
    cfg, out = _cfg(args)
    doc = run_adapt(cfg, out)
    for rep in doc["repetitions"]:
        for run in rep["runs"]:
            print(f"seed={rep['seed']} {run['method']} {','.join(run['streams'])}: "
                  f"accuracy={run['stream_accuracy']:.4f} backward={run['n_backward_samples']}")


def cmd_partition(args):
    extra = {"kind": "entropy-partition"}
    if args.percents:
        extra["percents"] = _float_list(args.percents)
    cfg, out = _cfg(args, extra)
    doc = run_partition(cfg, out)
    for rep in doc["repetitions"]:
        for row in rep["rows"]:
            print(f"seed={rep['seed']} p={row['percent']:g} {row['partition']}: "
                  f"{row['final_accuracy']:.4f}")


def cmd_sweep(args):
    extra = {}
    if args.grid:
        extra["kind"] = {"lr": "lr-sweep", "length": "stream-length-sweep"}[args.grid]
    if args.lrs:
        extra["lrs"] = _float_list(args.lrs)
    if args.lengths:
        extra["lengths"] = _int_list(args.lengths)
    if args.methods:
        extra["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    cfg, out = _cfg(args, extra)
    doc = run_sweep(cfg, out)
    for rep in doc["repetitions"]:
        for row in rep["rows"]:
            print(f"seed={rep['seed']} {row['method']} lr={row['lr']:g} n={row['n']}: "
                  f"{row['stream_accuracy']:.4f}")


def _source_flags(p):
    p.add_argument("--classes", dest="class_count", type=int)
    p.add_argument("--dim", dest="input_dim", type=int)
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--center-scale", dest="center_scale", type=float)
    p.add_argument("--within-std", dest="within_std", type=float)


def build_parser():
    parser = argparse.ArgumentParser(prog="eata", description="Test-time adaptation experiments.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("pretrain", help="train a base model and write a checkpoint")
    _common(p, experiment=False)
    _source_flags(p)
    p.add_argument("--hidden", help="comma-separated hidden widths")
    p.add_argument("--epochs", type=int)
    p.add_argument("--train-lr", type=float)
    p.add_argument("--data", help="training set file (default: generate from the source spec)")
    p.add_argument("--test", help="test set file for the accuracy report")
    p.add_argument("--out", default="base.ckpt", help="checkpoint file name in the output dir")
    p.add_argument("--report", default="pretrain.json")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("fisher", help="estimate the Fisher diagonal from id samples")
    _common(p, experiment=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--id-samples", required=True, help="labelled set file; labels are ignored")
    p.add_argument("--q", type=int, help="number of samples to use (default: all)")
    p.add_argument("--out", default="fisher.bin")
    p.add_argument("--bn-mode", choices=BN_MODES, default=BATCH_STATS,
                   help="BN statistics used for pseudo-labels and gradients")
    p.set_defaults(func=cmd_fisher)

    p = sub.add_parser("make-data", help="write source splits, id samples or a shifted stream")
    _common(p, experiment=False)
    _source_flags(p)
    p.add_argument("what", choices=("source", "id", "stream"))
    p.add_argument("--count", type=int, default=ex.DESK_FISHER_Q, help="id sample count")
    p.add_argument("--from", dest="source_file", help="labelled set to corrupt (default: test split)")
    p.add_argument("--shift", action="append", help="KIND:SEVERITY, repeatable")
    p.add_argument("--order", choices=("sequential", "mixed"), default="sequential")
    p.add_argument("--n", type=int, help="stream length")
    p.add_argument("--batch-size", type=int, default=ex.DESK_BATCH)
    p.add_argument("--allow-repeat", action="store_true")
    p.add_argument("--name", default="stream.bin")
    p.add_argument("--csv", action="store_true", help="also export tidy CSV")
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("adapt", help="run an adaptation experiment")
    _common(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("partition-study", help="adapt on lowest / highest entropy partitions")
    _common(p)
    p.add_argument("--percents", help="comma-separated percentages in (0, 100]")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("sweep", help="learning-rate or stream-length grid")
    _common(p)
    p.add_argument("--grid", choices=("lr", "length"))
    p.add_argument("--lrs")
    p.add_argument("--lengths")
    p.add_argument("--methods")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    try:
        # overflow shows up as DivergenceError; the raw warnings add nothing
        with np.errstate(over="ignore", invalid="ignore"):
            args.func(args)
    except (DivergenceError, NumericDomainError) as exc:
        print(f"eata: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (FormatError, OSError) as exc:
        print(f"eata: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigurationError, ContractError, InsufficientBatchError, DegenerateVectorError) as exc:
        print(f"eata: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
