"""Desk-scale benchmark and the evaluation protocols built on the engine.

The desk benchmark for a top-level ``seed``:

* source data: :class:`SourceSpec` defaults (4 classes, d = 32, 1000 per class)
* base model: ``[64, 64, 64]`` BN-MLP, lightly pretrained (5 epochs at lr 0.003)
* Fisher: 500 in-distribution samples pseudo-labelled by the base model
* stream: gaussian-noise severity 5, 10,000 samples drawn with repetition, B = 64
* adaptation: lr 0.05, momentum 0.9, default selection thresholds

Every random consumer takes the same top-level seed and its own namespace
(``train``/``test``/``id``/``embedding`` for data, ``init``/``shuffle`` for
pretraining, ``stream`` and per-kind corruption streams for test data), so the
pieces are independent and each can be regenerated on its own.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .engine import AdaptConfig, Engine, SgdState, evaluate, sgd_step, weighted_entropy_loss
from .errors import ConfigurationError
from .fisher import FisherDiag, fisher_for
from .network import (
    BATCH_STATS,
    RUNNING_STATS,
    AdaptableView,
    ArchSpec,
    ParamSet,
    TrainHyper,
    forward,
    train_base,
)
from .numerics import entropy_from_logits
from .shiftgen import (
    SHIFT_KINDS,
    LabeledSet,
    ShiftSpec,
    ShiftStream,
    SourceSpec,
    make_id_samples,
    make_source,
    make_stream,
)

DESK_HIDDEN = (64, 64, 64)
DESK_TRAIN = TrainHyper(lr=0.003, momentum=0.9, epochs=5, batch_size=64)
DESK_FISHER_Q = 500
DESK_STREAM_LEN = 10_000
DESK_BATCH = 64
DESK_LR = 0.05
DESK_LIFELONG_PER_KIND = 100_000


@dataclass(frozen=True)
class DeskBenchmark:
    seed: int
    spec: SourceSpec
    arch: ArchSpec
    params: ParamSet
    train: LabeledSet
    test: LabeledSet
    id_set: LabeledSet
    fisher: FisherDiag

    def base(self) -> ParamSet:
        """A fresh copy of the pretrained parameters."""
        return self.params.copy()

    def clean(self):
        return self.test.features, self.test.labels

    def noise_stream(self, n=DESK_STREAM_LEN, severity=5, batch_size=DESK_BATCH) -> ShiftStream:
        return make_stream(self.test, [ShiftSpec("gaussian-noise", severity, self.seed)], n=n,
                           batch_size=batch_size, seed=self.seed, allow_repeat=n > len(self.test))

    def kind_streams(self, per_kind, severity=5, kinds=SHIFT_KINDS, batch_size=DESK_BATCH):
        """One stream per shift kind, each drawn independently from the test split."""
        return [make_stream(self.test, [ShiftSpec(k, severity, self.seed)], n=per_kind,
                            batch_size=batch_size, seed=self.seed,
                            allow_repeat=per_kind > len(self.test))
                for k in kinds]


def pretrain(spec: SourceSpec, hidden=DESK_HIDDEN, hyper: TrainHyper = DESK_TRAIN):
    """Train a base model on ``spec``'s train split. Returns ``(params, train, test)``."""
    train, test = make_source(spec)
    arch = ArchSpec(spec.input_dim, tuple(hidden), spec.class_count)
    params = train_base(arch, train.features, train.labels, replace(hyper, seed=spec.seed))
    return params, train, test


@lru_cache(maxsize=8)
def desk_benchmark(seed: int = 0) -> DeskBenchmark:
    """Build (and memoise) the seeded desk benchmark. Use :meth:`DeskBenchmark.base` for a mutable copy."""
    spec = SourceSpec(seed=seed)
    params, train, test = pretrain(spec)
    id_set = make_id_samples(spec, DESK_FISHER_Q)
    fisher = fisher_for(params, id_set.features)
    return DeskBenchmark(seed, spec, params.arch, params, train, test, id_set, fisher)


def desk_config(method, **overrides) -> AdaptConfig:
    fields = dict(method=method, lr=DESK_LR, batch_size=DESK_BATCH)
    fields.update(overrides)
    return AdaptConfig(**fields)


# protocols -------------------------------------------------------------------

def single_stream(params: ParamSet, stream: ShiftStream, config: AdaptConfig, fisher=None,
                  clean=None, trace=False):
    """Adapt a copy of ``params`` over one stream. Returns ``(RunMetrics, trace records)``."""
    engine = Engine(params.copy(), config, fisher)
    if trace:
        engine.trace = []
    metrics = engine.run_stream(stream, clean)
    return metrics, engine.trace or []


def forgetting(params: ParamSet, streams, config: AdaptConfig, fisher, clean, lifelong: bool,
               trace=None):
    """Clean accuracy after each shifted stream.

    ``lifelong=False`` restores the base model before every stream;
    ``lifelong=True`` never resets. Clean accuracy is measured on the frozen
    model with batch statistics (running statistics for ``source``).
    Returns ``(rows, runs)`` where each row is one stream. Pass a list as
    ``trace`` to collect per-batch records.
    """
    policy = "lifelong" if lifelong else "per-stream"
    config = replace(config, reset_policy=policy)
    engine = Engine(params.copy(), config, fisher)
    engine.trace = trace
    mode = RUNNING_STATS if config.method == "source" else BATCH_STATS
    before = evaluate(params, clean[0], clean[1], config.batch_size, mode)
    rows, runs = [], []
    for i, stream in enumerate(streams):
        m = engine.run_stream(stream, clean)
        runs.append(m)
        rows.append({
            "step": i,
            "shift": ",".join(stream.shift_tags),
            "method": config.method,
            "ood_accuracy": m.stream_accuracy,
            "clean_accuracy": m.clean_accuracy,
            "clean_readapt_accuracy": m.clean_readapt_accuracy,
            "clean_before": before,
            "clean_drop": before - m.clean_accuracy,
            "n_backward_samples": m.n_backward_samples,
        })
    return rows, runs


def base_entropies(params: ParamSet, stream: ShiftStream) -> np.ndarray:
    """Per-sample entropy under the frozen base model, batch by batch."""
    return np.concatenate([entropy_from_logits(forward(params, b.x, BATCH_STATS)[0])
                           for b in stream.batches()])


def _stream_predictions(params, stream):
    return [forward(params, b.x, BATCH_STATS)[0].argmax(axis=1) for b in stream.batches()]


def partition_run(params: ParamSet, stream: ShiftStream, mask, lr, momentum=0.9):
    """Entropy-minimise over ``stream`` using only rows where ``mask`` is set.

    Each batch is forwarded whole (its statistics include every row); the loss
    is the mean entropy of the selected rows. Returns ``(online accuracy,
    final accuracy)``, the latter from the adapted model over the full stream.
    """
    q = params.copy()
    view = AdaptableView(q)
    state = SgdState(np.zeros(view.size))
    correct = 0
    for b in stream.batches():
        lo, hi = stream.offsets[b.index], stream.offsets[b.index + 1]
        w = mask[lo:hi].astype(np.float64)
        logits, _ = forward(q, b.x, BATCH_STATS)
        correct += int(stream.score(b.index, logits.argmax(axis=1)).sum())
        if w.any():
            _, grad = weighted_entropy_loss(q, b.x, w)
            sgd_step(view, grad, state, lr, momentum, b.index)
    final = sum(int(stream.score(i, p).sum()) for i, p in enumerate(_stream_predictions(q, stream)))
    return correct / len(stream), final / len(stream)


def partition_study(params: ParamSet, stream: ShiftStream, percents, lr=DESK_LR, momentum=0.9):
    """Adapt on the lowest-p% and highest-p% entropy samples for each ``p``.

    Entropies are ranked once under the frozen base model over the whole stream
    (stable sort, ties keep stream order). One row per (p, partition).
    """
    percents = [float(p) for p in percents]
    if any(not 0 < p <= 100 for p in percents):
        raise ConfigurationError("percents must lie in (0, 100]")
    ent = base_entropies(params, stream)
    order = np.argsort(ent, kind="stable")
    n = len(stream)
    rows = []
    for p in percents:
        k = int(round(n * p / 100.0))
        for part, idx in (("lowest", order[:k]), ("highest", order[::-1][:k])):
            mask = np.zeros(n, dtype=bool)
            mask[idx] = True
            online, final = partition_run(params, stream, mask, lr, momentum)
            rows.append({"percent": p, "partition": part, "n_samples": k,
                         "online_accuracy": online, "final_accuracy": final})
    return rows


def lr_sweep(params: ParamSet, stream: ShiftStream, lrs, methods, fisher=None, base_config=None,
             clean=None):
    """One row per (method, lr) over the same stream."""
    base_config = base_config or AdaptConfig()
    rows = []
    for method in methods:
        for lr in lrs:
            cfg = replace(base_config, method=method, lr=float(lr),
                          beta=base_config.beta if method == "eata" else None)
            m, _ = single_stream(params, stream, cfg, fisher if method == "eata" else None, clean)
            rows.append(_sweep_row(m, lr=float(lr), n=len(stream)))
    return rows


def length_sweep(params: ParamSet, make, lengths, methods, fisher=None, base_config=None, clean=None):
    """One row per (method, N). ``make(n)`` builds a stream of ``n`` samples."""
    base_config = base_config or AdaptConfig()
    rows = []
    for n in lengths:
        stream = make(int(n))
        for method in methods:
            cfg = replace(base_config, method=method,
                          beta=base_config.beta if method == "eata" else None)
            m, _ = single_stream(params, stream, cfg, fisher if method == "eata" else None, clean)
            rows.append(_sweep_row(m, lr=cfg.lr, n=len(stream)))
    return rows


def _sweep_row(m, lr, n):
    return {"method": m.method, "lr": lr, "n": n, "stream_accuracy": m.stream_accuracy,
            "n_backward_samples": m.n_backward_samples, "clean_accuracy": m.clean_accuracy}
