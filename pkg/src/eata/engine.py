"""Online adaptation loop over BN affine parameters.

Per batch: forward with batch statistics, predict, score samples, and take one
SGD-with-momentum step on

    L = (1 / n_active) * sum_{active} S(x) E(x) + beta * R(theta)

``tent`` fixes ``S = 1`` for every sample and ``beta = 0``; ``eta`` keeps the
selection weights with ``beta = 0``; ``eata`` adds the Fisher penalty. A batch
with no active sample skips the optimizer entirely. ``source`` never adapts and
predicts with running statistics.

Sliding-window mode (``window_len = L``) handles one sample at a time: the L
previous samples plus the current one form the batch. During cold start the
available samples are repeated cyclically to fill the batch. Counters in this
mode are per arriving sample: a sample counts as backward when its step ran
an update, otherwise as skipped.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, ContractError, DivergenceError
from .fisher import FisherDiag, reg_grad, reg_penalty
from .network import (
    BATCH_STATS,
    RUNNING_STATS,
    AdaptableView,
    ParamSet,
    backward_adaptable,
    forward,
    restore,
    snapshot,
)
from .numerics import log_softmax
from .selection import EmaTracker, SelectionConfig, select_batch

METHODS = ("source", "tent", "eta", "eata")
RESET_POLICIES = ("per-stream", "lifelong", "episodic")


@dataclass
class AdaptConfig:
    method: str = "eata"
    lr: float = 0.005
    momentum: float = 0.9
    beta: float = None
    batch_size: int = 64
    reset_policy: str = "per-stream"
    window_len: int = None
    selection: SelectionConfig = None
    seed: int = 0
    # auto beta: penalty equals the first batch's entropy loss when every
    # adaptable scalar sits this far from its origin
    beta_reference_shift: float = 0.1

    def __post_init__(self):
        if isinstance(self.selection, dict):
            self.selection = SelectionConfig(**self.selection)
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}")
        if self.reset_policy not in RESET_POLICIES:
            raise ConfigurationError(f"reset_policy must be one of {RESET_POLICIES}")
        if self.method in ("source", "tent", "eta"):
            if self.beta not in (None, 0, 0.0):
                raise ConfigurationError(f"method={self.method} requires beta = 0")
            self.beta = 0.0
        elif self.beta is not None and not self.beta > 0:
            raise ConfigurationError("method=eata requires beta > 0")
        if self.window_len is not None and self.window_len < 2:
            raise ConfigurationError("window_len must be at least 2")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2")
        if self.lr < 0 or self.momentum < 0:
            raise ConfigurationError("lr and momentum must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass
class SgdState:
    velocity: np.ndarray

    def reset(self):
        self.velocity[:] = 0.0


def sgd_step(view: AdaptableView, grads, state: SgdState, lr, momentum, batch_index=None):
    """``v <- momentum * v + g``; ``theta <- theta - lr * v``."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != state.velocity.shape or grads.shape != (view.size,):
        raise ContractError("gradient length does not match the adaptable view")
    if not np.all(np.isfinite(grads)):
        raise DivergenceError(f"non-finite gradient at batch {batch_index}", index=batch_index)
    state.velocity *= momentum
    state.velocity += grads
    view.assign(view.values() - lr * state.velocity)


def entropy_grad_logits(logits):
    """Per-sample entropy and its gradient w.r.t. the logits."""
    logp = log_softmax(logits)
    p = np.exp(logp)
    ent = -(p * logp).sum(axis=1)
    return ent, -p * (logp + ent[:, None])


def weighted_entropy_loss(params: ParamSet, x, weights, beta=0.0, fisher=None, origin=None):
    """Loss and BN-affine gradient for fixed sample weights.

    ``weights`` are treated as constants; rows with weight 0 still shape the
    batch statistics but contribute no loss term.
    """
    weights = np.asarray(weights, dtype=np.float64)
    active = weights > 0
    n_active = int(active.sum())
    logits, cache = forward(params, x, BATCH_STATS)
    ent, dent = entropy_grad_logits(logits)
    view = AdaptableView(params)
    if n_active == 0:
        return 0.0, np.zeros(view.size)
    loss = float(np.dot(weights[active], ent[active])) / n_active
    grad = backward_adaptable(cache, dent * (weights / n_active)[:, None])
    if beta:
        theta = view.values()
        loss += beta * reg_penalty(theta, origin, fisher)
        grad = grad + beta * reg_grad(theta, origin, fisher)
    return loss, grad


@dataclass
class RunMetrics:
    method: str
    reset_policy: str
    n_forward_samples: int = 0
    n_backward_samples: int = 0
    n_skipped_samples: int = 0
    n_updates: int = 0
    correct: int = 0
    total: int = 0
    batch_accuracy: list = field(default_factory=list)
    per_shift: dict = field(default_factory=dict)
    clean_accuracy: float = None
    clean_readapt_accuracy: float = None
    beta: float = 0.0

    @property
    def stream_accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def record(self, tags, hits, shift_tags):
        hits = np.asarray(hits, dtype=bool)
        self.correct += int(hits.sum())
        self.total += len(hits)
        self.batch_accuracy.append(float(hits.mean()))
        for k in np.unique(tags):
            name = shift_tags[k] if 0 <= k < len(shift_tags) else str(k)
            entry = self.per_shift.setdefault(name, {"correct": 0, "total": 0})
            sel = tags == k
            entry["correct"] += int(hits[sel].sum())
            entry["total"] += int(sel.sum())

    def to_dict(self):
        per_shift = {
            k: dict(v, accuracy=v["correct"] / v["total"]) for k, v in sorted(self.per_shift.items())
        }
        return {
            "method": self.method,
            "reset_policy": self.reset_policy,
            "n_forward_samples": self.n_forward_samples,
            "n_backward_samples": self.n_backward_samples,
            "n_skipped_samples": self.n_skipped_samples,
            "n_updates": self.n_updates,
            "correct": self.correct,
            "total": self.total,
            "stream_accuracy": self.stream_accuracy,
            "batch_accuracy": list(self.batch_accuracy),
            "per_shift": per_shift,
            "clean_accuracy": self.clean_accuracy,
            "clean_readapt_accuracy": self.clean_readapt_accuracy,
            "beta": self.beta,
        }


TRACE_FIELDS = ["batch", "shift_tag", "rows", "ent_mean", "ent_min", "ent_max",
                "n_active", "weight_mean", "loss", "reg", "accuracy"]


def write_trace_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        w.writeheader()
        for rec in records:
            w.writerow({k: rec.get(k, "") for k in TRACE_FIELDS})


def evaluate(params: ParamSet, x, y, batch_size=64, bn_mode=BATCH_STATS) -> float:
    """Accuracy without adaptation, batching in row order (a 1-row tail joins the previous batch)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = len(x)
    cuts = list(range(0, n, batch_size)) + [n]
    if len(cuts) > 2 and cuts[-1] - cuts[-2] == 1:
        del cuts[-2]
    hits = 0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        logits, _ = forward(params, x[lo:hi], bn_mode)
        hits += int((logits.argmax(axis=1) == y[lo:hi]).sum())
    return hits / n


class Engine:
    """Adapts ``params`` in place. One engine per stream of work, single-threaded."""

    def __init__(self, params: ParamSet, config: AdaptConfig, fisher: FisherDiag = None,
                 origin=None):
        if config.method == "eata" and fisher is None:
            raise ConfigurationError("method=eata needs a FisherDiag")
        self.params = params
        self.config = config
        self.fisher = fisher
        self.view = AdaptableView(params)
        if origin is not None:
            origin = np.array(origin, dtype=np.float64)
            if origin.shape != (self.view.size,):
                raise ContractError("origin does not match the adaptable view")
            origin.flags.writeable = False
            self.view.origin = origin
        if fisher is not None and fisher.omega.shape != (self.view.size,):
            raise ContractError("FisherDiag does not match the adaptable view")
        self.selection = config.selection or SelectionConfig.for_classes(params.arch.class_count)
        self.state = SgdState(np.zeros(self.view.size))
        self.tracker = EmaTracker()
        self.beta = config.beta
        self.window = deque(maxlen=config.window_len) if config.window_len else None
        self.trace = None
        self.batch_counter = 0
        self.metrics = RunMetrics(config.method, config.reset_policy)

    # state management -------------------------------------------------------

    def reset_state(self):
        self.state.reset()
        self.tracker = EmaTracker()
        if self.window is not None:
            self.window.clear()

    def restore(self, snap: ParamSet):
        restore(self.params, snap)
        self.reset_state()

    def _auto_beta(self, x):
        logits, _ = forward(self.params, x, BATCH_STATS)
        ent, _ = entropy_grad_logits(logits)
        omega = self.fisher.omega
        mass = float(omega.sum()) * self.config.beta_reference_shift ** 2
        if mass == 0.0:
            return 1.0
        beta = max(float(ent.mean()), 1e-12) / mass
        # heavy-ball SGD on beta * omega_i * t^2 is stable while
        # lr * 2 * beta * omega_i < 2 * (1 + momentum); keep half that margin
        lr, mom = self.config.lr, self.config.momentum
        if lr > 0 and omega.max() > 0:
            beta = min(beta, 0.5 * (1.0 + mom) / (lr * float(omega.max())))
        return beta

    # one batch --------------------------------------------------------------

    def adapt_batch(self, x, tags=None):
        """Predict ``x`` with the current parameters, then update. Returns class indices."""
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        b = len(x)
        m = self.metrics
        m.n_forward_samples += b
        if cfg.method == "source":
            logits, _ = forward(self.params, x, RUNNING_STATS)
            m.n_skipped_samples += b
            self._trace(tags, b, None, None, 0.0, 0.0)
            self.batch_counter += 1
            return logits.argmax(axis=1)

        if cfg.method == "eata" and self.beta is None:
            self.beta = self._auto_beta(x)
        logits, cache = forward(self.params, x, BATCH_STATS)
        if not np.all(np.isfinite(logits)):
            raise DivergenceError(f"non-finite logits at batch {self.batch_counter}",
                                  index=self.batch_counter)
        preds = logits.argmax(axis=1)
        ent, dent = entropy_grad_logits(logits)
        if cfg.method == "tent":
            weights = np.ones(b)
        else:
            sel, self.tracker = select_batch(logits, self.selection, self.tracker)
            weights = sel.weight
        active = weights > 0
        n_active = int(active.sum())
        m.n_backward_samples += n_active
        m.n_skipped_samples += b - n_active
        loss = reg = 0.0
        if n_active:
            loss = float(np.dot(weights[active], ent[active])) / n_active
            grad = backward_adaptable(cache, dent * (weights / n_active)[:, None])
            if self.beta:
                theta = self.view.values()
                reg = reg_penalty(theta, self.view.origin, self.fisher)
                loss += self.beta * reg
                grad = grad + self.beta * reg_grad(theta, self.view.origin, self.fisher)
            sgd_step(self.view, grad, self.state, cfg.lr, cfg.momentum, self.batch_counter)
            m.n_updates += 1
        self._trace(tags, b, ent, weights, loss, reg)
        self.batch_counter += 1
        return preds

    def adapt_single(self, sample, tag=None):
        """Sliding-window step for one sample; returns its predicted class."""
        if self.window is None:
            raise ConfigurationError("adapt_single needs window_len")
        sample = np.asarray(sample, dtype=np.float64)
        rows = list(self.window)
        L = self.window.maxlen
        if len(rows) < L:
            pool = rows + [sample]
            rows = [pool[i % len(pool)] for i in range(L)]
        batch = np.vstack(rows + [sample])
        before = self.metrics.n_updates
        fwd, bwd, skip = (self.metrics.n_forward_samples, self.metrics.n_backward_samples,
                          self.metrics.n_skipped_samples)
        tags = None if tag is None else np.full(len(batch), tag)
        pred = self.adapt_batch(batch, tags)[-1]
        updated = self.metrics.n_updates > before
        self.metrics.n_forward_samples = fwd + 1
        self.metrics.n_backward_samples = bwd + int(updated)
        self.metrics.n_skipped_samples = skip + int(not updated)
        self.window.append(sample)
        return int(pred)

    def _trace(self, tags, rows, ent, weights, loss, reg):
        if self.trace is None:
            return
        rec = {"batch": self.batch_counter, "rows": rows, "loss": loss, "reg": reg,
               "shift_tag": "" if tags is None or len(tags) == 0 else int(tags[-1])}
        if ent is not None:
            active = weights > 0
            rec.update(ent_mean=float(ent.mean()), ent_min=float(ent.min()), ent_max=float(ent.max()),
                       n_active=int(active.sum()),
                       weight_mean=float(weights[active].mean()) if active.any() else 0.0)
        else:
            rec.update(n_active=0)
        self.trace.append(rec)

    def readapt_accuracy(self, x, y) -> float:
        """Clean accuracy under continued adaptation from the current state.

        A copy of this engine (parameters, origin, velocity, tracker and beta)
        keeps adapting over ``x`` in row order, predicting each batch before
        its update. The live engine is left as it was.
        """
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y)
        cfg = replace(self.config, reset_policy="lifelong", window_len=None)
        other = Engine(self.params.copy(), cfg, self.fisher, origin=self.view.origin)
        other.state.velocity[:] = self.state.velocity
        other.tracker = self.tracker.copy()
        other.beta = self.beta
        n = len(x)
        cuts = list(range(0, n, cfg.batch_size)) + [n]
        if len(cuts) > 2 and cuts[-1] - cuts[-2] == 1:
            del cuts[-2]
        hits = 0
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            hits += int((other.adapt_batch(x[lo:hi]) == y[lo:hi]).sum())
        return hits / n

    # whole stream -----------------------------------------------------------

    def run_stream(self, stream, clean=None, clean_bn_mode=BATCH_STATS) -> RunMetrics:
        """Adapt over ``stream`` and return fresh :class:`RunMetrics` for it.

        ``clean`` is an optional ``(features, labels)`` pair scored after the
        stream and before any per-stream restore, two ways: frozen (no
        updates, ``clean_bn_mode`` statistics) into ``clean_accuracy``, and
        under continued adaptation (:meth:`readapt_accuracy`, the reading
        closest to measuring clean accuracy "via (re)adaptation") into
        ``clean_readapt_accuracy``.
        """
        cfg = self.config
        self.metrics = RunMetrics(cfg.method, cfg.reset_policy)
        snap = snapshot(self.params) if cfg.reset_policy != "lifelong" else None
        if cfg.reset_policy != "lifelong":
            self.reset_state()
            if cfg.method == "eata" and cfg.beta is None:
                self.beta = None
        for batch in stream.batches():
            if self.window is not None:
                preds = np.array([self.adapt_single(x, t) for x, t in zip(batch.x, batch.tags)])
            else:
                preds = self.adapt_batch(batch.x, batch.tags)
            hits = stream.score(batch.index, preds)
            self.metrics.record(batch.tags, hits, stream.shift_tags)
            if self.trace is not None and self.trace:
                self.trace[-1]["accuracy"] = float(np.mean(hits))
            if cfg.reset_policy == "episodic":
                self.restore(snap)
        self.metrics.beta = float(self.beta or 0.0)
        if clean is not None:
            mode = RUNNING_STATS if cfg.method == "source" else clean_bn_mode
            self.metrics.clean_accuracy = evaluate(self.params, clean[0], clean[1],
                                                   cfg.batch_size, mode)
            self.metrics.clean_readapt_accuracy = self.readapt_accuracy(clean[0], clean[1])
        if cfg.reset_policy == "per-stream":
            self.restore(snap)
        return self.metrics


def run_stream(params, stream, config: AdaptConfig, fisher=None, clean=None) -> RunMetrics:
    return Engine(params, config, fisher).run_stream(stream, clean)
