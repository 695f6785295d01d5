"""Synthetic in-distribution data and corrupted test streams.

The source domain is a mixture of Gaussian blobs, one per class, with
uniform class priors. Class means form a regular simplex inside a
low-dimensional subspace; the remaining input directions carry only a small
ambient spread, so off-subspace noise is something the base model never saw.
Corruptions act on feature vectors. Each kind has a fixed five-level severity
table (severity 0 is the identity):

==============  =============================================  ==========================
kind            effect                                         severity 1..5
==============  =============================================  ==========================
gaussian-noise  ``x + sigma * N(0, I)``                         sigma = 0.4 0.8 1.2 1.6 2.0
feature-scale   ``x * factor``                                  factor = 1.5 2 3 4 6
rotation        rotate coordinate pairs (0,1), (2,3), ...      degrees = 15 30 45 60 90
mask-dropout    zero each coordinate with probability p        p = 0.1 0.2 0.3 0.4 0.5
mean-shift      ``x + magnitude * u`` for a seeded unit ``u``    magnitude = 1 2 3 4 6
==============  =============================================  ==========================

Random corruptions draw from a per-sample Philox stream keyed by
``(shift seed, kind, sample position)``, so generating a stream in pieces or in
parallel gives the same bytes. Table version: :data:`SEVERITY_TABLE_VERSION`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError, ContractError
from .numerics import make_rng

SEVERITY_TABLE_VERSION = 1

SEVERITY_TABLES = {
    "gaussian-noise": (0.0, 0.4, 0.8, 1.2, 1.6, 2.0),
    "feature-scale": (1.0, 1.5, 2.0, 3.0, 4.0, 6.0),
    "rotation": (0.0, 15.0, 30.0, 45.0, 60.0, 90.0),
    "mask-dropout": (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
    "mean-shift": (0.0, 1.0, 2.0, 3.0, 4.0, 6.0),
}
SHIFT_KINDS = tuple(SEVERITY_TABLES)
ORDERS = ("sequential", "mixed")


@dataclass(frozen=True)
class SourceSpec:
    class_count: int = 4
    input_dim: int = 32
    per_class: int = 1000
    center_scale: float = 3.0
    within_std: float = 1.0
    seed: int = 0
    latent_dim: int = None
    ambient_std: float = 0.01

    def __post_init__(self):
        if self.class_count < 2 or self.input_dim < 2:
            raise ConfigurationError("need class_count >= 2 and input_dim >= 2")
        if self.per_class < 1:
            raise ConfigurationError("per_class must be positive")
        if self.latent_dim is None:
            object.__setattr__(self, "latent_dim", min(self.class_count - 1, self.input_dim))
        if not self.class_count - 1 <= self.latent_dim <= self.input_dim:
            raise ConfigurationError("latent_dim must lie in [class_count - 1, input_dim]")


@dataclass(frozen=True)
class ShiftSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SEVERITY_TABLES:
            raise ConfigurationError(f"unknown shift kind {self.kind!r}")
        if not 0 <= self.severity <= 5:
            raise ConfigurationError("severity must be in 0..5")

    @property
    def level(self) -> float:
        return SEVERITY_TABLES[self.kind][self.severity]

    @property
    def tag(self) -> str:
        return f"{self.kind}-{self.severity}"


@dataclass(frozen=True)
class LabeledSet:
    features: np.ndarray
    labels: np.ndarray
    source: SourceSpec = None
    split: str = ""

    def __len__(self):
        return len(self.labels)


def _simplex(c):
    """Vertices of a regular simplex centred at the origin, unit distance from it, in R^(c-1)."""
    v = np.eye(c) - 1.0 / c
    # orthonormal basis of the sum-zero hyperplane
    basis = np.linalg.svd(v)[2][: c - 1]
    pts = v @ basis.T
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def _embedding(spec: SourceSpec):
    rng = make_rng(spec.seed, "embedding")
    q, r = np.linalg.qr(rng.standard_normal((spec.input_dim, spec.input_dim)))
    q = q * np.sign(np.diag(r))
    return q[:, : spec.latent_dim]


def class_centers(spec: SourceSpec) -> np.ndarray:
    """Class means in input space: a scaled regular simplex under a seeded rotation."""
    latent = np.zeros((spec.class_count, spec.latent_dim))
    latent[:, : spec.class_count - 1] = _simplex(spec.class_count) * spec.center_scale
    return latent @ _embedding(spec).T


def _draw(spec, labels, rng):
    emb = _embedding(spec)
    latent = spec.within_std * rng.standard_normal((len(labels), spec.latent_dim))
    ambient = spec.ambient_std * rng.standard_normal((len(labels), spec.input_dim))
    return class_centers(spec)[labels] + latent @ emb.T + ambient


def _draw_split(spec, split):
    rng = make_rng(spec.seed, split)
    labels = np.repeat(np.arange(spec.class_count), spec.per_class)
    labels = labels[rng.permutation(len(labels))]
    return LabeledSet(features=_draw(spec, labels, rng), labels=labels, source=spec, split=split)


def make_source(spec: SourceSpec):
    """Return ``(train, test)``: two disjoint draws of ``per_class`` samples per class.

    Class structure lives in a ``latent_dim``-dimensional subspace (a seeded
    random rotation of the first coordinates); every input coordinate also
    carries isotropic ``ambient_std`` noise.
    """
    return _draw_split(spec, "train"), _draw_split(spec, "test")


def make_id_samples(spec: SourceSpec, count: int) -> LabeledSet:
    """A third independent in-distribution draw, used as the Fisher sample set."""
    rng = make_rng(spec.seed, "id")
    labels = rng.integers(0, spec.class_count, size=count)
    return LabeledSet(features=_draw(spec, labels, rng), labels=labels, source=spec, split="id")


def _rotate_pairs(x, degrees):
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    out = x.copy()
    d = x.shape[-1] - x.shape[-1] % 2
    a = x[..., 0:d:2]
    b = x[..., 1:d:2]
    out[..., 0:d:2] = c * a - s * b
    out[..., 1:d:2] = s * a + c * b
    return out


def _mean_shift_direction(shift: ShiftSpec, d):
    u = make_rng(shift.seed, "mean-shift").standard_normal(d)
    return u / np.linalg.norm(u)


def corrupt_batch(x, shift: ShiftSpec, sample_ids):
    """Corrupt rows of ``x``; ``sample_ids`` key the per-sample random streams."""
    x = np.asarray(x, dtype=np.float64)
    level = shift.level
    if shift.severity == 0:
        return x.copy()
    kind = shift.kind
    if kind == "feature-scale":
        return x * level
    if kind == "rotation":
        return _rotate_pairs(x, level)
    if kind == "mean-shift":
        return x + level * _mean_shift_direction(shift, x.shape[1])
    out = np.empty_like(x)
    for r, sid in enumerate(sample_ids):
        rng = make_rng(shift.seed, kind, int(sid))
        if kind == "gaussian-noise":
            out[r] = x[r] + level * rng.standard_normal(x.shape[1])
        else:
            out[r] = np.where(rng.random(x.shape[1]) < level, 0.0, x[r])
    return out


def corrupt(x, shift: ShiftSpec, sample_id: int = 0):
    return corrupt_batch(np.asarray(x, dtype=np.float64)[None, :], shift, [sample_id])[0]


@dataclass(frozen=True)
class StreamBatch:
    """What the adaptation side sees: features and shift tags, never labels."""

    index: int
    x: np.ndarray
    tags: np.ndarray

    def __len__(self):
        return len(self.x)


class ShiftStream:
    """Ordered batches of corrupted samples. Labels stay behind :meth:`score`."""

    def __init__(self, features, labels, tags, offsets, shift_tags, manifest):
        self.features = np.asarray(features, dtype=np.float64)
        self._labels = np.asarray(labels, dtype=np.int64)
        self.tags = np.asarray(tags, dtype=np.int64)
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.shift_tags = list(shift_tags)
        self.manifest = manifest

    def __len__(self):
        return len(self.features)

    @property
    def n_batches(self) -> int:
        return len(self.offsets) - 1

    @property
    def batch_size(self) -> int:
        return int(self.manifest.get("batch_size", 0))

    def batch(self, i) -> StreamBatch:
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return StreamBatch(index=i, x=self.features[lo:hi], tags=self.tags[lo:hi])

    def batches(self):
        for i in range(self.n_batches):
            yield self.batch(i)

    def score(self, batch_index, predictions) -> np.ndarray:
        """Per-sample correctness of ``predictions`` for one batch (evaluation only)."""
        lo, hi = self.offsets[batch_index], self.offsets[batch_index + 1]
        predictions = np.asarray(predictions)
        if predictions.shape != (hi - lo,):
            raise ContractError("prediction count does not match the batch")
        return predictions == self._labels[lo:hi]

    def evaluation_labels(self) -> np.ndarray:
        return self._labels.copy()

    def head(self, n) -> "ShiftStream":
        """The first ``n`` samples, keeping batch boundaries (the last batch may be cut)."""
        n = int(n)
        if not 2 <= n <= len(self):
            raise ConfigurationError(f"head length must lie in [2, {len(self)}]")
        cuts = [int(c) for c in self.offsets if c < n] + [n]
        if cuts[-1] - cuts[-2] == 1:
            del cuts[-2]
        manifest = dict(self.manifest, head=n)
        return ShiftStream(self.features[:n], self._labels[:n], self.tags[:n], cuts,
                           self.shift_tags, manifest)


def _batch_offsets(start, stop, batch_size):
    cuts = list(range(start, stop, batch_size)) + [stop]
    if len(cuts) > 2 and cuts[-1] - cuts[-2] == 1:
        warnings.warn("dropping a 1-row remainder batch", stacklevel=3)
        return cuts[:-1], 1
    return cuts, 0


def make_stream(test_set: LabeledSet, shifts, order="sequential", n=None, batch_size=64,
                seed=0, allow_repeat=False) -> ShiftStream:
    """Build a corrupted stream from ``test_set``.

    ``n`` is the total stream length. ``sequential`` splits it into equal
    contiguous segments, one per shift, each batched separately; ``mixed``
    assigns each sample a shift uniformly at random and batches the whole.
    """
    shifts = [s if isinstance(s, ShiftSpec) else ShiftSpec(**s) for s in shifts]
    if not shifts:
        raise ConfigurationError("need at least one shift")
    if order not in ORDERS:
        raise ConfigurationError(f"order must be one of {ORDERS}")
    if batch_size < 2:
        raise ConfigurationError("batch_size must be at least 2")
    available = len(test_set)
    n = available if n is None else int(n)
    if n < 1:
        raise ConfigurationError("stream length must be positive")
    if n > available and not allow_repeat:
        raise ConfigurationError(f"requested {n} samples from a set of {available}")
    rng = make_rng(seed, "stream", "indices")
    reps = -(-n // available)
    idx = np.concatenate([rng.permutation(available) for _ in range(reps)])[:n]

    if order == "mixed":
        tags = make_rng(seed, "stream", "mix").integers(0, len(shifts), size=n)
        cuts, dropped = _batch_offsets(0, n, batch_size)
    else:
        bounds = [0]
        for k in range(len(shifts)):
            bounds.append(bounds[-1] + n // len(shifts) + (1 if k < n % len(shifts) else 0))
        tags = np.concatenate([np.full(bounds[k + 1] - bounds[k], k) for k in range(len(shifts))])
        cuts, dropped = [0], 0
        for k in range(len(shifts)):
            seg, drop = _batch_offsets(bounds[k], bounds[k + 1], batch_size)
            if drop:
                tags[bounds[k + 1] - 1] = -1
            dropped += drop
            cuts += seg[1:]
    keep = np.ones(n, dtype=bool)
    if dropped:
        keep = tags >= 0 if order == "sequential" else np.arange(n) < n - 1

    x = test_set.features[idx].copy()
    for k, shift in enumerate(shifts):
        rows = np.flatnonzero(tags == k)
        if len(rows):
            x[rows] = corrupt_batch(x[rows], shift, rows)
    labels = test_set.labels[idx]

    # re-base offsets after removing dropped rows
    removed_before = np.concatenate([[0], np.cumsum(~keep)])
    offsets = np.array([c - removed_before[c] for c in cuts])
    offsets = np.unique(offsets)
    manifest = {
        "format_version": 1,
        "severity_table_version": SEVERITY_TABLE_VERSION,
        "source": asdict(test_set.source) if test_set.source is not None else None,
        "split": test_set.split,
        "shifts": [asdict(s) for s in shifts],
        "order": order,
        "n": n,
        "batch_size": batch_size,
        "seed": seed,
        "allow_repeat": allow_repeat,
    }
    return ShiftStream(x[keep], labels[keep], tags[keep], offsets, [s.tag for s in shifts], manifest)


def stream_from_manifest(manifest) -> ShiftStream:
    if manifest.get("source") is None:
        raise ConfigurationError("manifest has no source spec; cannot rebuild")
    train, test = make_source(SourceSpec(**manifest["source"]))
    base = {"train": train, "test": test}[manifest.get("split") or "test"]
    return make_stream(base, manifest["shifts"], order=manifest["order"], n=manifest["n"],
                       batch_size=manifest["batch_size"], seed=manifest["seed"],
                       allow_repeat=manifest["allow_repeat"])


def clean_stream(test_set: LabeledSet, batch_size=64, n=None, seed=0) -> ShiftStream:
    """Uncorrupted stream (severity 0) over ``test_set``."""
    return make_stream(test_set, [ShiftSpec("gaussian-noise", 0)], n=n, batch_size=batch_size, seed=seed)
