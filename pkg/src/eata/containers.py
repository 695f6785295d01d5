"""Little-endian binary file formats.

Tensor container (checkpoints and Fisher files)::

    magic    8 bytes  b"EATATENS"
    version  u32      1
    arch     u32 input_dim, u32 n_hidden, u32 * n_hidden widths, u32 class_count, f64 bn_epsilon
    count    u32      number of tensors
    tensor   u32 name length, name (utf-8), u32 rank, u64 * rank dims, f64 payload (row-major)

Data container (labeled sets and streams)::

    magic     8 bytes  b"EATADATA"
    version   u32      1
    header    u32 d, u32 C, u64 N, u32 B, u64 n_batches
    manifest  u64 length, JSON text (utf-8)
    payload   f64 features (N*d), i32 labels (N), i32 tags (N), i64 offsets (n_batches + 1)

A labeled set is stored with ``B = 0`` and ``n_batches = 0``.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict

import numpy as np

from .errors import FormatError
from .fisher import FisherDiag
from .network import ArchSpec, ParamSet
from .shiftgen import LabeledSet, ShiftStream, SourceSpec

TENSOR_MAGIC = b"EATATENS"
DATA_MAGIC = b"EATADATA"
VERSION = 1


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, fmt):
        try:
            vals = struct.unpack_from("<" + fmt, self.buf, self.pos)
        except struct.error as exc:
            raise FormatError(f"truncated file: {exc}") from None
        self.pos += struct.calcsize("<" + fmt)
        return vals if len(vals) > 1 else vals[0]

    def raw(self, n):
        out = self.buf[self.pos:self.pos + n]
        if len(out) != n:
            raise FormatError("truncated file")
        self.pos += n
        return out

    def array(self, dtype, count):
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.raw(dt.itemsize * count), dtype=dt).astype(dt.newbyteorder("="))


def _pack_arch(arch: ArchSpec) -> bytes:
    h = arch.hidden_dims
    return struct.pack(f"<II{len(h)}IId", arch.input_dim, len(h), *h, arch.class_count, arch.bn_epsilon)


def _read_arch(r: _Reader) -> ArchSpec:
    input_dim = r.take("I")
    n_hidden = r.take("I")
    hidden = r.take(f"{n_hidden}I") if n_hidden else ()
    hidden = (hidden,) if isinstance(hidden, int) else hidden
    class_count = r.take("I")
    eps = r.take("d")
    return ArchSpec(input_dim, tuple(hidden), class_count, eps)


def write_tensors(path, arch: ArchSpec, tensors: dict) -> None:
    parts = [TENSOR_MAGIC, struct.pack("<I", VERSION), _pack_arch(arch), struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        value = np.asarray(value, dtype=np.float64)
        encoded = name.encode("utf-8")
        parts.append(struct.pack(f"<I{len(encoded)}sI", len(encoded), encoded, value.ndim))
        parts.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_tensors(path):
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.raw(8) != TENSOR_MAGIC:
        raise FormatError(f"{path}: not a tensor container")
    version = r.take("I")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    arch = _read_arch(r)
    tensors = {}
    for _ in range(r.take("I")):
        name = r.raw(r.take("I")).decode("utf-8")
        rank = r.take("I")
        dims = r.take(f"{rank}Q") if rank else ()
        dims = (dims,) if isinstance(dims, int) else tuple(dims)
        tensors[name] = r.array("f8", int(np.prod(dims, dtype=np.int64))).reshape(dims)
    return arch, tensors


def save_checkpoint(path, params: ParamSet) -> None:
    write_tensors(path, params.arch, params.tensors)


def load_checkpoint(path) -> ParamSet:
    arch, tensors = read_tensors(path)
    return ParamSet(arch, tensors)


def save_fisher(path, fisher: FisherDiag, arch: ArchSpec) -> None:
    write_tensors(path, arch, {
        "fisher.omega": fisher.omega,
        "fisher.sample_count": np.array(float(fisher.sample_count)),
    })


def load_fisher(path):
    """Return ``(FisherDiag, ArchSpec)``."""
    arch, tensors = read_tensors(path)
    if "fisher.omega" not in tensors:
        raise FormatError(f"{path}: no fisher.omega tensor")
    q = int(tensors.get("fisher.sample_count", np.array(0.0)))
    return FisherDiag(tensors["fisher.omega"], q), arch


def _write_data(path, features, labels, tags, offsets, class_count, batch_size, manifest):
    features = np.asarray(features, dtype=np.float64)
    n, d = features.shape
    meta = json.dumps(manifest, sort_keys=True).encode("utf-8")
    n_batches = max(len(offsets) - 1, 0)
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<IIIQIQ", VERSION, d, class_count, n, batch_size, n_batches))
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        fh.write(np.ascontiguousarray(features, dtype="<f8").tobytes())
        fh.write(np.asarray(labels, dtype="<i4").tobytes())
        fh.write(np.asarray(tags, dtype="<i4").tobytes())
        fh.write(np.asarray(offsets, dtype="<i8").tobytes())


def _read_data(path):
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.raw(8) != DATA_MAGIC:
        raise FormatError(f"{path}: not a data container")
    version, d, c, n, b, n_batches = r.take("IIIQIQ")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    manifest = json.loads(r.raw(r.take("Q")).decode("utf-8"))
    features = r.array("f8", n * d).reshape(n, d)
    labels = r.array("i4", n).astype(np.int64)
    tags = r.array("i4", n).astype(np.int64)
    offsets = r.array("i8", n_batches + 1 if n_batches else 0)
    return {"d": d, "class_count": c, "batch_size": b, "manifest": manifest,
            "features": features, "labels": labels, "tags": tags, "offsets": offsets}


def save_dataset(path, data: LabeledSet, class_count=None) -> None:
    c = class_count or (data.source.class_count if data.source else int(data.labels.max()) + 1)
    manifest = {"kind": "dataset", "split": data.split,
                "source": asdict(data.source) if data.source else None}
    _write_data(path, data.features, data.labels, np.zeros(len(data), dtype=np.int64), [],
                c, 0, manifest)


def load_dataset(path) -> LabeledSet:
    raw = _read_data(path)
    src = raw["manifest"].get("source")
    return LabeledSet(raw["features"], raw["labels"],
                      SourceSpec(**src) if src else None, raw["manifest"].get("split", ""))


def save_stream(path, stream: ShiftStream, class_count=None) -> None:
    src = stream.manifest.get("source")
    c = class_count or (src["class_count"] if src else int(stream.evaluation_labels().max()) + 1)
    manifest = dict(stream.manifest, kind="stream", shift_tags=stream.shift_tags)
    _write_data(path, stream.features, stream.evaluation_labels(), stream.tags, stream.offsets,
                c, stream.batch_size, manifest)


def load_stream(path) -> ShiftStream:
    raw = _read_data(path)
    manifest = dict(raw["manifest"])
    if manifest.pop("kind", "stream") != "stream":
        raise FormatError(f"{path}: holds a dataset, not a stream")
    shift_tags = manifest.pop("shift_tags", [])
    return ShiftStream(raw["features"], raw["labels"], raw["tags"], raw["offsets"], shift_tags, manifest)


def export_csv(path, features, labels, tags=None, batch_ids=None) -> None:
    """Tidy CSV for inspection: one row per sample."""
    features = np.asarray(features)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["batch", "tag", "label"] + [f"x{j}" for j in range(features.shape[1])])
        for i, row in enumerate(features):
            w.writerow([
                "" if batch_ids is None else int(batch_ids[i]),
                "" if tags is None else int(tags[i]),
                int(labels[i]),
                *(repr(float(v)) for v in row),
            ])


def export_stream_csv(path, stream: ShiftStream) -> None:
    batch_ids = np.repeat(np.arange(stream.n_batches), np.diff(stream.offsets))
    export_csv(path, stream.features, stream.evaluation_labels(), stream.tags, batch_ids)
