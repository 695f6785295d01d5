"""Batch-norm MLP classifier with hand-written backprop.

Architecture: ``[Linear -> BatchNorm -> ReLU] * len(hidden_dims) -> Linear``.

Weights are initialised from a seeded Philox stream: every linear weight and
bias is drawn from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` in parameter order
(block 0 weight, block 0 bias, block 1 weight, ..., head weight, head bias).
BN scale starts at 1, shift at 0, running mean at 0 and running variance at 1.

Backward passes accept an upstream gradient of shape ``(B, C)`` or a stack
``(K, B, C)``. The stacked form returns ``K`` independent gradients computed
against the same forward cache, which is how per-sample gradients are taken.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DivergenceError, InsufficientBatchError
from .numerics import log_softmax, make_rng, softmax

BATCH_STATS = "batch-stats"
RUNNING_STATS = "running-stats"
BN_MODES = (BATCH_STATS, RUNNING_STATS)

RUNNING_MOMENTUM = 0.1


@dataclass(frozen=True)
class ArchSpec:
    input_dim: int
    hidden_dims: tuple
    class_count: int
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.class_count < 2:
            raise ContractError("class_count must be at least 2")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ContractError("all layer widths must be >= 1")
        if not self.bn_epsilon > 0:
            raise ContractError("bn_epsilon must be positive")

    @property
    def n_adaptable(self) -> int:
        return 2 * sum(self.hidden_dims)

    def tensor_shapes(self):
        shapes = {}
        fan_in = self.input_dim
        for i, h in enumerate(self.hidden_dims):
            shapes[f"block{i}.linear.weight"] = (h, fan_in)
            shapes[f"block{i}.linear.bias"] = (h,)
            shapes[f"block{i}.bn.gamma"] = (h,)
            shapes[f"block{i}.bn.beta"] = (h,)
            shapes[f"block{i}.bn.running_mean"] = (h,)
            shapes[f"block{i}.bn.running_var"] = (h,)
            fan_in = h
        shapes["head.weight"] = (self.class_count, fan_in)
        shapes["head.bias"] = (self.class_count,)
        return shapes

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "class_count": self.class_count,
            "bn_epsilon": self.bn_epsilon,
        }


def is_buffer(name: str) -> bool:
    return ".running_" in name


class ParamSet:
    """Named float64 tensors for one network, in a fixed order."""

    def __init__(self, arch: ArchSpec, tensors: dict):
        shapes = arch.tensor_shapes()
        if list(tensors) != list(shapes):
            raise ContractError("tensor names do not match the architecture")
        for name, shape in shapes.items():
            if tensors[name].shape != shape:
                raise ContractError(f"{name}: shape {tensors[name].shape} != {shape}")
        self.arch = arch
        self.tensors = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in tensors.items()}

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def parameter_names(self):
        return [n for n in self.tensors if not is_buffer(n)]

    def copy(self) -> "ParamSet":
        return ParamSet(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def equals(self, other: "ParamSet") -> bool:
        """Bitwise equality of every tensor."""
        return self.arch == other.arch and all(
            np.array_equal(v.view(np.uint64), other.tensors[k].view(np.uint64))
            for k, v in self.tensors.items()
        )


def init_params(arch: ArchSpec, seed: int) -> ParamSet:
    rng = make_rng(seed, "init")
    tensors = {}
    fan_in = arch.input_dim
    for i, h in enumerate(arch.hidden_dims):
        bound = 1.0 / np.sqrt(fan_in)
        tensors[f"block{i}.linear.weight"] = rng.uniform(-bound, bound, size=(h, fan_in))
        tensors[f"block{i}.linear.bias"] = rng.uniform(-bound, bound, size=h)
        tensors[f"block{i}.bn.gamma"] = np.ones(h)
        tensors[f"block{i}.bn.beta"] = np.zeros(h)
        tensors[f"block{i}.bn.running_mean"] = np.zeros(h)
        tensors[f"block{i}.bn.running_var"] = np.ones(h)
        fan_in = h
    bound = 1.0 / np.sqrt(fan_in)
    tensors["head.weight"] = rng.uniform(-bound, bound, size=(arch.class_count, fan_in))
    tensors["head.bias"] = rng.uniform(-bound, bound, size=arch.class_count)
    return ParamSet(arch, tensors)


def snapshot(params: ParamSet) -> ParamSet:
    return params.copy()


def restore(params: ParamSet, snap: ParamSet) -> None:
    """Overwrite ``params`` in place with the values held by ``snap``."""
    if params.arch != snap.arch or list(params.tensors) != list(snap.tensors):
        raise ContractError("snapshot belongs to a different architecture")
    for name, value in snap.tensors.items():
        np.copyto(params.tensors[name], value)


class AdaptableView:
    """Flat view over every BN scale and shift scalar.

    Order: for each block, all ``gamma`` entries then all ``beta`` entries.
    ``origin`` is a read-only copy of the values at construction time.
    """

    def __init__(self, params: ParamSet):
        self.params = params
        self.names = []
        for i in range(len(params.arch.hidden_dims)):
            self.names += [f"block{i}.bn.gamma", f"block{i}.bn.beta"]
        self.sizes = [params[n].size for n in self.names]
        self.size = int(sum(self.sizes))
        self.origin = self.values()
        self.origin.flags.writeable = False

    def values(self) -> np.ndarray:
        return np.concatenate([self.params[n] for n in self.names])

    def assign(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ContractError(f"expected {self.size} values, got {flat.shape}")
        offset = 0
        for name, n in zip(self.names, self.sizes):
            np.copyto(self.params[name], flat[offset:offset + n])
            offset += n


@dataclass
class ForwardCache:
    bn_mode: str
    blocks: list = field(default_factory=list)
    head_input: np.ndarray = None
    params: ParamSet = None


def forward(params: ParamSet, x, bn_mode=BATCH_STATS):
    """Return ``(logits, cache)`` for a batch ``x`` of shape ``(B, input_dim)``."""
    if bn_mode not in BN_MODES:
        raise ContractError(f"unknown bn_mode {bn_mode!r}")
    arch = params.arch
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != arch.input_dim:
        raise ContractError(f"batch must have shape (B, {arch.input_dim}), got {h.shape}")
    if bn_mode == BATCH_STATS and h.shape[0] < 2:
        raise InsufficientBatchError("batch statistics need at least two rows")
    cache = ForwardCache(bn_mode=bn_mode, params=params)
    eps = arch.bn_epsilon
    for i in range(len(arch.hidden_dims)):
        p = f"block{i}"
        z = h @ params[f"{p}.linear.weight"].T + params[f"{p}.linear.bias"]
        if bn_mode == BATCH_STATS:
            mu = z.mean(axis=0)
            var = ((z - mu) ** 2).mean(axis=0)
        else:
            mu = params[f"{p}.bn.running_mean"]
            var = params[f"{p}.bn.running_var"]
        inv_std = 1.0 / np.sqrt(var + eps)
        zhat = (z - mu) * inv_std
        a = params[f"{p}.bn.gamma"] * zhat + params[f"{p}.bn.beta"]
        mask = a > 0
        cache.blocks.append({"input": h, "z": z, "mu": mu, "var": var,
                             "inv_std": inv_std, "zhat": zhat, "mask": mask})
        h = a * mask
    cache.head_input = h
    logits = h @ params["head.weight"].T + params["head.bias"]
    return logits, cache


def _backward(cache: ForwardCache, dlogits, full: bool):
    params = cache.params
    g = np.asarray(dlogits, dtype=np.float64)
    rows = cache.head_input.shape[0]
    if g.shape[-2:] != (rows, params.arch.class_count) or g.ndim not in (2, 3):
        raise ContractError(f"upstream gradient shape {g.shape} does not match logits")
    grads = {}
    if full:
        grads["head.weight"] = np.einsum("...bc,bh->...ch", g, cache.head_input)
        grads["head.bias"] = g.sum(axis=-2)
    dh = g @ params["head.weight"]
    for i in reversed(range(len(cache.blocks))):
        blk = cache.blocks[i]
        p = f"block{i}"
        da = dh * blk["mask"]
        zhat = blk["zhat"]
        grads[f"{p}.bn.gamma"] = (da * zhat).sum(axis=-2)
        grads[f"{p}.bn.beta"] = da.sum(axis=-2)
        if i == 0 and not full:
            break
        dzhat = da * params[f"{p}.bn.gamma"]
        if cache.bn_mode == BATCH_STATS:
            n = zhat.shape[0]
            dz = (blk["inv_std"] / n) * (
                n * dzhat
                - dzhat.sum(axis=-2, keepdims=True)
                - zhat * (dzhat * zhat).sum(axis=-2, keepdims=True)
            )
        else:
            dz = dzhat * blk["inv_std"]
        if full:
            grads[f"{p}.linear.weight"] = np.einsum("...bo,bi->...oi", dz, blk["input"])
            grads[f"{p}.linear.bias"] = dz.sum(axis=-2)
        if i > 0:
            dh = dz @ params[f"{p}.linear.weight"]
    return grads


def backward_adaptable(cache: ForwardCache, dlogits) -> np.ndarray:
    """Gradient w.r.t. the BN affine scalars, aligned with :class:`AdaptableView`.

    Returns shape ``(P,)`` for a ``(B, C)`` upstream, ``(K, P)`` for ``(K, B, C)``.
    """
    grads = _backward(cache, dlogits, full=False)
    parts = []
    for i in range(len(cache.blocks)):
        parts += [grads[f"block{i}.bn.gamma"], grads[f"block{i}.bn.beta"]]
    return np.concatenate(parts, axis=-1)


def backward_full(cache: ForwardCache, dlogits) -> dict:
    """Gradients for every trainable tensor (running statistics excluded)."""
    grads = _backward(cache, dlogits, full=True)
    return {name: grads[name] for name in cache.params.parameter_names()}


def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    logp = log_softmax(logits)
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def predict(params: ParamSet, x, bn_mode=RUNNING_STATS):
    logits, _ = forward(params, x, bn_mode)
    return logits.argmax(axis=1)


def _update_running_stats(params: ParamSet, cache: ForwardCache):
    for i, blk in enumerate(cache.blocks):
        n = blk["z"].shape[0]
        rm = params[f"block{i}.bn.running_mean"]
        rv = params[f"block{i}.bn.running_var"]
        rm *= 1.0 - RUNNING_MOMENTUM
        rm += RUNNING_MOMENTUM * blk["mu"]
        rv *= 1.0 - RUNNING_MOMENTUM
        rv += RUNNING_MOMENTUM * blk["var"] * (n / (n - 1))


@dataclass
class TrainHyper:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0


def _minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches.pop()
    return batches


def train_base(arch: ArchSpec, x, y, hyper: TrainHyper) -> ParamSet:
    """Train the base classifier with minibatch SGD + momentum on cross-entropy.

    Running BN statistics are tracked with momentum 0.1 during training. With
    ``epochs == 0`` a single statistics-only pass populates them instead.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    params = init_params(arch, hyper.seed)
    names = params.parameter_names()
    velocity = {n: np.zeros_like(params[n]) for n in names}
    if hyper.epochs == 0:
        rng = make_rng(hyper.seed, "shuffle", 0)
        for idx in _minibatches(len(x), hyper.batch_size, rng):
            _, cache = forward(params, x[idx], BATCH_STATS)
            _update_running_stats(params, cache)
        return params
    for epoch in range(hyper.epochs):
        rng = make_rng(hyper.seed, "shuffle", epoch)
        for idx in _minibatches(len(x), hyper.batch_size, rng):
            logits, cache = forward(params, x[idx], BATCH_STATS)
            loss, dlogits = cross_entropy(logits, y[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}", index=epoch)
            _update_running_stats(params, cache)
            grads = backward_full(cache, dlogits)
            for n in names:
                velocity[n] *= hyper.momentum
                velocity[n] += grads[n]
                params[n][...] -= hyper.lr * velocity[n]
    return params


def accuracy(params: ParamSet, x, y, bn_mode=RUNNING_STATS) -> float:
    return float(np.mean(predict(params, x, bn_mode) == np.asarray(y)))


def probabilities(params: ParamSet, x, bn_mode=RUNNING_STATS):
    logits, _ = forward(params, x, bn_mode)
    return softmax(logits)
