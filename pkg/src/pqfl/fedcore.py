"""Desk-scale federated averaging: data handling, local training, aggregation.

The model family is a softmax classifier with zero or more ReLU hidden
layers (logistic regression when `hidden_dims` is empty), trained with
mini-batch SGD or AdamW on float32 parameters. Everything is deterministic
given the configured seeds: shuffling uses per-(round, client) derived
seeds, and aggregation accumulates deltas sequentially in ascending
client-id order so repeated runs are bit-identical.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from pqfl.codec import ParameterVector
from pqfl.errors import (
    DimensionMismatch,
    EmptyVerifiedSet,
    NonFiniteGradient,
    RoundMismatch,
    TooFewSamples,
)


def derive_seed(master: int, *labels: object) -> int:
    """Stable domain-separated 63-bit seed from a master seed and labels."""
    text = f"pqfl.derive.v1:{master}:" + ":".join(map(str, labels))
    h = hashlib.sha256(text.encode()).digest()
    return struct.unpack("<Q", h[:8])[0] >> 1


def train_seed(master: int, round: int, client_id: int) -> int:
    """Seed for one client's local shuffling in one round. Shared by the
    signed protocol and the plain loop so their training paths coincide."""
    return derive_seed(master, "train", round, client_id)


# --- datasets ---------------------------------------------------------------

@dataclass(frozen=True)
class ClientDataset:
    """Feature matrix (num_samples x num_features, float32) with integer
    class labels in [0, num_classes)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise DimensionMismatch(f"features must be 2-D, got shape {feats.shape}")
        if labels.ndim != 1 or labels.shape[0] != feats.shape[0]:
            raise DimensionMismatch(
                f"labels shape {labels.shape} does not match {feats.shape[0]} samples"
            )
        if feats.shape[0] == 0:
            raise DimensionMismatch("dataset is empty")
        if labels.min() < 0:
            raise DimensionMismatch("negative label")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def num_samples(self) -> int:
        return int(self.features.shape[0])

    @property
    def num_features(self) -> int:
        return int(self.features.shape[1])


def generate_synthetic(
    num_samples: int,
    num_features: int,
    num_classes: int,
    seed: int,
    separation: float = 3.0,
) -> ClientDataset:
    """Seeded Gaussian-mixture classification set: one unit-variance cluster
    per class, cluster centres scaled by `separation`."""
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_classes, num_features)) * separation
    labels = rng.integers(0, num_classes, size=num_samples)
    feats = centers[labels] + rng.standard_normal((num_samples, num_features))
    return ClientDataset(features=feats.astype(np.float32), labels=labels)


def concat_datasets(datasets: list[ClientDataset]) -> ClientDataset:
    return ClientDataset(
        features=np.concatenate([d.features for d in datasets], axis=0),
        labels=np.concatenate([d.labels for d in datasets], axis=0),
    )


def split_iid(dataset: ClientDataset, num_clients: int, seed: int) -> list[ClientDataset]:
    """Shuffle with the seeded PRNG, then partition into near-equal shards
    (sizes differ by at most one, larger shards first)."""
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if dataset.num_samples < num_clients:
        raise TooFewSamples(
            f"{dataset.num_samples} samples cannot cover {num_clients} clients"
        )
    perm = np.random.default_rng(seed).permutation(dataset.num_samples)
    shards = []
    for idx in np.array_split(perm, num_clients):
        shards.append(ClientDataset(features=dataset.features[idx], labels=dataset.labels[idx]))
    return shards


# --- IDX container files (big-endian image/label format) --------------------

_IDX_DTYPES = {
    0x08: np.dtype(np.uint8),
    0x09: np.dtype(np.int8),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def read_idx(path: str) -> np.ndarray:
    """Read one IDX file: 2 zero bytes, dtype code, ndim, big-endian u32
    dimensions, then the data in row-major order."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path}: not an IDX file")
    dtype_code, ndim = raw[2], raw[3]
    if dtype_code not in _IDX_DTYPES:
        raise ValueError(f"{path}: unknown IDX dtype code 0x{dtype_code:02x}")
    if len(raw) < 4 + 4 * ndim:
        raise ValueError(f"{path}: truncated dimension table")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    dtype = _IDX_DTYPES[dtype_code]
    count = int(np.prod(dims)) if ndim else 0
    expected = 4 + 4 * ndim + count * dtype.itemsize
    if len(raw) != expected:
        raise ValueError(f"{path}: size {len(raw)} != expected {expected}")
    data = np.frombuffer(raw, dtype=dtype, offset=4 + 4 * ndim)
    return data.reshape(dims)


def load_idx_dataset(images_path: str, labels_path: str, limit: int | None = None) -> ClientDataset:
    """Pair an IDX image file with an IDX label file; pixels are flattened
    and scaled to [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DimensionMismatch(
            f"{images.shape[0]} images vs {labels.shape[0]} labels"
        )
    if limit is not None:
        images = images[:limit]
        labels = labels[:limit]
    feats = images.reshape(images.shape[0], -1).astype(np.float32) / np.float32(255.0)
    return ClientDataset(features=feats, labels=labels.astype(np.int64))


# --- model ------------------------------------------------------------------

@dataclass(frozen=True)
class ModelArchitecture:
    """Softmax classifier: input -> ReLU hidden layers -> class logits.
    Empty `hidden_dims` gives plain logistic regression."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if self.input_dim < 1 or self.num_classes < 2 or any(d < 1 for d in self.hidden_dims):
            raise ValueError(f"invalid architecture {self}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    @property
    def param_count(self) -> int:
        return sum(d_in * d_out + d_out for d_in, d_out in self.layer_dims)


@dataclass(frozen=True)
class GlobalModel:
    params: ParameterVector
    architecture: ModelArchitecture
    round: int = 0

    def __post_init__(self):
        if self.params.size != self.architecture.param_count:
            raise DimensionMismatch(
                f"{self.params.size} params != architecture count {self.architecture.param_count}"
            )


@dataclass(frozen=True)
class ModelUpdate:
    """One client's parameter delta for one round."""

    delta: ParameterVector
    client_id: int
    round: int


def init_model(arch: ModelArchitecture, seed: int) -> GlobalModel:
    """He-style normal init for weights, zero biases, float32."""
    rng = np.random.default_rng(seed)
    chunks = []
    for d_in, d_out in arch.layer_dims:
        w = rng.standard_normal((d_in, d_out)) * np.sqrt(2.0 / d_in)
        chunks.append(w.reshape(-1))
        chunks.append(np.zeros(d_out))
    flat = np.concatenate(chunks).astype(np.float32)
    return GlobalModel(params=ParameterVector(flat, (flat.size,)), architecture=arch, round=0)


def zero_model(arch: ModelArchitecture) -> GlobalModel:
    flat = np.zeros(arch.param_count, dtype=np.float32)
    return GlobalModel(params=ParameterVector(flat, (flat.size,)), architecture=arch, round=0)


def _unpack(arch: ModelArchitecture, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    off = 0
    for d_in, d_out in arch.layer_dims:
        w = flat[off : off + d_in * d_out].reshape(d_in, d_out)
        off += d_in * d_out
        b = flat[off : off + d_out]
        off += d_out
        layers.append((w, b))
    return layers


def forward_logits(arch: ModelArchitecture, flat: np.ndarray, x: np.ndarray) -> np.ndarray:
    layers = _unpack(arch, flat)
    h = x
    for w, b in layers[:-1]:
        h = np.maximum(h @ w + b, 0)
    w, b = layers[-1]
    return h @ w + b


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_value(arch: ModelArchitecture, flat: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    logp = _log_softmax(forward_logits(arch, flat, x))
    return float(-logp[np.arange(y.shape[0]), y].mean())


def loss_and_grad(
    arch: ModelArchitecture, flat: np.ndarray, x: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its analytic gradient, flattened in the same
    layout as the parameters. Computation stays in the input dtype."""
    layers = _unpack(arch, flat)
    n = x.shape[0]

    activations = [x]
    h = x
    for w, b in layers[:-1]:
        h = np.maximum(h @ w + b, 0)
        activations.append(h)
    w_out, b_out = layers[-1]
    logits = h @ w_out + b_out

    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(n), y].mean())

    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1
    dlogits /= n

    grads: list[np.ndarray] = []
    delta = dlogits
    for i in reversed(range(len(layers))):
        w, _ = layers[i]
        a_prev = activations[i]
        grads.append(np.sum(delta, axis=0))  # bias
        grads.append((a_prev.T @ delta).reshape(-1))  # weights
        if i > 0:
            delta = (delta @ w.T) * (activations[i] > 0)
    grads.reverse()
    return loss, np.concatenate(grads)


def forward_loss(model: GlobalModel, data: ClientDataset) -> float:
    """Mean cross-entropy of softmax outputs over the whole dataset."""
    _check_dims(model, data)
    return loss_value(model.architecture, model.params.values, data.features, data.labels)


def _check_dims(model: GlobalModel, data: ClientDataset) -> None:
    arch = model.architecture
    if data.num_features != arch.input_dim:
        raise DimensionMismatch(
            f"dataset has {data.num_features} features, model expects {arch.input_dim}"
        )
    if int(data.labels.max()) >= arch.num_classes:
        raise DimensionMismatch(
            f"label {int(data.labels.max())} outside {arch.num_classes} classes"
        )


# --- training ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    num_clients: int = 10
    num_rounds: int = 10
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 1e-2
    optimizer: str = "sgd"  # "sgd" | "adamw"
    adamw_beta1: float = 0.9
    adamw_beta2: float = 0.999
    adamw_eps: float = 1e-8
    adamw_weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1 or self.num_rounds < 1:
            raise ValueError("num_clients and num_rounds must be >= 1")
        if self.batch_size < 1 or self.local_epochs < 1:
            raise ValueError("batch_size and local_epochs must be >= 1")
        # zero is allowed so "no movement" runs stay expressible
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class _AdamWState:
    def __init__(self, size: int, cfg: TrainConfig):
        self.m = np.zeros(size, dtype=np.float32)
        self.v = np.zeros(size, dtype=np.float32)
        self.t = 0
        self.cfg = cfg

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        cfg = self.cfg
        self.t += 1
        self.m = cfg.adamw_beta1 * self.m + (1.0 - cfg.adamw_beta1) * grad
        self.v = cfg.adamw_beta2 * self.v + (1.0 - cfg.adamw_beta2) * grad * grad
        m_hat = self.m / (1.0 - cfg.adamw_beta1**self.t)
        v_hat = self.v / (1.0 - cfg.adamw_beta2**self.t)
        theta -= cfg.learning_rate * (
            m_hat / (np.sqrt(v_hat) + cfg.adamw_eps) + cfg.adamw_weight_decay * theta
        )


def local_train(
    global_model: GlobalModel,
    data: ClientDataset,
    cfg: TrainConfig,
    client_rng_seed: int,
    client_id: int = 0,
) -> ModelUpdate:
    """Run `local_epochs` of seeded mini-batch optimization from the global
    parameters and return the parameter delta. The input model is not
    mutated; identical seeds give bit-identical deltas.

    Optimizer state (AdamW moments) starts fresh each call, i.e. per round.
    """
    _check_dims(global_model, data)
    start = global_model.params.values
    theta = start.copy()
    rng = np.random.default_rng(client_rng_seed)
    arch = global_model.architecture
    adamw = _AdamWState(theta.size, cfg) if cfg.optimizer == "adamw" else None

    for _ in range(cfg.local_epochs):
        perm = rng.permutation(data.num_samples)
        for lo in range(0, data.num_samples, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            _, grad = loss_and_grad(arch, theta, data.features[idx], data.labels[idx])
            if adamw is not None:
                adamw.step(theta, grad)
            else:
                theta -= cfg.learning_rate * grad

    if not np.isfinite(theta).all():
        raise NonFiniteGradient(f"client {client_id} diverged (non-finite parameters)")
    delta = theta - start
    return ModelUpdate(
        delta=ParameterVector(delta, (delta.size,)),
        client_id=client_id,
        round=global_model.round,
    )


def aggregate(global_model: GlobalModel, updates: list[ModelUpdate]) -> GlobalModel:
    """New global parameters = old + elementwise mean of the deltas.

    Deltas are accumulated sequentially in ascending client-id order
    (float32), making the result independent of input listing order and
    reproducible bit-for-bit.
    """
    if not updates:
        raise EmptyVerifiedSet("no verified updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    ids = [u.client_id for u in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate client ids in update set: {ids}")
    expect_shape = global_model.params.shape
    acc = np.zeros(global_model.params.size, dtype=np.float32)
    for u in ordered:
        if u.round != global_model.round:
            raise RoundMismatch(
                f"update from client {u.client_id} is for round {u.round}, "
                f"aggregating round {global_model.round}"
            )
        if u.delta.shape != expect_shape:
            raise DimensionMismatch(
                f"update shape {u.delta.shape} != model shape {expect_shape}"
            )
        acc += u.delta.values
    mean = acc / len(ordered)
    new_flat = global_model.params.values + mean
    return replace(
        global_model,
        params=ParameterVector(new_flat, expect_shape),
        round=global_model.round + 1,
    )


@dataclass
class PlainRunResult:
    model: GlobalModel
    losses: list[float] = field(default_factory=list)


def run_plain_fedavg(
    model: GlobalModel,
    participants: list[tuple[int, ClientDataset]],
    cfg: TrainConfig,
    eval_data: ClientDataset | None = None,
) -> PlainRunResult:
    """Federated averaging with no signatures and no transport: the
    reference training path that the signed protocol must match bit-for-bit
    when no attacks occur. `participants` maps client ids to their shards
    so per-(round, client) seeds line up with the protocol's."""
    losses: list[float] = []
    for _ in range(cfg.num_rounds):
        updates = [
            local_train(model, shard, cfg, train_seed(cfg.seed, model.round, cid), cid)
            for cid, shard in participants
        ]
        model = aggregate(model, updates)
        if eval_data is not None:
            losses.append(forward_loss(model, eval_data))
    return PlainRunResult(model=model, losses=losses)
