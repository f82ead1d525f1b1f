"""Synchronous federated training: local updates, delta aggregation, evaluation.

Algorithms
----------
fedavg        balanced-softmax loss, full-model averaging of deltas
fedprox       fedavg plus a proximal pull towards the downloaded model
fednpr        fedavg plus prototype regularisation (NPR)
fedprox_npr   fedprox plus NPR
fednpr_per    NPR; only the extractor is federated, each client keeps its head
local_only    every client trains alone for the same number of epochs

Clients only ever hand the server a ``ModelDelta`` (parameter differences and
a sample count). Features, labels and prototypes stay on the client.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import softmax

from . import nn_core
from .clustering import PrototypeBank, SinkhornConfig, cluster_client, normalize_rows
from .data import ClientDataset, class_counts
from .errors import AggregationError, ConfigError
from .losses import ClassPrior, balanced_softmax_loss, combined_loss, compute_class_prior, npr_loss
from .metrics import EvalRecord, balanced_accuracy, balanced_auc
from .nn_core import AdamState, ModelParams

ALGORITHMS = ("fednpr", "fednpr_per", "fedavg", "fedprox", "fedprox_npr", "local_only")
NPR_ALGORITHMS = {"fednpr", "fednpr_per", "fedprox_npr"}
PROX_ALGORITHMS = {"fedprox", "fedprox_npr"}


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 6
    rounds: int = 40
    sub_clusters: int = 4
    npr_weight: float = 0.1
    sinkhorn: SinkhornConfig = SinkhornConfig()
    base_lr: float = 1e-3
    weight_decay: float = 5e-4
    batch_size: int = 64
    local_epochs: int = 1
    algorithm: str = "fednpr"
    fedprox_mu: float = 0.01
    seed: int = 0
    hidden: tuple[int, ...] = (64, 32)
    feature_dim: int = 16
    global_supervision: bool = True
    prior_smoothing: float = 1.0
    eval_splits: tuple[str, ...] = ("train", "test")

    def validate(self) -> None:
        checks = [
            ("rounds", self.rounds >= 1, "must be >= 1"),
            ("n_clients", self.n_clients >= 1, "must be >= 1"),
            ("npr_weight", self.npr_weight >= 0, "must be >= 0"),
            ("sub_clusters", self.sub_clusters >= 1, "must be >= 1"),
            ("local_epochs", self.local_epochs >= 1, "must be >= 1"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("base_lr", self.base_lr > 0, "must be > 0"),
            ("weight_decay", self.weight_decay >= 0, "must be >= 0"),
            ("fedprox_mu", self.fedprox_mu >= 0, "must be >= 0"),
            ("feature_dim", self.feature_dim >= 1, "must be >= 1"),
            ("algorithm", self.algorithm in ALGORITHMS, f"must be one of {ALGORITHMS}"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{msg} (got {getattr(self, key)!r})", key=key)
        if not self.global_supervision and self.algorithm not in NPR_ALGORITHMS:
            raise ConfigError("training without global supervision needs an NPR algorithm", key="global_supervision")

    @property
    def uses_npr(self) -> bool:
        return self.algorithm in NPR_ALGORITHMS

    @property
    def uses_prox(self) -> bool:
        return self.algorithm in PROX_ALGORITHMS

    @property
    def personalized(self) -> bool:
        return self.algorithm == "fednpr_per"

    @property
    def label(self) -> str:
        return self.algorithm if self.global_supervision else f"{self.algorithm}-nosup"


@dataclass
class ModelDelta:
    tensors: dict[str, np.ndarray]
    sample_count: int


@dataclass
class ClientState:
    dataset: ClientDataset
    model: ModelParams
    adam: AdamState
    prior: ClassPrior
    batch_rng: np.random.Generator
    cluster_rng: np.random.Generator
    personal_head: dict[str, np.ndarray] | None = None
    bank: PrototypeBank | None = None


@dataclass
class ServerState:
    global_model: ModelParams
    round: int = 0
    history: list[EvalRecord] = field(default_factory=list)


def compute_client_weights(sample_counts) -> np.ndarray:
    counts = np.asarray(sample_counts, dtype=float)
    if np.any(counts < 0):
        raise ConfigError("sample counts must be non-negative", key="sample_counts")
    total = math.fsum(counts)
    if total <= 0:
        raise ConfigError("all clients report zero samples", key="sample_counts")
    return counts / total


def make_client_state(dataset: ClientDataset, global_model: ModelParams, config: FederationConfig) -> ClientState:
    i = dataset.client_id
    model = global_model.copy()
    head = {k: model.tensors[k].copy() for k in model.classifier_keys()} if config.personalized else None
    return ClientState(
        dataset=dataset,
        model=model,
        adam=AdamState.zeros_like(model),
        prior=compute_class_prior(class_counts(dataset, "train"), config.prior_smoothing),
        batch_rng=np.random.default_rng([config.seed, 2, i]),
        cluster_rng=np.random.default_rng([config.seed, 3, i]),
        personal_head=head,
    )


def _with_head(model: ModelParams, head: dict[str, np.ndarray] | None) -> ModelParams:
    if head is None:
        return model
    tensors = dict(model.tensors)
    tensors.update(head)
    return ModelParams(tensors)


def refresh_bank(client: ClientState, model: ModelParams, config: FederationConfig) -> PrototypeBank:
    X, y = client.dataset.split("train")
    Z = nn_core.forward_features(model, X)
    return cluster_client(Z, y, client.bank, config.sub_clusters, client.dataset.n_classes,
                          config.sinkhorn, rng=client.cluster_rng)


def local_update(client: ClientState, downloaded: ModelParams | None, lr: float,
                 config: FederationConfig) -> ModelDelta:
    """Download, re-cluster, train ``local_epochs`` epochs, and return the delta.

    ``downloaded`` is ignored for ``local_only``. Under ``fednpr_per`` the
    downloaded classifier is discarded in favour of the client's own head, and
    the returned delta carries extractor tensors only.
    """
    if client.dataset.n_train == 0:
        raise ValueError(f"client {client.dataset.client_id} has no training data")
    if config.algorithm == "local_only" or downloaded is None:
        start = client.model.copy()
    else:
        start = _with_head(downloaded.copy(), client.personal_head)
    anchor = start

    if config.uses_npr:
        client.bank = refresh_bank(client, start, config)

    X, y = client.dataset.split("train")
    n = len(y)
    model, adam = start, client.adam
    for _ in range(config.local_epochs):
        order = client.batch_rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            xb, yb = X[idx], y[idx]
            Z = nn_core.forward_features(model, xb)
            logits = nn_core.forward_logits(model, Z)
            loss = combined_loss(logits, Z, yb, client.prior, client.bank if config.uses_npr else None,
                                 config.npr_weight, supervision=config.global_supervision)
            grads = nn_core.backward(model, xb, loss.logit_grad, loss.feature_grad)
            if config.uses_prox and config.fedprox_mu > 0:
                for k, g in grads.tensors.items():
                    g += config.fedprox_mu * (model.tensors[k] - anchor.tensors[k])
            model, adam = nn_core.adam_step(model, grads, adam, lr, config.weight_decay)

    client.model, client.adam = model, adam
    keys = model.extractor_keys() if config.personalized else list(model.tensors)
    if config.personalized:
        client.personal_head = {k: model.tensors[k].copy() for k in model.classifier_keys()}
    delta = {k: model.tensors[k] - start.tensors[k] for k in keys}
    return ModelDelta(delta, n)


def _check_deltas(global_model: ModelParams, deltas: list[ModelDelta], keys: list[str]) -> None:
    if not deltas:
        raise AggregationError("no client deltas to aggregate")
    for i, d in enumerate(deltas):
        for k in keys:
            if k not in d.tensors:
                raise AggregationError(f"delta {i} is missing tensor {k}")
            if d.tensors[k].shape != global_model.tensors[k].shape:
                raise AggregationError(f"delta {i} tensor {k} has shape {d.tensors[k].shape}, "
                                       f"global has {global_model.tensors[k].shape}")


def _aggregate(server: ServerState, deltas: list[ModelDelta], keys: list[str]) -> ServerState:
    _check_deltas(server.global_model, deltas, keys)
    w = compute_client_weights([d.sample_count for d in deltas])
    new = server.global_model.copy()
    for k in keys:
        acc = np.zeros_like(new.tensors[k])
        for wi, d in zip(w, deltas):  # fixed client order keeps the sum bit-reproducible
            acc += wi * d.tensors[k]
        new.tensors[k] = new.tensors[k] + acc
    return ServerState(new, server.round + 1, server.history)


def aggregate_full(server: ServerState, deltas: list[ModelDelta]) -> ServerState:
    return _aggregate(server, deltas, list(server.global_model.tensors))


def aggregate_extractor_only(server: ServerState, deltas: list[ModelDelta]) -> ServerState:
    """Average extractor deltas only; classifier tensors in the deltas are ignored."""
    return _aggregate(server, deltas, server.global_model.extractor_keys())


def _eval_model(client: ClientState, server: ServerState, config: FederationConfig) -> ModelParams:
    if config.algorithm == "local_only":
        return client.model
    return _with_head(server.global_model, client.personal_head)


def evaluate_client(client: ClientState, model: ModelParams, config: FederationConfig, round_: int,
                    split: str) -> EvalRecord:
    X, y = client.dataset.split(split)
    C = client.dataset.n_classes
    Z = nn_core.forward_features(model, X)
    logits = nn_core.forward_logits(model, Z)

    probs = softmax(logits, axis=1)
    loss_sup, _ = balanced_softmax_loss(logits, y, client.prior)

    bank = client.bank if config.uses_npr else None
    loss_npr = 0.0
    if bank is not None:
        have = np.isin(y, bank.present_classes())
        if have.any():
            loss_npr = config.npr_weight * npr_loss(normalize_rows(Z[have]), y[have], bank)[0]

    preds = np.argmax(probs, axis=1)
    bacc, per_acc = balanced_accuracy(preds, y, C)
    bauc, per_auc, excluded = balanced_auc(probs, y, C)
    return EvalRecord(client.dataset.client_id, round_, split, bacc, bauc, per_acc, per_auc,
                      float(loss_sup), float(loss_npr), excluded)


def run_federation(config: FederationConfig, clients: list[ClientDataset],
                   initial_model: ModelParams | None = None) -> ServerState:
    """Run ``config.rounds`` synchronous rounds over all clients."""
    config.validate()
    if len(clients) != config.n_clients:
        raise ConfigError(f"{len(clients)} client datasets for n_clients={config.n_clients}", key="n_clients")
    if initial_model is None:
        initial_model = nn_core.init_params(clients[0].X.shape[1], config.hidden, config.feature_dim,
                                            clients[0].n_classes, np.random.default_rng([config.seed, 1]))
    server = ServerState(initial_model.copy())
    states = [make_client_state(c, server.global_model, config) for c in clients]

    for t in range(1, config.rounds + 1):
        lr = nn_core.lr_at_round(config.base_lr, t, config.rounds)
        deltas = [local_update(s, server.global_model, lr, config) for s in states]
        if config.algorithm == "local_only":
            server = ServerState(server.global_model, server.round + 1, server.history)
        elif config.personalized:
            server = aggregate_extractor_only(server, deltas)
        else:
            server = aggregate_full(server, deltas)
        for s in states:
            model = _eval_model(s, server, config)
            for split in config.eval_splits:
                if len(s.dataset.split(split)[1]):
                    server.history.append(evaluate_client(s, model, config, t, split))
    return server


DELTA_HEADER = "FEDNPR-DELTA-v1"


def dump_delta(delta: ModelDelta) -> str:
    """Text form of a round payload.

    Line 1: ``FEDNPR-DELTA-v1``; line 2: ``sample_count <n>``; then one line per
    tensor: ``<path>\\t<comma-separated shape>\\t<space-separated values>``.
    Values use shortest round-trip repr, so ``load_delta`` is exact.
    """
    lines = [DELTA_HEADER, f"sample_count {delta.sample_count}"]
    for k, t in delta.tensors.items():
        shape = ",".join(str(s) for s in t.shape)
        lines.append(f"{k}\t{shape}\t" + " ".join(repr(float(v)) for v in t.ravel()))
    return "\n".join(lines) + "\n"


def load_delta(text: str) -> ModelDelta:
    lines = text.splitlines()
    if not lines or lines[0] != DELTA_HEADER:
        raise ValueError(f"not a {DELTA_HEADER} payload")
    tag, count = lines[1].split()
    if tag != "sample_count":
        raise ValueError("second line must be 'sample_count <n>'")
    tensors = {}
    for line in lines[2:]:
        key, shape, values = line.split("\t")
        dims = tuple(int(s) for s in shape.split(",")) if shape else ()
        tensors[key] = np.array([float(v) for v in values.split()], dtype=float).reshape(dims)
    return ModelDelta(tensors, int(count))


def write_delta(delta: ModelDelta, path) -> None:
    Path(path).write_text(dump_delta(delta))


def read_delta(path) -> ModelDelta:
    return load_delta(Path(path).read_text())
