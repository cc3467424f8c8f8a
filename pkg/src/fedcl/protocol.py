"""Round-by-round federated split training with contrastive centroid regularisation.

Each round every client encodes a minibatch, the features cross the uplink,
the server decodes them with a per-client copy of the global decoder, the
regularised loss is backpropagated to the split point and the boundary
gradient crosses the downlink back to the client encoder. After the client
phase the server trains the centroid generator on the clients' local
centroids and averages the decoder copies.

Schemes:

``fedcl``     centroids come from the trainable generator (SCG).
``vanilla``   ``fedcl`` with the regulariser weight forced to 0.
``fedproto``  centroids are the plain mean of the clients' local centroids.
``fedavg``    whole encoder+decoder models trained locally and weight-averaged.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .channel import ChannelConfig, transmit_rows
from .data import ConfigError, Dataset, PartitionSpec, gen_blobs, load_csv, partition_mwayqshot
from .metrics import RoundMetrics, accuracy, separability
from .models import ScgState, decoder_forward, encoder_forward, scg_forward, split_backward
from .numerics import MLP, Params, grad_norm, softmax_cross_entropy, sgd_step

logger = logging.getLogger(__name__)

SCHEMES = ("fedcl", "vanilla", "fedproto", "fedavg")

# purpose tags for the per-(client, round, direction) random streams
DATA, INIT, BATCH, UPLINK, DOWNLINK, EVAL = range(6)
DECODER_SLOT, SCG_SLOT = -1, -2

CentroidSet = Dict[int, np.ndarray]


def stream(seed: int, purpose: int, a: int = 0, b: int = 0, c: int = 0) -> np.random.Generator:
    """Independent generator keyed by ``(seed, purpose, a, b, c)``.

    Keys always have the same length; negative slots are shifted into the
    non-negative range SeedSequence requires.
    """
    key = [int(seed), purpose] + [v if v >= 0 else 2**31 - v for v in (a, b, c)]
    return np.random.default_rng(key)


@dataclass
class ClientState:
    id: int
    X: np.ndarray
    y: np.ndarray
    encoder: MLP
    lr: float = 1e-3

    def __post_init__(self):
        if len(self.y) == 0:
            raise ConfigError(f"client {self.id} has no data")
        if not self.lr > 0:
            raise ConfigError(f"client {self.id}: learning rate must be positive")

    @property
    def size(self) -> int:
        return len(self.y)

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.y)


@dataclass
class ServerState:
    decoder: MLP
    scg: ScgState
    centroids: np.ndarray
    lr: float = 1e-3
    lam: float = 1.0
    local_iters: int = 1
    scg_iters: int = 1
    scheme: str = "fedcl"
    centroid_radius: Optional[float] = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.centroids.shape[0] != self.scg.num_classes:
            raise ConfigError("need exactly one global centroid per class")

    @property
    def effective_lam(self) -> float:
        return 0.0 if self.scheme == "vanilla" else self.lam


def local_centroid_aggregate(features, labels) -> CentroidSet:
    """Per-class mean of one client's received features; absent classes are omitted."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    if labels.size == 0:
        raise ValueError("cannot aggregate centroids of an empty batch")
    return {int(c): features[labels == c].mean(axis=0) for c in np.unique(labels)}


def _logsumexp(v: np.ndarray) -> float:
    top = v.max()
    return float(top + np.log(np.exp(v - top).sum()))


def contrastive_loss(local_sets: Sequence[Mapping[int, np.ndarray]], centroids,
                     return_grad: bool = False):
    """Centroid contrastive objective summed over classes and clients.

    For each client ``k`` holding a local centroid ``f`` of class ``c``:
    ``log sum_{n != c} exp(f . F_n) - f . F_c``. Local centroids are constants;
    with ``return_grad`` the gradient with respect to the global centroids
    ``F`` is returned as well.
    """
    F = np.asarray(centroids, dtype=np.float64)
    C = F.shape[0]
    if C < 2:
        raise ValueError("the contrastive loss needs at least two classes")
    total = 0.0
    grad = np.zeros_like(F)
    for local in local_sets:
        for c in sorted(local):
            f = np.asarray(local[c], dtype=np.float64)
            scores = F @ f
            neg = np.delete(np.arange(C), c)
            lse = _logsumexp(scores[neg])
            total += lse - scores[c]
            if return_grad:
                w = np.exp(scores[neg] - lse)
                grad[neg] += w[:, None] * f
                grad[c] -= f
    if return_grad:
        return float(total), grad
    return float(total)


def project_centroids(raw: np.ndarray, radius: Optional[float]) -> np.ndarray:
    """Rescale every centroid to length ``radius``; ``None`` leaves them untouched.

    The contrastive objective is unbounded below in the centroid scale, and
    with features pulled toward the centroids the scale grows geometrically.
    Pinning the length keeps the dot-product scores while bounding the loss.
    """
    if radius is None:
        return raw
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise FloatingPointError("generator produced a zero centroid")
    return radius * raw / norms


def _project_backward(raw: np.ndarray, radius: Optional[float], grad: np.ndarray) -> np.ndarray:
    if radius is None:
        return grad
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    unit = raw / norms
    radial = np.sum(grad * unit, axis=1, keepdims=True)
    return radius * (grad - radial * unit) / norms


def global_centroids(server: "ServerState") -> np.ndarray:
    return project_centroids(scg_forward(server.scg), server.centroid_radius)


def scg_update(server: ServerState, local_sets: Sequence[CentroidSet]) -> float:
    """Run ``scg_iters`` SGD steps of the generator on the contrastive objective.

    Refreshes ``server.centroids`` and returns the objective value measured
    before the first step.
    """
    if not any(local_sets):
        raise ValueError("no local centroids to train the generator on")
    first = math.nan
    for step in range(server.scg_iters):
        raw = scg_forward(server.scg)
        F = project_centroids(raw, server.centroid_radius)
        loss, dF = contrastive_loss(local_sets, F, return_grad=True)
        if step == 0:
            first = loss
        grads, _ = server.scg.net.backward(_project_backward(raw, server.centroid_radius, dF))
        sgd_step(server.scg.parameters(), grads, server.lr)
    server.centroids = global_centroids(server)
    if server.scg_iters == 0:
        first = contrastive_loss(local_sets, server.centroids)
    return first


def regularized_loss(logits, labels, features, centroids, lam: float):
    """Mean task loss plus ``lam * ||f_i - F_{y_i}||^2`` averaged over the batch.

    Returns ``(loss, grad_logits, grad_features)``.
    """
    if lam < 0:
        raise ConfigError(f"lambda must be non-negative, got {lam}")
    logits = np.atleast_2d(logits)
    features = np.atleast_2d(features)
    labels = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    n = labels.size
    if not (logits.shape[0] == n == features.shape[0]):
        raise ValueError(f"batch sizes differ: logits {logits.shape[0]}, labels {n}, features {features.shape[0]}")
    task, g_logits = softmax_cross_entropy(logits, labels)
    diff = features - np.asarray(centroids)[labels]
    reg = lam * float(np.sum(diff * diff)) / n
    return task + reg, g_logits, (2.0 * lam / n) * diff


def decoder_aggregate(decoders: Sequence[Params], sizes: Sequence[int]) -> Params:
    """Dataset-size weighted average of decoder parameters.

    Written as ``p_1 + sum_k w_k (p_k - p_1)`` so that averaging identical
    decoders reproduces them bit for bit.
    """
    if len(decoders) != len(sizes) or not decoders:
        raise ValueError("need one size per decoder")
    total = float(sum(sizes))
    if not total > 0:
        raise ValueError("total dataset size must be positive")
    ref = decoders[0]
    for d in decoders[1:]:
        if set(d) != set(ref) or any(d[k].shape != ref[k].shape for k in ref):
            raise ValueError("decoders do not share one architecture")
    out = {}
    for name, p in ref.items():
        acc = np.zeros_like(p)
        for d, s in zip(decoders, sizes):
            acc += (s / total) * (d[name] - p)
        out[name] = p + acc
    return out


def baseline_fedproto_centroids(local_sets: Sequence[CentroidSet], num_classes: int,
                                fallback: Optional[np.ndarray] = None) -> np.ndarray:
    """Plain mean of local centroids per class, over the clients that hold it.

    Classes nobody reported are an error unless ``fallback`` supplies them.
    """
    rows = []
    for c in range(num_classes):
        held = [s[c] for s in local_sets if c in s]
        if held:
            rows.append(np.mean(held, axis=0))
        elif fallback is not None:
            rows.append(np.asarray(fallback[c], dtype=np.float64).copy())
        else:
            raise ValueError(f"class {c} is held by no client")
    return np.stack(rows)


def _sample_batch(client: ClientState, batch_size: int, rng: np.random.Generator):
    n = min(batch_size, client.size)
    idx = rng.choice(client.size, size=n, replace=False)
    return client.X[idx], client.y[idx]


@dataclass
class _ClientOutcome:
    decoder: Params
    local: CentroidSet
    loss: float
    acc: float
    grad_norm: float
    features: np.ndarray
    labels: np.ndarray


def _split_client_update(client: ClientState, server: ServerState, t: int, seed: int,
                         batch_size: int, uplink: ChannelConfig,
                         downlink: ChannelConfig) -> _ClientOutcome:
    decoder = server.decoder.copy()
    encoder = client.encoder
    lam = server.effective_lam
    for it in range(server.local_iters):
        x, y = _sample_batch(client, batch_size, stream(seed, BATCH, t, client.id, it))
        f = encoder_forward(x, encoder)
        if not np.all(np.isfinite(f)):
            raise FloatingPointError(f"round {t}: client {client.id} produced non-finite features")
        f_hat = transmit_rows(f, uplink, stream(seed, UPLINK, t, client.id, it))
        logits = decoder_forward(f_hat, decoder)
        local = local_centroid_aggregate(f_hat, y)
        loss, g_logits, g_feat = regularized_loss(logits, y, f_hat, server.centroids, lam)
        if not math.isfinite(loss):
            raise FloatingPointError(f"round {t}: client {client.id} loss is {loss}")
        dec_grads, _, _, enc_grads = split_backward(
            g_logits, decoder, encoder, downlink, stream(seed, DOWNLINK, t, client.id, it), g_feat)
        sgd_step(decoder.parameters(), dec_grads, server.lr)
        sgd_step(encoder.parameters(), enc_grads, client.lr)
    norm = math.hypot(grad_norm(dec_grads), grad_norm(enc_grads))
    return _ClientOutcome(decoder.parameters(), local, loss, accuracy(logits, y), norm, f_hat, y)


def _map_clients(fn, clients: Sequence[ClientState], schedule, threads: int):
    order = list(schedule) if schedule is not None else list(range(len(clients)))
    if sorted(order) != list(range(len(clients))):
        raise ValueError("schedule must be a permutation of client positions")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = dict(zip(order, pool.map(lambda i: fn(clients[i]), order)))
    else:
        results = {i: fn(clients[i]) for i in order}
    return [results[i] for i in range(len(clients))]


def _round_separability(outcomes) -> float:
    feats = np.concatenate([o.features for o in outcomes])
    labels = np.concatenate([o.labels for o in outcomes])
    if np.unique(labels).size < 2:
        return math.nan
    return separability(feats, labels)


def run_round(clients: Sequence[ClientState], server: ServerState, uplink: ChannelConfig,
              t: int, seed: int = 0, batch_size: int = 32,
              downlink: Optional[ChannelConfig] = None, threads: int = 1,
              schedule: Optional[Sequence[int]] = None) -> RoundMetrics:
    """One communication round of the split schemes (fedcl, vanilla, fedproto).

    ``schedule`` reorders client execution; results never depend on it since
    every client draws from its own random streams and reductions run in
    client order.
    """
    if server.scheme == "fedavg":
        return baseline_fedavg_round(clients, server, uplink, t, seed, batch_size, threads, schedule)
    downlink = uplink if downlink is None else downlink
    outcomes = _map_clients(
        lambda c: _split_client_update(c, server, t, seed, batch_size, uplink, downlink),
        clients, schedule, threads)
    local_sets = [o.local for o in outcomes]

    if server.scheme == "fedproto":
        server.centroids = baseline_fedproto_centroids(local_sets, server.scg.num_classes,
                                                       fallback=server.centroids)
        lf = math.nan
    else:
        lf = scg_update(server, local_sets)
    server.decoder.load(decoder_aggregate([o.decoder for o in outcomes], [c.size for c in clients]))

    ids = [c.id for c in clients]
    return RoundMetrics(
        round=t,
        loss={k: o.loss for k, o in zip(ids, outcomes)},
        acc={k: o.acc for k, o in zip(ids, outcomes)},
        grad_norm={k: o.grad_norm for k, o in zip(ids, outcomes)},
        contrastive_loss=lf,
        separability=_round_separability(outcomes),
    )


def _fedavg_client_update(client: ClientState, server: ServerState, t: int, seed: int,
                          batch_size: int, uplink: ChannelConfig):
    encoder, decoder = client.encoder, server.decoder.copy()
    rng = stream(seed, BATCH, t, client.id, 0)
    step = 0
    for _ in range(server.local_iters):
        order = rng.permutation(client.size)
        for start in range(0, client.size, batch_size):
            idx = order[start:start + batch_size]
            x, y = client.X[idx], client.y[idx]
            f_hat = transmit_rows(encoder_forward(x, encoder), uplink,
                                  stream(seed, UPLINK, t, client.id, step))
            logits = decoder_forward(f_hat, decoder)
            loss, g = softmax_cross_entropy(logits, y)
            if not math.isfinite(loss):
                raise FloatingPointError(f"round {t}: client {client.id} loss is {loss}")
            dec_grads, boundary = decoder.backward(g)
            enc_grads, _ = encoder.backward(boundary)
            sgd_step(decoder.parameters(), dec_grads, server.lr)
            sgd_step(encoder.parameters(), enc_grads, client.lr)
            step += 1
    norm = math.hypot(grad_norm(dec_grads), grad_norm(enc_grads))
    return _ClientOutcome(decoder.parameters(), {}, loss, accuracy(logits, y), norm, f_hat, y)


def baseline_fedavg_round(clients: Sequence[ClientState], server: ServerState,
                          uplink: ChannelConfig, t: int, seed: int = 0, batch_size: int = 32,
                          threads: int = 1, schedule=None) -> RoundMetrics:
    """Classic FedAvg: ``local_iters`` local epochs, then average every parameter by shard size."""
    sizes = [c.encoder.sizes for c in clients]
    if any(s != sizes[0] for s in sizes):
        raise ConfigError("fedavg needs every client to use the same encoder architecture")
    outcomes = _map_clients(
        lambda c: _fedavg_client_update(c, server, t, seed, batch_size, uplink),
        clients, schedule, threads)
    weights = [c.size for c in clients]
    server.decoder.load(decoder_aggregate([o.decoder for o in outcomes], weights))
    enc = decoder_aggregate([c.encoder.parameters() for c in clients], weights)
    for c in clients:
        c.encoder.load(enc)
    ids = [c.id for c in clients]
    return RoundMetrics(
        round=t,
        loss={k: o.loss for k, o in zip(ids, outcomes)},
        acc={k: o.acc for k, o in zip(ids, outcomes)},
        grad_norm={k: o.grad_norm for k, o in zip(ids, outcomes)},
        separability=_round_separability(outcomes),
    )


def evaluate(clients: Sequence[ClientState], server: ServerState, test: Dataset,
             uplink: ChannelConfig, seed: int = 0):
    """Personalised test accuracy of each client on the test samples of its own classes.

    Features travel over the uplink exactly as in training. Returns
    ``(accuracy_by_client, dumps)`` where ``dumps`` holds
    ``(client, received_features, labels)`` triples.
    """
    accs, dumps = {}, []
    for client in clients:
        mask = np.isin(test.y, client.classes)
        if not mask.any():
            continue
        x, y = test.X[mask], test.y[mask]
        f_hat = transmit_rows(encoder_forward(x, client.encoder), uplink,
                              stream(seed, EVAL, client.id))
        accs[client.id] = accuracy(decoder_forward(f_hat, server.decoder), y)
        dumps.append((client.id, f_hat, y))
    return accs, dumps


@dataclass
class TrainingResult:
    metrics: List[RoundMetrics]
    clients: List[ClientState]
    server: ServerState
    test_accuracy: Dict[int, float] = field(default_factory=dict)
    feature_dumps: list = field(default_factory=list, repr=False)

    @property
    def mean_test_accuracy(self) -> float:
        return float(np.mean([self.test_accuracy[k] for k in sorted(self.test_accuracy)]))

    @property
    def final_separability(self) -> float:
        feats = np.concatenate([d[1] for d in self.feature_dumps])
        labels = np.concatenate([d[2] for d in self.feature_dumps])
        return separability(feats, labels)

    def loss_curve(self) -> np.ndarray:
        return np.array([m.mean_loss for m in self.metrics])


def build_datasets(config):
    """Train/test split described by ``config`` (synthetic blobs or a CSV file)."""
    if config.dataset == "blobs":
        full = gen_blobs(config.num_classes, config.input_dim,
                         config.n_per_class + config.n_test_per_class,
                         config.spread, seed=config.seed, radius=config.radius)
    else:
        full = load_csv(config.dataset)
        if full.num_classes != config.num_classes or full.dim != config.input_dim:
            raise ConfigError(
                f"{config.dataset} has C={full.num_classes}, dim={full.dim}; config says "
                f"C={config.num_classes}, input_dim={config.input_dim}")
    rng = stream(config.seed, DATA, 1)
    train_idx, test_idx = [], []
    for c in range(full.num_classes):
        idx = rng.permutation(np.flatnonzero(full.y == c))
        if config.dataset == "blobs":
            n_test = config.n_test_per_class
        else:
            n_test = int(round(config.test_fraction * idx.size))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    return full.subset(np.concatenate(train_idx)), full.subset(np.concatenate(test_idx))


def build_states(config, train: Dataset):
    """Partition ``train`` and initialise every client and the server."""
    shards = partition_mwayqshot(train, PartitionSpec(config.clients, config.m, config.q,
                                                      seed=config.seed))
    clients = []
    for k, shard in enumerate(shards):
        spec = config.encoder_spec(k)
        if config.scheme == "fedavg":
            # FedAvg starts every client from one shared model
            encoder = spec.build(stream(config.seed, INIT, 0))
        else:
            encoder = spec.build(stream(config.seed, INIT, k))
        clients.append(ClientState(k, train.X[shard], train.y[shard], encoder, config.client_lr(k)))
    scg = ScgState.init(config.num_classes, config.feature_dim,
                        stream(config.seed, INIT, SCG_SLOT), hidden_dim=config.scg_hidden)
    server = ServerState(
        decoder=config.decoder_spec().build(stream(config.seed, INIT, DECODER_SLOT)),
        scg=scg,
        centroids=project_centroids(scg_forward(scg), config.centroid_radius),
        lr=config.lr,
        lam=config.lam,
        local_iters=config.local_iters,
        scg_iters=config.scg_iters,
        scheme=config.scheme,
        centroid_radius=config.centroid_radius,
    )
    return clients, server


def run_training(config, train: Optional[Dataset] = None, test: Optional[Dataset] = None,
                 threads: int = 1) -> TrainingResult:
    """Build clients and server from ``config`` and run ``config.rounds`` rounds."""
    if train is None:
        train, test = build_datasets(config)
    clients, server = build_states(config, train)
    uplink, downlink = config.channels()
    metrics = []
    for t in range(config.rounds):
        rm = run_round(clients, server, uplink, t, config.seed, config.batch_size,
                       downlink, threads=threads)
        logger.debug("round %d loss %.4f acc %.3f", t, rm.mean_loss, rm.mean_acc)
        metrics.append(rm)
    result = TrainingResult(metrics, clients, server)
    if test is not None and len(test):
        result.test_accuracy, result.feature_dumps = evaluate(clients, server, test, uplink, config.seed)
    return result
