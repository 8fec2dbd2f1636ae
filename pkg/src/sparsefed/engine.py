"""Federated round loop: client sampling, masked local SGD, mask search,
sparse-update aggregation, and the dense/local/subsampling baselines.

The global model stays dense on the server; only the views distributed to
clients (and their uploaded deltas) are sparse. All randomness is derived
from (seed, stream-tag, round, client) tuples so runs are exactly
reproducible and clients are order-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .config import DatasetConfig, ExperimentConfig
from .data import (Dataset, dirichlet_partition, iid_partition, label_histogram,
                   load_idx, personalized_test_split, synth_dataset)
from .errors import ConfigurationError
from .masks import (LayerLayout, Mask, PruneSchedule, cosine_alpha, erk_densities,
                    gradient_regrow, init_mask, magnitude_prune, mlp_layout,
                    random_regrow)
from .metrics import (RoundLedger, comm_bytes, evaluate_global,
                      evaluate_personalized, mask_churn, mask_overhead_bytes,
                      p_proxy)
from .model import (Batch, GradResult, ModelParams, backward, flops_train_step,
                    forward, sgd_step)

# rng stream tags
_T_MODEL, _T_MASK, _T_SELECT, _T_BATCH, _T_REGROW, _T_UPLOAD = 0, 1, 2, 3, 4, 5
_T_PARTITION, _T_TESTSPLIT = 10, 11


def stream(seed: int, *key) -> np.random.Generator:
    return np.random.default_rng((int(seed),) + tuple(int(k) for k in key))


@dataclass(frozen=True)
class FedData:
    train: Dataset
    test: Dataset
    client_train: tuple[np.ndarray, ...]
    client_test: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class ServerState:
    params: ModelParams            # dense global model
    client_masks: tuple[Mask, ...]
    round: int
    schedule: PruneSchedule | None


@dataclass(frozen=True)
class LocalState:
    """Per-client dense models for the no-communication baseline."""
    client_params: tuple[ModelParams, ...]
    round: int


@dataclass(frozen=True)
class ClientUpdate:
    delta: np.ndarray              # support contained in the round mask
    bias_deltas: tuple[np.ndarray, ...]
    next_mask: Mask
    loss: float
    accuracy: float


def local_step_count(shard_size: int, cfg: ExperimentConfig) -> int:
    """Map 'local epochs' to an explicit SGD step count."""
    return max(1, math.ceil(cfg.local_epochs * shard_size / cfg.batch_size))


def client_local_train(start: ModelParams, mask: Mask, features, labels,
                       shard: np.ndarray, n_steps: int, batch_size: int,
                       lr: float, weight_decay: float,
                       rng: np.random.Generator) -> tuple[ModelParams, float, float]:
    """N masked SGD steps on batches sampled from the client's shard."""
    if len(shard) == 0:
        raise ConfigurationError("client has an empty shard")
    params = start
    losses, correct, seen = [], 0, 0
    for _ in range(n_steps):
        idx = rng.choice(shard, size=batch_size, replace=len(shard) < batch_size)
        batch = Batch(features[idx], labels[idx])
        grad = backward(params, mask, batch)
        params = sgd_step(params, mask, grad, lr, weight_decay)
        losses.append(grad.loss)
        correct += grad.correct
        seen += len(idx)
    return params, float(np.mean(losses)), correct / seen


def _dense_shard_grad(params: ModelParams, features, labels, shard) -> np.ndarray:
    ones = Mask.all_ones(params.layout)
    return backward(params, ones, Batch(features[shard], labels[shard])).grad


def next_mask_dst(w_end: ModelParams, mask: Mask, alpha_t: float,
                  features, labels, shard, batch_size: int,
                  regrow: str, rng: np.random.Generator) -> Mask:
    """Magnitude-prune the trained local weights, regrow by dense-gradient
    magnitude (or uniformly) on one fresh local batch."""
    pruned_mask, counts = magnitude_prune(w_end.values, mask, alpha_t)
    if counts.sum() == 0:
        return mask
    if regrow == "gradient":
        idx = rng.choice(shard, size=batch_size, replace=len(shard) < batch_size)
        dense = backward(w_end, Mask.all_ones(w_end.layout), Batch(features[idx], labels[idx]))
        return gradient_regrow(pruned_mask, dense.grad, counts)
    return random_regrow(pruned_mask, counts, rng)


def next_mask_rsm(mask: Mask) -> Mask:
    return mask


def _upload_subset_mask(d: int, upload_density: float, rng: np.random.Generator) -> np.ndarray:
    k = int(round(upload_density * d))
    bits = np.zeros(d, dtype=bool)
    bits[rng.choice(d, size=k, replace=False)] = True
    return bits


def run_round(state: ServerState, fed: FedData, cfg: ExperimentConfig,
              seed: int) -> tuple[ServerState, RoundLedger]:
    """One communication round of the server loop (any non-local strategy)."""
    if cfg.strategy == "local":
        raise ValueError("use run_local_round for the no-communication baseline")
    t = state.round
    num_clients = cfg.clients
    if cfg.participants > num_clients:
        raise ConfigurationError("participants exceed client count")
    lr_t = cfg.lr * cfg.lr_decay ** t
    dense_training = cfg.strategy in ("fedavg", "subsampling")

    selected = np.sort(stream(seed, _T_SELECT, t).choice(
        num_clients, size=cfg.participants, replace=False))

    ledger = RoundLedger(round=t)
    d = state.params.layout.total_count
    bias_count = sum(len(b) for b in state.params.biases)
    ones = Mask.all_ones(state.params.layout)

    updates: dict[int, ClientUpdate] = {}
    losses = []
    for k in selected.tolist():
        mask = ones if dense_training else state.client_masks[k]
        shard = fed.client_train[k]
        w0 = state.params.masked(mask) if not dense_training else state.params.copy()
        n_steps = local_step_count(len(shard), cfg)
        rng_batch = stream(seed, _T_BATCH, t, k)
        w_end, loss, acc = client_local_train(
            w0, mask, fed.train.features, fed.train.labels, shard,
            n_steps, cfg.batch_size, lr_t, cfg.weight_decay, rng_batch)
        delta = w0.values - w_end.values
        bias_deltas = tuple(b0 - b1 for b0, b1 in zip(w0.biases, w_end.biases))

        up_active = mask.active_count
        if cfg.strategy == "subsampling":
            up_bits = _upload_subset_mask(d, cfg.upload_density, stream(seed, _T_UPLOAD, t, k))
            delta = np.where(up_bits, delta, 0.0)
            up_active = int(up_bits.sum())

        # mask search for the next round
        if cfg.strategy in ("dst_gradient", "dst_random"):
            alpha_t = cosine_alpha(state.schedule, t)
            next_mask = next_mask_dst(
                w_end, mask, alpha_t, fed.train.features, fed.train.labels, shard,
                cfg.batch_size, "gradient" if cfg.strategy == "dst_gradient" else "random",
                stream(seed, _T_REGROW, t, k))
        else:
            next_mask = next_mask_rsm(mask)

        updates[k] = ClientUpdate(delta, bias_deltas, next_mask, loss, acc)
        losses.append(loss)

        ledger.bytes_down += comm_bytes(mask.active_count)
        ledger.bytes_up += comm_bytes(up_active)
        ledger.bias_bytes += 2 * comm_bytes(bias_count)
        ledger.flops_train += flops_train_step(mask, cfg.batch_size) * n_steps
        if cfg.strategy in ("dst_gradient", "dst_random"):
            ledger.flops_masksearch += flops_train_step(ones, cfg.batch_size)
            ledger.mask_overhead_bytes += mask_overhead_bytes(d)
        if not dense_training:
            ledger.mask_churn[k] = mask_churn(mask, next_mask)
            ga = _dense_shard_grad(w_end, fed.train.features, fed.train.labels, shard)
            gb = _dense_shard_grad(w0, fed.train.features, fed.train.labels, shard)
            p = p_proxy(mask, ga, gb)
            if p is not None:
                ledger.p_proxy[k] = p

    # deterministic aggregation in ascending client-id order
    values = state.params.values.copy()
    biases = [b.copy() for b in state.params.biases]
    scale = 1.0 / len(selected)
    for k in selected.tolist():
        values -= scale * updates[k].delta
        for j, bd in enumerate(updates[k].bias_deltas):
            biases[j] = biases[j] - scale * bd
    new_params = ModelParams(values, state.params.layout, tuple(biases))

    new_masks = list(state.client_masks)
    for k, upd in updates.items():
        new_masks[k] = upd.next_mask

    new_state = ServerState(new_params, tuple(new_masks), t + 1, state.schedule)

    ledger.train_loss = float(np.mean(losses))
    ledger.mask_churn_total = int(sum(ledger.mask_churn.values()))
    if ledger.p_proxy:
        ledger.p_proxy_max = max(ledger.p_proxy.values())
    accs, mean_acc = evaluate_personalized(
        new_params, new_state.client_masks, fed.test.features, fed.test.labels,
        fed.client_test)
    ledger.personalized_acc = accs
    ledger.mean_personalized_acc = mean_acc
    ledger.global_acc = evaluate_global(new_params, fed.test.features, fed.test.labels)
    return new_state, ledger


def run_local_round(state: LocalState, fed: FedData, cfg: ExperimentConfig,
                    seed: int) -> tuple[LocalState, RoundLedger]:
    """No-communication baseline: sampled clients advance their own dense models."""
    t = state.round
    selected = np.sort(stream(seed, _T_SELECT, t).choice(
        cfg.clients, size=cfg.participants, replace=False))
    lr_t = cfg.lr * cfg.lr_decay ** t
    ones = Mask.all_ones(state.client_params[0].layout)

    ledger = RoundLedger(round=t)
    new_params = list(state.client_params)
    losses = []
    for k in selected.tolist():
        shard = fed.client_train[k]
        n_steps = local_step_count(len(shard), cfg)
        w_end, loss, _ = client_local_train(
            new_params[k], ones, fed.train.features, fed.train.labels, shard,
            n_steps, cfg.batch_size, lr_t, cfg.weight_decay,
            stream(seed, _T_BATCH, t, k))
        new_params[k] = w_end
        losses.append(loss)
        ledger.flops_train += flops_train_step(ones, cfg.batch_size) * n_steps

    new_state = LocalState(tuple(new_params), t + 1)
    ledger.train_loss = float(np.mean(losses))
    accs = []
    for k, idx in enumerate(fed.client_test):
        batch_feats = fed.test.features[idx]
        batch_labels = fed.test.labels[idx]
        _, _, correct = forward(new_state.client_params[k], ones,
                                Batch(batch_feats, batch_labels))
        accs.append(correct / len(idx))
    ledger.personalized_acc = accs
    ledger.mean_personalized_acc = float(np.mean(accs))
    return new_state, ledger


# --- experiment assembly --------------------------------------------------


def make_synthetic(ds_cfg: DatasetConfig) -> tuple[Dataset, Dataset]:
    """Train/test pair sharing the same class means."""
    full = synth_dataset(ds_cfg.num_classes, ds_cfg.dim,
                         ds_cfg.per_class + ds_cfg.test_per_class,
                         ds_cfg.spread, ds_cfg.data_seed)
    n_total = ds_cfg.per_class + ds_cfg.test_per_class
    train_idx, test_idx = [], []
    for c in range(ds_cfg.num_classes):
        base = c * n_total
        train_idx.extend(range(base, base + ds_cfg.per_class))
        test_idx.extend(range(base + ds_cfg.per_class, base + n_total))
    return (Dataset(full.features[train_idx], full.labels[train_idx], full.num_classes),
            Dataset(full.features[test_idx], full.labels[test_idx], full.num_classes))


def build_fed_data(cfg: ExperimentConfig, seed: int) -> FedData:
    if cfg.dataset.type == "synthetic":
        train, test = make_synthetic(cfg.dataset)
    else:
        train = load_idx(cfg.dataset.train_images, cfg.dataset.train_labels)
        test = load_idx(cfg.dataset.test_images, cfg.dataset.test_labels)
    if cfg.partition.type == "dirichlet":
        client_train = dirichlet_partition(train.labels, cfg.clients,
                                           cfg.partition.gamma, stream(seed, _T_PARTITION))
    else:
        client_train = iid_partition(train.labels, cfg.clients, stream(seed, _T_PARTITION))
    hists = [label_histogram(train.labels[idx], train.num_classes) for idx in client_train]
    client_test = personalized_test_split(test.labels, hists, cfg.test_per_client,
                                          stream(seed, _T_TESTSPLIT))
    return FedData(train, test, client_train, client_test)


def model_layout(cfg: ExperimentConfig, fed: FedData) -> LayerLayout:
    input_dim = int(np.prod(fed.train.features.shape[1:]))
    return mlp_layout([input_dim, *cfg.hidden, fed.train.num_classes])


def init_server_state(cfg: ExperimentConfig, fed: FedData, seed: int) -> ServerState:
    layout = model_layout(cfg, fed)
    params = ModelParams.init_random(layout, stream(seed, _T_MODEL))
    sparse = cfg.strategy in ("dst_gradient", "dst_random", "rsm")
    if sparse:
        densities = erk_densities(layout, cfg.density, cfg.erk_scale)
        if cfg.mask_init == "same_seed":
            shared = init_mask(layout, densities, stream(seed, _T_MASK))
            masks = tuple(shared for _ in range(cfg.clients))
        else:
            masks = tuple(init_mask(layout, densities, stream(seed, _T_MASK, k))
                          for k in range(cfg.clients))
    else:
        ones = Mask.all_ones(layout)
        masks = tuple(ones for _ in range(cfg.clients))
    schedule = PruneSchedule(cfg.alpha0, max(cfg.rounds, 2)) if sparse else None
    return ServerState(params, masks, 0, schedule)


def run_experiment(cfg: ExperimentConfig, seed: int):
    """Full T-round run. Returns (ledgers, final state, fed data)."""
    cfg.validate()
    fed = build_fed_data(cfg, seed)
    ledgers: list[RoundLedger] = []
    if cfg.strategy == "local":
        layout = model_layout(cfg, fed)
        state = LocalState(tuple(ModelParams.init_random(layout, stream(seed, _T_MODEL, k))
                                 for k in range(cfg.clients)), 0)
        for _ in range(cfg.rounds):
            state, led = run_local_round(state, fed, cfg, seed)
            ledgers.append(led)
        return ledgers, state, fed
    state = init_server_state(cfg, fed, seed)
    for _ in range(cfg.rounds):
        state, led = run_round(state, fed, cfg, seed)
        ledgers.append(led)
    return ledgers, state, fed
