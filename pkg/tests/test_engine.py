import math
from dataclasses import replace

import numpy as np
import pytest

from sparsefed.config import DatasetConfig, ExperimentConfig, PartitionConfig
from sparsefed.engine import (FedData, LocalState, ServerState, build_fed_data,
                              client_local_train, init_server_state,
                              local_step_count, model_layout, next_mask_dst,
                              next_mask_rsm, run_experiment, run_local_round,
                              run_round, stream)
from sparsefed.errors import ConfigurationError
from sparsefed.masks import Mask, init_mask, mlp_layout, erk_densities
from sparsefed.model import Batch, ModelParams, backward, sgd_step


def tiny_cfg(**kw):
    base = dict(
        dataset=DatasetConfig(num_classes=3, dim=5, per_class=60, test_per_class=40,
                              spread=0.8),
        partition=PartitionConfig(type="iid"),
        clients=4, participants=2, rounds=3, local_epochs=1.0, batch_size=8,
        hidden=(8,), test_per_client=20, seeds=(0,))
    base.update(kw)
    return ExperimentConfig(**base)


def test_local_step_count_epoch_mapping():
    cfg = tiny_cfg(local_epochs=5.0, batch_size=128)
    assert local_step_count(300, cfg) == math.ceil(5 * 300 / 128)
    assert local_step_count(1, cfg) == 1


def test_client_train_replay_oracle():
    # 5 local steps equal an independent step-by-step replay, exactly in f64
    cfg = tiny_cfg()
    fed = build_fed_data(cfg, 0)
    state = init_server_state(replace(cfg, strategy="rsm"), fed, 0)
    mask = state.client_masks[0]
    shard = fed.client_train[0]
    w0 = state.params.masked(mask)
    rng = stream(0, 3, 0, 0)
    w_end, _, _ = client_local_train(w0, mask, fed.train.features, fed.train.labels,
                                     shard, 5, cfg.batch_size, 0.05, 0.0005, rng)
    # replay with a fresh generator over the same stream
    rng2 = stream(0, 3, 0, 0)
    cur = w0
    for _ in range(5):
        idx = rng2.choice(shard, size=cfg.batch_size, replace=len(shard) < cfg.batch_size)
        g = backward(cur, mask, Batch(fed.train.features[idx], fed.train.labels[idx]))
        cur = sgd_step(cur, mask, g, 0.05, 0.0005)
    assert np.array_equal(w_end.values, cur.values)
    for a, b in zip(w_end.biases, cur.biases):
        assert np.array_equal(a, b)


def test_client_train_zero_lr_zero_delta():
    cfg = tiny_cfg()
    fed = build_fed_data(cfg, 0)
    state = init_server_state(replace(cfg, strategy="rsm"), fed, 0)
    mask = state.client_masks[1]
    w0 = state.params.masked(mask)
    w_end, _, _ = client_local_train(w0, mask, fed.train.features, fed.train.labels,
                                     fed.client_train[1], 3, 8, 0.0, 0.0, stream(0, 3, 0, 1))
    assert np.array_equal(w_end.values, w0.values)


def test_client_train_single_step_is_masked_gradient():
    cfg = tiny_cfg()
    fed = build_fed_data(cfg, 0)
    state = init_server_state(replace(cfg, strategy="rsm"), fed, 0)
    mask = state.client_masks[2]
    shard = fed.client_train[2]
    w0 = state.params.masked(mask)
    w_end, _, _ = client_local_train(w0, mask, fed.train.features, fed.train.labels,
                                     shard, 1, 8, 0.1, 0.0, stream(9, 0))
    rng = stream(9, 0)
    idx = rng.choice(shard, size=8, replace=len(shard) < 8)
    g = backward(w0, mask, Batch(fed.train.features[idx], fed.train.labels[idx]))
    delta = w0.values - w_end.values
    assert np.allclose(delta, 0.1 * g.grad)
    assert np.all(delta[~mask.bits] == 0.0)


def test_client_train_rejects_empty_shard():
    cfg = tiny_cfg()
    fed = build_fed_data(cfg, 0)
    state = init_server_state(cfg, fed, 0)
    with pytest.raises(ConfigurationError):
        client_local_train(state.params, Mask.all_ones(state.params.layout),
                           fed.train.features, fed.train.labels, np.array([], dtype=int),
                           1, 8, 0.1, 0.0, stream(0, 0))


def test_run_round_server_aggregation_oracle():
    cfg = tiny_cfg(strategy="rsm", participants=4)  # full participation
    fed = build_fed_data(cfg, 0)
    state = init_server_state(cfg, fed, 0)
    new_state, led = run_round(state, fed, cfg, 0)
    # brute-force recompute every client delta and the average
    deltas = []
    for k in range(4):
        mask = state.client_masks[k]
        shard = fed.client_train[k]
        w0 = state.params.masked(mask)
        n_steps = local_step_count(len(shard), cfg)
        w_end, _, _ = client_local_train(w0, mask, fed.train.features, fed.train.labels,
                                         shard, n_steps, cfg.batch_size,
                                         cfg.lr, cfg.weight_decay, stream(0, 3, 0, k))
        deltas.append(w0.values - w_end.values)
    expect = state.params.values.copy()
    for dlt in deltas:
        expect -= dlt / 4.0
    assert np.array_equal(new_state.params.values, expect)


def test_run_round_zero_deltas_keep_global():
    cfg = tiny_cfg(strategy="rsm", lr=1e-300)  # effectively zero updates
    fed = build_fed_data(cfg, 0)
    state = init_server_state(cfg, fed, 0)
    new_state, _ = run_round(state, fed, cfg, 0)
    assert np.allclose(new_state.params.values, state.params.values)


def test_update_support_contained_in_mask():
    cfg = tiny_cfg(strategy="dst_gradient", rounds=4)
    fed = build_fed_data(cfg, 0)
    state = init_server_state(cfg, fed, 0)
    for _ in range(3):
        prev = state
        state, led = run_round(state, fed, cfg, 0)
        # global params never forced to zero wholesale
        assert np.count_nonzero(state.params.values) > 0.9 * len(state.params.values)


def test_nonselected_clients_inherit_masks():
    cfg = tiny_cfg(strategy="dst_gradient", participants=1, rounds=3, alpha0=0.5)
    fed = build_fed_data(cfg, 0)
    state = init_server_state(cfg, fed, 0)
    sel = int(stream(0, 2, 0).choice(cfg.clients, size=1, replace=False)[0])
    new_state, _ = run_round(state, fed, cfg, 0)
    for k in range(cfg.clients):
        if k != sel:
            assert np.array_equal(new_state.client_masks[k].bits, state.client_masks[k].bits)


def test_dst_preserves_volume_and_rsm_identity():
    cfg = tiny_cfg(strategy="dst_gradient", rounds=6, alpha0=0.5)
    fed = build_fed_data(cfg, 0)
    state = init_server_state(cfg, fed, 0)
    init_counts = [m.active_per_layer for m in state.client_masks]
    for _ in range(5):
        state, _ = run_round(state, fed, cfg, 0)
        for m, c0 in zip(state.client_masks, init_counts):
            assert np.array_equal(m.active_per_layer, c0)
    m = state.client_masks[0]
    assert next_mask_rsm(m) is m


def test_next_mask_dst_alpha_zero_identity():
    cfg = tiny_cfg()
    fed = build_fed_data(cfg, 0)
    layout = model_layout(cfg, fed)
    dens = erk_densities(layout, 0.5)
    mask = init_mask(layout, dens, 0)
    params = ModelParams.init_random(layout, 1).masked(mask)
    out = next_mask_dst(params, mask, 0.0, fed.train.features, fed.train.labels,
                        fed.client_train[0], 8, "gradient", stream(0, 4))
    assert np.array_equal(out.bits, mask.bits)


def test_fedavg_single_client_is_plain_sgd():
    cfg = tiny_cfg(strategy="fedavg", clients=1, participants=1)
    fed = build_fed_data(cfg, 0)
    state = init_server_state(cfg, fed, 0)
    new_state, _ = run_round(state, fed, cfg, 0)
    shard = fed.client_train[0]
    n_steps = local_step_count(len(shard), cfg)
    w_end, _, _ = client_local_train(state.params, Mask.all_ones(state.params.layout),
                                     fed.train.features, fed.train.labels, shard,
                                     n_steps, cfg.batch_size, cfg.lr, cfg.weight_decay,
                                     stream(0, 3, 0, 0))
    # aggregation computes w - (w - w_end); identical up to one rounding step
    assert np.allclose(new_state.params.values, w_end.values, rtol=1e-12, atol=1e-15)


def test_local_round_no_comm_and_untouched_params():
    cfg = tiny_cfg(strategy="local", participants=2)
    fed = build_fed_data(cfg, 0)
    layout = model_layout(cfg, fed)
    state = LocalState(tuple(ModelParams.init_random(layout, stream(0, 0, k))
                             for k in range(cfg.clients)), 0)
    sel = set(stream(0, 2, 0).choice(cfg.clients, size=2, replace=False).tolist())
    new_state, led = run_local_round(state, fed, cfg, 0)
    assert led.bytes_up == 0 and led.bytes_down == 0
    for k in range(cfg.clients):
        same = np.array_equal(new_state.client_params[k].values, state.client_params[k].values)
        assert same == (k not in sel)


def test_subsampling_full_density_equals_fedavg():
    cfg_a = tiny_cfg(strategy="subsampling", upload_density=1.0)
    cfg_b = tiny_cfg(strategy="fedavg")
    led_a, state_a, _ = run_experiment(cfg_a, 0)
    led_b, state_b, _ = run_experiment(cfg_b, 0)
    assert np.array_equal(state_a.params.values, state_b.params.values)


def test_subsampling_byte_accounting():
    cfg = tiny_cfg(strategy="subsampling", upload_density=0.25, rounds=1)
    led, state, fed = run_experiment(cfg, 0)
    d = state.params.layout.total_count
    assert led[0].bytes_down == cfg.participants * 4 * d
    assert led[0].bytes_up == cfg.participants * 4 * round(0.25 * d)


def test_run_experiment_zero_rounds():
    cfg = tiny_cfg(rounds=0)
    led, state, _ = run_experiment(cfg, 0)
    assert led == []
    ref = init_server_state(cfg, build_fed_data(cfg, 0), 0)
    assert np.array_equal(state.params.values, ref.params.values)


def test_run_experiment_deterministic():
    cfg = tiny_cfg(strategy="dst_gradient", rounds=3)
    led_a, state_a, _ = run_experiment(cfg, 5)
    led_b, state_b, _ = run_experiment(cfg, 5)
    assert np.array_equal(state_a.params.values, state_b.params.values)
    for a, b in zip(led_a, led_b):
        assert a == b


def test_participants_exceed_clients_rejected():
    with pytest.raises(ConfigurationError):
        tiny_cfg(participants=9).validate()


def test_single_step_full_participation_is_data_parallel_sgd():
    # one local step + full participation reduces to the data-parallel update
    cfg = tiny_cfg(strategy="rsm", participants=4, batch_size=4,
                   local_epochs=1e-9)  # forces n_steps = 1
    fed = build_fed_data(cfg, 0)
    state = init_server_state(cfg, fed, 0)
    new_state, _ = run_round(state, fed, cfg, 0)
    acc = np.zeros_like(state.params.values)
    for k in range(4):
        mask = state.client_masks[k]
        w0 = state.params.masked(mask)
        rng = stream(0, 3, 0, k)
        shard = fed.client_train[k]
        idx = rng.choice(shard, size=4, replace=len(shard) < 4)
        g = backward(w0, mask, Batch(fed.train.features[idx], fed.train.labels[idx]))
        acc += cfg.lr * (g.grad + cfg.weight_decay * w0.values * mask.bits)
    expect = state.params.values - acc / 4.0
    assert np.allclose(new_state.params.values, expect, rtol=1e-12, atol=1e-15)


def test_warm_start_regrown_coords_take_global_values():
    cfg = tiny_cfg(strategy="dst_gradient", rounds=6, alpha0=0.5)
    fed = build_fed_data(cfg, 0)
    state = init_server_state(cfg, fed, 0)
    for _ in range(5):
        prev = state
        state, _ = run_round(state, fed, cfg, 0)
        for k in range(cfg.clients):
            regrown = state.client_masks[k].bits & ~prev.client_masks[k].bits
            if regrown.any():
                view = state.params.masked(state.client_masks[k])
                assert np.array_equal(view.values[regrown], state.params.values[regrown])
