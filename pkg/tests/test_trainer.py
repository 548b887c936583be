import numpy as np
import pytest

from hybridnet.comm import CommTimeout, MessageKind, SimNetwork, run_ranks
from hybridnet.graph import evaluate, forward_seq
from hybridnet.partition import PartitionPlan, partition
from hybridnet.trainer import (ConfigError, DataExhausted, PartitionState, PipelineSchedule,
                               TrainConfig, fit, fit_sequential, iter_steps, run_rank)
from hybridnet.zoo import load_config

from helpers import blob_data, merged_history, rel_err


@pytest.mark.parametrize("changes,match", [
    (dict(strategy="pipeline"), "strategy"),
    (dict(batch_size=0), "batch_size"),
    (dict(strategy="data", num_partitions=2), "1 partition"),
    (dict(strategy="model", num_replicas=2), "1 replica"),
    (dict(batch_size=8, pipeline_stages=3), "does not divide"),
    (dict(batch_size=2, pipeline_stages=4), "exceeds"),
    (dict(lr_schedule=[(1, 0.1)]), "start at 0"),
    (dict(lr_schedule=[(0, 0.1), (0, 0.2)]), "strictly increase"),
    (dict(lr_schedule=[(0, -0.1)]), "positive"),
    (dict(lr_schedule=[]), "empty"),
    (dict(max_steps=0), "max_steps"),
])
def test_config_validation(changes, match):
    with pytest.raises(ConfigError, match=match):
        TrainConfig(**changes).validate()


def test_config_derived_values():
    cfg = TrainConfig(strategy="hybrid", num_partitions=3, num_replicas=2, batch_size=8,
                      lr_schedule=[(0, 0.5), (2, 0.1), (4, 0.01)])
    assert cfg.world_size == 6 and cfg.effective_batch_size == 16
    assert [cfg.lr_at(e) for e in range(6)] == [0.5, 0.5, 0.1, 0.1, 0.01, 0.01]
    assert TrainConfig(strategy="model", batch_size=8).effective_batch_size == 8


def test_pipeline_schedule():
    assert PipelineSchedule.split(8, 4).micro_batches == ((0, 2), (2, 4), (4, 6), (6, 8))
    assert PipelineSchedule.split(5, 1).stages == 1
    with pytest.raises(ConfigError):
        PipelineSchedule.split(8, 3)


def test_iter_steps_drops_partial_batches_and_reshuffles():
    cfg = TrainConfig(batch_size=4, epochs=2, seed=1)
    steps = list(iter_steps(10, cfg))
    assert [(s, e) for s, e, _ in steps] == [(0, 0), (1, 0), (2, 1), (3, 1)]
    assert all(len(idx) == 4 for _, _, idx in steps)
    assert len(set(steps[0][2]) | set(steps[1][2])) == 8
    assert not np.array_equal(steps[0][2], steps[2][2])
    again = list(iter_steps(10, cfg))
    assert all(np.array_equal(a[2], b[2]) for a, b in zip(steps, again))
    with pytest.raises(DataExhausted):
        next(iter_steps(3, cfg))
    capped = TrainConfig(batch_size=4, epochs=5, max_steps=3)
    assert len(list(iter_steps(10, capped))) == 3


def _setup(strategy, P, R, S, bs=8, epochs=2, model="resnet_toy", **kw):
    m = load_config(model)
    cfg = TrainConfig(strategy=strategy, num_partitions=P, num_replicas=R, pipeline_stages=S,
                      batch_size=bs, epochs=epochs, lr_schedule=[(0, 0.2), (1, 0.05)], seed=2,
                      **kw)
    return m, blob_data(m, cfg.effective_batch_size * 3, n_test=20), cfg


def test_single_partition_is_bitwise_sequential():
    m, data, cfg = _setup("model", 1, 1, 1)
    res = fit(m, data, cfg, record_params=True)
    seq = fit_sequential(m, data, cfg, record_params=True)
    assert res.losses == seq.losses
    assert res.model.checksum() == seq.model.checksum()


@pytest.mark.parametrize("strategy,P,R,S", [("model", 4, 1, 4), ("data", 1, 2, 2),
                                            ("hybrid", 3, 2, 8), ("hybrid", 2, 2, 1)])
def test_strategies_match_sequential(strategy, P, R, S):
    m, data, cfg = _setup(strategy, P, R, S)
    res = fit(m, data, cfg, record_params=True, bound=1, timeout=10)
    seq = fit_sequential(m, data, cfg, record_params=True)
    assert np.allclose(res.losses, seq.losses, rtol=1e-12, atol=0)
    for got, want in zip(merged_history(res.ranks), seq.param_history):
        for i in want:
            assert rel_err(got[i][0], want[i][0]) < 1e-12
    for i in m.param_ids():
        assert rel_err(res.model[i].W, seq.model[i].W) < 1e-12
    assert res.test_accuracy == evaluate(res.model, data.x_test, data.y_test)


def test_runs_are_reproducible_across_buffer_bounds():
    m, data, cfg = _setup("hybrid", 2, 2, 2)
    a = fit(m, data, cfg, bound=1)
    b = fit(m, data, cfg, bound=64)
    assert a.losses == b.losses
    assert a.model.checksum() == b.model.checksum()


def test_async_allreduce_is_bitwise_equal_to_sync():
    m, data, cfg = _setup("hybrid", 2, 2, 4)
    sync = fit(m, data, cfg)
    cfg.async_allreduce = True
    asyn = fit(m, data, cfg)
    assert sync.losses == asyn.losses
    assert sync.model.checksum() == asyn.model.checksum()


def test_replicas_start_from_replica_zero_weights():
    m, data, cfg = _setup("data", 1, 3, 1, epochs=1)
    res = fit(m, data, cfg)
    sums = {r.checksums[0] for r in res.ranks}
    assert len(sums) == 1


def test_input_model_is_not_mutated():
    m, data, cfg = _setup("hybrid", 2, 2, 2)
    before = m.checksum()
    fit(m, data, cfg)
    assert m.checksum() == before


def test_metrics_and_callbacks():
    m, data, cfg = _setup("model", 2, 1, 2)
    seen = []
    res = fit(m, data, cfg, on_step=seen.append)
    assert [s.step for s in res.metrics] == list(range(len(res.metrics)))
    assert seen == res.metrics
    assert all(s.images_per_sec > 0 and s.wall_ms > 0 for s in res.metrics)
    assert [s.epoch for s in res.metrics] == [0, 0, 0, 1, 1, 1]


def test_world_size_mismatch_is_rejected():
    m, data, cfg = _setup("hybrid", 2, 2, 1)
    ep = SimNetwork(3).endpoints[0]
    with pytest.raises(ConfigError, match="world size 3"):
        run_rank(m, data, cfg, ep)


def test_comm_errors_name_the_partition_and_tag():
    m = load_config("fig4_mlp")
    plan = partition(m, 2)
    net = SimNetwork(2, timeout=0.1)
    st = PartitionState(m, plan, net.endpoints[1])
    with pytest.raises(CommTimeout, match=r"partition 1 layer 2 tag \d+"):
        st.distributed_forward(0, None, None)


def test_replica_sync_examples():
    m = load_config("fig4_mlp")
    g = {1: (np.arange(32.0).reshape(4, 8), np.ones(8))}

    alone = PartitionState(m, PartitionPlan(1, 1, (0,) * 4), SimNetwork(1).endpoints[0])
    out = alone.replica_sync(g)
    assert out[1][0].tobytes() == g[1][0].tobytes()

    plan = PartitionPlan(1, 2, (0,) * 4)

    def fn(ep):
        sign = 1.0 if ep.rank == 0 else -1.0
        st = PartitionState(m, plan, ep)
        return st.replica_sync({1: (sign * g[1][0], sign * g[1][1])})

    for out in run_ranks(2, fn):
        assert not out[1][0].any() and not out[1][1].any()


def _two_partition_forward(m, x, y, zero_sink_grad=False):
    plan = partition(m, 2)

    def fn(ep):
        ep.record_payloads = True
        st = PartitionState(m, plan, ep)
        st.distributed_forward(0, x if st.owns_input else None, y if st.owns_output else None)
        if zero_sink_grad and st.owns_output:
            st._logit_grads[0] = np.zeros_like(st._logit_grads[0])
        st.distributed_backward(0)
        return ep.trace

    return plan, run_ranks(2, fn)


def test_boundary_activation_is_shipped_bitwise():
    m = load_config("fig4_mlp")
    data = blob_data(m, 6)
    plan, traces = _two_partition_forward(m, data.x_train, data.y_train)
    _, acts = forward_seq(m, data.x_train, data.y_train)
    (act,) = [msg for msg in traces[1] if msg.kind == MessageKind.Activation]
    boundary = max(plan.local_layers(0))
    assert act.payload.tobytes() == acts[boundary].tobytes()


def test_zero_sink_gradient_ships_zero_partial_errors():
    m = load_config("fig4_mlp")
    data = blob_data(m, 6)
    _, traces = _two_partition_forward(m, data.x_train, data.y_train, zero_sink_grad=True)
    errs = [msg for msg in traces[0] if msg.kind == MessageKind.PartialError]
    assert errs and all(not msg.payload.any() for msg in errs)


def test_distributed_evaluate_matches_sequential():
    m, data, cfg = _setup("hybrid", 2, 2, 2)
    res = fit(m, data, cfg)
    assert res.test_accuracy == evaluate(res.model, data.x_test, data.y_test)


def test_constant_prediction_scores_one_half_on_balanced_labels():
    m = load_config("fig4_mlp")
    for i in m.param_ids():
        m[i].W[:] = 0.0
        m[i].b[:] = 0.0
    m[m.param_ids()[-1]].b[0] = 1.0
    y = np.eye(3)[[0, 1] * 5]
    assert evaluate(m, np.ones((10, 4)), y) == 0.5


def test_hybrid_pipeline_tracks_sequential_for_twenty_steps():
    m, data, cfg = _setup("hybrid", 2, 2, 2, epochs=20)
    cfg.max_steps = 20
    res = fit(m, data, cfg, record_params=True)
    seq = fit_sequential(m, data, cfg, record_params=True)
    assert len(res.losses) == 20
    assert rel_err(res.losses, seq.losses) <= 1e-6
    final = res.model
    for i in final.param_ids():
        assert rel_err(final[i].W, seq.model[i].W) <= 1e-6
