import json
import math
from dataclasses import replace

import numpy as np
import pytest

import data
import engine
import metrics
import model
import topology
from errors import InvalidArgumentError, RunAbortedError
from utils.rng import PHASE_HEAD, PHASE_PHI, substream


def _identical_shards(n, seed=0):
    base = data.generate_planted(1, 6, 2, 24, 0.05, 0.0, seed=seed).shards[0]
    return [data.Shard(i, base.train, base.test) for i in range(n)]


def _step(params, grad, rate):
    return params.unflatten(params.flatten() - rate * grad.flatten())


def test_corollary_rates():
    alpha, beta = engine.corollary_rates(8, 2000, 2)
    assert alpha == pytest.approx(1.0 / (2 * math.sqrt(2000)))
    assert beta == pytest.approx(math.sqrt(8 / 2000))


def test_corollary_k_floor():
    n, big_c, q, L = 4, 10.0, 0.5, 2.0
    expected = math.ceil(max(18 * big_c**2 * L**2 * n**3 / (1 - q) ** 2, (2 * L**2 + 2) ** 2 / (n * L**4), n * L**2))
    assert engine.corollary_k_floor(n, big_c, q, L) == expected
    with pytest.raises(InvalidArgumentError):
        engine.corollary_k_floor(4, 10.0, 1.0, 2.0)


def test_decay_schedule():
    cfg = engine.RunConfig(alpha=0.2, beta=0.4, schedule=engine.DECAY, decay=0.5)
    assert cfg.rates(3, 4) == (pytest.approx(0.025), pytest.approx(0.05))


def test_run_config_validation():
    with pytest.raises(InvalidArgumentError):
        engine.RunConfig(schedule="cosine")
    with pytest.raises(InvalidArgumentError):
        engine.RunConfig(tau=0)
    with pytest.raises(InvalidArgumentError):
        engine.RunConfig(decay=1.5)
    with pytest.raises(InvalidArgumentError):
        engine.RunConfig(alpha=-1.0)


def test_rate_feasibility_flags_large_steps():
    mix = topology.mixing_params(topology.metropolis_weights(topology.build_ring(4)))
    msgs = engine.rate_feasibility(1.0, 10.0, 2, 4, mix, 1.0)
    assert any(m.startswith("alpha") for m in msgs)
    assert any(m.startswith("beta") for m in msgs)
    assert engine.rate_feasibility(1e-9, 1e-9, 2, 4, mix, 1.0) == []


def test_init_states_share_phi_only():
    cfg = engine.RunConfig(z=2, seed=4)
    states = engine.init_states(3, 6, 1, cfg)
    for s in states[1:]:
        np.testing.assert_array_equal(s.phi.flatten(), states[0].phi.flatten())
    assert not np.array_equal(states[0].theta.A, states[1].theta.A)
    shared = engine.init_states(3, 6, 1, cfg, shared_head=True)
    np.testing.assert_array_equal(shared[0].theta.A, shared[2].theta.A)


def test_zero_rates_leave_everything_unchanged(planted):
    cfg = engine.RunConfig(alpha=0.0, beta=0.0, z=2, rounds=5, seed=2)
    graph = topology.build_ring(4)
    start = engine.init_states(4, 6, 1, cfg)
    trace = engine.run_deprl(graph, planted.shards, cfg)
    for a, b in zip(start, trace.final_states):
        np.testing.assert_array_equal(a.phi.flatten(), b.phi.flatten())
        np.testing.assert_array_equal(a.theta.flatten(), b.theta.flatten())
    assert all(r.consensus_err == 0.0 for r in trace.records)


def test_first_record_has_exact_consensus(planted):
    cfg = engine.RunConfig(alpha=0.05, beta=0.05, z=2, rounds=3, seed=2)
    trace = engine.run_deprl(topology.build_ring(4), planted.shards, cfg)
    assert trace.records[0].consensus_err == 0.0
    assert trace.records[1].consensus_err > 0.0


def test_single_worker_is_alternating_sgd():
    shard = data.generate_planted(1, 6, 2, 30, 0.05, 0.0, seed=8).shards
    cfg = engine.RunConfig(alpha=0.05, beta=0.1, tau=3, z=2, rounds=6, batch_size=5, seed=7)
    trace = engine.run_deprl(topology.build_single(), shard, cfg)

    (state,) = engine.init_states(1, 6, 1, cfg)
    phi, theta = state.phi, state.theta
    for k in range(cfg.rounds):
        for s in range(cfg.tau):
            batch = data.sample_batch(shard[0].train, 5, substream(7, 0, k, PHASE_HEAD, s))
            theta = _step(theta, model.grad_theta(phi, theta, batch, cfg.loss), cfg.alpha)
        batch = data.sample_batch(shard[0].train, 5, substream(7, 0, k, PHASE_PHI, 0))
        phi = _step(phi, model.grad_phi(phi, theta, batch, cfg.loss), cfg.beta)

    np.testing.assert_array_equal(trace.final_states[0].phi.flatten(), phi.flatten())
    np.testing.assert_array_equal(trace.final_states[0].theta.flatten(), theta.flatten())


def test_identical_workers_match_centralized_alternating_gd():
    n = 8
    shards = _identical_shards(n)
    cfg = engine.RunConfig(alpha=0.05, beta=0.1, tau=2, z=2, rounds=50, batch_size=None, shared_head_init=True, seed=3)
    p_mat = topology.metropolis_weights(topology.build_complete(n))
    states = engine.init_states(n, 6, 1, cfg)
    phi, theta = states[0].phi, states[0].theta
    full = shards[0].train

    for k in range(cfg.rounds):
        states = engine.deprl_round(states, p_mat, shards, cfg, k)
        for _ in range(cfg.tau):
            theta = _step(theta, model.grad_theta(phi, theta, full, cfg.loss), cfg.alpha)
        phi = _step(phi, model.grad_phi(phi, theta, full, cfg.loss), cfg.beta)
        for s in states:
            np.testing.assert_allclose(s.phi.flatten(), phi.flatten(), rtol=0, atol=1e-10)
            np.testing.assert_allclose(s.theta.flatten(), theta.flatten(), rtol=0, atol=1e-10)


def test_identical_workers_match_centralized_sgd_for_dpsgd():
    n = 8
    shards = _identical_shards(n, seed=1)
    cfg = engine.RunConfig(beta=0.1, z=2, rounds=50, batch_size=None, seed=3)
    p_mat = topology.metropolis_weights(topology.build_complete(n))
    states = engine.init_states(n, 6, 1, cfg, shared_head=True)
    phi, theta = states[0].phi, states[0].theta
    full = shards[0].train

    for k in range(cfg.rounds):
        states = engine.dpsgd_round(states, p_mat, shards, cfg, k)
        _, g_phi, g_theta = model.loss_and_grads(phi, theta, full, cfg.loss)
        phi, theta = _step(phi, g_phi, cfg.beta), _step(theta, g_theta, cfg.beta)
        for s in states:
            np.testing.assert_allclose(s.phi.flatten(), phi.flatten(), rtol=0, atol=1e-10)
            np.testing.assert_allclose(s.theta.flatten(), theta.flatten(), rtol=0, atol=1e-10)


def test_threads_do_not_change_results(planted):
    cfg = engine.RunConfig(alpha=0.05, beta=0.05, z=2, rounds=8, batch_size=4, seed=5)
    graph = topology.build_ring(4)
    one = engine.run_deprl(graph, planted.shards, cfg, threads=1)
    many = engine.run_deprl(graph, planted.shards, cfg, threads=4)
    assert one.records == many.records


def test_diagnostic_stride(planted):
    cfg = engine.RunConfig(z=2, rounds=10, diagnostic_every=3, seed=1)
    trace = engine.run_deprl(topology.build_ring(4), planted.shards, cfg)
    assert [r.k for r in trace.records] == [0, 3, 6, 9]


def test_resume_from_checkpoint_continues_exactly(planted):
    cfg = engine.RunConfig(alpha=0.05, beta=0.05, z=2, rounds=10, batch_size=4, seed=6)
    graph = topology.build_ring(4)
    saved = []
    full = engine.run_deprl(graph, planted.shards, cfg, checkpoint_every=5, on_checkpoint=saved.append)
    assert [c.round_index for c in saved] == [5, 10]

    ck = engine.Checkpoint.from_json(json.loads(json.dumps(saved[0].to_json())))
    rest = engine.run_deprl(graph, planted.shards, cfg, resume=ck)
    assert rest.records == full.records[5:]
    np.testing.assert_array_equal(rest.final_states[2].phi.flatten(), full.final_states[2].phi.flatten())


def test_resume_rejects_other_seed(planted):
    cfg = engine.RunConfig(z=2, rounds=4, seed=6)
    graph = topology.build_ring(4)
    saved = []
    engine.run_deprl(graph, planted.shards, cfg, checkpoint_every=2, on_checkpoint=saved.append)
    with pytest.raises(InvalidArgumentError):
        engine.run_deprl(graph, planted.shards, replace(cfg, seed=7), resume=saved[0])


def test_divergence_aborts_with_worker_and_round(planted):
    cfg = engine.RunConfig(alpha=1e150, beta=1e150, z=2, rounds=20, seed=1)
    with np.errstate(all="ignore"):
        with pytest.raises(RunAbortedError) as e:
            engine.run_deprl(topology.build_ring(4), planted.shards, cfg)
    assert e.value.round_index < 20
    assert 0 <= e.value.worker < 4


def test_mismatched_inputs(planted):
    cfg = engine.RunConfig(z=2, rounds=1)
    with pytest.raises(InvalidArgumentError):
        engine.run_deprl(topology.build_ring(5), planted.shards, cfg)
    with pytest.raises(InvalidArgumentError):
        engine.run_algorithm("fedavg", topology.build_ring(4), planted.shards, cfg)


def test_dpsgd_starts_from_one_model(planted):
    cfg = engine.RunConfig(beta=0.05, z=2, rounds=1, seed=2)
    trace = engine.run_dpsgd(topology.build_ring(4), planted.shards, cfg)
    assert trace.records[0].consensus_err == 0.0


def test_generalization_with_the_true_representation():
    task = data.generate_planted(3, 6, 2, 20, 0.0, 0.5, seed=12)
    frozen = task.phi_star.copy()
    spec = model.LossSpec(model.SQUARED)
    learned = engine.generalize_to_new_workers(frozen, task.shards, head_steps=300, alpha=0.2, spec=spec)
    np.testing.assert_array_equal(frozen.flatten(), task.phi_star.flatten())
    assert learned.accuracies is None
    assert learned.mean_test_loss < 1e-3

    random_phi = model.init_representation(model.LINEAR, 6, 2, substream(0, 99))
    baseline = engine.generalize_to_new_workers(random_phi, task.shards, head_steps=300, alpha=0.2, spec=spec)
    assert learned.mean_test_loss < baseline.mean_test_loss


def test_generalization_without_steps_keeps_initial_heads():
    task = data.generate_planted(2, 6, 2, 20, 0.0, 0.5, seed=12)
    spec = model.LossSpec(model.SQUARED)
    a = engine.generalize_to_new_workers(task.phi_star, task.shards, 0, 0.1, spec, seed=4)
    b = engine.generalize_to_new_workers(task.phi_star, task.shards, 0, 0.1, spec, seed=4)
    np.testing.assert_array_equal(a.heads[1].A, b.heads[1].A)
    with pytest.raises(InvalidArgumentError):
        engine.generalize_to_new_workers(task.phi_star, task.shards, -1, 0.1, spec)


def test_record_fields_are_consistent(planted):
    cfg = engine.RunConfig(alpha=0.05, beta=0.1, tau=2, z=2, rounds=3, seed=2)
    trace = engine.run_deprl(topology.build_ring(4), planted.shards, cfg)
    for r in trace.records:
        assert r.m_k == pytest.approx(metrics.m_of_k(r.grad_phi_sq, r.grad_theta_sq, r.consensus_err, 0.05, 2, 0.1))
        assert r.avg_test_accuracy is None
        assert r.avg_test_loss is not None
    assert trace.summary["records"] == 3


def test_corollary_k_floor_rejects_infinite_c():
    with pytest.raises(InvalidArgumentError, match="C is infinite"):
        engine.corollary_k_floor(200, math.inf, 0.5, 1.0)


def test_rate_feasibility_reports_vacuous_mixing():
    mix = topology.mixing_params(topology.metropolis_weights(topology.build_complete(200)))
    msgs = engine.rate_feasibility(1e-9, 1e-9, 2, 200, mix, 1.0)
    assert msgs == ["mixing constants vacuous: no beta meets (1-q)/(3 sqrt2 C L N)"]


def test_consensus_carries_representations_only(planted, monkeypatch):
    cfg = engine.RunConfig(alpha=0.05, beta=0.05, z=2, seed=6)
    states = engine.init_states(4, 6, 1, cfg)
    p_mat = topology.metropolis_weights(topology.build_ring(4))
    widths = []
    real = engine._consensus

    def recording(P, X):
        widths.append(X.shape)
        return real(P, X)

    monkeypatch.setattr(engine, "_consensus", recording)
    engine.deprl_round(states, p_mat, planted.shards, cfg, 0)
    assert widths == [(4, states[0].phi.flatten().size)]


def test_other_heads_ignore_a_perturbed_head(planted):
    cfg = engine.RunConfig(alpha=0.05, beta=0.05, z=2, seed=6)
    p_mat = topology.metropolis_weights(topology.build_complete(4))
    states = engine.init_states(4, 6, 1, cfg)
    bumped = [s.copy() for s in states]
    bumped[1] = engine.WorkerState(1, bumped[1].phi, model.HeadParams(bumped[1].theta.A + 1.0, bumped[1].theta.bias), bumped[1].seed)

    base = engine.deprl_round(states, p_mat, planted.shards, cfg, 0)
    moved = engine.deprl_round(bumped, p_mat, planted.shards, cfg, 0)
    for i in (0, 2, 3):
        np.testing.assert_array_equal(base[i].theta.flatten(), moved[i].theta.flatten())
    assert not np.array_equal(base[1].theta.flatten(), moved[1].theta.flatten())


def test_running_average_covers_recorded_rounds(planted):
    cfg = engine.RunConfig(alpha=0.05, beta=0.05, z=2, rounds=10, seed=2, diagnostic_every=3)
    trace = engine.run_deprl(topology.build_ring(4), planted.shards, cfg)
    assert [r.k for r in trace.records] == [0, 3, 6, 9]
    assert trace.summary["running_avg_m_rounds"] == 4
    assert trace.records[-1].running_avg_m == pytest.approx(np.mean([r.m_k for r in trace.records]), rel=1e-12)
    assert trace.summary["running_avg_m"] == pytest.approx(trace.records[-1].running_avg_m, rel=1e-12)
