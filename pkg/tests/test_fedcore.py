import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgen.datasets import DatasetSpec, Environment, gen_synthetic
from fedgen.fedcore import (
    ClientState,
    RunConfig,
    TrainingAborted,
    aggregate_weights,
    client_update_fedavg,
    client_update_fedgen,
    client_update_fedprox,
    run_training,
    sample_clients,
)
from fedgen.model import ModelParams, fedgen_loss, init_params, loss_and_grad, sgd_step

SMALL = dict(rounds=2, local_epochs=3, n_clients=4, hidden=(6,), eta=0.05, seed=3)


@pytest.fixture(scope="module")
def envs():
    return gen_synthetic(DatasetSpec(n_invariant=3, samples=60, test_samples=80, seed=1))


def _client(envs, k=0):
    return ClientState(k, envs[0])


def _same(a: ModelParams, b: ModelParams, tol=0.0):
    return all(np.max(np.abs(x - y)) <= tol for x, y in zip(a.arrays(), b.arrays()))


# -- client sampling ----------------------------------------------------------

def test_full_fraction_samples_everyone():
    assert sample_clients(np.random.default_rng(0), 7, 1.0) == list(range(7))


def test_fraction_uses_ceiling():
    ids = sample_clients(np.random.default_rng(0), 100, 0.1)
    assert len(ids) == 10 and len(set(ids)) == 10 and ids == sorted(ids)
    assert len(sample_clients(np.random.default_rng(0), 10, 0.25)) == 3


def test_sampling_is_deterministic():
    a = sample_clients(np.random.default_rng(5), 50, 0.2)
    b = sample_clients(np.random.default_rng(5), 50, 0.2)
    assert a == b


@pytest.mark.parametrize("frac", [0.0, 1.5, -0.1])
def test_bad_fraction_rejected(frac):
    with pytest.raises(ValueError):
        sample_clients(np.random.default_rng(0), 5, frac)


# -- client updates -----------------------------------------------------------

def test_zero_step_returns_broadcast(envs):
    w = init_params(0, (4, 6, 2))
    assert _same(client_update_fedavg(_client(envs), w, 3, 0.0, 16), w)


def test_single_client_equals_centralized_sgd(envs):
    shard = envs[0]
    cfg = RunConfig(algorithm="fedavg", rounds=1, local_epochs=4, n_clients=1, hidden=(5,),
                    eta=0.05, seed=2)
    fed = run_training(cfg, [shard])
    erm = run_training(RunConfig(**{**cfg.__dict__, "algorithm": "erm"}), [shard])
    assert _same(fed.params, erm.params)
    local = client_update_fedavg(ClientState(0, shard), init_params(2, (4, 5, 2)), 4, 0.05, 64,
                                 seed=2, rnd=0)
    assert _same(fed.params, local)


def test_convex_local_update_descends(envs):
    shard = envs[0]
    w = init_params(0, (4, 2))
    before = fedgen_loss(w, (shard.x, shard.y)).breakdown.total
    after_w = client_update_fedavg(ClientState(0, shard), w, 5, 0.01, 16)
    assert fedgen_loss(after_w, (shard.x, shard.y)).breakdown.total < before


def test_fedprox_zero_mu_matches_fedavg(envs):
    w = init_params(0, (4, 6, 2))
    a = client_update_fedavg(_client(envs), w, 3, 0.05, 16, seed=1, rnd=2)
    b = client_update_fedprox(_client(envs), w, 3, 0.05, 0.0, 16, seed=1, rnd=2)
    assert _same(a, b)


def test_fedprox_large_mu_pins_to_broadcast(envs):
    w = init_params(0, (4, 6, 2))
    out = client_update_fedprox(_client(envs), w, 3, 1e-7, 1e6, 16)
    assert _same(out, w, tol=1e-3)
    with pytest.raises(ValueError):
        client_update_fedprox(_client(envs), w, 1, 0.1, -1.0, 16)


def test_fedgen_all_ablations_match_fedavg(envs):
    w = init_params(0, (4, 6, 2))
    a = client_update_fedavg(_client(envs), w, 6, 0.05, 16, seed=1, rnd=0)
    b, _ = client_update_fedgen(_client(envs), w, np.ones(4), 6, 0.05, 1.0, 0.0, 16,
                                disable_scaling=True, disable_mask=True, disable_penalty=True,
                                seed=1, rnd=0)
    assert _same(a, b, tol=1e-10)


def test_fedgen_ablations_with_l1_match_l1_sgd(envs):
    w = init_params(0, (4, 6, 2))
    shard = envs[0]
    b, _ = client_update_fedgen(ClientState(0, shard), w, np.ones(4), 2, 0.05, 1.0, 1e-3, 16,
                                disable_mask=True, disable_penalty=True, seed=1, rnd=0)
    ref = w.copy()
    for epoch in range(2):
        order = np.random.default_rng([1, 0, 0, epoch]).permutation(shard.n)
        for s in range(0, shard.n, 16):
            idx = order[s:s + 16]
            _, g = loss_and_grad(ref, (shard.x[idx], shard.y[idx]), l1_weight=1e-3)
            ref = sgd_step(ref, g, 0.05)
    assert _same(b, ref, tol=1e-10)


def test_fedgen_warm_up_longer_than_round_keeps_mask(envs):
    w = init_params(0, (4, 6, 2))
    m = np.array([0.5, -1.0, 2.0, 0.0])
    _, state = client_update_fedgen(_client(envs), w, m, 4, 0.05, 1.0, 0.0, 16, e_init=4)
    np.testing.assert_array_equal(state.m, m)
    assert state.skipped_updates == 4 and state.epochs_seen == 4


def test_fedgen_mask_shape_checked(envs):
    with pytest.raises(ValueError):
        client_update_fedgen(_client(envs), init_params(0, (4, 6, 2)), np.ones(3), 1, 0.05, 1.0,
                             0.0, 16)


def test_fedgen_statistics_persist_across_rounds(envs):
    w = init_params(0, (4, 6, 2))
    c = _client(envs)
    _, c.mask = client_update_fedgen(c, w, np.ones(4), 3, 0.05, 1.0, 0.0, 16)
    v_after_first = c.mask.v.copy()
    _, second = client_update_fedgen(c, w, np.zeros(4), 1, 0.05, 1.0, 0.0, 16)
    assert second.epochs_seen == 1
    # one more EMA step from the carried-over statistics, not from zeros
    assert not np.allclose(second.v, 0.1 * (second.u / 0.1) ** 2)
    assert np.all(second.v >= 0.9 * v_after_first - 1e-15)


def test_spurious_logit_falls_below_invariant_on_two_feature_task():
    envs = gen_synthetic(DatasetSpec(n_invariant=1, n_spurious=1, train_alphas=[0.9],
                                     samples=400, seed=0))
    res = run_training(RunConfig(rounds=3, local_epochs=40, eta=0.05, n_clients=2, hidden=(8,)),
                       envs[:-1], envs[-1])
    assert res.mask_logits[1] < res.mask_logits[0]


# -- aggregation --------------------------------------------------------------

def _scalar_params(v):
    return ModelParams((1, 1), [np.array([[float(v)]])], [np.array([float(v)])])


def test_aggregate_examples():
    p = init_params(0, (3, 4, 2))
    assert _same(aggregate_weights([(p, 3), (p.copy(), 5)]), p, tol=1e-15)
    assert aggregate_weights([(_scalar_params(0), 2), (_scalar_params(2), 2)]).weights[0][0, 0] == 1
    assert aggregate_weights([(_scalar_params(4), 1), (_scalar_params(0), 3)]).weights[0][0, 0] == 1


def test_aggregate_rejects_bad_input():
    with pytest.raises(ValueError):
        aggregate_weights([])
    with pytest.raises(ValueError):
        aggregate_weights([(init_params(0, (2, 2)), 1), (init_params(0, (3, 2)), 1)])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1000), st.integers(1, 50)), min_size=1, max_size=6))
def test_aggregate_within_client_bounds(entries):
    params = [(init_params(seed, (3, 4, 2)), n) for seed, n in entries]
    out = aggregate_weights(params)
    for k, arr in enumerate(out.arrays()):
        stack = np.stack([p.arrays()[k] for p, _ in params])
        assert (arr >= stack.min(axis=0) - 1e-12).all()
        assert (arr <= stack.max(axis=0) + 1e-12).all()


def test_one_round_identical_clients_equals_full_batch_step():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(20, 3)), rng.integers(0, 2, size=20)
    env = Environment(x, y, 0.5, (), "e", 2)
    cfg = RunConfig(algorithm="fedavg", rounds=1, local_epochs=1, n_clients=3, hidden=(4,),
                    eta=0.1, batch_size=100, seed=4)
    res = run_training(cfg, [env, env, env])
    w0 = init_params(4, (3, 4, 2))
    _, g = loss_and_grad(w0, (x, y))
    assert _same(res.params, sgd_step(w0, g, 0.1), tol=1e-12)


# -- full runs ----------------------------------------------------------------

@pytest.mark.parametrize("algo", ["fedavg", "fedprox", "fedgen", "erm", "inv-fedavg"])
def test_every_algorithm_runs_and_reports(envs, algo):
    res = run_training(RunConfig(algorithm=algo, **SMALL), envs[:-1], envs[-1])
    assert [r.round for r in res.reports] == [1, 2]
    for r in res.reports:
        assert 0 <= r.train_accuracy <= 1 and 0 <= r.test_accuracy <= 1
        assert r.algorithm == algo
    assert (res.mask_logits is not None) == (algo == "fedgen")


def test_runs_are_bitwise_deterministic(envs):
    cfg = RunConfig(algorithm="fedgen", client_fraction=0.5, **SMALL)
    a = run_training(cfg, envs[:-1], envs[-1])
    b = run_training(cfg, envs[:-1], envs[-1])
    assert a.params.flat().tobytes() == b.params.flat().tobytes()
    assert a.mask_logits.tobytes() == b.mask_logits.tobytes()


def test_fedprox_zero_mu_run_equals_fedavg_run(envs):
    a = run_training(RunConfig(algorithm="fedavg", **SMALL), envs[:-1])
    b = run_training(RunConfig(algorithm="fedprox", mu=0.0, **SMALL), envs[:-1])
    assert _same(a.params, b.params)


def test_fedgen_fully_ablated_run_equals_fedavg_run(envs):
    a = run_training(RunConfig(algorithm="fedavg", **SMALL), envs[:-1])
    b = run_training(RunConfig(algorithm="fedgen", l1_weight=0.0, disable_scaling=True,
                               disable_mask=True, disable_penalty=True, **SMALL), envs[:-1])
    assert _same(a.params, b.params, tol=1e-10)


def test_fedgen_reports_loss_terms_and_gates(envs):
    res = run_training(RunConfig(algorithm="fedgen", **SMALL), envs[:-1], envs[-1])
    last = res.reports[-1]
    assert last.loss_l1 > 0 and last.loss_pen >= 0
    assert last.mask_gates.shape == (4,) and ((last.mask_gates > 0) & (last.mask_gates < 1)).all()
    assert last.skipped_mask_updates == 4 * 3  # e_init 5 > E 3: every epoch skipped


def test_fedavg_objective_has_no_fedgen_terms(envs):
    res = run_training(RunConfig(algorithm="fedavg", **SMALL), envs[:-1])
    assert all(r.loss_l1 == 0 and r.loss_pen == 0 for r in res.reports)


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_divergence_aborts_with_round_and_client(envs):
    with pytest.raises(TrainingAborted) as info:
        run_training(RunConfig(algorithm="fedgen", eta=1e6, lam=100.0, rounds=3, local_epochs=5,
                               n_clients=2, hidden=(6,)), envs[:-1])
    assert info.value.round >= 1


def test_patience_stops_when_test_loss_keeps_rising(envs):
    losses = []
    cfg = RunConfig(algorithm="fedavg", rounds=40, local_epochs=2, n_clients=2, hidden=(6,),
                    eta=0.2, patience=2)
    res = run_training(cfg, envs[:-1], envs[-1], on_round=lambda r, s: losses.append(r.test_loss))
    if res.stopped_early:
        assert losses[-1] > losses[-2] > losses[-3]
        assert len(res.reports) < 40
    else:
        assert len(res.reports) == 40


def test_theory_records_attached(envs):
    res = run_training(RunConfig(algorithm="fedavg", theory_checks=True, **SMALL), envs[:-1])
    assert res.theory is not None and len(res.theory.rounds) == 2
    for r in res.reports:
        assert r.B_est is not None and r.B_est >= 1.0 - 1e-12
        assert r.eps_est == pytest.approx(1.0)
        assert isinstance(r.bound_satisfied, bool)


@pytest.mark.parametrize("kw", [dict(algorithm="sgd"), dict(eta=0.0), dict(rounds=0),
                                dict(client_fraction=0.0), dict(lam=-1.0), dict(hidden=(0,))])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        RunConfig(**kw)


def test_feature_mismatch_between_train_and_test(envs):
    other = gen_synthetic(DatasetSpec(n_invariant=5, samples=20))[-1]
    with pytest.raises(ValueError):
        run_training(RunConfig(**SMALL), envs[:-1], other)
