from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from fedpm.data import synth_classes
from fedpm.errors import ModelMismatch, NotPositiveDefinite
from fedpm.linalg import cholesky_solve, damp
from fedpm.methods import (
    ClientUpload,
    MethodConfig,
    client_foof_steps,
    comm_cost,
    fedpm_client_uploads,
    fedpm_expanded_check,
    identity_stats,
    mix_foof,
    mix_preconditioned,
    round_fedavg,
    round_fedpm,
    round_fedpm_foof,
    round_local_newton,
    round_psgd,
    round_sogm,
    round_sogm_multi,
)
from fedpm.objectives import FoofStats, LogisticL2Objective, MlpObjective, QuadraticObjective

from conftest import logistic_clients, quadratic_clients, random_spd


def cfg(method, lr=1.0, **kw):
    return MethodConfig(method=method, lr=lr, **kw)


class FixedGradient:
    """Objective whose gradient is a constant vector."""

    def __init__(self, g):
        self.g = np.asarray(g, dtype=np.float64)
        self.dim = self.g.size

    def gradient(self, theta):
        return self.g


def mlp_clients(n_clients=3, dims=(4, 5, 3), n=60, seed=0):
    ds = synth_classes(dims[0], n, dims[-1], 2.0, seed)
    labels = ds.class_indices()
    return [MlpObjective(dims, ds.X[i::n_clients], labels[i::n_clients]) for i in range(n_clients)]


# --- config ---------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [dict(method="nope", lr=1.0), dict(method="fedpm", lr=0.0), dict(method="fedpm", lr=1.0, local_steps=0),
     dict(method="fedpm", lr=1.0, damping=-1.0), dict(method="fedpm", lr=1.0, foof_mode="sometimes")],
)
def test_method_config_validation(kw):
    with pytest.raises(ValueError):
        MethodConfig(**kw)


# --- psgd / fedavg ----------------------------------------------------------


def test_psgd_hand_example():
    theta = np.array([2.0, 3.0])
    out, _ = round_psgd(theta, [FixedGradient([1.0, 0.0]), FixedGradient([0.0, 1.0])], cfg("psgd"))
    assert_array_equal(out, [1.5, 2.5])


def test_psgd_zero_gradients():
    theta = np.array([0.25, -1.5, 4.0])
    out, _ = round_psgd(theta, [FixedGradient(np.zeros(3))] * 3, cfg("psgd", lr=0.1))
    assert_allclose(out, theta, rtol=0, atol=4 * np.spacing(4.0))


def test_psgd_single_client_is_gradient_descent(rng):
    q = quadratic_clients(rng, 4, 1)[0]
    theta = rng.standard_normal(4)
    out, _ = round_psgd(theta, [q], cfg("psgd", lr=0.3))
    assert_array_equal(out, theta - 0.3 * q.gradient(theta))


def test_fedavg_k1_bit_exact_with_psgd():
    clients = logistic_clients(d=6, n_clients=4, per_client=10)
    theta = np.linspace(-1, 1, 6)
    a, _ = round_fedavg(theta, clients, cfg("fedavg", lr=0.7))
    b, _ = round_psgd(theta, clients, cfg("psgd", lr=0.7))
    assert_array_equal(a, b)


def test_fedavg_k2_unrolled(rng):
    qs = quadratic_clients(rng, 3, 2)
    theta = rng.standard_normal(3)
    out, _ = round_fedavg(theta, qs, cfg("fedavg", lr=0.2, local_steps=2))
    locals_ = []
    for q in qs:
        t1 = theta - 0.2 * q.gradient(theta)
        locals_.append(t1 - 0.2 * q.gradient(t1))
    assert_allclose(out, (locals_[0] + locals_[1]) / 2, atol=1e-15)


def test_fedavg_identical_shards_is_single_client(rng):
    q = quadratic_clients(rng, 3, 1)[0]
    theta = rng.standard_normal(3)
    c = cfg("fedavg", lr=0.1, local_steps=3)
    assert_allclose(round_fedavg(theta, [q] * 4, c)[0], round_fedavg(theta, [q], c)[0], atol=1e-15)


# --- sogm / local newton ----------------------------------------------------


def test_sogm_quadratic_one_shot(rng):
    q = quadratic_clients(rng, 5, 1)[0]
    out, _ = round_sogm(rng.standard_normal(5), [q], cfg("sogm"))
    assert_allclose(out, np.linalg.solve(q.A, q.b), atol=1e-12)


def test_sogm_identity_curvature_is_psgd(rng):
    qs = [QuadraticObjective(np.eye(3), rng.standard_normal(3)) for _ in range(3)]
    theta = rng.standard_normal(3)
    a, _ = round_sogm(theta, qs, cfg("sogm", lr=0.4))
    b, _ = round_psgd(theta, qs, cfg("psgd", lr=0.4))
    assert_allclose(a, b, atol=1e-15)


def test_sogm_two_quadratics_closed_form():
    A1, A2 = np.array([[2.0, 0.0], [0.0, 1.0]]), np.array([[1.0, 1.0], [1.0, 3.0]])
    b1, b2 = np.array([1.0, 0.0]), np.array([0.0, 2.0])
    theta = np.array([1.0, -1.0])
    out, _ = round_sogm(theta, [QuadraticObjective(A1, b1), QuadraticObjective(A2, b2)], cfg("sogm"))
    # Abar = [[1.5, .5], [.5, 2]], gbar = Abar theta - bbar = (1, -1.5) - (.5, 1) = (.5, -2.5)
    # Abar^{-1} = (1/2.75) [[2, -.5], [-.5, 1.5]] -> step = (2.25, -4) / 2.75
    assert_allclose(out, theta - np.array([2.25, -4.0]) / 2.75, atol=1e-15)


def test_sogm_singular_raises():
    flat = QuadraticObjective(np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(NotPositiveDefinite):
        round_sogm(np.zeros(2), [flat], cfg("sogm"))
    out, _ = round_sogm(np.zeros(2), [flat], cfg("sogm", damping=1.0))
    assert_array_equal(out, np.zeros(2))


def test_local_newton_k1_direct(rng):
    clients = logistic_clients(d=5, n_clients=3, per_client=12)
    theta = rng.standard_normal(5) * 0.3
    out, _ = round_local_newton(theta, clients, cfg("local_newton", lr=0.8))
    direct = theta - 0.8 * sum(cholesky_solve(f.hessian(theta), f.gradient(theta)) for f in clients) / 3
    assert_allclose(out, direct, atol=1e-10)


def test_local_newton_single_client_is_sogm(rng):
    f = logistic_clients(d=4, n_clients=1, per_client=20)
    theta = rng.standard_normal(4)
    c = cfg("local_newton", damping=0.1)
    assert_allclose(round_local_newton(theta, f, c)[0], round_sogm(theta, f, c)[0], atol=1e-14)


def test_hessian_methods_reject_mlp():
    clients = mlp_clients()
    for step in (round_sogm, round_local_newton, round_fedpm, round_sogm_multi):
        with pytest.raises(ModelMismatch):
            step(np.zeros(clients[0].dim), clients, cfg("fedpm"))


# --- fedpm ------------------------------------------------------------------


def test_mixing_fixed_point(rng):
    for _ in range(50):
        d, n = rng.integers(1, 8), rng.integers(1, 6)
        precs = [random_spd(rng, d, floor=0.1) for _ in range(n)]
        th = rng.standard_normal(d)
        out = mix_preconditioned([th] * n, precs, 0.0)
        assert_allclose(out, th, atol=1e-12)


def test_mixing_equal_preconditioners_is_simple_average(rng):
    P = random_spd(rng, 4)
    thetas = [rng.standard_normal(4) for _ in range(3)]
    assert_allclose(mix_preconditioned(thetas, [P] * 3, 0.0), np.mean(thetas, axis=0), atol=1e-12)


def test_fedpm_k1_matches_ideal_newton(rng):
    clients = logistic_clients(d=8, n_clients=4, per_client=20)
    theta = rng.standard_normal(8) * 0.2
    out, _ = round_fedpm(theta, clients, cfg("fedpm"))
    H = sum(f.hessian(theta) for f in clients) / 4
    g = sum(f.gradient(theta) for f in clients) / 4
    assert_allclose(out, theta - np.linalg.solve(H, g), atol=1e-10)


def test_fedpm_quadratics_one_shot(rng):
    # local Newton lands on each local optimum; preconditioned mixing recovers the global one
    qs = quadratic_clients(rng, 4, 3)
    A = sum(q.A for q in qs) / 3
    b = sum(q.b for q in qs) / 3
    out, _ = round_fedpm(rng.standard_normal(4), qs, cfg("fedpm", local_steps=3))
    assert_allclose(out, np.linalg.solve(A, b), atol=1e-12)


def test_fedpm_last_preconditioner_semantics(rng):
    clients = logistic_clients(d=4, n_clients=2, per_client=15)
    theta = rng.standard_normal(4)
    ups = fedpm_client_uploads(theta, clients, cfg("fedpm", lr=0.5, local_steps=3), keep_trace=True)
    for f, up in zip(clients, ups):
        assert len(up.trace) == 3
        last_theta = up.trace[-1][0]
        assert_array_equal(up.precond, f.hessian(last_theta))
        assert not np.array_equal(up.theta, last_theta)


@pytest.mark.parametrize("k", [1, 2, 3, 5])
@pytest.mark.parametrize("rho", [0.0, 0.3])
def test_expansion_identity(rng, k, rho):
    for _ in range(5):
        d, n = int(rng.integers(2, 11)), int(rng.integers(1, 6))
        clients = quadratic_clients(rng, d, n) if rng.uniform() < 0.5 else logistic_clients(
            d=d, n_clients=n, per_client=8, lam=0.05, seed=int(rng.integers(1000)))
        theta = rng.standard_normal(d) * 0.5
        assert fedpm_expanded_check(theta, clients, cfg("fedpm", lr=0.7, local_steps=k, damping=rho)) <= 1e-9


def test_expansion_matches_round_at_zero_damping(rng):
    # at rho = 0 both numerator conventions coincide with the real round
    clients = logistic_clients(d=5, n_clients=3, per_client=10, lam=0.05)
    theta = rng.standard_normal(5) * 0.3
    c = cfg("fedpm", lr=0.6, local_steps=3)
    ups = fedpm_client_uploads(theta, clients, c)
    damped = mix_preconditioned([u.theta for u in ups], [u.precond for u in ups], 0.0, damp_numerator=True)
    assert_array_equal(round_fedpm(theta, clients, c)[0], damped)


# --- sogm_multi ---------------------------------------------------------------


def test_sogm_multi_k1_is_sogm(rng):
    clients = logistic_clients(d=6, n_clients=3, per_client=10)
    theta = rng.standard_normal(6) * 0.3
    for anchor in ("local", "global"):
        a, _ = round_sogm_multi(theta, clients, cfg("sogm_multi", lr=0.9, damping=0.2), anchor=anchor)
        b, _ = round_sogm(theta, clients, cfg("sogm", lr=0.9, damping=0.2))
        assert_allclose(a, b, atol=1e-10)


def test_sogm_multi_differs_from_fedpm_on_heterogeneous(rng):
    qs = quadratic_clients(rng, 3, 2)
    theta = rng.standard_normal(3)
    a, _ = round_fedpm(theta, qs, cfg("fedpm", local_steps=2))
    b, _ = round_sogm_multi(theta, qs, cfg("sogm_multi", local_steps=2))
    assert np.linalg.norm(a - b) > 1e-3


def test_sogm_multi_global_anchor_is_literal_formula(rng):
    clients = logistic_clients(d=4, n_clients=2, per_client=12)
    theta = rng.standard_normal(4) * 0.3
    c = cfg("sogm_multi", lr=0.5, local_steps=3)
    out, _ = round_sogm_multi(theta, clients, c, anchor="global")
    locals_ = []
    for f in clients:
        th = theta
        for _ in range(2):
            th = th - 0.5 * np.linalg.solve(f.hessian(th), f.gradient(th))
        locals_.append(th)
    P = sum(f.hessian(t) for f, t in zip(clients, locals_)) / 2
    g = sum(f.gradient(t) for f, t in zip(clients, locals_)) / 2
    assert_allclose(out, theta - 0.5 * np.linalg.solve(P, g), atol=1e-10)


def test_sogm_multi_bad_anchor():
    with pytest.raises(ValueError):
        round_sogm_multi(np.zeros(2), [QuadraticObjective(np.eye(2), np.zeros(2))], cfg("sogm_multi"), anchor="x")


def test_homogeneity_collapse():
    shard = logistic_clients(d=6, n_clients=1, per_client=40, lam=0.01)[0]
    clients = [LogisticL2Objective(shard.X, shard.y, shard.lam) for _ in range(4)]
    theta0 = np.full(6, 0.2)
    trajectories = {}
    for name, step in (("fedpm", round_fedpm), ("local_newton", round_local_newton),
                       ("sogm", round_sogm), ("sogm_multi", round_sogm_multi)):
        th, traj = theta0, []
        for t in range(10):
            th, _ = step(th, clients, cfg(name, lr=0.7), t=t)
            traj.append(th)
        trajectories[name] = np.array(traj)
    ref = trajectories["sogm"]
    for traj in trajectories.values():
        assert np.abs(traj - ref).max() <= 1e-9


def test_homogeneous_multi_step_fedpm_equals_sogm_multi():
    shard = logistic_clients(d=5, n_clients=1, per_client=30, lam=0.01)[0]
    clients = [shard, LogisticL2Objective(shard.X, shard.y, shard.lam)]
    theta = np.full(5, -0.1)
    a, _ = round_fedpm(theta, clients, cfg("fedpm", lr=0.8, local_steps=3))
    b, _ = round_sogm_multi(theta, clients, cfg("sogm_multi", lr=0.8, local_steps=3))
    assert_allclose(a, b, atol=1e-10)


# --- FOOF -------------------------------------------------------------------


def test_foof_mixing_by_hand():
    obj = MlpObjective((1, 1), np.zeros((1, 1)), np.zeros(1, dtype=int))
    A1 = np.array([[1.0, 0.0], [0.0, 2.0]])
    A2 = np.array([[2.0, 1.0], [1.0, 2.0]])
    stats = [FoofStats((A1,), 1), FoofStats((A2,), 1)]
    out = mix_foof([np.array([1.0, 0.0]), np.array([0.0, 1.0])], stats, obj, 0.0)
    # mean A = [[1.5, .5], [.5, 2]] (det 11/4), mean(A_i W_i) = ((1,0) + (1,2)) / 2 = (1, 1)
    # (4/11) [[2, -.5], [-.5, 1.5]] (1, 1) = (6/11, 4/11)
    assert_allclose(out, [6 / 11, 4 / 11], atol=1e-15)


def test_foof_mixing_fixed_point(rng):
    obj = mlp_clients(2)[0]
    th = rng.standard_normal(obj.dim)
    stats = [obj.foof_stats(rng.standard_normal(obj.dim)) for _ in range(3)]
    for rho in (0.0, 1.0):
        assert_allclose(mix_foof([th] * 3, stats, obj, rho), th, atol=1e-12)


def test_foof_identity_is_fedavg():
    clients = mlp_clients()
    theta = clients[0].init_params(1)
    ident = lambda o, th, idx: identity_stats(o)  # noqa: E731
    c = cfg("fedpm_foof", lr=0.3, batch_size=8, seed=2)
    for mode in ("per_step", "end_of_round"):
        a, _ = round_fedpm_foof(theta, clients, MethodConfig(**{**c.__dict__, "foof_mode": mode}), t=1,
                                state={}, stats_fn=ident)
        b, _ = round_fedavg(theta, clients, cfg("fedavg", lr=0.3, batch_size=8, seed=2), t=1)
        assert_allclose(a, b, atol=1e-10)


def test_foof_single_client_mixing_is_identity():
    clients = mlp_clients(1)
    theta = clients[0].init_params(0)
    c = cfg("fedpm_foof", lr=0.2, damping=0.5)
    up = client_foof_steps(clients[0], theta, c, cid=0, t=0)
    out, _ = round_fedpm_foof(theta, clients, c)
    assert_allclose(out, up.theta, atol=1e-12)


def test_foof_end_of_round_state():
    clients = mlp_clients(2)
    theta = clients[0].init_params(0)
    c = cfg("fedpm_foof", lr=0.2, foof_mode="end_of_round")
    state = {}
    round_fedpm_foof(theta, clients, c, t=0, state=state)
    assert sorted(state) == [0, 1]
    up = client_foof_steps(clients[0], theta, c, cid=0, t=0)
    # upload is the shard-wide matrix at the final local iterate
    expected = clients[0].foof_stats(up.theta)
    for A, B in zip(state[0].matrices, expected.matrices):
        assert_array_equal(A, B)


def test_foof_rejects_logistic():
    clients = logistic_clients(d=3, n_clients=2, per_client=5)
    with pytest.raises(ModelMismatch):
        round_fedpm_foof(np.zeros(3), clients, cfg("fedpm_foof"))


# --- determinism --------------------------------------------------------------


def test_permutation_invariance_bit_exact(rng):
    clients = logistic_clients(d=5, n_clients=4, per_client=10)
    theta = rng.standard_normal(5) * 0.2
    shuffled = {i: clients[i] for i in (2, 0, 3, 1)}
    for step, name in ((round_fedpm, "fedpm"), (round_sogm, "sogm"), (round_fedavg, "fedavg")):
        c = cfg(name, lr=0.5, local_steps=2, damping=0.1)
        assert_array_equal(step(theta, clients, c)[0], step(theta, shuffled, c)[0])


def test_executor_matches_sequential():
    lclients = logistic_clients(d=5, n_clients=4, per_client=10)
    mclients = mlp_clients(3)
    with ThreadPoolExecutor(max_workers=3) as pool:
        for step, name, clients in ((round_fedpm, "fedpm", lclients), (round_local_newton, "local_newton", lclients),
                                    (round_fedavg, "fedavg", mclients), (round_fedpm_foof, "fedpm_foof", mclients)):
            theta = mclients[0].init_params(3) if clients is mclients else np.full(5, 0.1)
            c = cfg(name, lr=0.3, local_steps=2, damping=0.5)
            assert_array_equal(step(theta, clients, c, t=4)[0], step(theta, clients, c, t=4, executor=pool)[0])


# --- communication ------------------------------------------------------------


@pytest.mark.parametrize("dims", [(10, 16, 3), (4, 3), (6, 8, 8, 2)])
def test_comm_cost_mlp_shapes(dims):
    obj = MlpObjective(dims, np.zeros((1, dims[0])), np.zeros(1, dtype=int))
    d = sum((a + 1) * b for a, b in zip(dims[:-1], dims[1:]))
    assert comm_cost("fedpm_foof", obj).floats_up == d + sum((a + 1) ** 2 for a in dims[:-1])
    assert comm_cost("fedavg", obj).floats_up == d
    assert comm_cost("fedpm_foof", obj).floats_down == d


@pytest.mark.parametrize("d", [1, 7, 30])
def test_comm_cost_full(d):
    q = QuadraticObjective(np.eye(d), np.zeros(d))
    assert comm_cost("fedpm", q).floats_up == d + d * d
    assert comm_cost("sogm", q).floats_up == d + d * d
    assert comm_cost("local_newton", q).floats_up == d
    assert comm_cost("fedavg", q).floats_up == d
    assert comm_cost("psgd", q).floats_up == d
    assert comm_cost("sogm_multi", q).floats_up == 2 * d + d * d


def test_upload_container_defaults():
    up = ClientUpload()
    assert up.theta is None and up.precond is None and up.trace == []
