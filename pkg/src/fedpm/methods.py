"""Round transitions for every federated method.

Each ``round_*`` function takes the global parameter, the client
objectives and a :class:`MethodConfig`, runs the client-side work, mixes
the uploads on the server and returns ``(theta_next, CommCost)``.

``clients`` is either a sequence (client id = position) or a mapping from
client id to objective.  Uploads are always mixed in ascending client-id
order, so relabelling clients consistently does not change any result.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ModelMismatch
from .linalg import cholesky_solve, damp, matrix_mean
from .objectives import FoofStats, MlpObjective, has_hessian, unvec_layout, vec_layout

METHODS = ("psgd", "fedavg", "sogm", "local_newton", "fedpm", "fedpm_foof", "sogm_multi")
HESSIAN_METHODS = ("sogm", "local_newton", "fedpm", "sogm_multi")
FOOF_MODES = ("per_step", "end_of_round")


@dataclass(frozen=True)
class MethodConfig:
    method: str
    lr: float
    local_steps: int = 1
    damping: float = 0.0
    foof_mode: str = "per_step"
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.local_steps < 1:
            raise ValueError("local_steps must be >= 1")
        if self.damping < 0:
            raise ValueError("damping must be nonnegative")
        if self.foof_mode not in FOOF_MODES:
            raise ValueError(f"unknown foof_mode {self.foof_mode!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class ClientUpload:
    """What one client sends to the server after its local work."""

    theta: np.ndarray | None = None
    precond: np.ndarray | tuple | None = None
    grad: np.ndarray | None = None
    # (theta_k, P_k, g_k) for every local Newton step; kept only on request
    trace: list = field(default_factory=list, repr=False)


@dataclass(frozen=True)
class CommCost:
    floats_up: int
    floats_down: int


def comm_cost(method: str, obj) -> CommCost:
    """Per-client, per-round float counts for ``method`` on ``obj``'s shape."""
    d = obj.dim
    if method in ("psgd", "fedavg", "local_newton"):
        up = d
    elif method in ("sogm", "fedpm"):
        up = d + d * d
    elif method == "sogm_multi":
        up = 2 * d + d * d
    elif method == "fedpm_foof":
        up = d + sum(n * n for n in obj.foof_sizes)
    else:
        raise ValueError(f"unknown method {method!r}")
    return CommCost(up, d)


# --- plumbing ---------------------------------------------------------------


def ordered_clients(clients) -> list[tuple[int, object]]:
    if isinstance(clients, Mapping):
        return sorted(clients.items(), key=lambda kv: kv[0])
    return list(enumerate(clients))


def _run(work: Callable, items, executor=None) -> list:
    if executor is None:
        return [work(cid, obj) for cid, obj in items]
    futures = [executor.submit(work, cid, obj) for cid, obj in items]
    return [f.result() for f in futures]


def _require_hessian(items):
    for cid, obj in items:
        if not has_hessian(obj):
            raise ModelMismatch(f"client {cid}: method needs a full-Hessian objective")


def _batches(obj: MlpObjective, cfg: MethodConfig, cid: int, t: int, epochs: int):
    rng = np.random.default_rng([cfg.seed, cid, t])
    n = obj.n_samples
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            yield perm[start:start + cfg.batch_size]


def newton_direction(obj, theta: np.ndarray, rho: float):
    """Return ``(solve(P + rho I, g), P, g)`` at ``theta`` with undamped ``P``."""
    g = obj.gradient(theta)
    P = obj.hessian(theta)
    return cholesky_solve(damp(P, rho), g), P, g


def mix_simple(thetas: Sequence[np.ndarray]) -> np.ndarray:
    return matrix_mean(thetas)


def mix_preconditioned(
    thetas: Sequence[np.ndarray],
    precs: Sequence[np.ndarray],
    rho: float,
    damp_numerator: bool = False,
) -> np.ndarray:
    """Server step ``(1/N) sum (P + rho I)^{-1} P_i theta_i`` with ``P = mean(P_i)``.

    The numerator matrices are the undamped ``P_i`` unless ``damp_numerator``
    is set, in which case ``P_i + rho I`` is used on both sides.
    """
    P = damp(matrix_mean(precs), rho)
    if damp_numerator:
        weighted = [damp(Pi, rho) @ th for Pi, th in zip(precs, thetas)]
    else:
        weighted = [Pi @ th for Pi, th in zip(precs, thetas)]
    return cholesky_solve(P, matrix_mean(weighted))


def mix_foof(
    thetas: Sequence[np.ndarray],
    stats: Sequence[FoofStats],
    obj: MlpObjective,
    rho: float,
) -> np.ndarray:
    """Per-layer preconditioned mixing with the FOOF matrices."""
    out = []
    for l, s in enumerate(obj.layout):
        As = [st.matrices[l] for st in stats]
        Ws = [unvec_layout(th[s.start:s.stop], s.n_in, s.n_out) for th in thetas]
        rhs = matrix_mean([damp(A, rho) @ W for A, W in zip(As, Ws)])
        out.append(vec_layout(cholesky_solve(damp(matrix_mean(As), rho), rhs)))
    return np.concatenate(out)


# --- client-side work -------------------------------------------------------


def client_gradient_steps(obj, theta, cfg: MethodConfig, cid: int = 0, t: int = 0) -> np.ndarray:
    """FedAvg local work: K full-gradient steps, or K epochs of mini-batch SGD on an MLP."""
    th = np.array(theta, dtype=np.float64)
    if isinstance(obj, MlpObjective):
        for idx in _batches(obj, cfg, cid, t, cfg.local_steps):
            th = th - cfg.lr * obj.loss_and_gradient(th, idx)[1]
    else:
        for _ in range(cfg.local_steps):
            th = th - cfg.lr * obj.gradient(th)
    return th


def client_newton_steps(obj, theta, cfg: MethodConfig, steps: int, keep_trace: bool = False) -> ClientUpload:
    """Run ``steps`` damped Newton steps; report the last Hessian and gradient used."""
    th = np.array(theta, dtype=np.float64)
    up = ClientUpload()
    for _ in range(steps):
        direction, P, g = newton_direction(obj, th, cfg.damping)
        if keep_trace:
            up.trace.append((th, P, g))
        up.precond, up.grad = P, g
        th = th - cfg.lr * direction
    up.theta = th
    return up


def identity_stats(obj: MlpObjective) -> FoofStats:
    return FoofStats(tuple(np.eye(n) for n in obj.foof_sizes), 0)


def _foof_step(obj: MlpObjective, th, g, stats: FoofStats, cfg: MethodConfig) -> np.ndarray:
    new = th.copy()
    for l, s in enumerate(obj.layout):
        G = unvec_layout(g[s.start:s.stop], s.n_in, s.n_out)
        step = cholesky_solve(damp(stats.matrices[l], cfg.damping), G)
        new[s.start:s.stop] = th[s.start:s.stop] - cfg.lr * vec_layout(step)
    return new


StatsFn = Callable[[MlpObjective, np.ndarray, "np.ndarray | None"], FoofStats]


def client_foof_steps(
    obj: MlpObjective,
    theta,
    cfg: MethodConfig,
    cid: int = 0,
    t: int = 0,
    state: dict | None = None,
    stats_fn: StatsFn | None = None,
) -> ClientUpload:
    """Local FOOF-preconditioned SGD for ``local_steps`` epochs.

    ``per_step`` recomputes the layer matrices on every mini-batch and
    uploads those of the last step.  ``end_of_round`` preconditions all
    local steps with the matrices this client uploaded last round (identity
    in round 0), then recomputes them on the whole shard at the final local
    iterate for upload.  ``stats_fn`` overrides how matrices are computed.
    """
    if stats_fn is None:
        stats_fn = lambda o, th, idx: o.foof_stats(th, idx)  # noqa: E731
    th = np.array(theta, dtype=np.float64)
    stale = None
    if cfg.foof_mode == "end_of_round":
        stale = (state or {}).get(cid) or identity_stats(obj)
    last = None
    for idx in _batches(obj, cfg, cid, t, cfg.local_steps):
        g = obj.loss_and_gradient(th, idx)[1]
        if stale is None:
            last = stats_fn(obj, th, idx)
            th = _foof_step(obj, th, g, last, cfg)
        else:
            th = _foof_step(obj, th, g, stale, cfg)
    if stale is not None:
        last = stats_fn(obj, th, None)
        if state is not None:
            state[cid] = last
    return ClientUpload(theta=th, precond=last)


# --- rounds -----------------------------------------------------------------


def round_psgd(theta, clients, cfg: MethodConfig, t: int = 0, executor=None):
    """Gradient mixing: ``theta - (lr/N) sum g_i``.

    Evaluated as ``(1/N) sum (theta - lr g_i)``, the same expression the
    one-step FedAvg client computes, so the two agree bit for bit.
    """
    items = ordered_clients(clients)
    theta = np.asarray(theta, dtype=np.float64)
    grads = _run(lambda cid, obj: obj.gradient(theta), items, executor)
    theta_next = matrix_mean([theta - cfg.lr * g for g in grads])
    return theta_next, comm_cost("psgd", items[0][1])


def round_fedavg(theta, clients, cfg: MethodConfig, t: int = 0, executor=None):
    items = ordered_clients(clients)
    thetas = _run(lambda cid, obj: client_gradient_steps(obj, theta, cfg, cid, t), items, executor)
    return mix_simple(thetas), comm_cost("fedavg", items[0][1])


def round_sogm(theta, clients, cfg: MethodConfig, t: int = 0, executor=None):
    items = ordered_clients(clients)
    _require_hessian(items)
    theta = np.asarray(theta, dtype=np.float64)
    ups = _run(lambda cid, obj: (obj.gradient(theta), obj.hessian(theta)), items, executor)
    g = matrix_mean([u[0] for u in ups])
    P = matrix_mean([u[1] for u in ups])
    theta_next = theta - cfg.lr * cholesky_solve(damp(P, cfg.damping), g)
    return theta_next, comm_cost("sogm", items[0][1])


def round_local_newton(theta, clients, cfg: MethodConfig, t: int = 0, executor=None):
    items = ordered_clients(clients)
    _require_hessian(items)
    ups = _run(lambda cid, obj: client_newton_steps(obj, theta, cfg, cfg.local_steps), items, executor)
    return mix_simple([u.theta for u in ups]), comm_cost("local_newton", items[0][1])


def fedpm_client_uploads(theta, clients, cfg: MethodConfig, keep_trace: bool = False, executor=None):
    items = ordered_clients(clients)
    _require_hessian(items)
    return _run(
        lambda cid, obj: client_newton_steps(obj, theta, cfg, cfg.local_steps, keep_trace),
        items,
        executor,
    )


def round_fedpm(theta, clients, cfg: MethodConfig, t: int = 0, executor=None):
    """Local damped Newton steps followed by preconditioned mixing."""
    items = ordered_clients(clients)
    ups = fedpm_client_uploads(theta, clients, cfg, executor=executor)
    theta_next = mix_preconditioned([u.theta for u in ups], [u.precond for u in ups], cfg.damping)
    return theta_next, comm_cost("fedpm", items[0][1])


def round_fedpm_foof(
    theta,
    clients,
    cfg: MethodConfig,
    t: int = 0,
    executor=None,
    state: dict | None = None,
    stats_fn: StatsFn | None = None,
):
    """FOOF-approximated FedPM on an MLP.

    ``state`` carries each client's last uploaded matrices between rounds
    and is only consulted in ``end_of_round`` mode.
    """
    items = ordered_clients(clients)
    for cid, obj in items:
        if not isinstance(obj, MlpObjective):
            raise ModelMismatch(f"client {cid}: fedpm_foof needs an MlpObjective")
    ups = _run(
        lambda cid, obj: client_foof_steps(obj, theta, cfg, cid, t, state, stats_fn),
        items,
        executor,
    )
    obj0 = items[0][1]
    theta_next = mix_foof([u.theta for u in ups], [u.precond for u in ups], obj0, cfg.damping)
    return theta_next, comm_cost("fedpm_foof", obj0)


def round_sogm_multi(theta, clients, cfg: MethodConfig, t: int = 0, executor=None, anchor: str = "local"):
    """K-1 local Newton steps, then one SOGM step with the mixed local curvature.

    With ``anchor="local"`` the server step starts from the simple mean of
    the clients' (K-1)-th iterates; ``anchor="global"`` starts from the
    broadcast ``theta``.  Both reduce to :func:`round_sogm` at K = 1.
    """
    if anchor not in ("local", "global"):
        raise ValueError(f"unknown anchor {anchor!r}")
    items = ordered_clients(clients)
    _require_hessian(items)
    theta = np.asarray(theta, dtype=np.float64)

    def work(cid, obj):
        up = client_newton_steps(obj, theta, cfg, cfg.local_steps - 1)
        up.grad = obj.gradient(up.theta)
        up.precond = obj.hessian(up.theta)
        return up

    ups = _run(work, items, executor)
    P = damp(matrix_mean([u.precond for u in ups]), cfg.damping)
    g = matrix_mean([u.grad for u in ups])
    base = mix_simple([u.theta for u in ups]) if anchor == "local" else theta
    theta_next = base - cfg.lr * cholesky_solve(P, g)
    return theta_next, comm_cost("sogm_multi", items[0][1])


ROUNDS = {
    "psgd": round_psgd,
    "fedavg": round_fedavg,
    "sogm": round_sogm,
    "local_newton": round_local_newton,
    "fedpm": round_fedpm,
    "fedpm_foof": round_fedpm_foof,
    "sogm_multi": round_sogm_multi,
}


def fedpm_expanded_check(theta, clients, cfg: MethodConfig) -> float:
    """Distance between FedPM's mixed iterate and its expanded form.

    The expanded form is
    ``theta - (lr/N) sum_i P^{-1} P_i^{K-1} sum_k (P_i^k)^{-1} grad f_i(theta_i^k)``
    evaluated from the recorded local trajectory.  Every ``P`` on both sides
    is the damped matrix, so the identity holds for any damping; at
    ``damping = 0`` the mixed side is exactly :func:`round_fedpm`.
    """
    theta = np.asarray(theta, dtype=np.float64)
    rho = cfg.damping
    ups = fedpm_client_uploads(theta, clients, cfg, keep_trace=True)
    mixed = mix_preconditioned([u.theta for u in ups], [u.precond for u in ups], rho, damp_numerator=True)

    P = damp(matrix_mean([u.precond for u in ups]), rho)
    total = np.zeros_like(theta)
    for u in ups:
        local_sum = np.zeros_like(theta)
        for _, Pk, gk in u.trace:
            local_sum = local_sum + cholesky_solve(damp(Pk, rho), gk)
        total = total + cholesky_solve(P, damp(u.precond, rho) @ local_sum)
    expanded = theta - cfg.lr * total / len(ups)
    return float(np.linalg.norm(expanded - mixed))
