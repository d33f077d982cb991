"""Experiment orchestration: oracle, convergence diagnostics, round loop, CSV."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import Dataset, Partition, load_libsvm, partition_dirichlet, partition_even, synth_classes, synth_logistic
from .errors import EmptyDataset, IncompatibleMethodModel, NumericalError
from .linalg import cholesky_solve, damp, frobenius_norm, spectral_norm
from .methods import HESSIAN_METHODS, ROUNDS, MethodConfig, round_fedpm_foof
from .objectives import LogisticL2Objective, MeanObjective, MlpObjective

CSV_HEADER = (
    "round", "loss_gap", "param_dist", "ratio", "lyapunov",
    "train_loss", "accuracy", "floats_up", "floats_down", "elapsed_ms",
)
CONSTANT_FLOOR = 1e-12
LOSS_NOISE = 1e-12


@dataclass(frozen=True)
class ConvexityConstants:
    mu: float
    l_star: float
    l_f: float


@dataclass(frozen=True)
class Condition1Report:
    holds: bool
    distance: float
    radius: float  # inf when both Lipschitz estimates are below CONSTANT_FLOOR
    hessian_gap: float  # max over clients of ||H_i(theta0) - H_i(theta*)||_F
    hessian_bound: float

    @property
    def distance_margin(self) -> float:
        return self.radius - self.distance

    @property
    def hessian_margin(self) -> float:
        return self.hessian_bound - self.hessian_gap


@dataclass
class RoundRecord:
    round: int
    loss_gap: float | None = None
    param_dist: float | None = None
    ratio: float | None = None
    lyapunov: float | None = None
    train_loss: float | None = None
    accuracy: float | None = None
    floats_up: int = 0
    floats_down: int = 0
    elapsed_ms: float | None = None


# --- oracle and diagnostics -------------------------------------------------


def newton_oracle(objective, iterations: int = 20, rho: float = 0.0, theta0=None) -> tuple[np.ndarray, float]:
    """Plain Newton from zero on the global objective; returns ``(theta*, ||grad||)``."""
    theta = np.zeros(objective.dim) if theta0 is None else np.array(theta0, dtype=np.float64)
    for _ in range(iterations):
        g = objective.gradient(theta)
        theta = theta - cholesky_solve(damp(objective.hessian(theta), rho), g)
    return theta, float(np.linalg.norm(objective.gradient(theta)))


def init_near_optimum(theta_star: np.ndarray, sigma: float = 0.1, seed: int = 0) -> np.ndarray:
    z = np.random.default_rng([seed, 0x1417]).standard_normal(np.shape(theta_star))
    return np.asarray(theta_star, dtype=np.float64) + sigma * z


def estimate_constants(
    objectives: Sequence,
    theta_star: np.ndarray,
    n_pairs: int = 50,
    radius: float = 1.0,
    seed: int = 0,
    mu: float | None = None,
) -> ConvexityConstants:
    """Sample Hessian-Lipschitz constants around ``theta_star``.

    ``mu`` defaults to the smallest L2 coefficient among the objectives (an
    analytic strong-convexity bound for logistic + L2); objectives without
    one fall back to the smallest Hessian eigenvalue at ``theta_star``.
    """
    theta_star = np.asarray(theta_star, dtype=np.float64)
    d = theta_star.size
    if mu is None:
        lams = [getattr(f, "lam", None) for f in objectives]
        if all(v is not None for v in lams):
            mu = min(lams)
        else:
            H = MeanObjective(objectives).hessian(theta_star)
            mu = float(np.linalg.eigvalsh(H)[0])
    rng = np.random.default_rng([seed, 0xC0])
    l_star = l_f = 0.0
    for p in range(n_pairs):
        a = theta_star + radius * _in_ball(rng, d)
        b = theta_star + radius * _in_ball(rng, d)
        dist = float(np.linalg.norm(a - b))
        if dist == 0.0:
            continue
        for f in objectives:
            D = f.hessian(a) - f.hessian(b)
            l_f = max(l_f, frobenius_norm(D) / dist)
            l_star = max(l_star, spectral_norm(D, seed=p) / dist)
    return ConvexityConstants(float(mu), l_star, l_f)


def _in_ball(rng, d: int) -> np.ndarray:
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    return v * rng.uniform() ** (1.0 / d)


def condition1_radius(c: ConvexityConstants) -> float:
    bounds = []
    if c.l_f >= CONSTANT_FLOOR:
        bounds.append(c.mu / (2.0 * math.sqrt(2.0) * c.l_f))
    if c.l_star >= CONSTANT_FLOOR:
        bounds.append(c.mu / (math.sqrt(2.0) * c.l_star))
    return min(bounds) if bounds else math.inf


def check_condition1(theta0, theta_star, constants: ConvexityConstants, objectives) -> Condition1Report:
    """Evaluate both initial-condition inequalities and their slack."""
    theta0 = np.asarray(theta0, dtype=np.float64)
    theta_star = np.asarray(theta_star, dtype=np.float64)
    distance = float(np.linalg.norm(theta0 - theta_star))
    radius = condition1_radius(constants)
    gap = max(frobenius_norm(f.hessian(theta0) - f.hessian(theta_star)) for f in objectives)
    bound = constants.mu / (2.0 * math.sqrt(2.0))
    return Condition1Report(distance <= radius and gap <= bound, distance, radius, gap, bound)


def lyapunov(theta, theta_star, objectives, l_f: float) -> float:
    """``(1/N) sum ||H_i(theta) - H_i(theta*)||_F^2 + 6 L_F^2 ||theta - theta*||^2``."""
    theta = np.asarray(theta, dtype=np.float64)
    theta_star = np.asarray(theta_star, dtype=np.float64)
    h = 0.0
    for f in objectives:
        h += frobenius_norm(f.hessian(theta) - f.hessian(theta_star)) ** 2
    h /= len(objectives)
    dist = float(np.linalg.norm(theta - theta_star))
    return h + 6.0 * l_f**2 * dist**2


def accuracy(objective, theta, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise EmptyDataset("accuracy of an empty dataset is undefined")
    pred = objective.predict(theta, dataset.X)
    if isinstance(objective, MlpObjective):
        truth = dataset.class_indices()
    else:
        truth = dataset.y
    return float(np.mean(pred == truth))


# --- experiment -------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    method: str
    model: str
    clients: int
    rounds: int
    lr: float
    layer_dims: tuple = ()
    data_source: str = "synthetic"
    data_d: int = 10
    data_n: int = 500
    data_separation: float = 1.0
    data_classes: int = 2
    data_dim_override: int | None = None
    partition: str = "even"
    partition_alpha: float = 1.0
    local_steps: int = 1
    local_epochs: int = 1
    batch_size: int = 32
    l2: float = 1e-3
    damping: float = 1.0
    foof_mode: str = "per_step"
    init_sigma: float = 0.1
    seed: int = 0
    seeds: tuple = ()
    out: str = "out"
    record_timing: bool = False
    oracle_iterations: int = 20

    def method_config(self, seed: int | None = None) -> MethodConfig:
        k = self.local_epochs if self.model == "mlp" else self.local_steps
        return MethodConfig(
            method=self.method,
            lr=self.lr,
            local_steps=k,
            damping=self.damping,
            foof_mode=self.foof_mode,
            batch_size=self.batch_size,
            seed=self.seed if seed is None else seed,
        )

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, seeds=())


def check_compatibility(method: str, model: str) -> None:
    if model not in ("logistic", "mlp"):
        raise IncompatibleMethodModel(f"unknown model {model!r}")
    if method in HESSIAN_METHODS and model != "logistic":
        raise IncompatibleMethodModel(f"method {method} needs a full-Hessian model (logistic)")
    if method == "fedpm_foof" and model != "mlp":
        raise IncompatibleMethodModel("method fedpm_foof needs model = mlp")


@dataclass
class Problem:
    """Everything a run needs, built deterministically from a config."""

    dataset: Dataset
    partition: Partition
    clients: list
    global_objective: object
    theta0: np.ndarray
    theta_star: np.ndarray | None = None
    oracle_grad_norm: float | None = None
    constants: ConvexityConstants | None = None
    condition1: Condition1Report | None = None
    extras: dict = field(default_factory=dict)


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.data_source == "synthetic":
        if cfg.model == "mlp" or cfg.data_classes > 2:
            return synth_classes(cfg.data_d, cfg.data_n, cfg.data_classes, cfg.data_separation, cfg.seed)
        return synth_logistic(cfg.data_d, cfg.data_n, cfg.data_separation, cfg.seed)
    return load_libsvm(cfg.data_source, dim=cfg.data_dim_override, binary=cfg.model == "logistic")


def build_problem(cfg: ExperimentConfig, with_constants: bool = True) -> Problem:
    check_compatibility(cfg.method, cfg.model)
    ds = load_dataset(cfg)
    if cfg.partition == "even":
        part = partition_even(ds, cfg.clients)
    else:
        part = partition_dirichlet(ds, cfg.clients, cfg.partition_alpha, cfg.seed)

    if cfg.model == "logistic":
        clients = [LogisticL2Objective(ds.X[s], ds.y[s], cfg.l2, dim=ds.d) for s in part.shards]
        glob = MeanObjective(clients)
        theta_star, gnorm = newton_oracle(glob, cfg.oracle_iterations)
        theta0 = init_near_optimum(theta_star, cfg.init_sigma, cfg.seed)
        prob = Problem(ds, part, clients, glob, theta0, theta_star, gnorm)
        if with_constants:
            radius = max(float(np.linalg.norm(theta0 - theta_star)), 1e-6)
            prob.constants = estimate_constants(clients, theta_star, radius=radius, seed=cfg.seed)
            prob.condition1 = check_condition1(theta0, theta_star, prob.constants, clients)
        return prob

    dims = tuple(cfg.layer_dims)
    if dims[0] != ds.d:
        raise IncompatibleMethodModel(f"layer_dims start with {dims[0]} but data has d = {ds.d}")
    labels = ds.class_indices()
    clients = [MlpObjective(dims, ds.X[s], labels[s], cfg.l2) for s in part.shards]
    pooled = MlpObjective(dims, ds.X, labels, cfg.l2)
    theta0 = pooled.init_params(cfg.seed)
    return Problem(ds, part, clients, pooled, theta0)


def run_experiment(cfg: ExperimentConfig, problem: Problem | None = None, executor=None) -> list[RoundRecord]:
    """Run ``cfg.rounds`` rounds and return one record per state.

    Record ``t`` describes ``theta^(t)``; record 0 is the initial point and
    carries no communication.  ``rounds = 0`` yields no records.
    """
    if cfg.rounds == 0:
        return []
    prob = problem or build_problem(cfg)
    mcfg = cfg.method_config()
    step = ROUNDS[cfg.method]
    extra = {"state": {}} if step is round_fedpm_foof else {}
    theta = prob.theta0
    f_star = prob.global_objective.value(prob.theta_star) if prob.theta_star is not None else None
    l_f = prob.constants.l_f if prob.constants is not None else None

    records = [_record(0, theta, prob, f_star, l_f, None)]
    for t in range(cfg.rounds):
        start = time.perf_counter()
        try:
            theta, cost = step(theta, prob.clients, mcfg, t=t, executor=executor, **extra)
        except NumericalError as exc:
            exc.round_index = t
            raise
        elapsed = (time.perf_counter() - start) * 1e3 if cfg.record_timing else None
        if not np.all(np.isfinite(theta)):
            err = NumericalError(f"non-finite parameters after round {t}")
            err.round_index = t
            raise err
        rec = _record(t + 1, theta, prob, f_star, l_f, records[-1].param_dist)
        rec.floats_up, rec.floats_down, rec.elapsed_ms = cost.floats_up, cost.floats_down, elapsed
        records.append(rec)
    prob.extras["theta_final"] = theta
    return records


def _record(t, theta, prob: Problem, f_star, l_f, prev_dist) -> RoundRecord:
    glob = prob.global_objective
    rec = RoundRecord(round=t)
    rec.train_loss = glob.value(theta)
    rec.accuracy = accuracy(glob, theta, prob.dataset)
    if prob.theta_star is not None:
        gap = rec.train_loss - f_star
        # float noise just below the optimum is reported as zero
        rec.loss_gap = 0.0 if -LOSS_NOISE <= gap < 0.0 else gap
        rec.param_dist = float(np.linalg.norm(theta - prob.theta_star))
        if prev_dist is not None and prev_dist > 0.0:
            rec.ratio = rec.param_dist / prev_dist
        if l_f is not None:
            rec.lyapunov = lyapunov(theta, prob.theta_star, prob.clients, l_f)
    return rec


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def records_to_csv(records: Sequence[RoundRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow([_fmt(getattr(r, k)) for k in CSV_HEADER])
    return buf.getvalue()


def read_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))
