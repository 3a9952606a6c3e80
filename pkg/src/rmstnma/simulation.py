"""Simulation study: AFT data generation, true estimands, bias/MSE/coverage.

Survival times follow a log-normal AFT model with arm-specific location,
arm-by-covariate shift and arm-specific scale,

    log T = alpha*_jk + x beta*_k + sigma_k eps,   alpha*_jk ~ N(alpha*_k, tau^2),

with ``x ~ Bernoulli(0.5)``, ``eps ~ N(0, 1)`` and independent censoring
``C ~ Exp(rate)``. Replication ``r`` of a cell with base seed ``s`` draws from
``Generator(Philox(SeedSequence([s, r])))``, so any replication can be rerun
on its own.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import integrate, stats

from .dataset import Dataset
from .errors import RmstNmaError
from .pipeline import Z95, Method, fit_npf, fit_one_stage, fit_two_stage

logger = logging.getLogger(__name__)

ARMS = ("A", "B", "C")


@dataclass(frozen=True)
class GeneratorParams:
    alpha_star: tuple = (0.5, 1.5, 1.0)
    beta_star: tuple = (0.3, 0.5, 0.7)
    sigma: tuple = (1.0, 1.5, 2.0)
    tau: float = 0.0
    censor_rate: float = 0.15
    t_star: float = 4.0
    covariate_p: float = 0.5

    def __post_init__(self):
        if min(self.sigma) <= 0:
            raise ValueError("sigma must be positive")
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")
        if self.censor_rate <= 0:
            raise ValueError("censor_rate must be positive")


class Scenario(str, enum.Enum):
    S1 = "S1"
    S2 = "S2"
    S3 = "S3"


class Network(str, enum.Enum):
    N1 = "N1"
    N2 = "N2"
    N3 = "N3"


# trial counts per arm subset: (ABC, AB, AC, BC)
_NETWORK_COUNTS = {
    Network.N1: (14, 2, 2, 2),
    Network.N2: (8, 4, 4, 4),
    Network.N3: (0, 7, 7, 6),
}
_SUBSETS = ((0, 1, 2), (0, 1), (0, 2), (1, 2))


def build_network(network: Network | str) -> list[tuple[int, ...]]:
    """Arm subsets (0=A, 1=B, 2=C) of the 20 trials in a Scenario 3 network."""
    counts = _NETWORK_COUNTS[Network(network)]
    return [arms for arms, count in zip(_SUBSETS, counts) for _ in range(count)]


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: Scenario = Scenario.S1
    nt: int = 20
    n: int | None = 500  # None: per-trial size drawn from U{300..700}
    network: Network | None = None
    tau: float = 0.1
    replications: int = 200
    base_seed: int = 2024
    t_star: float = 4.0
    n_range: tuple = (300, 700)

    def __post_init__(self):
        object.__setattr__(self, "scenario", Scenario(self.scenario))
        if self.network is not None:
            object.__setattr__(self, "network", Network(self.network))
        if self.scenario is Scenario.S3:
            if self.network is None:
                raise RmstNmaError("scenario S3 requires a network (N1, N2 or N3)")
            if self.nt != 20:
                raise RmstNmaError("scenario S3 networks have exactly 20 trials")
        elif self.network is not None:
            raise RmstNmaError(f"network is only valid for scenario S3, not {self.scenario.value}")
        if self.nt < 2:
            raise RmstNmaError("need at least 2 trials")
        if self.n is not None and self.n < 3:
            raise RmstNmaError("trial size must be at least the number of arms")
        if self.replications < 1:
            raise RmstNmaError("replications must be positive")

    @classmethod
    def for_scenario(cls, scenario, **overrides) -> "ScenarioConfig":
        """Config with the scenario's fixed factors filled in."""
        scenario = Scenario(scenario)
        base = {
            Scenario.S1: {"nt": 20, "n": 500},
            Scenario.S2: {"nt": 20, "n": 500},
            Scenario.S3: {"nt": 20, "n": None, "network": Network.N1},
        }[scenario]
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(scenario=scenario, **base)

    def trial_arms(self) -> list[tuple[int, ...]]:
        if self.scenario is Scenario.S3:
            return build_network(self.network)
        return [(0, 1, 2)] * self.nt

    def params(self) -> GeneratorParams:
        return GeneratorParams(tau=self.tau, t_star=self.t_star)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scenario"] = self.scenario.value
        d["network"] = self.network.value if self.network is not None else None
        d["n_range"] = list(self.n_range)
        return d


def replication_rng(base_seed: int, replication: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(base_seed), int(replication)])))


def generate_trial(params: GeneratorParams, arms: Sequence[int], n: int, rng: np.random.Generator,
                   arm_effects: np.ndarray | None = None):
    """One trial with equal allocation across ``arms``.

    Returns ``(treatment, time, event, x)``. ``arm_effects`` are the trial's
    log-time intercepts per arm; drawn from ``N(alpha*, tau^2)`` when omitted.
    """
    arms = list(arms)
    if not arms:
        raise ValueError("a trial needs at least one arm")
    if n < len(arms):
        raise ValueError("n must be at least the number of arms")
    alpha = np.asarray(params.alpha_star, dtype=float)
    if arm_effects is None:
        arm_effects = alpha + params.tau * rng.standard_normal(alpha.size)
    treatment = rng.permutation(np.resize(np.asarray(arms), n))
    x = (rng.random(n) < params.covariate_p).astype(float)
    eps = rng.standard_normal(n)
    beta = np.asarray(params.beta_star, dtype=float)
    sigma = np.asarray(params.sigma, dtype=float)
    log_t = arm_effects[treatment] + x * beta[treatment] + sigma[treatment] * eps
    t = np.exp(log_t)
    c = rng.exponential(1.0 / params.censor_rate, n)
    return treatment, np.minimum(t, c), (t <= c).astype(int), x


def generate_dataset(config: ScenarioConfig, replication: int) -> Dataset:
    """The full NMA dataset for one replication of a scenario cell."""
    rng = replication_rng(config.base_seed, replication)
    params = config.params()
    parts = []
    for j, arms in enumerate(config.trial_arms()):
        n = config.n if config.n is not None else int(rng.integers(config.n_range[0], config.n_range[1] + 1))
        treatment, u, e, x = generate_trial(params, arms, n, rng)
        parts.append((np.full(n, j + 1), treatment, u, e, x))
    study, treatment, u, e, x = (np.concatenate(c) for c in zip(*parts))
    return Dataset(study, treatment, u, e, x[:, None], list(ARMS), ["x"])


def true_log_rmst(params: GeneratorParams, treatment: int, x: float, method: str = "quadrature",
                  n_mc: int = 2_000_000, seed: int = 20240101) -> float:
    """True log-RMST at ``t_star`` for the tau = 0 model.

    ``"quadrature"`` integrates ``1 - Phi((log t - mu)/sigma)`` over
    ``[0, t_star]``; ``"montecarlo"`` averages ``min(T, t_star)`` over
    ``n_mc`` draws.
    """
    mu = params.alpha_star[treatment] + params.beta_star[treatment] * x
    sigma = params.sigma[treatment]
    t_star = params.t_star
    if method == "quadrature":
        area, _ = integrate.quad(
            lambda t: stats.norm.sf((math.log(t) - mu) / sigma) if t > 0 else 1.0,
            0.0, t_star, points=[min(math.exp(mu), t_star / 2)], epsabs=1e-12, epsrel=1e-12, limit=200,
        )
        return math.log(area)
    if method == "montecarlo":
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, treatment, int(x)])))
        total, done = 0.0, 0
        while done < n_mc:
            k = min(1_000_000, n_mc - done)
            total += np.minimum(np.exp(mu + sigma * rng.standard_normal(k)), t_star).sum()
            done += k
        return math.log(total / n_mc)
    raise ValueError(f"unknown method {method!r}")


def true_estimands(params: GeneratorParams, method: str = "quadrature") -> np.ndarray:
    """3 x 2 matrix of true log-RMSTs (treatment by subgroup x = 0, 1)."""
    return np.array([[true_log_rmst(params, k, x, method) for x in (0, 1)] for k in range(3)])


Estimator = Callable[[Dataset, float], object]

DEFAULT_ESTIMATORS: dict[str, Estimator] = {
    Method.TWO_STAGE.value: lambda d, t: fit_two_stage(d, t),
    Method.ONE_STAGE.value: lambda d, t: fit_one_stage(d, t),
    Method.NPF.value: lambda d, t: fit_npf(d, t),
}


@dataclass(frozen=True)
class ReplicationResult:
    replication: int
    method: str
    ok: bool
    converged: bool = False
    estimates: tuple = ()  # ((treatment, x, estimate, se), ...)
    error: str = ""


def run_replication(config: ScenarioConfig, replication: int, estimators: Mapping[str, Estimator]):
    """Generate one dataset and fit every estimator on it."""
    data = generate_dataset(config, replication)
    out = []
    for name, estimator in estimators.items():
        try:
            fit = estimator(data, config.t_star)
            est = []
            for k in range(3):
                for x in (0, 1):
                    point, se = fit.predict(k, [x])
                    est.append((k, x, point, se))
            out.append(ReplicationResult(replication, name, True, bool(getattr(fit, "converged", True)), tuple(est)))
        except (RmstNmaError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            out.append(ReplicationResult(replication, name, False, error=f"{type(exc).__name__}: {exc}"))
    return out


def _run_chunk(args):
    config, reps, names = args
    estimators = {n: DEFAULT_ESTIMATORS[n] for n in names}
    return [r for rep in reps for r in run_replication(config, rep, estimators)]


METRIC_FIELDS = [
    "scenario", "nt", "n", "network", "tau", "method", "treatment", "x", "truth",
    "replications", "failures", "nonconverged", "mean_estimate", "bias", "variance", "mse",
    "coverage", "mean_se", "valid",
]


@dataclass
class MetricsTable:
    rows: list[dict]
    config: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    def row(self, method: str, treatment: str, x: int) -> dict:
        for r in self.rows:
            if r["method"] == method and r["treatment"] == treatment and r["x"] == x:
                return r
        raise KeyError((method, treatment, x))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: _fmt(r[k]) for k in METRIC_FIELDS})
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8", newline="")
        return text

    def to_json(self, path=None) -> str:
        text = json.dumps({"config": self.config, "rows": self.rows, "failures": self.failures},
                          indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8", newline="")
        return text

    @classmethod
    def from_csv(cls, path) -> "MetricsTable":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [{k: _parse(k, v) for k, v in r.items()} for r in csv.DictReader(fh)]
        return cls(rows)


_INT_FIELDS = {"nt", "x", "replications", "failures", "nonconverged"}
_FLOAT_FIELDS = {"tau", "truth", "mean_estimate", "bias", "variance", "mse", "coverage", "mean_se"}


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def _parse(key, v):
    if v == "":
        return None
    if key in _INT_FIELDS:
        return int(v)
    if key in _FLOAT_FIELDS:
        return float(v)
    if key == "valid":
        return v == "true"
    if key == "n":
        return int(v) if v.isdigit() else v
    return v


def aggregate(config: ScenarioConfig, results: Sequence[ReplicationResult], methods: Sequence[str],
              truths: np.ndarray, max_failure_rate: float = 0.2) -> MetricsTable:
    """Bias, MSE and 95% coverage per (method, treatment, subgroup)."""
    results = sorted(results, key=lambda r: (r.method, r.replication))
    rows, failures = [], {}
    for method in methods:
        mine = [r for r in results if r.method == method]
        good = [r for r in mine if r.ok]
        failures[method] = {str(r.replication): r.error for r in mine if not r.ok}
        n_fail = len(mine) - len(good)
        valid = n_fail <= max_failure_rate * max(len(mine), 1)
        for k in range(3):
            for x in (0, 1):
                truth = float(truths[k, x])
                pairs = [(p, s) for r in good for (kk, xx, p, s) in r.estimates if kk == k and xx == x]
                est = np.array([p for p, _ in pairs], dtype=float)
                se = np.array([s for _, s in pairs], dtype=float)
                if est.size:
                    err = est - truth
                    cover = np.abs(err) <= Z95 * se
                    stats_ = {
                        "mean_estimate": float(est.mean()),
                        "bias": float(err.mean()),
                        "variance": float(est.var()),
                        "mse": float(np.mean(err**2)),
                        "coverage": float(cover.mean()),
                        "mean_se": float(se.mean()),
                    }
                else:
                    stats_ = dict.fromkeys(("mean_estimate", "bias", "variance", "mse", "coverage", "mean_se"))
                rows.append({
                    "scenario": config.scenario.value,
                    "nt": config.nt,
                    "n": config.n if config.n is not None else f"U{config.n_range[0]}-{config.n_range[1]}",
                    "network": config.network.value if config.network is not None else None,
                    "tau": float(config.tau),
                    "method": method,
                    "treatment": ARMS[k],
                    "x": x,
                    "truth": truth,
                    "replications": len(good),
                    "failures": n_fail,
                    "nonconverged": sum(1 for r in good if not r.converged),
                    **stats_,
                    "valid": bool(valid and est.size > 0),
                })
    return MetricsTable(rows, config.to_dict() | {"methods": list(methods)}, failures)


def _default_workers():
    env = os.environ.get("RMST_NMA_THREADS")
    return max(1, int(env)) if env else 1


def run_scenario(
    config: ScenarioConfig,
    methods: Sequence[str] | Mapping[str, Estimator] = (Method.TWO_STAGE.value,),
    workers: int | None = None,
    progress: Callable[[int, int], None] | None = None,
    truths: np.ndarray | None = None,
) -> MetricsTable:
    """Run every replication of a cell and aggregate the metrics.

    ``methods`` is a list of built-in method names or a mapping from name to
    an estimator ``f(dataset, t_star)`` returning an object with
    ``predict(treatment_code, [x]) -> (log_rmst, se)``. Custom estimators
    always run in-process.
    """
    if isinstance(methods, Mapping):
        estimators = dict(methods)
    else:
        unknown = [m for m in methods if m not in DEFAULT_ESTIMATORS]
        if unknown:
            raise RmstNmaError(f"unknown methods: {unknown}")
        estimators = {m: DEFAULT_ESTIMATORS[m] for m in methods}
    names = list(estimators)
    if truths is None:
        truths = true_estimands(replace(config.params(), tau=0.0))
    workers = _default_workers() if workers is None else max(1, int(workers))
    reps = list(range(config.replications))
    results: list[ReplicationResult] = []
    start = time.perf_counter()
    if workers > 1 and not isinstance(methods, Mapping):
        chunks = [(config, reps[i::workers], names) for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for chunk in pool.map(_run_chunk, chunks):
                results.extend(chunk)
        if progress:
            progress(len(reps), len(reps))
    else:
        for i, rep in enumerate(reps, start=1):
            results.extend(run_replication(config, rep, estimators))
            if progress:
                progress(i, len(reps))
    logger.info("cell %s finished %d replications in %.1fs", config.scenario.value, len(reps),
                time.perf_counter() - start)
    return aggregate(config, results, names, truths)
