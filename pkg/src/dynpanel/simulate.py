"""Synthetic dynamic-panel generation and Monte Carlo harness.

The generator draws y_{a,t} = rho y_{a,t-1} + x_{a,t}'beta + omega_a +
eps_{a,t} with omega_a ~ N(0, sigma_effect^2), per-entity PCG64 streams
spawned from (seed, replication, entity) so every dataset is
reproducible cell for cell. The harness fits a list of estimator
configurations on each replication and aggregates bias, RMSE, SE
calibration, and rejection rates.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import j_test
from .errors import DynpanelError
from .estimators import (
    TWO_STEP,
    EstimationResult,
    ModelSpec,
    Weighting,
    fit_fixed_effects,
    fit_gmm,
    fit_pooled,
    fit_random_effects,
)
from .instruments import DynamicInstrument, InstrumentSpec, StaticInstrument
from .panel import PanelDataset, PanelSeries
from .transforms import TransformKind


@dataclass(frozen=True)
class DgpSpec:
    """Parameters of the simulated dynamic panel."""

    n_entities: int
    n_periods: int
    rho: float = 0.5
    exogenous_betas: tuple[float, ...] = (1.0,)
    sigma_effect: float = 1.0
    sigma_noise: float = 1.0
    burn_in: int = 50
    missingness: float = 0.0
    seed: int = 0
    effect_loading: float = 0.0  # adds effect_loading * omega_a to every x
    y0: float | None = None     # fixed start value instead of burn-in

    def __post_init__(self):
        if not abs(self.rho) < 1:
            raise ValueError("|rho| must be < 1 for a stationary panel")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if not 0.0 <= self.missingness < 1.0:
            raise ValueError("missingness must be in [0, 1)")
        if self.n_entities < 1 or self.n_periods < 1:
            raise ValueError("need at least one entity and one period")


def generate(dgp: DgpSpec, replication: int = 0) -> PanelDataset:
    """Simulate one panel; fully deterministic given (spec, replication).

    Entity a uses the PCG64 stream spawned with key (replication, a),
    so panels are reproducible across runs and platforms. With ``y0``
    set the recursion starts from that value at the first period and no
    burn-in is applied; otherwise the start is drawn near the stationary
    mean and ``burn_in`` periods are discarded.
    """
    n_x = len(dgp.exogenous_betas)
    T = dgp.n_periods
    betas = np.asarray(dgp.exogenous_betas)
    y = np.empty((dgp.n_entities, T))
    xs = np.empty((n_x, dgp.n_entities, T))
    keep = np.ones((dgp.n_entities, T), dtype=bool)

    for a in range(dgp.n_entities):
        rng = np.random.default_rng(
            np.random.SeedSequence(dgp.seed, spawn_key=(replication, a))
        )
        omega = dgp.sigma_effect * rng.standard_normal()
        if dgp.y0 is not None:
            x_path = rng.standard_normal((n_x, T)) + dgp.effect_loading * omega
            eps = dgp.sigma_noise * rng.standard_normal(T)
            y[a, 0] = dgp.y0
            for t in range(1, T):
                y[a, t] = (
                    dgp.rho * y[a, t - 1] + betas @ x_path[:, t] + omega + eps[t]
                )
            xs[:, a, :] = x_path
        else:
            total = dgp.burn_in + T
            x_path = rng.standard_normal((n_x, total)) + dgp.effect_loading * omega
            eps = dgp.sigma_noise * rng.standard_normal(total)
            x_mean = dgp.effect_loading * omega
            level = (omega + float(betas.sum()) * x_mean) / (1.0 - dgp.rho)
            yt = level
            path = np.empty(total)
            for t in range(total):
                yt = dgp.rho * yt + betas @ x_path[:, t] + omega + eps[t]
                path[t] = yt
            y[a] = path[dgp.burn_in:]
            xs[:, a, :] = x_path[:, dgp.burn_in:]
        if dgp.missingness > 0.0:
            drop = rng.random(T) < dgp.missingness
            if drop.all():
                drop[0] = False  # keep every entity observable
            keep[a] = ~drop

    variables = {"y": np.where(keep, y, np.nan)}
    for j in range(n_x):
        variables[f"x{j + 1}"] = np.where(keep, xs[j], np.nan)
    entities = [f"e{a + 1}" for a in range(dgp.n_entities)]
    periods = range(1, T + 1)
    series = {
        name: PanelSeries(vals, ~np.isnan(vals)) for name, vals in variables.items()
    }
    return PanelDataset(tuple(entities), tuple(periods), series)


def ar1_model(
    transform: TransformKind,
    n_x: int = 1,
    intercept: bool | None = None,
) -> ModelSpec:
    """Model spec matching the generator's naming: y on y(-1) and the x's."""
    from .estimators import ExogTerm

    if intercept is None:
        intercept = transform in (TransformKind.NONE, TransformKind.QUASI_DEMEAN)
    effects = {
        TransformKind.WITHIN: "fixed",
        TransformKind.DUMMIES: "fixed",
        TransformKind.QUASI_DEMEAN: "random",
    }.get(transform, "none")
    return ModelSpec(
        dependent="y",
        ar_lags=1,
        exogenous=tuple(ExogTerm(f"x{j + 1}") for j in range(n_x)),
        intercept=intercept,
        effects=effects,
        transform=transform,
    )


def fd_od_comparison_configs(
    n_x: int = 1,
    weighting: Weighting | None = None,
    depth: int = 3,
) -> list["EstimatorConfig"]:
    """The canonical FD-vs-OD comparison pair.

    Each transform is instrumented with its ``depth`` freshest valid
    lagged levels of the dependent variable: differencing contaminates
    the lag-1 level (it contains the differenced-away error), so FD
    starts at lag 2; forward deviations touch only current and future
    errors, so OD may start at lag 1. At unbounded depth the two moment
    sets span the same space and the estimators coincide; the bounded
    fresh-lag sets expose the deviation transform's advantage.
    """
    from .estimators import ONE_STEP

    if weighting is None:
        weighting = ONE_STEP
    statics = tuple(StaticInstrument(f"x{j + 1}", 0, 0) for j in range(n_x))
    od_inst = InstrumentSpec(
        dynamic=(DynamicInstrument("y", 1, depth),), static=statics
    )
    fd_inst = InstrumentSpec(
        dynamic=(DynamicInstrument("y", 2, depth + 1),), static=statics
    )
    return [
        EstimatorConfig(
            "od", ar1_model(TransformKind.ORTHOGONAL_DEVIATION, n_x=n_x),
            od_inst, weighting,
        ),
        EstimatorConfig(
            "fd", ar1_model(TransformKind.FIRST_DIFFERENCE, n_x=n_x),
            fd_inst, weighting,
        ),
    ]


@dataclass(frozen=True)
class EstimatorConfig:
    """One estimator to run each replication."""

    name: str
    model: ModelSpec
    instruments: InstrumentSpec | None = None
    weighting: Weighting = TWO_STEP
    on_singular: str = "error"
    fe_method: str = "within"

    def fit(self, data: PanelDataset) -> EstimationResult:
        if self.instruments is not None:
            return fit_gmm(
                self.model, data, self.instruments,
                weighting=self.weighting, on_singular=self.on_singular,
            )
        if self.model.effects == "fixed":
            return fit_fixed_effects(self.model, data, method=self.fe_method)
        if self.model.effects == "random":
            return fit_random_effects(self.model, data)
        return fit_pooled(self.model, data)


@dataclass(frozen=True)
class CoefStats:
    """Monte Carlo summary for one coefficient of one estimator."""

    true_value: float
    mean: float
    bias: float
    rmse: float
    sd: float
    mean_se: float
    se_sd_ratio: float
    t_rejection: float  # share of |t| > 1.96 against the true value


@dataclass(frozen=True)
class EstimatorSummary:
    name: str
    n_success: int
    n_failed: int
    coef_stats: dict[str, CoefStats]
    j_rejection_rate: float | None = None


@dataclass(frozen=True)
class McSummary:
    """Aggregated Monte Carlo results plus the seed ledger."""

    dgp: DgpSpec
    reps: int
    estimators: tuple[EstimatorSummary, ...]
    seed_ledger: tuple[tuple[int, int], ...] = field(repr=False)  # (seed, replication)

    def estimator(self, name: str) -> EstimatorSummary:
        for e in self.estimators:
            if e.name == name:
                return e
        raise KeyError(f"no estimator {name!r} in summary")

    def to_json_dict(self) -> dict:
        return {
            "dgp": {
                "n_entities": self.dgp.n_entities,
                "n_periods": self.dgp.n_periods,
                "rho": self.dgp.rho,
                "exogenous_betas": list(self.dgp.exogenous_betas),
                "sigma_effect": self.dgp.sigma_effect,
                "sigma_noise": self.dgp.sigma_noise,
                "burn_in": self.dgp.burn_in,
                "missingness": self.dgp.missingness,
                "seed": self.dgp.seed,
            },
            "reps": self.reps,
            "estimators": [
                {
                    "name": e.name,
                    "n_success": e.n_success,
                    "n_failed": e.n_failed,
                    "j_rejection_rate": e.j_rejection_rate,
                    "coefficients": {
                        name: {
                            "true": s.true_value,
                            "mean": s.mean,
                            "bias": s.bias,
                            "rmse": s.rmse,
                            "sd": s.sd,
                            "mean_se": s.mean_se,
                            "se_sd_ratio": s.se_sd_ratio,
                            "t_rejection": s.t_rejection,
                        }
                        for name, s in e.coef_stats.items()
                    },
                }
                for e in self.estimators
            ],
            "seed_ledger": [list(pair) for pair in self.seed_ledger],
        }

    def to_csv(self) -> str:
        """One row per estimator; per-coefficient stats in labeled columns."""
        coef_names: list[str] = []
        for e in self.estimators:
            for n in e.coef_stats:
                if n not in coef_names:
                    coef_names.append(n)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["estimator", "n_success", "n_failed", "j_rejection_rate"]
        for n in coef_names:
            header += [f"{n}:bias", f"{n}:rmse", f"{n}:sd", f"{n}:mean_se",
                       f"{n}:se_sd_ratio", f"{n}:t_rejection"]
        writer.writerow(header)
        for e in self.estimators:
            row = [
                e.name, e.n_success, e.n_failed,
                "" if e.j_rejection_rate is None else repr(e.j_rejection_rate),
            ]
            for n in coef_names:
                s = e.coef_stats.get(n)
                if s is None:
                    row += [""] * 6
                else:
                    row += [repr(s.bias), repr(s.rmse), repr(s.sd),
                            repr(s.mean_se), repr(s.se_sd_ratio), repr(s.t_rejection)]
            writer.writerow(row)
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


def true_coefficients(dgp: DgpSpec, model: ModelSpec) -> dict[str, float]:
    """Map the model's parameter names onto the generator's truth."""
    truth: dict[str, float] = {}
    if model.ar_lags >= 1:
        truth[f"{model.dependent}(-1)"] = dgp.rho
    for i in range(2, model.ar_lags + 1):
        truth[f"{model.dependent}(-{i})"] = 0.0
    for term in model.exogenous:
        j = int(term.name[1:]) - 1 if term.name.startswith("x") else None
        for l in range(term.lags + 1):
            name = term.name if l == 0 else f"{term.name}(-{l})"
            if l == 0 and j is not None and j < len(dgp.exogenous_betas):
                truth[name] = float(dgp.exogenous_betas[j])
            else:
                truth[name] = 0.0
    return truth


def run_experiment(
    dgp: DgpSpec,
    configs: list[EstimatorConfig],
    reps: int,
    j_level: float = 0.05,
) -> McSummary:
    """Fit every configuration on ``reps`` freshly generated panels.

    Replications that fail to estimate are excluded from the averages
    and counted per estimator. The J rejection rate is reported for
    instrumented configurations.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    draws: dict[str, dict[str, list[tuple[float, float]]]] = {
        c.name: {} for c in configs
    }
    j_rejects: dict[str, list[bool]] = {c.name: [] for c in configs}
    failures: dict[str, int] = {c.name: 0 for c in configs}
    ledger: list[tuple[int, int]] = []

    for rep in range(reps):
        data = generate(dgp, replication=rep)
        ledger.append((dgp.seed, rep))
        for cfg in configs:
            try:
                result = cfg.fit(data)
                if cfg.instruments is not None:
                    jt = j_test(result)
                    if jt.df > 0:
                        j_rejects[cfg.name].append(jt.p_value < j_level)
            except DynpanelError:
                failures[cfg.name] += 1
                continue
            store = draws[cfg.name]
            for i, name in enumerate(result.param_names):
                store.setdefault(name, []).append(
                    (float(result.coefficients[i]), float(result.standard_errors[i]))
                )

    summaries = []
    for cfg in configs:
        truth = true_coefficients(dgp, cfg.model)
        coef_stats: dict[str, CoefStats] = {}
        n_success = reps - failures[cfg.name]
        for name, pairs in draws[cfg.name].items():
            if name not in truth:
                continue
            est = np.array([p[0] for p in pairs])
            ses = np.array([p[1] for p in pairs])
            true_val = truth[name]
            bias = float(est.mean() - true_val)
            rmse = float(np.sqrt(np.mean((est - true_val) ** 2)))
            sd = float(est.std(ddof=1)) if est.size > 1 else 0.0
            mean_se = float(ses.mean())
            with np.errstate(divide="ignore", invalid="ignore"):
                t_rej = float(np.mean(np.abs((est - true_val) / ses) > 1.96))
            coef_stats[name] = CoefStats(
                true_value=true_val,
                mean=float(est.mean()),
                bias=bias,
                rmse=rmse,
                sd=sd,
                mean_se=mean_se,
                se_sd_ratio=mean_se / sd if sd > 0 else float("nan"),
                t_rejection=t_rej,
            )
        j_rate = (
            float(np.mean(j_rejects[cfg.name])) if j_rejects[cfg.name] else None
        )
        summaries.append(
            EstimatorSummary(
                name=cfg.name,
                n_success=n_success,
                n_failed=failures[cfg.name],
                coef_stats=coef_stats,
                j_rejection_rate=j_rate,
            )
        )
    return McSummary(dgp, reps, tuple(summaries), tuple(ledger))
