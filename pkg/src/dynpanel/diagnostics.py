"""Specification tests and model selection.

Hansen J overidentification test, Arellano-Bond serial correlation
test on differenced residuals, Swamy-Arora variance components,
the Hausman fixed-vs-random comparison (with an explicit invalidity
flag for the degenerate zero-variance case), and information-criterion
lag selection.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
import scipy.special

from .errors import DiagnosticError, EstimationError
from .estimators import (
    EstimationResult,
    ModelSpec,
    VarianceComponents,
    _demean_by_entity,
    _entity_slices,
    _invert_weight,
    _ols,
    _spd_inverse,
    build_design,
)
from .instruments import assemble
from .panel import PanelDataset, align
from .transforms import TransformKind


def chi_square_sf(x: float, df: int) -> float:
    """Upper tail P(X > x) of the chi-square distribution.

    Computed as the regularized upper incomplete gamma Q(df/2, x/2).
    """
    if x < 0:
        raise ValueError("chi-square statistic must be >= 0")
    if df < 1:
        raise ValueError("degrees of freedom must be >= 1")
    return float(scipy.special.gammaincc(df / 2.0, x / 2.0))


def normal_sf(z: float) -> float:
    """Upper tail of the standard normal."""
    return 0.5 * math.erfc(z / math.sqrt(2.0))


@dataclass(frozen=True)
class JTestResult:
    statistic: float
    df: int
    p_value: float

    def __str__(self):
        return f"{self.statistic:.4f} ({self.p_value:.4f})"


def j_test(result: EstimationResult) -> JTestResult:
    """Hansen J test of the overidentifying restrictions.

    J = (Z'e)' W (Z'e) with W the final-step weighting matrix (for
    one-step fits, the clustered moment covariance of the residuals is
    inverted instead so the statistic keeps its chi-square calibration).
    Degrees of freedom are the instrument rank minus the parameter count.
    """
    if result.instruments is None or result.moment_covariance is None:
        raise DiagnosticError("J test needs a result produced by fit_gmm")
    Z = result.instruments.matrix
    gbar = Z.T @ result.residuals
    if result.steps_taken >= 2 and result.weighting_matrix is not None:
        W = result.weighting_matrix
        rank = result.weighting_rank or Z.shape[1]
    else:
        W, rank = _invert_weight(result.moment_covariance, "pinv", "J test")
    rank = min(rank, result.instruments.rank)
    df = rank - result.coefficients.size
    if df < 0:
        raise DiagnosticError(
            f"impossible state: instrument rank {rank} below parameter count "
            f"{result.coefficients.size}"
        )
    stat = float(gbar @ W @ gbar)
    if df == 0:
        return JTestResult(stat, 0, 1.0)
    return JTestResult(stat, df, chi_square_sf(stat, df))


@dataclass(frozen=True)
class ArTestResult:
    order: int
    statistic: float
    p_value: float
    n_pairs: int

    def __str__(self):
        return f"AR({self.order}) z = {self.statistic:.4f} (p = {self.p_value:.4f})"


def _fd_pieces(result: EstimationResult):
    """Differenced residuals, design and instruments for the AR test.

    A first-difference fit supplies them directly; for an orthogonal
    deviation fit the differenced equation is rebuilt and evaluated at
    the same coefficients, since the test is defined on differenced
    residuals.
    """
    if result.transform is TransformKind.FIRST_DIFFERENCE:
        return (
            result.residuals,
            result.design_matrix,
            result.instruments.matrix if result.instruments else None,
            result.weighting_matrix,
            result.entity_ids,
            result.periods,
        )
    if result.transform is not TransformKind.ORTHOGONAL_DEVIATION:
        raise DiagnosticError(
            "serial-correlation test is defined for FD or OD results, "
            f"not {result.transform.value!r}"
        )
    model_fd = replace(result.model, transform=TransformKind.FIRST_DIFFERENCE)
    design = build_design(model_fd, result.dataset)
    resid = design.y - design.X @ result.coefficients
    Z = W = None
    if result.instrument_spec is not None:
        zmat = assemble(
            result.instrument_spec, result.dataset, design.sample,
            transform=TransformKind.FIRST_DIFFERENCE,
        )
        Z = zmat.matrix
        S = np.zeros((Z.shape[1], Z.shape[1]))
        for rows in _entity_slices(design.entity_ids):
            g = Z[rows].T @ resid[rows]
            S += np.outer(g, g)
        W, _ = _invert_weight(S, "pinv", "AR test")
    return resid, design.X, Z, W, design.entity_ids, design.periods


def ab_serial_correlation(result: EstimationResult, order: int = 2) -> ArTestResult:
    """Arellano-Bond test for order-m serial correlation.

    z = (e_{-m}'e) / sqrt(v) on the differenced residuals, where v
    carries the usual three terms: the clustered product variance, the
    correction for estimated coefficients through the moment projection,
    and the coefficient-covariance quadratic form. Asymptotically
    standard normal under the null of no order-m correlation.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    e, X, Z, W, entity_ids, periods = _fd_pieces(result)

    lagged = np.zeros_like(e)
    hit = np.zeros(e.size, dtype=bool)
    pos = {(int(a), int(t)): i for i, (a, t) in enumerate(zip(entity_ids, periods))}
    for i, (a, t) in enumerate(zip(entity_ids, periods)):
        j = pos.get((int(a), int(t) - order))
        if j is not None:
            lagged[i] = e[j]
            hit[i] = True
    n_pairs = int(hit.sum())
    if n_pairs == 0:
        raise DiagnosticError(f"too few periods for AR({order})")

    b = float(lagged @ e)
    term1 = 0.0
    M = np.zeros(Z.shape[1]) if Z is not None else None
    for rows in _entity_slices(entity_ids):
        w_i = float(lagged[rows] @ e[rows])
        term1 += w_i * w_i
        if Z is not None:
            M += (Z[rows].T @ e[rows]) * w_i
    q = X.T @ lagged
    var = term1
    if Z is not None and W is not None:
        G = Z.T @ X
        P_inv = _spd_inverse(G.T @ W @ G, "AR test projection")
        var += -2.0 * float(q @ (P_inv @ (G.T @ W) @ M))
    var += float(q @ result.covariance @ q)
    if var <= 0:  # numerical corner: fall back to the leading term
        var = term1
    if var == 0:
        raise DiagnosticError(f"degenerate variance in AR({order}) test")
    z = b / math.sqrt(var)
    return ArTestResult(order, z, 2.0 * normal_sf(abs(z)), n_pairs)


def swamy_arora(model: ModelSpec, data: PanelDataset) -> VarianceComponents:
    """Swamy-Arora variance components from within and between steps.

    sigma_e^2 is the within mean squared residual with N+k degrees of
    freedom removed; sigma_u^2 comes from the between regression with
    the harmonic-mean correction for unbalanced entity lengths and is
    floored at zero.
    """
    base = replace(model, effects="none", transform=TransformKind.NONE, intercept=False)
    design = build_design(base, data)
    names = list(design.x_names)
    Xw = _demean_by_entity(design.X, design.entity_ids)
    yw = _demean_by_entity(design.y, design.entity_ids)
    ents = np.unique(design.entity_ids)
    n, k, n_ent = design.n, design.X.shape[1], ents.size
    df_within = n - n_ent - k
    if df_within <= 0:
        raise EstimationError(
            f"non-positive within degrees of freedom ({df_within}); "
            "panel too short for variance components"
        )
    beta_w = _ols(yw, Xw, names)
    resid_w = yw - Xw @ beta_w
    sigma_e2 = float(resid_w @ resid_w) / df_within

    ybar = np.empty(n_ent)
    xbar = np.empty((n_ent, k))
    counts = np.empty(n_ent)
    for idx, rows in enumerate(_entity_slices(design.entity_ids)):
        ybar[idx] = design.y[rows].mean()
        xbar[idx] = design.X[rows].mean(axis=0)
        counts[idx] = rows.size
    Xb = np.column_stack([xbar, np.ones(n_ent)])
    df_between = n_ent - (k + 1)
    if df_between <= 0:
        raise EstimationError(
            f"too few entities ({n_ent}) for the between regression with {k} slopes"
        )
    beta_b, *_ = np.linalg.lstsq(Xb, ybar, rcond=None)
    resid_b = ybar - Xb @ beta_b
    mse_between = float(resid_b @ resid_b) / df_between
    t_harmonic = n_ent / float(np.sum(1.0 / counts))
    sigma_u2 = mse_between - sigma_e2 / t_harmonic
    floored = sigma_u2 <= 0
    return VarianceComponents(
        sigma_u2=max(sigma_u2, 0.0), sigma_e2=sigma_e2, floored=bool(floored)
    )


@dataclass(frozen=True)
class HausmanResult:
    valid: bool
    statistic: float | None = None
    df: int | None = None
    p_value: float | None = None
    reason: str | None = None

    def __str__(self):
        if not self.valid:
            return f"Hausman test invalid: {self.reason}"
        return f"H = {self.statistic:.4f}, df = {self.df}, p = {self.p_value:.4f}"


def hausman(fe: EstimationResult, re: EstimationResult) -> HausmanResult:
    """Hausman comparison of fixed- and random-effects slopes.

    Returns the invalidity flag instead of a statistic when the RE fit
    degenerated to pooled OLS (zero cross-section variance component) or
    when the covariance difference is not positive definite.
    """
    common = [
        n for n in fe.param_names
        if n in re.param_names and n != "const" and not n.startswith("effect[")
    ]
    if not common:
        raise DiagnosticError("no common slope coefficients between FE and RE results")
    if (
        re.variance_components is not None
        and re.variance_components.sigma_u2 == 0.0
    ):
        return HausmanResult(
            valid=False,
            reason="zero cross-section variance component; RE coincides with "
                   "pooled OLS and the FE-vs-RE comparison is uninformative",
        )
    fe_idx = [fe.param_names.index(n) for n in common]
    re_idx = [re.param_names.index(n) for n in common]
    v_fe = fe.classical_covariance if fe.classical_covariance is not None else fe.covariance
    v_re = re.classical_covariance if re.classical_covariance is not None else re.covariance
    d = fe.coefficients[fe_idx] - re.coefficients[re_idx]
    dv = v_fe[np.ix_(fe_idx, fe_idx)] - v_re[np.ix_(re_idx, re_idx)]
    dv = 0.5 * (dv + dv.T)
    eigvals = np.linalg.eigvalsh(dv)
    if eigvals.min() < 1e-10:
        return HausmanResult(
            valid=False,
            reason="covariance difference V_FE - V_RE is not positive definite",
        )
    stat = float(d @ np.linalg.solve(dv, d))
    df = len(common)
    return HausmanResult(True, stat, df, chi_square_sf(stat, df))


@dataclass(frozen=True)
class LagCandidate:
    ar: int
    exog_lags: tuple[tuple[str, int], ...]
    n_params: int
    loglik: float
    aic: float
    schwarz: float
    hannan_quinn: float


@dataclass(frozen=True)
class LagSelectionResult:
    candidates: tuple[LagCandidate, ...]
    chosen: dict[str, LagCandidate]  # criterion name -> minimizing candidate

    def chosen_orders(self, criterion: str) -> tuple[int, dict[str, int]]:
        c = self.chosen[criterion]
        return c.ar, dict(c.exog_lags)


CRITERIA = ("aic", "schwarz", "hannan_quinn")


def lag_selection(
    data: PanelDataset,
    template: ModelSpec,
    max_ar: int = 3,
    max_exog: Mapping[str, int] | None = None,
    criteria: Sequence[str] = CRITERIA,
) -> LagSelectionResult:
    """Choose lag orders by information criteria on a common sample.

    Candidates combine AR orders 1..max_ar (or just 0 when max_ar is 0)
    with exogenous lag depths 0..max_exog[name]. All candidates are
    estimated by pooled OLS on the rows where the deepest lags exist so
    their Gaussian log-likelihoods are commensurable.
    """
    for c in criteria:
        if c not in CRITERIA:
            raise ValueError(f"unknown criterion {c!r}; choose from {CRITERIA}")
    max_exog = dict(max_exog or {t.name: t.lags for t in template.exogenous})
    exog_names = [t.name for t in template.exogenous]

    required = {template.dependent: max(max_ar, 0)}
    for name in exog_names:
        required[name] = max_exog.get(name, 0)
    sample = align(data, [template.dependent] + exog_names, required)
    y = sample.column(template.dependent, 0)
    n = y.size

    ar_options = range(1, max_ar + 1) if max_ar >= 1 else [0]
    lag_options = [range(max_exog.get(name, 0) + 1) for name in exog_names]
    candidates = []
    for ar in ar_options:
        for combo in itertools.product(*lag_options):
            cols = [sample.column(template.dependent, i) for i in range(1, ar + 1)]
            names = [f"{template.dependent}(-{i})" for i in range(1, ar + 1)]
            for name, depth in zip(exog_names, combo):
                for l in range(depth + 1):
                    cols.append(sample.column(name, l))
                    names.append(name if l == 0 else f"{name}(-{l})")
            if template.intercept:
                cols.append(np.ones(n))
                names.append("const")
            X = np.column_stack(cols) if cols else np.empty((n, 0))
            beta = _ols(y, X, names)
            resid = y - X @ beta
            ssr = float(resid @ resid)
            if ssr <= 0:
                ssr = np.finfo(float).tiny
            loglik = -0.5 * n * (math.log(2.0 * math.pi) + math.log(ssr / n) + 1.0)
            p = X.shape[1]
            candidates.append(
                LagCandidate(
                    ar=ar,
                    exog_lags=tuple(zip(exog_names, combo)),
                    n_params=p,
                    loglik=loglik,
                    aic=-2.0 * loglik + 2.0 * p,
                    schwarz=-2.0 * loglik + p * math.log(n),
                    hannan_quinn=-2.0 * loglik + 2.0 * p * math.log(math.log(n)),
                )
            )
    if not candidates:
        raise EstimationError("no estimable lag candidates")
    chosen = {c: min(candidates, key=lambda cand: getattr(cand, c)) for c in criteria}
    return LagSelectionResult(tuple(candidates), chosen)


@dataclass(frozen=True)
class DiagnosticsReport:
    """Bundle of specification diagnostics for one estimation result."""

    j: JTestResult | None = None
    ar_tests: tuple[ArTestResult, ...] = ()
    variance_components: VarianceComponents | None = None
    hausman_result: HausmanResult | None = None

    def to_json_dict(self) -> dict:
        out: dict = {}
        if self.j is not None:
            out["j"] = self.j.statistic
            out["j_p"] = self.j.p_value
            out["j_df"] = self.j.df
        if self.ar_tests:
            out["ar"] = [
                {"order": t.order, "z": t.statistic, "p": t.p_value}
                for t in self.ar_tests
            ]
        if self.variance_components is not None:
            vc = self.variance_components
            out["variance_components"] = {
                "sigma_u2": vc.sigma_u2,
                "sigma_e2": vc.sigma_e2,
                "rho_u": vc.rho_u,
                "rho_e": vc.rho_e,
            }
        if self.hausman_result is not None:
            h = self.hausman_result
            out["hausman"] = (
                {"statistic": h.statistic, "df": h.df, "p": h.p_value}
                if h.valid
                else {"invalid": h.reason}
            )
        return out


def report_for(result: EstimationResult, ar_orders: Sequence[int] = (1, 2)) -> DiagnosticsReport:
    """Compose the standard diagnostics for a fitted result."""
    j = None
    ar_tests: list[ArTestResult] = []
    if result.instruments is not None:
        j = j_test(result)
    if result.transform in (
        TransformKind.FIRST_DIFFERENCE,
        TransformKind.ORTHOGONAL_DEVIATION,
    ):
        for m in ar_orders:
            try:
                ar_tests.append(ab_serial_correlation(result, m))
            except DiagnosticError:
                continue
    return DiagnosticsReport(
        j=j,
        ar_tests=tuple(ar_tests),
        variance_components=result.variance_components,
    )
