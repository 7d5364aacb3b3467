"""Analytic prediction error for merged vs. ensembled boosting, and the
heterogeneity thresholds where the preference flips.

Both strategies are linear in the outcomes once the design, learning rate,
and iteration counts are fixed: the merged fit maps pooled outcomes through a
single coefficient operator, the ensemble weight-averages per-study operator
fits. Their expected squared prediction error on fixed test rows then splits
into a between-study variance term (scaled by the random-effect variances), a
within-study term (scaled by the residual variance), a squared bias term, and
an irreducible term that is common to both strategies.

Under equal random-effect variances the error difference is affine in the
average heterogeneity, giving a single transition point; with unequal
variances, bounding the per-group contributions gives a transition interval.
The large-heterogeneity limit of the error ratio is the ratio of the two
between-study traces.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .linear_boost import LinearLearner

__all__ = [
    "TransitionInputs",
    "MspeBreakdown",
    "PointResult",
    "IntervalResult",
    "Recommendation",
    "TransitionReport",
    "compute_r",
    "analytic_mspe_merged",
    "analytic_mspe_ensemble",
    "transition_point",
    "transition_interval",
    "mspe_asymptote",
    "recommend",
]


def compute_r(learner: LinearLearner, eta: float, m: int) -> np.ndarray:
    """Coefficient operator of the boosting fit after m iterations.

    Accumulates eta B (I - eta H)^(m'-1) over m' = 1..m; multiplying by the
    design on the left reproduces the fitted-value operator at iteration m.
    """
    if m < 1:
        raise ValueError("need at least one iteration")
    shrink = np.eye(learner.n) - eta * learner.h_op
    term = eta * learner.b_op
    total = term.copy()
    for _ in range(1, m):
        term = term @ shrink
        total += term
    return total


@dataclass(frozen=True)
class TransitionInputs:
    """Fixed operators and model pieces the analytic error formulas consume.

    ``r_merge`` maps pooled training outcomes to merged coefficients;
    ``r_study[k]`` maps study k's outcomes to its member coefficients.
    ``z_train[k]`` is study k's realized random-effect matrix (the columns
    multiplying that study's random effects in the generating model) and
    ``z_test`` the same for test studies, used only by the irreducible term.
    ``f_train``/``f_train_k``/``f_test`` are the mean-function evaluations on
    the pooled training rows, per-study training rows, and test rows.
    """

    r_merge: np.ndarray
    r_study: tuple[np.ndarray, ...]
    xt0: np.ndarray
    f_train: np.ndarray
    f_train_k: tuple[np.ndarray, ...]
    f_test: np.ndarray
    z_train: tuple[np.ndarray, ...]
    weights: np.ndarray
    sigma_eps2: float
    g_diag: np.ndarray
    z_test: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        object.__setattr__(self, "g_diag", np.asarray(self.g_diag, dtype=float))
        k = len(self.r_study)
        if len(self.z_train) != k or len(self.f_train_k) != k or self.weights.shape != (k,):
            raise ValueError("per-study inputs must all have length K")
        if abs(self.weights.sum() - 1.0) > 1e-12 or np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative and sum to 1")
        q = self.g_diag.shape[0]
        sizes = [z.shape[0] for z in self.z_train]
        if any(z.shape[1] != q for z in list(self.z_train) + list(self.z_test)):
            raise ValueError("every Z block must have Q columns")
        n = self.r_merge.shape[1]
        if sum(sizes) != n or self.f_train.shape[0] != n:
            raise ValueError("study sizes must tile the pooled row count")
        for r_k, z_k, f_k in zip(self.r_study, self.z_train, self.f_train_k):
            if r_k.shape[1] != z_k.shape[0] or f_k.shape[0] != z_k.shape[0]:
                raise ValueError("per-study operator, Z, and f row counts must agree")
        if self.xt0.shape[1] != self.r_merge.shape[0]:
            raise ValueError("test design width must match the coefficient dimension")
        if self.f_test.shape[0] != self.xt0.shape[0]:
            raise ValueError("f_test must have one entry per test row")

    @property
    def k(self) -> int:
        return len(self.r_study)

    @property
    def q(self) -> int:
        return self.g_diag.shape[0]

    @property
    def p(self) -> int:
        return self.xt0.shape[1]

    @property
    def sigma_bar2(self) -> float:
        """Average random-effect variance per design column, tr(G)/P."""
        return float(self.g_diag.sum()) / self.p


@dataclass(frozen=True)
class MspeBreakdown:
    """Additive pieces of an analytic mean squared prediction error."""

    variance_between: float
    variance_within: float
    bias2: float
    irreducible: float

    @property
    def reducible(self) -> float:
        return self.variance_between + self.variance_within + self.bias2

    @property
    def total(self) -> float:
        return self.reducible + self.irreducible


def _study_blocks(mat: np.ndarray, sizes) -> list[np.ndarray]:
    out, offset = [], 0
    for n_k in sizes:
        out.append(mat[:, offset : offset + n_k])
        offset += n_k
    return out


def _between_diag_merged(inputs: TransitionInputs) -> np.ndarray:
    """Per-(study, effect) diagonal entries of the merged between-study trace."""
    s = inputs.xt0 @ inputs.r_merge
    blocks = _study_blocks(s, [z.shape[0] for z in inputs.z_train])
    return np.array([[float(np.sum((s_k @ z_k) ** 2, axis=0)[q]) for q in range(inputs.q)]
                     for s_k, z_k in zip(blocks, inputs.z_train)])


def _between_diag_ensemble(inputs: TransitionInputs) -> np.ndarray:
    """Same entries for the ensemble, already scaled by squared weights."""
    out = np.empty((inputs.k, inputs.q))
    for k, (r_k, z_k) in enumerate(zip(inputs.r_study, inputs.z_train)):
        t_k = inputs.xt0 @ r_k
        out[k] = inputs.weights[k] ** 2 * np.sum((t_k @ z_k) ** 2, axis=0)
    return out


def _irreducible(inputs: TransitionInputs) -> float:
    total = inputs.sigma_eps2 * inputs.xt0.shape[0]
    for z in inputs.z_test:
        total += float(np.sum((z**2) * inputs.g_diag))
    return float(total)


def analytic_mspe_merged(inputs: TransitionInputs) -> MspeBreakdown:
    """Expected squared prediction error of the merged strategy on the test rows."""
    s = inputs.xt0 @ inputs.r_merge
    between = float(np.sum(_between_diag_merged(inputs) * inputs.g_diag))
    within = inputs.sigma_eps2 * float(np.sum(s**2))
    bias = s @ inputs.f_train - inputs.f_test
    return MspeBreakdown(between, within, float(bias @ bias), _irreducible(inputs))


def analytic_mspe_ensemble(inputs: TransitionInputs) -> MspeBreakdown:
    """Expected squared prediction error of the weighted ensemble on the test rows."""
    between = float(np.sum(_between_diag_ensemble(inputs) * inputs.g_diag))
    within = 0.0
    bias = -inputs.f_test.astype(float)
    for w_k, r_k, f_k in zip(inputs.weights, inputs.r_study, inputs.f_train_k):
        t_k = inputs.xt0 @ r_k
        within += w_k**2 * float(np.sum(t_k**2))
        bias = bias + w_k * (t_k @ f_k)
    return MspeBreakdown(between, inputs.sigma_eps2 * within, float(bias @ bias), _irreducible(inputs))


def _numerator(inputs: TransitionInputs) -> float:
    """Within-study variance and bias differences, ensemble minus merged."""
    s = inputs.xt0 @ inputs.r_merge
    within_m = float(np.sum(s**2))
    bias_m = s @ inputs.f_train - inputs.f_test
    within_e = 0.0
    bias_e = -inputs.f_test.astype(float)
    for w_k, r_k, f_k in zip(inputs.weights, inputs.r_study, inputs.f_train_k):
        t_k = inputs.xt0 @ r_k
        within_e += w_k**2 * float(np.sum(t_k**2))
        bias_e = bias_e + w_k * (t_k @ f_k)
    return (
        inputs.sigma_eps2 * (within_e - within_m)
        + float(bias_e @ bias_e)
        - float(bias_m @ bias_m)
    )


@dataclass(frozen=True)
class PointResult:
    """Equal-variance transition point with its well-definedness diagnostics."""

    tau: float | None
    condition_value: float
    numerator: float


@dataclass(frozen=True)
class IntervalResult:
    """Unequal-variance transition interval endpoints and group terms."""

    tau1: float | None
    tau2: float | None
    numerator: float
    group_variances: np.ndarray
    group_sizes: np.ndarray
    group_terms: np.ndarray


def transition_point(inputs: TransitionInputs) -> PointResult:
    """Heterogeneity threshold where, under equal random-effect variances,
    the ensemble's expected error drops below the merged fit's.

    The threshold exists only when the merged fit carries more between-study
    variance than the ensemble (positive condition value).
    """
    cond = float(_between_diag_merged(inputs).sum() - _between_diag_ensemble(inputs).sum())
    num = _numerator(inputs)
    if cond <= 0:
        return PointResult(tau=None, condition_value=cond, numerator=num)
    tau = (inputs.q / inputs.p) * num / cond
    return PointResult(tau=tau, condition_value=cond, numerator=num)


def transition_interval(inputs: TransitionInputs) -> IntervalResult:
    """Interval [tau1, tau2] bracketing the flip under unequal variances.

    Random effects are grouped by identical variance; each group contributes
    the summed diagonal difference between merged and ensemble between-study
    terms. tau1 divides by the largest per-effect group average, tau2 by the
    smallest; an endpoint is undefined when its group average is not positive.
    """
    diff = _between_diag_merged(inputs) - _between_diag_ensemble(inputs)  # (K, Q)
    per_effect = diff.sum(axis=0)
    values, inverse = np.unique(inputs.g_diag, return_inverse=True)
    n_groups = values.shape[0]
    a_d = np.array([per_effect[inverse == d].sum() for d in range(n_groups)])
    j_d = np.array([(inverse == d).sum() for d in range(n_groups)])
    num = _numerator(inputs)
    ratios = a_d / j_d
    tau1 = num / (inputs.p * ratios.max()) if ratios.max() > 0 else None
    tau2 = num / (inputs.p * ratios.min()) if ratios.min() > 0 else None
    return IntervalResult(
        tau1=tau1,
        tau2=tau2,
        numerator=num,
        group_variances=values,
        group_sizes=j_d,
        group_terms=a_d,
    )


def mspe_asymptote(inputs: TransitionInputs) -> float:
    """Limit of the ensemble/merged error ratio as heterogeneity grows.

    Equals the ratio of the between-study variance traces (reducible error
    only; the irreducible term is excluded since it is common to both fits).
    """
    denom = float(_between_diag_merged(inputs).sum())
    if denom == 0:
        raise ValueError("merged between-study trace is zero; asymptote undefined")
    return float(_between_diag_ensemble(inputs).sum()) / denom


class Recommendation(enum.Enum):
    MERGE = "Merge"
    ENSEMBLE = "Ensemble"
    INDETERMINATE = "Indeterminate"


@dataclass(frozen=True)
class TransitionReport:
    """Everything a practitioner needs for the merge-vs-ensemble call."""

    tau: float | None
    tau1: float | None
    tau2: float | None
    condition_value: float
    sigma_bar2: float
    mspe_merge: float
    mspe_ens: float
    mspe_merge_parts: MspeBreakdown
    mspe_ens_parts: MspeBreakdown
    asymptote: float | None
    recommendation: Recommendation
    equal_variances: bool
    notes: tuple[str, ...] = field(default_factory=tuple)

    def to_record(self) -> dict:
        return {
            "tau": self.tau,
            "tau1": self.tau1,
            "tau2": self.tau2,
            "condition_value": self.condition_value,
            "sigma_bar2": self.sigma_bar2,
            "mspe_merge": self.mspe_merge,
            "mspe_ens": self.mspe_ens,
            "mspe_merge_reducible": self.mspe_merge_parts.reducible,
            "mspe_ens_reducible": self.mspe_ens_parts.reducible,
            "irreducible": self.mspe_merge_parts.irreducible,
            "asymptote": self.asymptote,
            "recommendation": self.recommendation.value,
            "equal_variances": self.equal_variances,
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        def fmt(x):
            return "undefined" if x is None else f"{x:.6g}"

        lines = [
            "merge-vs-ensemble transition report",
            "-----------------------------------",
            f"average heterogeneity sigma_bar2 : {self.sigma_bar2:.6g}",
            f"condition value                  : {self.condition_value:.6g}",
        ]
        if self.equal_variances:
            lines.append(f"transition point tau             : {fmt(self.tau)}")
        else:
            lines.append(f"transition interval [tau1, tau2] : [{fmt(self.tau1)}, {fmt(self.tau2)}]")
        lines += [
            f"analytic MSPE, merged            : {self.mspe_merge:.6g}",
            f"analytic MSPE, ensemble          : {self.mspe_ens:.6g}",
            f"  (incl. common irreducible term : {self.mspe_merge_parts.irreducible:.6g})",
            f"large-heterogeneity ratio limit  : {fmt(self.asymptote)}",
            f"recommendation                   : {self.recommendation.value}",
        ]
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines)


def recommend(inputs: TransitionInputs, sigma_bar2_estimate: float | None = None, notes=()) -> TransitionReport:
    """Compare an estimated heterogeneity level against the transition thresholds.

    Uses the single point when all random-effect variances are equal and the
    interval otherwise; inside the interval (or when no threshold is
    defined) the answer is Indeterminate rather than a guess.
    """
    sigma_bar2 = inputs.sigma_bar2 if sigma_bar2_estimate is None else float(sigma_bar2_estimate)
    point = transition_point(inputs)
    interval = transition_interval(inputs)
    equal = np.unique(inputs.g_diag).shape[0] == 1
    lower = point.tau if equal else interval.tau1
    upper = point.tau if equal else interval.tau2
    if lower is not None and sigma_bar2 < lower:
        rec = Recommendation.MERGE
    elif upper is not None and sigma_bar2 > upper:
        rec = Recommendation.ENSEMBLE
    else:
        rec = Recommendation.INDETERMINATE
    merged = analytic_mspe_merged(inputs)
    ens = analytic_mspe_ensemble(inputs)
    try:
        asym = mspe_asymptote(inputs)
    except ValueError:
        asym = None
    return TransitionReport(
        tau=point.tau,
        tau1=interval.tau1,
        tau2=interval.tau2,
        condition_value=point.condition_value,
        sigma_bar2=sigma_bar2,
        mspe_merge=merged.total,
        mspe_ens=ens.total,
        mspe_merge_parts=merged,
        mspe_ens_parts=ens,
        asymptote=asym,
        recommendation=rec,
        equal_variances=equal,
        notes=tuple(notes),
    )
