"""l2 boosting with a full linear (ridge) learner.

The learner is the pair of operators B = (X'X + lam I)^{-1} X' and H = X B.
Boosting repeatedly fits H to the current residuals with learning rate eta;
after m iterations the fitted-value map is I - (I - eta H)^m and the
coefficient map is the closed-form sum of eta B (I - eta H)^{m'-1} over
m' <= m. Early stopping minimizes the corrected AIC, whose degrees of freedom
are the trace of the fitted-value operator.

Spectral shortcuts: H is symmetric with eigenvalues in [0, 1], so operator
traces and residual norms along the whole iteration path come from one
eigendecomposition instead of repeated matrix powers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import BasisSpec, ExpandedDesigns, ExpandedMatrix, MultiStudyDataset, expand_basis, standardize

__all__ = [
    "LinearLearner",
    "BoostFit",
    "ridge_operators",
    "boost_linear",
    "boosting_operator",
    "aicc_stop",
    "merged_estimator",
    "ensemble_estimator",
]

OPERATOR_ROW_CAP = 2000


def _design_matrix(xt) -> np.ndarray:
    if isinstance(xt, ExpandedMatrix):
        return xt.xt
    return np.asarray(xt, dtype=float)


@dataclass(frozen=True)
class LinearLearner:
    """Ridge coefficient/fit operators for a fixed design.

    ``b_op`` maps outcomes to coefficients (P x N); ``h_op`` = xt @ b_op maps
    outcomes to fitted values and is symmetric with eigenvalues in [0, 1].
    ``eigvals``/``eigvecs`` hold the eigendecomposition of ``h_op``.
    """

    xt: np.ndarray
    b_op: np.ndarray
    h_op: np.ndarray
    lam: float
    eigvals: np.ndarray
    eigvecs: np.ndarray

    @property
    def n(self) -> int:
        return self.h_op.shape[0]

    @property
    def width(self) -> int:
        return self.b_op.shape[0]


def ridge_operators(xt, lam: float, row_cap: int = OPERATOR_ROW_CAP) -> LinearLearner:
    """Form B and H for a design and ridge penalty lam >= 0.

    With lam = 0 the design must have full column rank ("rank-deficient
    design" otherwise). Dense N x N operators are formed, so N is capped at
    ``row_cap``.
    """
    x = _design_matrix(xt)
    n, p = x.shape
    if n > row_cap:
        raise ValueError(f"design has {n} rows; operator-level ops are capped at {row_cap}")
    if lam < 0:
        raise ValueError("ridge penalty must be nonnegative")
    gram = x.T @ x
    if lam == 0.0 and np.linalg.matrix_rank(gram) < p:
        raise ValueError("rank-deficient design: lam = 0 requires full column rank")
    b_op = np.linalg.solve(gram + lam * np.eye(p), x.T)
    h_op = x @ b_op
    h_op = 0.5 * (h_op + h_op.T)
    d, q = np.linalg.eigh(h_op)
    if d.min() < -1e-8 or d.max() > 1 + 1e-8:
        raise ValueError(f"learner spectrum outside [0, 1]: [{d.min():.3e}, {d.max():.3e}]")
    d = np.clip(d, 0.0, 1.0)
    return LinearLearner(xt=x, b_op=b_op, h_op=h_op, lam=float(lam), eigvals=d, eigvecs=q)


@dataclass(frozen=True)
class BoostFit:
    """Boosting path up to the stopping iteration.

    ``coefficient_path[i]``/``fitted_path[i]`` are the state after iteration
    i + 1; ``df_path[i]`` is the trace of the iteration-(i+1) fitted-value
    operator and ``aicc_path[i]`` the corresponding corrected AIC (NaN where
    the degrees-of-freedom bound tr + 2 < N fails).
    """

    coefficients: np.ndarray
    coefficient_path: np.ndarray
    fitted_path: np.ndarray
    eta: float
    m_stop: int
    df_path: np.ndarray
    aicc_path: np.ndarray

    @property
    def fitted(self) -> np.ndarray:
        return self.fitted_path[-1]


def _df_and_aicc_paths(y: np.ndarray, learner: LinearLearner, eta: float, m: int):
    """Traces and AICc along iterations 1..m via the spectrum of H."""
    n = learner.n
    d = learner.eigvals
    c = learner.eigvecs.T @ y
    shrink = 1.0 - eta * d
    powers = shrink[None, :] ** np.arange(1, m + 1)[:, None]
    df = n - powers.sum(axis=1)
    rss = (powers**2) @ (c**2)
    sigma2 = rss / n
    with np.errstate(divide="ignore"):
        log_sigma2 = np.log(np.maximum(sigma2, np.finfo(float).tiny))
    denom = 1.0 - (df + 2.0) / n
    aicc = np.where(denom > 0, log_sigma2 + (1.0 + df / n) / denom, np.nan)
    return df, aicc


def boost_linear(y: np.ndarray, learner: LinearLearner, eta: float, m: int) -> BoostFit:
    """Run m boosting iterations of the linear learner on outcome y.

    Iterates beta <- beta + eta B r, fit <- fit + eta H r, r = y - fit. The
    result also carries the df and AICc paths for the same iterations.
    """
    if not 0 < eta <= 1:
        raise ValueError("learning rate must be in (0, 1]")
    if m < 1:
        raise ValueError("need at least one iteration")
    y = np.asarray(y, dtype=float)
    if y.shape[0] != learner.n:
        raise ValueError(f"outcome has {y.shape[0]} rows, learner expects {learner.n}")
    beta = np.zeros(learner.width)
    fitted = np.zeros(learner.n)
    residual = y.copy()
    coef_path = np.empty((m, learner.width))
    fit_path = np.empty((m, learner.n))
    for i in range(m):
        beta = beta + eta * (learner.b_op @ residual)
        fitted = fitted + eta * (learner.h_op @ residual)
        residual = y - fitted
        coef_path[i] = beta
        fit_path[i] = fitted
    df, aicc = _df_and_aicc_paths(y, learner, eta, m)
    return BoostFit(
        coefficients=beta,
        coefficient_path=coef_path,
        fitted_path=fit_path,
        eta=float(eta),
        m_stop=m,
        df_path=df,
        aicc_path=aicc,
    )


def boosting_operator(learner: LinearLearner, eta: float, m: int) -> np.ndarray:
    """The map y -> fitted values, I - (I - eta H)^(m+1), for m >= 0.

    Index convention: m = 0 returns H itself, i.e. the operator after one
    boosting pass, so ``boosting_operator(..., m) @ y`` equals
    ``boost_linear(y, ..., m + 1).fitted``.
    """
    if m < 0:
        raise ValueError("m must be >= 0")
    d = 1.0 - (1.0 - eta * learner.eigvals) ** (m + 1)
    return (learner.eigvecs * d) @ learner.eigvecs.T


def aicc_stop(y: np.ndarray, learner: LinearLearner, eta: float, m_upp: int = 500):
    """Choose the stopping iteration in 1..m_upp by minimal corrected AIC.

    Candidates violating the bound tr + 2 < N are excluded; if none remain
    the sample is too small for the criterion. Ties resolve to the smallest
    iteration.
    """
    if m_upp < 1:
        raise ValueError("m_upp must be >= 1")
    y = np.asarray(y, dtype=float)
    _, aicc = _df_and_aicc_paths(y, learner, eta, m_upp)
    if np.all(np.isnan(aicc)):
        raise ValueError("sample too small for AICc: tr + 2 >= N at every iteration")
    m_stop = int(np.nanargmin(aicc)) + 1
    return m_stop, aicc


def merged_estimator(
    dataset: MultiStudyDataset,
    spec: BasisSpec,
    lam: float,
    eta: float = 0.5,
    m_upp: int = 500,
    m: int | None = None,
    designs: ExpandedDesigns | None = None,
) -> BoostFit:
    """Fit the merged-study boosting model: pool rows, one learner, one stop.

    Standardizes any not-yet-standardized training studies, expands the basis
    on the merged rows, and boosts the concatenated centered outcomes. Pass a
    fixed ``m`` to skip AICc stopping, or ``designs`` to reuse expansions.
    """
    if designs is None:
        dataset = _ensure_standardized(dataset)
        designs = expand_basis(dataset, spec)
    learner = ridge_operators(designs.merged, lam)
    if m is None:
        m, _ = aicc_stop(designs.merged_y, learner, eta, m_upp)
    return boost_linear(designs.merged_y, learner, eta, m)


def ensemble_estimator(
    dataset: MultiStudyDataset,
    spec: BasisSpec,
    lam: float,
    eta: float = 0.5,
    m_upp: int = 500,
    weights=None,
    m: int | None = None,
    designs: ExpandedDesigns | None = None,
) -> np.ndarray:
    """Weighted ensemble of per-study boosting fits, each with its own stop.

    Each member is fit on its own study's design (standardized on that
    study's rows) with its own AICc-chosen iteration count; the returned
    coefficient vector is the weight-averaged member coefficients, reduced in
    study order.
    """
    if designs is None:
        dataset = _ensure_standardized(dataset)
        designs = expand_basis(dataset, spec)
    k = len(designs.per_study)
    weights = _validate_weights(weights, k)
    beta = np.zeros(designs.merged.width)
    offset = 0
    for w_k, design in zip(weights, designs.per_study):
        n_k = design.n
        y_k = designs.merged_y[offset : offset + n_k]
        learner = ridge_operators(design, lam)
        m_k = m
        if m_k is None:
            m_k, _ = aicc_stop(y_k, learner, eta, m_upp)
        fit = boost_linear(y_k, learner, eta, m_k)
        beta = beta + w_k * fit.coefficients
        offset += n_k
    return beta


def _validate_weights(weights, k: int) -> np.ndarray:
    if weights is None:
        return np.full(k, 1.0 / k)
    w = np.asarray(weights, dtype=float)
    if w.shape != (k,):
        raise ValueError(f"need {k} weights, got shape {w.shape}")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    if abs(w.sum() - 1.0) > 1e-12:
        raise ValueError(f"weights must sum to 1, got {w.sum():.15g}")
    return w


def _ensure_standardized(dataset: MultiStudyDataset) -> MultiStudyDataset:
    if all(s.standardized for s in list(dataset.training) + list(dataset.test)):
        return dataset
    return MultiStudyDataset(
        training=[s if s.standardized else standardize(s) for s in dataset.training],
        test=[s if s.standardized else standardize(s) for s in dataset.test],
    )
