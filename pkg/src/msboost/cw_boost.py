"""l2 boosting with component-wise (single-column) least-squares learners.

Each iteration picks the column whose univariate least-squares fit to the
current residuals has minimal residual sum of squares (ties go to the
smallest index), then nudges that coordinate by eta times the univariate
coefficient. The realized selection sequence has a product-form closed form
for the coefficients, and the event "this sequence was selected" is a
polyhedron in outcome space: for every iteration m and every rival column j,
two rows assert that the chosen column's absolute correlation with the
residual beats j's. Those rows, the per-iteration residual operators, and the
coefficient contrast vectors are what post-selection inference consumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import BasisSpec, ExpandedDesigns, ExpandedMatrix, MultiStudyDataset, expand_basis
from .linear_boost import _ensure_standardized, _validate_weights

__all__ = [
    "CwBoostFit",
    "SelectionPath",
    "boost_componentwise",
    "cw_aicc_stop",
    "cw_closed_form",
    "build_selection_path",
    "cw_ensemble",
]

GAMMA_ENTRY_CAP = 50_000_000


def _design_matrix(xt) -> np.ndarray:
    if isinstance(xt, ExpandedMatrix):
        return xt.xt
    return np.asarray(xt, dtype=float)


@dataclass(frozen=True)
class CwBoostFit:
    """Component-wise path: selections, scalar updates, residuals.

    ``selected[i]`` is the 0-based column chosen at iteration i + 1 and
    ``updates[i]`` the unscaled univariate coefficient there; the final
    coefficients are the eta-scaled updates accumulated into their columns.
    ``residual_path[i]`` is the residual *entering* iteration i + 1, so
    ``residual_path[0]`` is the outcome itself.
    """

    coefficients: np.ndarray
    selected: tuple[int, ...]
    updates: np.ndarray
    eta: float
    m_stop: int
    residual_path: np.ndarray

    @property
    def y(self) -> np.ndarray:
        return self.residual_path[0]


def _cw_path(y: np.ndarray, x: np.ndarray, eta: float, m: int):
    n, p = x.shape
    norms2 = np.einsum("ij,ij->j", x, x)
    if np.any(norms2 <= 0):
        raise ValueError("design has a zero column; component-wise fit undefined there")
    beta = np.zeros(p)
    residual = y.copy()
    selected = []
    updates = np.empty(m)
    residual_path = np.empty((m, n))
    for i in range(m):
        residual_path[i] = residual
        corr = x.T @ residual
        # argmin_j RSS_j = argmax_j (x_j' r)^2 / |x_j|^2; first max = smallest index
        j = int(np.argmax(corr**2 / norms2))
        b = corr[j] / norms2[j]
        selected.append(j)
        updates[i] = b
        beta[j] += eta * b
        residual = residual - eta * b * x[:, j]
    return beta, tuple(selected), updates, residual_path


def boost_componentwise(y: np.ndarray, xt, eta: float, m: int) -> CwBoostFit:
    """Run m component-wise boosting iterations on outcome y.

    Columns are assumed zero-mean and unit-norm (the expansion pipeline
    guarantees this); the residual-sum-of-squares argmin is computed exactly,
    so non-unit norms are still handled correctly.
    """
    if not 0 < eta <= 1:
        raise ValueError("learning rate must be in (0, 1]")
    if m < 1:
        raise ValueError("need at least one iteration")
    x = _design_matrix(xt)
    y = np.asarray(y, dtype=float)
    if y.shape[0] != x.shape[0]:
        raise ValueError("outcome and design row counts differ")
    beta, selected, updates, residual_path = _cw_path(y, x, eta, m)
    return CwBoostFit(
        coefficients=beta,
        selected=selected,
        updates=updates,
        eta=float(eta),
        m_stop=m,
        residual_path=residual_path,
    )


def cw_aicc_stop(y: np.ndarray, xt, eta: float, m_upp: int = 500):
    """Corrected-AIC stopping for the component-wise learner.

    Tracks the residual operator product across iterations to get the trace
    of the fitted-value operator; same bound and tie rules as the full-learner
    criterion. Returns (m_stop, aicc_path); the fit at m_stop is recovered by
    rerunning the (prefix-stable) greedy path.
    """
    if m_upp < 1:
        raise ValueError("m_upp must be >= 1")
    x = _design_matrix(xt)
    y = np.asarray(y, dtype=float)
    n = x.shape[0]
    norms2 = np.einsum("ij,ij->j", x, x)
    residual = y.copy()
    omega = np.eye(n)
    aicc = np.full(m_upp, np.nan)
    for i in range(m_upp):
        corr = x.T @ residual
        j = int(np.argmax(corr**2 / norms2))
        b = corr[j] / norms2[j]
        residual = residual - eta * b * x[:, j]
        col = x[:, j]
        omega = omega - (eta / norms2[j]) * np.outer(col, col @ omega)
        df = n - np.trace(omega)
        denom = 1.0 - (df + 2.0) / n
        if denom > 0:
            sigma2 = max(float(residual @ residual) / n, np.finfo(float).tiny)
            aicc[i] = np.log(sigma2) + (1.0 + df / n) / denom
    if np.all(np.isnan(aicc)):
        raise ValueError("sample too small for AICc: tr + 2 >= N at every iteration")
    m_stop = int(np.nanargmin(aicc)) + 1
    return m_stop, aicc


def cw_closed_form(y: np.ndarray, xt, selected, eta: float) -> np.ndarray:
    """Coefficients from the product-form expansion for a given selection sequence.

    Term m applies the single-column coefficient operator for the m-th
    selection to the residual operator product of all earlier selections
    acting on y.
    """
    x = _design_matrix(xt)
    y = np.asarray(y, dtype=float)
    norms2 = np.einsum("ij,ij->j", x, x)
    beta = np.zeros(x.shape[1])
    u = y.copy()  # Upsilon_(m) y, the residual entering iteration m
    for j in selected:
        b = (x[:, j] @ u) / norms2[j]
        beta[j] += eta * b
        u = u - eta * b * x[:, j]
    return beta


@dataclass(frozen=True)
class SelectionPath:
    """The polyhedral record of a realized component-wise path.

    ``gamma`` stacks, block by iteration, the 2(P-1) rows per iteration that
    certify the winning column; the realized outcome satisfies
    ``gamma @ y >= 0`` up to roundoff. ``upsilon[i]`` is the residual
    operator entering iteration i + 1, ``v[:, j]`` the contrast with
    ``v[:, j] @ y`` equal to coefficient j, and ``v_steps[i]`` the
    iteration-(i+1) contribution (column, vector) to the contrasts, kept so
    prefixes of the path can be re-assembled cheaply.
    """

    gamma: np.ndarray
    signs: tuple[int, ...]
    upsilon: tuple[np.ndarray, ...]
    v: np.ndarray
    selected: tuple[int, ...]
    eta: float
    y: np.ndarray
    v_steps: tuple[tuple[int, np.ndarray], ...]
    width: int

    @property
    def m(self) -> int:
        return len(self.selected)

    def prefix(self, m: int) -> "SelectionPath":
        """The path truncated to its first m iterations."""
        if not 1 <= m <= self.m:
            raise ValueError(f"prefix length must be in 1..{self.m}")
        rows = 2 * m * (self.width - 1)
        v = np.zeros_like(self.v)
        for j, step in self.v_steps[:m]:
            v[:, j] += step
        return SelectionPath(
            gamma=self.gamma[:rows],
            signs=self.signs[:m],
            upsilon=self.upsilon[:m],
            v=v,
            selected=self.selected[:m],
            eta=self.eta,
            y=self.y,
            v_steps=self.v_steps[:m],
            width=self.width,
        )


def build_selection_path(fit: CwBoostFit, xt, entry_cap: int = GAMMA_ENTRY_CAP) -> SelectionPath:
    """Materialize the selection polyhedron and contrast vectors for a fit.

    For iteration m with winner jhat and sign s = sign(x_jhat' r_m), the two
    rows for each rival j are (s x_jhat'/|x_jhat| +- x_j'/|x_j|) Upsilon_m,
    the "+" row first, stacked in ascending rival order. With a single-column
    design the polyhedron has zero rows.
    """
    x = _design_matrix(xt)
    n, p = x.shape
    m_stop = fit.m_stop
    rows = 2 * m_stop * (p - 1)
    if rows * n > entry_cap:
        raise ValueError(
            f"selection polyhedron needs {rows * n} entries, above the cap {entry_cap}"
        )
    norms = np.sqrt(np.einsum("ij,ij->j", x, x))
    norms2 = norms**2
    x_unit = x / norms

    gamma = np.empty((rows, n))
    signs = []
    upsilons = []
    v_steps = []
    v = np.zeros((n, p))
    upsilon = np.eye(n)
    for i in range(m_stop):
        jhat = fit.selected[i]
        r_m = fit.residual_path[i]
        s = 1 if x[:, jhat] @ r_m >= 0 else -1
        signs.append(s)
        upsilons.append(upsilon)
        # rows of Gamma for this iteration: correlations mapped through Upsilon_m
        w = x_unit.T @ upsilon  # (p, n); row j = x_j' Upsilon_m / |x_j|
        anchor = s * w[jhat]
        block = np.empty((2 * (p - 1), n))
        idx = 0
        for j in range(p):
            if j == jhat:
                continue
            block[idx] = anchor + w[j]
            block[idx + 1] = anchor - w[j]
            idx += 2
        base = 2 * (p - 1) * i
        gamma[base : base + 2 * (p - 1)] = block
        # contrast contribution eta B_(m) Upsilon_m, nonzero only in row jhat
        step = fit.eta * (upsilon.T @ x[:, jhat]) / norms2[jhat]
        v_steps.append((jhat, step))
        v[:, jhat] += step
        col = x[:, jhat]
        upsilon = upsilon - (fit.eta / norms2[jhat]) * np.outer(col, col @ upsilon)

    if rows:
        worst = float((gamma @ fit.y).min())
        if worst < -1e-8 * max(1.0, float(np.abs(fit.y).max())):
            raise ValueError(f"realized path violates its own polyhedron (min {worst:.3e})")
    return SelectionPath(
        gamma=gamma,
        signs=tuple(signs),
        upsilon=tuple(upsilons),
        v=v,
        selected=tuple(fit.selected),
        eta=fit.eta,
        y=np.asarray(fit.y, dtype=float),
        v_steps=tuple(v_steps),
        width=p,
    )


def cw_ensemble(
    dataset: MultiStudyDataset,
    spec: BasisSpec,
    eta: float = 0.5,
    m: int | None = None,
    m_upp: int = 500,
    weights=None,
    designs: ExpandedDesigns | None = None,
):
    """Weighted ensemble of per-study component-wise fits.

    Stops each member at a fixed ``m`` when given, otherwise by its own
    corrected-AIC scan up to ``m_upp``. Returns the weighted coefficient
    vector and the per-study selection paths needed for post-selection
    inference.
    """
    if designs is None:
        dataset = _ensure_standardized(dataset)
        designs = expand_basis(dataset, spec)
    k = len(designs.per_study)
    weights = _validate_weights(weights, k)
    beta = np.zeros(designs.merged.width)
    paths = []
    offset = 0
    for w_k, design in zip(weights, designs.per_study):
        y_k = designs.merged_y[offset : offset + design.n]
        m_k = m
        if m_k is None:
            m_k, _ = cw_aicc_stop(y_k, design, eta, m_upp)
        fit = boost_componentwise(y_k, design, eta, m_k)
        paths.append(build_selection_path(fit, design))
        beta = beta + w_k * fit.coefficients
        offset += design.n
    return beta, paths
