"""Post-selection error for component-wise fits via truncated normal moments.

Conditioning on the selection polyhedron pins a selected coefficient's
contrast of a Gaussian outcome to an interval [a, b]: the interval endpoints
come from the polyhedron rows and the part of the outcome orthogonal (in the
covariance metric) to the contrast. The conditional mean squared error is
then squared bias plus variance of the resulting truncated normal. A
Fourier-Motzkin eliminator projects the polyhedron coordinate by coordinate,
which exposes the (non-rectangular) joint truncation region of several
coefficients at once.

Moments of the truncated normal are computed through scaled complementary
error functions so that intervals many standard deviations into a tail do
not underflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfcx, ndtr

from .cw_boost import SelectionPath

__all__ = [
    "GaussianModel",
    "TruncatedNormalParams",
    "Polyhedron",
    "truncation_limits",
    "truncnorm_moments",
    "conditional_mse_merged",
    "conditional_mse_ensemble",
    "fourier_motzkin_eliminate",
    "truncation_region_sequence",
]

_SQRT_HALF_PI = math.sqrt(math.pi / 2.0)
_TAIL_CUTOFF = 37.0  # |t| beyond this, Phi(t) under/overflows; treat as infinite


@dataclass(frozen=True)
class GaussianModel:
    """Gaussian outcome model: mean vector and block-diagonal covariance.

    ``sigma`` is blkdiag over studies of Z_k G Z_k' + sigma_eps2 I where G is
    diagonal with entries ``g_diag``.
    """

    mu: np.ndarray
    sigma: np.ndarray
    g_diag: np.ndarray
    sigma_eps2: float

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        sig = np.asarray(self.sigma, dtype=float)
        if sig.shape != (mu.shape[0], mu.shape[0]):
            raise ValueError("covariance shape must match the mean vector")
        if not np.allclose(sig, sig.T, atol=1e-10):
            raise ValueError("covariance must be symmetric")
        if np.any(np.asarray(self.g_diag) < 0) or self.sigma_eps2 < 0:
            raise ValueError("variance components must be nonnegative")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", 0.5 * (sig + sig.T))
        object.__setattr__(self, "g_diag", np.asarray(self.g_diag, dtype=float))

    @classmethod
    def from_structure(cls, means, z_blocks, g_diag, sigma_eps2: float) -> "GaussianModel":
        """Assemble mu and blkdiag(Z_k G Z_k' + sigma_eps2 I) from per-study parts."""
        g_diag = np.asarray(g_diag, dtype=float)
        mu = np.concatenate([np.asarray(m, dtype=float) for m in means])
        n = mu.shape[0]
        sigma = np.zeros((n, n))
        offset = 0
        for z in z_blocks:
            z = np.asarray(z, dtype=float)
            n_k = z.shape[0]
            block = (z * g_diag) @ z.T + sigma_eps2 * np.eye(n_k)
            sigma[offset : offset + n_k, offset : offset + n_k] = block
            offset += n_k
        if offset != n:
            raise ValueError("study block sizes do not match the mean vector")
        return cls(mu=mu, sigma=sigma, g_diag=g_diag, sigma_eps2=float(sigma_eps2))


@dataclass(frozen=True)
class TruncatedNormalParams:
    """Mean/variance of a contrast plus its truncation interval.

    ``alpha``/``xi`` are the standardized limits (a - mu_bar)/theta and
    (b - mu_bar)/theta; infinite limits stay infinite, never sentinels.
    """

    mu_bar: float
    theta2: float
    a: float
    b: float
    alpha: float
    xi: float

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError(f"need a < b, got [{self.a}, {self.b}]")
        if self.theta2 <= 0:
            raise ValueError("theta2 must be positive")

    @classmethod
    def from_interval(cls, mu_bar: float, theta2: float, a: float, b: float):
        theta = math.sqrt(theta2)
        return cls(
            mu_bar=float(mu_bar),
            theta2=float(theta2),
            a=float(a),
            b=float(b),
            alpha=(a - mu_bar) / theta,
            xi=(b - mu_bar) / theta,
        )


def truncation_limits(
    path: SelectionPath,
    model: GaussianModel,
    j: int,
    y: np.ndarray | None = None,
    theta_tol: float = 1e-12,
) -> TruncatedNormalParams:
    """Truncation interval of coefficient j's contrast given the selection path.

    Decomposes y into its contrast component and the remainder z_j; rows of
    the polyhedron with positive (negative) loading on the contrast direction
    give lower (upper) bounds, rows with zero loading must already be
    feasible at z_j. Empty row sets yield infinite limits.
    """
    if y is None:
        y = path.y
    y = np.asarray(y, dtype=float)
    v = path.v[:, j]
    theta2 = float(v @ model.sigma @ v)
    scale = float(np.abs(model.sigma).max()) * max(float(v @ v), 1.0)
    if theta2 <= theta_tol * max(scale, 1.0):
        raise ValueError(f"degenerate contrast for coefficient {j}")
    c = (model.sigma @ v) / theta2
    vy = float(v @ y)
    z = y - c * vy
    gamma = path.gamma
    if gamma.shape[0] == 0:
        return TruncatedNormalParams.from_interval(float(v @ model.mu), theta2, -np.inf, np.inf)
    gc = gamma @ c
    gz = gamma @ z
    zero_tol = 1e-12 * max(float(np.abs(gc).max()), 1.0)
    pos = gc > zero_tol
    neg = gc < -zero_tol
    none_of = ~(pos | neg)
    if np.any(none_of):
        slack = gz[none_of]
        if slack.min() < -1e-8 * max(1.0, float(np.abs(gz).max())):
            raise ValueError(
                "zero-loading polyhedron rows are infeasible at the observed remainder"
            )
    a = float(np.max(-gz[pos] / gc[pos])) if np.any(pos) else -np.inf
    b = float(np.min(-gz[neg] / gc[neg])) if np.any(neg) else np.inf
    if not a < b:
        raise ValueError(f"inconsistent truncation interval [{a}, {b}]")
    return TruncatedNormalParams.from_interval(float(v @ model.mu), theta2, a, b)


def _std_moments_right(alpha: float, xi: float) -> tuple[float, float]:
    """Standardized truncated-normal moments on [alpha, xi] with alpha >= 0.

    Works in Mills-ratio space R(t) = Phi_c(t)/phi(t) = erfcx(t/sqrt(2)) *
    sqrt(pi/2), which stays well-scaled arbitrarily far into the right tail.
    """
    if math.isinf(xi):
        r = float(erfcx(alpha / math.sqrt(2.0))) * _SQRT_HALF_PI
        h = 1.0 / r
        return h, 1.0 + alpha * h - h * h
    r_a = float(erfcx(alpha / math.sqrt(2.0))) * _SQRT_HALF_PI
    r_x = float(erfcx(xi / math.sqrt(2.0))) * _SQRT_HALF_PI
    rho = math.exp((alpha - xi) * (alpha + xi) / 2.0)  # phi(xi)/phi(alpha)
    denom = r_a - rho * r_x
    if denom <= 0:
        raise ValueError("numerically empty truncation")
    m1 = (1.0 - rho) / denom
    m2 = (xi * rho - alpha) / denom
    return m1, 1.0 - m2 - m1 * m1


def _std_moments(alpha: float, xi: float) -> tuple[float, float]:
    """Mean and variance of a standard normal truncated to [alpha, xi]."""
    if alpha >= xi:
        raise ValueError("numerically empty truncation")
    if alpha <= -_TAIL_CUTOFF:
        alpha = -np.inf
    if xi >= _TAIL_CUTOFF:
        xi = np.inf
    if math.isinf(alpha) and math.isinf(xi):
        return 0.0, 1.0
    if xi - alpha < 1e-7:
        # interval much narrower than the density's scale of variation
        return 0.5 * (alpha + xi), (xi - alpha) ** 2 / 12.0
    if alpha >= 0.0:
        return _std_moments_right(alpha, xi)
    if xi <= 0.0:
        m1, var = _std_moments_right(-xi, -alpha)
        return -m1, var
    # interval straddles zero: direct CDF difference is well conditioned
    mass = float(ndtr(xi) - ndtr(alpha))
    if mass <= 1e-300:
        raise ValueError("numerically empty truncation")
    phi_a = 0.0 if math.isinf(alpha) else math.exp(-0.5 * alpha * alpha) / math.sqrt(2 * math.pi)
    phi_x = 0.0 if math.isinf(xi) else math.exp(-0.5 * xi * xi) / math.sqrt(2 * math.pi)
    a_term = 0.0 if math.isinf(alpha) else alpha * phi_a
    x_term = 0.0 if math.isinf(xi) else xi * phi_x
    m1 = (phi_a - phi_x) / mass
    m2 = (x_term - a_term) / mass
    return m1, 1.0 - m2 - m1 * m1


def truncnorm_moments(params: TruncatedNormalParams) -> tuple[float, float]:
    """Mean and variance of the truncated normal described by ``params``.

    mean = mu_bar - theta (phi(xi) - phi(alpha)) / (Phi(xi) - Phi(alpha));
    variance scales theta2 by the usual one-minus-tail-adjustment factor.
    Raises "numerically empty truncation" when the interval carries no mass
    at working precision.
    """
    m1, var_factor = _std_moments(params.alpha, params.xi)
    theta = math.sqrt(params.theta2)
    return params.mu_bar + theta * m1, params.theta2 * var_factor


def conditional_mse_merged(
    path: SelectionPath,
    model: GaussianModel,
    j: int,
    y: np.ndarray | None = None,
    beta_j: float = 0.0,
) -> tuple[float, float, float]:
    """Conditional MSE of merged coefficient j about target beta_j.

    Returns (mse, bias2, variance) where bias is the truncated-normal mean
    minus the target.
    """
    params = truncation_limits(path, model, j, y)
    mean, var = truncnorm_moments(params)
    bias2 = (mean - beta_j) ** 2
    return bias2 + var, bias2, var


def conditional_mse_ensemble(
    paths,
    models,
    j: int,
    weights,
    beta_j: float = 0.0,
    ys=None,
) -> tuple[float, float, float]:
    """Conditional MSE of the weighted ensemble coefficient j.

    The bias term weights the per-study truncated means before subtracting
    the target; the variance term sums squared-weighted per-study truncated
    variances (studies are independent).
    """
    k = len(paths)
    if len(models) != k:
        raise ValueError("need one model per study path")
    w = np.asarray(weights, dtype=float)
    if w.shape != (k,):
        raise ValueError(f"need {k} weights")
    if ys is None:
        ys = [None] * k
    mean_mix = 0.0
    var_mix = 0.0
    for path, model, w_k, y_k in zip(paths, models, w, ys):
        params = truncation_limits(path, model, j, y_k)
        mean, var = truncnorm_moments(params)
        mean_mix += w_k * mean
        var_mix += w_k**2 * var
    bias2 = (mean_mix - beta_j) ** 2
    return bias2 + var_mix, bias2, var_mix


@dataclass(frozen=True)
class Polyhedron:
    """Linear inequality system a_mat @ x >= b_vec."""

    a_mat: np.ndarray
    b_vec: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a_mat, dtype=float))
        b = np.asarray(self.b_vec, dtype=float)
        if a.shape[0] != b.shape[0]:
            raise ValueError("row counts of a_mat and b_vec differ")
        object.__setattr__(self, "a_mat", a)
        object.__setattr__(self, "b_vec", b)

    @property
    def rows(self) -> int:
        return self.a_mat.shape[0]

    @property
    def vars(self) -> int:
        return self.a_mat.shape[1]

    def contains(self, x: np.ndarray, tol: float = 1e-9) -> bool:
        if self.rows == 0:
            return True
        return bool(np.all(self.a_mat @ np.asarray(x, dtype=float) >= self.b_vec - tol))


def fourier_motzkin_eliminate(poly: Polyhedron, var: int) -> Polyhedron:
    """Project the polyhedron onto the coordinates other than ``var``.

    Rows are split by the sign of their coefficient on ``var``; each
    positive/negative pair combines into one new row, zero rows carry over
    with the column dropped. The output may have zero rows (whole space).
    """
    if not 0 <= var < poly.vars:
        raise ValueError(f"variable {var} out of range for {poly.vars} columns")
    a, b = poly.a_mat, poly.b_vec
    coeff = a[:, var]
    keep = [c for c in range(poly.vars) if c != var]
    pos = np.flatnonzero(coeff > 0)
    neg = np.flatnonzero(coeff < 0)
    zero = np.flatnonzero(coeff == 0)
    new_rows = []
    new_rhs = []
    for q in pos:
        for r in neg:
            # scale so the var coefficients cancel; both multipliers positive
            row = (-coeff[r]) * a[q, keep] + coeff[q] * a[r, keep]
            rhs = (-coeff[r]) * b[q] + coeff[q] * b[r]
            new_rows.append(row)
            new_rhs.append(rhs)
    for s in zero:
        new_rows.append(a[s, keep])
        new_rhs.append(b[s])
    if new_rows:
        return Polyhedron(np.array(new_rows), np.array(new_rhs))
    return Polyhedron(np.empty((0, len(keep))), np.empty(0))


def truncation_region_sequence(
    path: SelectionPath,
    model: GaussianModel,
    y: np.ndarray | None = None,
    coords=None,
):
    """Per-coordinate truncation bounds of the joint contrast vector.

    Rewrites the selection polyhedron in the coordinates t = V' y (restricted
    to ``coords``, by default the distinct selected columns in ascending
    order, where the contrasts are nonzero), then eliminates coordinates from
    the last to the first. Before eliminating coordinate p it records that
    coordinate's lower/upper bounds with the *observed* values of the
    preceding coordinates substituted in. Returns a list of (lower, upper)
    pairs aligned with ``coords``; the observed t lies inside every pair.
    The region is non-rectangular: each pair is only valid at the observed
    values of the earlier coordinates.
    """
    if y is None:
        y = path.y
    y = np.asarray(y, dtype=float)
    if coords is None:
        coords = sorted(set(path.selected))
    coords = list(coords)
    v = path.v[:, coords]
    vtsv = v.T @ model.sigma @ v
    cond = np.linalg.cond(vtsv)
    if not np.isfinite(cond) or cond > 1e12:
        raise ValueError("contrast covariance is singular over the requested coordinates")
    c_mat = model.sigma @ v @ np.linalg.inv(vtsv)
    t_obs = v.T @ y
    z_star = y - c_mat @ t_obs
    if path.gamma.shape[0] == 0:
        return [(-np.inf, np.inf) for _ in coords]
    poly = Polyhedron(path.gamma @ c_mat, -(path.gamma @ z_star))

    bounds: list[tuple[float, float]] = [None] * len(coords)
    for p in range(len(coords) - 1, -1, -1):
        a, b = poly.a_mat, poly.b_vec
        coeff = a[:, p]
        rest = a[:, :p] @ t_obs[:p] if p else np.zeros(a.shape[0])
        pos = coeff > 0
        neg = coeff < 0
        lo = float(np.max((b[pos] - rest[pos]) / coeff[pos])) if np.any(pos) else -np.inf
        up = float(np.min((b[neg] - rest[neg]) / coeff[neg])) if np.any(neg) else np.inf
        bounds[p] = (lo, up)
        if p:
            poly = fourier_motzkin_eliminate(poly, p)
    return bounds
