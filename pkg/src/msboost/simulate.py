"""Mixed-effects data generation and the merge-vs-ensemble experiments.

Predictors are drawn once per experiment (Gaussian by default, or rows of a
CSV); replicates redraw only the random effects and noise, so the designs,
tuned hyperparameters, and hence the theoretical transition point stay fixed
across replicates.

All quantities live on one common scale: the pooled training rows are
expanded and standardized once, and each study's design is its row slice of
that matrix (test rows are mapped through the same constants). The
generating truth applies the mean coefficients to those columns and the
random effects to the standardized random-effect columns. One scale keeps
outcome means exactly centered, keeps every fit exactly linear in the
outcomes (what the analytic error formulas assume), and makes the merged and
per-study coefficients target the same true value, without which the
path-conditional error comparison would not be apples to apples.

Every random stream is derived from the base seed and the unit of work's
indices, so results are identical for any worker count.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .cw_boost import boost_componentwise, build_selection_path, cw_aicc_stop
from .dataset import BasisSpec, ExpandedMatrix, Linear, MultiStudyDataset, Study, TruncatedPowerCubic
from .linear_boost import aicc_stop, boost_linear, ridge_operators
from .selective import GaussianModel, conditional_mse_ensemble, conditional_mse_merged
from .transition import TransitionInputs, compute_r, transition_interval, transition_point

__all__ = [
    "MeanFunction",
    "GeneratorSpec",
    "LearnerConfig",
    "ExperimentDesign",
    "SimulatedData",
    "ExperimentResult",
    "benchmark_mean_function",
    "build_design",
    "generate",
    "run_transition_sweep",
    "run_conditional_mse_curve",
    "export_results",
]

TUNING_ROWS = 400
RESULT_COLUMNS = [
    "experiment",
    "grid_sigma_bar2",
    "replicate",
    "m",
    "mspe_merge",
    "mspe_ens",
    "log_ratio",
    "cmse_merge",
    "cmse_ens",
    "tau",
    "tau1",
    "tau2",
]
SUMMARY_COLUMNS = [
    "grid_sigma_bar2",
    "mean_log_ratio",
    "boot_lo",
    "boot_hi",
    "replicates",
    "tau",
    "tau1",
    "tau2",
]


@dataclass(frozen=True)
class MeanFunction:
    """Coefficients applied to the standardized expanded design columns."""

    coefficients: tuple[float, ...]
    basis: BasisSpec

    def __post_init__(self):
        if len(self.coefficients) != self.basis.width:
            raise ValueError(
                f"{len(self.coefficients)} coefficients for width-{self.basis.width} basis"
            )
        object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))

    @property
    def p(self) -> int:
        return self.basis.p

    def evaluate(self, xt_std: np.ndarray) -> np.ndarray:
        return xt_std @ np.asarray(self.coefficients)


def benchmark_mean_function() -> MeanFunction:
    """The 10-predictor benchmark mean: cubic basis with a knot at 0 on the
    first predictor, the rest linear."""
    basis = BasisSpec((TruncatedPowerCubic((0.0,)),) + tuple(Linear() for _ in range(9)))
    coefficients = (
        -0.28, -0.12, -0.78, 0.035,   # first predictor's four basis columns
        -0.23, 1.56, -0.0056, 0.13, 0.0013, -0.00071, -0.0023, -0.69, 0.016,
    )
    return MeanFunction(coefficients=coefficients, basis=basis)


@dataclass(frozen=True)
class GeneratorSpec:
    """Shape of one simulated multi-study problem.

    ``random_effect_predictors`` are 0-based predictor indices whose expanded
    columns carry random effects (the benchmark default is predictors 2..6,
    i.e. the third through seventh). ``predictor_source`` is "gaussian" or a
    ``("csv", path)`` pair whose rows are consumed in order.
    """

    k_train: int = 4
    v_test: int = 4
    n_per_study: int = 100
    mean_function: MeanFunction = field(default_factory=benchmark_mean_function)
    random_effect_predictors: tuple[int, ...] = (2, 3, 4, 5, 6)
    sigma_eps2: float = 1.0
    predictor_source: object = "gaussian"
    seed: int = 0

    def __post_init__(self):
        if self.k_train < 1:
            raise ValueError("need at least one training study")
        if self.n_per_study < 2:
            raise ValueError("need at least two rows per study")
        if self.sigma_eps2 < 0:
            raise ValueError("sigma_eps2 must be nonnegative")


@dataclass(frozen=True)
class LearnerConfig:
    """Learner family and tuning controls for harness fits.

    Leave ``lam`` unset to tune it on the held-out draw over ``lambda_grid``;
    leave ``m`` unset to stop by corrected AIC on the held-out draw (the
    chosen iteration counts are then fixed across replicates, as the
    transition theory assumes).
    """

    kind: str = "ridge"
    lam: float | None = None
    lambda_grid: tuple[float, ...] = (0.1, 1.0, 10.0, 100.0)
    eta: float = 0.5
    m: int | None = None
    m_upp: int = 500

    def __post_init__(self):
        if self.kind not in ("ridge", "componentwise"):
            raise ValueError(f"unknown learner kind {self.kind!r}")


@dataclass(frozen=True)
class ExperimentDesign:
    """Everything fixed once the predictors are drawn."""

    spec: GeneratorSpec
    train: tuple[ExpandedMatrix, ...]
    test: tuple[ExpandedMatrix, ...]
    merged: ExpandedMatrix
    xt0: np.ndarray
    f_train_k: tuple[np.ndarray, ...]
    f_test_k: tuple[np.ndarray, ...]
    z_cols: tuple[int, ...]
    tuning_design: ExpandedMatrix
    tuning_pred: np.ndarray
    f_tuning: np.ndarray
    raw_train: tuple[np.ndarray, ...]
    raw_test: tuple[np.ndarray, ...]

    @property
    def width(self) -> int:
        return self.merged.width

    @property
    def q(self) -> int:
        return len(self.z_cols)

    @property
    def f_train(self) -> np.ndarray:
        return np.concatenate(self.f_train_k)

    @property
    def f_test(self) -> np.ndarray:
        return np.concatenate(self.f_test_k)

    @property
    def z_train(self) -> tuple[np.ndarray, ...]:
        return tuple(d.xt[:, list(self.z_cols)] for d in self.train)

    @property
    def z_test(self) -> tuple[np.ndarray, ...]:
        return tuple(d.xt[:, list(self.z_cols)] for d in self.test)

    def g_diag(self, sigma_bar2: float, pattern=None) -> np.ndarray:
        """Random-effect variances realizing an average heterogeneity level.

        With no pattern the variances are equal; a pattern of relative sizes
        (length Q) is rescaled so tr(G)/P equals ``sigma_bar2``.
        """
        if pattern is None:
            return np.full(self.q, sigma_bar2 * self.width / self.q)
        pattern = np.asarray(pattern, dtype=float)
        if pattern.shape != (self.q,) or np.any(pattern < 0) or pattern.sum() == 0:
            raise ValueError(f"variance pattern must be {self.q} nonnegative sizes")
        return pattern * (sigma_bar2 * self.width / pattern.sum())


@dataclass(frozen=True)
class SimulatedData:
    """One outcome draw plus the truth it was generated from."""

    design: ExperimentDesign
    y_train: tuple[np.ndarray, ...]
    y_test: tuple[np.ndarray, ...]
    gammas_train: tuple[np.ndarray, ...]
    gammas_test: tuple[np.ndarray, ...]
    g_diag: np.ndarray

    @property
    def y_merged(self) -> np.ndarray:
        return np.concatenate(self.y_train)

    @property
    def dataset(self) -> MultiStudyDataset:
        """The draw as raw studies, ready for the standardization pipeline."""
        train = [
            Study(id=f"train{k}", x=x, y=y)
            for k, (x, y) in enumerate(zip(self.design.raw_train, self.y_train))
        ]
        test = [
            Study(id=f"test{v}", x=x, y=y)
            for v, (x, y) in enumerate(zip(self.design.raw_test, self.y_test))
        ]
        return MultiStudyDataset(training=train, test=test)


@dataclass(frozen=True)
class ExperimentResult:
    """Replicate-level and summarized outputs of one experiment run."""

    kind: str
    seed: int
    replicates: int
    grid_sigma_bar2: np.ndarray
    config: dict
    mspe_merge: np.ndarray | None = None
    mspe_ens: np.ndarray | None = None
    log_ratio: np.ndarray | None = None
    mean_log_ratio: np.ndarray | None = None
    boot_lo: np.ndarray | None = None
    boot_hi: np.ndarray | None = None
    tau: float | None = None
    tau1: float | None = None
    tau2: float | None = None
    crossing_bracket: tuple[float, float] | None = None
    m_grid: np.ndarray | None = None
    cmse_merge: np.ndarray | None = None
    cmse_ens: np.ndarray | None = None
    cmse_dropped: np.ndarray | None = None


def _seed_seq(seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))


def _standardize_cols(raw: np.ndarray):
    centers = raw.mean(axis=0)
    centered = raw - centers
    norms = np.linalg.norm(centered, axis=0)
    scales = np.where(norms <= 0, 1.0, norms)
    return centered / scales, centers, scales


def _expanded(raw_x: np.ndarray, basis: BasisSpec, z_cols) -> ExpandedMatrix:
    xt, centers, scales = _standardize_cols(basis.evaluate(raw_x))
    return ExpandedMatrix(
        xt=xt,
        column_map=tuple(basis.column_map()),
        random_effect_columns=tuple(z_cols),
        spec=basis,
        centers=centers,
        scales=scales,
    )


def _draw_predictors(spec: GeneratorSpec, n_rows: int) -> np.ndarray:
    p = spec.mean_function.p
    source = spec.predictor_source
    if source == "gaussian":
        rng = np.random.default_rng(_seed_seq(spec.seed, 0))
        return rng.standard_normal((n_rows, p))
    if isinstance(source, (tuple, list)) and len(source) == 2 and source[0] == "csv":
        frame = pd.read_csv(source[1])
        values = frame.to_numpy(dtype=float)
        if values.shape[0] < n_rows:
            raise ValueError(
                f"predictor CSV has {values.shape[0]} rows, need {n_rows}"
            )
        if values.shape[1] < p:
            raise ValueError(f"predictor CSV has {values.shape[1]} columns, need {p}")
        return values[:n_rows, :p]
    raise ValueError(f"unknown predictor source {source!r}")


def build_design(spec: GeneratorSpec) -> ExperimentDesign:
    """Draw predictors and freeze all design-side quantities."""
    basis = spec.mean_function.basis
    cmap = basis.column_map()
    re_set = set(int(j) for j in spec.random_effect_predictors)
    if any(j < 0 or j >= basis.p for j in re_set):
        raise ValueError("random-effect predictor index out of range")
    z_cols = tuple(c for c, (j, _) in enumerate(cmap) if j in re_set)

    n = spec.n_per_study
    total = (spec.k_train + spec.v_test) * n + TUNING_ROWS
    rows = _draw_predictors(spec, total)
    raw_train = tuple(rows[i * n : (i + 1) * n] for i in range(spec.k_train))
    off = spec.k_train * n
    raw_test = tuple(rows[off + i * n : off + (i + 1) * n] for i in range(spec.v_test))
    raw_tuning = rows[off + spec.v_test * n :]

    merged = _expanded(np.vstack(raw_train), basis, z_cols)

    def on_merged_scale(xt_rows: np.ndarray) -> ExpandedMatrix:
        return ExpandedMatrix(
            xt=xt_rows,
            column_map=merged.column_map,
            random_effect_columns=z_cols,
            spec=basis,
            centers=merged.centers,
            scales=merged.scales,
        )

    train = tuple(on_merged_scale(merged.xt[i * n : (i + 1) * n]) for i in range(spec.k_train))
    xt0 = (
        np.vstack([merged.apply(r) for r in raw_test])
        if raw_test
        else np.empty((0, merged.width))
    )
    test = tuple(on_merged_scale(xt0[i * n : (i + 1) * n]) for i in range(spec.v_test))
    tuning_pred = merged.apply(raw_tuning)
    coeffs = np.asarray(spec.mean_function.coefficients)
    return ExperimentDesign(
        spec=spec,
        train=train,
        test=test,
        merged=merged,
        xt0=xt0,
        f_train_k=tuple(d.xt @ coeffs for d in train),
        f_test_k=tuple(d.xt @ coeffs for d in test),
        z_cols=z_cols,
        tuning_design=on_merged_scale(tuning_pred),
        tuning_pred=tuning_pred,
        f_tuning=tuning_pred @ coeffs,
        raw_train=raw_train,
        raw_test=raw_test,
    )


def _draw_outcomes(design: ExperimentDesign, g_diag: np.ndarray, rng: np.random.Generator):
    g_sd = np.sqrt(g_diag)
    y_train, y_test, gam_train, gam_test = [], [], [], []
    for f_k, z_k in zip(design.f_train_k, design.z_train):
        gamma = rng.standard_normal(design.q) * g_sd
        eps = rng.standard_normal(z_k.shape[0]) * np.sqrt(design.spec.sigma_eps2)
        y_train.append(f_k + z_k @ gamma + eps)
        gam_train.append(gamma)
    for f_v, z_v in zip(design.f_test_k, design.z_test):
        gamma = rng.standard_normal(design.q) * g_sd
        eps = rng.standard_normal(z_v.shape[0]) * np.sqrt(design.spec.sigma_eps2)
        y_test.append(f_v + z_v @ gamma + eps)
        gam_test.append(gamma)
    return tuple(y_train), tuple(y_test), tuple(gam_train), tuple(gam_test)


def generate(
    spec: GeneratorSpec,
    g_diag=None,
    sigma_bar2: float | None = None,
    outcome_key: int = 0,
) -> SimulatedData:
    """One dataset draw: outcomes are mean function plus study-level random
    effects on the random-effect columns plus residual noise.

    Pass either an explicit ``g_diag`` (length Q) or an average heterogeneity
    ``sigma_bar2`` (expanded to equal variances); both absent means no random
    effects. The same spec, variances, and outcome key reproduce the draw
    bit for bit.
    """
    design = build_design(spec)
    if g_diag is not None and sigma_bar2 is not None:
        raise ValueError("pass g_diag or sigma_bar2, not both")
    if g_diag is None:
        g_diag = design.g_diag(sigma_bar2) if sigma_bar2 is not None else np.zeros(design.q)
    g_diag = np.asarray(g_diag, dtype=float)
    if g_diag.shape != (design.q,):
        raise ValueError(f"g_diag must have length {design.q}")
    rng = np.random.default_rng(_seed_seq(spec.seed, 1, 0, int(outcome_key)))
    y_train, y_test, gam_train, gam_test = _draw_outcomes(design, g_diag, rng)
    return SimulatedData(
        design=design,
        y_train=y_train,
        y_test=y_test,
        gammas_train=gam_train,
        gammas_test=gam_test,
        g_diag=g_diag,
    )


@dataclass(frozen=True)
class _RidgeOperators:
    lam: float
    m_merged: int
    m_study: tuple[int, ...]
    r_merge: np.ndarray
    r_study: tuple[np.ndarray, ...]


def _tune_ridge(design: ExperimentDesign, learner: LearnerConfig) -> _RidgeOperators:
    """Pick lambda by held-out error and freeze iteration counts.

    The tuning outcomes are a dedicated sub-seeded draw with the random
    effects switched off; the merged fit's held-out squared error selects
    lambda, then the corrected AIC fixes the merged and per-study stops.
    """
    rng = np.random.default_rng(_seed_seq(design.spec.seed, 2))
    sig = np.sqrt(design.spec.sigma_eps2)
    y_train_k = [f + rng.standard_normal(f.shape[0]) * sig for f in design.f_train_k]
    y_merged = np.concatenate(y_train_k)
    y_tuning = design.f_tuning + rng.standard_normal(design.f_tuning.shape[0]) * sig

    lams = (learner.lam,) if learner.lam is not None else learner.lambda_grid
    best = None
    for lam in lams:
        op = ridge_operators(design.merged, lam)
        if learner.m is not None:
            m_merged = learner.m
        else:
            m_merged, _ = aicc_stop(y_merged, op, learner.eta, learner.m_upp)
        beta = boost_linear(y_merged, op, learner.eta, m_merged).coefficients
        err = float(np.sum((y_tuning - design.tuning_pred @ beta) ** 2))
        if best is None or err < best[0]:
            best = (err, lam, m_merged, op)
    _, lam, m_merged, op = best

    m_study = []
    r_study = []
    for d, y_k in zip(design.train, y_train_k):
        op_k = ridge_operators(d, lam)
        if learner.m is not None:
            m_k = learner.m
        else:
            m_k, _ = aicc_stop(y_k, op_k, learner.eta, learner.m_upp)
        m_study.append(m_k)
        r_study.append(compute_r(op_k, learner.eta, m_k))
    return _RidgeOperators(
        lam=float(lam),
        m_merged=m_merged,
        m_study=tuple(m_study),
        r_merge=compute_r(op, learner.eta, m_merged),
        r_study=tuple(r_study),
    )


def _tune_componentwise(design: ExperimentDesign, learner: LearnerConfig):
    """Fix component-wise stops on the tuning draw (or use the given m)."""
    if learner.m is not None:
        return learner.m, tuple(learner.m for _ in design.train)
    rng = np.random.default_rng(_seed_seq(design.spec.seed, 2))
    sig = np.sqrt(design.spec.sigma_eps2)
    y_train_k = [f + rng.standard_normal(f.shape[0]) * sig for f in design.f_train_k]
    m_merged, _ = cw_aicc_stop(np.concatenate(y_train_k), design.merged, learner.eta, learner.m_upp)
    m_study = tuple(
        cw_aicc_stop(y_k, d, learner.eta, learner.m_upp)[0]
        for d, y_k in zip(design.train, y_train_k)
    )
    return m_merged, m_study


def transition_inputs_from_design(
    design: ExperimentDesign, ops: _RidgeOperators, weights: np.ndarray, g_diag: np.ndarray
) -> TransitionInputs:
    return TransitionInputs(
        r_merge=ops.r_merge,
        r_study=ops.r_study,
        xt0=design.xt0,
        f_train=design.f_train,
        f_train_k=design.f_train_k,
        f_test=design.f_test,
        z_train=design.z_train,
        weights=weights,
        sigma_eps2=design.spec.sigma_eps2,
        g_diag=g_diag,
        z_test=design.z_test,
    )


def _crossing_bracket(grid: np.ndarray, mean_log_ratio: np.ndarray):
    sign = np.sign(mean_log_ratio)
    for i in range(len(grid) - 1):
        if sign[i] != 0 and sign[i + 1] != 0 and sign[i] != sign[i + 1]:
            return (float(grid[i]), float(grid[i + 1]))
    return None


def run_transition_sweep(
    spec: GeneratorSpec,
    grid,
    replicates: int,
    learner: LearnerConfig | None = None,
    weights=None,
    threads: int = 1,
    bootstrap_resamples: int = 1000,
    variance_pattern=None,
) -> ExperimentResult:
    """Empirical merged-vs-ensemble error ratios over a heterogeneity grid.

    Fits both strategies on every replicate at every grid value, records the
    per-replicate squared prediction errors on the pooled test rows, and
    summarizes the log ratio per grid value with a percentile bootstrap. For
    ridge learners the theoretical transition point (equal variances) or
    interval (a ``variance_pattern`` of relative random-effect sizes) is
    computed from the same frozen operators and overlaid; the empirical
    crossing bracket is the grid cell where the mean log ratio changes sign.
    """
    if replicates < 2:
        raise ValueError("need at least two replicates")
    if spec.v_test < 1:
        raise ValueError("sweep needs at least one test study to evaluate errors")
    learner = learner or LearnerConfig()
    grid = np.asarray(sorted(float(g) for g in grid))
    if grid.size == 0 or np.any(grid < 0):
        raise ValueError("grid values must be nonnegative heterogeneity levels")
    design = build_design(spec)
    weights = np.full(spec.k_train, 1.0 / spec.k_train) if weights is None else np.asarray(weights, float)

    tau = tau1 = tau2 = None
    if learner.kind == "ridge":
        ops = _tune_ridge(design, learner)
        predict_merge = design.xt0 @ ops.r_merge

        def fit_both(y_train_k, y_merged):
            pred_m = predict_merge @ y_merged
            pred_e = np.zeros(design.xt0.shape[0])
            for w_k, r_k, y_k in zip(weights, ops.r_study, y_train_k):
                pred_e += w_k * (design.xt0 @ (r_k @ y_k))
            return pred_m, pred_e

        inputs = transition_inputs_from_design(
            design, ops, weights, design.g_diag(1.0, variance_pattern)
        )
        if variance_pattern is None:
            tau = transition_point(inputs).tau
            tau1 = tau2 = tau
        else:
            interval = transition_interval(inputs)
            tau1, tau2 = interval.tau1, interval.tau2
    else:
        m_merged, m_study = _tune_componentwise(design, learner)

        def fit_both(y_train_k, y_merged):
            fit_m = boost_componentwise(y_merged, design.merged, learner.eta, m_merged)
            pred_m = design.xt0 @ fit_m.coefficients
            beta_e = np.zeros(design.width)
            for w_k, d, y_k, m_k in zip(weights, design.train, y_train_k, m_study):
                beta_e += w_k * boost_componentwise(y_k, d, learner.eta, m_k).coefficients
            return pred_m, design.xt0 @ beta_e

    def run_one(task):
        g_idx, rep = task
        g_diag = design.g_diag(float(grid[g_idx]), variance_pattern)
        rng = np.random.default_rng(_seed_seq(spec.seed, 1, g_idx, rep))
        y_train, y_test, _, _ = _draw_outcomes(design, g_diag, rng)
        y0 = np.concatenate(y_test)
        pred_m, pred_e = fit_both(y_train, np.concatenate(y_train))
        return float(np.sum((y0 - pred_m) ** 2)), float(np.sum((y0 - pred_e) ** 2))

    tasks = [(g, r) for g in range(len(grid)) for r in range(replicates)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            flat = list(pool.map(run_one, tasks))
    else:
        flat = [run_one(t) for t in tasks]

    mspe_m = np.array([v[0] for v in flat]).reshape(len(grid), replicates)
    mspe_e = np.array([v[1] for v in flat]).reshape(len(grid), replicates)
    log_ratio = np.log(mspe_e / mspe_m)
    mean_log_ratio = log_ratio.mean(axis=1)

    boot_lo = np.empty(len(grid))
    boot_hi = np.empty(len(grid))
    for g in range(len(grid)):
        rng = np.random.default_rng(_seed_seq(spec.seed, 3, g))
        idx = rng.integers(0, replicates, size=(bootstrap_resamples, replicates))
        means = log_ratio[g][idx].mean(axis=1)
        boot_lo[g], boot_hi[g] = np.percentile(means, [2.5, 97.5])

    return ExperimentResult(
        kind="transition_sweep",
        seed=spec.seed,
        replicates=replicates,
        grid_sigma_bar2=grid,
        config=_config_record(
            spec,
            learner,
            grid=grid.tolist(),
            replicates=replicates,
            variance_pattern=None if variance_pattern is None else list(variance_pattern),
        ),
        mspe_merge=mspe_m,
        mspe_ens=mspe_e,
        log_ratio=log_ratio,
        mean_log_ratio=mean_log_ratio,
        boot_lo=boot_lo,
        boot_hi=boot_hi,
        tau=tau,
        tau1=tau1,
        tau2=tau2,
        crossing_bracket=_crossing_bracket(grid, mean_log_ratio),
    )


def run_conditional_mse_curve(
    spec: GeneratorSpec,
    sigma_bar2_values,
    m_max: int,
    target_coefficient: int,
    replicates: int = 20,
    eta: float = 0.5,
    weights=None,
    beta_target: float | None = None,
    threads: int = 1,
) -> ExperimentResult:
    """Path-conditional squared error of one component-wise coefficient.

    For every replicate the merged and per-study fits run to ``m_max``; at
    each iteration the selection-path polyhedron up to that point and the
    true outcome law give the conditional bias/variance of the target
    coefficient for both strategies. Replicates where the target was not yet
    selected (or the interval carries no mass) are dropped from that
    iteration's average and counted.
    """
    design = build_design(spec)
    if not 0 <= target_coefficient < design.width:
        raise ValueError("target coefficient out of range")
    values = np.asarray([float(s) for s in sigma_bar2_values])
    if values.size == 0 or np.any(values < 0):
        raise ValueError("sigma_bar2 values must be nonnegative")
    weights = np.full(spec.k_train, 1.0 / spec.k_train) if weights is None else np.asarray(weights, float)
    if beta_target is None:
        beta_target = float(spec.mean_function.coefficients[target_coefficient])

    def run_cell(task):
        s_idx, rep = task
        g_diag = design.g_diag(float(values[s_idx]))
        model_merged = GaussianModel.from_structure(
            design.f_train_k, design.z_train, g_diag, spec.sigma_eps2
        )
        models_k = [
            GaussianModel.from_structure([f], [z], g_diag, spec.sigma_eps2)
            for f, z in zip(design.f_train_k, design.z_train)
        ]
        rng = np.random.default_rng(_seed_seq(spec.seed, 1, s_idx, rep))
        y_train, _, _, _ = _draw_outcomes(design, g_diag, rng)
        y_merged = np.concatenate(y_train)
        path_m = build_selection_path(
            boost_componentwise(y_merged, design.merged, eta, m_max), design.merged
        )
        paths_k = [
            build_selection_path(boost_componentwise(y_k, d, eta, m_max), d)
            for d, y_k in zip(design.train, y_train)
        ]
        cm = np.full(m_max, np.nan)
        ce = np.full(m_max, np.nan)
        for m in range(1, m_max + 1):
            try:
                cm[m - 1] = conditional_mse_merged(
                    path_m.prefix(m), model_merged, target_coefficient, beta_j=beta_target
                )[0]
            except ValueError:
                pass
            try:
                ce[m - 1] = conditional_mse_ensemble(
                    [p.prefix(m) for p in paths_k],
                    models_k,
                    target_coefficient,
                    weights,
                    beta_j=beta_target,
                )[0]
            except ValueError:
                pass
        return cm, ce

    tasks = [(s, r) for s in range(len(values)) for r in range(replicates)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            flat = list(pool.map(run_cell, tasks))
    else:
        flat = [run_cell(t) for t in tasks]

    cmse_m = np.full((len(values), m_max), np.nan)
    cmse_e = np.full((len(values), m_max), np.nan)
    dropped = np.zeros((len(values), m_max), dtype=int)
    for s in range(len(values)):
        block_m = np.stack([flat[s * replicates + r][0] for r in range(replicates)])
        block_e = np.stack([flat[s * replicates + r][1] for r in range(replicates)])
        ok = ~(np.isnan(block_m) | np.isnan(block_e))
        dropped[s] = replicates - ok.sum(axis=0)
        with np.errstate(invalid="ignore"):
            for m in range(m_max):
                if ok[:, m].any():
                    cmse_m[s, m] = block_m[ok[:, m], m].mean()
                    cmse_e[s, m] = block_e[ok[:, m], m].mean()

    return ExperimentResult(
        kind="cmse_curve",
        seed=spec.seed,
        replicates=replicates,
        grid_sigma_bar2=values,
        config=_config_record(
            spec,
            LearnerConfig(kind="componentwise", eta=eta, m=m_max),
            sigma_bar2_values=values.tolist(),
            m_max=m_max,
            target_coefficient=target_coefficient,
            beta_target=beta_target,
            replicates=replicates,
        ),
        m_grid=np.arange(1, m_max + 1),
        cmse_merge=cmse_m,
        cmse_ens=cmse_e,
        cmse_dropped=dropped,
    )


def _config_record(spec: GeneratorSpec, learner: LearnerConfig, **run_params) -> dict:
    basis = []
    for entry in spec.mean_function.basis.entries:
        if isinstance(entry, TruncatedPowerCubic):
            basis.append({"cubic_knots": list(entry.knots)})
        else:
            basis.append("linear")
    return {
        "generator": {
            "k_train": spec.k_train,
            "v_test": spec.v_test,
            "n_per_study": spec.n_per_study,
            "mean_coefficients": list(spec.mean_function.coefficients),
            "basis": basis,
            "random_effect_predictors": list(spec.random_effect_predictors),
            "sigma_eps2": spec.sigma_eps2,
            "predictor_source": list(spec.predictor_source)
            if isinstance(spec.predictor_source, (tuple, list))
            else spec.predictor_source,
            "seed": spec.seed,
        },
        "learner": {
            "kind": learner.kind,
            "lam": learner.lam,
            "lambda_grid": list(learner.lambda_grid),
            "eta": learner.eta,
            "m": learner.m,
            "m_upp": learner.m_upp,
        },
        "run": run_params,
    }


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float) and np.isnan(value):
        return ""
    return repr(float(value))


def export_results(result: ExperimentResult, out_dir, stem: str | None = None) -> dict:
    """Write the replicate-level CSV, a plotting summary (sweep runs), and a
    run manifest; returns the written paths.

    Output is a pure function of the result: no timestamps or environment
    details, so re-running a seeded experiment overwrites files byte for
    byte.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or result.kind
    rows = []
    if result.kind == "transition_sweep":
        for g, sigma in enumerate(result.grid_sigma_bar2):
            for r in range(result.replicates):
                rows.append(
                    {
                        "experiment": result.kind,
                        "grid_sigma_bar2": _fmt(sigma),
                        "replicate": str(r),
                        "m": "",
                        "mspe_merge": _fmt(result.mspe_merge[g, r]),
                        "mspe_ens": _fmt(result.mspe_ens[g, r]),
                        "log_ratio": _fmt(result.log_ratio[g, r]),
                        "cmse_merge": "",
                        "cmse_ens": "",
                        "tau": _fmt(result.tau),
                        "tau1": _fmt(result.tau1),
                        "tau2": _fmt(result.tau2),
                    }
                )
    elif result.kind == "cmse_curve":
        for s, sigma in enumerate(result.grid_sigma_bar2):
            for i, m in enumerate(result.m_grid):
                rows.append(
                    {
                        "experiment": result.kind,
                        "grid_sigma_bar2": _fmt(sigma),
                        "replicate": "",
                        "m": str(int(m)),
                        "mspe_merge": "",
                        "mspe_ens": "",
                        "log_ratio": "",
                        "cmse_merge": _fmt(result.cmse_merge[s, i]),
                        "cmse_ens": _fmt(result.cmse_ens[s, i]),
                        "tau": "",
                        "tau1": "",
                        "tau2": "",
                    }
                )
    else:
        raise ValueError(f"unknown experiment kind {result.kind!r}")

    paths = {}
    main = out_dir / f"{stem}.csv"
    pd.DataFrame(rows, columns=RESULT_COLUMNS).to_csv(main, index=False)
    paths["results"] = main

    if result.kind == "transition_sweep":
        summary_rows = [
            {
                "grid_sigma_bar2": _fmt(sigma),
                "mean_log_ratio": _fmt(result.mean_log_ratio[g]),
                "boot_lo": _fmt(result.boot_lo[g]),
                "boot_hi": _fmt(result.boot_hi[g]),
                "replicates": str(result.replicates),
                "tau": _fmt(result.tau),
                "tau1": _fmt(result.tau1),
                "tau2": _fmt(result.tau2),
            }
            for g, sigma in enumerate(result.grid_sigma_bar2)
        ]
        summary = out_dir / f"{stem}_summary.csv"
        pd.DataFrame(summary_rows, columns=SUMMARY_COLUMNS).to_csv(summary, index=False)
        paths["summary"] = summary

    canonical = json.dumps(result.config, sort_keys=True)
    manifest = {
        "schema_version": 1,
        "kind": result.kind,
        "seed": result.seed,
        "replicates": result.replicates,
        "config": result.config,
        "config_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
        "package_version": __version__,
        "crossing_bracket": list(result.crossing_bracket) if result.crossing_bracket else None,
    }
    manifest_path = out_dir / f"{stem}_manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    paths["manifest"] = manifest_path
    return paths
