"""Study containers, standardization, and basis expansion into design matrices.

A study holds one cohort's raw predictors and outcome. Standardization centers
the outcome and centers/unit-norm-scales each predictor column; the constants
are retained so the same transform can be replayed on new rows. Basis
expansion evaluates per-predictor basis functions (identity, or a truncated
power cubic with user-supplied knots) on the *raw* predictor values, then
centers and unit-norm-scales the expanded columns, since all downstream
learners assume zero-mean, unit-norm design columns.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

__all__ = [
    "Study",
    "MultiStudyDataset",
    "Linear",
    "TruncatedPowerCubic",
    "BasisSpec",
    "ExpandedMatrix",
    "ExpandedDesigns",
    "standardize",
    "expand_basis",
    "load_studies_csv",
]


@dataclass(frozen=True)
class Study:
    """One study's predictor matrix (n_k x p) and outcome vector (n_k).

    ``x`` holds raw values until :func:`standardize` is applied, after which
    it holds centered, unit-l2-norm columns and the centering/scaling
    constants are retained in ``x_center``/``x_scale``/``y_center``.
    """

    id: str
    x: np.ndarray
    y: np.ndarray
    standardized: bool = False
    x_center: np.ndarray | None = None
    x_scale: np.ndarray | None = None
    y_center: float | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim != 2:
            raise ValueError(f"study {self.id!r}: x must be 2-D, got ndim={x.ndim}")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise ValueError(f"study {self.id!r}: y must be 1-D with len(y) == n rows of x")
        if x.shape[0] < 2:
            raise ValueError(f"study {self.id!r}: need n_k >= 2 observations")
        if x.shape[1] < 1:
            raise ValueError(f"study {self.id!r}: need p >= 1 predictors")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def x_raw(self) -> np.ndarray:
        """Predictors on the original scale, whether or not standardized."""
        if not self.standardized:
            return self.x
        return self.x * self.x_scale + self.x_center


@dataclass(frozen=True)
class MultiStudyDataset:
    """A collection of K training studies and V >= 0 test studies sharing p."""

    training: list[Study]
    test: list[Study] = field(default_factory=list)

    def __post_init__(self):
        if len(self.training) < 1:
            raise ValueError("need at least one training study")
        p = self.training[0].p
        for s in list(self.training) + list(self.test):
            if s.p != p:
                raise ValueError(
                    f"study {s.id!r} has p={s.p}, expected {p}: all studies must share predictors"
                )

    @property
    def k(self) -> int:
        return len(self.training)

    @property
    def v(self) -> int:
        return len(self.test)

    @property
    def p(self) -> int:
        return self.training[0].p

    @property
    def n_train(self) -> int:
        return sum(s.n for s in self.training)

    @property
    def n_test(self) -> int:
        return sum(s.n for s in self.test)


@dataclass(frozen=True)
class Linear:
    """Identity basis: one expanded column."""

    @property
    def width(self) -> int:
        return 1

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        return x[:, None]


@dataclass(frozen=True)
class TruncatedPowerCubic:
    """Cubic truncated-power basis: x, x^2, x^3, (x - knot)^3_+ per knot.

    Knots are in the same units as the raw predictor and must be strictly
    increasing; a predictor with t knots contributes 3 + t columns.
    """

    knots: tuple[float, ...]

    def __post_init__(self):
        knots = tuple(float(k) for k in self.knots)
        if any(b <= a for a, b in zip(knots, knots[1:])):
            raise ValueError(f"knots must be strictly increasing, got {knots}")
        object.__setattr__(self, "knots", knots)

    @property
    def width(self) -> int:
        return 3 + len(self.knots)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        cols = [x, x**2, x**3]
        for knot in self.knots:
            cols.append(np.maximum(x - knot, 0.0) ** 3)
        return np.column_stack(cols)


@dataclass(frozen=True)
class BasisSpec:
    """Per-predictor expansion plan; entry i applies to predictor column i."""

    entries: tuple[Linear | TruncatedPowerCubic, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    @classmethod
    def all_linear(cls, p: int) -> "BasisSpec":
        return cls(tuple(Linear() for _ in range(p)))

    @property
    def p(self) -> int:
        return len(self.entries)

    @property
    def width(self) -> int:
        """Total expanded width P."""
        return sum(e.width for e in self.entries)

    def column_map(self) -> list[tuple[int, int]]:
        """(predictor index, basis index) for each expanded column, 0-based."""
        out = []
        for j, entry in enumerate(self.entries):
            out.extend((j, u) for u in range(entry.width))
        return out

    def evaluate(self, x_raw: np.ndarray) -> np.ndarray:
        """Evaluate all basis functions on raw predictor rows (no scaling)."""
        if x_raw.shape[1] != self.p:
            raise ValueError(f"spec covers {self.p} predictors, data has {x_raw.shape[1]}")
        blocks = [entry.evaluate(x_raw[:, j]) for j, entry in enumerate(self.entries)]
        return np.hstack(blocks)


@dataclass(frozen=True)
class ExpandedMatrix:
    """An N x P design of standardized basis columns plus its bookkeeping.

    ``column_map[c]`` gives (source predictor, basis function index) for
    expanded column c. ``centers``/``scales`` are the constants used to
    standardize the raw basis evaluations, retained so new raw rows can be
    mapped onto the same scale via :meth:`apply`.
    """

    xt: np.ndarray
    column_map: tuple[tuple[int, int], ...]
    random_effect_columns: tuple[int, ...]
    spec: BasisSpec
    centers: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        if self.xt.shape[1] != len(self.column_map):
            raise ValueError("column_map must cover exactly the expanded columns")
        cols = self.random_effect_columns
        if len(set(cols)) != len(cols) or any(c < 0 or c >= self.xt.shape[1] for c in cols):
            raise ValueError("random_effect_columns must be distinct valid column indices")

    @property
    def n(self) -> int:
        return self.xt.shape[0]

    @property
    def width(self) -> int:
        return self.xt.shape[1]

    @property
    def z(self) -> np.ndarray:
        """The random-effect submatrix Z (N x Q)."""
        return self.xt[:, list(self.random_effect_columns)]

    def apply(self, x_raw: np.ndarray) -> np.ndarray:
        """Expand new raw rows and standardize with the stored constants."""
        return (self.spec.evaluate(np.asarray(x_raw, dtype=float)) - self.centers) / self.scales


@dataclass(frozen=True)
class ExpandedDesigns:
    """Expanded designs for a dataset under both standardization contexts.

    ``merged`` stacks training studies in input order and standardizes on the
    merged rows; ``per_study`` standardizes each training study on its own
    rows. Test-study designs come in two flavors: under each test study's own
    rows (``per_study_test``) and under the merged training constants
    (``test_from_merged``), the scale on which merged-model predictions are
    evaluated.
    """

    merged: ExpandedMatrix
    per_study: tuple[ExpandedMatrix, ...]
    per_study_test: tuple[ExpandedMatrix, ...]
    test_from_merged: np.ndarray | None
    merged_y: np.ndarray
    study_sizes: tuple[int, ...]


def standardize(study: Study) -> Study:
    """Center the outcome and center/unit-norm-scale each predictor column.

    Returns a new study carrying the constants needed to replay the transform.
    Constant predictor columns are kept (as all-zeros, with a warning) so
    column indexing against a basis spec is preserved; a constant outcome is
    an error.
    """
    if study.standardized:
        raise ValueError(f"study {study.id!r} is already standardized")
    y_center = float(np.mean(study.y))
    y = study.y - y_center
    if np.allclose(y, 0.0):
        raise ValueError(f"study {study.id!r}: degenerate outcome (zero variance)")
    centered = study.x - study.x.mean(axis=0)
    norms = np.linalg.norm(centered, axis=0)
    constant = norms <= 1e-14 * max(1.0, float(np.abs(study.x).max()))
    if constant.any():
        warnings.warn(
            f"study {study.id!r}: predictor column(s) {np.flatnonzero(constant).tolist()} "
            "are constant; set to zero",
            stacklevel=2,
        )
    scales = np.where(constant, 1.0, norms)
    x = np.where(constant, 0.0, centered / scales)
    return replace(
        study,
        x=x,
        y=y,
        standardized=True,
        x_center=study.x.mean(axis=0),
        x_scale=scales,
        y_center=y_center,
    )


def _standardize_columns(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    centers = raw.mean(axis=0)
    centered = raw - centers
    norms = np.linalg.norm(centered, axis=0)
    constant = norms <= 1e-14 * max(1.0, float(np.abs(raw).max(initial=1.0)))
    if constant.any():
        warnings.warn(
            f"expanded column(s) {np.flatnonzero(constant).tolist()} are constant; set to zero",
            stacklevel=3,
        )
    scales = np.where(constant, 1.0, norms)
    return np.where(constant, 0.0, centered / scales), centers, scales


def _re_columns(spec: BasisSpec, random_effect_predictors) -> tuple[int, ...]:
    if random_effect_predictors is None:
        return ()
    preds = set(int(j) for j in random_effect_predictors)
    if any(j < 0 or j >= spec.p for j in preds):
        raise ValueError("random-effect predictor index out of range")
    return tuple(c for c, (j, _) in enumerate(spec.column_map()) if j in preds)


def _check_knot_coverage(spec: BasisSpec, x_raw: np.ndarray) -> None:
    for j, entry in enumerate(spec.entries):
        if isinstance(entry, TruncatedPowerCubic):
            lo, hi = float(x_raw[:, j].min()), float(x_raw[:, j].max())
            outside = [k for k in entry.knots if k < lo or k > hi]
            if outside:
                warnings.warn(
                    f"predictor {j}: knot(s) {outside} lie outside the observed "
                    f"range [{lo:.6g}, {hi:.6g}]",
                    stacklevel=3,
                )


def expand_basis(
    dataset: MultiStudyDataset,
    spec: BasisSpec,
    random_effect_predictors=None,
    standardize_columns: bool = True,
) -> ExpandedDesigns:
    """Build merged and per-study expanded designs for a standardized dataset.

    Basis functions are evaluated on raw predictor values (knots are in raw
    units); the expanded columns are then centered and scaled to unit l2 norm
    on the merged training rows (for ``merged``) and on each study's own rows
    (for the per-study designs). With ``standardize_columns=False`` the raw
    basis evaluations are returned unscaled, in which case the merged design
    is exactly the row-stack of the per-study ones.
    """
    if spec.p != dataset.p:
        raise ValueError(f"spec covers {spec.p} predictors, dataset has {dataset.p}")
    for s in list(dataset.training) + list(dataset.test):
        if not s.standardized:
            raise ValueError(f"study {s.id!r} must be standardized before expansion")
    cmap = tuple(spec.column_map())
    re_cols = _re_columns(spec, random_effect_predictors)

    raw_train = [spec.evaluate(s.x_raw) for s in dataset.training]
    raw_test = [spec.evaluate(s.x_raw) for s in dataset.test]
    merged_raw = np.vstack(raw_train)
    _check_knot_coverage(spec, np.vstack([s.x_raw for s in dataset.training]))

    def build(raw: np.ndarray) -> ExpandedMatrix:
        if standardize_columns:
            xt, centers, scales = _standardize_columns(raw)
        else:
            xt = raw
            centers = np.zeros(raw.shape[1])
            scales = np.ones(raw.shape[1])
        return ExpandedMatrix(
            xt=xt,
            column_map=cmap,
            random_effect_columns=re_cols,
            spec=spec,
            centers=centers,
            scales=scales,
        )

    merged = build(merged_raw)
    per_study = tuple(build(r) for r in raw_train)
    per_study_test = tuple(build(r) for r in raw_test)
    test_from_merged = None
    if dataset.test:
        test_from_merged = np.vstack([merged.apply(s.x_raw) for s in dataset.test])
    return ExpandedDesigns(
        merged=merged,
        per_study=per_study,
        per_study_test=per_study_test,
        test_from_merged=test_from_merged,
        merged_y=np.concatenate([s.y for s in dataset.training]),
        study_sizes=tuple(s.n for s in dataset.training),
    )


def load_studies_csv(paths, outcome: str, study_id_column: str = "study_id") -> list[Study]:
    """Read studies from CSV: one file per study, or one file with an id column.

    A header row is required; the outcome column is named by ``outcome``.
    Missing values anywhere are an error (no imputation).
    """
    if isinstance(paths, (str,)) or not hasattr(paths, "__iter__"):
        paths = [paths]
    frames = []
    for path in paths:
        df = pd.read_csv(path)
        if outcome not in df.columns:
            raise ValueError(f"{path}: missing outcome column {outcome!r}")
        if df.isna().any().any():
            bad = [c for c in df.columns if df[c].isna().any()]
            raise ValueError(f"{path}: missing values in column(s) {bad}; imputation is not supported")
        frames.append((str(path), df))

    studies = []
    if len(frames) == 1 and study_id_column in frames[0][1].columns:
        _, df = frames[0]
        predictors = [c for c in df.columns if c not in (outcome, study_id_column)]
        for sid, group in df.groupby(study_id_column, sort=False):
            studies.append(
                Study(id=str(sid), x=group[predictors].to_numpy(float), y=group[outcome].to_numpy(float))
            )
    else:
        for path, df in frames:
            predictors = [c for c in df.columns if c not in (outcome, study_id_column)]
            studies.append(
                Study(id=path, x=df[predictors].to_numpy(float), y=df[outcome].to_numpy(float))
            )
    return studies
