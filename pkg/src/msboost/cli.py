"""Command-line front door: simulate, transition, fit, and cmse commands.

Every run is driven by a single JSON config file with a ``schema_version``
key; unknown keys are rejected so a config says exactly what it does. All
randomness flows from the config seed. Exit codes: 0 for success (an
Indeterminate recommendation is a valid answer), 2 for config errors, 3 for
runtime errors.

Index conventions in config files are 1-based (predictor and expanded-column
indices), matching how the columns are reported; they are converted at this
boundary and nowhere else.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .cw_boost import boost_componentwise, build_selection_path, cw_aicc_stop, cw_ensemble
from .dataset import (
    BasisSpec,
    Linear,
    MultiStudyDataset,
    TruncatedPowerCubic,
    expand_basis,
    load_studies_csv,
    standardize,
)
from .linear_boost import aicc_stop, boost_linear, ridge_operators
from .selective import GaussianModel, conditional_mse_ensemble, conditional_mse_merged
from .simulate import (
    GeneratorSpec,
    LearnerConfig,
    MeanFunction,
    export_results,
    benchmark_mean_function,
    run_conditional_mse_curve,
    run_transition_sweep,
)
from .transition import TransitionInputs, compute_r, recommend

SCHEMA_VERSION = 1


class ConfigError(Exception):
    """Anything wrong with the run configuration (exit code 2)."""


def _load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    version = cfg.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    return cfg


def _check_keys(cfg: dict, known: set, required: set, where: str = "config") -> None:
    for key in cfg:
        if key not in known:
            raise ConfigError(f"unknown {where} key {key!r}")
    for key in required:
        if key not in cfg:
            raise ConfigError(f"missing required {where} key {key!r}")


def _basis_from_config(entries, p: int | None = None) -> BasisSpec:
    if entries == "all_linear":
        if p is None:
            raise ConfigError("basis 'all_linear' needs the predictor count")
        return BasisSpec.all_linear(p)
    if not isinstance(entries, list):
        raise ConfigError("basis must be 'all_linear' or a list of entries")
    parsed = []
    for i, entry in enumerate(entries):
        if entry == "linear":
            parsed.append(Linear())
        elif isinstance(entry, dict) and set(entry) == {"cubic_knots"}:
            try:
                parsed.append(TruncatedPowerCubic(tuple(entry["cubic_knots"])))
            except ValueError as exc:
                raise ConfigError(f"basis entry {i + 1}: {exc}") from exc
        else:
            raise ConfigError(f"basis entry {i + 1} must be 'linear' or {{'cubic_knots': [...]}}")
    return BasisSpec(tuple(parsed))


def _learner_from_config(cfg: dict, allow_componentwise: bool = True) -> LearnerConfig:
    _check_keys(
        cfg,
        known={"kind", "lambda", "lambda_grid", "eta", "m", "m_upp"},
        required=set(),
        where="learner",
    )
    kind = cfg.get("kind", "ridge")
    if kind == "componentwise" and not allow_componentwise:
        raise ConfigError("this command supports only the ridge learner")
    try:
        return LearnerConfig(
            kind=kind,
            lam=cfg.get("lambda"),
            lambda_grid=tuple(cfg.get("lambda_grid", (0.1, 1.0, 10.0, 100.0))),
            eta=float(cfg.get("eta", 0.5)),
            m=cfg.get("m"),
            m_upp=int(cfg.get("m_upp", 500)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _weights_from_config(value, k: int) -> np.ndarray:
    if value in (None, "equal"):
        return np.full(k, 1.0 / k)
    w = np.asarray(value, dtype=float)
    if w.shape != (k,):
        raise ConfigError(f"weights must list {k} values")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ConfigError("weights must be nonnegative and sum to 1")
    return w


def _generator_from_config(cfg: dict) -> GeneratorSpec:
    mean_cfg = cfg.get("mean_function", "benchmark")
    if mean_cfg == "benchmark":
        mean = benchmark_mean_function()
    elif isinstance(mean_cfg, dict) and set(mean_cfg) == {"coefficients", "basis"}:
        basis = _basis_from_config(mean_cfg["basis"])
        try:
            mean = MeanFunction(tuple(mean_cfg["coefficients"]), basis)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        raise ConfigError("mean_function must be 'benchmark' or {'coefficients', 'basis'}")
    predictors = cfg.get("random_effect_predictors", [3, 4, 5, 6, 7])
    if not all(isinstance(j, int) and 1 <= j <= mean.p for j in predictors):
        raise ConfigError("random_effect_predictors must be 1-based predictor indices")
    source = cfg.get("predictor_source", "gaussian")
    if isinstance(source, dict) and set(source) == {"csv"}:
        source = ("csv", source["csv"])
    elif source != "gaussian":
        raise ConfigError("predictor_source must be 'gaussian' or {'csv': path}")
    try:
        return GeneratorSpec(
            k_train=int(cfg.get("k_train", 4)),
            v_test=int(cfg.get("v_test", 4)),
            n_per_study=int(cfg.get("n_per_study", 100)),
            mean_function=mean,
            random_effect_predictors=tuple(int(j) - 1 for j in predictors),
            sigma_eps2=float(cfg.get("sigma_eps2", 1.0)),
            predictor_source=source,
            seed=int(cfg.get("seed", 0)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_simulate(cfg: dict, out_dir: Path, threads: int) -> int:
    _check_keys(
        cfg,
        known={
            "schema_version", "experiment", "seed", "k_train", "v_test", "n_per_study",
            "mean_function", "random_effect_predictors", "sigma_eps2", "predictor_source",
            "learner", "weights", "replicates", "grid", "sigma_bar2_values", "m_max",
            "target_coefficient", "beta_target", "bootstrap_resamples", "out_stem",
            "variance_pattern",
        },
        required={"experiment", "replicates"},
    )
    spec = _generator_from_config(cfg)
    learner = _learner_from_config(cfg.get("learner", {}))
    weights = _weights_from_config(cfg.get("weights", "equal"), spec.k_train)
    replicates = int(cfg["replicates"])
    if replicates < 2:
        raise ConfigError("replicates must be at least 2")
    for key in ("grid", "sigma_bar2_values"):
        if key in cfg and any(float(g) < 0 for g in cfg[key]):
            raise ConfigError(f"{key} values must be nonnegative")
    experiment = cfg["experiment"]
    if experiment == "transition_sweep":
        if "grid" not in cfg:
            raise ConfigError("transition_sweep needs a 'grid' of sigma_bar2 values")
        result = run_transition_sweep(
            spec,
            grid=[float(g) for g in cfg["grid"]],
            replicates=replicates,
            learner=learner,
            weights=weights,
            threads=threads,
            bootstrap_resamples=int(cfg.get("bootstrap_resamples", 1000)),
            variance_pattern=cfg.get("variance_pattern"),
        )
    elif experiment == "cmse_curve":
        for key in ("sigma_bar2_values", "m_max", "target_coefficient"):
            if key not in cfg:
                raise ConfigError(f"cmse_curve needs {key!r}")
        result = run_conditional_mse_curve(
            spec,
            sigma_bar2_values=[float(s) for s in cfg["sigma_bar2_values"]],
            m_max=int(cfg["m_max"]),
            target_coefficient=int(cfg["target_coefficient"]) - 1,
            replicates=replicates,
            eta=learner.eta,
            weights=weights,
            beta_target=cfg.get("beta_target"),
            threads=threads,
        )
    else:
        raise ConfigError(f"unknown experiment {experiment!r}")
    paths = export_results(result, out_dir, stem=cfg.get("out_stem"))
    print(f"wrote {paths['results']}")
    return 0


def _load_dataset(cfg: dict) -> MultiStudyDataset:
    outcome = cfg.get("outcome", "outcome")
    id_col = cfg.get("study_id_column", "study_id")
    train = load_studies_csv(cfg["train"], outcome=outcome, study_id_column=id_col)
    test = []
    if cfg.get("test"):
        test = load_studies_csv(cfg["test"], outcome=outcome, study_id_column=id_col)
    return MultiStudyDataset(
        training=[standardize(s) for s in train],
        test=[standardize(s) for s in test],
    )


def _expanded_columns_from_config(values, width: int) -> tuple[int, ...]:
    cols = tuple(int(c) - 1 for c in values)
    if any(c < 0 or c >= width for c in cols):
        raise ConfigError(f"random_effect_columns must be in 1..{width}")
    if len(set(cols)) != len(cols):
        raise ConfigError("random_effect_columns must be distinct")
    return cols


_DATA_KEYS = {"train", "test", "outcome", "study_id_column", "basis"}


def cmd_transition(cfg: dict, out_dir: Path) -> int:
    _check_keys(
        cfg,
        known={"schema_version", "seed", "random_effect_columns", "g_diag", "sigma_eps2",
               "learner", "weights", "mean_function", "out_stem"} | _DATA_KEYS,
        required={"train", "test", "random_effect_columns", "g_diag", "sigma_eps2"},
    )
    dataset = _load_dataset(cfg)
    if dataset.k < 2:
        raise ConfigError("K must exceed 1 for a transition analysis")
    if dataset.v < 1:
        raise ConfigError("transition analysis needs at least one test study")
    basis = _basis_from_config(cfg.get("basis", "all_linear"), dataset.p)
    designs = expand_basis(dataset, basis)
    width = designs.merged.width
    z_cols = _expanded_columns_from_config(cfg["random_effect_columns"], width)
    g_diag = np.asarray([float(g) for g in cfg["g_diag"]])
    if g_diag.shape != (len(z_cols),):
        raise ConfigError("g_diag must have one entry per random-effect column")
    learner = _learner_from_config(cfg.get("learner", {}), allow_componentwise=False)
    if learner.lam is None:
        raise ConfigError("transition analysis needs an explicit learner lambda")
    weights = _weights_from_config(cfg.get("weights", "equal"), dataset.k)

    merged_op = ridge_operators(designs.merged, learner.lam)
    y = designs.merged_y
    m_merged = learner.m or aicc_stop(y, merged_op, learner.eta, learner.m_upp)[0]
    r_merge = compute_r(merged_op, learner.eta, m_merged)
    r_study = []
    offset = 0
    for design in designs.per_study:
        y_k = y[offset : offset + design.n]
        op_k = ridge_operators(design, learner.lam)
        m_k = learner.m or aicc_stop(y_k, op_k, learner.eta, learner.m_upp)[0]
        r_study.append(compute_r(op_k, learner.eta, m_k))
        offset += design.n

    xt0 = designs.test_from_merged
    mean_mode = cfg.get("mean_function", "zero")
    if mean_mode == "zero":
        f_train_k = tuple(np.zeros(d.n) for d in designs.per_study)
        f_test = np.zeros(xt0.shape[0])
        note = "mean function: zero-bias mode (caller asserts unbiasedness)"
    elif mean_mode == "fitted_merged":
        beta_hat = r_merge @ y
        fitted = designs.merged.xt @ beta_hat
        f_train_k = []
        offset = 0
        for d in designs.per_study:
            f_train_k.append(fitted[offset : offset + d.n])
            offset += d.n
        f_train_k = tuple(f_train_k)
        f_test = xt0 @ beta_hat
        note = "mean function: merged-fit surrogate"
    else:
        raise ConfigError("mean_function must be 'zero' or 'fitted_merged'")

    inputs = TransitionInputs(
        r_merge=r_merge,
        r_study=tuple(r_study),
        xt0=xt0,
        f_train=np.concatenate(f_train_k),
        f_train_k=f_train_k,
        f_test=f_test,
        z_train=tuple(d.xt[:, list(z_cols)] for d in designs.per_study),
        weights=weights,
        sigma_eps2=float(cfg["sigma_eps2"]),
        g_diag=g_diag,
        z_test=tuple(d.xt[:, list(z_cols)] for d in designs.per_study_test),
    )
    report = recommend(inputs, notes=(note, f"merged stop: {m_merged}"))
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = cfg.get("out_stem", "transition_report")
    (out_dir / f"{stem}.txt").write_text(report.to_text() + "\n")
    (out_dir / f"{stem}.json").write_text(report.to_json() + "\n")
    print(report.to_text())
    return 0


def cmd_fit(cfg: dict, out_dir: Path) -> int:
    _check_keys(
        cfg,
        known={"schema_version", "seed", "learner", "weights", "strategy", "out_stem"} | _DATA_KEYS,
        required={"train"},
    )
    dataset = _load_dataset(cfg)
    basis = _basis_from_config(cfg.get("basis", "all_linear"), dataset.p)
    designs = expand_basis(dataset, basis)
    learner = _learner_from_config(cfg.get("learner", {}))
    strategy = cfg.get("strategy", "both")
    if strategy not in ("merged", "ensemble", "both"):
        raise ConfigError("strategy must be 'merged', 'ensemble', or 'both'")
    weights = _weights_from_config(cfg.get("weights", "equal"), dataset.k)
    y = designs.merged_y

    beta_merged = None
    beta_ens = None
    selections: dict = {}
    if learner.kind == "ridge":
        if learner.lam is None:
            raise ConfigError("ridge fits need an explicit learner lambda")
        if strategy in ("merged", "both"):
            op = ridge_operators(designs.merged, learner.lam)
            m = learner.m or aicc_stop(y, op, learner.eta, learner.m_upp)[0]
            beta_merged = boost_linear(y, op, learner.eta, m).coefficients
        if strategy in ("ensemble", "both"):
            beta_ens = np.zeros(designs.merged.width)
            offset = 0
            for w_k, design in zip(weights, designs.per_study):
                y_k = y[offset : offset + design.n]
                op_k = ridge_operators(design, learner.lam)
                m_k = learner.m or aicc_stop(y_k, op_k, learner.eta, learner.m_upp)[0]
                beta_ens += w_k * boost_linear(y_k, op_k, learner.eta, m_k).coefficients
                offset += design.n
    else:
        if strategy in ("merged", "both"):
            m = learner.m or cw_aicc_stop(y, designs.merged, learner.eta, learner.m_upp)[0]
            fit = boost_componentwise(y, designs.merged, learner.eta, m)
            beta_merged = fit.coefficients
            selections["merged"] = [j + 1 for j in fit.selected]
        if strategy in ("ensemble", "both"):
            beta_ens, paths = cw_ensemble(
                dataset, basis, eta=learner.eta, m=learner.m, m_upp=learner.m_upp,
                weights=weights, designs=designs,
            )
            for study, path in zip(dataset.training, paths):
                selections[study.id] = [j + 1 for j in path.selected]

    out_dir.mkdir(parents=True, exist_ok=True)
    stem = cfg.get("out_stem", "fit")
    rows = []
    for c, (pred, basis_idx) in enumerate(designs.merged.column_map):
        rows.append(
            {
                "column": c + 1,
                "predictor": pred + 1,
                "basis_index": basis_idx + 1,
                "beta_merged": "" if beta_merged is None else repr(float(beta_merged[c])),
                "beta_ensemble": "" if beta_ens is None else repr(float(beta_ens[c])),
            }
        )
    coef_path = out_dir / f"{stem}_coefficients.csv"
    pd.DataFrame(rows).to_csv(coef_path, index=False)
    if selections:
        (out_dir / f"{stem}_selections.json").write_text(
            json.dumps(selections, indent=2, sort_keys=True) + "\n"
        )
    print(f"wrote {coef_path}")
    return 0


def cmd_cmse(cfg: dict, out_dir: Path) -> int:
    _check_keys(
        cfg,
        known={"schema_version", "seed", "eta", "m", "target_coefficient", "beta_target",
               "random_effect_columns", "g_diag", "sigma_eps2", "weights", "mean_function",
               "out_stem"} | _DATA_KEYS,
        required={"train", "m", "target_coefficient", "random_effect_columns", "g_diag",
                  "sigma_eps2"},
    )
    dataset = _load_dataset(cfg)
    basis = _basis_from_config(cfg.get("basis", "all_linear"), dataset.p)
    designs = expand_basis(dataset, basis)
    width = designs.merged.width
    z_cols = _expanded_columns_from_config(cfg["random_effect_columns"], width)
    g_diag = np.asarray([float(g) for g in cfg["g_diag"]])
    if g_diag.shape != (len(z_cols),):
        raise ConfigError("g_diag must have one entry per random-effect column")
    target = int(cfg["target_coefficient"]) - 1
    if not 0 <= target < width:
        raise ConfigError(f"target_coefficient must be in 1..{width}")
    beta_target = float(cfg.get("beta_target", 0.0))
    eta = float(cfg.get("eta", 0.5))
    m = int(cfg["m"])
    weights = _weights_from_config(cfg.get("weights", "equal"), dataset.k)
    sigma_eps2 = float(cfg["sigma_eps2"])
    mean_mode = cfg.get("mean_function", "zero")
    if mean_mode not in ("zero", "fitted_merged"):
        raise ConfigError("mean_function must be 'zero' or 'fitted_merged'")

    y = designs.merged_y
    fit_merged = boost_componentwise(y, designs.merged, eta, m)
    path_merged = build_selection_path(fit_merged, designs.merged)
    fits_k, paths_k, ys_k = [], [], []
    offset = 0
    for design in designs.per_study:
        y_k = y[offset : offset + design.n]
        fit_k = boost_componentwise(y_k, design, eta, m)
        fits_k.append(fit_k)
        paths_k.append(build_selection_path(fit_k, design))
        ys_k.append(y_k)
        offset += design.n

    if mean_mode == "fitted_merged":
        fitted = designs.merged.xt @ fit_merged.coefficients
        mu_k = []
        offset = 0
        for design in designs.per_study:
            mu_k.append(fitted[offset : offset + design.n])
            offset += design.n
    else:
        mu_k = [np.zeros(d.n) for d in designs.per_study]

    model_merged = GaussianModel.from_structure(
        mu_k, [d.xt[:, list(z_cols)] for d in designs.per_study], g_diag, sigma_eps2
    )
    models_k = [
        GaussianModel.from_structure([mu], [d.xt[:, list(z_cols)]], g_diag, sigma_eps2)
        for mu, d in zip(mu_k, designs.per_study)
    ]

    record: dict = {
        "target_coefficient": target + 1,
        "beta_target": beta_target,
        "m": m,
        "eta": eta,
        "mean_function": mean_mode,
    }
    warnings_count = 0
    try:
        mse, bias2, var = conditional_mse_merged(
            path_merged, model_merged, target, beta_j=beta_target
        )
        record["merged"] = {"cmse": mse, "bias2": bias2, "variance": var}
    except ValueError as exc:
        warnings_count += 1
        record["merged"] = {"error": str(exc)}
    try:
        mse, bias2, var = conditional_mse_ensemble(
            paths_k, models_k, target, weights, beta_j=beta_target, ys=ys_k
        )
        record["ensemble"] = {"cmse": mse, "bias2": bias2, "variance": var}
    except ValueError as exc:
        warnings_count += 1
        record["ensemble"] = {"error": str(exc)}
    record["degenerate_warnings"] = warnings_count
    if warnings_count:
        print(f"warning: {warnings_count} degenerate truncation(s) reported", file=sys.stderr)

    out_dir.mkdir(parents=True, exist_ok=True)
    stem = cfg.get("out_stem", "cmse")
    out_path = out_dir / f"{stem}.json"
    out_path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msboost",
        description="multi-study boosting: simulations, transition reports, fits, "
        "and conditional MSE",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "transition", "fit", "cmse"):
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="path to the JSON run config")
        cmd.add_argument("--out", default=None, help="output directory (default: cwd)")
        cmd.add_argument("--threads", type=int, default=None,
                         help="worker threads (default: MSBOOST_THREADS or 1)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("MSBOOST_THREADS", "1"))
    try:
        cfg = _load_config(args.config)
        out_dir = Path(args.out) if args.out else Path.cwd()
        if args.command == "simulate":
            return cmd_simulate(cfg, out_dir, threads)
        if args.command == "transition":
            return cmd_transition(cfg, out_dir)
        if args.command == "fit":
            return cmd_fit(cfg, out_dir)
        return cmd_cmse(cfg, out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 3
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
