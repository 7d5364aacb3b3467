"""Acceptance suite: one test per promised guarantee, one printed line each.

Each criterion prints a PASS/FAIL line tagged with its number so a full run
reads as a checklist. Tolerances are fixed here, not tuned at runtime.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import kstest, norm

import msboost as mb
from msboost.simulate import MeanFunction, _seed_seq, _tune_ridge, build_design, benchmark_mean_function
from msboost.simulate import transition_inputs_from_design

from conftest import unit_norm_design


def report(criterion: int, description: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"[{status}] criterion {criterion}: {description}{suffix}")
    assert ok, f"criterion {criterion} failed: {description}{suffix}"


def scaled_benchmark_mean(scale: float) -> MeanFunction:
    base = benchmark_mean_function()
    return MeanFunction(tuple(scale * c for c in base.coefficients), base.basis)


# calibration of the benchmark signal scale for Gaussian predictors: strong
# enough that the target column is selected reliably and merging's sample-size
# advantage is material (the gene-expression source the original protocol
# sampled from has a far higher per-observation signal than unit-coefficient
# Gaussian columns provide)
BENCHMARK_SCALE = 3.0
BENCHMARK_TARGET = BENCHMARK_SCALE * 1.56


def random_transition_instance(seed, k=3, n=15, p=5, q=2, n_test=25, lam=0.05,
                               eta=0.5, m=40, g_diag=None, f_scale=0.2):
    """Boosting-derived operators on a shared zero-mean unit-norm design."""
    r = np.random.default_rng(seed)
    merged = unit_norm_design(r, k * n, p)
    xs = [merged[i * n : (i + 1) * n] for i in range(k)]
    xt0 = r.normal(size=(n_test, p)) / np.sqrt(n_test)
    coeffs = r.normal(size=p)
    f_k = tuple(x @ coeffs + f_scale * r.normal(size=n) / np.sqrt(n) for x in xs)
    return mb.TransitionInputs(
        r_merge=mb.compute_r(mb.ridge_operators(merged, lam), eta, m),
        r_study=tuple(mb.compute_r(mb.ridge_operators(x, lam), eta, m) for x in xs),
        xt0=xt0,
        f_train=np.concatenate(f_k),
        f_train_k=f_k,
        f_test=xt0 @ coeffs,
        z_train=tuple(x[:, :q] for x in xs),
        weights=np.full(k, 1.0 / k),
        sigma_eps2=1.0,
        g_diag=np.full(q, 0.3) if g_diag is None else np.asarray(g_diag, float),
        z_test=(xt0[:, :q],),
    )


class TestCriterion1:
    def test_closed_form_equivalence(self):
        """Iterative linear and component-wise paths match their closed forms."""
        start = time.time()
        worst_linear = 0.0
        worst_cw = 0.0
        etas = [0.1, 0.5, 1.0]
        lams = [0.0, 0.3, 1.0]
        for seed in range(100):
            r = np.random.default_rng(seed)
            n = int(r.integers(12, 51))
            p = int(r.integers(2, 11))
            while p >= n - 1:
                p = int(r.integers(2, 11))
            x = unit_norm_design(r, n, p)
            y = r.normal(size=n)
            eta = etas[seed % 3]
            lam = lams[(seed // 3) % 3]

            m_lin = 50
            fit = mb.boost_linear(y, mb.ridge_operators(x, lam), eta, m_lin)
            b = np.linalg.solve(x.T @ x + lam * np.eye(p), x.T)
            h = x @ b
            shrink = np.eye(n) - eta * h
            power_y = y.copy()
            beta = np.zeros(p)
            for m in range(m_lin):
                beta = beta + eta * (b @ power_y)
                power_y = shrink @ power_y
                worst_linear = max(worst_linear, np.abs(fit.coefficient_path[m] - beta).max())

            m_cw = 40
            cw = mb.boost_componentwise(y, x, eta, m_cw)
            upsilon_y = y.copy()
            beta_cw = np.zeros(p)
            norms2 = np.sum(x**2, axis=0)
            for m in range(m_cw):
                j = cw.selected[m]
                beta_cw = beta_cw.copy()
                beta_cw[j] += eta * (x[:, j] @ upsilon_y) / norms2[j]
                upsilon_y = upsilon_y - eta * x[:, j] * (x[:, j] @ upsilon_y) / norms2[j]
                partial = mb.cw_closed_form(y, x, cw.selected[: m + 1], eta)
                worst_cw = max(worst_cw, np.abs(partial - beta_cw).max())
            worst_cw = max(worst_cw, np.abs(cw.coefficients - beta_cw).max())
        elapsed = time.time() - start
        ok = worst_linear < 1e-10 and worst_cw < 1e-10 and elapsed < 60
        report(1, "closed-form equivalence over 100 random instances", ok,
               f"max diff linear {worst_linear:.2e}, cw {worst_cw:.2e}, {elapsed:.1f}s")


class TestCriterion2:
    def test_ols_degeneracy(self):
        """One full unpenalized step is least squares, and the transition
        point then matches an independent one-shot formula."""
        r = np.random.default_rng(2024)
        worst_beta = 0.0
        for _ in range(10):
            x = unit_norm_design(r, 30, 5)
            y = r.normal(size=30)
            beta = mb.boost_linear(y, mb.ridge_operators(x, 0.0), 1.0, 1).coefficients
            ols = np.linalg.lstsq(x, y, rcond=None)[0]
            worst_beta = max(worst_beta, np.abs(beta - ols).max())

        k, n, p, q, n_test = 3, 30, 4, 2, 20
        merged = unit_norm_design(r, k * n, p)
        xs = [merged[i * n : (i + 1) * n] for i in range(k)]
        xt0 = r.normal(size=(n_test, p)) / np.sqrt(n_test)
        coeffs = r.normal(size=p)
        f_k = tuple(x @ coeffs for x in xs)
        f_test = xt0 @ coeffs
        weights = np.full(k, 1.0 / k)
        inputs = mb.TransitionInputs(
            r_merge=mb.compute_r(mb.ridge_operators(merged, 0.0), 1.0, 1),
            r_study=tuple(mb.compute_r(mb.ridge_operators(x, 0.0), 1.0, 1) for x in xs),
            xt0=xt0,
            f_train=np.concatenate(f_k),
            f_train_k=f_k,
            f_test=f_test,
            z_train=tuple(x[:, :q] for x in xs),
            weights=weights,
            sigma_eps2=1.0,
            g_diag=np.full(q, 0.2),
        )
        tau = mb.transition_point(inputs).tau

        # independent one-shot least-squares implementation, no boosting code
        s = xt0 @ np.linalg.pinv(merged)
        t_k = [xt0 @ np.linalg.pinv(x) for x in xs]
        offs = [0, n, 2 * n, 3 * n]
        between_m = sum(np.sum((s[:, offs[i] : offs[i] + n] @ xs[i][:, :q]) ** 2) for i in range(k))
        between_e = sum(weights[i] ** 2 * np.sum((t_k[i] @ xs[i][:, :q]) ** 2) for i in range(k))
        bias_m = s @ np.concatenate(f_k) - f_test
        bias_e = sum(w * (t @ f) for w, t, f in zip(weights, t_k, f_k)) - f_test
        num = (sum(w**2 * np.sum(t**2) for w, t in zip(weights, t_k)) - np.sum(s**2)
               + bias_e @ bias_e - bias_m @ bias_m)
        tau_oracle = (q / p) * num / (between_m - between_e)

        ok = worst_beta < 1e-10 and abs(tau - tau_oracle) < 1e-10
        report(2, "one-step boosting is least squares and tau matches the one-shot formula",
               ok, f"beta diff {worst_beta:.2e}, tau diff {abs(tau - tau_oracle):.2e}")


class TestCriterion3:
    def test_threshold_equality_and_direction(self):
        start = time.time()
        checked = 0
        worst_eq = 0.0
        signs_ok = True
        for seed in range(300):
            inputs = random_transition_instance(seed)
            point = mb.transition_point(inputs)
            if point.tau is None or point.tau <= 0:
                continue
            checked += 1
            tau = point.tau
            q, p = inputs.q, inputs.p
            at_tau = replace(inputs, g_diag=np.full(q, tau * p / q))
            diff = mb.analytic_mspe_merged(at_tau).total - mb.analytic_mspe_ensemble(at_tau).total
            worst_eq = max(worst_eq, abs(diff))
            for factor, want in ((0.5, -1.0), (2.0, 1.0)):
                at = replace(inputs, g_diag=np.full(q, factor * tau * p / q))
                d = mb.analytic_mspe_merged(at).total - mb.analytic_mspe_ensemble(at).total
                signs_ok &= np.sign(d) == want
            if checked >= 50:
                break
        elapsed = time.time() - start
        ok = checked >= 50 and worst_eq < 1e-8 and signs_ok and elapsed < 60
        report(3, "merged and ensemble errors cross exactly at tau on 50 instances", ok,
               f"{checked} instances, max |diff at tau| {worst_eq:.2e}, {elapsed:.1f}s")


class TestCriterion4:
    def test_interval_ordering_and_direction(self):
        checked = 0
        ordering_ok = True
        direction_ok = True
        pattern = np.array([1.0, 1.0, 3.0])
        for seed in range(400):
            inputs = random_transition_instance(seed, q=3, g_diag=[0.1, 0.1, 0.3])
            interval = mb.transition_interval(inputs)
            if interval.tau1 is None or interval.tau2 is None or interval.numerator <= 0:
                continue
            checked += 1
            ordering_ok &= interval.tau1 <= interval.tau2 + 1e-12
            p = inputs.p
            for target, want_merge_wins in ((interval.tau1, True), (interval.tau2, False)):
                g = pattern * (target * p / pattern.sum())
                at = replace(inputs, g_diag=g)
                diff = mb.analytic_mspe_merged(at).total - mb.analytic_mspe_ensemble(at).total
                direction_ok &= (diff <= 1e-9) if want_merge_wins else (diff >= -1e-9)
            if checked >= 50:
                break
        ok = checked >= 50 and ordering_ok and direction_ok
        report(4, "transition interval is ordered and directs the comparison on 50 instances",
               ok, f"{checked} instances")


class TestCriterion5:
    def test_asymptote_limit(self):
        checked = 0
        worst = 0.0
        for seed in range(100):
            inputs = random_transition_instance(seed)
            denom = mb.transition_point(inputs).condition_value
            if denom <= 0:
                continue
            checked += 1
            asym = mb.mspe_asymptote(inputs)
            q, p = inputs.q, inputs.p
            huge = replace(inputs, g_diag=np.full(q, 1e6 * p / q))
            ratio = mb.analytic_mspe_ensemble(huge).reducible / mb.analytic_mspe_merged(huge).reducible
            worst = max(worst, abs(ratio - asym) / abs(asym))
            if checked >= 20:
                break
        ok = checked >= 20 and worst < 1e-3
        report(5, "error ratio at extreme heterogeneity reaches the asymptote on 20 instances",
               ok, f"max relative gap {worst:.2e}")


class TestCriterion6:
    def test_theory_vs_simulation_transition(self):
        """Desk-scale benchmark sweep: the empirical sign-change bracket of
        the mean log error ratio contains the theoretical transition point."""
        start = time.time()
        spec = mb.GeneratorSpec(seed=20240817, mean_function=scaled_benchmark_mean(BENCHMARK_SCALE))
        design = build_design(spec)
        learner = mb.LearnerConfig()
        ops = _tune_ridge(design, learner)
        inputs = transition_inputs_from_design(
            design, ops, np.full(4, 0.25), design.g_diag(1.0)
        )
        tau = mb.transition_point(inputs).tau
        assert tau is not None and tau > 0
        grid = [0.0, 0.25 * tau, 0.5 * tau, 0.75 * tau, 1.25 * tau, 1.75 * tau,
                2.5 * tau, 3.5 * tau]
        result = mb.run_transition_sweep(spec, grid, replicates=200, learner=learner, threads=2)
        elapsed = time.time() - start
        bracket = result.crossing_bracket
        ok = (
            bracket is not None
            and bracket[0] <= tau <= bracket[1]
            and result.mean_log_ratio[0] > 0  # merging wins with no heterogeneity
            and elapsed < 600
        )
        report(6, "empirical crossing bracket contains the theoretical transition point",
               ok, f"tau {tau:.3f}, bracket {bracket}, {elapsed:.0f}s")


class TestCriterion7:
    def test_truncated_normal_machinery(self):
        # (a) conditional law of the selected contrast: CDF transforms with
        # per-draw limits are uniform over polyhedron-respecting draws
        passes = 0
        for seed in range(10):
            r = np.random.default_rng(seed)
            n = int(r.integers(10, 31))
            p = int(r.integers(2, 5))
            m = int(r.integers(1, 4))
            x = unit_norm_design(r, n, p)
            z = x[:, :1]
            mu = x @ (r.normal(size=p) * 1.5)
            model = mb.GaussianModel.from_structure([mu], [z], [0.3], 1.0)
            chol = np.linalg.cholesky(model.sigma)
            y = mu + chol @ r.normal(size=n)
            fit = mb.boost_componentwise(y, x, 0.5, m)
            path = mb.build_selection_path(fit, x)
            j = fit.selected[0]
            v = path.v[:, j]
            theta2 = float(v @ model.sigma @ v)
            theta = np.sqrt(theta2)
            mu_bar = float(v @ model.mu)
            c = model.sigma @ v / theta2
            gc = path.gamma @ c
            draws = model.mu + (chol @ r.normal(size=(n, 120_000))).T
            keep = np.all(draws @ path.gamma.T >= 0, axis=1)
            draws = draws[keep][:2500]
            if draws.shape[0] < 500:
                continue
            vy = draws @ v
            gz = draws @ path.gamma.T - np.outer(vy, gc)
            ratios = -gz / gc
            pos, neg = gc > 0, gc < 0
            a = ratios[:, pos].max(axis=1) if pos.any() else np.full(len(draws), -np.inf)
            b = ratios[:, neg].min(axis=1) if neg.any() else np.full(len(draws), np.inf)
            lo = norm.cdf((a - mu_bar) / theta)
            hi = norm.cdf((b - mu_bar) / theta)
            u = (norm.cdf((vy - mu_bar) / theta) - lo) / (hi - lo)
            if kstest(u, "uniform").pvalue > 0.01:
                passes += 1

        # (b) moments against a 1e7-draw Monte Carlo
        mu_bar, theta2, a, b = 0.3, 1.8, -0.8, 1.4
        mean, var = mb.truncnorm_moments(
            mb.TruncatedNormalParams.from_interval(mu_bar, theta2, a, b)
        )
        r = np.random.default_rng(777)
        draws = r.normal(mu_bar, np.sqrt(theta2), size=10_000_000)
        kept = draws[(draws >= a) & (draws <= b)]
        se_mean = kept.std() / np.sqrt(kept.size)
        mc_mean_ok = abs(kept.mean() - mean) < 3 * se_mean
        s2 = kept.var()
        se_var = np.sqrt((np.mean((kept - kept.mean()) ** 4) - s2**2) / kept.size)
        mc_var_ok = abs(s2 - var) < 3 * se_var

        # (c) the half-normal identities
        hn_mean, hn_var = mb.truncnorm_moments(
            mb.TruncatedNormalParams.from_interval(0.0, 1.0, 0.0, np.inf)
        )
        hn_ok = abs(hn_mean - 0.7978846) < 1e-6 and abs(hn_var - 0.3633802) < 1e-6

        ok = passes >= 9 and mc_mean_ok and mc_var_ok and hn_ok
        report(7, "truncated-normal law, moments, and half-normal identities", ok,
               f"KS passes {passes}/10, MC mean ok {mc_mean_ok}, MC var ok {mc_var_ok}")


def _conditional_mse_pattern(sigma_low, sigma_high, seeds=20, replicates=16):
    """Per-seed booleans for the two halves of the benchmark pattern:
    merged no worse than ensemble early at the low heterogeneity, ordering
    reversed late at the high one."""
    mean = scaled_benchmark_mean(BENCHMARK_SCALE)
    hold_early = hold_late = hold_both = 0
    for seed in range(seeds):
        spec = mb.GeneratorSpec(seed=seed, mean_function=mean)
        res = mb.run_conditional_mse_curve(
            spec, [sigma_low, sigma_high], m_max=30, target_coefficient=5,
            replicates=replicates, beta_target=BENCHMARK_TARGET, threads=2,
        )
        early_ok = np.nanmean(res.cmse_merge[0, :10] - res.cmse_ens[0, :10]) <= 0
        late_ok = np.nanmean(res.cmse_merge[1, 20:] - res.cmse_ens[1, 20:]) > 0
        hold_early += early_ok
        hold_late += late_ok
        hold_both += early_ok and late_ok
    return hold_early, hold_late, hold_both


class TestCriterion8:
    def test_qualitative_reversal(self):
        """The benchmark pattern with the high heterogeneity chosen the way
        the original experiment chose its values: straddling this design's
        own transition region (here located analytically; the source data's
        empirical transition sat between its two values)."""
        spec = mb.GeneratorSpec(seed=20240817, mean_function=scaled_benchmark_mean(BENCHMARK_SCALE))
        design = build_design(spec)
        ops = _tune_ridge(design, mb.LearnerConfig())
        tau = mb.transition_point(
            transition_inputs_from_design(design, ops, np.full(4, 0.25), design.g_diag(1.0))
        ).tau
        hold_early, hold_late, hold_both = _conditional_mse_pattern(0.01, 2.0 * tau)
        ok = hold_both >= 11
        report(8, "conditional-MSE ordering flips across the design's transition region", ok,
               f"early {hold_early}/20, late reversal {hold_late}/20, both {hold_both}/20, "
               f"high value 2*tau = {2 * tau:.2f}")

    def test_source_calibrated_values(self):
        """The literal benchmark heterogeneity values 0.01 / 0.05.

        Expected to fail under Gaussian predictors: those constants were
        calibrated to the original gene-expression predictors, whose
        between-study structure put the component-wise transition between
        them; this design's transition sits two orders of magnitude higher,
        so no late-iteration reversal can occur at 0.05 (see the decisions
        ledger for the measurement history: the per-seed late-window
        difference at 0.05 is genuinely negative for ~15/20 design draws at
        256 replicates, at every viable signal calibration).
        """
        hold_early, hold_late, hold_both = _conditional_mse_pattern(0.01, 0.05)
        ok = hold_both >= 11
        report(8, "conditional-MSE ordering flips at the literal 0.01/0.05 values", ok,
               f"early {hold_early}/20, late reversal {hold_late}/20, both {hold_both}/20; "
               "known-unattainable under Gaussian predictors, see decisions ledger")


class TestCriterion9:
    def test_fourier_motzkin_membership(self):
        start = time.time()
        r = np.random.default_rng(99)
        all_ok = True
        for _ in range(50):
            rows = int(r.integers(4, 9))
            poly = mb.Polyhedron(r.normal(size=(rows, 3)), r.normal(size=rows))
            var = int(r.integers(3))
            proj = mb.fourier_motzkin_eliminate(poly, var)
            pts = r.uniform(-3, 3, size=(1000, 2))
            # vectorized membership in the projection
            if proj.rows:
                member = np.all(pts @ proj.a_mat.T >= proj.b_vec - 1e-9, axis=1)
            else:
                member = np.ones(1000, dtype=bool)
            # brute force: intersect the eliminated coordinate's interval
            keep = [c for c in range(3) if c != var]
            lo = np.full(1000, -np.inf)
            hi = np.full(1000, np.inf)
            feasible = np.ones(1000, dtype=bool)
            for row, rhs in zip(poly.a_mat, poly.b_vec):
                rest = pts @ row[keep]
                coef = row[var]
                if coef > 0:
                    lo = np.maximum(lo, (rhs - rest) / coef)
                elif coef < 0:
                    hi = np.minimum(hi, (rhs - rest) / coef)
                else:
                    feasible &= rest >= rhs - 1e-9
            feasible &= lo <= hi + 1e-9
            all_ok &= bool(np.all(member == feasible))
        elapsed = time.time() - start
        ok = all_ok and elapsed < 60
        report(9, "projection membership equals brute-force feasibility on 50 polyhedra",
               ok, f"{elapsed:.1f}s")


class TestCriterion10:
    def test_thread_count_determinism(self, tmp_path):
        spec = mb.GeneratorSpec(
            seed=4242, k_train=3, v_test=2, n_per_study=40,
            mean_function=scaled_benchmark_mean(BENCHMARK_SCALE),
        )
        kwargs = dict(grid=[0.0, 0.5, 1.0], replicates=12, learner=mb.LearnerConfig(lam=1.0, m=5))
        res1 = mb.run_transition_sweep(spec, threads=1, **kwargs)
        res4 = mb.run_transition_sweep(spec, threads=4, **kwargs)
        paths1 = mb.export_results(res1, tmp_path / "one")
        paths4 = mb.export_results(res4, tmp_path / "four")
        ok = all(paths1[k].read_bytes() == paths4[k].read_bytes() for k in paths1)
        report(10, "seeded runs are byte-identical across thread counts", ok)
