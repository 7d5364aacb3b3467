import numpy as np
import pytest

from msboost import (
    BasisSpec,
    MultiStudyDataset,
    Study,
    boost_componentwise,
    build_selection_path,
    cw_aicc_stop,
    cw_closed_form,
    cw_ensemble,
)

from conftest import random_dataset, unit_norm_design


def product_form_coefficients(x, y, selected, eta):
    """Independent dense evaluation of the product-form closed form.

    Builds each single-column coefficient/fit operator explicitly and
    multiplies the residual operators out as matrices.
    """
    n, p = x.shape
    beta = np.zeros(p)
    upsilon = np.eye(n)
    for j in selected:
        col = x[:, j]
        b_m = np.zeros((p, n))
        b_m[j] = col / (col @ col)
        h_m = np.outer(col, col) / (col @ col)
        beta = beta + eta * b_m @ upsilon @ y
        upsilon = (np.eye(n) - eta * h_m) @ upsilon
    return beta


class TestBoostComponentwise:
    def test_single_column(self, rng):
        x = unit_norm_design(rng, 15, 1)
        y = rng.normal(size=15)
        fit = boost_componentwise(y, x, eta=1.0, m=1)
        assert fit.selected == (0,)
        slope = float(x[:, 0] @ y)  # unit-norm column
        np.testing.assert_allclose(fit.coefficients[0], slope, atol=1e-12)
        residual = y - x[:, 0] * fit.coefficients[0]
        assert abs(x[:, 0] @ residual) < 1e-12

    def test_duplicated_columns_tie_to_first(self, rng):
        base = unit_norm_design(rng, 20, 1)
        x = np.hstack([base, base])
        fit = boost_componentwise(rng.normal(size=20), x, eta=0.5, m=6)
        assert fit.selected == (0,) * 6

    def test_matches_product_form(self, rng):
        for seed in range(5):
            r = np.random.default_rng(seed + 100)
            x = unit_norm_design(r, 30, 6)
            y = r.normal(size=30)
            eta = r.choice([0.1, 0.5, 1.0])
            fit = boost_componentwise(y, x, eta, 40)
            for m in (1, 5, 20, 40):
                oracle = product_form_coefficients(x, y, fit.selected[:m], eta)
                partial = cw_closed_form(y, x, fit.selected[:m], eta)
                assert np.abs(partial - oracle).max() < 1e-10
            np.testing.assert_allclose(
                cw_closed_form(y, x, fit.selected, eta), fit.coefficients, atol=1e-10
            )

    def test_sign_flip_invariance(self, rng):
        x = unit_norm_design(rng, 25, 4)
        y = rng.normal(size=25)
        fit = boost_componentwise(y, x, eta=0.5, m=12)
        flipped_x = x.copy()
        flipped_x[:, 2] *= -1
        flipped = boost_componentwise(y, flipped_x, eta=0.5, m=12)
        assert flipped.selected == fit.selected
        expect = fit.coefficients.copy()
        expect[2] *= -1
        np.testing.assert_allclose(flipped.coefficients, expect, atol=1e-12)
        path = build_selection_path(fit, x)
        path_f = build_selection_path(flipped, flipped_x)
        for m, j in enumerate(fit.selected):
            if j == 2:
                assert path_f.signs[m] == -path.signs[m]
            else:
                assert path_f.signs[m] == path.signs[m]

    def test_rss_argmin_equals_corr_argmax(self, rng):
        # with unit-norm columns the winner maximizes |correlation|
        for seed in range(10):
            r = np.random.default_rng(seed + 3)
            x = unit_norm_design(r, 20, 5)
            y = r.normal(size=20)
            fit = boost_componentwise(y, x, eta=0.5, m=10)
            residual = y.copy()
            for m, j in enumerate(fit.selected):
                corr = np.abs(x.T @ residual)
                assert int(np.argmax(corr)) == j
                residual = fit.residual_path[m + 1] if m + 1 < fit.m_stop else None
                if residual is None:
                    break

    def test_rss_nonincreasing(self, rng):
        x = unit_norm_design(rng, 30, 5)
        y = rng.normal(size=30)
        fit = boost_componentwise(y, x, eta=0.5, m=25)
        rss = np.sum(fit.residual_path**2, axis=1)
        assert np.all(np.diff(rss) <= 1e-12)


class TestClosedForm:
    def test_first_step_is_scaled_univariate(self, rng):
        x = unit_norm_design(rng, 15, 3)
        y = rng.normal(size=15)
        beta = cw_closed_form(y, x, [1], eta=0.5)
        expect = np.zeros(3)
        expect[1] = 0.5 * (x[:, 1] @ y)
        np.testing.assert_allclose(beta, expect, atol=1e-12)

    def test_repeated_selection_geometric_collapse(self, rng):
        # eta = 1 refits the same column to zero residual after one step
        x = unit_norm_design(rng, 15, 2)
        y = rng.normal(size=15)
        ols = float(x[:, 0] @ y)
        beta = cw_closed_form(y, x, [0] * 7, eta=1.0)
        np.testing.assert_allclose(beta[0], ols, atol=1e-12)


class TestSelectionPath:
    def test_row_count(self, rng):
        x = unit_norm_design(rng, 12, 3)
        fit = boost_componentwise(rng.normal(size=12), x, eta=0.5, m=2)
        path = build_selection_path(fit, x)
        assert path.gamma.shape == (2 * 2 * (3 - 1), 12)

    def test_realized_path_feasible(self, rng):
        for seed in range(8):
            r = np.random.default_rng(seed + 11)
            x = unit_norm_design(r, 18, 4)
            y = r.normal(size=18)
            path = build_selection_path(boost_componentwise(y, x, 0.5, 6), x)
            assert (path.gamma @ y).min() >= -1e-10

    def test_single_column_design_empty_polyhedron(self, rng):
        x = unit_norm_design(rng, 10, 1)
        path = build_selection_path(boost_componentwise(rng.normal(size=10), x, 1.0, 3), x)
        assert path.gamma.shape == (0, 10)

    def test_first_block_rows_hand_built(self, rng):
        # iteration 1 has Upsilon = I: rows are sgn x_jhat' +- x_j'
        x = unit_norm_design(rng, 14, 3)
        y = rng.normal(size=14)
        fit = boost_componentwise(y, x, eta=0.5, m=1)
        path = build_selection_path(fit, x)
        jhat = fit.selected[0]
        sgn = path.signs[0]
        rivals = [j for j in range(3) if j != jhat]
        expect = []
        for j in rivals:
            expect.append(sgn * x[:, jhat] + x[:, j])
            expect.append(sgn * x[:, jhat] - x[:, j])
        np.testing.assert_allclose(path.gamma, np.array(expect), atol=1e-12)

    def test_contrast_recovers_coefficient(self, rng):
        x = unit_norm_design(rng, 16, 4)
        y = rng.normal(size=16)
        fit = boost_componentwise(y, x, eta=1.0, m=1)
        path = build_selection_path(fit, x)
        jhat = fit.selected[0]
        np.testing.assert_allclose(path.v[:, jhat] @ y, x[:, jhat] @ y, atol=1e-12)
        np.testing.assert_allclose(path.v.T @ y, fit.coefficients, atol=1e-12)

    def test_contrasts_match_coefficients_along_path(self, rng):
        x = unit_norm_design(rng, 20, 5)
        y = rng.normal(size=20)
        fit = boost_componentwise(y, x, eta=0.5, m=15)
        path = build_selection_path(fit, x)
        np.testing.assert_allclose(path.v.T @ y, fit.coefficients, atol=1e-12)

    def test_prefix(self, rng):
        x = unit_norm_design(rng, 15, 4)
        y = rng.normal(size=15)
        fit = boost_componentwise(y, x, eta=0.5, m=10)
        path = build_selection_path(fit, x)
        for m in (1, 4, 10):
            pre = path.prefix(m)
            np.testing.assert_array_equal(pre.gamma, path.gamma[: 2 * m * 3])
            sub = boost_componentwise(y, x, eta=0.5, m=m)
            np.testing.assert_allclose(pre.v.T @ y, sub.coefficients, atol=1e-12)

    def test_memory_guard(self, rng):
        x = unit_norm_design(rng, 50, 5)
        fit = boost_componentwise(rng.normal(size=50), x, eta=0.5, m=10)
        with pytest.raises(ValueError, match="cap"):
            build_selection_path(fit, x, entry_cap=100)


class TestCwAicc:
    def test_matches_brute_force(self, rng):
        x = unit_norm_design(rng, 25, 4)
        beta = np.array([2.0, -1.5, 0.0, 0.0])
        y = x @ beta + rng.normal(size=25) * 0.4
        m_stop, path = cw_aicc_stop(y, x, eta=0.5, m_upp=30)

        fit = boost_componentwise(y, x, eta=0.5, m=30)
        n = 25
        eye = np.eye(n)
        resid_op = eye.copy()
        oracle = []
        for m in range(30):
            j = fit.selected[m]
            h = np.outer(x[:, j], x[:, j]) / (x[:, j] @ x[:, j])
            resid_op = (eye - 0.5 * h) @ resid_op
            tr = n - np.trace(resid_op)
            sigma2 = np.mean((resid_op @ y) ** 2)
            oracle.append(
                np.log(sigma2) + (1 + tr / n) / (1 - (tr + 2) / n) if tr + 2 < n else np.nan
            )
        assert m_stop == int(np.nanargmin(oracle)) + 1
        np.testing.assert_allclose(path, oracle, atol=1e-9)


class TestCwEnsemble:
    def test_single_study_reduces_to_fit(self, rng):
        ds = random_dataset(rng, k=1, n=30, v=0)
        spec = BasisSpec.all_linear(ds.p)
        beta, paths = cw_ensemble(ds, spec, eta=0.5, m=10, weights=[1.0])
        from msboost import expand_basis

        designs = expand_basis(ds, spec)
        solo = boost_componentwise(designs.merged_y, designs.per_study[0], 0.5, 10)
        np.testing.assert_allclose(beta, solo.coefficients, atol=1e-12)
        assert len(paths) == 1 and paths[0].selected == solo.selected

    def test_identical_studies(self, rng):
        ds = random_dataset(rng, k=1, n=30, v=0)
        s = ds.training[0]
        twin = Study(
            id="twin", x=s.x, y=s.y, standardized=True,
            x_center=s.x_center, x_scale=s.x_scale, y_center=s.y_center,
        )
        pair = MultiStudyDataset(training=[s, twin])
        spec = BasisSpec.all_linear(ds.p)
        beta_pair, _ = cw_ensemble(pair, spec, eta=0.5, m=8, weights=[0.5, 0.5])
        beta_solo, _ = cw_ensemble(ds, spec, eta=0.5, m=8, weights=[1.0])
        np.testing.assert_allclose(beta_pair, beta_solo, atol=1e-12)

    def test_aicc_stopping_members(self, rng):
        ds = random_dataset(rng, k=2, n=30, p=4, v=0)
        beta, paths = cw_ensemble(ds, BasisSpec.all_linear(4), eta=0.5, m_upp=40)
        assert all(1 <= p.m <= 40 for p in paths)
        assert np.all(np.isfinite(beta))

    def test_benchmark_shape_fixed_m(self, rng):
        ds = random_dataset(rng, k=4, n=20, p=5, v=0)
        beta, paths = cw_ensemble(ds, BasisSpec.all_linear(5), eta=0.5, m=30)
        assert beta.shape == (5,) and np.all(np.isfinite(beta))
        assert len(paths) == 4 and all(p.m == 30 for p in paths)
