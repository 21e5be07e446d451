"""Optimizer core: mode finding, curvature inversion, design checks."""

import numpy as np
import pytest

from nmixfit import DesignMatrices, MixtureFamily, ModelError, ObservationTable
from nmixfit.fitcore import (
    FitOptions,
    check_designs_for_fit,
    covariance_from_log_density,
    default_start,
    maximize_log_density,
)


class TestMaximize:
    def test_finds_quadratic_mode(self):
        m = np.array([[3.0, 0.7], [0.7, 1.2]])
        target = np.array([1.5, -2.0])

        def f(x):
            d = x - target
            return -0.5 * d @ m @ d

        x, value, converged, iters, gnorm = maximize_log_density(
            f, np.zeros(2), FitOptions()
        )
        assert converged
        assert gnorm < 1e-4
        assert iters >= 1
        np.testing.assert_allclose(x, target, atol=1e-5)
        assert value == pytest.approx(0.0, abs=1e-9)

    def test_monotone_improvement_from_any_start(self):
        def f(x):
            return -np.cosh(x[0] - 0.3) - (x[1] + 1.0) ** 4

        x0 = np.array([5.0, 2.0])
        x, value, converged, _, _ = maximize_log_density(f, x0, FitOptions())
        assert value >= f(x0)
        assert converged

    def test_objective_guard_survives_infinite_regions(self):
        # log density undefined left of zero; optimizer must stay inside
        def f(x):
            if x[0] <= 0:
                return -np.inf
            return -((np.log(x[0]) - 1.0) ** 2)

        x, _, converged, _, _ = maximize_log_density(
            f, np.array([0.5]), FitOptions()
        )
        assert converged
        assert x[0] == pytest.approx(np.e, rel=1e-4)


class TestCovariance:
    def test_quadratic_curvature_inverts_exactly(self):
        m = np.array([[2.0, 0.4], [0.4, 1.0]])

        def f(x):
            return -0.5 * x @ m @ x

        cov = covariance_from_log_density(f, np.zeros(2))
        np.testing.assert_allclose(cov, np.linalg.inv(m), atol=1e-6)
        np.testing.assert_allclose(cov, cov.T)

    def test_saddle_yields_no_covariance(self):
        def f(x):
            return 0.5 * (x[0] ** 2) - 0.5 * (x[1] ** 2)

        assert covariance_from_log_density(f, np.zeros(2)) is None


class TestDesignChecks:
    def _table(self, n):
        rng = np.random.default_rng(3)
        return ObservationTable(rng.poisson(4.0, size=(n, 2)).astype(float))

    def test_duplicate_abundance_column_is_named(self):
        x = np.linspace(-1, 1, 8)
        designs = DesignMatrices(
            np.column_stack([np.ones(8), x, x]),
            np.ones((8, 2, 1)),
            abundance_names=("(Intercept)", "x1", "x1.copy"),
            detection_names=("(Intercept)",),
        )
        with pytest.raises(ModelError, match="x1.copy"):
            check_designs_for_fit(self._table(8), designs, MixtureFamily.POISSON)

    def test_detection_rank_checked_over_observed_cells(self):
        d = np.ones((8, 2, 2))  # second column constant: collinear with intercept
        designs = DesignMatrices(
            np.column_stack([np.ones(8), np.linspace(-1, 1, 8)]),
            d,
            abundance_names=("(Intercept)", "x1"),
            detection_names=("(Intercept)", "w"),
        )
        with pytest.raises(ModelError, match="w"):
            check_designs_for_fit(self._table(8), designs, MixtureFamily.POISSON)

    def test_more_parameters_than_rows(self):
        designs = DesignMatrices(
            np.column_stack([np.ones(2), [0.1, 0.2]]),
            np.concatenate(
                [np.ones((2, 2, 1)), np.array([[[0.3], [0.1]], [[0.9], [0.2]]])],
                axis=2,
            ),
        )
        with pytest.raises(ModelError):
            check_designs_for_fit(self._table(2), designs, MixtureFamily.NEGBIN)


class TestDefaultStart:
    def test_intercept_tracks_row_maxima(self):
        counts = np.array([[4.0, 6.0], [2.0, 1.0]])
        table = ObservationTable(counts)
        designs = DesignMatrices(
            np.column_stack([np.ones(2), [0.5, -0.5]]), np.ones((2, 2, 1))
        )
        start = default_start(table, designs, MixtureFamily.NEGBIN)
        assert start.beta[0] == pytest.approx(np.log((6.0 + 2.0) / 2 + 0.5))
        assert start.beta[1] == 0.0
        assert np.all(start.alpha == 0.0)
        assert start.log_theta == 0.0

    def test_poisson_start_has_no_dispersion(self):
        table = ObservationTable(np.array([[1.0, 2.0]]))
        designs = DesignMatrices(np.ones((1, 1)), np.ones((1, 2, 1)))
        start = default_start(table, designs, MixtureFamily.POISSON)
        assert start.log_theta is None
