import numpy as np
import pytest

from evtpool.utils.errors import DimensionError, DomainError
from evtpool.utils.splines import (
    SplineBasis,
    basis_eval,
    build_penalty_matrix,
    derivative_eval,
    monotonicity_penalty,
    roughness_penalty,
    spline_eval,
    stationary_points,
)


def cox_de_boor(x, t, k, i):
    if k == 0:
        return 1.0 if t[i] <= x < t[i + 1] else 0.0
    left = 0.0 if t[i + k] == t[i] else (x - t[i]) / (t[i + k] - t[i]) * cox_de_boor(x, t, k - 1, i)
    right = 0.0 if t[i + k + 1] == t[i + 1] else \
        (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * cox_de_boor(x, t, k - 1, i + 1)
    return left + right


@pytest.fixture(params=[True, False], ids=['clamped', 'open'])
def basis(request):
    return SplineBasis.uniform(3.0, 7.0, q=10, degree=4, margin=0.01, clamped=request.param)


class TestBasis:
    def test_partition_of_unity(self, basis):
        lo, hi = basis.domain
        B = basis.design_matrix(np.linspace(lo, hi, 50))
        assert B.shape == (50, 10)
        assert np.allclose(B.sum(axis=1), 1.0, atol=1e-12)

    def test_matches_recursive_definition(self, basis):
        lo, hi = basis.domain
        t = basis.t
        for x in np.linspace(lo, hi, 23)[1:-1]:
            row = basis.design_matrix(x)[0]
            oracle = [cox_de_boor(x, t, basis.degree, i) for i in range(basis.q)]
            assert np.allclose(row, oracle, atol=1e-10)

    def test_reproduces_lines_from_greville_coefficients(self, basis):
        lo, hi = basis.domain
        x = np.linspace(lo, hi, 17)
        a = 1.5 + 0.25 * basis.greville()
        assert np.allclose(spline_eval(x, a, basis), 1.5 + 0.25 * x, atol=1e-10)
        assert derivative_eval(5.0, a, basis) == pytest.approx(0.25, abs=1e-10)

    def test_outside_domain(self, basis):
        with pytest.raises(DomainError):
            basis.design_matrix(100.0)

    def test_basis_eval_is_a_design_row(self, basis):
        row = basis_eval(5.0, basis)
        assert row.shape == (basis.q,)
        assert row.sum() == pytest.approx(1.0, abs=1e-12)

    def test_round_trip(self, basis):
        assert SplineBasis.from_dict(basis.to_dict()) == basis

    def test_too_few_functions(self):
        with pytest.raises(DimensionError):
            SplineBasis.uniform(0.0, 1.0, q=4, degree=4)


class TestPenalties:
    def test_roughness_null_space(self):
        P = build_penalty_matrix(10)
        assert roughness_penalty(2.0 + 0.5 * np.arange(10), P) < 1e-12
        assert roughness_penalty(np.arange(10.0) ** 2, P) == pytest.approx(8 * 4.0)

    def test_roughness_dimension_check(self):
        with pytest.raises(DimensionError):
            roughness_penalty(np.zeros(5), build_penalty_matrix(10))

    def test_monotone_spline_has_no_penalty(self, basis):
        a = np.cumsum(np.linspace(0.1, 1.0, basis.q))
        assert monotonicity_penalty(a, basis) == 0.0
        assert stationary_points(a, basis).size == 0

    def test_monotonicity_matches_dense_grid(self, basis):
        a = np.sin(np.linspace(0.0, 3 * np.pi, basis.q))
        lo, hi = basis.domain
        grid = np.linspace(lo, hi, 100_001)
        steps = np.diff(basis.spline(a)(grid))
        oracle = -np.sum(steps[steps < 0])
        assert monotonicity_penalty(a, basis) == pytest.approx(oracle, abs=1e-6)

    def test_stationary_points_are_roots(self, basis):
        a = np.sin(np.linspace(0.0, 3 * np.pi, basis.q))
        roots = stationary_points(a, basis)
        assert roots.size > 0
        assert np.allclose(derivative_eval(roots, a, basis), 0.0, atol=1e-8)

    def test_smallest_penalty_matrix(self):
        expected = np.array([[1, -2, 1], [-2, 4, -2], [1, -2, 1]], dtype=float)
        assert np.array_equal(build_penalty_matrix(3), expected)

    def test_penalty_corner_rows(self):
        P = build_penalty_matrix(9)
        assert list(P[0, :4]) == [1, -2, 1, 0]
        assert list(P[1, :5]) == [-2, 5, -4, 1, 0]
        assert list(P[2, :5]) == [1, -4, 6, -4, 1]
        assert list(P[-1, -4:]) == [0, 1, -2, 1]
        assert list(P[-2, -5:]) == [0, 1, -4, 5, -2]
        assert np.array_equal(P, P.T)

    def test_penalty_needs_three_coefficients(self):
        with pytest.raises(DimensionError):
            build_penalty_matrix(2)

    def test_quadratic_form_is_sum_of_second_differences(self, rng):
        a = rng.normal(size=12)
        expected = np.sum((a[2:] - 2 * a[1:-1] + a[:-2]) ** 2)
        assert roughness_penalty(a, build_penalty_matrix(12)) == pytest.approx(expected, rel=1e-12)


def test_derivative_matches_central_difference(basis, rng):
    a = rng.normal(size=basis.q)
    lo, hi = basis.domain
    h = 1e-6
    for x in np.linspace(lo, hi, 13)[1:-1]:
        fd = (spline_eval(x + h, a, basis) - spline_eval(x - h, a, basis)) / (2 * h)
        assert derivative_eval(x, a, basis) == pytest.approx(fd, abs=1e-6)
