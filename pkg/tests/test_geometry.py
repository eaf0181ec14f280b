"""Projection math: exact values, KKT-oracle equivalence, convexity properties."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from robustlab.geometry import (
    MEAN_TOL,
    NORM_TOL,
    Perturbation,
    project_constraint_set,
    project_l2_ball,
    project_zero_mean,
    qp_projection_oracle,
)

INV_SQRT2 = 1.0 / np.sqrt(2.0)

vectors = hnp.arrays(
    np.float64,
    st.integers(min_value=2, max_value=64),
    elements=st.floats(min_value=-10, max_value=10),
)
eps_grid = st.sampled_from([0.1, 1.0, 10.0])


class TestZeroMeanProjection:
    def test_subtracts_mean(self):
        np.testing.assert_allclose(project_zero_mean([3.0, 1.0]), [1.0, -1.0])

    def test_constant_vector_maps_to_zero(self):
        np.testing.assert_array_equal(project_zero_mean([5.0, 5.0, 5.0]), [0.0, 0.0, 0.0])

    def test_idempotent_on_zero_mean_input(self):
        np.testing.assert_allclose(project_zero_mean([1.0, -1.0]), [1.0, -1.0])

    def test_empty_vector_rejected(self):
        with pytest.raises(ValueError):
            project_zero_mean([])


class TestBallProjection:
    def test_boundary_point_unchanged(self):
        np.testing.assert_allclose(project_l2_ball([0.6, 0.8], 1.0), [0.6, 0.8])

    def test_exterior_point_rescaled(self):
        np.testing.assert_allclose(project_l2_ball([3.0, 4.0], 1.0), [0.6, 0.8])

    def test_zero_vector_fixed_point(self):
        np.testing.assert_array_equal(project_l2_ball([0.0, 0.0], 0.5), [0.0, 0.0])

    def test_negative_radius_rejected(self):
        with pytest.raises(ValueError):
            project_l2_ball([1.0], -0.1)


class TestConstraintSetProjection:
    def test_known_value(self):
        # Expected value computed with the KKT oracle (Case 1): the centered
        # vector [1, -1] has norm sqrt(2) > 1, so it lands on the boundary.
        expected = np.array([INV_SQRT2, -INV_SQRT2])
        np.testing.assert_allclose(project_constraint_set([3.0, 1.0], 1.0), expected, atol=1e-12)
        np.testing.assert_allclose(qp_projection_oracle([3.0, 1.0], 1.0), expected, atol=1e-12)

    def test_feasible_point_unchanged(self):
        np.testing.assert_allclose(project_constraint_set([1.0, -1.0], 2.0), [1.0, -1.0])
        np.testing.assert_allclose(qp_projection_oracle([1.0, -1.0], 2.0), [1.0, -1.0])

    def test_constant_vector_to_zero(self):
        np.testing.assert_allclose(project_constraint_set([5.0, 5.0], 1.0), [0.0, 0.0])

    def test_origin_feasible(self):
        np.testing.assert_array_equal(qp_projection_oracle([0.0, 0.0, 0.0], 1.0), [0.0, 0.0, 0.0])

    def test_length_one_returns_zero(self):
        np.testing.assert_array_equal(project_constraint_set([7.0], 3.0), [0.0])
        np.testing.assert_array_equal(qp_projection_oracle([7.0], 3.0), [0.0])

    def test_eps_zero_returns_zero(self):
        np.testing.assert_array_equal(project_constraint_set([3.0, -1.0], 0.0), [0.0, 0.0])
        np.testing.assert_array_equal(qp_projection_oracle([3.0, -1.0], 0.0), [0.0, 0.0])

    @settings(max_examples=200, deadline=None)
    @given(delta=vectors, eps=eps_grid)
    def test_matches_kkt_oracle(self, delta, eps):
        two_step = project_constraint_set(delta, eps)
        oracle = qp_projection_oracle(delta, eps)
        assert np.max(np.abs(two_step - oracle)) <= 1e-6

    @settings(max_examples=200, deadline=None)
    @given(delta=vectors, eps=eps_grid)
    def test_idempotent(self, delta, eps):
        once = project_constraint_set(delta, eps)
        twice = project_constraint_set(once, eps)
        assert np.max(np.abs(twice - once)) <= 1e-12

    @settings(max_examples=200, deadline=None)
    @given(data=st.data(), eps=eps_grid)
    def test_non_expansive(self, data, eps):
        a = data.draw(vectors)
        b = data.draw(
            hnp.arrays(np.float64, a.size, elements=st.floats(min_value=-10, max_value=10))
        )
        pa = project_constraint_set(a, eps)
        pb = project_constraint_set(b, eps)
        assert np.linalg.norm(pa - pb) <= np.linalg.norm(a - b) + 1e-12

    @settings(max_examples=200, deadline=None)
    @given(delta=vectors, eps=eps_grid)
    def test_result_satisfies_invariants(self, delta, eps):
        out = project_constraint_set(delta, eps)
        assert Perturbation(out, eps).satisfies_constraints()

    def test_order_sensitivity_witness(self):
        # Ball-then-hyperplane is NOT the exact projection: for a vector
        # with large mean and large norm the two orders disagree, which is
        # why the hyperplane must come first.
        delta = np.array([10.0, 0.0])
        eps = 1.0
        ball_then_plane = project_zero_mean(project_l2_ball(delta, eps))
        plane_then_ball = project_constraint_set(delta, eps)
        exact = qp_projection_oracle(delta, eps)
        assert np.max(np.abs(plane_then_ball - exact)) <= 1e-12
        assert np.max(np.abs(ball_then_plane - exact)) > 0.1


class TestPerturbationInvariants:
    def test_violations_zero_after_projection(self):
        rng = np.random.default_rng(0)
        delta = rng.uniform(-10, 10, size=37)
        p = Perturbation(project_constraint_set(delta, 2.0), 2.0)
        assert p.mean_violation() <= MEAN_TOL
        assert p.norm_violation() <= NORM_TOL

    def test_unprojected_vector_flagged(self):
        p = Perturbation(np.array([3.0, 1.0]), 1.0)
        assert not p.satisfies_constraints()
