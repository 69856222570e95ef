import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from depthalign.diffusion import make_schedule
from depthalign.errors import DegenerateError, DimensionError, ParameterError, SingularityError
from depthalign.priors import (
    AffineSubspacePrior,
    GmrfPrior,
    affine_subspace_denoise,
    gmrf_denoise,
    grid_laplacian,
    score_from_denoise,
)

from oracles import affine_posterior_zscores, t_with_abar


@pytest.fixture
def ref(rng):
    return rng.normal(size=(5, 6)) + np.linspace(0, 3, 6)


class TestAffineSubspacePrior:
    def test_basis_orthonormal(self, ref):
        B = AffineSubspacePrior(ref).basis
        np.testing.assert_allclose(B @ B.T, np.eye(2), atol=1e-12)

    def test_rejects_constant_reference(self):
        with pytest.raises(DegenerateError):
            AffineSubspacePrior(np.ones((3, 3)))

    def test_rejects_nonpositive_sigma(self, ref):
        with pytest.raises(ParameterError):
            AffineSubspacePrior(ref, sigma_p=0.0)

    def test_fixed_point_in_subspace(self, ref):
        s = make_schedule(T=3, beta_start=0.0, beta_end=0.0)
        z = 2.5 * ref - 1.0
        np.testing.assert_allclose(AffineSubspacePrior(ref).denoise(z, 2, s), z, atol=1e-12)

    def test_small_sigma_collapses(self, ref, rng, schedule):
        prior = AffineSubspacePrior(ref, sigma_p=1e-8)
        out = prior.denoise(rng.normal(size=ref.shape), 400, schedule)
        assert np.abs(out - prior.project(out)).max() < 1e-6

    def test_projection_is_exact(self, ref, rng, schedule):
        prior = AffineSubspacePrior(ref, sigma_p=0.2)
        for t in (10, 500, 1000):
            z = rng.normal(size=ref.shape)
            out = affine_subspace_denoise(z, t, schedule, prior)
            np.testing.assert_allclose(prior.project(out), prior.project(z) / np.sqrt(schedule.abar(t)), atol=1e-12)

    def test_affine_equivariance(self, ref, rng, schedule):
        prior = AffineSubspacePrior(ref, sigma_p=0.1)
        t = 250
        ab = schedule.abar(t)
        z = rng.normal(size=ref.shape)
        a, b = 1.7, -0.4
        got = prior.denoise(a * z + b * np.sqrt(ab), t, schedule)
        np.testing.assert_allclose(got, a * prior.denoise(z, t, schedule) + b, atol=1e-12)

    def test_shape_mismatch(self, ref, schedule):
        with pytest.raises(DimensionError):
            AffineSubspacePrior(ref).denoise(np.zeros((2, 2)), 10, schedule)

    def test_vjp_matches_dense_jacobian(self, ref, rng, schedule):
        prior = AffineSubspacePrior(ref, sigma_p=0.3)
        t = 321
        n = ref.size
        J = np.stack([prior.denoise(e.reshape(ref.shape), t, schedule).ravel() for e in np.eye(n)], axis=1)
        v = rng.normal(size=ref.shape)
        np.testing.assert_allclose(prior.vjp(None, t, schedule, v).ravel(), J.T @ v.ravel(), atol=1e-12)

    def test_monte_carlo_posterior_mean(self):
        z, ess = affine_posterior_zscores()
        assert np.all(z < 3.0), z.max()
        assert ess > 500  # enough effective samples for the SE to be meaningful


class TestGridLaplacian:
    def test_matches_hand_built(self):
        L = grid_laplacian((2, 3)).toarray()
        # pixels 0 1 2 / 3 4 5
        edges = [(0, 1), (1, 2), (3, 4), (4, 5), (0, 3), (1, 4), (2, 5)]
        ref = np.zeros((6, 6))
        for i, j in edges:
            ref[i, i] += 1
            ref[j, j] += 1
            ref[i, j] = ref[j, i] = -1
        np.testing.assert_array_equal(L, ref)

    def test_constant_null_space(self):
        L = grid_laplacian((4, 5))
        np.testing.assert_allclose(L @ np.ones(20), 0.0)


class TestGmrfPrior:
    def test_matches_dense_solve(self, rng, schedule):
        prior = GmrfPrior(lambda_s=2.0, eps_reg=0.05)
        z = rng.normal(size=(8, 8))
        for t in (5, 200, 990):
            ab = schedule.abar(t)
            A = prior.precision((8, 8)).toarray() + ab / (1 - ab) * np.eye(64)
            expected = np.linalg.solve(A, np.sqrt(ab) / (1 - ab) * z.ravel())
            np.testing.assert_allclose(gmrf_denoise(z, t, schedule, prior).ravel(), expected, atol=1e-8)

    def test_residual(self, rng, schedule):
        prior = GmrfPrior(lambda_s=1.0, eps_reg=1e-2)
        z = rng.normal(size=(16, 12))
        t = 700
        ab = schedule.abar(t)
        x = prior.denoise(z, t, schedule).ravel()
        A = prior.precision(z.shape) + ab / (1 - ab) * np.eye(z.size)
        rhs = np.sqrt(ab) / (1 - ab) * z.ravel()
        assert np.linalg.norm(A @ x - rhs) <= 1e-10 * np.linalg.norm(rhs) * 1.01

    def test_prior_free_limit(self, rng, schedule):
        prior = GmrfPrior(lambda_s=0.0, eps_reg=1e-12)
        z = rng.normal(size=(4, 4))
        t = 100
        np.testing.assert_allclose(prior.denoise(z, t, schedule), z / np.sqrt(schedule.abar(t)), rtol=1e-8)

    def test_constant_input(self, schedule):
        prior = GmrfPrior(lambda_s=3.0, eps_reg=0.2)
        t = 400
        ab = schedule.abar(t)
        out = prior.denoise(np.full((5, 5), 2.0), t, schedule)
        expected = 2.0 * np.sqrt(ab) / (1 - ab) / (0.2 + ab / (1 - ab))
        np.testing.assert_allclose(out, expected, rtol=1e-9)

    def test_noiseless_returns_input(self, rng):
        s = make_schedule(T=2, beta_start=0.0, beta_end=0.0)
        z = rng.normal(size=(3, 3))
        np.testing.assert_array_equal(GmrfPrior().denoise(z, 1, s), z)

    def test_energy_gradient(self, rng):
        prior = GmrfPrior(lambda_s=0.5, eps_reg=0.1)
        x = rng.normal(size=(4, 5))
        e, g = prior.energy(x)
        h = 1e-6
        d = rng.normal(size=x.shape)
        fd = (prior.energy(x + h * d)[0] - prior.energy(x - h * d)[0]) / (2 * h)
        assert fd == pytest.approx(np.vdot(g, d), rel=1e-6)
        assert e >= 0

    def test_vjp_is_symmetric_jacobian(self, rng, schedule):
        prior = GmrfPrior(lambda_s=1.0, eps_reg=0.1)
        t = 300
        u, v = rng.normal(size=(2, 6, 6))
        # linear denoiser: <J u, v> == <u, J^T v>
        assert np.vdot(prior.denoise(u, t, schedule), v) == pytest.approx(np.vdot(u, prior.vjp(None, t, schedule, v)), rel=1e-8)

    @pytest.mark.parametrize("kw", [{"lambda_s": -1.0}, {"eps_reg": 0.0}])
    def test_invalid(self, kw):
        with pytest.raises(ParameterError):
            GmrfPrior(**kw)


class TestLipschitz:
    @given(arrays(np.float64, (4, 4), elements=st.floats(-5, 5)), arrays(np.float64, (4, 4), elements=st.floats(-5, 5)), st.integers(1, 1000))
    @settings(max_examples=40, deadline=None)
    def test_bound(self, z1, z2, t):
        s = make_schedule()
        ab = s.abar(t)
        ref = np.arange(16.0).reshape(4, 4) ** 1.5
        for prior in (AffineSubspacePrior(ref, 0.2), GmrfPrior(1.0, 0.1)):
            d = np.linalg.norm(prior.denoise(z1, t, s) - prior.denoise(z2, t, s))
            k = np.sqrt(ab) * 0.04 / (ab * 0.04 + 1 - ab)
            C = max(1 / np.sqrt(ab), k)
            assert d <= C * np.linalg.norm(z1 - z2) * (1 + 1e-9) + 1e-12


class TestScore:
    def test_fixed_point(self, rng, schedule):
        t = t_with_abar(schedule, 0.25)
        ab = schedule.abar(t)
        z = rng.normal(size=(3, 3))
        np.testing.assert_allclose(score_from_denoise(z, t, z / np.sqrt(ab), schedule), 0.0, atol=1e-12)

    def test_standard_gaussian(self, rng, schedule):
        prior = GmrfPrior(lambda_s=0.0, eps_reg=1.0)
        z = rng.normal(size=(4, 4))
        for t in (10, 500):
            s = score_from_denoise(z, t, prior.denoise(z, t, schedule), schedule)
            np.testing.assert_allclose(s, -z, atol=1e-8)

    def test_singular(self, schedule):
        with pytest.raises(SingularityError):
            score_from_denoise(np.zeros((2, 2)), 0, np.zeros((2, 2)), schedule)

    def test_affine(self, rng, schedule):
        a, b, c, d = rng.normal(size=(4, 3, 3))
        t = 77
        lhs = score_from_denoise(a + 2 * b, t, c + 2 * d, schedule)
        rhs = score_from_denoise(a, t, c, schedule) + 2 * score_from_denoise(b, t, d, schedule)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)
