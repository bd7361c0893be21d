import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

import stretchq.fitting as fitting
from stretchq.acquisition import GradientScheme, group_shells, match_directions
from stretchq.exceptions import DataError, RankDeficientError, UnderdeterminedFitError
from stretchq.fitting import (
    FitOptions,
    fit_dti,
    fit_stretched_direction,
    fit_stretched_volume,
    fit_stretched_voxel,
    init_stretched,
)
from stretchq.phantom import human_scheme, multishell_scheme, tensor_from_eigen
from stretchq.signal_model import StretchedParams, predict_attenuation
from stretchq.sphere import electrostatic_directions

from .conftest import TAU

B5 = np.array([200.0, 1000, 1800, 2400, 3000])


def signals(scheme, T, alpha, s0=1000.0):
    d = np.einsum("ni,ij,nj->n", scheme.directions, T, scheme.directions)
    return s0 * np.exp(-((scheme.bvals * d) ** alpha))


class TestInit:
    def test_monoexponential(self):
        p, degraded = init_stretched([1000, 3000], np.exp(-np.array([1.0, 3.0])), 1.0)
        assert_allclose([p.D, p.alpha], [1e-3, 1.0], rtol=1e-12)
        assert not degraded

    def test_stretched_slope(self):
        b = np.array([1000.0, 3000.0])
        p, _ = init_stretched(b, predict_attenuation(b, 0.7e-3, 0.6), 1.0)
        assert_allclose(p.alpha, 0.6, rtol=1e-6)
        assert_allclose(p.D, 0.7e-3, rtol=1e-6)

    def test_noise_only_falls_back(self):
        p, degraded = init_stretched([1000, 3000], [1.2, 1.0], 1.0)
        assert degraded
        assert (p.D, p.alpha) == (fitting.FALLBACK_D, fitting.FALLBACK_ALPHA)


class TestDirection:
    def test_recovery_from_poor_start(self):
        S = predict_attenuation(B5, 0.7e-3, 0.8)
        fit = fit_stretched_direction(B5, S, 1.0, init=StretchedParams(3e-3, 0.4))
        assert fit.converged and fit.n_iter > 0
        assert_allclose([fit.params.D, fit.params.alpha], [0.7e-3, 0.8], rtol=1e-6)
        assert fit.rss < 1e-20

    def test_monoexponential_hits_alpha_bound(self):
        S = np.exp(-B5 * 0.9e-3)
        fit = fit_stretched_direction(B5, S, 1.0, init=StretchedParams(0.5e-3, 0.6))
        assert fit.params.alpha == 1.0
        assert fit.at_bound == (False, True)
        assert fit.converged
        assert_allclose(fit.params.D, 0.9e-3, rtol=1e-6)

    def test_two_samples_interpolate(self):
        b = np.array([700.0, 2500.0])
        S = 500 * np.array([0.6, 0.2])
        fit = fit_stretched_direction(b, S, 500.0, init=StretchedParams(1e-3, 0.9))
        assert fit.rss < 1e-16
        assert_allclose(fit.params.attenuation(b), [0.6, 0.2], rtol=1e-8)

    def test_underdetermined(self):
        with pytest.raises(UnderdeterminedFitError):
            fit_stretched_direction([1000, 1000], [0.5, 0.5], 1.0)
        with pytest.raises(UnderdeterminedFitError):
            fit_stretched_direction([1000, 2000], [1.0, 1.0], 1.0)

    @pytest.mark.parametrize("S", [[0.5, np.nan], [0.5, np.inf]])
    def test_non_finite(self, S):
        with pytest.raises(DataError):
            fit_stretched_direction([1000, 2000], S, 1.0)

    def test_deterministic(self):
        S = predict_attenuation(B5, 1.1e-3, 0.7) + 0.01 * np.sin(B5)
        a = fit_stretched_direction(B5, S, 1.0)
        b = fit_stretched_direction(B5, S, 1.0)
        assert a.params == b.params and a.rss == b.rss

    @given(st.floats(2e-4, 2.5e-3), st.floats(0.4, 0.95), st.floats(5e-4, 4e-3), st.floats(0.3, 1.0))
    def test_exact_recovery(self, D, alpha, D0, a0):
        S = 800.0 * predict_attenuation(B5, D, alpha)
        fit = fit_stretched_direction(B5, S, 800.0, init=StretchedParams(D0, a0))
        assert fit.converged
        assert_allclose([fit.params.D, fit.params.alpha], [D, alpha], rtol=1e-6)

    @given(st.floats(1e-3, 1e4))
    def test_scale_equivariance(self, c):
        rng = np.random.default_rng(7)
        S = predict_attenuation(B5, 0.8e-3, 0.75) * (1 + 0.02 * rng.standard_normal(5))
        a = fit_stretched_direction(B5, S, 1.0)
        b = fit_stretched_direction(B5, c * S, c)
        assert_allclose([b.params.D, b.params.alpha], [a.params.D, a.params.alpha], rtol=1e-7)

    def test_matches_generic_bounded_solver(self):
        from scipy.optimize import least_squares

        rng = np.random.default_rng(3)
        b = np.repeat(B5, 3)
        S = predict_attenuation(b, 1.2e-3, 0.65) + 0.02 * rng.standard_normal(b.size)
        fit = fit_stretched_direction(b, S, 1.0)
        ref = least_squares(lambda p: np.exp(-((b * p[0] * 1e-3) ** p[1])) - S, [1.0, 0.8],
                            bounds=([1e-3, 1e-2], [10.0, 1.0]), method="trf", xtol=1e-14, ftol=1e-14, gtol=1e-14)
        assert_allclose([fit.params.D, fit.params.alpha], [ref.x[0] * 1e-3, ref.x[1]], rtol=1e-5)


def test_options_roundtrip():
    o = FitOptions(xtol=1e-9, max_iter=50, d_bounds=(1e-5, 5e-3))
    assert FitOptions.from_dict(o.to_dict()) == o
    with pytest.raises(ValueError):
        FitOptions(alpha_bounds=(0.5, 1.5))


class TestVoxel:
    def _setup(self, shells=(200, 1000, 1800, 2400, 3000)):
        scheme = human_scheme(shells)
        bundles = match_directions(scheme, group_shells(scheme))
        return scheme, bundles

    def test_human_subset(self):
        scheme, bundles = self._setup()
        T = tensor_from_eigen([1.5e-3, 0.4e-3, 0.3e-3], (10, 20, 30))
        vf = fit_stretched_voxel(signals(scheme, T, 0.7), scheme, bundles, voxel_index=(1, 2, 3))
        assert len(vf.fits) == 33 and vf.voxel_index == (1, 2, 3)
        truth = np.einsum("ki,ij,kj->k", bundles.canonical, T, bundles.canonical)
        assert_allclose(vf.D, truth, rtol=1e-6)
        assert_allclose(vf.alpha, 0.7, rtol=1e-6)

    def test_fifteen_shells(self):
        scheme, bundles = self._setup(range(200, 3001, 200))
        T = 0.8e-3 * np.eye(3)
        vf = fit_stretched_voxel(signals(scheme, T, 0.85), scheme, bundles)
        assert len(vf.fits) == 33
        assert_allclose(vf.alpha, 0.85, rtol=1e-6)

    def test_shell_subset(self):
        scheme, bundles = self._setup()
        vf = fit_stretched_voxel(signals(scheme, 0.8e-3 * np.eye(3), 0.85), scheme, bundles,
                                 shell_subset=[1000, 3000])
        assert_allclose(vf.D, 0.8e-3, rtol=1e-6)

    def test_single_direction(self):
        scheme = GradientScheme([[0, 0, 0], [0, 0, 1], [0, 0, 1]], [0, 1000, 2000], TAU)
        bundles = match_directions(scheme, group_shells(scheme))
        vf = fit_stretched_voxel(signals(scheme, 1e-3 * np.eye(3), 0.9), scheme, bundles)
        assert len(vf.fits) == 1

    def test_failed_direction_does_not_abort(self):
        scheme, bundles = self._setup()
        S = signals(scheme, 1e-3 * np.eye(3), 0.9)
        k = bundles.members[0, 1:]
        S[k] = 1000.0  # no attenuation on this direction
        vf = fit_stretched_voxel(S, scheme, bundles)
        assert not vf.converged[0] and vf.converged[1:].all()

    def test_baseline_errors(self):
        scheme, bundles = self._setup()
        S = signals(scheme, 1e-3 * np.eye(3), 0.9)
        with pytest.raises(DataError):
            fit_stretched_voxel(S, scheme, bundles, s0=0.0)
        no_b0 = scheme.subset(np.arange(1, scheme.n_measurements))
        b2 = match_directions(no_b0, group_shells(no_b0))
        with pytest.raises(DataError, match="b = 0"):
            fit_stretched_voxel(S[1:], no_b0, b2)
        vf = fit_stretched_voxel(S[1:], no_b0, b2, s0=1000.0)
        assert_allclose(vf.D, 1e-3, rtol=1e-6)


class TestVolume:
    def test_thread_count_and_chunking_invariant(self, monkeypatch):
        scheme = human_scheme()
        bundles = match_directions(scheme, group_shells(scheme))
        rng = np.random.default_rng(0)
        data = np.empty((3, 3, 2, scheme.n_measurements))
        for idx in np.ndindex(3, 3, 2):
            T = tensor_from_eigen(rng.uniform(0.3e-3, 2e-3, 3), rng.uniform(0, 90, 3))
            data[idx] = signals(scheme, T, rng.uniform(0.5, 1.0)) + rng.normal(0, 5, scheme.n_measurements)
        data = np.abs(data)
        ref = fit_stretched_volume(data, scheme, bundles, threads=1)
        monkeypatch.setattr(fitting, "CHUNK", 37)
        other = fit_stretched_volume(data, scheme, bundles, threads=4)
        for key in ("D", "alpha", "rss", "n_iter", "flags"):
            assert_array_equal(getattr(ref, key), getattr(other, key))

    def test_mask_and_shape_errors(self):
        scheme = human_scheme()
        bundles = match_directions(scheme, group_shells(scheme))
        data = np.tile(signals(scheme, 1e-3 * np.eye(3), 0.8), (2, 2, 1, 1))
        mask = np.array([[[True], [False]], [[False], [False]]])
        fit = fit_stretched_volume(data, scheme, bundles, mask=mask)
        assert np.isnan(fit.D[0, 1, 0]).all() and np.isfinite(fit.D[0, 0, 0]).all()
        with pytest.raises(DataError, match="measurements"):
            fit_stretched_volume(data[..., :-1], scheme, bundles)
        with pytest.raises(UnderdeterminedFitError):
            fit_stretched_volume(data, scheme, bundles, shell_subset=[1000])


class TestDTI:
    def test_isotropic(self):
        scheme = human_scheme([1000])
        fit = fit_dti(signals(scheme, 0.7e-3 * np.eye(3), 1.0), scheme)
        assert_allclose(fit.eigenvalues, 0.7e-3, rtol=1e-10)
        assert fit.converged

    def test_prolate_rotated(self):
        scheme = human_scheme([1000, 2000])
        T = tensor_from_eigen([1.7e-3, 0.3e-3, 0.3e-3], (37, -21, 65))
        fit = fit_dti(signals(scheme, T, 1.0), scheme)
        assert_allclose(fit.eigenvalues, [1.7e-3, 0.3e-3, 0.3e-3], atol=1e-9 * 1.7e-3)
        assert_allclose(fit.tensor, T, atol=1e-12)

    def test_five_directions(self):
        d = electrostatic_directions(5)
        scheme = multishell_scheme([1000], directions=d)
        with pytest.raises(RankDeficientError):
            fit_dti(np.ones(scheme.n_measurements), scheme)

    @given(st.floats(0, 360), st.floats(0, 180), st.floats(0, 360))
    def test_rotation_equivariant(self, a, b, c):
        from scipy.spatial.transform import Rotation

        scheme = human_scheme([1000, 2000])
        T = tensor_from_eigen([1.5e-3, 0.6e-3, 0.4e-3], (10, 20, 30))
        R = Rotation.from_euler("zyx", [a, b, c], degrees=True).as_matrix()
        base = fit_dti(signals(scheme, T, 1.0), scheme)
        rot = GradientScheme(scheme.directions @ R.T, scheme.bvals, TAU)
        moved = fit_dti(signals(rot, R @ T @ R.T, 1.0), rot)
        assert_allclose(moved.eigenvalues, base.eigenvalues, atol=1e-9 * 1.5e-3)

    def test_refines_noisy_data(self):
        scheme = human_scheme([1000])
        rng = np.random.default_rng(2)
        T = tensor_from_eigen([1.4e-3, 0.5e-3, 0.4e-3], (5, 5, 5))
        S = signals(scheme, T, 1.0) + rng.normal(0, 10, scheme.n_measurements)
        wls = fit_dti(S, scheme, refine=False)
        nls = fit_dti(S, scheme)
        X = fitting.dti_design_matrix(scheme.bvals, scheme.directions)

        def rss(f):
            return np.sum((f.s0 * np.exp(X[:, 1:] @ f.components) - S) ** 2)

        assert rss(nls) <= rss(wls) + 1e-9
