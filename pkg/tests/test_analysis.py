import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from numpy.testing import assert_allclose

from stretchq.analysis import SWEEP_FIELDS, bmax_sweep, correlation_matrix, correlation_rows, pearson, scatter_pairs
from stretchq.exceptions import DataError, UnderdeterminedFitError
from stretchq.phantom import PhantomSpec, Region, generate_phantom, multishell_scheme, preset_spec

from .conftest import TAU

# sample correlation of [1,2,3,4] and [1,2,3,5], mpmath at 30 digits
RHO_4PT = 0.982707629823990790757742994209

finite_maps = hnp.arrays(np.float64, st.integers(3, 30), elements=st.floats(-1e6, 1e6))


class TestPearson:
    def test_four_points(self):
        assert_allclose(pearson([1, 2, 3, 4], [1, 2, 3, 5]), RHO_4PT, rtol=1e-14)

    def test_identity_and_anti(self):
        a = np.random.default_rng(0).normal(size=(4, 4, 2))
        assert_allclose(pearson(a, a), 1.0, rtol=1e-15)
        assert_allclose(pearson(a, -a + 7.0), -1.0, rtol=1e-15)

    def test_mask_and_nan(self):
        a = np.array([1.0, 2, 3, 4, 100])
        b = np.array([1.0, 2, 3, 5, -100])
        assert_allclose(pearson(a, b, [1, 1, 1, 1, 0]), RHO_4PT, rtol=1e-14)
        b[4] = np.nan
        assert_allclose(pearson(a, b), RHO_4PT, rtol=1e-14)

    def test_errors(self):
        with pytest.raises(DataError, match="zero variance"):
            pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
        with pytest.raises(DataError, match="at least 2"):
            pearson([1.0, 2.0], [1.0, 2.0], [False, False])
        with pytest.raises(DataError, match="shapes"):
            pearson([1.0, 2.0], [1.0, 2.0, 3.0])

    @given(finite_maps, st.data())
    def test_symmetric_and_affine_invariant(self, a, data):
        b = data.draw(hnp.arrays(np.float64, a.shape, elements=st.floats(-1e6, 1e6)))
        try:
            r = pearson(a, b)
        except DataError:
            return
        assert -1.0 <= r <= 1.0
        assert_allclose(pearson(b, a), r, rtol=0, atol=1e-14)
        # a shift far above the spread of a rounds it away, so keep them comparable
        assume(np.ptp(a) >= 1.0)
        s = data.draw(st.floats(1e-3, 1e3))
        c = data.draw(st.floats(-1e6, 1e6))
        assert_allclose(pearson(s * a + c, b), r, atol=1e-6)


def test_correlation_matrix_and_scatter():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 3, 2))
    maps = {"a": x, "b": 2 * x + 1, "c": -x}
    names, rho = correlation_matrix(maps)
    assert names == ["a", "b", "c"]
    assert_allclose(rho, [[1, 1, -1], [1, 1, -1], [-1, -1, 1]], atol=1e-14)
    rows = correlation_rows(names, rho)
    assert rows[2]["map"] == "c" and rows[2]["a"] == pytest.approx(-1)
    x2 = x.copy()
    x2[0, 0, 0] = np.nan
    fields, srows = scatter_pairs({"a": x2, "b": x})
    assert fields == ["i", "j", "k", "a", "b"] and len(srows) == x.size - 1
    assert srows[0]["i"] == 0 and srows[0]["k"] == 1


@pytest.fixture(scope="module")
def sweep_phantom():
    spec = preset_spec("sweep", dims=(4, 2, 1))
    vol, truth = generate_phantom(spec)
    return spec, vol, truth


class TestSweep:
    def test_stretched_stable_gaussian_not(self, sweep_phantom):
        spec, vol, truth = sweep_phantom
        res = bmax_sweep(vol.data, spec.scheme, [2000, 3000, 4200, 5000])
        assert res.reference == "consecutive" and len(res.rows()) == 3 * 3 * 3
        for name in ("rtop", "qmsd", "qmfd"):
            for cfg in ("stretched_fixed", "stretched_bmax"):
                rel = res.changes[cfg][name] / res.levels[cfg][name][:-1]
                assert np.all(rel <= 1e-6)
            rel_g = res.changes["gaussian_bmax"][name] / res.levels["gaussian_bmax"][name][:-1]
            assert np.all(rel_g > 1e-2)
        assert_allclose(res.levels["stretched_fixed"]["rtop"][0], truth.rtop.mean(), rtol=1e-2)

    def test_gaussian_change_grows_with_gap(self, sweep_phantom):
        spec, vol, _ = sweep_phantom
        near = bmax_sweep(vol.data, spec.scheme, [2000, 3000], configs=("gaussian_bmax",))
        far = bmax_sweep(vol.data, spec.scheme, [2000, 5000], configs=("gaussian_bmax",))
        for name in ("rtop", "qmsd", "qmfd"):
            assert 0 < near.changes["gaussian_bmax"][name][0] < far.changes["gaussian_bmax"][name][0]

    def test_gaussian_levels_match_apparent_diffusivity(self):
        # isotropic alpha = 0.7: a single shell at b sees D_app = (bD)^alpha / b
        D, a = 0.7e-3, 0.7
        spec = PhantomSpec((1, 1, 1), [Region(D * np.eye(3), a)], multishell_scheme([1000, 2000, 3000]))
        vol, _ = generate_phantom(spec)
        res = bmax_sweep(vol.data, spec.scheme, [2000, 3000], configs=("gaussian_bmax",))
        for k, b in enumerate((2000, 3000)):
            d_app = (b * D) ** a / b
            assert_allclose(res.levels["gaussian_bmax"]["rtop"][k], (4 * np.pi * TAU * d_app) ** -1.5, rtol=1e-10)

    def test_single_entry(self, sweep_phantom):
        spec, vol, _ = sweep_phantom
        res = bmax_sweep(vol.data, spec.scheme, [3000], keep_maps=True)
        assert all(res.changes[c][m].size == 0 for c in res.configs for m in ("rtop", "qmsd", "qmfd"))
        assert res.rows() == [] and len(res.maps["stretched_fixed"]) == 1
        assert SWEEP_FIELDS[0] == "config"

    def test_errors(self, sweep_phantom):
        spec, vol, _ = sweep_phantom
        with pytest.raises(UnderdeterminedFitError):
            bmax_sweep(vol.data, spec.scheme, [1000, 3000])
        with pytest.raises(DataError, match="not an acquired shell"):
            bmax_sweep(vol.data, spec.scheme, [2500])
        with pytest.raises(ValueError):
            bmax_sweep(vol.data, spec.scheme, [3000], configs=("other",))
