import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_filter_errors, brute_neuron_errors, naive_bin
from vfscan.edm import (CvvGrid, Vvss, build_edm, derive_vvss,
                        filter_error_analysis, neuron_error_analysis)
from vfscan.errors import AnalysisError


def close_lists(got, want, rtol=1e-6):
    got, want = np.asarray(got), np.asarray(want)
    assert got.shape == want.shape
    both_nan = np.isnan(got) & np.isnan(want)
    same_inf = np.isinf(got) & np.isinf(want) & (np.sign(got) == np.sign(want))
    rest = ~(both_nan | same_inf)
    assert not (np.isnan(got[rest]).any() or np.isnan(want[rest]).any())
    denom = np.maximum(np.abs(got[rest]), np.abs(want[rest]))
    ok = np.abs(got[rest] - want[rest]) <= rtol * np.maximum(denom, 1e-300)
    assert ok.all(), f"worst rel err {np.max(np.abs(got[rest]-want[rest])/np.maximum(denom,1e-300))}"


class TestGrid:
    def test_structure(self):
        g = CvvGrid(10)
        assert len(g.cvvs) == 2 * (2 * 10 + 1)
        assert np.all(np.diff(g.cvvs) > 0)
        assert np.array_equal(g.cvvs, -g.cvvs[::-1])  # symmetric about zero
        assert g.n_bins == 43

    def test_bin_keys_cover_line(self):
        g = CvvGrid(10)
        # every finite bin key is a grid CVV, and classification inverts bin_cvv
        for b in range(g.n_bins):
            if b == g.mask_bin:
                continue
            v = g.bin_cvv(b)
            assert v in g.cvvs
            assert int(g.classify(np.array([v]))[0]) == b

    def test_boundaries(self):
        g = CvvGrid(10)
        assert int(g.classify(np.array([2.0 ** -10]))[0]) == g.mask_bin + 1
        assert int(g.classify(np.array([np.nextafter(2.0 ** -10, 0)]))[0]) == g.mask_bin
        assert int(g.classify(np.array([2.0 ** 10]))[0]) == g.pos_overflow_bin
        assert int(g.classify(np.array([-(2.0 ** 10)]))[0]) == g.neg_overflow_bin
        assert int(g.classify(np.array([np.nan]))[0]) == g.pos_overflow_bin
        assert int(g.classify(np.array([0.0]))[0]) == g.mask_bin

    def test_small_rho(self):
        g = CvvGrid(2)
        assert g.n_bins == 2 * 4 + 3
        assert int(g.classify(np.array([5.0]))[0]) == g.pos_overflow_bin


class TestBuildEdm:
    def test_counting_example(self):
        g = CvvGrid()
        edm = build_edm(np.array([-1.0, -1.0, -1.0, 1.0]), g)
        m = edm.masses
        assert m[int(g.classify(np.array([-1.0]))[0])] == 0.75
        assert m[int(g.classify(np.array([1.0]))[0])] == 0.25

    def test_all_zero_mask(self):
        g = CvvGrid()
        edm = build_edm(np.zeros(17), g)
        assert edm.masses[g.mask_bin] == 1.0

    def test_empty_list_rejected(self):
        with pytest.raises(AnalysisError):
            build_edm(np.array([]), CvvGrid())

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(min_value=-2e4, max_value=2e4), min_size=1, max_size=200),
           st.integers(min_value=2, max_value=12))
    def test_matches_naive_binning(self, errors, rho):
        g = CvvGrid(rho)
        edm = build_edm(np.array(errors), g)
        assert np.array_equal(edm.counts, naive_bin(errors, rho))

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(allow_nan=True, allow_infinity=True, width=32),
                    min_size=1, max_size=100))
    def test_mass_and_cdf_invariants(self, errors):
        edm = build_edm(np.array(errors), CvvGrid())
        assert abs(edm.masses.sum() - 1.0) <= 1e-9
        cdf = edm.cdf
        assert np.all(np.diff(cdf) >= 0)
        assert abs(cdf[-1] - 1.0) <= 1e-9


class TestVvss:
    def test_mass_at_extremes(self):
        g = CvvGrid()
        v = derive_vvss(build_edm(np.array([-1.0, 1.0]), g))
        assert v.neg_outer == (-1.0,) and v.pos_outer == (1.0,)
        assert v.neg_inner == () and v.pos_inner == ()

    def test_all_mask_empty(self):
        v = derive_vvss(build_edm(np.zeros(5), CvvGrid()))
        assert v.members == ()

    def test_membership_is_mass_predicate(self):
        rng = np.random.default_rng(5)
        g = CvvGrid()
        errors = rng.normal(0, 8, 500)
        edm = build_edm(errors, g)
        members = set(derive_vvss(edm).members)
        for b in range(1, g.n_bins - 1):
            if b == g.mask_bin:
                continue
            assert (g.bin_cvv(b) in members) == (edm.counts[b] > 0)

    def test_overflow_mass_yields_no_members(self):
        # beyond-grid mass is assumed critical; nothing to search for it
        g = CvvGrid()
        v = derive_vvss(build_edm(np.array([np.nan, -1e10]), g))
        assert v.members == ()

    def test_partition_spaces(self):
        g = CvvGrid()
        v = derive_vvss(build_edm(np.array([-4.0, -0.25, 0.125, 8.0]), g))
        assert v.neg_outer == (-4.0,)
        assert v.neg_inner == (-0.25,)
        assert v.pos_inner == (0.125,)
        assert v.pos_outer == (8.0,)


class TestNeuronErrors:
    def test_single_input_sign_flip(self):
        errs = neuron_error_analysis(np.array([1.0], np.float32),
                                     np.array([0.5], np.float32))
        assert errs[31] == -1.0  # eps=-2 at the sign bit times w=0.5

    def test_zero_weights_all_masked(self):
        # inputs in [2,4) keep all single flips finite
        rng = np.random.default_rng(0)
        x = rng.uniform(2, 4, 12).astype(np.float32)
        errs = neuron_error_analysis(x, np.zeros(12, np.float32))
        edm = build_edm(errs, CvvGrid())
        assert edm.masses[edm.grid.mask_bin] == 1.0

    def test_matches_brute_force_small(self):
        rng = np.random.default_rng(42)
        x = rng.normal(0, 2, (2, 3, 3)).astype(np.float32)
        w = rng.normal(0, 1, (2, 3, 3)).astype(np.float32)
        close_lists(neuron_error_analysis(x, w), brute_neuron_errors(x, w))

    def test_valid_mask_drops_entries(self):
        x = np.array([1.0, 2.0, 3.0], np.float32)
        w = np.array([1.0, 1.0, 1.0], np.float32)
        errs = neuron_error_analysis(x, w, valid=np.array([True, False, True]))
        assert errs.size == 64
        full = neuron_error_analysis(x, w).reshape(32, 3)
        assert np.array_equal(errs.reshape(32, 2), full[:, [0, 2]],)

    def test_shape_mismatch(self):
        with pytest.raises(AnalysisError):
            neuron_error_analysis(np.zeros(3, np.float32), np.zeros(4, np.float32))


class TestFilterErrors:
    def test_unit_filter_constant_ifmap(self):
        ifm = np.full((1, 3, 3), 2.0, np.float32)
        filt = np.ones((1, 1, 1), np.float32)
        errs = filter_error_analysis(ifm, filt).reshape(32, 1, 9)
        assert np.all(errs[31] == -4.0)  # sign flip: eps=-2, delta=eps*x

    def test_zero_ifmap(self):
        errs = filter_error_analysis(np.zeros((2, 4, 4), np.float32),
                                     np.full((2, 3, 3), 1.5, np.float32))
        assert np.all(errs[np.isfinite(errs)] == 0.0)

    def test_matches_brute_reconvolution(self):
        rng = np.random.default_rng(9)
        ifm = rng.normal(0, 1.5, (2, 4, 4)).astype(np.float32)
        filt = rng.normal(0, 0.8, (2, 3, 3)).astype(np.float32)
        for stride, padding in ((1, 0), (1, 1), (2, 1)):
            got = filter_error_analysis(ifm, filt, stride, padding)
            want = brute_filter_errors(ifm, filt, stride, padding)
            close_lists(got, want)
