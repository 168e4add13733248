import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rydflux.effective import plaquette_flux
from rydflux.errors import ConfigurationError
from rydflux.spectra import (SCATTERING, CylinderModel, build_two_body_bloch, bulk_bands, chern_numbers,
                             classify_states, doublon_strip_bands, edge_branch, free_pair_energies, gap_window,
                             hofstadter_lattice, perimeter_sites, rational_flux, strip_bands, sub_bands,
                             sweep_spectrum)

FLUX = 2 * np.pi / 3


def _ring(ring=6, **kw):
    kw.setdefault("hard_core", False)
    return CylinderModel(3, 1.0, 0.6, FLUX, ring=ring, **kw)


@pytest.mark.parametrize("m", range(6))
def test_free_pairs_are_a_convolution(m):
    model = _ring()
    K = 2 * np.pi * m / 6
    e = np.linalg.eigvalsh(build_two_body_bloch(model, K).matrix)
    np.testing.assert_allclose(e, free_pair_energies(model, K), atol=1e-12)


def test_ring_rejects_disallowed_momentum():
    with pytest.raises(ConfigurationError):
        build_two_body_bloch(_ring(), 0.1)


def test_frozen_pairs_sit_at_their_interaction():
    v = {(0, 1): 5.0, (0, -1): 5.0, (1, 0): 3.0, (-1, 0): 3.0, (1, 1): 0.5, (-1, -1): 0.5}
    model = CylinderModel(2, 0.0, 0.0, FLUX, v, r_max=3)
    e = np.linalg.eigvalsh(build_two_body_bloch(model, 0.4).matrix)
    allowed = {0.0, 0.5, 3.0, 5.0}
    assert all(min(abs(x - a) for a in allowed) < 1e-12 for x in e)
    assert {a for a in allowed if np.any(np.abs(e - a) < 1e-12)} == allowed


@settings(max_examples=20, deadline=None)
@given(st.floats(-np.pi, np.pi))
def test_blocks_periodic_in_momentum(K):
    model = CylinderModel(3, 1.0, 0.6, FLUX, {(0, 1): 4.0, (0, -1): 4.0}, r_max=4)
    h = build_two_body_bloch(model, K).matrix
    np.testing.assert_allclose(h, h.conj().T, atol=1e-12)
    a = np.linalg.eigvalsh(h)
    b = np.linalg.eigvalsh(build_two_body_bloch(model, K + 2 * np.pi).matrix)
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_noninteracting_states_are_all_scattering():
    model = CylinderModel(3, 1.0, 0.6, FLUX, r_max=6)
    spec = sweep_spectrum(model, np.linspace(-np.pi, np.pi, 7), check_r_max=False)
    labels = classify_states(spec)
    assert np.all(labels.types == SCATTERING)


def test_interaction_must_be_inversion_symmetric():
    with pytest.raises(ConfigurationError):
        CylinderModel(3, 1.0, 0.6, FLUX, {(0, 1): 1.0})


def test_strip_gauge_gives_flux_per_plaquette():
    assert CylinderModel(5, 1.0, 0.6, FLUX).check_gauge()


def test_strip_bands_symmetric_for_bipartite_zero_flux():
    e = strip_bands(CylinderModel(4, 1.0, 0.5, 0.0), np.array([0.3]))[0]
    np.testing.assert_allclose(np.sort(e), np.sort(-strip_bands(CylinderModel(4, 1.0, 0.5, 0.0),
                                                                np.array([0.3 + np.pi]))[0]), atol=1e-12)


# ---------------------------------------------------------------- doublons

def test_doublon_flux_doubles():
    model = CylinderModel.reference(l_x=5)
    _, com = doublon_strip_bands(model, 0.0)
    assert com.com_flux == pytest.approx(-2 * np.pi / 3, abs=1e-12)


def test_sub_bands_split_at_widest_gaps():
    groups, gaps = sub_bands([0.0, 0.1, 5.0, 5.2, 9.0], 3)
    assert [list(g) for g in groups] == [[0.0, 0.1], [5.0, 5.2], [9.0]]
    assert gaps == [(0.1, 5.0), (5.2, 9.0)]
    with pytest.raises(ConfigurationError):
        sub_bands([1.0], 2)


# ---------------------------------------------------------------- Chern numbers

def test_chern_numbers_of_one_third_flux():
    assert chern_numbers(1.0, 1.0, FLUX) == [-1, 2, -1]


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.3, 3.0))
def test_chern_numbers_gauge_invariant_and_sum_to_zero(seed, jy):
    c = chern_numbers(1.0, jy, FLUX, rephase_seed=seed)
    assert c == chern_numbers(1.0, jy, FLUX)
    assert sum(c) == 0


def test_chern_number_of_a_group_is_additive():
    assert chern_numbers(1.0, 1.0, FLUX, groups=[(0,), (1, 2)]) == [-1, 1]


def test_zero_flux_is_trivial():
    assert chern_numbers(1.0, 1.0, 0.0) == [0]


def test_chern_grid_floor():
    with pytest.raises(ConfigurationError):
        chern_numbers(1.0, 1.0, FLUX, grid=12)


def test_rational_flux():
    assert rational_flux(2 * np.pi / 3) == (1, 3)
    with pytest.raises(ConfigurationError):
        rational_flux(1.0)


# ---------------------------------------------------------------- finite lattices and edges

def test_lattice_plaquettes_and_perimeter():
    m = hofstadter_lattice(4, 3, 1.0, 0.6, FLUX)
    np.testing.assert_allclose(m.hopping, m.hopping.conj().T)
    for x in range(3):
        for y in range(2):
            i = y * 4 + x
            assert plaquette_flux(m, [i, i + 1, i + 5, i + 4]) == pytest.approx(FLUX)
    p = perimeter_sites(4, 3)
    assert len(p) == len(set(p)) == 2 * (4 + 3) - 4


def test_vacancy_removes_a_site():
    m = hofstadter_lattice(3, 3, 1.0, 1.0, FLUX, vacancies=[4])
    assert not m.active[4] and np.all(m.hopping[4] == 0)


def test_trivial_flux_has_no_gap():
    with pytest.raises(ConfigurationError):
        gap_window(bulk_bands(1.0, 1.0, 0.0, n_k=8))


def test_edge_branches_move_oppositely():
    strip = CylinderModel(15, 1.0, 1.0, FLUX)
    lo, hi = gap_window(bulk_bands(1.0, 1.0, FLUX, n_k=48))
    e = 0.5 * (lo + hi)
    _, v_left, _ = edge_branch(strip, e, "left")
    _, v_right, _ = edge_branch(strip, e, "right")
    assert v_left * v_right < 0
