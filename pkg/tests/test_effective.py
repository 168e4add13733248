import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import constants as sc

from rydflux import presets as P
from rydflux.effective import (EffectiveModel, balance_potentials, build_effective_model, chemical_potential,
                               detuning_for_exchange, dimer_hop, doublon_com_model, exact_pair_exchange,
                               hopping_strength, pair_hop, plaquette_flux, power_budget, wrap_angle)
from rydflux.errors import ConfigurationError, ResonanceError
from rydflux.floquet import build_sector_floquet, gvv_effective
from rydflux.model import ArrayGeometry, ColorField, DressingConfig, InteractionLaw
from rydflux.units import mhz, to_mhz

from strategies import LAW, arrays

OM, DET = mhz(10.0), mhz(120.0)


# ---------------------------------------------------------------- hopping and light shifts

def test_hopping_vanishes_with_interaction():
    geo, cfg, law = P.two_atom(OM, DET, spacing=1e4, law=P.default_law())
    assert abs(hopping_strength(cfg, law, geo, 0, 1, "A")) < 1e-15 * OM ** 2 / (4 * DET)


def test_hopping_strong_interaction_limit():
    geo, cfg, law = P.two_atom(OM, DET, v=1e6 * DET)
    j = hopping_strength(cfg, law, geo, 0, 1, "A")
    assert to_mhz(abs(j)) == pytest.approx(10.0 ** 2 / (4 * 120.0), rel=1e-5)
    assert to_mhz(abs(j)) == pytest.approx(0.2083, abs=1e-4)


def test_hopping_phase_is_phase_difference():
    geo = ArrayGeometry.chain(2, 4.0)
    cfg = DressingConfig((ColorField("A", DET, {0: OM * 1j, 1: OM}),))
    j = hopping_strength(cfg, P.default_law(), geo, 0, 1, "A")
    assert np.angle(j) == pytest.approx(np.pi / 2, abs=1e-15)


def test_hopping_needs_a_channel():
    cfg = DressingConfig((ColorField("A", DET, {0: OM}), ColorField("B", 2 * DET, {1: OM})))
    with pytest.raises(ConfigurationError):
        hopping_strength(cfg, P.default_law(), ArrayGeometry.chain(2, 4.0), 0, 1, "A")


def test_hopping_pole_raises():
    geo, cfg, law = P.two_atom(OM, -DET, v=DET)
    with pytest.raises(ResonanceError):
        hopping_strength(cfg, law, geo, 0, 1, "A")


def test_light_shift_of_isolated_atom():
    geo = ArrayGeometry(((0.0, 0.0),))
    cfg = DressingConfig((ColorField("A", DET, {0: OM}),))
    mu = chemical_potential(cfg, P.default_law(), geo, 0)
    assert mu == pytest.approx(OM ** 2 / (4 * DET), rel=1e-15)
    assert to_mhz(mu) == pytest.approx(0.2083, abs=1e-4)


def test_light_shift_without_drive_is_zero():
    geo = ArrayGeometry.chain(3, 4.0)
    cfg = DressingConfig((ColorField("A", DET, {0: 0.0, 1: 0.0, 2: 0.0}),))
    for i in range(3):
        assert chemical_potential(cfg, P.default_law(), geo, i) == 0.0


def test_identical_atoms_share_light_shift():
    geo, cfg, law = P.two_atom(OM, DET, spacing=4.0, law=P.default_law())
    assert chemical_potential(cfg, law, geo, 0) == chemical_potential(cfg, law, geo, 1)


# ---------------------------------------------------------------- effective model

def test_two_atom_model_has_one_bond():
    om, v = OM, 20 * OM
    d = detuning_for_exchange(om, v, 0.2)
    geo, cfg, law = P.two_atom(om, d, v=v)
    m = build_effective_model(cfg, law, geo, check=False)
    assert np.count_nonzero(np.triu(m.hopping, 1)) == 1
    assert m.hopping[0, 1] == pytest.approx(om ** 2 * v / (4 * d * (d + v)), rel=1e-14)
    assert abs(exact_pair_exchange(om, d, v)) == pytest.approx(0.2 * om, rel=1e-12)


def test_exact_exchange_approaches_closed_form_at_weak_dressing():
    v = mhz(500.0)
    errs = []
    for ratio in (0.02, 0.01, 0.005):
        om = ratio * DET
        ref = om ** 2 * v / (4 * DET * (DET + v))
        errs.append(abs(exact_pair_exchange(om, DET, v) / ref - 1))
    assert errs[0] < 1e-2
    # relative error falls as (Omega / Delta)^2
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.05)


def test_detuning_for_exchange_unbracketed():
    with pytest.raises(ConfigurationError):
        detuning_for_exchange(OM, 20 * OM, 5.0)


def test_no_shared_colors_gives_diagonal_model():
    cfg = DressingConfig((ColorField("A", DET, {0: OM}), ColorField("B", mhz(140.0), {1: OM}),
                          ColorField("C", mhz(160.0), {2: OM})))
    m = build_effective_model(cfg, P.default_law(), P.triangle_geometry())
    assert np.all(m.hopping == 0)


def test_triangle_has_one_bond_per_color(triangle):
    geo, cfg, law, m = triangle
    assert np.count_nonzero(np.triu(m.hopping, 1)) == 3
    for (i, j), lab in (((0, 1), "B"), ((1, 2), "C"), ((0, 2), "A")):
        assert m.hopping[i, j] == hopping_strength(cfg, law, geo, i, j, lab)


def test_triangle_flux(triangle):
    m = triangle[3]
    assert plaquette_flux(m, [0, 1, 2]) == pytest.approx(np.pi / 2, abs=1e-12)
    assert plaquette_flux(m, [2, 1, 0]) == pytest.approx(-np.pi / 2, abs=1e-12)
    assert plaquette_flux(m.with_phases_reversed(), [0, 1, 2]) == pytest.approx(-np.pi / 2, abs=1e-12)


def test_broken_loop_raises(triangle):
    cfg = DressingConfig((ColorField("A", DET, {0: OM, 1: OM}),))
    m = build_effective_model(cfg, P.default_law(), P.triangle_geometry())
    with pytest.raises(ConfigurationError):
        plaquette_flux(m, [0, 1, 2])


def test_wrap_angle_range():
    assert wrap_angle(np.pi) == np.pi
    assert wrap_angle(-np.pi) == np.pi
    assert wrap_angle(3 * np.pi / 2) == pytest.approx(-np.pi / 2)


def test_json_round_trip(triangle, tmp_path):
    m = triangle[3]
    back = EffectiveModel.from_json(m.to_json())
    np.testing.assert_array_equal(back.hopping, m.hopping)
    np.testing.assert_array_equal(back.potential, m.potential)
    m.to_json(tmp_path / "m.json")
    back = EffectiveModel.from_json(str(tmp_path / "m.json"))
    np.testing.assert_array_equal(back.density_interaction, m.density_interaction)


@settings(max_examples=40, deadline=None)
@given(arrays())
def test_model_is_exactly_hermitian(arr):
    geo, cfg = arr
    m = build_effective_model(cfg, LAW, geo, check=False)
    assert m.is_hermitian()


@settings(max_examples=40, deadline=None)
@given(arrays())
def test_hopping_conjugate_symmetric(arr):
    geo, cfg = arr
    for i in range(geo.n_sites):
        for j in range(geo.n_sites):
            if i == j:
                continue
            for lab in cfg.colors_at(i) & cfg.colors_at(j):
                assert hopping_strength(cfg, LAW, geo, i, j, lab) == pytest.approx(
                    np.conj(hopping_strength(cfg, LAW, geo, j, i, lab)), rel=1e-15, abs=0)


@settings(max_examples=40, deadline=None)
@given(arrays(), st.floats(-np.pi, np.pi))
def test_global_phase_leaves_hopping_unchanged(arr, chi):
    geo, cfg = arr
    m = build_effective_model(cfg, LAW, geo, check=False)
    shifted = build_effective_model(cfg.map_rabi(lambda lab, i, om: om * np.exp(1j * chi)), LAW, geo,
                                    check=False)
    np.testing.assert_allclose(shifted.hopping, m.hopping, rtol=1e-13, atol=0)
    np.testing.assert_allclose(shifted.potential, m.potential, rtol=1e-13, atol=0)


def _complete_loops(m, n):
    out = []
    for size in (3, 4):
        for loop in itertools.permutations(range(n), size):
            if loop[0] == min(loop) and all(m.hopping[b, a] != 0 for a, b in zip(loop, loop[1:] + loop[:1])):
                out.append(list(loop))
    return out


@settings(max_examples=30, deadline=None)
@given(arrays(), st.lists(st.floats(-np.pi, np.pi), min_size=5, max_size=5))
def test_flux_is_gauge_invariant(arr, chis):
    geo, cfg = arr
    m = build_effective_model(cfg, LAW, geo, check=False)
    g = build_effective_model(cfg.map_rabi(lambda lab, i, om: om * np.exp(1j * chis[i])), LAW, geo, check=False)
    for loop in _complete_loops(m, geo.n_sites):
        a, b = plaquette_flux(m, loop), plaquette_flux(g, loop)
        assert abs(wrap_angle(a - b)) < 1e-12
        assert abs(wrap_angle(plaquette_flux(m, loop[::-1]) + a)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(arrays(monochromatic=True))
def test_monochromatic_flux_vanishes(arr):
    geo, cfg = arr
    m = build_effective_model(cfg, LAW, geo, check=False)
    for loop in _complete_loops(m, geo.n_sites):
        assert abs(plaquette_flux(m, loop)) < 1e-12


@settings(max_examples=50)
@given(st.floats(1e-5, 1e-2), st.floats(0.1, 2.0))
def test_weak_interaction_series(v_over_d, om_over_d):
    d = DET
    geo, cfg, law = P.two_atom(om_over_d * d, d, v=v_over_d * d)
    j = abs(hopping_strength(cfg, law, geo, 0, 1, "A"))
    lead = (om_over_d * d) ** 2 * (v_over_d * d) / (4 * d * d)
    # 1 / (1 + x) = 1 - x + O(x^2)
    assert abs(j / lead - (1 - v_over_d)) <= 2 * v_over_d ** 2


# ---------------------------------------------------------------- balancing

def test_balanced_array_needs_no_shift():
    geo, cfg, law = P.two_atom(OM, DET, spacing=4.0, law=P.default_law())
    res = balance_potentials(cfg, law, geo, 0)
    assert res.iterations == 0
    assert all(v == 0.0 for v in res.shifts.values())


def test_single_site_is_balanced():
    geo = ArrayGeometry(((0.0, 0.0),))
    cfg = DressingConfig((ColorField("A", DET, {0: OM}),))
    res = balance_potentials(cfg, P.default_law(), geo, 0)
    assert res.iterations == 0 and res.shifts == {0: 0.0}


def test_balancing_equalises_triangle_potentials():
    geo, law = P.triangle_geometry(5.0), P.default_law()
    cfg = P.triangle_config()
    res = balance_potentials(cfg, law, geo, 0)
    m = build_effective_model(res.config, law, geo)
    assert np.ptp(m.potential) < 1e-9 * DET
    assert res.shifts[0] == 0.0
    # frozen from the first converged run
    assert to_mhz(res.shifts[1]) == pytest.approx(-0.0185, abs=5e-4)
    assert to_mhz(res.shifts[2]) == pytest.approx(-0.0078, abs=5e-4)


def test_balancing_needs_dressed_reference():
    geo, cfg, law = P.two_atom(OM, DET, spacing=4.0, law=P.default_law())
    with pytest.raises(ConfigurationError):
        balance_potentials(cfg, law, geo, 5)


# ---------------------------------------------------------------- pinned-excitation hops

def test_dimer_hop_vanishes_without_interaction():
    geo = ArrayGeometry(((0.0, 0.0), (4.0, 0.0), (4.0, 1e4)))
    cfg = DressingConfig((ColorField("A", DET, {1: OM, 2: OM}),))
    amp = dimer_hop(cfg, P.default_law(), geo, 0, 1, 2, "A", tol=np.inf)
    assert abs(amp) < 1e-20


def test_dimer_hop_without_pinned_interaction_is_plain_hop():
    geo = ArrayGeometry(((-1e4, 0.0), (0.0, 0.0), (4.0, 0.0)))
    cfg = DressingConfig((ColorField("A", DET, {1: OM, 2: OM * np.exp(0.3j)}),))
    law = P.default_law()
    amp = dimer_hop(cfg, law, geo, 0, 1, 2, "A", tol=np.inf)
    assert amp == pytest.approx(hopping_strength(cfg, law, geo, 2, 1, "A"), rel=1e-12)


def test_dimer_hop_matches_second_order_floquet(triangle):
    geo, cfg, law, _ = triangle
    amp = dimer_hop(cfg, law, geo, 0, 1, 2, "C")
    assert amp == pytest.approx(pair_hop(cfg, law, geo, 0, 1, 2), rel=1e-14)
    F = build_sector_floquet(cfg, law, geo, sectors=(0, 1, 2, 3))
    rows = F.block_rows([0b011, 0b101], 0)
    g = gvv_effective(F, rows, 2)
    assert g.terms[2][1, 0] == pytest.approx(amp, rel=1e-10)


def test_dimer_hop_rejects_split_pair_energies():
    geo = ArrayGeometry(((0.0, 0.0), (4.0, 0.0), (0.0, 6.0)))
    cfg = DressingConfig((ColorField("A", DET, {1: OM, 2: OM}),))
    from rydflux.effective import QuasiDegeneracyError
    with pytest.raises(QuasiDegeneracyError):
        dimer_hop(cfg, P.default_law(), geo, 0, 1, 2, "A")


# ---------------------------------------------------------------- bound pairs

def test_doublon_flux_is_doubled():
    d = doublon_com_model(1.0, 1.0, 2 * np.pi / 3, 10.0, 10.0, 10.0)
    assert d.com_flux == pytest.approx(-2 * np.pi / 3, abs=1e-15)
    assert d.com_hopping_x == pytest.approx(0.2)
    assert d.com_hopping_y == pytest.approx(0.2)


def test_doublon_x_hop_vanishes_with_large_gap():
    assert doublon_com_model(1.0, 1.0, 0.5, 10.0, 1e12, 10.0).com_hopping_x < 1e-11


@given(st.floats(-10.0, 10.0))
def test_doublon_flux_doubling_exact(phi):
    d = doublon_com_model(1.0, 0.7, phi, 20.0, 30.0, 40.0)
    # the wrap is an exact remainder, so only the final subtraction rounds
    assert abs(wrap_angle(d.com_flux - 2 * phi)) <= 4e-15


# ---------------------------------------------------------------- power budget

def _budget(j, eps_b=0.01, eps_c=0.01):
    return power_budget(j, eps_b, eps_c, 2.0, 100, 1.0)


def test_power_scales_as_j_squared():
    a, b = _budget(mhz(0.25)), _budget(mhz(0.5))
    assert b.total_power / a.total_power == pytest.approx(4.0, rel=1e-12)
    assert b.total_power_closed_form / a.total_power_closed_form == pytest.approx(4.0, rel=1e-12)


def test_bit_flip_term_doubles_when_budget_halves():
    j = mhz(0.25)
    p = [_budget(j, e).total_power for e in (0.04, 0.02, 0.01)]
    # P = A / eps_b + B
    assert (p[2] - p[1]) / (p[1] - p[0]) == pytest.approx(2.0, rel=1e-10)


def test_power_budget_hand_evaluation():
    om_a = mhz(10.0)
    eps = 0.01
    j = om_a * math.sqrt(eps) / 4
    b = _budget(j, eps, eps)
    # field amplitude E = hbar Omega / d, intensity c eps0 E^2 / 2, Gaussian spot power pi w^2 I / 2
    d = sc.e * sc.physical_constants["Bohr radius"][0]
    delta, spacing = 4 * j / eps, j / math.sqrt(eps)
    total = 0.0
    for k in range(4):
        om2 = 4 * j * (delta + k * spacing) * 1e12
        field = sc.hbar * math.sqrt(om2) / d
        total += 100 * math.pi * (2e-6) ** 2 / 2 * sc.c * sc.epsilon_0 * field ** 2 / 2
    assert b.total_power == pytest.approx(total, rel=1e-10)
    assert b.total_power_closed_form == pytest.approx(total, rel=1e-10)
    assert b.rabi[0] == pytest.approx(om_a, rel=1e-12)
    assert total == pytest.approx(2.11376e-6, rel=1e-5)


def test_power_budget_validation():
    with pytest.raises(ConfigurationError):
        power_budget(1.0, 1.5, 0.01, 2.0, 10, 1.0)
    with pytest.raises(ConfigurationError):
        power_budget(-1.0, 0.1, 0.01, 2.0, 10, 1.0)
