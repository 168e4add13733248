import csv
import math

import numpy as np
import pytest

from rydflux import presets as P
from rydflux.effective import hopping_strength
from rydflux.errors import ConfigurationError, ConvergenceError
from rydflux.floquet import (block_quasienergies, build_sector_floquet, converged_block_quasienergies,
                             elementary_frequency, gvv_effective, quasienergies)
from rydflux.model import ArrayGeometry, ColorField, DressingConfig, InteractionLaw
from rydflux.units import mhz


def test_elementary_frequency_of_four_colors():
    w, n = elementary_frequency(mhz([120.0, 140.0, 160.0, 180.0]))
    assert w == pytest.approx(mhz(20.0), rel=1e-14)
    assert n == [6, 7, 8, 9]


def test_elementary_frequency_single_detuning():
    w, n = elementary_frequency([mhz(120.0)])
    assert w == mhz(120.0) and n == [1]


def test_incommensurate_detunings_rejected():
    with pytest.raises(ConfigurationError, match="incommensurate"):
        elementary_frequency([mhz(100.0), mhz(100.0) * math.sqrt(2)], bound=10 ** 6)


def test_negative_detunings_keep_sign_in_harmonics():
    w, n = elementary_frequency([-2.0, 3.0])
    assert w == pytest.approx(1.0) and n == [-2, 3]


def _two_atoms(rabi=mhz(5.0), det=mhz(120.0), v=mhz(300.0)):
    return P.two_atom(rabi, det, v=v)


def test_undriven_matrix_is_a_ladder():
    geo = ArrayGeometry.chain(2, 1.0)
    cfg = DressingConfig((ColorField("A", mhz(120.0), {0: 0.0, 1: 0.0}),))
    law = InteractionLaw(mhz(300.0))
    F = build_sector_floquet(cfg, law, geo, n_max=3)
    assert F.coupling.nnz == 0
    L = F.basis.dim
    want = np.tile(F.phys_energy, 7) + np.repeat(np.arange(-3, 4) * F.omega, L)
    np.testing.assert_array_equal(F.diag0, want)
    res = quasienergies(F, (-np.inf, np.inf))
    np.testing.assert_allclose(res.values, np.sort(want), atol=1e-12)


def _block_harmonics(F):
    L = F.basis.dim
    coo = F.coupling.tocoo()
    return set((coo.row // L - coo.col // L).tolist())


def test_single_color_couples_neighbouring_blocks():
    geo, cfg, law = _two_atoms()
    F = build_sector_floquet(cfg, law, geo, n_max=3)
    assert _block_harmonics(F) == {-1, 1}
    np.testing.assert_array_equal(F.dense(), F.dense().conj().T)


def test_two_colors_couple_only_by_their_harmonics(tmp_path):
    geo = ArrayGeometry.chain(2, 4.0)
    cfg = DressingConfig((ColorField("A", mhz(120.0), {0: mhz(5.0), 1: mhz(5.0)}),
                          ColorField("B", mhz(140.0), {0: mhz(4.0)})))
    F = build_sector_floquet(cfg, P.default_law(), geo)
    assert F.n_max == 14
    assert _block_harmonics(F) == {-7, -6, 6, 7}
    F.write_block_csv(tmp_path / "blocks.csv")
    with open(tmp_path / "blocks.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {int(r["harmonic"]) for r in rows} == {-7, -6, 0, 6, 7}


def test_truncation_below_harmonic_rejected():
    geo, cfg, law = P.triangle_geometry(), P.triangle_config(), P.default_law()
    with pytest.raises(ConfigurationError):
        build_sector_floquet(cfg, law, geo, n_max=5)


def test_quasienergies_periodic_under_window_shift():
    geo, cfg, law = _two_atoms()
    F = build_sector_floquet(cfg, law, geo, n_max=6)
    w = F.omega
    a = quasienergies(F, (-0.5 * w, 0.5 * w)).values
    b = quasienergies(F, (0.5 * w, 1.5 * w)).values
    # far from the truncation edge the ladder repeats
    assert len(a) == len(b)
    np.testing.assert_allclose(b - w, a, atol=1e-9 * w)


def test_two_atom_splitting_is_twice_the_hopping():
    geo, cfg, law = _two_atoms()
    F = build_sector_floquet(cfg, law, geo)
    e, _, weight = block_quasienergies(F, F.block_rows([1, 2], 0))
    j = hopping_strength(cfg, law, geo, 0, 1, "A")
    ratio = mhz(5.0) / mhz(120.0)
    assert abs((e[1] - e[0]) - 2 * abs(j)) <= 10 * ratio ** 4 * mhz(120.0)
    assert np.all(weight > 0.9)


def test_triangle_single_excitation_quasienergies(triangle):
    geo, cfg, law, m = triangle
    F = build_sector_floquet(cfg, law, geo)
    e, _, _ = block_quasienergies(F, F.block_rows([1, 2, 4], 0))
    ee = np.linalg.eigvalsh(m.single_particle_hamiltonian())
    split, split_ref = e - e[0], ee - ee[0]
    bound = max((max(abs(o) for o in c.rabi.values()) / c.detuning) ** 4 * c.detuning for c in cfg.colors)
    assert np.max(np.abs(split - split_ref)) <= 10 * bound


def test_triangle_quasienergies_converged_in_truncation(triangle):
    geo, cfg, law, m = triangle
    j = np.abs(m.hopping).max()

    def build(n_max):
        return build_sector_floquet(cfg, law, geo, n_max=n_max)

    e, change = converged_block_quasienergies(build, lambda F: F.block_rows([1, 2, 4], 0), 16, 1e-6 * j)
    assert change < 1e-6 * j and len(e) == 3
    with pytest.raises(ConvergenceError):
        converged_block_quasienergies(build, lambda F: F.block_rows([1, 2, 4], 0), 8, 0.0)


def test_first_order_vanishes_for_off_block_coupling():
    geo, cfg, law = _two_atoms()
    F = build_sector_floquet(cfg, law, geo)
    g = gvv_effective(F, F.block_rows([1, 2], 0), order=1)
    assert np.all(g.terms[1] == 0)


def test_second_order_hop_is_closed_form():
    rabi, det, v = mhz(5.0) * np.exp(0.4j), mhz(120.0), mhz(300.0)
    geo = ArrayGeometry.chain(2, 1.0)
    cfg = DressingConfig((ColorField("A", det, {0: rabi, 1: mhz(4.0)}),))
    law = InteractionLaw(v)
    F = build_sector_floquet(cfg, law, geo)
    g = gvv_effective(F, F.block_rows([1, 2], 0), order=2)
    om0, om1 = rabi, mhz(4.0)
    want = om0 * np.conj(om1) / 4 * (1 / det - 1 / (det + v))
    assert g.terms[2][0, 1] == pytest.approx(want, rel=1e-12)
    assert g.terms[2][0, 1] == pytest.approx(hopping_strength(cfg, law, geo, 0, 1, "A"), rel=1e-12)


def test_degenerate_block_gives_hermitian_model(triangle):
    geo, cfg, law, m = triangle
    F = build_sector_floquet(cfg, law, geo)
    g = gvv_effective(F, F.block_rows([1, 2, 4], 0), order=2)
    assert g.anti_hermitian <= 1e-12 * np.abs(g.h_eff).max()
    np.testing.assert_allclose(g.h_eff, m.single_particle_hamiltonian(), rtol=0, atol=1e-12 * np.abs(g.h_eff).max())


def test_quasi_degenerate_block_reports_residual():
    geo, cfg, law = P.triangle_geometry(), P.triangle_config(), P.default_law()
    shift = mhz(0.5)
    F = build_sector_floquet(cfg.with_site_shifts({1: shift}), law, geo)
    g = gvv_effective(F, F.block_rows([1, 2, 4], 0), order=2)
    h2 = np.abs(g.terms[2]).max()
    assert 0 < g.anti_hermitian <= 2 * shift / mhz(120.0) * h2


def test_block_gate_rejects_spread_blocks():
    geo, cfg, law = _two_atoms()
    F = build_sector_floquet(cfg, law, geo)
    with pytest.raises(ConfigurationError):
        gvv_effective(F, F.block_rows([1], 0) + F.block_rows([2], 1))


def test_cross_color_defect_on_diagonal(triangle):
    geo, cfg, law, _ = triangle
    F = build_sector_floquet(cfg, law, geo)
    na, nb = F.harmonics["A"], F.harmonics["B"]
    # site 0 carries A and B; the state reached through B sits n_A - n_B blocks away
    row = F.row(F.basis.index(1), na - nb)
    assert F.diag0[row] == pytest.approx(cfg.detuning("A") - cfg.detuning("B"), rel=1e-13)
