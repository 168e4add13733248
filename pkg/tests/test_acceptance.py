"""Acceptance runs at full scale.

Each test records one PASS/FAIL row that the terminal summary prints, then
asserts.  Scenario outputs are kept per session so the determinism check can
re-run every scenario and compare tables byte for byte.
"""


import numpy as np
import pytest

from conftest import ACCEPTANCE
from rydflux import presets as P
from rydflux.dynamics import evolve_full
from rydflux.effective import build_effective_model, doublon_com_model, plaquette_flux
from rydflux.model import ArrayGeometry, ColorField, DressingConfig, InteractionLaw
from rydflux.scenarios import SCENARIOS, run_scenario
from rydflux.spectra import (SCATTERING, TYPE_I, TYPE_II, TYPE_III, CylinderModel, chern_numbers,
                             classify_states, default_k_grid, doublon_strip_bands, sweep_spectrum)
from rydflux.units import mhz

SEED = 1
_RUNS = {}


@pytest.fixture(scope="session")
def outdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def _run(name, outdir):
    if name not in _RUNS:
        out = outdir / f"{name}_a"
        _, summary, runtime = run_scenario(name, None, SEED, out)
        _RUNS[name] = (summary, runtime, out)
    return _RUNS[name]


def _record(n, title, ok, detail):
    ACCEPTANCE.append((n, title, bool(ok), detail))
    print(f"[{'PASS' if ok else 'FAIL'}] {n} {title}: {detail}")
    assert ok, detail


def test_01_two_atom_transfer(outdir):
    # compile the kernels before timing
    evolve_full(ArrayGeometry.chain(2, 1.0), DressingConfig((ColorField("A", 10.0, {0: 1.0, 1: 1.0}),)),
                InteractionLaw(50.0), [0], [0.0, 0.01])
    s, rt, _ = _run("two_atom_transfer", outdir)
    ok = s["peak_transfer"] >= 0.99 and abs(s["peak_time_ratio"] - 1) <= 0.02 and rt < 1.0
    _record(1, "two-atom transfer", ok,
            f"peak {s['peak_transfer']:.5f} at t/T {s['peak_time_ratio']:.4f}, {rt:.2f} s")


def test_02_crosstalk_sweep(outdir):
    s, rt, _ = _run("crosstalk_sweep", outdir)
    ratio = np.array(s["separation_over_J"])
    sel = ratio >= 20 * (1 - 1e-9)
    scaled = np.array(s["scaled_infidelity"])[sel]
    spread = float(scaled.max() / scaled.min())
    decade = float(ratio[sel].max() / ratio[sel].min())
    dev = float(np.max(np.array(s["max_population_deviation"])[sel]))
    ok = spread <= 3 and decade >= 10 and dev <= 0.05 and rt < 60
    _record(2, "crosstalk suppression", ok,
            f"scaled infidelity spread {spread:.2f} over {decade:.0f}x separation; "
            f"worst pointwise deviation {dev:.3f}; {rt:.1f} s")


def test_03_three_atom_chiral(outdir):
    s, rt, _ = _run("three_atom_chiral", outdir)
    ok = s["mean_l1"] <= 0.1 and s["order"] == "1-2-3" and s["order_reversed"] == "1-3-2" and rt < 60
    _record(3, "three-atom chiral motion", ok,
            f"mean L1 {s['mean_l1']:.3f}; order {s['order']}, reversed {s['order_reversed']}; {rt:.1f} s")


def test_04_zero_flux_theorem():
    rng = np.random.default_rng(SEED)
    law = InteractionLaw(mhz(1000.0) * 4.0 ** 6)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(3, 7))
        pts = tuple((4.0 * (k % 3) + rng.uniform(-1, 1), 4.0 * (k // 3) + rng.uniform(-1, 1)) for k in range(n))
        amps = {i: mhz(rng.uniform(0.5, 1.5)) * np.exp(1j * rng.uniform(-np.pi, np.pi)) for i in range(n)}
        cfg = DressingConfig((ColorField("A", mhz(rng.uniform(100, 200)), amps),))
        m = build_effective_model(cfg, law, ArrayGeometry(pts))
        loop = [int(i) for i in rng.permutation(n)[: int(rng.integers(3, n + 1))]]
        worst = max(worst, abs(plaquette_flux(m, loop)))
    _record(4, "zero-flux theorem", worst < 1e-12, f"largest |flux| {worst:.2e} over 100 configurations")


@pytest.mark.slow
def test_05_floquet_oracle(outdir):
    s, rt, _ = _run("floquet_oracle", outdir)
    gvv = max(s["worst_single_gvv_rel"], s["worst_pair_gvv_rel"])
    w = s["worst_deviation_over_bound_unit"]
    ok = w <= s["constant"] and gvv <= 1e-10 and rt < 300
    _record(5, "Floquet / GVV oracle", ok,
            f"worst deviation {w:.2f} (Omega/Delta)^4 |Delta| with C = {s['constant']:g}; "
            f"GVV relative {gvv:.1e}; {rt:.1f} s")


@pytest.mark.slow
def test_06_ladder_collision(outdir):
    s, rt, _ = _run("hh_ladder_collision", outdir)
    sep = s["min_separation"]["exact"]
    ok = s["dimension"] == 2 ** 16 and sep > 1 and s["mean_l1"] <= 0.15 and rt < 1800
    _record(6, "4x4 ladder collision", ok,
            f"dim {s['dimension']}, min separation {sep:.2f} sites, mean L1 {s['mean_l1']:.3f}; {rt:.0f} s")


def test_07_chern_numbers():
    import time
    t0 = time.perf_counter()
    cyl = CylinderModel.reference()
    jx, jy = cyl.j_x, cyl.j_y
    c = chern_numbers(jx, jy, 2 * np.pi / 3)
    c0 = chern_numbers(jx, jy, 0.0)
    v1, v2, v3, v4 = (cyl.interaction(*d) for d in ((0, 1), (0, 2), (0, 3), (1, 2)))
    com = doublon_com_model(jx, jy, cyl.flux, v2 - v1, v2 - v4, v2 - v3)
    cd = chern_numbers(com.com_hopping_x, com.com_hopping_y, 4 * np.pi / 3)
    cref = chern_numbers(com.com_hopping_x, com.com_hopping_y, -2 * np.pi / 3)
    rt = time.perf_counter() - t0
    ok = c == [-1, 2, -1] and c0 == [0] and sum(c) == 0 and cd == cref and rt < 60
    _record(7, "Chern numbers", ok, f"{c} at 2pi/3, {c0} at 0, doublon {cd} vs {cref}; {rt:.1f} s")


@pytest.mark.slow
def test_08_doublon_flux_doubling():
    # C6 scaled so that every gap around the bound pair exceeds 50 J_y
    m = CylinderModel.reference(c6_scale=12.0)
    v1, v2, v3, v4 = (m.interaction(*d) for d in ((0, 1), (0, 2), (0, 3), (1, 2)))
    gap = min(abs(v2 - v1), abs(v2 - v3), abs(v2 - v4)) / max(abs(m.j_x), abs(m.j_y))
    sp = sweep_spectrum(m, default_k_grid(21), check_r_max=False)
    lab = classify_states(sp)
    dev, seen, counts_ok = 0.0, [], True
    for i, K in enumerate(sp.k_grid):
        e = np.sort(sp.energies[i][lab.types[i] == TYPE_I])
        ref, com = doublon_strip_bands(m, K)
        if len(e) != len(ref):
            counts_ok = False
            continue
        dev = max(dev, float(np.abs(e - ref).max()))
        seen.append(e)
    seen = np.concatenate(seen)
    bw = float(seen.max() - seen.min())
    shift = (com.com_flux - 2 * m.flux) / (2 * np.pi)
    ok = gap >= 50 and counts_ok and dev <= 0.1 * bw and shift == round(shift)
    _record(8, "doublon flux doubling", ok,
            f"gaps >= {gap:.1f} J; band deviation {dev / bw:.1e} of bandwidth; "
            f"(Phi' - 2 Phi) / 2pi = {shift:g}")


@pytest.mark.slow
def test_09_two_body_spectra(outdir):
    s, rt, _ = _run("anisotropic_hh_spectra", outdir)
    kinds = {k.split("/")[0] for k in s["counts"]}
    edges = all(g["left"] > 0 and g["right"] > 0 for g in s["type1_edge_states_in_gaps"])
    dev = s["oracle_max_deviation_over_Jx"]
    ok = {TYPE_I, TYPE_II, TYPE_III, SCATTERING} <= kinds and s["type1_subbands"] == 3 and \
        len(s["type1_edge_states_in_gaps"]) == 2 and edges and dev <= 1e-9 and rt < 600
    _record(9, "two-body spectra", ok,
            f"types {sorted(kinds)}; {s['type1_subbands']} type-I sub-bands; edge branches "
            f"{s['type1_edge_states_in_gaps']}; oracle {dev:.1e} J_x; {rt:.0f} s")


@pytest.mark.slow
def test_10_edge_transport(outdir):
    s, rt, _ = _run("edge_transport", outdir)
    one, two = s["single"], s["pair"]
    frac = min(two["min_pair_fraction_clean"], two["min_pair_fraction_vacancy"])
    ok = one["chirality"] * two["chirality"] < 0 and one["transmission"] >= 0.9 and \
        two["transmission"] >= 0.9 and frac >= 0.9 and rt < 600
    _record(10, "edge transport", ok,
            f"chirality {int(one['chirality']):+d} / {int(two['chirality']):+d}; transmission "
            f"{one['transmission']:.3f} / {two['transmission']:.3f}; min pair fraction {frac:.3f}; {rt:.0f} s")


@pytest.mark.slow
def test_11_phase_noise(outdir):
    s, rt, _ = _run("phase_noise", outdir)
    one = s["single"]
    diff = abs(one["tau_trajectories_us"] - one["tau_master_equation_us"])
    ok = diff <= 3 * one["tau_trajectories_err_us"] and \
        s["global"]["tau_us"] >= 10 * one["tau_master_equation_us"] and \
        s["per-atom"]["tau_us"] < s["chiral_period_us"] and \
        s["sz_commutator_max"] <= 1e-12 and s["sz_dissipator_on_sector_states_max"] <= 1e-12 and rt < 600
    _record(11, "phase noise", ok,
            f"single tau {one['tau_trajectories_us']:.3f} +- {one['tau_trajectories_err_us']:.3f} vs "
            f"{one['tau_master_equation_us']:.3f}; global {s['global']['tau_us']:.1f}, per-atom "
            f"{s['per-atom']['tau_us']:.3f} (period {s['chiral_period_us']:.3f}); {rt:.0f} s")


@pytest.mark.slow
def test_12_doppler(outdir):
    s, rt, _ = _run("doppler", outdir)
    ram, ch, beat = s["ramsey"], s["chiral"], s["beat"]
    ratio = ram["ratio_to_inverse_width"]
    ok = abs(ratio - 1) <= 0.2 and ch["retained"] >= 0.5 and \
        abs(beat["shift"] - beat["two_site_shift"]) <= 3 * beat["shift_stderr"]
    _record(12, "Doppler broadening", ok,
            f"Ramsey 1/e time x width {ratio:.3f}; chiral contrast retained {ch['retained']:.3f}; "
            f"beat shift {beat['shift']:.4f} +- {beat['shift_stderr']:.4f} vs {beat['two_site_shift']:.4f}")


@pytest.mark.slow
def test_13_decay_postselect(outdir):
    s, rt, _ = _run("decay_postselect", outdir)
    ok = s["max_success_z"] <= 3 and s["kappa_t_max"] >= 2 and \
        s["conditional_l1"] <= 3 * s["conditional_stderr"] and \
        s["unconditional_l1"] <= 3 * s["unconditional_stderr"]
    _record(13, "decay and post-selection", ok,
            f"success z {s['max_success_z']:.2f} up to kappa t {s['kappa_t_max']:g}; conditional L1 "
            f"{s['conditional_l1']:.3f} (stderr {s['conditional_stderr']:.3f}); unconditional "
            f"{s['unconditional_l1']:.3f} (stderr {s['unconditional_stderr']:.3f})")


@pytest.mark.slow
def test_14_tunability(outdir):
    b, _, _ = _run("potential_balance", outdir)
    h, _, _ = _run("hopping_vs_spacing", outdir)
    ok_b = b["residual_over_detuning"] < 1e-9 and b["balanced"]["min_peak_population"] >= 0.95 and \
        b["balanced"]["cyclic_defect"] <= b["unbalanced"]["cyclic_defect"]
    ok_h = abs(h["saturation_at_d_min"] - 1) <= 0.01 and h["ratio_monotonic"]
    _record(14, "tunability", ok_b and ok_h,
            f"residual {b['residual_over_detuning']:.1e} |Delta|; peaks {b['unbalanced']['min_peak_population']:.4f}"
            f" -> {b['balanced']['min_peak_population']:.4f}; defect {b['unbalanced']['cyclic_defect']:.4f} -> "
            f"{b['balanced']['cyclic_defect']:.4f}; saturation {h['saturation_at_d_min']:.4f}; "
            f"monotonic {h['ratio_monotonic']}")


@pytest.mark.slow
def test_15_determinism(outdir):
    differ = []
    for name in SCENARIOS:
        _, _, first = _run(name, outdir)
        second = outdir / f"{name}_b"
        run_scenario(name, None, SEED, second)
        a = {p.name: p.read_bytes() for p in sorted(first.iterdir()) if p.suffix == ".csv"}
        b = {p.name: p.read_bytes() for p in sorted(second.iterdir()) if p.suffix == ".csv"}
        if not a or a != b:
            differ.append(name)
    _record(15, "determinism", not differ,
            f"{len(SCENARIOS) - len(differ)}/{len(SCENARIOS)} scenarios byte-identical"
            + (f"; differing: {differ}" if differ else ""))
