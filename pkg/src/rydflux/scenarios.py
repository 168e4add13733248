"""Scenario catalog: parameter schemas and runners.

Every runner takes the resolved parameters, a seed, an output directory and
a worker count, writes its CSV tables and returns a JSON-ready summary.
Frequencies are entered in 2pi x MHz and converted here, once.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path
from types import SimpleNamespace

import numpy as np
from scipy.optimize import curve_fit

from . import dynamics as D
from . import effective as E
from . import noise as N
from . import presets as P
from . import spectra as S
from .basis import SectorBasis
from .errors import ConfigurationError
from .floquet import block_quasienergies, build_sector_floquet, gvv_effective
from .model import ArrayGeometry, ColorField, DressingConfig, InteractionLaw, NoiseSpec
from .units import mhz, to_mhz

MHZ = "2π×MHz"
UM = "μm"
US = "μs"
ONE = "1"
RAD = "rad"
RATE = "1/μs"
DIPOLE = "e·a0"
UNITS = (MHZ, UM, US, ONE, RAD, RATE, DIPOLE)


@dataclass(frozen=True)
class Param:
    default: object
    unit: str
    doc: str


@dataclass(frozen=True)
class Scenario:
    name: str
    figure: str
    doc: str
    params: dict
    runner: object

    def defaults(self):
        return {k: p.default for k, p in self.params.items()}

    def resolve(self, overrides=None):
        """Defaults updated by ``overrides``; unknown keys and wrong types are rejected."""
        out = self.defaults()
        for k, v in (overrides or {}).items():
            if k not in self.params:
                raise ConfigurationError(f"unknown parameter '{k}' for scenario {self.name}")
            out[k] = _coerce(k, v, self.params[k].default)
        return out


def _coerce(key, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"parameter '{key}' must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or float(value) != int(value):
            raise ConfigurationError(f"parameter '{key}' must be an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigurationError(f"parameter '{key}' must be a finite number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not value:
            raise ConfigurationError(f"parameter '{key}' must be a non-empty list")
        kind = type(default[0]) if default else float
        return [_coerce(key, x, kind(0)) for x in value]
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"parameter '{key}' must be a string")
        return value
    raise ConfigurationError(f"parameter '{key}' has an unsupported type")


SCENARIOS = {}


def scenario(name, figure, **params):
    def deco(fn):
        SCENARIOS[name] = Scenario(name, figure, (fn.__doc__ or "").strip().splitlines()[0], params, fn)
        return fn
    return deco


def get(name):
    if name not in SCENARIOS:
        raise ConfigurationError(f"unknown scenario '{name}'; valid names: {', '.join(SCENARIOS)}")
    return SCENARIOS[name]


def run_scenario(name, params=None, seed=0, out=".", jobs=1):
    """Resolve parameters, run, and return (resolved params, summary, runtime in s)."""
    sc = get(name)
    resolved = sc.resolve(params)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ctx = SimpleNamespace(seed=int(seed), out=out, jobs=max(int(jobs), 1))
    t0 = time.perf_counter()
    summary = sc.runner(SimpleNamespace(**resolved), ctx)
    return resolved, summary, time.perf_counter() - t0


# ---------------------------------------------------------------- helpers

def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([D.fmt(x) if isinstance(x, (float, np.floating)) else x for x in row])


def _l1(a, b):
    d = np.abs(np.asarray(a) - np.asarray(b)).sum(axis=1)
    return float(d.mean()), float(d.max())


def _label(order):
    return "-".join(str(i + 1) for i in order)


def _pos_int(name, v, lo=1):
    if v < lo:
        raise ConfigurationError(f"parameter '{name}' must be at least {lo}")


def _pair_setup(rabi, v, ratio):
    om, vv = mhz(rabi), mhz(v)
    d = E.detuning_for_exchange(om, vv, ratio)
    j = E.exact_pair_exchange(om, d, vv)
    return om, vv, d, j


# ---------------------------------------------------------------- scenarios

@scenario("two_atom_transfer", "excitation transfer between two dressed atoms versus time",
          rabi=Param(10.0, MHZ, "Rabi frequency of the shared color"),
          interaction=Param(200.0, MHZ, "pair interaction V at the atom spacing"),
          target_ratio=Param(0.2, ONE, "exchange rate |J| / Omega the detuning is solved for"),
          periods=Param(2.0, ONE, "duration in units of the transfer time pi / (2|J|)"),
          samples=Param(801, ONE, "number of time samples"))
def two_atom_transfer(p, ctx):
    """Exact two-atom evolution with the detuning solved for a target exchange rate."""
    _pos_int("samples", p.samples, 2)
    om, v, d, j = _pair_setup(p.rabi, p.interaction, p.target_ratio)
    t_swap = math.pi / (2 * abs(j))
    ts = np.linspace(0.0, p.periods * t_swap, p.samples)
    geo, cfg, law = P.two_atom(om, d, v=v)
    r = D.evolve_full(geo, cfg, law, [0], ts)
    r.write_csv(ctx.out / "populations.csv")
    k = int(np.argmax(r.populations[:, 1]))
    return {"detuning_mhz": to_mhz(d), "exchange_mhz": to_mhz(j),
            "exchange_perturbative_mhz": to_mhz(om ** 2 * v / (4 * d * (d + v))),
            "transfer_time_us": t_swap, "peak_transfer": float(r.populations[k, 1]),
            "peak_time_us": float(ts[k]), "peak_time_ratio": float(ts[k] / t_swap),
            "integrator_step_us": r.meta["step"]}


@scenario("crosstalk_sweep", "transfer curves with off-resonant extra colors at growing separations",
          rabi=Param(10.0, MHZ, "Rabi frequency of every color"),
          interaction=Param(200.0, MHZ, "pair interaction V at the atom spacing"),
          target_ratio=Param(0.2, ONE, "exchange rate |J| / Omega of the shared color"),
          separations=Param([10.0, 20.0, 40.0, 80.0, 160.0, 400.0], MHZ,
                            "frequency separations of the extra colors from the shared one"),
          periods=Param(2.0, ONE, "duration in transfer times"),
          samples=Param(801, ONE, "number of time samples"))
def crosstalk_sweep(p, ctx):
    """Contamination of two-atom transfer by extra colors, against separation.

    Atom 0 also carries color B at Delta + s and atom 1 color C at Delta + 2s,
    so B and C open no channel of their own.  Contamination is the largest
    state infidelity against the single-color run over the time window.
    """
    _pos_int("samples", p.samples, 2)
    om, v, d, j = _pair_setup(p.rabi, p.interaction, p.target_ratio)
    t_swap = math.pi / (2 * abs(j))
    ts = np.linspace(0.0, p.periods * t_swap, p.samples)
    geo, law = ArrayGeometry.chain(2, 1.0), InteractionLaw(v)
    mono = DressingConfig((ColorField("A", d, {0: om, 1: om}),))
    r0 = D.evolve_full(geo, mono, law, [0], ts, snapshot_every=1)
    cols = {"P1_mono": r0.populations[:, 1]}
    rows = []
    for s in p.separations:
        dd = mhz(s)
        if dd <= 0:
            raise ConfigurationError("parameter 'separations' must be positive")
        cfg = DressingConfig((ColorField("A", d, {0: om, 1: om}), ColorField("B", d + dd, {0: om}),
                              ColorField("C", d + 2 * dd, {1: om})))
        r = D.evolve_full(geo, cfg, law, [0], ts, snapshot_every=1)
        inf = max(1 - abs(np.vdot(a[1], b[1])) ** 2 for a, b in zip(r.snapshots, r0.snapshots))
        pw = float(np.max(np.abs(r.populations[:, 1] - r0.populations[:, 1])))
        ratio = dd / abs(j)
        cols[f"P1_sep{D.fmt(s)}"] = r.populations[:, 1]
        rows.append((float(s), float(ratio), float(inf), float(inf * ratio ** 2), pw))
    D.write_table(ctx.out / "transfer_curves.csv", ts, cols)
    _write_rows(ctx.out / "contamination.csv",
                ["separation_mhz", "separation_over_J", "infidelity", "infidelity_times_ratio_sq",
                 "max_population_deviation"], rows)
    return {"exchange_mhz": to_mhz(j), "detuning_mhz": to_mhz(d),
            "separation_over_J": [r[1] for r in rows], "infidelity": [r[2] for r in rows],
            "scaled_infidelity": [r[3] for r in rows], "max_population_deviation": [r[4] for r in rows]}


@scenario("three_atom_chiral", "chiral circulation of one excitation on a three-atom loop",
          side=Param(P.TRIANGLE_SIDE, UM, "triangle side length"),
          flux=Param(math.pi / 2, RAD, "synthetic flux through the loop"),
          rabi=Param(list(P.TRIANGLE_RABI_MHZ), MHZ, "Rabi frequencies of colors A, B, C"),
          detunings=Param(list(P.DETUNINGS_MHZ[:3]), MHZ, "detunings of colors A, B, C"),
          periods=Param(1.0, ONE, "duration in chiral periods"),
          samples=Param(401, ONE, "number of time samples"),
          start=Param(0, ONE, "initially excited atom"))
def three_atom_chiral(p, ctx):
    """Exact and effective circulation on the triangle, and the run with reversed phases."""
    if len(p.rabi) != 3 or len(p.detunings) != 3:
        raise ConfigurationError("parameters 'rabi' and 'detunings' need three entries")
    if p.start not in (0, 1, 2):
        raise ConfigurationError("parameter 'start' must be 0, 1 or 2")
    law, geo = P.default_law(), P.triangle_geometry(p.side)
    cfg = P.triangle_config(p.flux, tuple(p.rabi), tuple(p.detunings))
    m = E.build_effective_model(cfg, law, geo)
    tc = D.chiral_period(m, p.start)
    ts = np.linspace(0.0, p.periods * tc, p.samples)
    ex = D.evolve_full(geo, cfg, law, [p.start], ts)
    ef = D.evolve_effective(m, [p.start], ts)
    rev = D.evolve_full(geo, cfg.conjugated(), law, [p.start], ts)
    ex.write_csv(ctx.out / "populations_exact.csv")
    ef.write_csv(ctx.out / "populations_effective.csv")
    rev.write_csv(ctx.out / "populations_reversed.csv")
    m.write_hopping_csv(ctx.out / "hopping.csv")
    mean_l1, max_l1 = _l1(ex.populations, ef.populations)
    order = D.arrival_order(ts, ex.populations, p.start)
    order_rev = D.arrival_order(ts, rev.populations, p.start)
    return {"flux": E.plaquette_flux(m, [0, 1, 2]), "chiral_period_us": tc, "mean_l1": mean_l1,
            "max_l1": max_l1, "order": _label(order), "order_reversed": _label(order_rev),
            "order_effective": _label(D.arrival_order(ts, ef.populations, p.start)),
            "peak_times_us": [None if not np.isfinite(x) else float(x) for x in D.peak_times(ts, ex.populations)]}


@scenario("hh_ladder_collision", "two excitations colliding on a 4x4 plaquette lattice",
          spacing=Param(P.LADDER_SPACING, UM, "lattice spacing"),
          flux_outer=Param(math.pi / 3, RAD, "flux of the outer plaquettes"),
          flux_inner=Param(math.pi / 2, RAD, "flux of the central plaquette"),
          duration=Param(10.0, US, "evolution time"),
          samples=Param(101, ONE, "number of time samples"),
          sites=Param([0, 3], ONE, "initially excited atoms"))
def hh_ladder_collision(p, ctx):
    """Full-Hilbert-space evolution of the 4x4 array against the effective model."""
    geo = ArrayGeometry.rectangular(4, 4, p.spacing, p.spacing)
    cfg = P.square_lattice_config(4, 4, P.ladder_fluxes(p.flux_outer, p.flux_inner))
    law = P.default_law()
    if len(set(p.sites)) != len(p.sites) or any(not 0 <= s < 16 for s in p.sites):
        raise ConfigurationError("parameter 'sites' must list distinct atoms 0..15")
    ts = np.linspace(0.0, p.duration, p.samples)
    m = E.build_effective_model(cfg, law, geo)
    free = E.EffectiveModel(m.hopping, m.potential, np.zeros_like(m.density_interaction), m.active,
                            m.positions, m.meta)
    ex = D.evolve_full(geo, cfg, law, p.sites, ts)
    ef = D.evolve_effective(m, p.sites, ts)
    fr = D.evolve_effective(free, p.sites, ts)
    x = np.array([q[0] for q in geo.positions]) / p.spacing - 1.5
    left = [i for i in range(16) if x[i] <= 0]
    right = [i for i in range(16) if x[i] >= 0]
    cols = {}
    for tag, r in (("exact", ex), ("effective", ef), ("noninteracting", fr)):
        cols[f"left_{tag}"] = r.region_com(x, left)
        cols[f"right_{tag}"] = r.region_com(x, right)
    D.write_table(ctx.out / "com.csv", ts, cols)
    ex.write_csv(ctx.out / "populations_exact.csv")
    ef.write_csv(ctx.out / "populations_effective.csv")
    sep = {k: float(np.nanmin(cols[f"right_{k}"] - cols[f"left_{k}"])) for k in ("exact", "effective",
                                                                                  "noninteracting")}
    mean_l1, max_l1 = _l1(ex.populations, ef.populations)
    return {"dimension": int(ex.basis.dim), "min_separation": sep, "mean_l1": mean_l1, "max_l1": max_l1,
            "integrator_step_us": ex.meta["step"], "norm_drift": ex.meta["norm_drift"]}


@scenario("anisotropic_hh_spectra", "two-excitation spectrum on a cylinder with bound-pair manifolds",
          width=Param(9, ONE, "number of columns of the open direction"),
          flux=Param(2 * math.pi / 3, RAD, "flux per plaquette"),
          k_points=Param(41, ONE, "pair momenta sampled over the zone"),
          r_max=Param(12, ONE, "cut on the relative coordinate along the periodic direction"),
          c6_scale=Param(1.0, ONE, "factor applied to the calibrated C6"),
          oracle_ring=Param(6, ONE, "ring length of the noninteracting check"))
def anisotropic_hh_spectra(p, ctx):
    """Bloch spectrum, bound-state classification and the noninteracting convolution check."""
    _pos_int("k_points", p.k_points, 3)
    m = S.CylinderModel.reference(p.width, p.flux, p.r_max, p.c6_scale)
    sp = S.sweep_spectrum(m, S.default_k_grid(p.k_points))
    lab = S.classify_states(sp)
    sp.write_csv(ctx.out / "spectrum.csv")
    rows = []
    for i, K in enumerate(sp.k_grid):
        for n, e in enumerate(sp.energies[i]):
            rows.append((float(K), float(e / m.j_x), str(lab.types[i, n]), str(lab.edge[i, n]),
                         float(lab.score[i, n])))
    _write_rows(ctx.out / "states.csv", ["K", "E_over_Jx", "type", "edge", "weight"], rows)
    counts = lab.report(sp)["counts"]
    bulk_i = sp.energies[(lab.types == S.TYPE_I) & (lab.edge == "bulk")]
    groups, gaps = S.sub_bands(bulk_i, 3)
    in_gap = []
    for lo, hi in gaps:
        g = {}
        for side in ("left", "right"):
            e = sp.energies[(lab.types == S.TYPE_I) & (lab.edge == side)]
            g[side] = int(((e > lo) & (e < hi)).sum())
        in_gap.append(g)
    _write_rows(ctx.out / "type1_gaps.csv", ["gap", "lower_over_Jx", "upper_over_Jx", "left_states", "right_states"],
                [(k, lo / m.j_x, hi / m.j_x, g["left"], g["right"]) for k, ((lo, hi), g) in enumerate(zip(gaps, in_gap))])
    oracle = S.CylinderModel(p.width, m.j_x, m.j_y, m.flux, ring=p.oracle_ring, hard_core=False)
    dev = 0.0
    for K in np.linspace(-np.pi, np.pi, 7):
        w = np.linalg.eigvalsh(S.build_two_body_bloch(oracle, K).matrix)
        ref = S.free_pair_energies(oracle, K)
        if len(w) != len(ref):
            raise ConfigurationError("noninteracting check: state counts differ")
        dev = max(dev, float(np.abs(np.sort(w) - np.sort(ref)).max()))
    return {"counts": counts, "type1_subbands": len(groups),
            "type1_gaps_over_Jx": [[lo / m.j_x, hi / m.j_x] for lo, hi in gaps],
            "type1_edge_states_in_gaps": in_gap, "continuum_top_over_Jx": sp.continuum_top() / m.j_x,
            "oracle_max_deviation_over_Jx": dev / abs(m.j_x),
            "r_max_change_over_Jx": sp.meta.get("r_max_change", 0.0) / abs(m.j_x)}


def _doublon_window(cyl, k_points, pad):
    sp = S.sweep_spectrum(cyl, S.default_k_grid(k_points), check_r_max=False)
    lab = S.classify_states(sp)
    bulk = sp.energies[(lab.types == S.TYPE_I) & (lab.edge == "bulk")]
    _, gaps = S.sub_bands(bulk, 3)
    lo, hi = gaps[0]
    return lo + pad * (hi - lo), hi - pad * (hi - lo)


@scenario("edge_transport", "chiral edge motion of a single excitation and of a bound pair past a vacancy",
          size=Param(9, ONE, "lattice is size x size"),
          flux=Param(2 * math.pi / 3, RAD, "flux per plaquette"),
          single_duration=Param(6.0, US, "evolution time of the single excitation"),
          single_samples=Param(121, ONE, "time samples of the single excitation"),
          single_vacancy=Param(4, ONE, "vacant site on the single-excitation path"),
          single_shrink=Param(0.2, ONE, "fraction of the bulk gap trimmed from each side of the window"),
          pair_duration=Param(40.0, US, "evolution time of the bound pair"),
          pair_samples=Param(81, ONE, "time samples of the bound pair"),
          pair_vacancy=Param(76, ONE, "vacant site on the pair path"),
          pair_pad=Param(0.1, ONE, "fraction of the bound-band gap trimmed from each side of the window"),
          k_points=Param(21, ONE, "pair momenta used to locate the bound-band gap"))
def edge_transport(p, ctx):
    """Edge wavepackets of one and two excitations, with and without a vacancy."""
    cyl = S.CylinderModel.reference(p.size, p.flux)
    jx, jy, f = cyl.j_x, cyl.j_y, cyl.flux
    L = p.size
    for name, v in (("single_vacancy", p.single_vacancy), ("pair_vacancy", p.pair_vacancy)):
        if not 0 <= v < L * L:
            raise ConfigurationError(f"parameter '{name}' is outside the lattice")
    out = {}
    # one excitation
    lat = S.hofstadter_lattice(L, L, jx, jy, f)
    bb = S.bulk_bands(jx, jy, f)
    win = S.gap_window(bb, 0, p.single_shrink)
    em = S.prepare_edge_mode(lat, 1, win, (0, L // 2), bulk_energies=bb)
    ts = np.linspace(0.0, p.single_duration, p.single_samples)
    clean = S.edge_transport_scenario(lat, em.state, ts)
    dl = S.hofstadter_lattice(L, L, jx, jy, f, vacancies=[p.single_vacancy])
    st, kept = S.restrict_state(em.state, dl)
    defect = S.edge_transport_scenario(dl, st, ts)
    T1, k1 = S.vacancy_transmission(clean, defect, lat, p.single_vacancy)
    clean.write_csv(str(ctx.out / "single_clean"))
    defect.write_csv(str(ctx.out / "single_vacancy"))
    out["single"] = {"chirality": clean.chirality, "chirality_with_vacancy": defect.chirality,
                     "transmission": T1, "transmission_time_us": float(ts[k1]),
                     "window_over_Jx": [win[0] / jx, win[1] / jx], "window_weight": em.window_weight,
                     "kept_norm": kept}
    # bound pair
    win2 = _doublon_window(cyl, p.k_points, p.pair_pad)
    lat2 = S.hofstadter_lattice(L, L, jx, jy, f, interaction=cyl.interaction)
    em2 = S.prepare_edge_mode(lat2, 2, win2, (0, L // 2), edge_depth=2, displacement=(0, 2))
    ts2 = np.linspace(0.0, p.pair_duration, p.pair_samples)
    clean2 = S.edge_transport_scenario(lat2, em2.state, ts2, displacement=(0, 2))
    dl2 = S.hofstadter_lattice(L, L, jx, jy, f, interaction=cyl.interaction, vacancies=[p.pair_vacancy])
    st2, kept2 = S.restrict_state(em2.state, dl2)
    defect2 = S.edge_transport_scenario(dl2, st2, ts2, displacement=(0, 2))
    T2, k2 = S.vacancy_transmission(clean2, defect2, lat2, p.pair_vacancy)
    clean2.write_csv(str(ctx.out / "pair_clean"))
    defect2.write_csv(str(ctx.out / "pair_vacancy"))
    out["pair"] = {"chirality": clean2.chirality, "chirality_with_vacancy": defect2.chirality,
                   "transmission": T2, "transmission_time_us": float(ts2[k2]),
                   "window_over_Jx": [win2[0] / jx, win2[1] / jx], "window_weight": em2.window_weight,
                   "kept_norm": kept2, "min_pair_fraction_clean": float(clean2.pair_fraction.min()),
                   "min_pair_fraction_vacancy": float(defect2.pair_fraction.min()),
                   "initial_pair_fraction": float(clean2.pair_fraction[0])}
    return out


def _single_atom_rabi(om):
    basis = SectorBasis.full(1)
    drive = D.DriveArrays(np.array([0]), np.array([0.0]), np.array([om / 2 + 0j]), np.array([0]))
    return basis, drive, np.zeros(2)


@scenario("phase_noise", "damping of Rabi and chiral oscillations under laser phase noise",
          gamma=Param(1.0, RATE, "phase-noise rate"),
          runs=Param(500, ONE, "trajectories per ensemble"),
          rabi=Param(2.0, MHZ, "resonant Rabi frequency of the single-atom reference"),
          single_duration=Param(3.0, US, "single-atom evolution time"),
          global_duration=Param(5.0, US, "chiral evolution time with globally correlated noise"),
          atom_duration=Param(2.5, US, "chiral evolution time with independent noise per atom"),
          color_duration=Param(5.0, US, "chiral evolution time with independent noise per color"),
          rate=Param(20.0, ONE, "time samples per microsecond"),
          per_period=Param(16, ONE, "integrator steps per fastest drive period"),
          bootstrap=Param(200, ONE, "bootstrap resamples for damping-time errors"))
def phase_noise(p, ctx):
    """Trajectory ensembles against the master equation and the three noise correlations."""
    _pos_int("runs", p.runs, 2)
    om = mhz(p.rabi)
    basis, drive, diag = _single_atom_rabi(om)
    ts = np.linspace(0.0, p.single_duration, int(round(p.single_duration * p.rate)) + 1)
    prob = D.FullProblem.from_drive(basis, diag, drive)
    me = N.master_equation_evolve(prob, N.density_from_sites(basis, []), ts, dephasing=p.gamma)
    tr = N.trajectory_ensemble(ArrayGeometry.chain(1, 1.0), None, None, [], ts, NoiseSpec(p.gamma, "global"),
                               p.runs, seed=ctx.seed, drive_override=drive, diag_override=diag, basis=basis,
                               jobs=ctx.jobs)
    clean = 0.5 - 0.5 * np.cos(om * ts)
    err = tr.stderr["populations"][:, 0]
    z = np.abs(tr.populations[:, 0] - me.populations[:, 0])[1:] / np.maximum(err[1:], 1e-300)
    tau_me = N.envelope_damping_time(ts, me.populations[:, 0], clean, 0.5)
    tau_mc, tau_mc_err, _ = N.bootstrap_damping_time(ts, tr.meta["per_run_populations"][:, :, 0], clean, 0.5,
                                                     p.bootstrap, ctx.seed)
    D.write_table(ctx.out / "single_atom.csv", ts, {"P_trajectories": tr.populations[:, 0], "P_stderr": err,
                                                   "P_master_equation": me.populations[:, 0], "P_clean": clean})
    out = {"single": {"tau_master_equation_us": tau_me, "tau_trajectories_us": tau_mc,
                      "tau_trajectories_err_us": tau_mc_err, "max_z": float(z.max()),
                      "fraction_beyond_3_sigma": float(np.mean(z > 3))}}
    geo, cfg, law = P.triangle_geometry(), P.triangle_config(), P.default_law()
    m = E.build_effective_model(cfg, law, geo)
    out["chiral_period_us"] = D.chiral_period(m, 0)
    for mode, dur in (("global", p.global_duration), ("per-atom", p.atom_duration),
                      ("per-color", p.color_duration)):
        tt = np.linspace(0.0, dur, int(round(dur * p.rate)) + 1)
        c = D.evolve_full(geo, cfg, law, [0], tt, per_period=p.per_period)
        r = N.trajectory_ensemble(geo, cfg, law, [0], tt, NoiseSpec(p.gamma, mode), p.runs, seed=ctx.seed,
                                  per_period=p.per_period, jobs=ctx.jobs)
        tau, tau_err, _ = N.bootstrap_damping_time(tt, r.meta["per_run_populations"], c.populations, 1 / 3,
                                                   p.bootstrap, ctx.seed)
        cols = {}
        for i in range(3):
            cols[f"P{i}_mean"] = r.populations[:, i]
            cols[f"P{i}_stderr"] = r.stderr["populations"][:, i]
            cols[f"P{i}_clean"] = c.populations[:, i]
        D.write_table(ctx.out / f"chiral_{mode.replace('-', '_')}.csv", tt, cols)
        out[mode] = {"tau_us": tau, "tau_err_us": tau_err}
    # collective dephasing leaves fixed-excitation sectors alone
    full = SectorBasis.full(3)
    h = D.sector_hamiltonian(m, full).toarray()
    comm = float(np.abs(N.sz_commutator(h, full)).max())
    worst = 0.0
    for n in range(4):
        sec = SectorBasis.fixed(3, n)
        hs = D.sector_hamiltonian(m, sec).toarray()
        w, v = np.linalg.eigh(hs)
        psi = np.zeros(full.dim, dtype=complex)
        psi[full.indices(sec.configs)] = v[:, 0]
        worst = max(worst, float(np.abs(N.lindblad_sz(np.outer(psi, psi.conj()), full)).max()))
    out["sz_commutator_max"] = comm
    out["sz_dissipator_on_sector_states_max"] = worst
    return out


def _fit_frequency(ts, y, w0):
    def f(t, a, b, c, w):
        return a + b * np.cos(w * t) + c * np.sin(w * t)

    p0 = (float(y.mean()), -0.5, 0.0, w0)
    par, _ = curve_fit(f, ts, y, p0=p0, maxfev=20000)
    return abs(par[3])


@scenario("doppler", "Ramsey decay and chiral motion under Doppler broadening",
          width=Param(0.044, MHZ, "standard deviation of the per-atom Doppler detuning"),
          ramsey_runs=Param(4000, ONE, "Ramsey shots"),
          ramsey_duration=Param(15.0, US, "Ramsey time window"),
          ramsey_floor=Param(0.05, ONE, "Ramsey contrast regarded as fully decayed"),
          chiral_runs=Param(200, ONE, "three-atom trajectories"),
          chiral_duration=Param(12.0, US, "three-atom evolution time"),
          pair_runs=Param(200, ONE, "two-atom trajectories for the beat-note shift"),
          pair_duration=Param(8.0, US, "two-atom evolution time"),
          pair_rabi=Param(10.0, MHZ, "two-atom Rabi frequency"),
          pair_detuning=Param(120.0, MHZ, "two-atom detuning"),
          pair_spacing=Param(P.TRIANGLE_SIDE, UM, "two-atom spacing"),
          rate=Param(20.0, ONE, "time samples per microsecond"),
          per_period=Param(16, ONE, "integrator steps per fastest drive period"))
def doppler(p, ctx):
    """Ramsey coherence, late-time chiral contrast and the two-site beat-note shift."""
    _pos_int("pair_runs", p.pair_runs, 2)
    dt_ = mhz(p.width)
    tr_ = np.linspace(0.0, p.ramsey_duration, int(round(p.ramsey_duration * p.rate)) + 1)
    fringe, contrast, cerr = N.ramsey_fringes(dt_, tr_, p.ramsey_runs, ctx.seed)
    D.write_table(ctx.out / "ramsey.csv", tr_, {"fringe": fringe, "contrast": contrast, "contrast_stderr": cerr})
    t_1e = N.first_crossing(tr_, contrast, math.exp(-1))
    t_floor = N.first_crossing(tr_, contrast, p.ramsey_floor)
    out = {"ramsey": {"one_over_e_time_us": t_1e, "ratio_to_inverse_width": t_1e * dt_,
                      "fully_decayed_after_us": t_floor}}
    # chiral motion
    geo, cfg, law = P.triangle_geometry(), P.triangle_config(), P.default_law()
    m = E.build_effective_model(cfg, law, geo)
    tc = D.chiral_period(m, 0)
    tt = np.linspace(0.0, p.chiral_duration, int(round(p.chiral_duration * p.rate)) + 1)
    c = D.evolve_full(geo, cfg, law, [0], tt, per_period=p.per_period)
    r = N.trajectory_ensemble(geo, cfg, law, [0], tt, NoiseSpec(0.0, "global", dt_), p.chiral_runs,
                              seed=ctx.seed, per_period=p.per_period, jobs=ctx.jobs)
    cols = {}
    for i in range(3):
        cols[f"P{i}_mean"] = r.populations[:, i]
        cols[f"P{i}_stderr"] = r.stderr["populations"][:, i]
        cols[f"P{i}_clean"] = c.populations[:, i]
    D.write_table(ctx.out / "chiral.csv", tt, cols)
    if not (np.isfinite(t_floor) and t_floor + tc <= tt[-1]):
        raise ConfigurationError("parameter 'chiral_duration' must cover one chiral period past Ramsey decay")
    sel = (tt >= t_floor) & (tt <= t_floor + tc)
    swing_n = float(np.mean(np.ptp(r.populations[sel], axis=0)))
    swing_c = float(np.mean(np.ptp(c.populations[sel], axis=0)))
    out["chiral"] = {"window_us": [float(t_floor), float(t_floor + tc)], "contrast": swing_n,
                     "clean_contrast": swing_c, "retained": swing_n / swing_c}
    # beat note of the two-site exchange
    g2, c2, l2 = P.two_atom(mhz(p.pair_rabi), mhz(p.pair_detuning), spacing=p.pair_spacing, law=law)
    tp = np.linspace(0.0, p.pair_duration, int(round(p.pair_duration * p.rate)) + 1)
    m2 = E.build_effective_model(c2, l2, g2)
    j = abs(m2.hopping[0, 1])
    clean = D.evolve_full(g2, c2, l2, [0], tp, per_period=p.per_period)
    w_clean = _fit_frequency(tp, clean.populations[:, 1], 2 * j)
    rr = N.trajectory_ensemble(g2, c2, l2, [0], tp, NoiseSpec(0.0, "global", dt_), p.pair_runs,
                               seed=ctx.seed + 1, per_period=p.per_period, jobs=ctx.jobs)
    ws = np.array([_fit_frequency(tp, y[:, 1], w_clean) for y in rr.meta["per_run_populations"]])
    shift = ws - w_clean
    _write_rows(ctx.out / "beat_frequencies.csv", ["run", "beat_frequency", "shift"],
                [(k, float(w), float(s)) for k, (w, s) in enumerate(zip(ws, shift))])
    diag = N.doppler_scaling_diagnostics(w_clean / 2, dt_)
    out["beat"] = {"clean_beat": w_clean, "shift": float(shift.mean()),
                   "shift_stderr": float(shift.std(ddof=1) / math.sqrt(len(shift))),
                   "expansion": diag["beat_shift"], "two_site_shift": diag["two_site_shift"]}
    return out


@scenario("decay_postselect", "success probability and post-selected motion under Rydberg decay",
          kappa=Param(0.2, RATE, "decay rate per excitation"),
          runs=Param(400, ONE, "trajectories"),
          duration=Param(10.0, US, "evolution time"),
          rate=Param(10.0, ONE, "time samples per microsecond"),
          per_period=Param(16, ONE, "integrator steps per fastest drive period"))
def decay_postselect(p, ctx):
    """Jump trajectories on the triangle, post-selected on keeping the excitation."""
    _pos_int("runs", p.runs, 2)
    geo, cfg, law = P.triangle_geometry(), P.triangle_config(), P.default_law()
    ts = np.linspace(0.0, p.duration, int(round(p.duration * p.rate)) + 1)
    r = N.trajectory_ensemble(geo, cfg, law, [0], ts, NoiseSpec(0.0, "global", 0.0, p.kappa), p.runs,
                              seed=ctx.seed, per_period=p.per_period, jobs=ctx.jobs)
    x = np.array([q[0] for q in geo.positions])
    x = x - x.mean()
    est = N.post_select(r, N.position_observable(x), 1)
    m = E.build_effective_model(cfg, law, geo)
    eff = D.evolve_effective(m, [0], ts).com(x)
    expected = np.exp(-p.kappa * ts)
    D.write_table(ctx.out / "postselection.csv", ts, {
        "success": est.success, "success_stderr": est.success_err, "success_expected": expected,
        "x_conditional": est.conditional, "x_conditional_stderr": est.conditional_err,
        "x_unconditional": est.unconditional, "x_unconditional_stderr": est.unconditional_err,
        "x_decay_free": eff, "x_decay_free_damped": expected * eff})
    r.write_runs_csv(ctx.out / "runs.csv")
    ok = est.success_err > 0
    zs = np.abs(est.success - expected)[ok] / est.success_err[ok]
    good = np.isfinite(est.conditional_err)
    return {"max_success_z": float(zs.max()) if len(zs) else 0.0,
            "kappa_t_max": float(p.kappa * ts[-1]),
            "conditional_l1": float(np.mean(np.abs(est.conditional - eff)[good])),
            "conditional_stderr": float(np.mean(est.conditional_err[good])),
            "unconditional_l1": float(np.mean(np.abs(est.unconditional - expected * eff))),
            "unconditional_stderr": float(np.mean(est.unconditional_err)),
            "final_success": float(est.success[-1])}


def _cyclic_defect(ts, pops, tc):
    # distance between P_i(t) and the neighbouring site's P(t - tc / 3)
    s = int(round(tc / 3 / (ts[1] - ts[0])))
    a, b = pops[s:], pops[:-s]
    return min(float(np.abs(a - np.roll(b, k, axis=1)).sum(axis=1).mean()) for k in (1, 2))


@scenario("potential_balance", "restoring symmetric circulation by site-resolved detuning shifts",
          side=Param(5.0, UM, "triangle side length"),
          flux=Param(math.pi / 2, RAD, "synthetic flux"),
          periods=Param(3.0, ONE, "duration in chiral periods"),
          samples=Param(601, ONE, "number of time samples"))
def potential_balance(p, ctx):
    """Exact triangle runs before and after balancing the effective potentials."""
    law, geo = P.default_law(), P.triangle_geometry(p.side)
    cfg = P.triangle_config(p.flux)
    bal = E.balance_potentials(cfg, law, geo, 0)
    out = {"iterations": bal.iterations, "residual": bal.residual,
           "residual_over_detuning": bal.residual / max(abs(c.detuning) for c in cfg.colors),
           "shifts_mhz": {str(k): to_mhz(v) for k, v in sorted(bal.shifts.items())}}
    tc = D.chiral_period(E.build_effective_model(bal.config, law, geo), 0)
    ts = np.linspace(0.0, p.periods * tc, p.samples)
    for tag, c in (("unbalanced", cfg), ("balanced", bal.config)):
        m = E.build_effective_model(c, law, geo)
        r = D.evolve_full(geo, c, law, [0], ts)
        r.write_csv(ctx.out / f"populations_{tag}.csv")
        peaks = [float(r.populations[(ts >= k * tc) & (ts <= (k + 1) * tc)].max(axis=0).min())
                 for k in range(int(math.floor(p.periods)))]
        out[tag] = {"potentials_mhz": [to_mhz(float(v)) for v in m.potential],
                    "min_peak_population": min(peaks) if peaks else float(r.populations.max(axis=0).min()),
                    "cyclic_defect": _cyclic_defect(ts, r.populations, tc)}
    out["chiral_period_us"] = tc
    return out


@scenario("hopping_vs_spacing", "hopping strengths of a six-atom array against spacing",
          d_min=Param(2.0, UM, "smallest spacing"),
          d_max=Param(12.0, UM, "largest spacing"),
          points=Param(21, ONE, "number of spacings"),
          rabi=Param(10.0, MHZ, "Rabi frequency of every color"),
          detunings=Param(list(P.DETUNINGS_MHZ[:3]), MHZ, "detunings of colors A, B, C"))
def hopping_vs_spacing(p, ctx):
    """Nearest-neighbour and longer-range hoppings with the strong-interaction limit."""
    _pos_int("points", p.points, 2)
    if not 0 < p.d_min < p.d_max:
        raise ConfigurationError("need 0 < d_min < d_max")
    law = P.default_law()
    cfg = P.six_atom_config(p.rabi, tuple(p.detunings))
    rows, sat, ratio = [], [], []
    for d in np.linspace(p.d_min, p.d_max, p.points):
        geo = P.six_atom_geometry(d)
        m = E.build_effective_model(cfg, law, geo, check=False)
        J = np.abs(m.hopping)
        nn, far, limit = [], [], []
        for i in range(6):
            for j in range(i + 1, 6):
                if abs(geo.distance(i, j) - d) < 1e-9 * d:
                    nn.append(J[i, j])
                    lim = abs(sum(np.conj(cfg.rabi(i, lab)) * cfg.rabi(j, lab) / (4 * cfg.detuning(lab))
                                  for lab in sorted(E.channels(cfg, i, j))))
                    limit.append(J[i, j] / lim if lim else np.nan)
                else:
                    far.append(J[i, j])
        a, b = max(nn), max(far)
        rows.append((float(d), to_mhz(a), to_mhz(b), float(a / b), float(np.nanmin(limit)), float(np.nanmax(limit))))
        sat.append(float(np.nanmin(limit)))
        ratio.append(float(a / b))
    _write_rows(ctx.out / "hopping.csv", ["spacing_um", "max_nn_J_mhz", "max_far_J_mhz", "nn_over_far",
                                          "nn_over_limit_min", "nn_over_limit_max"], rows)
    return {"saturation_at_d_min": sat[0], "nn_over_far": ratio,
            "ratio_monotonic": bool(np.all(np.diff(ratio) > 0))}


@scenario("power_budget", "laser power for a four-color square lattice",
          rabi_a=Param(10.0, MHZ, "Rabi frequency of the least detuned color"),
          eps_b=Param(0.01, ONE, "bit-flip error budget"),
          eps_c=Param(0.01, ONE, "crosstalk error budget"),
          waist=Param(2.0, UM, "beam waist per addressing spot"),
          sites=Param(100, ONE, "number of atoms"),
          dipole=Param(1.0, DIPOLE, "two-photon effective dipole"))
def power_budget(p, ctx):
    """Closed-form and per-color laser power at fixed error budgets."""
    if not (0 < p.eps_b < 1):
        raise ConfigurationError("parameter 'eps_b' must lie in (0, 1)")
    # Delta = 4J / eps_b and Omega_A^2 = 4 J Delta fix J from Omega_A
    j = mhz(p.rabi_a) * math.sqrt(p.eps_b) / 4.0
    b = E.power_budget(j, p.eps_b, p.eps_c, p.waist, p.sites, p.dipole)
    _write_rows(ctx.out / "power_budget.csv",
                ["J_mhz", "detuning_mhz", "color_spacing_mhz", "total_power_W", "total_power_closed_form_W"],
                [(to_mhz(j), to_mhz(b.detuning), to_mhz(b.color_spacing), b.total_power,
                  b.total_power_closed_form)])
    _write_rows(ctx.out / "colors.csv", ["color", "rabi_mhz", "intensity_W_per_m2"],
                [(k, to_mhz(float(o)), float(i)) for k, (o, i) in enumerate(zip(b.rabi, b.intensities))])
    return {"J_mhz": to_mhz(j), "total_power_W": b.total_power,
            "total_power_closed_form_W": b.total_power_closed_form}


def random_multicolor(rng, n_atoms, max_ratio=0.1, n_colors=3):
    """Random 2- or 3-atom configuration with commensurate detunings and |Omega / Delta| <= max_ratio."""
    dets = rng.choice(np.arange(10, 21) * 10.0, size=n_colors, replace=False)
    labels = "ABC"[:n_colors]
    rabi = {lab: {} for lab in labels}
    for a in range(n_atoms):
        for k in rng.choice(n_colors, size=int(rng.integers(1, 3)), replace=False):
            lab = labels[k]
            r = rng.uniform(0.3, 1.0) * max_ratio * mhz(dets[k])
            rabi[lab][a] = r * np.exp(1j * rng.uniform(-np.pi, np.pi))
    colors = tuple(ColorField(lab, mhz(d), rabi[lab]) for lab, d in zip(labels, dets) if rabi[lab])
    pos = [(0.0, 0.0), (float(rng.uniform(3.0, 8.0)), 0.0)]
    while len(pos) < n_atoms:
        q = (float(rng.uniform(-8, 16)), float(rng.uniform(-8, 8)))
        if all(3.0 <= math.dist(q, o) <= 8.0 for o in pos):
            pos.append(q)
    return ArrayGeometry(tuple(pos)), DressingConfig(colors)


def floquet_check(geo, cfg, law):
    """Quasienergy and second-order element comparison for one configuration."""
    n = geo.n_sites
    F = build_sector_floquet(cfg, law, geo, sectors=tuple(range(0, min(n, 3) + 1)))
    m = E.build_effective_model(cfg, law, geo, check=False)
    H = m.single_particle_hamiltonian()
    rows = F.block_rows([1 << i for i in range(n)], 0)
    e, _, _ = block_quasienergies(F, rows)
    ee = np.linalg.eigvalsh(H)
    split = np.sort(e) - np.sort(e)[0]
    split_ref = ee - ee[0]
    dev = float(np.abs(split - split_ref).max())
    bound = max((max(abs(o) for o in c.rabi.values()) / abs(c.detuning)) ** 4 * abs(c.detuning)
                for c in cfg.colors)
    g1 = gvv_effective(F, rows, 2, check=False)
    err1 = float(np.abs(g1.h_eff - H).max() / np.abs(H).max())
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    prow = F.block_rows([(1 << i) | (1 << j) for i, j in pairs], 0)
    g2 = gvv_effective(F, prow, 2, check=False)
    A = np.zeros((len(pairs), len(pairs)), dtype=complex)
    for a, (i, j) in enumerate(pairs):
        A[a, a] = E.pair_energy_shift(cfg, law, geo, i, j)
        for b, (k, l) in enumerate(pairs):
            if a == b:
                continue
            common = {i, j} & {k, l}
            if len(common) == 1:
                s = common.pop()
                src = ({i, j} - {s}).pop()
                dst = ({k, l} - {s}).pop()
                A[b, a] = E.pair_hop(cfg, law, geo, s, src, dst)
    err2 = float(np.abs(g2.terms[2] - A).max() / max(np.abs(A).max(), 1e-300))
    return {"splitting_deviation": dev, "bound_unit": bound, "single_gvv_rel": err1, "pair_gvv_rel": err2,
            "floquet_dim": F.dim}


@scenario("floquet_oracle", "Floquet quasienergies and second-order elements against closed forms",
          configs=Param(50, ONE, "random configurations"),
          max_ratio=Param(0.1, ONE, "largest |Omega / Delta|"),
          constant=Param(10.0, ONE, "C in the quasienergy tolerance C (Omega/Delta)^4 |Delta|"))
def floquet_oracle(p, ctx):
    """Random two- and three-atom multicolor checks of the second-order model."""
    _pos_int("configs", p.configs)
    rng = np.random.default_rng(np.random.SeedSequence([ctx.seed, 5]))
    law = P.default_law()
    rows = []
    for k in range(p.configs):
        geo, cfg = random_multicolor(rng, 2 + k % 2, p.max_ratio)
        r = floquet_check(geo, cfg, law)
        rows.append((k, geo.n_sites, len(cfg.colors), r["floquet_dim"], r["splitting_deviation"],
                     r["bound_unit"], r["splitting_deviation"] / r["bound_unit"], r["single_gvv_rel"],
                     r["pair_gvv_rel"]))
    _write_rows(ctx.out / "oracle.csv", ["config", "atoms", "colors", "floquet_dim", "splitting_deviation",
                                         "bound_unit", "deviation_over_bound_unit", "single_gvv_rel",
                                         "pair_gvv_rel"], rows)
    worst = max(r[6] for r in rows)
    return {"worst_deviation_over_bound_unit": worst, "constant": p.constant,
            "within_tolerance": bool(worst <= p.constant),
            "worst_single_gvv_rel": max(r[7] for r in rows), "worst_pair_gvv_rel": max(r[8] for r in rows)}
