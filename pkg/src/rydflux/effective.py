"""Closed-form effective models for dressed Rydberg excitations.

Conventions: ``J[i, j]`` is the matrix element <i|H|j>, i.e. the amplitude for
an excitation to move from ``j`` to ``i``.  For a shared color it equals
Omega_i conj(Omega_j) V / (4 Delta (Delta + V)), so arg J[i, j] is the Peierls
phase phi_i - phi_j.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import constants as sc
from scipy.optimize import brentq

from .errors import ConfigurationError, ConvergenceError, ResonanceError
from .model import DressingConfig, channels, interaction_matrix, pair_interaction, validate


def _pair_detuning(config, label, i, j):
    # With per-site shifts the two sites see slightly different detunings;
    # the hopping uses their mean, which is exact to the order kept here.
    return config.detuning(label) + 0.5 * (config.shift(i) + config.shift(j))


def hopping_strength(config, law, geometry, i, j, label):
    """Hopping amplitude <i|H|j> carried by the shared color ``label``."""
    if label not in channels(config, i, j):
        raise ConfigurationError(f"color {label!r} is not a channel between sites {i} and {j}")
    v = pair_interaction(geometry, law, i, j)
    d = _pair_detuning(config, label, i, j)
    if d == 0.0 or d + v == 0.0:
        raise ResonanceError(f"hopping pole for sites ({i}, {j}), color {label!r}")
    om_i = config.rabi(i, label)
    om_j = config.rabi(j, label)
    return om_i * np.conj(om_j) * v / (4.0 * d * (d + v))


def chemical_potential(config, law, geometry, i):
    """Light-shift energy of an excitation on site ``i`` (second order)."""
    if not geometry.is_active(i):
        raise ConfigurationError(f"site {i} is vacant or does not exist")
    vmat = interaction_matrix(geometry, law)
    mu = 0.0
    for c in config.colors:
        om = c.rabi.get(i)
        if om is not None:
            d = c.detuning + config.shift(i)
            mu += abs(om) ** 2 / (4.0 * d)
        for j, om_j in c.rabi.items():
            if j == i:
                continue
            den = c.detuning + config.shift(j) + vmat[i, j]
            if den == 0.0:
                raise ResonanceError(f"chemical potential pole: site {i}, dressed site {j}, color {c.label!r}")
            mu -= abs(om_j) ** 2 / (4.0 * den)
    return mu


@dataclass
class EffectiveModel:
    """Hard-core boson model: hoppings J, on-site energies, density interactions."""

    hopping: np.ndarray
    potential: np.ndarray
    density_interaction: np.ndarray
    active: np.ndarray = None
    positions: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.hopping = np.asarray(self.hopping, dtype=complex)
        self.potential = np.asarray(self.potential, dtype=float)
        self.density_interaction = np.asarray(self.density_interaction, dtype=float)
        n = self.hopping.shape[0]
        if self.active is None:
            self.active = np.ones(n, dtype=bool)
        self.active = np.asarray(self.active, dtype=bool)

    @property
    def n_sites(self):
        return self.hopping.shape[0]

    def single_particle_hamiltonian(self):
        return self.hopping + np.diag(self.potential.astype(complex))

    def is_hermitian(self):
        return bool(np.array_equal(self.hopping, self.hopping.conj().T))

    def with_phases_reversed(self):
        return EffectiveModel(self.hopping.conj(), self.potential.copy(), self.density_interaction.copy(),
                              self.active.copy(), None if self.positions is None else self.positions.copy(),
                              dict(self.meta))

    def to_dict(self):
        def cplx(a):
            return [[[float(z.real), float(z.imag)] for z in row] for row in a]

        out = {
            "n_sites": self.n_sites,
            "hopping": cplx(self.hopping),
            "potential": [float(x) for x in self.potential],
            "density_interaction": self.density_interaction.tolist(),
            "active": [bool(a) for a in self.active],
        }
        if self.positions is not None:
            out["positions"] = self.positions.tolist()
        return out

    @classmethod
    def from_dict(cls, doc):
        h = np.array([[complex(re, im) for re, im in row] for row in doc["hopping"]])
        pos = doc.get("positions")
        return cls(h, np.array(doc["potential"]), np.array(doc["density_interaction"]),
                   np.array(doc.get("active", [True] * len(h))), None if pos is None else np.array(pos))

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_json(cls, text_or_path):
        if text_or_path.lstrip().startswith("{"):
            return cls.from_dict(json.loads(text_or_path))
        with open(text_or_path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def write_hopping_csv(self, path):
        """One row per nonzero hopping i < j: magnitude and phase of J[i, j]."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "abs_J", "arg_J"])
            n = self.n_sites
            for i in range(n):
                for j in range(i + 1, n):
                    z = self.hopping[i, j]
                    if z != 0:
                        w.writerow([i, j, f"{abs(z):.12g}", f"{np.angle(z):.12g}"])


def build_effective_model(config, law, geometry, check=True):
    """Single- and many-excitation effective model of a dressed array."""
    if check:
        validate(geometry, config, law)
    n = geometry.n_sites
    hop = np.zeros((n, n), dtype=complex)
    act = geometry.active_sites()
    for a, i in enumerate(act):
        for j in act[a + 1:]:
            for lab in sorted(channels(config, i, j)):
                hop[i, j] += hopping_strength(config, law, geometry, i, j, lab)
    # bitwise Hermitian by construction
    hop = np.triu(hop, 1)
    hop = hop + hop.conj().T
    pot = np.zeros(n)
    for i in act:
        pot[i] = chemical_potential(config, law, geometry, i) + config.shift(i)
    mask = np.zeros(n, dtype=bool)
    mask[act] = True
    return EffectiveModel(hop, pot, interaction_matrix(geometry, law), mask, geometry.positions)


def wrap_angle(x):
    """Map an angle to (-pi, pi]."""
    w = math.remainder(float(x), 2.0 * math.pi)
    return math.pi if w == -math.pi else w


def plaquette_flux(model, loop, raw=False):
    """Sum of arg J[next, current] around ``loop`` (closed implicitly).

    Returns the value wrapped to (-pi, pi], or the unwrapped sum when ``raw``.
    """
    loop = list(loop)
    if len(loop) < 2:
        raise ConfigurationError("a loop needs at least two sites")
    h = model.hopping if isinstance(model, EffectiveModel) else np.asarray(model)
    total = 0.0
    for cur, nxt in zip(loop, loop[1:] + loop[:1]):
        z = h[nxt, cur]
        if z == 0:
            raise ConfigurationError(f"broken loop: no hopping between {cur} and {nxt}")
        total += float(np.angle(z))
    return total if raw else wrap_angle(total)


@dataclass
class BalanceResult:
    shifts: dict
    config: DressingConfig
    iterations: int
    residual: float


def effective_potentials(config, law, geometry, sites):
    return np.array([chemical_potential(config, law, geometry, i) + config.shift(i) for i in sites])


def balance_potentials(config, law, geometry, reference_site, tol=None, max_iter=100):
    """Shift detunings site by site until every on-site energy equals the reference.

    A shift s_i of every detuning on site i adds s_i to that site's energy and
    slightly changes the light shifts, so the update is iterated.
    """
    sites = [i for i in config.dressed_sites() if geometry.is_active(i)]
    if reference_site not in sites:
        raise ConfigurationError(f"reference site {reference_site} is not dressed")
    if tol is None:
        tol = 1e-9 * max(abs(c.detuning) for c in config.colors)
    shifts = {i: config.shift(i) for i in sites}
    cur = config
    resid = np.inf
    for it in range(max_iter + 1):
        eps = effective_potentials(cur, law, geometry, sites)
        ref = eps[sites.index(reference_site)]
        diff = eps - ref
        resid = float(np.max(np.abs(diff)))
        if resid < tol:
            return BalanceResult({i: shifts[i] - config.shift(i) for i in sites}, cur, it, resid)
        for k, i in enumerate(sites):
            if i != reference_site:
                shifts[i] -= diff[k]
        merged = dict(config.site_shifts)
        merged.update(shifts)
        cur = config.with_site_shifts(merged)
    raise ConvergenceError(f"potential balancing did not converge in {max_iter} iterations "
                           f"(residual {resid:.3e})", residual=resid)


class QuasiDegeneracyError(ConfigurationError):
    pass


def dimer_hop(config, law, geometry, pinned, src, dst, label, tol=1.0):
    """Hop of an excitation ``src`` -> ``dst`` next to a pinned excitation.

    Returns <pinned, dst|H|pinned, src>.  The two pair energies V(pinned, src)
    and V(pinned, dst) must agree within ``tol`` times the returned amplitude.
    """
    if label not in channels(config, dst, src):
        raise ConfigurationError(f"color {label!r} is not a channel between sites {src} and {dst}")
    v_nn = pair_interaction(geometry, law, pinned, src)
    v_other = pair_interaction(geometry, law, pinned, dst)
    v_jk = pair_interaction(geometry, law, dst, src)
    d = _pair_detuning(config, label, dst, src)
    a, b = d + v_nn, d + v_nn + v_jk
    if a == 0.0 or b == 0.0:
        raise ResonanceError("dimer hopping pole")
    amp = config.rabi(dst, label) * np.conj(config.rabi(src, label)) * v_jk / (4.0 * a * b)
    if abs(v_other - v_nn) > tol * abs(amp):
        raise QuasiDegeneracyError(
            f"pair energies differ by {abs(v_other - v_nn):.3e}, more than {tol} x |J2| = {tol * abs(amp):.3e}")
    return amp


def pair_energy_shift(config, law, geometry, i, j):
    """Second-order energy shift of the doubly excited state |r_i r_j> (no site shifts)."""
    vmat = interaction_matrix(geometry, law)
    v = vmat[i, j]
    out = 0.0
    for c in config.colors:
        for s in (i, j):
            om = c.rabi.get(s)
            if om is not None:
                out += abs(om) ** 2 / (4.0 * (c.detuning + v))
        for k, om in c.rabi.items():
            if k in (i, j) or not geometry.is_active(k):
                continue
            out -= abs(om) ** 2 / (4.0 * (c.detuning + vmat[i, k] + vmat[j, k]))
    return out


def pair_hop(config, law, geometry, i, j, k):
    """<r_i r_k|H|r_i r_j>: the excitation on ``j`` moves to ``k`` while ``i`` stays.

    Both intermediate denominators are taken from the initial state, so the
    element is exact at second order even when V_ij and V_ik differ.
    """
    vmat = interaction_matrix(geometry, law)
    out = 0.0
    for lab in sorted(channels(config, j, k)):
        d = config.detuning(lab)
        a = d + vmat[i, j]
        b = d + vmat[i, k] + vmat[j, k]
        out += np.conj(config.rabi(j, lab)) * config.rabi(k, lab) / 4.0 * (1.0 / a - 1.0 / b)
    return out


def exact_pair_exchange(rabi, detuning, v):
    """Exchange rate of two atoms under one shared color, from the exact 3-level problem.

    The antisymmetric single-excitation state is dark and stays at ``detuning``;
    the symmetric one mixes with |gg> and |rr>.  Returns half their splitting,
    which reduces to Omega^2 V / (4 Delta (Delta + V)) at weak dressing.
    """
    c = abs(rabi) / math.sqrt(2.0)
    h = np.array([[0.0, c, 0.0], [c, detuning, c], [0.0, c, 2.0 * detuning + v]])
    w, u = np.linalg.eigh(h)
    k = int(np.argmax(np.abs(u[1]) ** 2))
    return 0.5 * (w[k] - detuning)


@dataclass(frozen=True)
class DoublonModel:
    com_hopping_x: float
    com_hopping_y: float
    com_flux: float
    interaction_gaps: tuple


def doublon_com_model(j_x, j_y, flux, d1, d2, d3):
    """Centre-of-mass hopping and flux of a pair bound along y."""
    if d1 == 0 or d2 == 0 or d3 == 0:
        raise ConfigurationError("interaction gaps must be nonzero")
    jxp = 2.0 * j_x ** 2 / d2
    jyp = j_y ** 2 / d1 + j_y ** 2 / d3
    return DoublonModel(jxp, jyp, wrap_angle(2.0 * flux), (d1, d2, d3))


@dataclass
class PowerBudget:
    beam_waist: float
    site_count: int
    effective_dipole: float
    fine_structure: float
    detuning: float
    color_spacing: float
    rabi: np.ndarray
    intensities: np.ndarray
    total_power: float
    total_power_closed_form: float


def power_budget(j, eps_b, eps_c, w0, n_sites, d_eff, alpha=sc.alpha, n_colors=4):
    """Laser power needed for hopping ``j`` (rad/us) at bit-flip and crosstalk errors.

    ``w0`` is the beam waist in um and ``d_eff`` the two-photon dipole in units
    of e a0.  Intensities are returned in W/m^2 and powers in W.  Colors sit
    at detunings Delta + k delta with Delta = 4J/eps_b and delta = J/sqrt(eps_c),
    and each carries the Rabi frequency that gives the same hopping J.
    """
    if not (0 < eps_b < 1 and 0 < eps_c < 1):
        raise ConfigurationError("error budgets must lie in (0, 1)")
    if j <= 0 or w0 <= 0 or n_sites < 1 or d_eff <= 0 or n_colors < 1:
        raise ConfigurationError("power budget needs positive J, waist, site count and dipole")
    delta = 4.0 * j / eps_b
    spacing = j / math.sqrt(eps_c)
    rabi2 = np.array([4.0 * j * (delta + k * spacing) for k in range(n_colors)])
    hbar = sc.hbar
    d_si = d_eff * sc.physical_constants["Bohr radius"][0]
    w_si = w0 * 1e-6
    om2_si = rabi2 * 1e12
    intens = hbar * om2_si / (8.0 * math.pi * alpha * d_si ** 2)
    p_tot = math.pi * w_si ** 2 * n_sites * float(intens.sum()) / 2.0
    j_si = j * 1e6
    scheme = 2.0 * n_colors * 4.0 / eps_b + n_colors * (n_colors - 1) / math.sqrt(eps_c)
    closed = (w_si ** 2 * n_sites * hbar / (2.0 * alpha * d_si ** 2)) * j_si ** 2 * scheme / 4.0
    return PowerBudget(w0, n_sites, d_eff, alpha, delta, spacing, np.sqrt(rabi2), intens, p_tot, closed)


def detuning_for_exchange(rabi, v, ratio, bracket=(0.3, 10.0)):
    """Detuning (same sign as ``v``) at which |exact_pair_exchange| = ratio * |rabi|.

    ``bracket`` is in units of |rabi|.
    """
    om = abs(rabi)
    s = 1.0 if v >= 0 else -1.0

    def f(d):
        return abs(exact_pair_exchange(rabi, s * d, v)) - ratio * om

    a, b = bracket[0] * om, bracket[1] * om
    if f(a) * f(b) > 0:
        raise ConfigurationError(f"no detuning in [{bracket[0]}, {bracket[1]}] x Omega gives |J| = {ratio} Omega")
    return s * brentq(f, a, b, xtol=1e-14 * om, rtol=1e-14)
