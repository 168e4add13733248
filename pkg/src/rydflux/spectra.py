"""Two-excitation band structure, bound-pair classification, Chern numbers and edge modes.

Gauge: a y-link at column x carries t_y exp(i flux x) for the hop y -> y + 1,
x-links are real.  A counter-clockwise plaquette then encloses +flux.

Two-body Bloch states on the cylinder are written as
psi(x1, y1, x2, y2) = exp(i K y1) phi(x1, x2, r) with r = y2 - y1.  This is
the centre-of-mass form exp(i K R) with R = (y1 + y2) / 2, relabelled by the
fixed unitary phi -> exp(-i K r / 2) phi, which makes the Bloch Hamiltonian
strictly 2pi-periodic in K even though R sits on a half-integer grid.
Bosonic exchange reads phi(x1, x2, r) = exp(i K r) phi(x2, x1, -r).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
import scipy.linalg as sla
from scipy import sparse

from .basis import SectorBasis
from .dynamics import EvolutionResult, StateVector, evolve_effective, fmt, sector_hamiltonian
from .effective import EffectiveModel, plaquette_flux, wrap_angle
from .errors import ConfigurationError, ConvergenceError

BOUND_WEIGHT = 0.8
EDGE_WEIGHT = 0.6
EDGE_COLUMNS = 2
INTERACTION_CUTOFF = 1e-3

TYPE_I, TYPE_II, TYPE_III, SCATTERING = "I", "II", "III", "scattering"


def law_interactions(c6, d_x, d_y, l_x, r_max, j_ref, cutoff=INTERACTION_CUTOFF):
    """V(dx, dy) = C6 / |d|^6 on the rectangular lattice, dropped below ``cutoff * j_ref``."""
    out = {}
    for dx in range(-(l_x - 1), l_x):
        for dy in range(-r_max, r_max + 1):
            if dx == 0 and dy == 0:
                continue
            v = c6 / ((dx * d_x) ** 2 + (dy * d_y) ** 2) ** 3
            if v >= cutoff * abs(j_ref):
                out[(dx, dy)] = v
    return out


@dataclass
class CylinderModel:
    """Two excitations on a strip open along x and periodic along y.

    ``ring`` > 0 closes y into a ring of that length (used by the free-particle
    oracle); otherwise y is infinite and the relative coordinate is cut at
    ``r_max``.
    """

    l_x: int
    j_x: float
    j_y: float
    flux: float
    interactions: dict = field(default_factory=dict)
    r_max: int = 12
    ring: int = 0
    hard_core: bool = True
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.l_x < 1:
            raise ConfigurationError("l_x must be positive")
        if self.ring <= 0 and self.r_max < 1:
            raise ConfigurationError("r_max must be positive")
        if self.ring < 0:
            raise ConfigurationError("ring length must be positive")
        self.interactions = {(int(a), int(b)): float(v) for (a, b), v in self.interactions.items()}
        for (a, b), v in self.interactions.items():
            if self.interactions.get((-a, -b), 0.0) != v:
                raise ConfigurationError(f"V is not symmetric under inversion at displacement {(a, b)}")

    @classmethod
    def from_law(cls, l_x, j_x, j_y, flux, c6, d_x, d_y, r_max=12, cutoff=INTERACTION_CUTOFF, **kw):
        v = law_interactions(c6, d_x, d_y, l_x, r_max, j_x, cutoff)
        return cls(l_x, j_x, j_y, flux, v, r_max, meta={"c6": c6, "d_x": d_x, "d_y": d_y, "cutoff": cutoff}, **kw)

    @classmethod
    def reference(cls, l_x=9, flux=2 * np.pi / 3, r_max=12, c6_scale=1.0):
        """Anisotropic lattice at the calibrated C6 (V(0, 1) = 1045 J_x)."""
        from . import presets
        from .units import mhz

        jx = mhz(presets.LATTICE_JX_MHZ)
        return cls.from_law(l_x, jx, jx / 0.6, flux, c6_scale * presets.calibrated_c6(),
                            presets.LATTICE_DX, presets.LATTICE_DY, r_max)

    def interaction(self, dx, dy):
        if self.ring:
            dy = (dy + self.ring // 2) % self.ring - self.ring // 2
        return self.interactions.get((int(dx), int(dy)), 0.0)

    def without_interactions(self):
        return replace(self, interactions={}, meta=dict(self.meta))

    def scaled_interactions(self, factor):
        return replace(self, interactions={k: factor * v for k, v in self.interactions.items()},
                       meta=dict(self.meta))

    def with_r_max(self, r_max):
        m = dict(self.meta)
        if "c6" in m:
            v = law_interactions(m["c6"], m["d_x"], m["d_y"], self.l_x, r_max, self.j_x, m["cutoff"])
        else:
            v = self.interactions
        return replace(self, r_max=r_max, interactions=v, meta=m)

    def strip_model(self, n_y):
        """Finite open strip with the same hoppings, for checking the gauge."""
        return hofstadter_lattice(self.l_x, n_y, self.j_x, self.j_y, self.flux)

    def check_gauge(self, tol=1e-12):
        m = self.strip_model(2)
        for x in range(self.l_x - 1):
            loop = [x, x + 1, self.l_x + x + 1, self.l_x + x]
            f = plaquette_flux(m, loop)
            if abs(wrap_angle(f - self.flux)) > tol:
                raise ConfigurationError(f"plaquette {x} carries {f}, expected {self.flux}")
        return True


# ---------------------------------------------------------------- single particle

def strip_bloch(model, k):
    """Single-particle Bloch matrices h(k) of the strip, shape (..., l_x, l_x)."""
    k = np.asarray(k, dtype=float)
    L = model.l_x
    x = np.arange(L)
    h = np.zeros(k.shape + (L, L), dtype=complex)
    h[..., x, x] = 2.0 * model.j_y * np.cos(k[..., None] - model.flux * x)
    if L > 1:
        h[..., x[:-1], x[1:]] = model.j_x
        h[..., x[1:], x[:-1]] = model.j_x
    return h


def strip_bands(model, k):
    return np.linalg.eigvalsh(strip_bloch(model, k))


def continuum_envelope(model, K, n_k=256):
    """(lowest, highest) free two-particle energy at total momentum ``K``."""
    if model.ring:
        k = 2 * np.pi * np.arange(model.ring) / model.ring
    else:
        k = 2 * np.pi * np.arange(n_k) / n_k
    e1 = strip_bands(model, k)
    e2 = strip_bands(model, K - k)
    return float((e1[:, 0] + e2[:, 0]).min()), float((e1[:, -1] + e2[:, -1]).max())


def free_pair_energies(model, K):
    """Oracle: all symmetric free two-particle energies at total momentum ``K`` on a ring."""
    L = model.ring
    if not L:
        raise ConfigurationError("the exhaustive oracle needs a ring")
    m = int(round(K * L / (2 * np.pi)))
    ks = 2 * np.pi * np.arange(L) / L
    bands = strip_bands(model, ks)
    out = []
    nb = model.l_x
    for j1 in range(L):
        j2 = (m - j1) % L
        for a in range(nb):
            for b in range(nb):
                # unordered pairs of modes (j1, a), (j2, b)
                if (j1, a) < (j2, b) or (j1, a) == (j2, b):
                    out.append(bands[j1, a] + bands[j2, b])
    return np.sort(np.array(out))


# ---------------------------------------------------------------- two-body blocks

def _pair_basis(model):
    L = model.l_x
    ring = model.ring
    rv = np.arange(ring) if ring else np.arange(-model.r_max, model.r_max + 1)
    idx = np.full((L, L, len(rv)), -1, dtype=np.int64)
    x1s, x2s, rs = [], [], []
    for a in range(L):
        for b in range(L):
            for k, r in enumerate(rv):
                if model.hard_core and a == b and r == 0:
                    continue
                idx[a, b, k] = len(x1s)
                x1s.append(a)
                x2s.append(b)
                rs.append(r)
    x1, x2, r = np.array(x1s), np.array(x2s), np.array(rs)
    pr = np.mod(-r, ring) if ring else -r
    partner = idx[x2, x1, pr - rv[0]]
    return _Basis(x1, x2, r, idx, partner, rv, ring)


@dataclass(frozen=True)
class _Basis:
    x1: np.ndarray
    x2: np.ndarray
    r: np.ndarray
    index: np.ndarray
    partner: np.ndarray
    r_values: np.ndarray
    ring: int

    @property
    def dim(self):
        return len(self.x1)

    def lookup(self, x1, x2, r):
        L = self.index.shape[0]
        ok = (x1 >= 0) & (x1 < L) & (x2 >= 0) & (x2 < L)
        rr = np.mod(r, self.ring) if self.ring else r - self.r_values[0]
        ok &= (rr >= 0) & (rr < self.index.shape[2])
        out = np.full(np.shape(x1), -1, dtype=np.int64)
        out[ok] = self.index[x1[ok], x2[ok], rr[ok]]
        return out

    def displacement(self):
        """(dx, dy) = (x2 - x1, r), with r taken as the minimal image on a ring."""
        dy = self.r
        if self.ring:
            dy = (self.r + self.ring // 2) % self.ring - self.ring // 2
        return self.x2 - self.x1, dy


def _ordered_hamiltonian(model, K, basis):
    n = basis.dim
    dx, dy = basis.displacement()
    x1, x2, r = basis.x1, basis.x2, basis.r
    ty, tx, f = model.j_y, model.j_x, model.flux
    src_terms = [
        # particle 1 along y
        ((x1, x2, r + 1), ty * np.exp(1j * (f * x1 - K))),
        ((x1, x2, r - 1), ty * np.exp(-1j * (f * x1 - K))),
        # particle 2 along y
        ((x1, x2, r - 1), ty * np.exp(1j * f * x2)),
        ((x1, x2, r + 1), ty * np.exp(-1j * f * x2)),
        # along x
        ((x1 + 1, x2, r), np.full(n, tx, dtype=complex)),
        ((x1 - 1, x2, r), np.full(n, tx, dtype=complex)),
        ((x1, x2 + 1, r), np.full(n, tx, dtype=complex)),
        ((x1, x2 - 1, r), np.full(n, tx, dtype=complex)),
    ]
    rows = [np.arange(n)]
    cols = [np.arange(n)]
    vals = [np.array([model.interaction(a, b) for a, b in zip(dx, dy)], dtype=complex)]
    for (a, b, c), amp in src_terms:
        cc = basis.lookup(a, b, c)
        ok = cc >= 0
        rows.append(np.nonzero(ok)[0])
        cols.append(cc[ok])
        vals.append(amp[ok])
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


def _symmetrizer(K, basis, tol=1e-9):
    """Isometry onto exchange-symmetric vectors, one column per exchange orbit."""
    c = np.arange(basis.dim)
    p = basis.partner
    pair = (p >= 0) & (c < p)
    self_ = (p == c) & (np.abs(np.exp(1j * K * basis.r) - 1.0) < tol)
    cp, pp = c[pair], p[pair]
    cs = c[self_]
    m = len(cp) + len(cs)
    # columns ordered by their smallest member
    first = np.concatenate([cp, cs])
    order = np.argsort(first, kind="stable")
    colid = np.empty(m, dtype=np.int64)
    colid[order] = np.arange(m)
    rows = np.concatenate([pp, cp, cs])
    cols = np.concatenate([colid[:len(cp)], colid[:len(cp)], colid[len(cp):]])
    h = 1.0 / math.sqrt(2.0)
    vals = np.concatenate([np.full(len(cp), h, dtype=complex), h * np.exp(1j * K * basis.r[cp]),
                           np.ones(len(cs), dtype=complex)])
    return sparse.csr_matrix((vals, (rows, cols)), shape=(basis.dim, m))


@dataclass
class TwoBodyBlock:
    K: float
    matrix: np.ndarray
    isometry: np.ndarray
    basis: _Basis


def build_two_body_bloch(model, K, basis=None):
    """Exchange-symmetric two-excitation Bloch Hamiltonian at COM momentum ``K``."""
    if model.ring and abs(np.exp(1j * K * model.ring) - 1.0) > 1e-9:
        raise ConfigurationError(f"K = {K} is not an allowed momentum on a ring of {model.ring}")
    basis = _pair_basis(model) if basis is None else basis
    H = _ordered_hamiltonian(model, K, basis)
    B = _symmetrizer(K, basis)
    Hs = (B.conj().T @ H @ B).toarray()
    Hs = 0.5 * (Hs + Hs.conj().T)
    return TwoBodyBlock(K, Hs, B, basis)


# ---------------------------------------------------------------- sweeps

@dataclass
class BlochSpectrum:
    """Sorted two-body bands on a K grid plus per-state descriptors.

    Descriptors (computed from the ordered-basis amplitudes): dominant
    displacement class (|dx|, |dy|) and its weight, weight on the type-I
    class (0, 2), column distribution P(x1), and weight on the outermost
    relative coordinates.  Full eigenvectors are kept only when requested.
    """

    model: CylinderModel
    k_grid: np.ndarray
    energies: np.ndarray
    dominant: np.ndarray
    dominant_weight: np.ndarray
    column_density: np.ndarray
    boundary_weight: np.ndarray
    envelope: np.ndarray
    vectors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def n_bands(self):
        return self.energies.shape[1]

    def continuum_top(self):
        return float(self.envelope[:, 1].max())

    def write_csv(self, path, unit=None):
        """Band table: K then E_n in units of ``unit`` (default J_x) relative to the continuum top."""
        unit = self.model.j_x if unit is None else unit
        ref = self.continuum_top()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["K"] + [f"E{n}" for n in range(self.n_bands)])
            for K, row in zip(self.k_grid, self.energies):
                w.writerow([fmt(K)] + [fmt((e - ref) / unit) for e in row])


def _descriptors(basis, vecs, l_x, r_edge):
    """Per-eigenvector descriptors from ordered amplitudes ``vecs`` (dim_ord, n)."""
    p = np.abs(vecs) ** 2
    dx, dy = basis.displacement()
    adx, ady = np.abs(dx), np.abs(dy)
    ncls_y = int(ady.max()) + 1
    cls = adx * ncls_y + ady
    ncls = int(cls.max()) + 1
    W = np.zeros((ncls, p.shape[1]))
    np.add.at(W, cls, p)
    best = W.argmax(axis=0)
    bw = W[best, np.arange(p.shape[1])]
    dom = np.stack([best // ncls_y, best % ncls_y], axis=1)
    P = np.zeros((l_x, p.shape[1]))
    np.add.at(P, basis.x1, p)
    edge = (np.abs(basis.r) >= r_edge) if r_edge is not None else np.zeros(basis.dim, dtype=bool)
    bnd = p[edge].sum(axis=0)
    return dom, bw, P.T, bnd


def _solve_block(model, K, basis, keep=False):
    blk = build_two_body_bloch(model, K, basis)
    w, u = sla.eigh(blk.matrix)
    vecs = blk.isometry @ u
    r_edge = None if model.ring else model.r_max
    return w, vecs, _descriptors(basis, vecs, model.l_x, r_edge)


def default_k_grid(n=201):
    return np.linspace(-np.pi, np.pi, n)


def sweep_spectrum(model, k_grid=None, keep_vectors=(), check_r_max=True, check_points=5,
                   tol=1e-3, boundary_tol=1e-6):
    """Diagonalise the two-body Bloch blocks on ``k_grid``.

    With ``check_r_max`` the bound-state energies at ``check_points`` momenta
    are recomputed at r_max + 2 and must move by less than ``tol * J_x``.
    """
    k_grid = default_k_grid() if k_grid is None else np.asarray(k_grid, dtype=float)
    basis = _pair_basis(model)
    nk = len(k_grid)
    E, dom, dw, P, bw, env = [], [], [], [], [], []
    vec_store = {}
    keep = set(int(i) for i in keep_vectors)
    for i, K in enumerate(k_grid):
        w, v, (d, wt, col, bnd) = _solve_block(model, K, basis)
        E.append(w)
        dom.append(d)
        dw.append(wt)
        P.append(col)
        bw.append(bnd)
        env.append(continuum_envelope(model, K))
        if i in keep:
            vec_store[i] = v
    nmin = min(len(e) for e in E)
    if any(len(e) != nmin for e in E):
        # on a ring the number of symmetric states depends on K
        raise ConfigurationError("band count changes across the K grid; use one K at a time on rings")
    spec = BlochSpectrum(model, k_grid, np.array(E), np.array(dom), np.array(dw), np.array(P),
                         np.array(bw), np.array(env), vec_store,
                         {"basis_dim": basis.dim, "bound_weight": BOUND_WEIGHT, "edge_weight": EDGE_WEIGHT,
                          "edge_columns": EDGE_COLUMNS})
    if check_r_max and not model.ring:
        change, worst = r_max_convergence(spec, check_points)
        spec.meta["r_max_change"] = change
        if not change < tol * abs(model.j_x):
            raise ConvergenceError(f"bound energies moved by {change / abs(model.j_x):.3e} J_x "
                                   f"for r_max {model.r_max} -> {model.r_max + 2}", residual=change)
        labels = classify_states(spec)
        bound = labels.types != SCATTERING
        worst_edge = float(spec.boundary_weight[bound].max()) if bound.any() else 0.0
        spec.meta["bound_boundary_weight"] = worst_edge
        if worst_edge > boundary_tol:
            raise ConvergenceError(f"bound states carry weight {worst_edge:.3e} at |r| = r_max",
                                   residual=worst_edge)
    return spec


def r_max_convergence(spec, n_points=5):
    """Largest shift of bound-state energies when r_max grows by two."""
    model = spec.model
    bigger = model.with_r_max(model.r_max + 2)
    basis = _pair_basis(bigger)
    idx = np.unique(np.linspace(0, len(spec.k_grid) - 1, n_points).round().astype(int))
    labels = classify_states(spec)
    worst = 0.0
    for i in idx:
        sel = labels.types[i] != SCATTERING
        if not sel.any():
            continue
        w2 = sla.eigh(build_two_body_bloch(bigger, spec.k_grid[i], basis).matrix, eigvals_only=True)
        e = spec.energies[i, sel]
        d = np.min(np.abs(e[:, None] - w2[None, :]), axis=1)
        worst = max(worst, float(d.max()))
    return worst, idx


# ---------------------------------------------------------------- classification

@dataclass
class BoundStateLabel:
    type: str
    displacement: tuple
    band: int
    edge: str
    score: float


@dataclass
class StateLabels:
    types: np.ndarray
    displacement: np.ndarray
    band: np.ndarray
    edge: np.ndarray
    score: np.ndarray
    meta: dict = field(default_factory=dict)

    def label(self, k_index, n):
        return BoundStateLabel(str(self.types[k_index, n]), tuple(int(a) for a in self.displacement[k_index, n]),
                               int(self.band[k_index, n]), str(self.edge[k_index, n]),
                               float(self.score[k_index, n]))

    def energies_of(self, spectrum, kind, edge=None):
        sel = self.types == kind
        if edge is not None:
            sel &= self.edge == edge
        return spectrum.energies[sel]

    def report(self, spectrum):
        """Counts per type and edge flag, with the thresholds used."""
        out = {"thresholds": dict(self.meta), "counts": {}}
        for t in (TYPE_I, TYPE_II, TYPE_III, SCATTERING):
            for e in ("bulk", "left", "right"):
                n = int(((self.types == t) & (self.edge == e)).sum())
                if n:
                    out["counts"][f"{t}/{e}"] = n
        return out

    def write_json(self, path, spectrum):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.report(spectrum), fh, indent=1)


def bound_type(displacement):
    dx, dy = displacement
    if dx == 0 and dy == 2:
        return TYPE_I
    if dy == 0:
        return TYPE_II
    return TYPE_III


def classify_states(spectrum, bound_weight=BOUND_WEIGHT, edge_weight=EDGE_WEIGHT, edge_columns=EDGE_COLUMNS,
                    margin=1e-9):
    """Bound / scattering, displacement type and edge flag for every eigenstate."""
    E = spectrum.energies
    nk, nb = E.shape
    lo = spectrum.envelope[:, 0][:, None]
    hi = spectrum.envelope[:, 1][:, None]
    scale = margin * max(abs(spectrum.model.j_x), abs(spectrum.model.j_y))
    outside = (E > hi + scale) | (E < lo - scale)
    bound = outside & (spectrum.dominant_weight >= bound_weight)
    types = np.full((nk, nb), SCATTERING, dtype=object)
    for i in range(nk):
        for n in np.nonzero(bound[i])[0]:
            types[i, n] = bound_type(tuple(spectrum.dominant[i, n]))
    P = spectrum.column_density
    c = min(edge_columns, spectrum.model.l_x)
    left = P[:, :, :c].sum(axis=2)
    right = P[:, :, -c:].sum(axis=2)
    edge = np.full((nk, nb), "bulk", dtype=object)
    edge[left >= edge_weight] = "left"
    edge[(right >= edge_weight) & (right > left)] = "right"
    score = np.maximum(left, right)
    band = np.full((nk, nb), -1, dtype=int)
    for i in range(nk):
        for t in (TYPE_I, TYPE_II, TYPE_III):
            sel = np.nonzero(types[i] == t)[0]
            band[i, sel] = np.arange(len(sel))
    return StateLabels(types, spectrum.dominant.copy(), band, edge, score,
                       {"bound_weight": bound_weight, "edge_weight": edge_weight, "edge_columns": edge_columns})


def sub_bands(energies, n_groups):
    """Split sorted energies at the ``n_groups - 1`` widest spacings.

    Returns ``(groups, gaps)`` with gaps as (lower edge, upper edge) pairs.
    """
    e = np.sort(np.asarray(energies, dtype=float))
    if len(e) < n_groups:
        raise ConfigurationError("fewer energies than groups")
    d = np.diff(e)
    cut = np.sort(np.argsort(d)[::-1][: n_groups - 1])
    groups = np.split(e, cut + 1)
    gaps = [(float(e[c]), float(e[c + 1])) for c in cut]
    return groups, gaps


def doublon_strip_bands(model, K, com=None):
    """Second-order bands of a pair bound at (0, 2) on the strip, at pair momentum ``K``.

    Hopping and flux come from :func:`doublon_com_model`; the diagonal holds
    V(0, 2) plus the virtual-hop shifts, which are smaller on the two edge
    columns because a boundary pair has fewer x-neighbours.
    """
    from .effective import doublon_com_model

    v1, v2, v3, v4 = (model.interaction(0, 1), model.interaction(0, 2), model.interaction(0, 3),
                      model.interaction(1, 2))
    d1, d2, d3 = v2 - v1, v2 - v4, v2 - v3
    com = doublon_com_model(model.j_x, model.j_y, model.flux, d1, d2, d3) if com is None else com
    L = model.l_x
    x = np.arange(L)
    nx = np.where((x == 0) | (x == L - 1), 2, 4) if L > 1 else np.zeros(1)
    onsite = v2 + 2 * model.j_y ** 2 / d1 + 2 * model.j_y ** 2 / d3 + nx * model.j_x ** 2 / d2
    K = np.asarray(K, dtype=float)
    h = np.zeros(K.shape + (L, L), dtype=complex)
    h[..., x, x] = onsite + 2.0 * com.com_hopping_y * np.cos(K[..., None] - com.com_flux * x)
    if L > 1:
        h[..., x[:-1], x[1:]] = com.com_hopping_x
        h[..., x[1:], x[:-1]] = com.com_hopping_x
    return np.linalg.eigvalsh(h), com


# ---------------------------------------------------------------- Chern numbers

def rational_flux(flux, max_q=64, tol=1e-9):
    """(p, q) with flux = 2 pi p / q."""
    f = Fraction(flux / (2 * np.pi)).limit_denominator(max_q)
    if abs(float(f) * 2 * np.pi - flux) > tol:
        raise ConfigurationError(f"flux {flux} is not 2 pi p / q with q <= {max_q}")
    return f.numerator, f.denominator


def hofstadter_bloch(kx, ky, j_x, j_y, flux, q):
    """Magnetic Bloch matrix of a q-site cell along x; periodic in both momenta with period 2 pi."""
    kx = np.asarray(kx, dtype=float)
    ky = np.asarray(ky, dtype=float)
    shape = np.broadcast(kx, ky).shape
    kx = np.broadcast_to(kx, shape)
    ky = np.broadcast_to(ky, shape)
    s = np.arange(q)
    h = np.zeros(shape + (q, q), dtype=complex)
    h[..., s, s] = 2.0 * j_y * np.cos(ky[..., None] - flux * s)
    for a in range(q - 1):
        h[..., a, a + 1] += j_x
        h[..., a + 1, a] += j_x
    # link from the last site of one cell to the first site of the next
    h[..., q - 1, 0] += j_x * np.exp(1j * kx)
    h[..., 0, q - 1] += j_x * np.exp(-1j * kx)
    return h


def _link(a, b):
    z = np.linalg.det(np.einsum("...ji,...jk->...ik", a.conj(), b))
    return z / np.abs(z)


def _chern_on_grid(j_x, j_y, flux, q, groups, n, rng=None, gap_tol=1e-9):
    k = 2 * np.pi * np.arange(n) / n
    KX, KY = np.meshgrid(k, k, indexing="ij")
    w, v = np.linalg.eigh(hofstadter_bloch(KX, KY, j_x, j_y, flux, q))
    if rng is not None:
        v = v * np.exp(1j * rng.uniform(0, 2 * np.pi, size=v.shape[:-2] + (1, q)))
    out = []
    for g in groups:
        lo, hi = g[0], g[-1]
        if lo > 0 and float((w[..., lo] - w[..., lo - 1]).min()) <= gap_tol:
            raise ConvergenceError(f"gap closes below band group {g} on the {n}x{n} grid")
        if hi < q - 1 and float((w[..., hi + 1] - w[..., hi]).min()) <= gap_tol:
            raise ConvergenceError(f"gap closes above band group {g} on the {n}x{n} grid")
        u = v[..., :, lo:hi + 1]
        u_x = np.roll(u, -1, axis=0)
        u_y = np.roll(u, -1, axis=1)
        u_xy = np.roll(u_x, -1, axis=1)
        F = np.angle(_link(u, u_x) * _link(u_x, u_xy) * np.conj(_link(u_y, u_xy)) * np.conj(_link(u, u_y)))
        # arg <u|u'> = -A dk for A = i<u|du>, hence the minus sign
        out.append(float(-F.sum() / (2 * np.pi)))
    return out


def chern_numbers(j_x, j_y, flux, groups=None, grid=24, max_grid=384, rephase_seed=None, int_tol=1e-6):
    """Lattice field-strength Chern numbers of the Hofstadter bands, lowest band first.

    Sign convention: C = (1 / 2 pi) * integral of the Berry curvature
    curl A with A = i <u|grad u>.

    ``groups`` lists band-index tuples treated as one (non-Abelian) group;
    by default every band is its own group.  The grid starts at ``grid`` and
    is doubled until two successive grids agree on the integers.
    ``rephase_seed`` multiplies every eigenvector by a random phase first.
    """
    if grid < 24:
        raise ConfigurationError("the momentum grid must be at least 24 x 24")
    _, q = rational_flux(wrap_angle(flux) % (2 * np.pi) if flux else 0.0)
    groups = [tuple(range(b, b + 1)) for b in range(q)] if groups is None else [tuple(g) for g in groups]
    flat = sorted(b for g in groups for b in g)
    if flat != list(range(q)):
        raise ConfigurationError(f"band groups must cover bands 0..{q - 1} exactly once")
    rng = None if rephase_seed is None else np.random.default_rng(rephase_seed)
    prev = None
    n = grid
    while n <= max_grid:
        raw = _chern_on_grid(j_x, j_y, flux, q, groups, n, rng)
        ints = [int(round(c)) for c in raw]
        if max(abs(c - i) for c, i in zip(raw, ints)) > int_tol:
            prev = None
        elif ints == prev:
            return ints
        else:
            prev = ints
        n *= 2
    raise ConvergenceError("Chern numbers did not stabilise before the grid limit")


# ---------------------------------------------------------------- finite lattices

def hofstadter_lattice(nx, ny, j_x, j_y, flux, interaction=None, vacancies=(), periodic_y=False):
    """Finite Hofstadter lattice as an EffectiveModel; site (x, y) has index y * nx + x.

    ``interaction`` is a callable V(dx, dy) or a dict keyed by displacement.
    """
    n = nx * ny
    H = np.zeros((n, n), dtype=complex)
    for y in range(ny):
        for x in range(nx):
            i = y * nx + x
            if x + 1 < nx:
                H[i + 1, i] = H[i, i + 1] = j_x
            if y + 1 < ny or (periodic_y and ny > 2):
                jj = ((y + 1) % ny) * nx + x
                H[jj, i] += j_y * np.exp(1j * flux * x)
                H[i, jj] += j_y * np.exp(-1j * flux * x)
    pos = np.array([(x, y) for y in range(ny) for x in range(nx)], dtype=float)
    V = np.zeros((n, n))
    if interaction is not None:
        fn = interaction if callable(interaction) else (lambda a, b: interaction.get((a, b), 0.0))
        for i in range(n):
            for j in range(n):
                if i != j:
                    V[i, j] = fn(int(pos[j, 0] - pos[i, 0]), int(pos[j, 1] - pos[i, 1]))
    active = np.ones(n, dtype=bool)
    for s in vacancies:
        s = int(s)
        active[s] = False
        H[s, :] = 0
        H[:, s] = 0
        V[s, :] = 0
        V[:, s] = 0
    return EffectiveModel(H, np.zeros(n), V, active, pos,
                          {"nx": nx, "ny": ny, "flux": flux, "j_x": j_x, "j_y": j_y,
                           "vacancies": [int(s) for s in vacancies]})


def perimeter_sites(nx, ny):
    """Boundary sites counter-clockwise, starting at the lower-left corner."""
    path = [(x, 0) for x in range(nx)]
    path += [(nx - 1, y) for y in range(1, ny)]
    path += [(x, ny - 1) for x in range(nx - 2, -1, -1)]
    path += [(0, y) for y in range(ny - 2, 0, -1)]
    return [y * nx + x for x, y in path]


def _frame_depth(model):
    nx, ny = model.meta["nx"], model.meta["ny"]
    x, y = model.positions[:, 0], model.positions[:, 1]
    return np.minimum(np.minimum(x, nx - 1 - x), np.minimum(y, ny - 1 - y))


def bulk_bands(j_x, j_y, flux, n_k=96):
    """Infinite-lattice Hofstadter energies on an n_k x n_k magnetic-zone grid."""
    _, q = rational_flux(flux % (2 * np.pi))
    k = 2 * np.pi * np.arange(n_k) / n_k
    KX, KY = np.meshgrid(k, k, indexing="ij")
    return np.linalg.eigvalsh(hofstadter_bloch(KX, KY, j_x, j_y, flux, q)).reshape(-1, q)


def gap_window(bands, gap=0, shrink=0.2):
    """Central part of the ``gap``-th spectral gap of ``bands`` (one column per band)."""
    bands = np.asarray(bands)
    if bands.shape[1] <= gap + 1:
        raise ConfigurationError("no such gap: the spectrum has a single band")
    lo = float(bands[:, gap].max())
    hi = float(bands[:, gap + 1].min())
    if hi <= lo:
        raise ConfigurationError("the bands overlap: no spectral gap")
    pad = shrink * (hi - lo)
    return lo + pad, hi - pad


@dataclass
class EdgeMode:
    state: StateVector
    energies: np.ndarray
    weights: np.ndarray
    scores: np.ndarray
    window_weight: float
    meta: dict = field(default_factory=dict)


def _config_sites(basis):
    occ = basis.occupation()
    return [np.nonzero(row)[0] for row in occ]


def prepare_edge_mode(model, n_exc, window, target, width=1.5, bulk_energies=None, edge_depth=1,
                      displacement=None, min_score=0.5):
    """Edge wavepacket built from in-window eigenstates of the finite lattice.

    Every eigenstate with energy in ``window`` is weighted by its
    edge-localisation score (density fraction within ``edge_depth`` rows of
    the frame) and by its overlap with a Gaussian of ``width`` sites centred
    on ``target``.  For two excitations the Gaussian acts on the pair centre
    and, with ``displacement`` = (dx, dy), only on pairs with that relative
    displacement up to sign.  ``bulk_energies`` (any shape) must avoid the
    window, otherwise it does not lie in a gap.
    """
    lo, hi = window
    if bulk_energies is not None:
        b = np.asarray(bulk_energies).ravel()
        if np.any((b >= lo) & (b <= hi)):
            raise ConfigurationError("no in-gap edge states: the window overlaps the bulk spectrum")
    act = [i for i in range(model.n_sites) if model.active[i]]
    basis = SectorBasis.fixed(model.n_sites, n_exc, act)
    H = sector_hamiltonian(model, basis).toarray()
    w, v = sla.eigh(H)
    sel = np.nonzero((w >= lo) & (w <= hi))[0]
    if not len(sel):
        raise ConfigurationError("no in-gap edge states inside the window")
    occ = basis.occupation()
    dens = (np.abs(v[:, sel]) ** 2).T @ occ
    frame = _frame_depth(model) < edge_depth
    scores = dens[:, frame].sum(axis=1) / n_exc
    if scores.max() < min_score:
        raise ConfigurationError(f"no in-gap edge states: best edge score {scores.max():.2f}")
    pos = model.positions
    sites = _config_sites(basis)
    centre = np.array([pos[s].mean(axis=0) for s in sites])
    amp = np.exp(-((centre - np.asarray(target, dtype=float)) ** 2).sum(axis=1) / (2 * width ** 2))
    if displacement is not None and n_exc == 2:
        d = np.array([pos[s[1]] - pos[s[0]] for s in sites])
        want = np.abs(np.asarray(displacement, dtype=float))
        amp = amp * np.all(np.abs(np.abs(d) - want) < 1e-9, axis=1)
    c = scores * (v[:, sel].conj().T @ amp)
    if not np.any(np.abs(c) > 0):
        raise ConfigurationError("the target has no overlap with the in-gap states")
    psi = v[:, sel] @ c
    psi = psi / np.linalg.norm(psi)
    ww = float((np.abs(v[:, sel].conj().T @ psi) ** 2).sum())
    return EdgeMode(StateVector(basis, psi), w[sel], np.abs(c) ** 2 / np.sum(np.abs(c) ** 2), scores, ww,
                    {"window": (lo, hi), "target": tuple(target), "width": width})


# ---------------------------------------------------------------- edge transport

@dataclass
class EdgeTransportResult:
    evolution: EvolutionResult
    edge_sites: list
    correlations: np.ndarray
    winding: np.ndarray
    chirality: int
    pair_fraction: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def write_csv(self, prefix):
        """Density snapshots ``prefix_density.csv`` and edge correlations ``prefix_corr_<k>.csv``."""
        ev = self.evolution
        with open(f"{prefix}_density.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time"] + [f"n{i}" for i in range(ev.populations.shape[1])])
            for t, row in zip(ev.times, ev.populations):
                w.writerow([fmt(t)] + [fmt(p) for p in row])
        with open(f"{prefix}_winding.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "winding"] + (["pair_fraction"] if self.pair_fraction is not None else []))
            for k, t in enumerate(ev.times):
                row = [fmt(t), fmt(self.winding[k])]
                if self.pair_fraction is not None:
                    row.append(fmt(self.pair_fraction[k]))
                w.writerow(row)
        for k, G in enumerate(self.correlations):
            with open(f"{prefix}_corr_{k:04d}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                for row in G:
                    w.writerow([fmt(g) for g in row])


def winding_angle(model, populations):
    """Unwrapped polar angle of the density centre around the lattice centre, per time."""
    pos = model.positions
    c = pos[model.active].mean(axis=0)
    th = np.arctan2(pos[:, 1] - c[1], pos[:, 0] - c[0])
    z = populations @ np.exp(1j * th)
    return np.unwrap(np.angle(z))


def edge_correlations(basis, states, edge_sites):
    """<n_i n_j> for i, j on the edge path, for each state (two excitations)."""
    where = {s: k for k, s in enumerate(edge_sites)}
    sites = _config_sites(basis)
    pairs = np.array([(where.get(s[0], -1), where.get(s[1], -1)) if len(s) == 2 else (-1, -1) for s in sites])
    ok = (pairs[:, 0] >= 0) & (pairs[:, 1] >= 0)
    m = len(edge_sites)
    out = np.zeros((len(states), m, m))
    for k, psi in enumerate(states):
        p = np.abs(psi[ok]) ** 2
        np.add.at(out[k], (pairs[ok, 0], pairs[ok, 1]), p)
        np.add.at(out[k], (pairs[ok, 1], pairs[ok, 0]), p)
    return out


def pair_fraction(model, basis, states, displacement):
    """Probability that the two excitations sit at ``displacement`` (up to sign)."""
    pos = model.positions
    sites = _config_sites(basis)
    want = np.abs(np.asarray(displacement, dtype=float))
    d = np.array([np.abs(pos[s[1]] - pos[s[0]]) for s in sites])
    mask = np.all(np.abs(d - want) < 1e-9, axis=1)
    return np.array([float((np.abs(psi[mask]) ** 2).sum()) for psi in states])


def edge_transport_scenario(model, state, times, displacement=None, dense_limit=6000):
    """Evolve a prepared edge packet; returns densities, edge correlations and winding."""
    ev = evolve_effective(model, state, times, snapshot_every=1, dense_limit=dense_limit)
    states = [s for _, s in ev.snapshots]
    nx, ny = model.meta["nx"], model.meta["ny"]
    edge = [s for s in perimeter_sites(nx, ny) if model.active[s]]
    n_exc = int(ev.basis.counts[0])
    corr = edge_correlations(ev.basis, states, edge) if n_exc == 2 else np.zeros((0, len(edge), len(edge)))
    wind = winding_angle(model, ev.populations)
    chir = int(np.sign(wind[-1] - wind[0]))
    frac = pair_fraction(model, ev.basis, states, displacement) if (displacement is not None and n_exc == 2) \
        else None
    return EdgeTransportResult(ev, edge, corr, wind, chir, frac, {"n_exc": n_exc})


def restrict_state(state, model):
    """Carry a state into ``model``'s basis (vacancies removed), renormalised."""
    act = [i for i in range(model.n_sites) if model.active[i]]
    basis = SectorBasis.fixed(model.n_sites, int(state.basis.counts[0]), act)
    idx = basis.indices(state.basis.configs)
    psi = np.zeros(basis.dim, dtype=complex)
    ok = idx >= 0
    psi[idx[ok]] = state.amplitudes[ok]
    nrm = np.linalg.norm(psi)
    if nrm == 0:
        raise ConfigurationError("the state lives entirely on vacant sites")
    return StateVector(basis, psi / nrm), float(nrm ** 2)


def downstream_weight(model, populations, angle, direction, span=np.pi):
    """Density within the angular wedge (angle, angle + direction * span] around the lattice centre."""
    pos = model.positions
    c = pos[model.active].mean(axis=0)
    th = np.arctan2(pos[:, 1] - c[1], pos[:, 0] - c[0])
    rel = np.mod(direction * (th - angle), 2 * np.pi)
    wedge = (rel > 1e-9) & (rel <= span)
    return populations[..., wedge].sum(axis=-1) / populations.sum(axis=-1)


def site_angle(model, site):
    pos = model.positions
    c = pos[model.active].mean(axis=0)
    return float(np.arctan2(pos[site, 1] - c[1], pos[site, 0] - c[0]))


def vacancy_transmission(clean, defect, clean_model, vacancy):
    """Downstream weight past the vacancy with the defect relative to the clean run.

    The comparison is made at the first time the clean packet's centre is a
    quarter turn past the vacancy; the downstream region is the half-turn
    wedge that starts at the vacancy.
    """
    direction = clean.chirality
    a_v = site_angle(clean_model, vacancy)
    w = clean.winding
    rel = direction * (w - a_v)
    rel = rel - 2 * np.pi * np.floor((rel[0] + np.pi) / (2 * np.pi))
    hit = np.nonzero(rel >= np.pi / 2)[0]
    if not len(hit):
        raise ConfigurationError("the clean packet never passes the vacancy within the time grid")
    k = int(hit[0])
    wc = downstream_weight(clean_model, clean.evolution.populations[k], a_v, direction)
    wd = downstream_weight(clean_model, defect.evolution.populations[k], a_v, direction)
    return float(wd / wc), k


def edge_branch(strip, energy, side="left", n_k=4001, depth=3, min_weight=0.5):
    """(k, dE/dk, band) of the strip state at ``energy`` localised on ``side``.

    dE/dk is the group velocity along +y in sites per unit time.
    """
    ks = np.linspace(-np.pi, np.pi, n_k)
    w, u = np.linalg.eigh(strip_bloch(strip, ks))
    cols = slice(0, depth) if side == "left" else slice(strip.l_x - depth, strip.l_x)
    wt = (np.abs(u[:, cols, :]) ** 2).sum(axis=1)
    for b in range(strip.l_x):
        for i in range(n_k - 1):
            if wt[i, b] > min_weight and (w[i, b] - energy) * (w[i + 1, b] - energy) <= 0:
                return float(ks[i]), float((w[i + 1, b] - w[i, b]) / (ks[i + 1] - ks[i])), b
    raise ConfigurationError(f"no {side} edge branch crosses energy {energy}")


def bloch_edge_packet(lattice, strip, k0, band, y0, width):
    """Gaussian-enveloped strip eigenstate u_band(k0) exp(i k0 y) on a finite lattice."""
    nx, ny = lattice.meta["nx"], lattice.meta["ny"]
    if nx != strip.l_x:
        raise ConfigurationError("the strip width must match the lattice")
    _, u = np.linalg.eigh(strip_bloch(strip, np.array([k0]))[0])
    y = np.arange(ny)
    env = np.exp(1j * k0 * y - (y - y0) ** 2 / (2 * width ** 2))
    amp = (env[:, None] * u[None, :, band]).ravel()
    basis = SectorBasis.fixed(lattice.n_sites, 1)
    psi = np.zeros(basis.dim, dtype=complex)
    psi[basis.indices([1 << i for i in range(lattice.n_sites)])] = amp
    return StateVector(basis, psi / np.linalg.norm(psi))
