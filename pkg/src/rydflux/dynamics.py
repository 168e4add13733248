"""Exact and effective time evolution.

``evolve_full`` integrates the driven many-atom Schrodinger equation in the
lab rotating frame where every drive term keeps its exp(i Delta t) phase.
The reference scheme is a fourth-order composition of Strang steps that
treats the diagonal exactly and the drive as commuting single-site rotations,
so the norm is conserved to rounding.  Classical RK4 is kept as an
alternative and scipy's DOP853 as an independent cross-check.  ``evolve_effective`` propagates
the time-independent hard-core boson model of a fixed excitation sector.
"""

from __future__ import annotations

import csv
import math
import time as _time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy import sparse
from scipy.integrate import solve_ivp
from scipy.sparse.linalg import expm_multiply

from . import _kernels as K
from .basis import SectorBasis
from .errors import ConfigurationError, ConvergenceError
from .model import interaction_matrix

STEPS_PER_PERIOD = 40


@dataclass
class StateVector:
    basis: SectorBasis
    amplitudes: np.ndarray

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=complex)
        if self.amplitudes.shape != (self.basis.dim,):
            raise ConfigurationError("amplitude vector does not match the basis")

    @property
    def norm(self):
        return float(np.linalg.norm(self.amplitudes))

    @classmethod
    def localized(cls, basis, sites):
        return cls(basis, basis.basis_state(sites))


@dataclass
class EvolutionResult:
    """Observables on a time grid.  Populations are those of the normalised state."""

    times: np.ndarray
    populations: np.ndarray
    excitation_distribution: np.ndarray
    norms: np.ndarray
    basis: SectorBasis
    final_state: np.ndarray
    observables: dict = field(default_factory=dict)
    snapshots: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def com(self, coords):
        """<x> = sum_i x_i P_i."""
        return self.populations @ np.asarray(coords, dtype=float)

    def region_com(self, coords, region):
        """Centre of mass restricted to ``region`` and normalised by the population inside it."""
        idx = np.asarray(sorted(region))
        x = np.asarray(coords, dtype=float)[idx]
        p = self.populations[:, idx]
        tot = p.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(tot > 0, (p @ x) / tot, np.nan)

    def write_csv(self, path, extra=None):
        write_table(path, self.times, evolution_columns(self, extra))


def evolution_columns(res, extra=None):
    cols = {f"P{i}": res.populations[:, i] for i in range(res.populations.shape[1])}
    for k in range(res.excitation_distribution.shape[1]):
        cols[f"N{k}"] = res.excitation_distribution[:, k]
    cols["norm"] = res.norms
    for k, v in res.observables.items():
        cols[k] = np.asarray(v)
    if extra:
        cols.update(extra)
    return cols


def fmt(x):
    return f"{float(x):.12g}"


def write_table(path, times, columns, time_label="time_us"):
    """CSV with a time column first and one column per observable."""
    names = list(columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([time_label] + names)
        for k, t in enumerate(times):
            w.writerow([fmt(t)] + [fmt(columns[n][k]) for n in names])


def _observe(basis, psi, occ, counts_max):
    p = np.abs(psi) ** 2
    nrm = p.sum()
    q = p / nrm if nrm > 0 else p
    pops = occ.T.astype(float) @ q
    nexc = occ.sum(axis=1)
    dist = np.bincount(nexc, weights=q, minlength=counts_max + 1)[: counts_max + 1]
    return pops, dist, nrm


@dataclass
class DriveArrays:
    site: np.ndarray
    det: np.ndarray
    amp: np.ndarray
    color: np.ndarray

    @property
    def n_terms(self):
        return len(self.site)


def drive_arrays(config, doppler=None):
    """Flattened drive terms; detunings include site shifts and Doppler offsets."""
    terms = config.drive_terms()
    site = np.array([t[0] for t in terms], dtype=np.int64)
    det = np.array([t[1] for t in terms], dtype=float)
    if doppler is not None and len(site):
        det = det + np.asarray(doppler, dtype=float)[site]
    amp = np.array([t[2] / 2.0 for t in terms], dtype=complex)
    color = np.array([t[3] for t in terms], dtype=np.int64)
    return DriveArrays(site, det, amp, color)


def choose_basis(geometry, mode="full", n0=None, k=2):
    act = geometry.active_sites()
    if isinstance(mode, SectorBasis):
        return mode
    if mode == "full":
        return SectorBasis.full(geometry.n_sites, act)
    if mode == "band":
        return SectorBasis.band(geometry.n_sites, n0, k, act)
    if mode == "fixed":
        return SectorBasis.fixed(geometry.n_sites, n0, act)
    if mode == "decay":
        return SectorBasis.build(geometry.n_sites, range(0, n0 + k + 1), act)
    raise ConfigurationError(f"unknown basis mode {mode!r}")


def step_size(drive, diag, dt, reach=None, per_period=STEPS_PER_PERIOD, method="split"):
    """Largest step dividing ``dt`` that resolves the fastest phase.

    The fastest rate is the largest of the drive detunings, the total Rabi
    coupling and the diagonal energies of reachable states (``reach`` mask).
    For RK4 the step also keeps h * max|diag| below 2.5 for stability.
    """
    rates = [1e-12]
    if drive.n_terms:
        rates.append(float(np.max(np.abs(drive.det))))
        rates.append(float(np.max(np.bincount(drive.site, weights=2 * np.abs(drive.amp)))))
    d = np.abs(diag)
    if d.size:
        rates.append(float(np.max(d if reach is None else d[reach])))
    wmax = max(rates)
    h = (2.0 * np.pi / wmax) / per_period
    if method == "rk4" and d.size and d.max() > 0:
        h = min(h, 2.5 / float(d.max()))
    nsub = max(1, int(math.ceil(dt / h - 1e-9)))
    return dt / nsub, nsub


def _uniform(times):
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) < 1:
        raise ConfigurationError("times must be a non-empty 1-d grid")
    if len(times) > 1:
        dt = np.diff(times)
        if np.any(dt <= 0) or np.max(np.abs(dt - dt[0])) > 1e-9 * max(dt[0], 1e-300):
            raise ConfigurationError("times must be uniformly spaced and increasing")
        return times, float(dt[0])
    return times, 0.0


@dataclass
class FullProblem:
    """Everything the compiled integrator needs, built once per configuration."""

    basis: SectorBasis
    diag: np.ndarray
    drive: DriveArrays
    flip: np.ndarray
    full: bool
    occ: np.ndarray
    sites: np.ndarray

    @classmethod
    def build(cls, geometry, config, law, basis, doppler=None, decay_rate=0.0):
        vmat = interaction_matrix(geometry, law)
        diag = basis.pair_energies(vmat).astype(complex)
        occ = basis.occupation()
        if decay_rate:
            diag = diag - 0.5j * decay_rate * occ.sum(axis=1)
        drive = drive_arrays(config, doppler)
        full = basis.dim == (1 << basis.n_sites)
        flip = np.zeros((1, 1), dtype=np.int64) if full else basis.flip_table()
        sites = np.array(sorted(set(drive.site.tolist())), dtype=np.int64)
        return cls(basis, diag, drive, flip, full, occ, sites)

    @classmethod
    def from_drive(cls, basis, diag, drive):
        """Problem with an explicit diagonal and drive (e.g. a resonant single atom)."""
        full = basis.dim == (1 << basis.n_sites)
        flip = np.zeros((1, 1), dtype=np.int64) if full else basis.flip_table()
        sites = np.array(sorted(set(drive.site.tolist())), dtype=np.int64)
        return cls(basis, np.asarray(diag, dtype=complex), drive, flip, full, basis.occupation(), sites)

    def with_decay(self, rate):
        occ = self.occ.sum(axis=1)
        return FullProblem(self.basis, self.diag.real - 0.5j * rate * occ, self.drive, self.flip, self.full,
                           self.occ, self.sites)

    def reach_mask(self, n0, extra=1):
        return self.occ.sum(axis=1) <= n0 + extra


def grid_step(problem, times, n0, h=None, method="split", per_period=STEPS_PER_PERIOD):
    """(step, substeps per output interval) used by :func:`evolve_full`."""
    times, dt = _uniform(times)
    if h is None:
        return step_size(problem.drive, problem.diag, dt if dt > 0 else 1.0, problem.reach_mask(n0),
                         per_period, method)
    if dt <= 0:
        return h, 1
    nsub = max(1, int(math.ceil(dt / h - 1e-9)))
    return dt / nsub, nsub


def path_index(drive, mode):
    """Which noise path drives each term: one global path, one per color or one per term."""
    if mode == "global":
        return np.zeros(drive.n_terms, dtype=np.int64)
    if mode == "per-color":
        return drive.color.copy()
    if mode == "per-atom":
        return np.arange(drive.n_terms, dtype=np.int64)
    raise ConfigurationError(f"unknown noise correlation {mode!r}")


def _segment(method):
    if method == "split":
        return lambda *a: K.split_segment(*a[:-1], a[-1] is not None, -1.0)
    if method == "rk4":
        return lambda *a: K.rk4_segment(*a[:-1])
    raise ConfigurationError(f"unknown integrator {method!r}")


def evolve_full(geometry, config, law, psi0, times, basis_mode="full", band_k=2, noise=None,
                decay_rate=0.0, h=None, snapshot_every=0, observers=None, leakage_tol=1e-3,
                problem=None, method="split", richardson=False, per_period=STEPS_PER_PERIOD):
    """Integrate i dpsi/dt = H(t) psi for the exact driven Hamiltonian.

    ``psi0`` is a StateVector, an amplitude vector on the chosen basis, or a
    list of initially excited sites.  ``noise`` is a NoiseRealization
    (phase paths on the integrator grid plus static detuning offsets).
    With ``decay_rate`` the no-jump non-Hermitian evolution is produced and
    the squared norm is reported in ``norms``.  A prebuilt ``problem`` must
    already carry any Doppler offsets.  ``richardson`` repeats the run at
    half the step and stores the largest population change in
    ``meta["richardson"]``.
    """
    t_start = _time.perf_counter()
    times, dt = _uniform(times)
    if isinstance(psi0, StateVector):
        basis = psi0.basis
        psi = psi0.amplitudes.copy()
        n0 = int(round(float(np.sum(np.abs(psi) ** 2 * basis.excitation_number()))))
    elif isinstance(psi0, (list, tuple)):
        n0 = len(psi0)
        basis = problem.basis if problem is not None else choose_basis(geometry, basis_mode, n0, band_k)
        psi = basis.basis_state(psi0)
    else:
        basis = basis_mode if isinstance(basis_mode, SectorBasis) else None
        if basis is None:
            raise ConfigurationError("an amplitude vector needs an explicit SectorBasis")
        psi = np.asarray(psi0, dtype=complex).copy()
        n0 = int(round(float(np.sum(np.abs(psi) ** 2 * basis.excitation_number()))))
    if abs(np.linalg.norm(psi) - 1.0) > 1e-9:
        raise ConfigurationError("initial state is not normalised")
    doppler = None if noise is None else noise.doppler
    prob = problem or FullProblem.build(geometry, config, law, basis, doppler, decay_rate)
    hh, nsub = grid_step(prob, times, n0, h, method, per_period)
    nsteps = nsub * (len(times) - 1)
    if noise is None:
        phases = np.zeros((1, max(nsteps, 1)))
        paths = np.zeros(prob.drive.n_terms, dtype=np.int64)
    else:
        if noise.phases.shape[1] < nsteps:
            raise ConfigurationError("noise realization is shorter than the integration grid")
        if abs(noise.step - hh) > 1e-12 * hh:
            raise ConfigurationError("noise realization was sampled on a different step")
        phases = np.ascontiguousarray(noise.phases)
        paths = noise.paths
    nmax = int(prob.occ.sum(axis=1).max())
    T = len(times)
    pops = np.zeros((T, basis.n_sites))
    dist = np.zeros((T, nmax + 1))
    norms = np.zeros(T)
    obs = {}
    snaps = []

    def record(k):
        pops[k], dist[k], norms[k] = _observe(basis, psi, prob.occ, nmax)
        if observers:
            for name, fn in observers.items():
                obs.setdefault(name, np.zeros(T))[k] = fn(psi, basis)
        if snapshot_every and k % snapshot_every == 0:
            snaps.append((times[k], psi.copy()))

    if richardson and noise is not None:
        raise ConfigurationError("the Richardson check needs a noise-free run")
    psi_start = psi.copy()
    seg = _segment(method)
    record(0)
    for k in range(1, T):
        seg(psi, times[0] + (k - 1) * dt, hh, nsub, (k - 1) * nsub, prob.diag, prob.sites,
            basis.configs, prob.flip, prob.full, basis.n_sites, prob.drive.site,
            prob.drive.det, prob.drive.amp, paths, phases, noise)
        record(k)
    meta = {"step": hh, "steps": nsteps, "method": method, "n0": n0}
    if richardson:
        fine = psi_start
        worst = 0.0
        for k in range(1, T):
            seg(fine, times[0] + (k - 1) * dt, hh / 2, 2 * nsub, 0, prob.diag, prob.sites,
                basis.configs, prob.flip, prob.full, basis.n_sites, prob.drive.site,
                prob.drive.det, prob.drive.amp, paths, np.zeros((1, 2 * nsub)), None)
            p, _, _ = _observe(basis, fine, prob.occ, nmax)
            worst = max(worst, float(np.max(np.abs(p - pops[k]))))
        meta["richardson"] = worst
    meta["runtime_s"] = _time.perf_counter() - t_start
    if not decay_rate:
        drift = float(np.max(np.abs(norms - 1.0)))
        meta["norm_drift"] = drift
    if basis_mode == "band" and isinstance(psi0, (list, tuple)):
        edge = [c for c in (n0 - band_k, n0 + band_k) if 0 <= c < dist.shape[1]]
        leak = float(dist[:, edge].sum(axis=1).max()) if edge else 0.0
        meta["band_edge_weight"] = leak
        if leak > leakage_tol:
            warnings.warn(f"band truncation leakage {leak:.2e} above {leakage_tol}; widen the band")
    return EvolutionResult(times, pops, dist, norms, basis, psi.copy(), obs, snaps, meta)


def evolve_full_adaptive(geometry, config, law, sites0, times, basis_mode="full", band_k=2, rtol=1e-10,
                         atol=1e-12):
    """Cross-check integrator: scipy's embedded DOP853 with tight tolerances."""
    times, _ = _uniform(times)
    n0 = len(sites0)
    basis = choose_basis(geometry, basis_mode, n0, band_k)
    prob = FullProblem.build(geometry, config, law, basis)
    psi0 = basis.basis_state(sites0)
    zero = np.zeros(1)
    out = np.empty(basis.dim, dtype=complex)

    def rhs(t, y):
        psi = y[: basis.dim] + 1j * y[basis.dim:]
        c = K.site_coefficients(t, basis.n_sites, prob.drive.site, prob.drive.det, prob.drive.amp,
                                np.zeros(prob.drive.n_terms, dtype=np.int64), zero)
        K._rhs(psi, out, prob.diag, c, prob.sites, basis.configs, prob.flip, prob.full)
        return np.concatenate([out.real, out.imag])

    sol = solve_ivp(rhs, (times[0], times[-1]), np.concatenate([psi0.real, psi0.imag]), method="DOP853",
                    t_eval=times, rtol=rtol, atol=atol)
    if not sol.success:
        raise ConvergenceError(f"adaptive integrator failed: {sol.message}")
    psis = sol.y[: basis.dim].T + 1j * sol.y[basis.dim:].T
    nmax = int(prob.occ.sum(axis=1).max())
    T = len(times)
    pops = np.zeros((T, basis.n_sites))
    dist = np.zeros((T, nmax + 1))
    norms = np.zeros(T)
    for k in range(T):
        pops[k], dist[k], norms[k] = _observe(basis, psis[k], prob.occ, nmax)
    return EvolutionResult(times, pops, dist, norms, basis, psis[-1], meta={"nfev": sol.nfev})


def sector_hamiltonian(model, basis, decay_rate=0.0):
    """Sparse hard-core boson Hamiltonian of ``model`` on ``basis`` (hops conserve the number)."""
    J = model.hopping
    n = model.n_sites
    occ = basis.occupation()
    diag = occ.astype(float) @ model.potential + basis.pair_energies(model.density_interaction)
    diag = diag.astype(complex)
    if decay_rate:
        diag = diag - 0.5j * decay_rate * occ.sum(axis=1)
    rows, cols, vals = [np.arange(basis.dim)], [np.arange(basis.dim)], [diag]
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j and J[i, j] != 0]
    for i, j in pairs:
        # hop j -> i: source has j occupied and i empty
        src = np.nonzero(occ[:, j] & ~occ[:, i])[0]
        if not len(src):
            continue
        dst = basis.indices((basis.configs[src] ^ (1 << j)) | (1 << i))
        ok = dst >= 0
        rows.append(dst[ok])
        cols.append(src[ok])
        vals.append(np.full(ok.sum(), J[i, j], dtype=complex))
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(basis.dim, basis.dim))


def evolve_effective(model, psi0, times, n_exc=None, decay_rate=0.0, max_dim=200000, dense_limit=3000,
                     observers=None, snapshot_every=0):
    """Evolve under the effective model in a fixed excitation sector.

    ``psi0`` is a list of excited sites, a StateVector or an amplitude vector
    (then ``n_exc`` fixes the sector).  Small sectors are propagated through
    a full eigendecomposition, larger ones with ``expm_multiply``.
    """
    times, _ = _uniform(times)
    act = [i for i in range(model.n_sites) if model.active[i]]
    if isinstance(psi0, StateVector):
        basis, psi = psi0.basis, psi0.amplitudes.copy()
    elif isinstance(psi0, (list, tuple)):
        basis = SectorBasis.fixed(model.n_sites, len(psi0), act)
        psi = basis.basis_state(psi0)
    else:
        if n_exc is None:
            raise ConfigurationError("n_exc is needed with an amplitude vector")
        basis = SectorBasis.fixed(model.n_sites, n_exc, act)
        psi = np.asarray(psi0, dtype=complex).copy()
    if basis.dim > max_dim:
        raise ConfigurationError(f"sector dimension {basis.dim} exceeds the limit {max_dim}")
    H = sector_hamiltonian(model, basis, decay_rate)
    occ = basis.occupation()
    nmax = int(occ.sum(axis=1).max())
    T = len(times)
    pops = np.zeros((T, basis.n_sites))
    dist = np.zeros((T, nmax + 1))
    norms = np.zeros(T)
    obs = {}
    snaps = []
    t0 = times[0]
    if basis.dim <= dense_limit:
        Hd = H.toarray()
        if decay_rate:
            # the decay term is a constant inside a fixed sector
            g = -0.5j * decay_rate * occ.sum(axis=1)[0]
            w, v = sla.eigh(Hd - g * np.eye(basis.dim))
            w = w + g
        else:
            w, v = sla.eigh(Hd)
        c0 = v.conj().T @ psi
        states = (v @ (np.exp(-1j * np.outer(w, times - t0)) * c0[:, None])).T
    else:
        states = expm_multiply(-1j * H, psi, start=t0, stop=times[-1], num=T, endpoint=True) \
            if T > 1 else psi[None, :]
    for k in range(T):
        pops[k], dist[k], norms[k] = _observe(basis, states[k], occ, nmax)
        if observers:
            for name, fn in observers.items():
                obs.setdefault(name, np.zeros(T))[k] = fn(states[k], basis)
        if snapshot_every and k % snapshot_every == 0:
            snaps.append((times[k], states[k].copy()))
    return EvolutionResult(times, pops, dist, norms, basis, states[-1].copy(), obs, snaps,
                           {"dim": basis.dim})


def compare_runs(a, b):
    """Population discrepancies between two runs on the same grid."""
    if len(a.times) != len(b.times) or not np.allclose(a.times, b.times, rtol=0, atol=1e-12):
        raise ConfigurationError("runs are on different time grids")
    if a.populations.shape != b.populations.shape:
        raise ConfigurationError("runs carry different observables")
    l1 = np.abs(a.populations - b.populations).sum(axis=1)
    per = {f"P{i}": float(np.max(np.abs(a.populations[:, i] - b.populations[:, i])))
           for i in range(a.populations.shape[1])}
    for k in set(a.observables) & set(b.observables):
        per[k] = float(np.max(np.abs(np.asarray(a.observables[k]) - np.asarray(b.observables[k]))))
    return {"max_l1": float(l1.max()), "mean_l1": float(l1.mean()), "per_observable": per}


def two_body_correlator(state, i, j, basis=None):
    """<n_i n_j> of a state (StateVector, or amplitudes plus ``basis``)."""
    if isinstance(state, StateVector):
        basis, amps = state.basis, state.amplitudes
    else:
        amps = np.asarray(state)
    if i == j:
        warnings.warn("pair correlator on a single site is zero for hard-core excitations")
        return 0.0
    p = np.abs(amps) ** 2
    p = p / p.sum()
    mask = ((basis.configs >> i) & 1) & ((basis.configs >> j) & 1)
    return float(p[mask.astype(bool)].sum())


def pair_correlation_matrix(state, basis):
    p = np.abs(state) ** 2
    p = p / p.sum()
    occ = basis.occupation().astype(float)
    g = np.einsum("s,si,sj->ij", p, occ, occ)
    np.fill_diagonal(g, 0.0)
    return g


def peak_times(times, populations, level=0.5):
    """First local maximum above ``level`` in each population column (NaN if none)."""
    t = np.asarray(times, dtype=float)
    p = np.asarray(populations, dtype=float)
    out = np.full(p.shape[1], np.nan)
    for i in range(p.shape[1]):
        c = p[:, i]
        for k in range(1, len(c) - 1):
            if c[k] > level and c[k] >= c[k - 1] and c[k] >= c[k + 1]:
                out[i] = t[k]
                break
    return out


def arrival_order(times, populations, start, level=0.5):
    """Sites in the order the excitation first peaks on them, ``start`` first.

    Sites that never peak above ``level`` are left out.
    """
    pk = peak_times(times, populations, level)
    others = [i for i in np.argsort(pk, kind="stable") if i != start and np.isfinite(pk[i])]
    return [int(start)] + [int(i) for i in others]


def chiral_period(model, start=0, t_max=None, samples=20001, level=0.5):
    """Return time of a single excitation to ``start`` under the effective model.

    The first local maximum of P_start above ``level`` after it has dropped
    below ``level``.
    """
    H = model.single_particle_hamiltonian()
    w, u = np.linalg.eigh(H)
    scale = float(np.abs(H - np.diag(np.diag(H))).max())
    if scale == 0:
        raise ConfigurationError("model has no hopping")
    t_max = 40 * math.pi / scale if t_max is None else t_max
    t = np.linspace(0.0, t_max, samples)
    amp = (u[start].conj() * u[start])[None, :] * np.exp(-1j * np.outer(t, w))
    p = np.abs(amp.sum(axis=1)) ** 2
    low = np.nonzero(p < level)[0]
    if not len(low):
        raise ConvergenceError("excitation never leaves the starting site")
    for k in range(low[0] + 1, samples - 1):
        if p[k] > level and p[k] >= p[k - 1] and p[k] >= p[k + 1]:
            return float(t[k])
    raise ConvergenceError("no return within the time window")
