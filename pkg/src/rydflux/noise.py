"""Phase noise, Doppler disorder, Lindblad evolution and jump trajectories.

Phase noise is a Wiener process per path with diffusion constant
``PHASE_DIFFUSION_PER_GAMMA * gamma``; the constant is the one for which a
single resonantly driven atom damps like the master equation with
gamma L[S_z], S_z = sum_i sigma_z^i (no factor 1/2), and is checked against
that solution in the test suite.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize_scalar

from . import _kernels as K
from .basis import SectorBasis, popcount
from .dynamics import (STEPS_PER_PERIOD, FullProblem, _observe, _uniform, choose_basis, fmt, grid_step,
                       path_index)
from .errors import ConfigurationError

# <sigma_z sigma_z> dephasing at rate gamma damps a coherence at 2 gamma; a
# drive phase diffusing as <phi^2> = D t damps it at D / 2.
PHASE_DIFFUSION_PER_GAMMA = 4.0


@dataclass
class NoiseRealization:
    """Phase paths on the integrator grid and static Doppler offsets.

    ``phases[p, n]`` is the phase of path ``p`` during step ``n``; every path
    starts at zero.  ``paths[d]`` names the path driving drive term ``d``.
    """

    phases: np.ndarray
    paths: np.ndarray
    step: float
    doppler: np.ndarray | None
    mode: str
    seed: object = None


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_phase_noise(gamma, mode, grid, drive, seed=None, doppler=None):
    """Wiener phase paths for the drive terms of ``drive``.

    ``grid = (step, n_steps)``.  One path is shared globally, one per color
    or one per (atom, color) term depending on ``mode``.
    """
    if gamma < 0:
        raise ConfigurationError("gamma must be non-negative")
    step, n_steps = grid
    paths = path_index(drive, mode)
    n_paths = int(paths.max()) + 1 if len(paths) else 1
    phases = np.zeros((n_paths, max(int(n_steps), 1)))
    if gamma > 0 and n_steps > 1:
        rng = _rng(seed)
        sd = math.sqrt(PHASE_DIFFUSION_PER_GAMMA * gamma * step)
        inc = rng.normal(0.0, sd, size=(n_paths, n_steps - 1))
        phases[:, 1:] = np.cumsum(inc, axis=1)
    return NoiseRealization(phases, paths, float(step), doppler, mode, seed)


def sample_doppler(delta_t, n_atoms, seed=None):
    """Static per-atom detuning offsets, i.i.d. normal with standard deviation ``delta_t``."""
    if delta_t < 0:
        raise ConfigurationError("Doppler width must be non-negative")
    if delta_t == 0:
        return np.zeros(n_atoms)
    return _rng(seed).normal(0.0, delta_t, size=n_atoms)


def doppler_scaling_diagnostics(j, delta_t):
    """Two-site eigenvalues, effective dephasing rate, localization length and coherence time."""
    j = abs(j)
    if j == 0:
        raise ConfigurationError("hopping must be nonzero")
    e = math.sqrt(j * j + delta_t * delta_t)
    gamma_eff = delta_t ** 2 / j
    xi = math.inf if delta_t == 0 else j ** 2 / delta_t ** 2
    return {
        "two_site_eigenvalues": (-e, e),
        "two_site_shift": e - j,
        "beat_shift": delta_t ** 2 / (2 * j),
        "gamma_eff": gamma_eff,
        "localization_length": xi,
        "coherence_time": xi / j,
    }


# --------------------------------------------------------------------------
# master equation


@dataclass
class OpenSystemResult:
    times: np.ndarray
    populations: np.ndarray
    excitation_distribution: np.ndarray
    trace: np.ndarray
    basis: SectorBasis
    observables: dict = field(default_factory=dict)
    stderr: dict = field(default_factory=dict)
    rho_final: np.ndarray | None = None
    runs: list = field(default_factory=list)
    outcomes: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def com(self, coords):
        return self.populations @ np.asarray(coords, dtype=float)

    def write_csv(self, path):
        """time, then mean and stderr columns per observable."""
        cols = {}
        for i in range(self.populations.shape[1]):
            cols[f"P{i}_mean"] = self.populations[:, i]
            cols[f"P{i}_stderr"] = self.stderr.get("populations", np.zeros_like(self.populations))[:, i]
        for k, v in self.observables.items():
            cols[f"{k}_mean"] = v
            cols[f"{k}_stderr"] = self.stderr.get(k, np.zeros_like(v))
        names = list(cols)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_us"] + names)
            for k, t in enumerate(self.times):
                w.writerow([fmt(t)] + [fmt(cols[n][k]) for n in names])

    def write_runs_csv(self, path):
        """Per-run audit log: run id, seed, jump count, final configuration bitstring."""
        n = self.basis.n_sites
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "seed", "jumps", "final_configuration"])
            for r in self.runs:
                w.writerow([r["run"], r["seed"], r["jumps"], format(int(r["final"]), f"0{n}b")[::-1]])


def sz_values(basis):
    """Eigenvalues of S_z = sum_i sigma_z^i over the active sites, per configuration."""
    return 2.0 * basis.excitation_number() - len(basis.active)


def lindblad_sz(rho, basis):
    """L[S_z] rho with dense matrices."""
    sz = np.diag(sz_values(basis)).astype(complex)
    return sz @ rho @ sz - 0.5 * (sz @ sz @ rho + rho @ sz @ sz)


def sz_commutator(h, basis):
    sz = np.diag(sz_values(basis)).astype(complex)
    return sz @ h - h @ sz


def _check_rho(rho0, dim):
    rho = np.array(rho0, dtype=complex)
    if rho.shape != (dim, dim):
        raise ConfigurationError("density matrix does not match the basis")
    if np.max(np.abs(rho - rho.conj().T)) > 1e-12:
        raise ConfigurationError("density matrix is not Hermitian")
    if abs(np.trace(rho).real - 1.0) > 1e-9:
        raise ConfigurationError("density matrix must have unit trace")
    if np.linalg.eigvalsh(rho).min() < -1e-10:
        raise ConfigurationError("density matrix is not positive semidefinite")
    return rho


def density_from_sites(basis, sites):
    psi = basis.basis_state(sites)
    return np.outer(psi, psi.conj())


def _record_rho(rho, occ, nmax):
    p = np.real(np.diag(rho))
    tr = float(p.sum())
    pops = occ.T.astype(float) @ p / tr
    dist = np.bincount(occ.sum(axis=1), weights=p / tr, minlength=nmax + 1)[: nmax + 1]
    return pops, dist, tr


def master_equation_evolve(system, rho0, times, dephasing=0.0, decay=0.0, h=None, max_dim=256,
                           per_period=STEPS_PER_PERIOD, positivity_tol=1e-6, observers=None):
    """Lindblad evolution with gamma L[S_z] dephasing and per-atom decay.

    ``system`` is either a FullProblem (time-dependent exact Hamiltonian,
    integrated with RK4 on the density matrix) or a pair ``(H, basis)`` with a
    static Hamiltonian matrix (propagated with the exponential of the
    Liouvillian).  Decay needs a basis closed under removing excitations.
    """
    times, dt = _uniform(times)
    if isinstance(system, FullProblem):
        basis = system.basis
    else:
        H, basis = system
        H = np.asarray(H.toarray() if hasattr(H, "toarray") else H, dtype=complex)
    if basis.dim > max_dim:
        raise ConfigurationError(f"density-matrix dimension {basis.dim} exceeds {max_dim}")
    rho = _check_rho(rho0, basis.dim)
    occ = basis.occupation()
    nexc = occ.sum(axis=1).astype(float)
    nmax = int(nexc.max())
    sz = sz_values(basis).astype(float)
    decay_sites = np.array(basis.active, dtype=np.int64)
    T = len(times)
    pops = np.zeros((T, basis.n_sites))
    dist = np.zeros((T, nmax + 1))
    trace = np.zeros(T)
    obs = {}

    def record(k):
        pops[k], dist[k], trace[k] = _record_rho(rho, occ, nmax)
        if observers:
            for name, fn in observers.items():
                obs.setdefault(name, np.zeros(T))[k] = fn(rho, basis)

    record(0)
    meta = {"dim": basis.dim}
    if isinstance(system, FullProblem):
        prob = system
        n0 = int(round(float(np.real(np.diag(rho)) @ nexc)))
        hh, nsub = grid_step(prob, times, n0, h, "rk4", per_period)
        diag = np.ascontiguousarray(prob.diag.real)
        for k in range(1, T):
            K.lindblad_rk4(rho, times[0] + (k - 1) * dt, hh, nsub, diag, prob.sites, basis.configs, prob.flip,
                           prob.full, basis.n_sites, prob.drive.site, prob.drive.det, prob.drive.amp, sz,
                           float(dephasing), float(decay), nexc, decay_sites)
            _check_positivity(rho, positivity_tol)
            record(k)
        meta.update(step=hh, steps=nsub * (T - 1))
    else:
        L = liouvillian(H, basis, dephasing, decay)
        prop = sla.expm(L * dt) if T > 1 else None
        v = rho.reshape(-1)
        for k in range(1, T):
            v = prop @ v
            rho = v.reshape(basis.dim, basis.dim)
            record(k)
    meta["trace_drift"] = float(np.max(np.abs(trace - 1.0)))
    return OpenSystemResult(times, pops, dist, trace, basis, obs, {}, rho.copy(), meta=meta)


def _check_positivity(rho, tol):
    w = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))
    if w.min() < -tol:
        raise ConfigurationError(f"density matrix lost positivity ({w.min():.2e}); reduce the step")


def liouvillian(H, basis, dephasing=0.0, decay=0.0):
    """Row-major superoperator: vec(A rho B) = kron(A, B^T) vec(rho)."""
    n = basis.dim
    eye = np.eye(n)
    L = -1j * (np.kron(H, eye) - np.kron(eye, H.T))
    if dephasing:
        sz = sz_values(basis).astype(float)
        d = sz[:, None] - sz[None, :]
        L = L - 0.5 * dephasing * np.diag((d * d).reshape(-1))
    if decay:
        occ = basis.occupation()
        for i in basis.active:
            low = np.zeros((n, n))
            src = np.nonzero(occ[:, i])[0]
            dst = basis.indices(basis.configs[src] ^ (1 << i))
            ok = dst >= 0
            low[dst[ok], src[ok]] = 1.0
            nn = low.T @ low
            L = L + decay * (np.kron(low, low) - 0.5 * np.kron(nn, eye) - 0.5 * np.kron(eye, nn.T))
    return L


# --------------------------------------------------------------------------
# trajectories


@dataclass
class TrajectorySetup:
    """Everything a worker needs to run one trajectory."""

    geometry: object
    config: object
    law: object
    sites0: tuple
    times: np.ndarray
    basis: SectorBasis
    gamma: float
    mode: str
    doppler_sigma: float
    decay: float
    h: float
    nsub: int
    drive_override: object = None
    diag_override: object = None


def run_seeds(seed, n_runs):
    """Independent child seeds derived from (seed, run index)."""
    return [np.random.default_rng(np.random.SeedSequence([int(seed), k])) for k in range(n_runs)]


def _problem(setup, doppler):
    if setup.drive_override is not None:
        drive = setup.drive_override
        if doppler is not None:
            from dataclasses import replace
            drive = replace(drive, det=drive.det + doppler[drive.site])
        return FullProblem.from_drive(setup.basis, setup.diag_override, drive)
    return FullProblem.build(setup.geometry, setup.config, setup.law, setup.basis, doppler)


def run_trajectory(setup, k, seed):
    """One realization: Doppler offsets, phase paths, decay jumps and per-time measurements.

    Returns (populations, excitation distribution, measured configurations,
    jump count).
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), k]))
    basis = setup.basis
    n_atoms = basis.n_sites
    doppler = sample_doppler(setup.doppler_sigma, n_atoms, rng) if setup.doppler_sigma > 0 else None
    prob = _problem(setup, doppler)
    T = len(setup.times)
    nsteps = setup.nsub * (T - 1)
    noise = sample_phase_noise(setup.gamma, setup.mode, (setup.h, nsteps), prob.drive, rng, doppler)
    noisy = setup.gamma > 0
    if setup.decay:
        prob = prob.with_decay(setup.decay)
    diag = prob.diag
    psi = basis.basis_state(setup.sites0)
    occ = prob.occ
    nmax = int(occ.sum(axis=1).max())
    pops = np.zeros((T, n_atoms))
    dist = np.zeros((T, nmax + 1))
    outcomes = np.zeros(T, dtype=np.int64)
    threshold = rng.random() if setup.decay else -1.0
    jumps = 0
    dt = setup.times[1] - setup.times[0] if T > 1 else 0.0

    def measure(kk):
        p, d, nrm = _observe(basis, psi, occ, nmax)
        pops[kk], dist[kk] = p, d
        prob_c = np.abs(psi) ** 2 / nrm
        outcomes[kk] = basis.configs[min(int(np.searchsorted(np.cumsum(prob_c), rng.random())), basis.dim - 1)]

    measure(0)
    for kk in range(1, T):
        t0 = setup.times[0] + (kk - 1) * dt
        done = 0
        while done < setup.nsub:
            step0 = (kk - 1) * setup.nsub + done
            if setup.decay:
                n = K.split_segment(psi, t0 + done * setup.h, setup.h, setup.nsub - done, step0, diag,
                                    prob.sites, basis.configs, prob.flip, prob.full, n_atoms, prob.drive.site,
                                    prob.drive.det, prob.drive.amp, noise.paths, noise.phases, noisy, threshold)
                done += n
                if K.norm2(psi) < threshold:
                    psi = _jump(psi, basis, occ, rng)
                    jumps += 1
                    threshold = rng.random()
            else:
                K.split_segment(psi, t0, setup.h, setup.nsub, step0, diag, prob.sites, basis.configs, prob.flip,
                                prob.full, n_atoms, prob.drive.site, prob.drive.det, prob.drive.amp, noise.paths,
                                noise.phases, noisy, -1.0)
                done = setup.nsub
        measure(kk)
    return pops, dist, outcomes, jumps


def _jump(psi, basis, occ, rng):
    p = np.abs(psi) ** 2
    w = occ.T.astype(float) @ p
    if w.sum() <= 0:
        raise ConfigurationError("decay jump requested from the ground state")
    i = int(np.searchsorted(np.cumsum(w / w.sum()), rng.random()))
    i = min(i, basis.n_sites - 1)
    src = np.nonzero(occ[:, i])[0]
    dst = basis.indices(basis.configs[src] ^ (1 << i))
    out = np.zeros_like(psi)
    ok = dst >= 0
    out[dst[ok]] = psi[src[ok]]
    return out / np.linalg.norm(out)


def _worker(args):
    setup, seed, ks = args
    return [(k,) + run_trajectory(setup, k, seed) for k in ks]


def trajectory_ensemble(geometry, config, law, sites0, times, noise_spec, n_runs, seed=None,
                        basis_mode="full", band_k=2, h=None, per_period=STEPS_PER_PERIOD, jobs=1,
                        drive_override=None, diag_override=None, basis=None):
    """Monte Carlo average of exact evolutions over noise realizations and decay jumps.

    Each run draws Doppler offsets, phase paths and jump times from its own
    stream seeded by (seed, run index), so results do not depend on ``jobs``.
    """
    if n_runs < 1:
        raise ConfigurationError("n_runs must be at least 1")
    seed = noise_spec.rng_seed if seed is None else seed
    times, _ = _uniform(times)
    n0 = len(sites0)
    if basis is None:
        basis = choose_basis(geometry, basis_mode, n0, band_k)
    if drive_override is not None:
        ref = FullProblem.from_drive(basis, diag_override, drive_override)
    else:
        ref = FullProblem.build(geometry, config, law, basis)
    hh, nsub = grid_step(ref, times, n0, h, "split", per_period)
    setup = TrajectorySetup(geometry, config, law, tuple(sites0), times, basis, noise_spec.phase_noise_rate,
                            noise_spec.correlation, noise_spec.doppler_sigma, noise_spec.decay_rate, hh, nsub,
                            drive_override, diag_override)
    chunks = [list(range(k, n_runs, max(jobs, 1))) for k in range(max(jobs, 1))]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(_worker, [(setup, seed, c) for c in chunks]))
    else:
        parts = [_worker((setup, seed, chunks[0]))]
    rows = sorted((r for part in parts for r in part), key=lambda r: r[0])
    pops = np.stack([r[1] for r in rows])
    dist = np.stack([r[2] for r in rows])
    outs = np.stack([r[3] for r in rows])
    runs = [{"run": r[0], "seed": f"{seed}:{r[0]}", "jumps": r[4], "final": int(r[3][-1])} for r in rows]
    mean = pops.mean(axis=0)
    err = pops.std(axis=0, ddof=1) / math.sqrt(n_runs) if n_runs > 1 else np.zeros_like(mean)
    res = OpenSystemResult(times, mean, dist.mean(axis=0), np.ones(len(times)), basis, {},
                           {"populations": err}, None, runs, outs,
                           {"n_runs": n_runs, "step": hh, "seed": seed})
    res.meta["per_run_populations"] = pops
    return res


# --------------------------------------------------------------------------
# post-selection and fits


@dataclass
class PostSelectionEstimate:
    times: np.ndarray
    success: np.ndarray
    success_err: np.ndarray
    conditional: np.ndarray
    conditional_err: np.ndarray
    unconditional: np.ndarray
    unconditional_err: np.ndarray
    n_runs: int
    n_success: np.ndarray


def post_select(result, observable, n_exc):
    """Condition on measured configurations that keep ``n_exc`` excitations.

    ``observable`` maps an array of configurations to values; the estimate is
    NaN wherever no run succeeded.
    """
    outs = result.outcomes
    if outs is None:
        raise ConfigurationError("runs carry no measurement outcomes")
    n_runs = outs.shape[0]
    vals = np.asarray(observable(outs), dtype=float)
    ok = popcount(outs) == n_exc
    ns = ok.sum(axis=0)
    p = ns / n_runs
    perr = np.sqrt(p * (1 - p) / n_runs)
    cond = np.full(outs.shape[1], np.nan)
    cerr = np.full(outs.shape[1], np.nan)
    for k in range(outs.shape[1]):
        if ns[k]:
            v = vals[ok[:, k], k]
            cond[k] = v.mean()
            cerr[k] = v.std(ddof=1) / math.sqrt(ns[k]) if ns[k] > 1 else np.nan
    unc = vals.mean(axis=0)
    uerr = vals.std(axis=0, ddof=1) / math.sqrt(n_runs) if n_runs > 1 else np.zeros_like(unc)
    return PostSelectionEstimate(result.times, p, perr, cond, cerr, unc, uerr, n_runs, ns)


def position_observable(coords):
    """Configuration -> sum of occupied coordinates."""
    coords = np.asarray(coords, dtype=float)

    def f(configs):
        c = np.asarray(configs, dtype=np.int64)
        out = np.zeros(c.shape)
        for i, x in enumerate(coords):
            out = out + x * ((c >> i) & 1)
        return out

    return f


def envelope_damping_time(times, noisy, clean, center, t_max=1e6):
    """Fit noisy - center ~ exp(-t / tau) (clean - center) by least squares in tau.

    Returns ``inf`` when the best fit is no damping at all.
    """
    t = np.asarray(times, dtype=float)
    a = np.asarray(noisy, dtype=float) - center
    b = np.asarray(clean, dtype=float) - center
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]

    def cost(lg):
        return float(np.sum((a - np.exp(-t / math.exp(lg))[:, None] * b) ** 2))

    lo, hi = math.log(1e-4 * max(t[-1], 1e-12)), math.log(t_max)
    r = minimize_scalar(cost, bounds=(lo, hi), method="bounded", options={"xatol": 1e-6})
    if cost(hi) <= r.fun:
        return math.inf
    return math.exp(r.x)


def first_crossing(times, values, level):
    """First time ``values`` drops to ``level`` (linear interpolation), or NaN."""
    v = np.asarray(values, dtype=float)
    idx = np.nonzero(v <= level)[0]
    if not len(idx):
        return math.nan
    k = idx[0]
    if k == 0:
        return float(times[0])
    t0, t1, v0, v1 = times[k - 1], times[k], v[k - 1], v[k]
    return float(t0 + (level - v0) * (t1 - t0) / (v1 - v0))


def ramsey_fringes(delta_t, times, n_runs, seed=0, ramsey_detuning=0.0):
    """Single-qubit Ramsey sequence with ideal pi/2 pulses and static Doppler detunings.

    Returns (fringe, contrast, contrast_stderr): the excited population for
    an in-phase second pulse and the coherence magnitude obtained from the
    in-phase and quadrature sequences.
    """
    times = np.asarray(times, dtype=float)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    det = sample_doppler(delta_t, n_runs, rng)
    s = 1 / math.sqrt(2)

    def pulse(phase):
        e = np.exp(1j * phase)
        return np.array([[s, -1j * s * np.conj(e)], [-1j * s * e, s]])

    g = np.array([1.0, 0.0], dtype=complex)
    after = pulse(0.0) @ g
    px = np.zeros((n_runs, len(times)))
    py = np.zeros((n_runs, len(times)))
    for r, d in enumerate(det):
        ph = np.exp(-1j * (ramsey_detuning + d) * times)
        for phase, out in ((0.0, px), (np.pi / 2, py)):
            u = pulse(phase)
            amp_r = u[1, 0] * after[0] + u[1, 1] * after[1] * ph
            out[r] = np.abs(amp_r) ** 2
    fringe = px.mean(axis=0)
    x = 2 * px - 1
    y = 2 * py - 1
    cx, cy = x.mean(axis=0), y.mean(axis=0)
    contrast = np.hypot(cx, cy)
    err = np.sqrt(x.var(axis=0, ddof=1) + y.var(axis=0, ddof=1)) / math.sqrt(n_runs)
    return fringe, contrast, err


def bootstrap_damping_time(times, per_run, clean, center, n_boot=200, seed=0):
    """Fitted damping time of the run average and its bootstrap standard error.

    ``per_run`` has shape (runs, times) or (runs, times, observables).
    """
    per_run = np.asarray(per_run, dtype=float)
    tau = envelope_damping_time(times, per_run.mean(axis=0), clean, center)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    n = per_run.shape[0]
    draws = []
    for _ in range(n_boot):
        idx = rng.integers(0, n, n)
        draws.append(envelope_damping_time(times, per_run[idx].mean(axis=0), clean, center))
    draws = np.array(draws)
    finite = draws[np.isfinite(draws)]
    err = float(finite.std(ddof=1)) if len(finite) > 1 else math.inf
    return tau, err, draws
