"""Compiled inner loops for the time-dependent Schrodinger equation.

The Hamiltonian acting on a bit-encoded basis is

    H(t) = diag + sum_i [c_i(t) sigma^+_i + conj(c_i(t)) sigma^-_i]

with c_i(t) = sum_d amp_d exp(i (det_d t + phase[path_d])) over the drive
terms d acting on site i.  ``diag`` may be complex (no-jump decay).
"""

import numpy as np
from numba import njit


@njit(cache=True)
def site_coefficients(t, n_sites, term_site, term_det, term_amp, term_path, phase):
    c = np.zeros(n_sites, dtype=np.complex128)
    for d in range(term_site.shape[0]):
        arg = term_det[d] * t + phase[term_path[d]]
        c[term_site[d]] += term_amp[d] * (np.cos(arg) + 1j * np.sin(arg))
    return c


@njit(cache=True)
def apply_h_full(psi, out, diag, coef, sites):
    """out = -i H psi on the complete 2^N basis (index == configuration)."""
    dim = psi.shape[0]
    for s in range(dim):
        out[s] = diag[s] * psi[s]
    for k in range(sites.shape[0]):
        i = sites[k]
        bit = 1 << i
        ci = coef[i]
        cc = np.conj(ci)
        for s in range(dim):
            if s & bit:
                j = s ^ bit
                a = psi[j]
                b = psi[s]
                out[s] += ci * a
                out[j] += cc * b
    for s in range(dim):
        out[s] = -1j * out[s]


@njit(cache=True)
def apply_h_table(psi, out, diag, coef, sites, configs, flip):
    """out = -i H psi on a sector basis with flip table."""
    dim = psi.shape[0]
    for s in range(dim):
        acc = diag[s] * psi[s]
        cfg = configs[s]
        for k in range(sites.shape[0]):
            i = sites[k]
            j = flip[s, i]
            if j >= 0:
                if (cfg >> i) & 1:
                    acc += coef[i] * psi[j]
                else:
                    acc += np.conj(coef[i]) * psi[j]
        out[s] = -1j * acc


@njit(cache=True)
def _rhs(psi, out, diag, coef, sites, configs, flip, full):
    if full:
        apply_h_full(psi, out, diag, coef, sites)
    else:
        apply_h_table(psi, out, diag, coef, sites, configs, flip)


@njit(cache=True)
def rk4_segment(psi, t0, h, nsteps, step0, diag, sites, configs, flip, full, n_sites,
                term_site, term_det, term_amp, term_path, phases):
    """Advance ``psi`` in place by ``nsteps`` RK4 steps of size ``h``.

    ``phases[p, n]`` is the noise phase of path ``p`` during global step ``n``;
    ``step0`` is the global index of the first step.
    """
    dim = psi.shape[0]
    k1 = np.empty(dim, dtype=np.complex128)
    k2 = np.empty(dim, dtype=np.complex128)
    k3 = np.empty(dim, dtype=np.complex128)
    k4 = np.empty(dim, dtype=np.complex128)
    tmp = np.empty(dim, dtype=np.complex128)
    for n in range(nsteps):
        t = t0 + n * h
        ph = phases[:, step0 + n]
        ca = site_coefficients(t, n_sites, term_site, term_det, term_amp, term_path, ph)
        cb = site_coefficients(t + 0.5 * h, n_sites, term_site, term_det, term_amp, term_path, ph)
        cc = site_coefficients(t + h, n_sites, term_site, term_det, term_amp, term_path, ph)
        _rhs(psi, k1, diag, ca, sites, configs, flip, full)
        for s in range(dim):
            tmp[s] = psi[s] + 0.5 * h * k1[s]
        _rhs(tmp, k2, diag, cb, sites, configs, flip, full)
        for s in range(dim):
            tmp[s] = psi[s] + 0.5 * h * k2[s]
        _rhs(tmp, k3, diag, cb, sites, configs, flip, full)
        for s in range(dim):
            tmp[s] = psi[s] + h * k3[s]
        _rhs(tmp, k4, diag, cc, sites, configs, flip, full)
        for s in range(dim):
            psi[s] += (h / 6.0) * (k1[s] + 2.0 * k2[s] + 2.0 * k3[s] + k4[s])


@njit(cache=True)
def norm2(psi):
    acc = 0.0
    for s in range(psi.shape[0]):
        acc += psi[s].real * psi[s].real + psi[s].imag * psi[s].imag
    return acc


@njit(cache=True)
def rk4_until_norm(psi, t0, h, nsteps, step0, diag, sites, configs, flip, full, n_sites,
                   term_site, term_det, term_amp, term_path, phases, threshold):
    """Like :func:`rk4_segment` but stops after the first step whose squared norm
    drops below ``threshold``.  Returns the number of steps taken."""
    for n in range(nsteps):
        rk4_segment(psi, t0 + n * h, h, 1, step0 + n, diag, sites, configs, flip, full, n_sites,
                    term_site, term_det, term_amp, term_path, phases)
        if norm2(psi) < threshold:
            return n + 1
    return nsteps


# Fourth-order Yoshida composition of Strang steps.  Every factor is unitary
# (or a pure damping for complex diagonals), so the norm is preserved to
# rounding in the Hermitian case.
_CBRT2 = 2.0 ** (1.0 / 3.0)
YOSHIDA_W1 = 1.0 / (2.0 - _CBRT2)
YOSHIDA_W0 = -_CBRT2 / (2.0 - _CBRT2)


@njit(cache=True)
def _rotate_sites(psi, coef, tau, sites, configs, flip, full):
    """psi <- prod_i exp(-i tau (c_i sigma^+_i + h.c.)) psi (the factors commute)."""
    dim = psi.shape[0]
    for k in range(sites.shape[0]):
        i = sites[k]
        c = coef[i]
        a = abs(c)
        if a == 0.0:
            continue
        cs = np.cos(a * tau)
        sn = np.sin(a * tau)
        u = c / a
        up = -1j * sn * u
        dn = -1j * sn * np.conj(u)
        bit = 1 << i
        if full:
            for hi in range(0, dim, 2 * bit):
                for j in range(hi, hi + bit):
                    s = j + bit
                    x = psi[j]
                    y = psi[s]
                    psi[j] = cs * x + dn * y
                    psi[s] = cs * y + up * x
        else:
            for s in range(dim):
                if (configs[s] >> i) & 1:
                    j = flip[s, i]
                    if j >= 0:
                        x = psi[j]
                        y = psi[s]
                        psi[j] = cs * x + dn * y
                        psi[s] = cs * y + up * x


@njit(cache=True)
def split_segment(psi, t0, h, nsteps, step0, diag, sites, configs, flip, full, n_sites,
                  term_site, term_det, term_amp, term_path, phases, noisy, threshold):
    """Advance ``psi`` by up to ``nsteps`` fourth-order splitting steps of size ``h``.

    Drive phasors exp(i det t) are advanced by recurrence and re-anchored
    every 512 steps.  ``phases[p, n]`` is the noise phase of path ``p`` during
    global step ``n`` (read only when ``noisy``).  With ``threshold > 0`` the
    loop stops after the first step whose squared norm falls below it.
    Returns the number of steps taken.
    """
    dim = psi.shape[0]
    nt = term_site.shape[0]
    w1 = YOSHIDA_W1
    w0 = YOSHIDA_W0
    ea = np.empty(dim, dtype=np.complex128)
    eb = np.empty(dim, dtype=np.complex128)
    for s in range(dim):
        ea[s] = np.exp(-1j * diag[s] * (0.5 * w1 * h))
        eb[s] = np.exp(-1j * diag[s] * (0.5 * (w1 + w0) * h))
    offs = np.array([0.5 * w1 * h, w1 * h + 0.5 * w0 * h, h - 0.5 * w1 * h])
    taus = np.array([w1 * h, w0 * h, w1 * h])
    f = np.empty((3, nt), dtype=np.complex128)
    stepf = np.empty(nt, dtype=np.complex128)
    z = np.empty(nt, dtype=np.complex128)
    q = np.ones(nt, dtype=np.complex128)
    for d in range(nt):
        for m in range(3):
            f[m, d] = term_amp[d] * np.exp(1j * term_det[d] * offs[m])
        stepf[d] = np.exp(1j * term_det[d] * h)
        z[d] = np.exp(1j * term_det[d] * t0)
    c = np.zeros(n_sites, dtype=np.complex128)
    for n in range(nsteps):
        if n > 0 and n % 512 == 0:
            t = t0 + n * h
            for d in range(nt):
                z[d] = np.exp(1j * term_det[d] * t)
        if noisy:
            for d in range(nt):
                arg = phases[term_path[d], step0 + n]
                q[d] = np.cos(arg) + 1j * np.sin(arg)
        for m in range(3):
            if m == 0:
                for s in range(dim):
                    psi[s] *= ea[s]
            else:
                for s in range(dim):
                    psi[s] *= eb[s]
            for i in range(n_sites):
                c[i] = 0.0
            for d in range(nt):
                c[term_site[d]] += f[m, d] * z[d] * q[d]
            _rotate_sites(psi, c, taus[m], sites, configs, flip, full)
        for s in range(dim):
            psi[s] *= ea[s]
        for d in range(nt):
            z[d] *= stepf[d]
        if threshold > 0.0 and norm2(psi) < threshold:
            return n + 1
    return nsteps


@njit(cache=True)
def lindblad_rhs(rho, out, diag, coef, sites, configs, flip, full, sz, gamma, kappa, nexc, decay_sites):
    """out = L(rho) for H = diag + drive, dephasing gamma L[S_z] and decay kappa sum_i L[sigma^-_i]."""
    dim = rho.shape[0]
    for a in range(dim):
        cfg = a if full else configs[a]
        for b in range(dim):
            out[a, b] = diag[a] * rho[a, b]
        for k in range(sites.shape[0]):
            i = sites[k]
            if full:
                j = a ^ (1 << i)
            else:
                j = flip[a, i]
            if j >= 0:
                if (cfg >> i) & 1:
                    cc = coef[i]
                else:
                    cc = np.conj(coef[i])
                for b in range(dim):
                    out[a, b] += cc * rho[j, b]
    # -i [H, rho] = -i (M - M^dagger) with M = H rho, rho Hermitian
    for a in range(dim):
        for b in range(a, dim):
            mab = out[a, b]
            mba = out[b, a]
            out[a, b] = -1j * (mab - np.conj(mba))
            if b != a:
                out[b, a] = -1j * (mba - np.conj(mab))
    if gamma != 0.0:
        for a in range(dim):
            for b in range(dim):
                d = sz[a] - sz[b]
                out[a, b] -= 0.5 * gamma * d * d * rho[a, b]
    if kappa != 0.0:
        for a in range(dim):
            ca = a if full else configs[a]
            for b in range(dim):
                cb = b if full else configs[b]
                acc = -0.5 * (nexc[a] + nexc[b]) * rho[a, b]
                for k in range(decay_sites.shape[0]):
                    i = decay_sites[k]
                    if ((ca >> i) & 1) == 0 and ((cb >> i) & 1) == 0:
                        if full:
                            ja = a | (1 << i)
                            jb = b | (1 << i)
                        else:
                            ja = flip[a, i]
                            jb = flip[b, i]
                        if ja >= 0 and jb >= 0:
                            acc += rho[ja, jb]
                out[a, b] += kappa * acc


@njit(cache=True)
def lindblad_rk4(rho, t0, h, nsteps, diag, sites, configs, flip, full, n_sites,
                 term_site, term_det, term_amp, sz, gamma, kappa, nexc, decay_sites):
    """Advance a density matrix in place by ``nsteps`` RK4 steps."""
    dim = rho.shape[0]
    k1 = np.empty((dim, dim), dtype=np.complex128)
    k2 = np.empty((dim, dim), dtype=np.complex128)
    k3 = np.empty((dim, dim), dtype=np.complex128)
    k4 = np.empty((dim, dim), dtype=np.complex128)
    tmp = np.empty((dim, dim), dtype=np.complex128)
    zpath = np.zeros(term_site.shape[0], dtype=np.int64)
    zero = np.zeros(1)
    for n in range(nsteps):
        t = t0 + n * h
        ca = site_coefficients(t, n_sites, term_site, term_det, term_amp, zpath, zero)
        cb = site_coefficients(t + 0.5 * h, n_sites, term_site, term_det, term_amp, zpath, zero)
        cc = site_coefficients(t + h, n_sites, term_site, term_det, term_amp, zpath, zero)
        lindblad_rhs(rho, k1, diag, ca, sites, configs, flip, full, sz, gamma, kappa, nexc, decay_sites)
        for a in range(dim):
            for b in range(dim):
                tmp[a, b] = rho[a, b] + 0.5 * h * k1[a, b]
        lindblad_rhs(tmp, k2, diag, cb, sites, configs, flip, full, sz, gamma, kappa, nexc, decay_sites)
        for a in range(dim):
            for b in range(dim):
                tmp[a, b] = rho[a, b] + 0.5 * h * k2[a, b]
        lindblad_rhs(tmp, k3, diag, cb, sites, configs, flip, full, sz, gamma, kappa, nexc, decay_sites)
        for a in range(dim):
            for b in range(dim):
                tmp[a, b] = rho[a, b] + h * k3[a, b]
        lindblad_rhs(tmp, k4, diag, cc, sites, configs, flip, full, sz, gamma, kappa, nexc, decay_sites)
        for a in range(dim):
            for b in range(dim):
                rho[a, b] += (h / 6.0) * (k1[a, b] + 2.0 * k2[a, b] + 2.0 * k3[a, b] + k4[a, b])
