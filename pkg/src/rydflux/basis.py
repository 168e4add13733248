"""Bit-encoded configuration bases.

Bit ``i`` of a configuration is 1 when site ``i`` holds a Rydberg excitation.
A basis is a sorted array of configurations; vacant sites never carry an
excitation.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import ConfigurationError


def _word(n_sites):
    # beyond 63 sites configurations are kept as Python integers
    return np.int64 if n_sites <= 63 else object


def popcount(configs):
    c = np.asarray(configs)
    if c.dtype == object:
        return np.array([bin(int(x)).count("1") for x in c.ravel()], dtype=np.int64).reshape(c.shape)
    c = c.astype(np.int64)
    out = np.zeros(c.shape, dtype=np.int64)
    x = c.copy()
    while np.any(x):
        out += x & 1
        x >>= 1
    return out


@dataclass(frozen=True)
class SectorBasis:
    n_sites: int
    configs: np.ndarray
    counts: tuple
    active: tuple

    @property
    def dim(self):
        return len(self.configs)

    @classmethod
    def build(cls, n_sites, counts, active=None, max_dim=1 << 24):
        """All configurations on ``active`` sites whose excitation number is in ``counts``."""
        active = tuple(range(n_sites)) if active is None else tuple(sorted(active))
        counts = tuple(sorted(set(int(c) for c in counts if 0 <= c <= len(active))))
        if not counts:
            raise ConfigurationError("empty sector selection")
        out = []
        for k in counts:
            for sub in combinations(active, k):
                s = 0
                for i in sub:
                    s |= 1 << i
                out.append(s)
                if len(out) > max_dim:
                    raise ConfigurationError(f"basis dimension exceeds {max_dim}")
        configs = np.array(sorted(out), dtype=_word(n_sites))
        return cls(n_sites, configs, counts, active)

    @classmethod
    def full(cls, n_sites, active=None):
        active = tuple(range(n_sites)) if active is None else tuple(active)
        if len(active) == n_sites:
            return cls(n_sites, np.arange(1 << n_sites, dtype=np.int64), tuple(range(n_sites + 1)), active)
        return cls.build(n_sites, range(len(active) + 1), active)

    @classmethod
    def fixed(cls, n_sites, n_exc, active=None):
        return cls.build(n_sites, [n_exc], active)

    @classmethod
    def band(cls, n_sites, n0, k, active=None):
        return cls.build(n_sites, range(n0 - k, n0 + k + 1), active)

    def index(self, config):
        k = int(np.searchsorted(self.configs, config))
        if k >= self.dim or self.configs[k] != config:
            raise KeyError(f"configuration {config:b} not in basis")
        return k

    def indices(self, configs):
        configs = np.asarray(configs, dtype=self.configs.dtype)
        k = np.searchsorted(self.configs, configs)
        k = np.minimum(k, self.dim - 1)
        return np.where(self.configs[k] == configs, k, -1)

    def flip_table(self):
        """``table[s, i]`` = index of configuration ``s`` with bit ``i`` flipped, or -1."""
        tab = np.empty((self.dim, self.n_sites), dtype=np.int64)
        for i in range(self.n_sites):
            tab[:, i] = self.indices(self.configs ^ (1 << i))
        return tab

    def occupation(self):
        """Boolean matrix (dim, n_sites) of site occupations."""
        bits = (self.configs[:, None] >> np.arange(self.n_sites)[None, :]) & 1
        return bits.astype(bool)

    def excitation_number(self):
        return popcount(self.configs)

    def basis_state(self, sites):
        s = 0
        for i in sites:
            s |= 1 << int(i)
        psi = np.zeros(self.dim, dtype=complex)
        psi[self.index(s)] = 1.0
        return psi

    def pair_energies(self, vmat):
        """Sum of V_ij over excited pairs for every configuration."""
        occ = self.occupation().astype(float)
        return 0.5 * np.einsum("si,ij,sj->s", occ, vmat, occ)


def sector_operators(basis, config, vmat):
    """Diagonal energies and per-color raising operators on ``basis``.

    Site shifts enter the diagonal as +shift per excitation (they are removed
    from the drive phases).  Returns ``(diag, ops)`` where ``ops[k]`` is the
    sparse matrix of sum_i Omega_ik/2 sigma^+_i for color ``k``.
    """
    from scipy import sparse

    occ = basis.occupation()
    diag = basis.pair_energies(vmat)
    for i, s in config.site_shifts.items():
        diag = diag + s * occ[:, i]
    ops = []
    for c in config.colors:
        rows, cols, vals = [], [], []
        for i, om in c.rabi.items():
            src = np.nonzero(~occ[:, i])[0]
            dst = basis.indices(basis.configs[src] | (1 << i))
            ok = dst >= 0
            rows.append(dst[ok])
            cols.append(src[ok])
            vals.append(np.full(ok.sum(), om / 2.0, dtype=complex))
        if rows:
            r, cc, v = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
        else:
            r = cc = np.zeros(0, dtype=np.int64)
            v = np.zeros(0, dtype=complex)
        ops.append(sparse.csr_matrix((v, (r, cc)), shape=(basis.dim, basis.dim)))
    return diag, ops
