"""Extended-space (Sambe) Floquet matrices and van Vleck perturbation theory.

The drive is expanded as H(t) = sum_n H_n exp(+i n w t), so a raising
operator of color k sits in the harmonic +n_k block and moves the Fourier
index from m to m + n_k.  The Floquet matrix element is
<a, m'|F|b, m> = <a|H_{m'-m}|b> + delta_{m'm} delta_{ab} m w.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import scipy.linalg as sla
from scipy import sparse

from .basis import SectorBasis, sector_operators
from .errors import ConfigurationError, ConvergenceError
from .model import interaction_matrix


def elementary_frequency(detunings, tol=1e-12, bound=10 ** 6):
    """Largest w with every detuning an integer multiple of it.

    Returns ``(w, harmonics)``.  Ratios are rationalised by continued
    fractions with denominators up to ``bound``.
    """
    d = [float(x) for x in detunings]
    if not d or any(x == 0.0 for x in d):
        raise ConfigurationError("detunings must be nonzero")
    ref = d[0]
    fracs = []
    for x in d:
        r = x / ref
        f = Fraction(r).limit_denominator(bound)
        if abs(float(f) - r) > tol * abs(r):
            raise ConfigurationError(f"detunings {ref} and {x} are incommensurate at tolerance {tol}")
        fracs.append(f)
    q = 1
    for f in fracs:
        q = q * f.denominator // math.gcd(q, f.denominator)
    nums = [f.numerator * (q // f.denominator) for f in fracs]
    g = 0
    for n in nums:
        g = math.gcd(g, abs(n))
    nums = [n // g for n in nums]
    omega = ref * g / q
    if omega < 0:
        omega, nums = -omega, [-n for n in nums]
    if max(abs(n) for n in nums) > bound:
        raise ConfigurationError(f"harmonics {nums} exceed bound {bound}")
    return omega, nums


@dataclass
class FloquetMatrix:
    """Truncated Floquet matrix over (physical state, Fourier index)."""

    basis: SectorBasis
    omega: float
    harmonics: dict
    n_max: int
    matrix: sparse.csr_matrix
    diag0: np.ndarray
    coupling: sparse.csr_matrix
    phys_energy: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.matrix.shape[0]

    def row(self, state_index, fourier):
        if abs(fourier) > self.n_max:
            raise ConfigurationError(f"Fourier index {fourier} outside truncation {self.n_max}")
        return (fourier + self.n_max) * self.basis.dim + state_index

    def split(self, row):
        m, a = divmod(int(row), self.basis.dim)
        return a, m - self.n_max

    def block_rows(self, configs, fourier=0):
        return [self.row(self.basis.index(c), fourier) for c in configs]

    def dense(self):
        return self.matrix.toarray()

    def write_block_csv(self, path):
        """Block structure dump: block row, block column, harmonic, nonzeros."""
        L = self.basis.dim
        coo = self.matrix.tocoo()
        br, bc = coo.row // L, coo.col // L
        keys, counts = np.unique(np.stack([br, bc]), axis=1, return_counts=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["block_row", "block_col", "harmonic", "nnz"])
            for (r, c), k in zip(keys.T, counts):
                w.writerow([int(r) - self.n_max, int(c) - self.n_max, int(r - c), int(k)])


def build_sector_floquet(config, law, geometry, sectors=(0, 1, 2), n_max=None, tol=1e-12, bound=10 ** 6):
    """Floquet matrix restricted to the given excitation-number sectors."""
    if not config.colors:
        raise ConfigurationError("no colors to build a drive from")
    omega, harm = elementary_frequency([c.detuning for c in config.colors], tol, bound)
    harmonics = {c.label: n for c, n in zip(config.colors, harm)}
    top = max(abs(n) for n in harm)
    if n_max is None:
        n_max = 2 * top
    if n_max < top:
        raise ConfigurationError(f"truncation {n_max} is below the largest harmonic {top}")
    basis = SectorBasis.build(geometry.n_sites, sectors, geometry.active_sites())
    vmat = interaction_matrix(geometry, law)
    energy, ops = sector_operators(basis, config, vmat)
    L = basis.dim
    nf = 2 * n_max + 1
    diag0 = (np.tile(energy, nf) + np.repeat(np.arange(-n_max, n_max + 1) * omega, L))
    coup = None
    for c, op in zip(config.colors, ops):
        n = harmonics[c.label]
        # |m + n><m| (x) raise  and its adjoint
        shift = sparse.eye(nf, nf, k=-n, dtype=complex, format="csr")
        term = sparse.kron(shift, op, format="csr")
        term = term + term.conj().T
        coup = term if coup is None else coup + term
    coup = sparse.csr_matrix(coup)
    coup.eliminate_zeros()
    mat = (sparse.diags(diag0) + coup).tocsr()
    return FloquetMatrix(basis, omega, harmonics, n_max, mat, diag0, coup, energy,
                         {"sectors": tuple(sectors)})


@dataclass
class QuasienergyResult:
    values: np.ndarray
    vectors: np.ndarray
    converged: bool
    change: float
    n_max: int


def _eig(F, k_hint=None):
    if F.dim <= 4096:
        return sla.eigh(F.dense())
    raise ConfigurationError("Floquet matrix too large for the dense solver; use block_quasienergies")


def quasienergies(F, window, rebuild=None, tol=None):
    """Eigenpairs of ``F`` with eigenvalue inside ``window = (lo, hi)``.

    When ``rebuild`` (a callable n_max -> FloquetMatrix) is given the same
    window is recomputed at n_max + 2 and the largest change is reported.
    """
    lo, hi = window
    w, v = _eig(F)
    sel = (w >= lo) & (w <= hi)
    vals, vecs = w[sel], v[:, sel]
    change = 0.0
    converged = True
    if rebuild is not None:
        w2, _ = _eig(rebuild(F.n_max + 2))
        w2 = w2[(w2 >= lo) & (w2 <= hi)]
        if len(w2) != len(vals):
            converged = False
            change = np.inf
        else:
            change = float(np.max(np.abs(w2 - vals))) if len(vals) else 0.0
            if tol is not None:
                converged = change < tol
    return QuasienergyResult(vals, vecs, converged, change, F.n_max)


def block_quasienergies(F, rows):
    """Exact quasienergies continuously connected to the zeroth-order states ``rows``.

    Eigenvectors are ranked by their weight on the block; the ``len(rows)``
    most block-like ones are returned in ascending order.
    """
    rows = list(rows)
    w, v = _eig(F)
    weight = (np.abs(v[rows, :]) ** 2).sum(axis=0)
    pick = np.sort(np.argsort(weight)[::-1][: len(rows)])
    return w[pick], v[:, pick], weight[pick]


def converged_block_quasienergies(build, rows_of, n_max, tol):
    """Block quasienergies at ``n_max`` and ``n_max + 2``; raise if they differ by ``tol`` or more."""
    F1 = build(n_max)
    e1, _, _ = block_quasienergies(F1, rows_of(F1))
    F2 = build(n_max + 2)
    e2, _, _ = block_quasienergies(F2, rows_of(F2))
    change = float(np.max(np.abs(e1 - e2)))
    if not change < tol:
        raise ConvergenceError(f"quasienergies moved by {change:.3e} when n_max -> n_max + 2",
                               residual=change)
    return e2, change


@dataclass
class GvvResult:
    order: int
    block: list
    h_eff: np.ndarray
    terms: dict
    first_order_states: np.ndarray
    anti_hermitian: float
    second_term_norm: float


def gvv_effective(F, block, order=2, gate=0.1, check=True):
    """Generalized van Vleck effective Hamiltonian on the rows ``block`` of ``F``.

    H0 is the diagonal of ``F`` and V the off-diagonal part.  First-order
    states use denominators E_block - E_other.  ``gate`` is the allowed ratio
    of intra-block spread to the gap towards directly coupled states.
    """
    if order not in (1, 2, 3):
        raise ConfigurationError("order must be 1, 2 or 3")
    block = list(block)
    e0 = F.diag0
    V = F.coupling.tocsr()
    eb = e0[block]
    inb = np.zeros(F.dim, dtype=bool)
    inb[block] = True
    vb = V[:, block].toarray()
    coupled = np.nonzero((np.abs(vb).sum(axis=1) > 0) & ~inb)[0]
    spread = float(eb.max() - eb.min()) if len(block) > 1 else 0.0
    if len(coupled):
        gap = float(np.min(np.abs(e0[coupled][:, None] - eb[None, :])))
    else:
        gap = np.inf
    if check and not spread <= gate * gap:
        raise ConfigurationError(f"block not quasi-degenerate: spread {spread:.3e} vs gap {gap:.3e}")
    if len(coupled) and gap == 0.0:
        raise ConfigurationError("a coupled complement state is degenerate with the block")
    h1 = V[block, :][:, block].toarray()
    # first-order states, restricted to the coupled complement
    S = vb[coupled, :] / (eb[None, :] - e0[coupled][:, None])
    psi1 = np.zeros((F.dim, len(block)), dtype=complex)
    psi1[coupled, :] = S
    overlap = psi1[block, :]  # <Psi0|Psi1>, zero by construction
    vbq = V[block, :][:, coupled].toarray()
    h2a = vbq @ S
    h2b = h1 @ overlap
    h2 = h2a - h2b
    terms = {1: h1, 2: h2}
    h = h1.copy()
    if order >= 2:
        h = h + h2
    if order >= 3:
        vqq = V[coupled, :][:, coupled].toarray()
        h3 = S.conj().T @ vqq @ S - h1 @ (S.conj().T @ S)
        terms[3] = h3
        h = h + h3
    h = h + np.diag(eb)
    anti = float(np.max(np.abs(h - h.conj().T))) / 2.0 if len(block) else 0.0
    return GvvResult(order, block, h, terms, psi1, anti, float(np.max(np.abs(h2b))) if h2b.size else 0.0)
