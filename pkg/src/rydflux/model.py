"""Geometry, dressing configuration, interaction law and validation.

Every object here is immutable after construction.  Sites are addressed by
their index in :attr:`ArrayGeometry.sites`; a vacant site keeps its index but
takes part in nothing.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

from .errors import ConfigurationError, ResonanceError


@dataclass(frozen=True)
class ArrayGeometry:
    """Site positions in um plus optional lattice metadata."""

    sites: tuple
    vacancies: frozenset = frozenset()
    d_x: float | None = None
    d_y: float | None = None
    shape: tuple | None = None

    def __post_init__(self):
        pts = tuple((float(x), float(y)) for x, y in self.sites)
        object.__setattr__(self, "sites", pts)
        object.__setattr__(self, "vacancies", frozenset(int(v) for v in self.vacancies))
        for v in self.vacancies:
            if not 0 <= v < len(pts):
                raise ConfigurationError(f"vacancy index {v} out of range")
        if len(pts) > 1:
            arr = np.array(pts)
            d = np.sqrt(((arr[:, None, :] - arr[None, :, :]) ** 2).sum(-1))
            d[np.diag_indices(len(pts))] = np.inf
            if d.min() <= 0.0:
                raise ConfigurationError("two sites share the same position")

    @property
    def n_sites(self):
        return len(self.sites)

    @property
    def positions(self):
        return np.array(self.sites, dtype=float).reshape(-1, 2)

    def is_active(self, i):
        return 0 <= i < self.n_sites and i not in self.vacancies

    def active_sites(self):
        return [i for i in range(self.n_sites) if i not in self.vacancies]

    def distance(self, i, j):
        (xi, yi), (xj, yj) = self.sites[i], self.sites[j]
        return float(np.hypot(xi - xj, yi - yj))

    def with_vacancies(self, vacancies):
        return ArrayGeometry(self.sites, frozenset(self.vacancies) | frozenset(vacancies),
                             self.d_x, self.d_y, self.shape)

    def lattice_index(self, x, y):
        """Index of lattice column ``x``, row ``y`` for geometries built by :meth:`rectangular`."""
        if self.shape is None:
            raise ConfigurationError("geometry carries no lattice shape")
        nx, ny = self.shape
        if not (0 <= x < nx and 0 <= y < ny):
            raise ConfigurationError(f"lattice coordinate ({x}, {y}) outside {nx}x{ny}")
        return y * nx + x

    def lattice_coords(self, i):
        nx, _ = self.shape
        return i % nx, i // nx

    @classmethod
    def rectangular(cls, nx, ny, d_x, d_y=None, vacancies=()):
        """Rectangular lattice; site ``y * nx + x`` sits at ``(x d_x, y d_y)``."""
        d_y = d_x if d_y is None else d_y
        sites = [(x * d_x, y * d_y) for y in range(ny) for x in range(nx)]
        return cls(tuple(sites), frozenset(vacancies), float(d_x), float(d_y), (nx, ny))

    @classmethod
    def triangle(cls, side):
        """Equilateral triangle of side ``side`` (um), first vertex at the origin."""
        h = side * np.sqrt(3.0) / 2.0
        return cls(((0.0, 0.0), (side, 0.0), (side / 2.0, h)))

    @classmethod
    def chain(cls, n, spacing):
        return cls(tuple((k * spacing, 0.0) for k in range(n)), d_x=float(spacing))


@dataclass(frozen=True)
class InteractionLaw:
    """van der Waals law V = c6 / r**6 (c6 in rad/us um^6)."""

    c6: float

    def __post_init__(self):
        if not np.isfinite(self.c6) or self.c6 == 0.0:
            raise ConfigurationError("c6 must be finite and nonzero")

    def at(self, r):
        r = np.asarray(r, dtype=float)
        return self.c6 / r ** 6


def pair_interaction(geometry, law, i, j):
    """Interaction energy between Rydberg excitations on sites ``i`` and ``j``."""
    if i == j:
        raise ConfigurationError("pair interaction needs two distinct sites")
    for s in (i, j):
        if not geometry.is_active(s):
            raise ConfigurationError(f"site {s} is vacant or does not exist")
    return law.c6 / geometry.distance(i, j) ** 6


def interaction_matrix(geometry, law):
    """Symmetric V_ij matrix; rows and columns of vacancies are zero."""
    n = geometry.n_sites
    pos = geometry.positions
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, 1.0)
    v = law.c6 / d2 ** 3
    np.fill_diagonal(v, 0.0)
    for s in geometry.vacancies:
        v[s, :] = 0.0
        v[:, s] = 0.0
    return v


@dataclass(frozen=True)
class ColorField:
    """One dressing frequency: detuning plus complex Rabi amplitude per site."""

    label: str
    detuning: float
    rabi: MappingProxyType = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.detuning) or self.detuning == 0.0:
            raise ConfigurationError(f"color {self.label}: detuning must be finite and nonzero")
        amps = {int(k): complex(v) for k, v in dict(self.rabi).items()}
        object.__setattr__(self, "rabi", MappingProxyType(amps))
        object.__setattr__(self, "detuning", float(self.detuning))

    def __hash__(self):
        return hash((self.label, self.detuning, tuple(sorted(self.rabi.items()))))

    def __eq__(self, other):
        if not isinstance(other, ColorField):
            return NotImplemented
        return (self.label, self.detuning, dict(self.rabi)) == (other.label, other.detuning, dict(other.rabi))

    def __reduce__(self):
        # mapping proxies do not pickle; worker processes need the plain dict
        return ColorField, (self.label, self.detuning, dict(self.rabi))


@dataclass(frozen=True)
class DressingConfig:
    """A set of colors plus optional per-site detuning shifts.

    ``site_shifts[i]`` is added to the detuning of every color acting on site
    ``i``; it is the knob used to balance on-site potentials.
    """

    colors: tuple
    site_shifts: MappingProxyType = field(default_factory=dict)

    def __post_init__(self):
        cols = tuple(self.colors)
        object.__setattr__(self, "colors", cols)
        labels = [c.label for c in cols]
        if len(set(labels)) != len(labels):
            raise ConfigurationError(f"duplicate color labels in {labels}")
        for a, b in itertools.combinations(cols, 2):
            if a.detuning == b.detuning:
                raise ConfigurationError(f"colors {a.label} and {b.label} share the detuning {a.detuning}")
        shifts = {int(k): float(v) for k, v in dict(self.site_shifts).items() if v != 0.0}
        object.__setattr__(self, "site_shifts", MappingProxyType(shifts))

    def __hash__(self):
        return hash((self.colors, tuple(sorted(self.site_shifts.items()))))

    def __eq__(self, other):
        if not isinstance(other, DressingConfig):
            return NotImplemented
        return self.colors == other.colors and dict(self.site_shifts) == dict(other.site_shifts)

    def __reduce__(self):
        return DressingConfig, (self.colors, dict(self.site_shifts))

    @property
    def labels(self):
        return [c.label for c in self.colors]

    def color(self, label):
        for c in self.colors:
            if c.label == label:
                return c
        raise ConfigurationError(f"unknown color {label!r}")

    def colors_at(self, i):
        return {c.label for c in self.colors if i in c.rabi}

    def rabi(self, i, label):
        return self.color(label).rabi.get(i, 0j)

    def shift(self, i):
        return self.site_shifts.get(i, 0.0)

    def detuning(self, label, site=None):
        d = self.color(label).detuning
        return d if site is None else d + self.shift(site)

    def dressed_sites(self):
        out = set()
        for c in self.colors:
            out.update(c.rabi)
        return sorted(out)

    def max_dressing_ratio(self):
        r = 0.0
        for c in self.colors:
            for i, om in c.rabi.items():
                r = max(r, abs(om) / abs(c.detuning + self.shift(i)))
        return r

    def min_detuning_gap(self):
        d = [c.detuning for c in self.colors]
        if len(d) < 2:
            return np.inf
        return min(abs(a - b) for a, b in itertools.combinations(d, 2))

    def drive_terms(self):
        """Flat list of (site, detuning incl. shift, complex Rabi, color index)."""
        out = []
        for k, c in enumerate(self.colors):
            for i, om in sorted(c.rabi.items()):
                out.append((i, c.detuning + self.shift(i), om, k))
        return out

    def with_site_shifts(self, shifts):
        return DressingConfig(self.colors, dict(shifts))

    def map_rabi(self, fn):
        """New config with every amplitude replaced by ``fn(label, site, omega)``."""
        cols = tuple(ColorField(c.label, c.detuning, {i: fn(c.label, i, om) for i, om in c.rabi.items()})
                     for c in self.colors)
        return DressingConfig(cols, dict(self.site_shifts))

    def conjugated(self):
        """All Peierls phases reversed."""
        return self.map_rabi(lambda lab, i, om: np.conj(om))

    def without_sites(self, sites):
        drop = set(sites)
        cols = tuple(ColorField(c.label, c.detuning, {i: om for i, om in c.rabi.items() if i not in drop})
                     for c in self.colors)
        return DressingConfig(cols, {i: s for i, s in self.site_shifts.items() if i not in drop})


def channels(config, i, j):
    """Colors shared by sites ``i`` and ``j``."""
    if i == j:
        raise ConfigurationError("channels need two distinct sites")
    return config.colors_at(i) & config.colors_at(j)


@dataclass(frozen=True)
class NoiseSpec:
    """Noise and decay rates.  ``correlation`` is global, per-color or per-atom."""

    phase_noise_rate: float = 0.0
    correlation: str = "global"
    doppler_sigma: float = 0.0
    decay_rate: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("phase_noise_rate", "doppler_sigma", "decay_rate"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.correlation not in ("global", "per-color", "per-atom"):
            raise ConfigurationError(f"unknown noise correlation {self.correlation!r}")


@dataclass
class ValidationReport:
    max_dressing_ratio: float
    min_detuning_gap: float
    max_hopping: float
    crosstalk_bound: float
    warnings: list

    @property
    def ok(self):
        return not self.warnings


def validate(geometry, config, law, resonance_ratio=0.25):
    """Check a configuration and report the perturbative small parameters.

    A warning is raised for every dressed pair whose admixture amplitude
    |Omega / 2(Delta + V)| exceeds ``resonance_ratio``.  An exactly vanishing
    denominator raises :class:`ResonanceError`.
    """
    warnings = []
    for c in config.colors:
        for s in c.rabi:
            if not geometry.is_active(s):
                raise ConfigurationError(f"color {c.label} dresses vacant or missing site {s}")
    for s in config.site_shifts:
        if not geometry.is_active(s):
            raise ConfigurationError(f"detuning shift on vacant or missing site {s}")
    vmat = interaction_matrix(geometry, law)
    act = geometry.active_sites()
    max_j = 0.0
    for c in config.colors:
        for j, om in c.rabi.items():
            dj = c.detuning + config.shift(j)
            for i in act:
                if i == j:
                    continue
                den = dj + vmat[i, j]
                if den == 0.0 or abs(den) <= 1e-14 * abs(dj):
                    raise ResonanceError(
                        f"color {c.label}: detuning + V vanishes for sites ({i}, {j})")
                if abs(om) / (2.0 * abs(den)) > resonance_ratio:
                    warnings.append(f"near resonance: color {c.label}, sites ({i}, {j}), "
                                    f"|Omega/2(Delta+V)| = {abs(om) / (2 * abs(den)):.3g}")
            for i, om_i in c.rabi.items():
                if i < j:
                    v = vmat[i, j]
                    max_j = max(max_j, abs(om_i * om * v / (4.0 * dj * (dj + v))))
    gap = config.min_detuning_gap()
    ratio = config.max_dressing_ratio()
    if ratio > 0.5:
        warnings.append(f"strong dressing: max|Omega/Delta| = {ratio:.3g}")
    return ValidationReport(ratio, gap, max_j, max_j / gap if np.isfinite(gap) else 0.0, warnings)
