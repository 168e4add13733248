"""Reference geometries and dressing patterns.

All numbers are entered in 2pi x MHz and um and converted with :func:`mhz`.
"""

from __future__ import annotations

import numpy as np

from .model import ArrayGeometry, ColorField, DressingConfig, InteractionLaw
from .units import mhz

# Anisotropic lattice of the doublon study: spacings and the calibration
# V(d_y) / J_x = 1045 at J_x = 0.5 MHz.
LATTICE_DX = 5.1
LATTICE_DY = 4.8
LATTICE_JX_MHZ = 0.5
LATTICE_V1_OVER_JX = 1045.0

DETUNINGS_MHZ = (120.0, 140.0, 160.0, 180.0)
TRIANGLE_RABI_MHZ = (10.0, 10.9, 11.7)
LADDER_RABI_MHZ = (10.0, 11.5, 13.1, 14.6)
TRIANGLE_SIDE = 4.0
LADDER_SPACING = 8.0


def calibrated_c6():
    """C6 fixed by V(d_y) = 1045 J_x."""
    return LATTICE_V1_OVER_JX * mhz(LATTICE_JX_MHZ) * LATTICE_DY ** 6


def default_law():
    return InteractionLaw(calibrated_c6())


def lattice_interactions(c6=None, d_x=LATTICE_DX, d_y=LATTICE_DY):
    """(V1, V2, V3, V4): displacements (0,1), (0,2), (0,3) and (1,2) in lattice units."""
    c6 = calibrated_c6() if c6 is None else c6

    def v(dx, dy):
        return c6 / ((dx * d_x) ** 2 + (dy * d_y) ** 2) ** 3

    return v(0, 1), v(0, 2), v(0, 3), v(1, 2)


def triangle_config(flux=np.pi / 2, rabi_mhz=TRIANGLE_RABI_MHZ, detunings_mhz=DETUNINGS_MHZ[:3]):
    """Three atoms, atom 0 {A,B}, atom 1 {B,C}, atom 2 {C,A}; the whole flux sits on color B of atom 1."""
    oa, ob, oc = (mhz(x) for x in rabi_mhz)
    da, db, dc = (mhz(x) for x in detunings_mhz)
    ph = np.exp(1j * flux)
    return DressingConfig((
        ColorField("A", da, {0: oa, 2: oa}),
        ColorField("B", db, {0: ob, 1: ob * ph}),
        ColorField("C", dc, {1: oc, 2: oc}),
    ))


def triangle_geometry(side=TRIANGLE_SIDE):
    return ArrayGeometry.triangle(side)


def two_atom(rabi, detuning, spacing=None, v=None, law=None, phase=0.0):
    """Two atoms dressed by one color.  Either a spacing + law or a target V is given."""
    if v is not None:
        law = InteractionLaw(v * 1.0 ** 6)
        spacing = 1.0
    geo = ArrayGeometry.chain(2, spacing)
    cfg = DressingConfig((ColorField("A", detuning, {0: rabi, 1: rabi * np.exp(1j * phase)}),))
    return geo, cfg, law


def ladder_phases(nx, ny, fluxes):
    """Site phases theta(x, y) on the vertical colors giving plaquette fluxes ``fluxes[x][y]``.

    Horizontal bonds carry no phase.  The vertical bond (x, y) -> (x, y+1)
    carries theta(x, y+1) - theta(x, y) along its color, and a plaquette with
    lower-left corner (x, y) encloses
    [theta(x+1, y+1) - theta(x+1, y)] - [theta(x, y+1) - theta(x, y)].
    """
    link = np.zeros((nx, ny - 1))
    for x in range(1, nx):
        for y in range(ny - 1):
            link[x, y] = link[x - 1, y] + fluxes[x - 1][y]
    theta = np.zeros((nx, ny))
    for y in range(1, ny):
        theta[:, y] = theta[:, y - 1] + link[:, y - 1]
    return theta


def square_lattice_config(nx, ny, fluxes, rabi_mhz=LADDER_RABI_MHZ, detunings_mhz=DETUNINGS_MHZ):
    """Four-color square lattice.

    Rows alternate the horizontal colors A / C and columns alternate the
    vertical colors B / D, so every site carries one horizontal and one
    vertical color and each bond has its own channel.  ``fluxes[x][y]`` is the
    flux of the plaquette whose lower-left corner is site (x, y).
    """
    om = {k: mhz(v) for k, v in zip("ABCD", rabi_mhz)}
    det = {k: mhz(v) for k, v in zip("ABCD", detunings_mhz)}
    theta = ladder_phases(nx, ny, fluxes)
    rabi = {k: {} for k in "ABCD"}
    for y in range(ny):
        for x in range(nx):
            i = y * nx + x
            h = "A" if y % 2 == 0 else "C"
            v = "B" if x % 2 == 0 else "D"
            rabi[h][i] = om[h]
            rabi[v][i] = om[v] * np.exp(1j * theta[x, y])
    return DressingConfig(tuple(ColorField(k, det[k], rabi[k]) for k in "ABCD"))


def ladder_fluxes(phi_outer=np.pi / 3, phi_inner=np.pi / 2, nx=4, ny=4):
    """Mirror-symmetric flux pattern: outer plaquette columns phi_outer, inner columns phi_inner."""
    cols = nx - 1
    out = []
    for x in range(cols):
        outer = x == 0 or x == cols - 1
        out.append([phi_outer if outer else phi_inner] * (ny - 1))
    return out


def six_atom_geometry(d):
    """Two columns of three atoms; site k sits at column k % 2, row k // 2."""
    return ArrayGeometry(tuple(((k % 2) * d, (k // 2) * d) for k in range(6)), d_x=d, d_y=d)


def six_atom_config(rabi_mhz=10.0, detunings_mhz=DETUNINGS_MHZ[:3]):
    """Three colors on six atoms; sites k and k + 3 share the same pair of colors."""
    om = mhz(rabi_mhz)
    sets = [("A", "B"), ("B", "C"), ("C", "A")]
    rabi = {k: {} for k in "ABC"}
    for s in range(6):
        for lab in sets[s % 3]:
            rabi[lab][s] = om
    return DressingConfig(tuple(ColorField(k, mhz(d), rabi[k]) for k, d in zip("ABC", detunings_mhz)))
