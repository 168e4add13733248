"""Synthetic gauge fields for Rydberg excitations under multicolor dressing.

Modules: ``model`` (geometry, interactions, dressing fields), ``effective``
(second-order hopping model), ``floquet`` (extended-space checks),
``dynamics`` (exact and effective evolution), ``noise`` (phase noise,
Doppler, decay), ``spectra`` (two-body bands, Chern numbers, edge modes) and
``scenarios``/``cli`` (reproducible runs).
"""

__version__ = "0.1.0"
