"""Currents, populations and end-localization measures on a steady state."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .leads import CompositeSystem
from .master_eq import SPDM, _as_matrix


@dataclass(frozen=True)
class CurrentProfile:
    """Current through every vertical cut, left contact first.

    In a valid steady state all entries agree; ``max_deviation`` is the
    largest |j_cut - mean|.
    """

    cut_labels: tuple[str, ...]
    currents: np.ndarray
    mean: float
    max_deviation: float


def bond_current(rho: SPDM | np.ndarray, sys: CompositeSystem, m: int, n: int) -> float:
    """Particle current flowing from site n into site m.

    j = 2 Im(H[m, n] rho[n, m]); with (n, m) ordered left to right a
    positive value means flow from the left lead toward the right one.
    Derived from continuity: d rho_mm/dt under the commutator alone equals
    the sum of bond currents into m.
    """
    mat = _as_matrix(rho)
    return float(2.0 * np.imag(sys.h_total[m, n] * mat[n, m]))


def current_profile(rho: SPDM | np.ndarray, sys: CompositeSystem) -> CurrentProfile:
    """Currents through the two contacts and every internal cut of the device."""
    mat = _as_matrix(rho)
    imap = sys.index_map
    first, last = 0, imap.n_lattice - 1
    left0 = imap.left.start
    right0 = imap.right.start

    labels = [f"L|{sys.lattice.site_labels[first]}"]
    values = [bond_current(mat, sys, first, left0)]
    for cut in sys.lattice.cuts:
        j = sum(bond_current(mat, sys, b, a) for a, b in cut.bonds)
        labels.append(cut.label)
        values.append(j)
    labels.append(f"{sys.lattice.site_labels[last]}|R")
    values.append(bond_current(mat, sys, right0, last))

    currents = np.asarray(values)
    mean = float(currents.mean())
    return CurrentProfile(
        cut_labels=tuple(labels),
        currents=currents,
        mean=mean,
        max_deviation=float(np.abs(currents - mean).max()),
    )


def site_populations(rho: SPDM | np.ndarray, sys: CompositeSystem) -> np.ndarray:
    """Occupation of each lattice site (leads excluded)."""
    mat = _as_matrix(rho)
    return np.real(np.diag(mat)[sys.index_map.lattice]).copy()


def population_gradient(populations: np.ndarray, window: float = 0.6) -> float:
    """Least-squares slope of population versus site index.

    Fitted over the central ``window`` fraction of the chain so contact
    and edge-state pileups do not bias the bulk slope.  A vanishing slope
    signals ballistic (or fully localized) transport; in the diffusive
    regime the profile is linear and the slope measures its steepness.
    """
    pops = np.asarray(populations, dtype=float)
    n = pops.size
    if not 0 < window <= 1:
        raise ValueError("window must be in (0, 1]")
    lo = int(np.floor(n * (1.0 - window) / 2.0))
    hi = n - lo
    if hi - lo < 4:
        raise ValueError("window contains fewer than 4 sites")
    x = np.arange(lo, hi, dtype=float)
    slope = np.polyfit(x, pops[lo:hi], 1)[0]
    return float(slope)


def transport_regime(slope: float, n_sites: int, threshold: float = 0.05) -> str:
    """Classify a population slope: |slope| < threshold/n_sites is 'weak'."""
    return "weakly diffusive" if abs(slope) < threshold / n_sites else "strongly diffusive"


def edge_imbalance(populations: np.ndarray, k: int = 2) -> float:
    """Mean population of the first k sites minus the mean of the last k."""
    pops = np.asarray(populations, dtype=float)
    if k < 1 or 2 * k > pops.size:
        raise ValueError("k must satisfy 1 <= k <= n_sites/2")
    return float(pops[:k].mean() - pops[-k:].mean())
