"""Parameter sweeps and the analyses built on them.

Gate and decoherence sweeps run one steady-state solve per grid point and
collect current, residual, edge imbalance and bulk population gradient into
a SweepTable.  On top of that live the conduction-window predictor, the
in-gap peak extractor and the kappa/(kappa^2+c) rate-law fit.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .master_eq import SPDM, SolverError, solve_steady_state
from .observables import (
    current_profile,
    edge_imbalance,
    population_gradient,
    site_populations,
)

__all__ = [
    "CSV_HEADER_PREFIX",
    "SweepTable",
    "PeakMetrics",
    "EsakiTsuFit",
    "EsakiTsuFitError",
    "conduction_window",
    "sweep_gate",
    "sweep_decoherence",
    "peak_metrics",
    "fit_esaki_tsu",
    "write_sweep_csv",
    "read_sweep_csv",
]

CSV_HEADER_PREFIX = "# edgesense v1, fingerprint="


def _fmt(x: float) -> str:
    """Render a float with 12 significant digits."""
    return f"{float(x):.12g}"


@dataclass(frozen=True)
class SweepTable:
    """One row per grid point; extra_columns holds named diagnostics.

    The 'converged' extra column flags rows whose solve met the residual
    target; failed rows keep NaN in every derived column and the sweep
    carries on.
    """

    axis_name: str
    axis_values: np.ndarray
    current: np.ndarray
    residuals: np.ndarray
    extra_columns: dict[str, np.ndarray] = field(default_factory=dict)
    config_fingerprint: str = ""

    def __post_init__(self) -> None:
        n = np.asarray(self.axis_values).size
        for name, col in [("current", self.current), ("residuals", self.residuals)] + list(
            self.extra_columns.items()
        ):
            if np.asarray(col).size != n:
                raise ValueError(f"column '{name}' does not match the axis length")

    @property
    def n_rows(self) -> int:
        return int(np.asarray(self.axis_values).size)

    def column(self, name: str) -> np.ndarray:
        if name == "axis":
            return self.axis_values
        if name == "current":
            return self.current
        if name == "residual":
            return self.residuals
        return self.extra_columns[name]

    def restrict(self, lo: float, hi: float) -> "SweepTable":
        """Rows with lo <= axis <= hi, order preserved."""
        keep = (self.axis_values >= lo) & (self.axis_values <= hi)
        return SweepTable(
            axis_name=self.axis_name,
            axis_values=self.axis_values[keep],
            current=self.current[keep],
            residuals=self.residuals[keep],
            extra_columns={k: v[keep] for k, v in self.extra_columns.items()},
            config_fingerprint=self.config_fingerprint,
        )


def conduction_window(mu_left: float, mu_right: float, gamma: float) -> tuple[float, float]:
    """Energy interval a level must sit in to carry resonant current.

    The lead relaxation broadens each chemical-potential step by gamma/2,
    so the interval is (mu_right - gamma/2, mu_left + gamma/2).
    """
    if mu_left < mu_right:
        raise ValueError("mu_left must not be below mu_right")
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    return (mu_right - 0.5 * gamma, mu_left + 0.5 * gamma)


def _run_sweep(
    cfg: RunConfig,
    axis_name: str,
    values: Sequence[float],
    make_system: Callable[[int], object],
    kappa_of: Callable[[int], float],
    parallel: int,
    warm_start: bool,
    edge_sites: int,
) -> SweepTable:
    axis = np.asarray(values, dtype=float)
    n = axis.size
    if n == 0:
        raise ValueError("empty sweep grid")

    current = np.full(n, np.nan)
    residual = np.full(n, np.nan)
    imbalance = np.full(n, np.nan)
    gradient = np.full(n, np.nan)
    converged = np.zeros(n)

    def run_rows(rows: np.ndarray) -> None:
        # rows of one chunk run in order so the warm start stays contiguous
        seed = None
        for i in rows:
            system = make_system(int(i))
            try:
                rho, diag = solve_steady_state(system, kappa_of(int(i)), cfg.solver, rho0=seed)
            except SolverError as err:
                if err.diagnostics is not None:
                    residual[i] = err.diagnostics.residual
                seed = None
                continue
            current[i] = current_profile(rho, system).mean
            residual[i] = diag.residual
            pops = site_populations(rho, system)
            imbalance[i] = edge_imbalance(pops, edge_sites)
            gradient[i] = population_gradient(pops)
            converged[i] = 1.0
            seed = rho if warm_start else None

    workers = max(1, min(int(parallel), n))
    if workers == 1:
        run_rows(np.arange(n))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_rows, np.array_split(np.arange(n), workers)))

    return SweepTable(
        axis_name=axis_name,
        axis_values=axis,
        current=current,
        residuals=residual,
        extra_columns={"imbalance": imbalance, "gradient": gradient, "converged": converged},
        config_fingerprint=cfg.fingerprint(),
    )


def sweep_gate(
    cfg: RunConfig,
    delta_values: Sequence[float],
    kappa: float | None = None,
    *,
    parallel: int = 1,
    warm_start: bool = True,
    edge_sites: int = 2,
) -> SweepTable:
    """Steady current versus gate offset at fixed decoherence rate."""
    kap = cfg.decoherence if kappa is None else float(kappa)
    gates = np.asarray(delta_values, dtype=float)
    return _run_sweep(
        cfg,
        "delta",
        gates,
        make_system=lambda i: cfg.build_system(gate=float(gates[i])),
        kappa_of=lambda i: kap,
        parallel=parallel,
        warm_start=warm_start,
        edge_sites=edge_sites,
    )


def sweep_decoherence(
    cfg: RunConfig,
    kappa_values: Sequence[float],
    delta: float | None = None,
    *,
    parallel: int = 1,
    warm_start: bool = True,
    edge_sites: int = 2,
) -> SweepTable:
    """Steady current versus decoherence rate at fixed gate offset."""
    system = cfg.build_system(gate=delta)
    kap = np.asarray(kappa_values, dtype=float)
    return _run_sweep(
        cfg,
        "kappa",
        kap,
        make_system=lambda i: system,
        kappa_of=lambda i: float(kap[i]),
        parallel=parallel,
        warm_start=warm_start,
        edge_sites=edge_sites,
    )


@dataclass(frozen=True)
class PeakMetrics:
    """Baseline-referenced description of an isolated resonance peak.

    support is the axis interval where the current clears baseline + 3 sigma;
    its width tracks the conduction window, while fwhm (half height above
    baseline, linear interpolation) comes out narrower because the peak is a
    rounded dome rather than a box.
    """

    height: float
    center: float
    fwhm: float
    baseline: float
    noise: float
    support: tuple[float, float]


def peak_metrics(
    table: SweepTable,
    *,
    window: tuple[float, float] | None = None,
    exclusion: float = 0.0,
) -> PeakMetrics | None:
    """Locate and measure the peak of a sweep, or return None if there is none.

    window restricts the peak search to an axis interval and removes it
    from the baseline estimate; exclusion widens the removed interval so
    thermally smeared shoulders do not leak into the baseline.  The
    baseline is the median of the remaining rows, the noise scale their
    MAD (floored by the worst solver residual), and a peak must clear
    baseline + 3 noise.
    """
    ok = np.isfinite(table.current)
    axis = table.axis_values[ok]
    js = table.current[ok]
    res = table.residuals[ok]
    if axis.size < 5:
        raise ValueError("too few converged rows to measure a peak")

    if window is None:
        inside = np.ones(axis.size, dtype=bool)
        outside = np.ones(axis.size, dtype=bool)
    else:
        lo, hi = window
        inside = (axis > lo) & (axis < hi)
        outside = (axis <= lo - exclusion) | (axis >= hi + exclusion)
    if not inside.any() or not outside.any():
        raise ValueError("window leaves no rows for the peak or the baseline")

    baseline = float(np.median(js[outside]))
    mad = float(np.median(np.abs(js[outside] - baseline)))
    noise = max(1.4826 * mad, float(res.max(initial=0.0)))
    threshold = baseline + 3.0 * noise

    if js[inside].max() <= threshold:
        return None

    ipk = int(np.flatnonzero(inside)[np.argmax(js[inside])])
    height = float(js[ipk] - baseline)
    half = baseline + 0.5 * height

    i = ipk
    while i > 0 and js[i - 1] >= half:
        i -= 1
    left = axis[i] if i == 0 else float(
        np.interp(half, [js[i - 1], js[i]], [axis[i - 1], axis[i]])
    )
    i = ipk
    while i < js.size - 1 and js[i + 1] >= half:
        i += 1
    right = axis[i] if i == js.size - 1 else float(
        np.interp(half, [js[i + 1], js[i]], [axis[i + 1], axis[i]])
    )

    over = axis[js > threshold]
    return PeakMetrics(
        height=height,
        center=float(axis[ipk]),
        fwhm=float(right - left),
        baseline=baseline,
        noise=noise,
        support=(float(over.min()), float(over.max())),
    )


@dataclass(frozen=True)
class EsakiTsuFit:
    """Parameters of j(kappa) = a * kappa / (kappa^2 + c)."""

    a: float
    c: float
    relative_residual: float

    def __post_init__(self) -> None:
        if self.a <= 0 or self.c <= 0:
            raise ValueError("a and c must be positive")

    @property
    def kappa_peak(self) -> float:
        """argmax of the fitted curve; a*k/(k^2+c) peaks exactly at sqrt(c)."""
        return math.sqrt(self.c)

    def evaluate(self, kappa: np.ndarray) -> np.ndarray:
        k = np.asarray(kappa, dtype=float)
        return self.a * k / (k**2 + self.c)


class EsakiTsuFitError(RuntimeError):
    """Refinement failed; .best carries the coarse grid-scan fit."""

    def __init__(self, message: str, best: EsakiTsuFit):
        super().__init__(message)
        self.best = best


def _grid_scan(k: np.ndarray, j: np.ndarray) -> tuple[float, float, float]:
    c_grid = np.logspace(
        2.0 * math.log10(k.min()) - 2.0, 2.0 * math.log10(k.max()) + 2.0, 241
    )
    best: tuple[float, float, float] | None = None
    for c in c_grid:
        phi = k / (k**2 + c)
        a = float(j @ phi) / float(phi @ phi)
        sse = float(np.sum((j - a * phi) ** 2))
        if best is None or sse < best[0]:
            best = (sse, a, c)
    return best


def fit_esaki_tsu(table: SweepTable) -> EsakiTsuFit:
    """Least-squares fit of j = a*kappa/(kappa^2 + c) to a decoherence sweep.

    A coarse scan over log-spaced c (with the optimal a computed in closed
    form per candidate) seeds a damped Gauss-Newton refinement.  Requires
    at least 6 converged points spanning two decades, all of one sign;
    negative sweeps are flipped so a stays positive.
    """
    ok = np.isfinite(table.current)
    k = np.asarray(table.axis_values, dtype=float)[ok]
    j = np.asarray(table.current, dtype=float)[ok]
    if k.size < 6:
        raise ValueError("need at least 6 converged points")
    if k.min() <= 0:
        raise ValueError("kappa values must be positive")
    if k.max() / k.min() < 100.0:
        raise ValueError("kappa values must span at least two decades")
    if np.all(j < 0):
        j = -j
    if np.any(j <= 0):
        raise ValueError("currents must be nonzero and of one sign")

    sse, a, c = _grid_scan(k, j)
    norm = float(np.linalg.norm(j))
    grid_fit = EsakiTsuFit(a=a, c=c, relative_residual=math.sqrt(sse) / norm)

    for _ in range(60):
        phi = k / (k**2 + c)
        r = a * phi - j
        jac = np.column_stack([phi, -a * k / (k**2 + c) ** 2])
        step, *_ = np.linalg.lstsq(jac, -r, rcond=None)
        scale = 1.0
        improved = False
        for _ in range(25):
            a_try = a + scale * step[0]
            c_try = c + scale * step[1]
            if a_try > 0 and c_try > 0:
                sse_try = float(np.sum((a_try * k / (k**2 + c_try) - j) ** 2))
                if sse_try <= sse:
                    improved = sse - sse_try > 1e-15 * max(sse, 1e-300)
                    a, c, sse = a_try, c_try, sse_try
                    break
            scale *= 0.5
        if not improved:
            break

    if not (math.isfinite(a) and math.isfinite(c) and a > 0 and c > 0):
        raise EsakiTsuFitError("Gauss-Newton refinement diverged", best=grid_fit)
    return EsakiTsuFit(a=a, c=c, relative_residual=math.sqrt(sse) / norm)


def write_sweep_csv(table: SweepTable, path: str | Path) -> None:
    """Write a sweep as CSV: fingerprint header, column names, 12-digit rows."""
    lines = [f"{CSV_HEADER_PREFIX}{table.config_fingerprint}"]
    lines.append(",".join(["axis", "current", "residual", *table.extra_columns]))
    columns = [table.axis_values, table.current, table.residuals]
    columns += list(table.extra_columns.values())
    for row in zip(*columns):
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_sweep_csv(path: str | Path, axis_name: str = "axis") -> SweepTable:
    """Reconstruct a SweepTable written by write_sweep_csv."""
    lines = Path(path).read_text().splitlines()
    if len(lines) < 3 or not lines[0].startswith(CSV_HEADER_PREFIX):
        raise ValueError(f"{path}: not an edgesense sweep CSV")
    fingerprint = lines[0][len(CSV_HEADER_PREFIX):]
    names = lines[1].split(",")
    if names[:3] != ["axis", "current", "residual"]:
        raise ValueError(f"{path}: unexpected column layout {names[:3]}")
    rows = [[float(cell) for cell in line.split(",")] for line in lines[2:] if line]
    data = np.asarray(rows, dtype=float)
    if data.shape[1] != len(names):
        raise ValueError(f"{path}: ragged rows")
    extras = {name: data[:, i] for i, name in enumerate(names) if i >= 3}
    return SweepTable(
        axis_name=axis_name,
        axis_values=data[:, 0],
        current=data[:, 1],
        residuals=data[:, 2],
        extra_columns=extras,
        config_fingerprint=fingerprint,
    )
