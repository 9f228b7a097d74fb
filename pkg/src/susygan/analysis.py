"""How far do generated fields depart from the training class?

Polynomial least-squares fits (real and imaginary parts as separate data
points), fit-cost summaries across degrees, and minima counting on the
scalar potential.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IllConditioned, InvalidArgument
from .field_grid import BoxDomain, ComplexGrid, residual_stat_arrays, scalar_potential_arrays

MAX_CONDITION = 1e12
DEFAULT_PROMINENCE = 0.01


@dataclass(frozen=True)
class FitResult:
    degree: int
    coefficients: np.ndarray  # lowest power first
    cost: float               # raw sum of squared residuals over both channels
    rms_residual: float       # sqrt(cost / (2 n^2))


def design_matrix(domain: BoxDomain, degree: int) -> np.ndarray:
    """Real (2N, 2(degree+1)) system; unknowns ordered (Re a0, Im a0, Re a1, Im a1, ...).

    The first N rows predict Re P(z), the last N rows Im P(z).
    """
    if degree < 0:
        raise InvalidArgument("degree must be >= 0")
    z = domain.coordinates().ravel()
    powers = np.empty((z.size, degree + 1), dtype=np.complex128)
    powers[:, 0] = 1
    for m in range(1, degree + 1):
        powers[:, m] = powers[:, m - 1] * z
    n = z.size
    a = np.empty((2 * n, 2 * (degree + 1)))
    a[:n, 0::2] = powers.real
    a[:n, 1::2] = -powers.imag
    a[n:, 0::2] = powers.imag
    a[n:, 1::2] = powers.real
    return a


class PolyFitter:
    """Least-squares fits of many grids on one domain, sharing a single QR factorization."""

    def __init__(self, domain: BoxDomain, degree: int):
        self.domain, self.degree = domain, degree
        self.a = design_matrix(domain, degree)
        if self.a.shape[1] > self.a.shape[0]:
            raise IllConditioned(f"degree {degree} has more unknowns than a {domain.n}x{domain.n} grid "
                                 "has data points", condition=float("inf"))
        self.q, self.r = np.linalg.qr(self.a)
        self.condition = float(np.linalg.cond(self.r))
        if not np.isfinite(self.condition) or self.condition > MAX_CONDITION:
            raise IllConditioned(
                f"degree-{degree} monomial basis is rank-deficient on a {domain.n}x{domain.n} grid "
                f"(condition estimate {self.condition:.3g})", condition=self.condition)

    def fit_values(self, values: np.ndarray, chunk: int = 512) -> tuple[np.ndarray, np.ndarray]:
        """Fit a (count, n, n, 2) block; returns (complex coefficients (count, degree+1), costs (count,))."""
        values = np.asarray(values, dtype=np.float64)
        count = len(values)
        coeffs = np.empty((count, self.degree + 1), dtype=np.complex128)
        costs = np.empty(count)
        for start in range(0, count, chunk):
            block = values[start:start + chunk]
            b = np.concatenate([block[..., 0].reshape(len(block), -1),
                                block[..., 1].reshape(len(block), -1)], axis=1).T
            x = np.linalg.solve(self.r, self.q.T @ b)
            resid = b - self.a @ x
            costs[start:start + chunk] = np.einsum("ij,ij->j", resid, resid)
            coeffs[start:start + chunk] = (x[0::2] + 1j * x[1::2]).T
        return coeffs, costs

    def fit(self, grid: ComplexGrid) -> FitResult:
        coeffs, costs = self.fit_values(grid.channels()[None])
        cost = float(costs[0])
        return FitResult(self.degree, coeffs[0], cost, float(np.sqrt(cost / (2 * grid.domain.n ** 2))))


def polyfit(grid: ComplexGrid, degree: int) -> FitResult:
    """Minimize sum over grid points of (u - Re P)^2 + (v - Im P)^2 over complex P of ``degree``."""
    return PolyFitter(grid.domain, degree).fit(grid)


def _stack(grids) -> tuple[np.ndarray, BoxDomain]:
    if len(grids) == 0:
        raise InvalidArgument("need at least one grid")
    domain = grids[0].domain
    if any(g.domain != domain for g in grids):
        raise InvalidArgument("all grids must share one domain")
    return np.stack([g.channels() for g in grids]), domain


def fit_costs(values: np.ndarray, domain: BoxDomain, degrees) -> np.ndarray:
    """(count, len(degrees)) matrix of least-squares costs."""
    values = np.asarray(values, dtype=np.float64)
    bad = np.flatnonzero(~np.all(np.isfinite(values.reshape(len(values), -1)), axis=1))
    if bad.size:
        raise InvalidArgument(f"sample {bad[0]} contains non-finite values")
    return np.stack([PolyFitter(domain, d).fit_values(values)[1] for d in degrees], axis=1)


def mean_fit_costs(grids, degrees) -> list[float]:
    if len(degrees) == 0:
        raise InvalidArgument("need at least one degree")
    values, domain = _stack(grids)
    return [float(c) for c in fit_costs(values, domain, degrees).mean(axis=0)]


@dataclass(frozen=True)
class MinimaReport:
    count: int
    locations: list
    depths: list


def _minima_mask(v: np.ndarray, prominence: float) -> np.ndarray:
    """Interior 8-neighbour minima passing the relative-depth filter, for (..., n, n).

    Ties are broken by raster order (strictly below earlier neighbours, not above
    later ones), so an exactly tied pair or flat pit counts once instead of zero times.
    """
    c = v[..., 1:-1, 1:-1]
    n0, n1 = v.shape[-2], v.shape[-1]
    strict = np.ones(c.shape, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di or dj:
                nb = v[..., 1 + di:n0 - 1 + di, 1 + dj:n1 - 1 + dj]
                strict &= (c < nb) if (di, dj) < (0, 0) else (c <= nb)
    vmax = v.max(axis=(-2, -1), keepdims=True)
    vmin = v.min(axis=(-2, -1), keepdims=True)
    deep = c <= vmax - prominence * (vmax - vmin)
    return strict & deep


def count_minima(v: np.ndarray, prominence: float = DEFAULT_PROMINENCE) -> MinimaReport:
    if prominence < 0:
        raise InvalidArgument("prominence must be >= 0")
    v = np.asarray(v, dtype=np.float64)
    jj, kk = np.nonzero(_minima_mask(v, prominence))
    locs = [(int(j) + 1, int(k) + 1) for j, k in zip(jj, kk)]
    return MinimaReport(len(locs), locs, [float(v[j, k]) for j, k in locs])


def minima_counts(values: np.ndarray, domain: BoxDomain, prominence: float = DEFAULT_PROMINENCE,
                  chunk: int = 1024) -> np.ndarray:
    """Number of scalar-potential minima for every grid of a (count, n, n, 2) block."""
    out = np.empty(len(values), dtype=np.int64)
    for start in range(0, len(values), chunk):
        block = np.asarray(values[start:start + chunk], dtype=np.float64)
        pot = scalar_potential_arrays(block[..., 0], block[..., 1], domain.spacing)
        out[start:start + chunk] = _minima_mask(pot, prominence).sum(axis=(-2, -1))
    return out


# --- novelty report -------------------------------------------------------------------

@dataclass
class PopulationTable:
    costs: np.ndarray        # (count, len(degrees))
    minima: np.ndarray       # (count,)
    residuals: dict          # name -> (count,) arrays from residual_stat_arrays

    def summary(self, degrees) -> dict:
        hist = np.bincount(self.minima)
        return {
            "count": int(len(self.minima)),
            "mean_fit_costs": {str(d): float(c) for d, c in zip(degrees, self.costs.mean(axis=0))},
            "minima_histogram": {str(i): int(c) for i, c in enumerate(hist) if c},
            "multi_minima_fraction": float(np.mean(self.minima >= 2)),
            "residuals": {k: {"mean": float(np.mean(a)), "median": float(np.median(a)),
                              "max": float(np.max(a))} for k, a in self.residuals.items()},
        }


@dataclass
class NoveltyReport:
    degrees: list
    prominence: float
    domain: BoxDomain
    training: PopulationTable
    generated: PopulationTable

    def summary(self) -> dict:
        return {
            "config": {"degrees": list(self.degrees), "prominence": self.prominence,
                       "half_width": self.domain.half_width, "n": self.domain.n},
            "training": self.training.summary(self.degrees),
            "generated": self.generated.summary(self.degrees),
            "generated_multi_minima_fraction": float(np.mean(self.generated.minima >= 2)),
        }


def population_table(values: np.ndarray, domain: BoxDomain, degrees, prominence) -> PopulationTable:
    values = np.asarray(values, dtype=np.float64)
    residuals = {k: [] for k in ("mean_abs_w", "mean_e1", "mean_e2", "p95_e1", "p95_e2")}
    for start in range(0, len(values), 1024):
        block = values[start:start + 1024]
        stats = residual_stat_arrays(block[..., 0], block[..., 1], domain.spacing)
        for k in residuals:
            residuals[k].append(stats[k])
    return PopulationTable(fit_costs(values, domain, degrees), minima_counts(values, domain, prominence),
                           {k: np.concatenate(v) for k, v in residuals.items()})


def novelty_report(training, generated, degrees=(2, 3, 5),
                   prominence: float = DEFAULT_PROMINENCE) -> NoveltyReport:
    """Compare a training population with generated grids.

    ``training`` is a :class:`~susygan.dataset.Dataset`; ``generated`` is a list
    of :class:`ComplexGrid` or a (count, n, n, 2) array on the dataset's box.
    """
    domain = training.spec.box
    if isinstance(generated, np.ndarray):
        gen_values = generated
    else:
        gen_values, gen_domain = _stack(generated)
        if gen_domain != domain:
            raise InvalidArgument("generated grids live on a different box than the training set")
    if gen_values.shape[1:] != (domain.n, domain.n, 2):
        raise InvalidArgument(f"generated grids have shape {gen_values.shape[1:]}, expected {(domain.n, domain.n, 2)}")
    degrees = [int(d) for d in degrees]
    return NoveltyReport(degrees, prominence, domain,
                         population_table(training.values, domain, degrees, prominence),
                         population_table(gen_values, domain, degrees, prominence))


def _write_table(table: PopulationTable, degrees, path: Path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id"] + [f"cost_deg{d}" for d in degrees] + ["minima_count", "p95_e1", "p95_e2"])
        for i in range(len(table.minima)):
            w.writerow([i] + [repr(float(c)) for c in table.costs[i]] + [int(table.minima[i]),
                       repr(float(table.residuals["p95_e1"][i])), repr(float(table.residuals["p95_e2"][i]))])


def write_report(report: NoveltyReport, out_dir, extra: dict | None = None) -> dict[str, Path]:
    """Write report.json plus generated.csv / training.csv per-sample tables."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = report.summary()
    if extra:
        summary["config"].update(extra)
    paths = {"json": out / "report.json", "generated": out / "generated.csv", "training": out / "training.csv"}
    paths["json"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_table(report.generated, report.degrees, paths["generated"])
    _write_table(report.training, report.degrees, paths["training"])
    return paths
