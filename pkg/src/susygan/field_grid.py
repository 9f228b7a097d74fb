"""Complex field samples on a square box, Cauchy-Riemann residuals and scalar potentials.

Conventions: row index j runs along x, column index k along y, both from
-half_width to +half_width with endpoints included.  Channel 0 is Re W (u),
channel 1 is Im W (v).

Most functions come in two flavours: one taking a :class:`ComplexGrid`, and an
array version (``*_arrays``) working on ``(..., n, n)`` stacks so that whole
batches can be processed at once.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, InvalidArgument


@dataclass(frozen=True)
class BoxDomain:
    half_width: float
    n: int

    def __post_init__(self):
        if not self.half_width > 0:
            raise InvalidArgument(f"half_width must be positive, got {self.half_width}")
        if int(self.n) != self.n or self.n < 3:
            raise InvalidArgument(f"n must be an integer >= 3, got {self.n}")

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / (self.n - 1)

    def axis(self) -> np.ndarray:
        return -self.half_width + self.spacing * np.arange(self.n)

    def coordinates(self) -> np.ndarray:
        """Complex coordinates z[j, k] = x_j + i y_k."""
        t = self.axis()
        return t[:, None] + 1j * t[None, :]


@dataclass(frozen=True, eq=False)
class ComplexGrid:
    domain: BoxDomain
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        shape = (self.domain.n, self.domain.n)
        if np.shape(self.u) != shape or np.shape(self.v) != shape:
            raise InvalidArgument(
                f"channels must have shape {shape}, got {np.shape(self.u)} and {np.shape(self.v)}")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise InvalidArgument("grid contains non-finite values")

    @classmethod
    def from_complex(cls, domain: BoxDomain, w: np.ndarray) -> "ComplexGrid":
        return cls(domain, np.ascontiguousarray(w.real, dtype=np.float64),
                   np.ascontiguousarray(w.imag, dtype=np.float64))

    @property
    def w(self) -> np.ndarray:
        return self.u + 1j * self.v

    def channels(self) -> np.ndarray:
        """(n, n, 2) array in image layout."""
        return np.stack([self.u, self.v], axis=-1)

    def scaled(self, factor: float) -> "ComplexGrid":
        return ComplexGrid(self.domain, self.u * factor, self.v * factor)


@dataclass(frozen=True)
class ResidualStats:
    mean_abs_w: float
    mean_e1: float
    mean_e2: float
    p95_e1: float
    p95_e2: float

    @property
    def ratio(self) -> float:
        """Mean p95 residual relative to mean |W| (inf for a zero field with nonzero error)."""
        p95 = 0.5 * (self.p95_e1 + self.p95_e2)
        if self.mean_abs_w == 0:
            return 0.0 if p95 == 0 else float("inf")
        return p95 / self.mean_abs_w


def eval_polynomial_on_grid(coeffs, domain: BoxDomain) -> ComplexGrid:
    coeffs = np.asarray(coeffs, dtype=np.complex128)
    if coeffs.ndim != 1 or coeffs.size == 0:
        raise InvalidArgument("coefficient list must be a non-empty vector")
    return ComplexGrid.from_complex(domain, eval_polynomials(coeffs[None, :], domain)[0])


def eval_polynomials(coeffs: np.ndarray, domain: BoxDomain) -> np.ndarray:
    """Horner evaluation of a (count, degree+1) coefficient block, lowest power first.

    Returns a complex (count, n, n) array.
    """
    coeffs = np.asarray(coeffs, dtype=np.complex128)
    if coeffs.ndim != 2 or coeffs.shape[1] == 0:
        raise InvalidArgument("coefficient block must have shape (count, degree+1)")
    z = domain.coordinates()
    out = np.broadcast_to(coeffs[:, -1, None, None], (coeffs.shape[0],) + z.shape).copy()
    for m in range(coeffs.shape[1] - 2, -1, -1):
        out *= z
        out += coeffs[:, m, None, None]
    return out


def normalize(grid: ComplexGrid) -> tuple[ComplexGrid, float]:
    scale = float(max(np.max(np.abs(grid.u)), np.max(np.abs(grid.v))))
    if scale == 0.0:
        raise DegenerateInput("cannot normalize an identically zero grid")
    return ComplexGrid(grid.domain, grid.u / scale, grid.v / scale), scale


def _derivatives(u: np.ndarray, v: np.ndarray, spacing: float):
    # np.gradient: central differences inside, 3-point one-sided at the edges.
    ux, uy = np.gradient(u, spacing, axis=(-2, -1), edge_order=2)
    vx, vy = np.gradient(v, spacing, axis=(-2, -1), edge_order=2)
    return ux, uy, vx, vy


def cr_residual_arrays(u: np.ndarray, v: np.ndarray, spacing: float):
    """Scaled Cauchy-Riemann violations for a stack of grids with shape (..., n, n)."""
    if u.shape[-1] < 3 or u.shape[-2] < 3:
        raise InvalidArgument("need at least 3 points per axis")
    ux, uy, vx, vy = _derivatives(u, v, spacing)
    return spacing * (ux - vy), spacing * (uy + vx)


def cr_residuals(grid: ComplexGrid) -> tuple[np.ndarray, np.ndarray]:
    return cr_residual_arrays(grid.u, grid.v, grid.domain.spacing)


def scalar_potential_arrays(u: np.ndarray, v: np.ndarray, spacing: float) -> np.ndarray:
    ux = np.gradient(u, spacing, axis=-2, edge_order=2)
    vx = np.gradient(v, spacing, axis=-2, edge_order=2)
    return ux * ux + vx * vx


def scalar_potential(grid: ComplexGrid) -> np.ndarray:
    """|dW/dphi|^2 with dW/dphi taken as du/dx + i dv/dx."""
    return scalar_potential_arrays(grid.u, grid.v, grid.domain.spacing)


def nearest_rank_percentile(values: np.ndarray, percent: int = 95) -> np.ndarray:
    """Nearest-rank percentile over the last two axes.

    The value of rank ceil(percent/100 * N) in ascending order, computed with
    integer arithmetic so that e.g. N=100 picks exactly the 95th smallest.
    """
    flat = values.reshape(values.shape[:-2] + (-1,))
    count = flat.shape[-1]
    rank = (percent * count + 99) // 100
    return np.partition(flat, rank - 1, axis=-1)[..., rank - 1]


def residual_stat_arrays(u: np.ndarray, v: np.ndarray, spacing: float) -> dict[str, np.ndarray]:
    """Per-grid residual statistics for a (..., n, n) stack, as a dict of arrays."""
    e1, e2 = cr_residual_arrays(u, v, spacing)
    a1, a2 = np.abs(e1), np.abs(e2)
    return {
        "mean_abs_w": np.mean(np.hypot(u, v), axis=(-2, -1)),
        "mean_e1": np.mean(a1, axis=(-2, -1)),
        "mean_e2": np.mean(a2, axis=(-2, -1)),
        "p95_e1": nearest_rank_percentile(a1),
        "p95_e2": nearest_rank_percentile(a2),
    }


def residual_stats(grid: ComplexGrid) -> ResidualStats:
    stats = residual_stat_arrays(grid.u, grid.v, grid.domain.spacing)
    return ResidualStats(**{k: float(val) for k, val in stats.items()})
