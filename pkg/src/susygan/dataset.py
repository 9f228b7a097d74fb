"""Training sets of normalized polynomial superpotentials.

File layout (little-endian)::

    b"HGRD", u32 version=1,
    u32 max_degree, f64 coeff_half_range, f64 half_width, u32 n, u32 count, u64 seed,
    count x [ (max_degree+1) x (f64 re, f64 im), f64 scale, n*n f32 u, n*n f32 v ]

Grids are held in memory in double precision; the file stores them as float32,
so a loaded dataset carries the float32-rounded values.

Generated grids (no coefficients) go to a sample file::

    b"HSMP", u32 version=1, f64 half_width, u32 n, u32 count,
    count x [ n*n f32 u, n*n f32 v ]
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagic, FormatError, InvalidArgument, TruncatedFile, VersionMismatch
from .field_grid import BoxDomain, ComplexGrid, eval_polynomials, residual_stat_arrays

log = logging.getLogger(__name__)

MAGIC = b"HGRD"
VERSION = 1
_HEADER = struct.Struct("<4sIIddIIQ")


@dataclass(frozen=True)
class PolynomialSpec:
    max_degree: int = 2
    coeff_half_range: float = 1.0
    box: BoxDomain = BoxDomain(2.0, 64)
    count: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.max_degree < 0:
            raise InvalidArgument("max_degree must be >= 0")
        if not self.coeff_half_range > 0:
            raise InvalidArgument("coeff_half_range must be positive")
        if self.count < 1:
            raise InvalidArgument("count must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise InvalidArgument("seed must fit in an unsigned 64-bit integer")


@dataclass(eq=False)
class Dataset:
    spec: PolynomialSpec
    values: np.ndarray  # (count, n, n, 2) float64, channel 0 = Re W
    coeffs: np.ndarray  # (count, max_degree+1) complex128, before normalization
    scales: np.ndarray  # (count,) float64

    def __post_init__(self):
        n, count = self.spec.box.n, self.spec.count
        if self.values.shape != (count, n, n, 2):
            raise InvalidArgument(f"values must have shape {(count, n, n, 2)}, got {self.values.shape}")
        if self.coeffs.shape != (count, self.spec.max_degree + 1) or self.scales.shape != (count,):
            raise InvalidArgument("coefficient/scale arrays do not match the spec")

    def __len__(self):
        return self.spec.count

    def grid(self, index: int) -> ComplexGrid:
        return ComplexGrid(self.spec.box, self.values[index, ..., 0], self.values[index, ..., 1])

    @property
    def grids(self) -> list[ComplexGrid]:
        return [self.grid(i) for i in range(len(self))]


def _coefficient_stream(spec: PolynomialSpec, index: int) -> np.random.Generator:
    # Counter-style keying: the stream depends only on (seed, index).
    return np.random.default_rng([spec.seed, index])


def _draw(rng: np.random.Generator, spec: PolynomialSpec) -> np.ndarray:
    x = spec.coeff_half_range
    parts = rng.uniform(-x, x, size=(spec.max_degree + 1, 2))
    return parts[:, 0] + 1j * parts[:, 1]


def sample_coefficients(spec: PolynomialSpec, index: int) -> np.ndarray:
    """Complex coefficients (lowest power first) for sample ``index``."""
    if not 0 <= index < spec.count:
        raise InvalidArgument(f"index {index} outside [0, {spec.count})")
    return _draw(_coefficient_stream(spec, index), spec)


def synthesize(spec: PolynomialSpec, chunk: int = 512) -> Dataset:
    n = spec.box.n
    values = np.empty((spec.count, n, n, 2))
    coeffs = np.empty((spec.count, spec.max_degree + 1), dtype=np.complex128)
    scales = np.empty(spec.count)
    for start in range(0, spec.count, chunk):
        stop = min(start + chunk, spec.count)
        streams = [_coefficient_stream(spec, i) for i in range(start, stop)]
        block = np.stack([_draw(rng, spec) for rng in streams])
        w = eval_polynomials(block, spec.box)
        peak = np.maximum(np.abs(w.real).max(axis=(1, 2)), np.abs(w.imag).max(axis=(1, 2)))
        for i in np.flatnonzero(peak == 0):
            log.warning("sample %d evaluated to zero; redrawing coefficients", start + i)
            while peak[i] == 0:
                block[i] = _draw(streams[i], spec)
                w[i] = eval_polynomials(block[i:i + 1], spec.box)[0]
                peak[i] = max(np.abs(w[i].real).max(), np.abs(w[i].imag).max())
        w /= peak[:, None, None]
        values[start:stop, ..., 0] = w.real
        values[start:stop, ..., 1] = w.imag
        coeffs[start:stop] = block
        scales[start:stop] = peak
    return Dataset(spec, values, coeffs, scales)


def residual_summary(ds: Dataset, chunk: int = 1024) -> dict[str, float]:
    """Worst-case holomorphicity figures over the whole dataset."""
    worst_ratio = 0.0
    worst_p95 = 0.0
    max_dev = 0.0
    for start in range(0, len(ds), chunk):
        block = ds.values[start:start + chunk]
        stats = residual_stat_arrays(block[..., 0], block[..., 1], ds.spec.box.spacing)
        p95 = np.maximum(stats["p95_e1"], stats["p95_e2"])
        worst_p95 = max(worst_p95, float(p95.max()))
        worst_ratio = max(worst_ratio, float((p95 / stats["mean_abs_w"]).max()))
        max_dev = max(max_dev, float(np.abs(np.abs(block).max(axis=(1, 2, 3)) - 1.0).max()))
    return {"count": len(ds), "max_p95_residual": worst_p95,
            "max_p95_over_mean_abs_w": worst_ratio, "max_normalization_deviation": max_dev}


def save_dataset(ds: Dataset, path) -> None:
    spec = ds.spec
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, spec.max_degree, spec.coeff_half_range,
                              spec.box.half_width, spec.box.n, spec.count, spec.seed))
        for i in range(spec.count):
            c = ds.coeffs[i]
            fh.write(np.stack([c.real, c.imag], axis=-1).astype("<f8").tobytes())
            fh.write(np.float64(ds.scales[i]).astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(ds.values[i, ..., 0], dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(ds.values[i, ..., 1], dtype="<f4").tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagic(f"{path}: not a dataset file (magic {raw[:4]!r})")
    if len(raw) < _HEADER.size:
        raise TruncatedFile(f"{path}: header truncated")
    _, version, degree, half_range, half_width, n, count, seed = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {VERSION}")
    try:
        spec = PolynomialSpec(degree, half_range, BoxDomain(half_width, n), count, seed)
    except InvalidArgument as exc:
        raise FormatError(f"{path}: invalid header ({exc})") from exc

    ncoef = degree + 1
    sample_size = 16 * ncoef + 8 + 8 * n * n
    body = len(raw) - _HEADER.size
    if body < sample_size * count:
        idx = body // sample_size
        raise TruncatedFile(f"{path}: file truncated in sample {idx}", sample_index=idx)
    if body > sample_size * count:
        raise FormatError(f"{path}: {body - sample_size * count} trailing bytes")

    record = np.dtype([("coef", "<f8", (ncoef, 2)), ("scale", "<f8"),
                       ("u", "<f4", (n, n)), ("v", "<f4", (n, n))])
    rec = np.frombuffer(raw, dtype=record, count=count, offset=_HEADER.size)
    values = np.stack([rec["u"], rec["v"]], axis=-1).astype(np.float64)
    coeffs = rec["coef"][..., 0] + 1j * rec["coef"][..., 1]
    return Dataset(spec, values, coeffs, rec["scale"].astype(np.float64))


SAMPLE_MAGIC = b"HSMP"
_SAMPLE_HEADER = struct.Struct("<4sIdII")


def save_samples(values: np.ndarray, domain: BoxDomain, path) -> None:
    """Write a (count, n, n, 2) block of grids on ``domain``."""
    values = np.asarray(values)
    if values.ndim != 4 or values.shape[1:] != (domain.n, domain.n, 2):
        raise InvalidArgument(f"samples must have shape (count, {domain.n}, {domain.n}, 2), got {values.shape}")
    planar = np.ascontiguousarray(np.moveaxis(values, -1, 1), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_SAMPLE_HEADER.pack(SAMPLE_MAGIC, VERSION, domain.half_width, domain.n, len(values)))
        fh.write(planar.tobytes())


def load_samples(path) -> tuple[BoxDomain, np.ndarray]:
    """Read a sample file; returns the domain and (count, n, n, 2) float64 grids."""
    raw = Path(path).read_bytes()
    if raw[:4] != SAMPLE_MAGIC:
        raise BadMagic(f"{path}: not a sample file (magic {raw[:4]!r})")
    if len(raw) < _SAMPLE_HEADER.size:
        raise TruncatedFile(f"{path}: header truncated")
    _, version, half_width, n, count = _SAMPLE_HEADER.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {VERSION}")
    try:
        domain = BoxDomain(half_width, n)
    except InvalidArgument as exc:
        raise FormatError(f"{path}: invalid header ({exc})") from exc
    sample_size = 8 * n * n
    body = len(raw) - _SAMPLE_HEADER.size
    if body < sample_size * count:
        idx = body // sample_size
        raise TruncatedFile(f"{path}: file truncated in sample {idx}", sample_index=idx)
    if body > sample_size * count:
        raise FormatError(f"{path}: {body - sample_size * count} trailing bytes")
    planar = np.frombuffer(raw, "<f4", count * 2 * n * n, _SAMPLE_HEADER.size).reshape(count, 2, n, n)
    return domain, np.moveaxis(planar, 1, -1).astype(np.float64)
