"""Precomputed lookup tables of the log-density derivative (ln h)'(theta).

A table-driven prior needs d/dtheta ln h(theta) for every weight on
every update, which is far too expensive to obtain by quadrature on the
fly.  The derivative is therefore tabulated once on the uniform grid
theta_k = k * delta, k in [-n_grid, n_grid], delta = epsilon / n_grid,
using the normalized central difference

    values[k] = [h(theta_k + delta) - h(theta_k - delta)] / (2 delta h(theta_k))

which estimates (ln h)'(theta_k) to O(delta^2) because h'/h = (ln h)'.
The evaluation points theta_k +- delta coincide with neighboring grid
points, so construction costs one density evaluation per grid point
plus the two boundary neighbors.

Queries quantize theta by flooring theta/delta and clamp the key to
[-n_grid, n_grid]; outside [-epsilon, epsilon] the lookup saturates at
the edge value.  The prior scale c multiplies the stored value at query
time, so a single table serves a whole sweep over c.

Serialized layout (little endian), checksummed with CRC-32 over all
preceding bytes:

    magic 'SDRT' | version u32 | alpha f64 | gamma f64 | mu f64
    | epsilon f64 | n_grid u64 | c f64 | values (2 n_grid + 1) f64
    | crc u32
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .stable import PDF_FLOOR, QuadratureConfig, StableParams, pdf

__all__ = [
    "DerivTable",
    "DegenerateDensity",
    "ChecksumMismatch",
    "VersionMismatch",
    "build_table",
    "key_of",
    "lookup_grad",
    "lookup_grad_many",
    "serialize",
    "deserialize",
    "read_header",
    "FORMAT_VERSION",
]

FORMAT_VERSION = 1
_MAGIC = b"SDRT"
_HEADER = struct.Struct("<4sIddddQd")


class DegenerateDensity(ValueError):
    """The density underflowed somewhere on the requested grid."""


class ChecksumMismatch(ValueError):
    """Serialized table bytes fail their CRC-32 check."""


class VersionMismatch(ValueError):
    """Serialized table was written by an unsupported format version."""


@dataclass(frozen=True, eq=False)
class DerivTable:
    """Tabulated (ln h)' on a symmetric uniform grid.

    values[k + n_grid] holds the estimate at theta_k = k * delta; the
    scale factor prior_scale_c is not baked into the values.
    """

    params: StableParams
    epsilon: float
    n_grid: int
    prior_scale_c: float
    values: np.ndarray

    def __post_init__(self):
        if not (self.epsilon > 0.0):
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.n_grid < 1:
            raise ValueError(f"n_grid must be >= 1, got {self.n_grid}")
        if self.prior_scale_c < 0.0:
            raise ValueError(f"prior_scale_c must be >= 0, got {self.prior_scale_c}")
        if self.values.shape != (2 * self.n_grid + 1,):
            raise ValueError(
                f"values must have length {2 * self.n_grid + 1}, got {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("table values must be finite")

    @property
    def delta(self) -> float:
        return self.epsilon / self.n_grid

    def with_scale(self, c: float) -> "DerivTable":
        """Same grid, different query-time prior scale."""
        return replace(self, prior_scale_c=c)


def build_table(params: StableParams, epsilon: float, n_grid: int,
                prior_scale_c: float, quad: QuadratureConfig | None = None) -> DerivTable:
    """Tabulate the normalized central difference of the density.

    The density is evaluated at the 2 n_grid + 3 points j * delta,
    j in [-n_grid - 1, n_grid + 1]; every interior triple shares its
    neighbors with the adjacent grid point.
    """
    if epsilon <= 0.0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if n_grid < 1:
        raise ValueError(f"n_grid must be >= 1, got {n_grid}")
    if prior_scale_c < 0.0:
        raise ValueError(f"prior_scale_c must be >= 0, got {prior_scale_c}")
    delta = epsilon / n_grid
    js = np.arange(-n_grid - 1, n_grid + 2, dtype=np.float64)
    dens = pdf(params, js * delta, quad)
    if np.any(dens <= PDF_FLOOR):
        worst = float(js[int(np.argmin(dens))] * delta)
        raise DegenerateDensity(
            f"density underflowed on the grid near theta = {worst} "
            f"(alpha={params.alpha}, gamma={params.gamma})"
        )
    values = (dens[2:] - dens[:-2]) / (2.0 * delta * dens[1:-1])
    return DerivTable(params, epsilon, n_grid, prior_scale_c, values)


def key_of(table: DerivTable, theta: float) -> int:
    """Quantized grid key: clamp(floor(theta / delta), -n_grid, n_grid)."""
    raw = math.floor(theta / table.delta)
    return int(min(max(raw, -table.n_grid), table.n_grid))


def lookup_grad(table: DerivTable, theta: float) -> float:
    """c * tabulated (ln h)' at the quantized key of theta."""
    return table.prior_scale_c * float(table.values[key_of(table, theta) + table.n_grid])


def lookup_grad_many(table: DerivTable, thetas: np.ndarray) -> np.ndarray:
    """Vectorized lookup_grad with identical quantization semantics."""
    keys = np.floor(np.asarray(thetas, dtype=np.float64) / table.delta)
    keys = np.clip(keys, -table.n_grid, table.n_grid).astype(np.int64)
    return table.prior_scale_c * table.values[keys + table.n_grid]


def serialize(table: DerivTable) -> bytes:
    """Binary encoding with trailing CRC-32 over all preceding bytes."""
    head = _HEADER.pack(
        _MAGIC,
        FORMAT_VERSION,
        table.params.alpha,
        table.params.gamma,
        table.params.mu,
        table.epsilon,
        table.n_grid,
        table.prior_scale_c,
    )
    body = head + np.ascontiguousarray(table.values, dtype="<f8").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def read_header(data: bytes) -> dict:
    """Decode table metadata without touching the value block.

    Only the fixed-size header is parsed, so this works on a prefix of
    the file as long as it covers the header.
    """
    if len(data) < _HEADER.size:
        raise ValueError(f"buffer too short for table header ({len(data)} bytes)")
    magic, version, alpha, gamma, mu, epsilon, n_grid, c = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"format version {version}, supported: {FORMAT_VERSION}")
    return {
        "version": version,
        "alpha": alpha,
        "gamma": gamma,
        "mu": mu,
        "epsilon": epsilon,
        "n_grid": int(n_grid),
        "prior_scale_c": c,
    }


def deserialize(data: bytes) -> DerivTable:
    """Inverse of serialize; verifies checksum, version, and length."""
    if len(data) < _HEADER.size + 4:
        raise ValueError(f"buffer too short for a table ({len(data)} bytes)")
    (stored,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != stored:
        raise ChecksumMismatch("table bytes fail CRC-32 verification")
    meta = read_header(data)
    n_grid = meta["n_grid"]
    count = 2 * n_grid + 1
    expected = _HEADER.size + 8 * count + 4
    if len(data) != expected:
        raise ValueError(f"expected {expected} bytes for n_grid={n_grid}, got {len(data)}")
    values = np.frombuffer(data, dtype="<f8", count=count, offset=_HEADER.size).copy()
    params = StableParams(meta["alpha"], 0.0, meta["gamma"], meta["mu"])
    return DerivTable(params, meta["epsilon"], n_grid, meta["prior_scale_c"], values)
