"""Uniform grids on the flat torus [0,1)^d, fields, norms and time sampling.

Fields are immutable snapshots of periodic functions at the nodes i/n.
Spectral coefficients are computed lazily with real FFTs over the trailing
``d`` axes, so every helper here also accepts arrays with extra leading axes
(vector components, time samples).
"""

from __future__ import annotations

import itertools
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
import scipy.fft as sfft

from .errors import AliasingError, DomainError, ResolutionError, SamplingError

MEAN_TOL = 1e-12
TAIL_TOL = 1e-8
SAMPLING_TOL = 1e-12
QUADRATURE_TOL = 1e-6
RESIDUAL_TOL = 1e-5
NODES_PER_FEATURE = 16


def fft_workers() -> int:
    """Thread count for FFTs, capped by the MKF_THREADS environment variable."""
    try:
        return max(1, int(os.environ.get("MKF_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class GridSpec:
    """Tensor grid with ``n`` nodes per axis on the torus of dimension ``dim``."""

    dim: int
    n: int

    def __post_init__(self):
        if self.dim < 2:
            raise DomainError(f"dimension must be at least 2, got {self.dim}")
        if self.n < 4 or self.n % 2:
            raise DomainError(f"points per axis must be even and >= 4, got {self.n}")
        if self.n & (self.n - 1):
            raise DomainError(f"points per axis must be a power of two, got {self.n}")

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dim

    @property
    def axes(self) -> tuple:
        return tuple(range(-self.dim, 0))

    @property
    def size(self) -> int:
        return self.n ** self.dim

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n) / self.n

    @cached_property
    def coords(self) -> tuple:
        """Broadcastable coordinate arrays, one per axis."""
        out = []
        for i in range(self.dim):
            shape = [1] * self.dim
            shape[i] = self.n
            out.append(self.nodes.reshape(shape))
        return tuple(out)

    @cached_property
    def modes(self) -> tuple:
        """Integer wave numbers of the real-FFT layout, broadcastable."""
        out = []
        for i in range(self.dim):
            if i == self.dim - 1:
                k = np.arange(self.n // 2 + 1, dtype=float)
            else:
                k = sfft.fftfreq(self.n, 1.0 / self.n)
            shape = [1] * self.dim
            shape[i] = k.size
            out.append(k.reshape(shape))
        return tuple(out)

    @cached_property
    def derivative_modes(self) -> tuple:
        """Wave numbers with the Nyquist mode removed.

        A real grid function cannot carry an odd derivative of its Nyquist
        mode, so every derivative symbol is built from these; that keeps
        div(grad) and the Laplacian the same operator.
        """
        half = self.n // 2
        return tuple(np.where(np.abs(k) == half, 0.0, k) for k in self.modes)

    @cached_property
    def k_squared(self) -> np.ndarray:
        """|2πk|^2 on the real-FFT layout (Nyquist removed)."""
        return sum((2 * np.pi * k) ** 2 for k in self.derivative_modes)

    @cached_property
    def spectral_weights(self) -> np.ndarray:
        """Multiplicity of each real-FFT coefficient in Parseval sums."""
        k = self.modes[-1]
        w = np.where((k == 0) | (k == self.n // 2), 1.0, 2.0)
        return np.broadcast_to(w, self.spectral_shape)

    @property
    def spectral_shape(self) -> tuple:
        return (self.n,) * (self.dim - 1) + (self.n // 2 + 1,)

    def fft(self, values: np.ndarray) -> np.ndarray:
        return sfft.rfftn(values, axes=self.axes, workers=fft_workers())

    def ifft(self, coeffs: np.ndarray) -> np.ndarray:
        return sfft.irfftn(coeffs, s=self.shape, axes=self.axes, workers=fft_workers())

    def mean(self, values: np.ndarray) -> np.ndarray:
        return values.mean(axis=self.axes)


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: GridSpec
    values: np.ndarray
    evaluator: Optional[Callable] = field(default=None, repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise ValueError(f"values have shape {v.shape}, grid expects {self.grid.shape}")
        object.__setattr__(self, "values", v)

    @cached_property
    def coeffs(self) -> np.ndarray:
        return self.grid.fft(self.values)

    def mean(self) -> float:
        return float(self.values.mean())

    def __add__(self, other):
        return ScalarField(self.grid, self.values + _vals(other))

    def __sub__(self, other):
        return ScalarField(self.grid, self.values - _vals(other))

    def __mul__(self, other):
        return ScalarField(self.grid, self.values * _vals(other))

    __rmul__ = __mul__

    def __neg__(self):
        return ScalarField(self.grid, -self.values)


@dataclass(frozen=True, eq=False)
class VectorField:
    """``dim`` components stacked along the leading axis of ``values``."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        expected = (self.grid.dim,) + self.grid.shape
        if v.shape != expected:
            raise ValueError(f"values have shape {v.shape}, expected {expected}")
        object.__setattr__(self, "values", v)

    @property
    def components(self) -> tuple:
        return tuple(ScalarField(self.grid, c) for c in self.values)

    def __add__(self, other):
        return VectorField(self.grid, self.values + _vals(other))

    def __sub__(self, other):
        return VectorField(self.grid, self.values - _vals(other))

    def __mul__(self, other):
        return VectorField(self.grid, self.values * _vals(other))

    __rmul__ = __mul__

    def __neg__(self):
        return VectorField(self.grid, -self.values)


def _vals(x):
    return x.values if isinstance(x, (ScalarField, VectorField)) else x


def as_field(grid: GridSpec, values: np.ndarray):
    """Wrap an array as a scalar or vector field depending on its shape."""
    values = np.asarray(values, dtype=float)
    if values.shape == grid.shape:
        return ScalarField(grid, values)
    return VectorField(grid, values)


def sample(fn: Callable, grid: GridSpec) -> ScalarField:
    """Evaluate ``fn(x)`` at the grid nodes; ``x`` is a tuple of coordinate arrays."""
    values = np.broadcast_to(np.asarray(fn(grid.coords), dtype=float), grid.shape).copy()
    if not np.all(np.isfinite(values)):
        raise SamplingError("evaluator returned non-finite values")
    return ScalarField(grid, values, evaluator=fn)


def sample_vector(fn: Callable, grid: GridSpec) -> VectorField:
    raw = fn(grid.coords)
    values = np.stack([np.broadcast_to(np.asarray(c, dtype=float), grid.shape) for c in raw])
    if not np.all(np.isfinite(values)):
        raise SamplingError("evaluator returned non-finite values")
    return VectorField(grid, values)


def dilate(f: ScalarField, lam: int) -> ScalarField:
    """Return f(λx mod 1)."""
    lam = int(lam)
    if lam < 1:
        raise DomainError("dilation factor must be a positive integer")
    if lam == 1:
        return f
    if f.evaluator is not None:
        fn = f.evaluator
        return sample(lambda x: fn(tuple((lam * xi) % 1.0 for xi in x)), f.grid)
    if f.grid.n % lam:
        raise ResolutionError(f"dilation {lam} does not divide n={f.grid.n} and no evaluator")
    idx = (lam * np.arange(f.grid.n)) % f.grid.n
    return ScalarField(f.grid, f.values[np.ix_(*([idx] * f.grid.dim))])


def translate(f: ScalarField, y) -> ScalarField:
    """Return f(x - y)."""
    y = np.asarray(y, dtype=float) % 1.0
    n = f.grid.n
    shifts = y * n
    if np.allclose(shifts, np.round(shifts), atol=1e-12):
        return ScalarField(f.grid, np.roll(f.values, tuple(int(round(s)) for s in shifts),
                                           axis=tuple(range(f.grid.dim))))
    if f.evaluator is None:
        raise ResolutionError("off-grid translation needs an analytic evaluator")
    fn = f.evaluator
    return sample(lambda x: fn(tuple((xi - yi) % 1.0 for xi, yi in zip(x, y))), f.grid)


def lp_array(values: np.ndarray, p: float, axes=None) -> np.ndarray:
    """Node-average L^p norm over ``axes`` (default: all)."""
    if p < 1:
        raise DomainError(f"L^p needs p >= 1, got {p}")
    a = np.abs(values)
    if np.isinf(p):
        return a.max(axis=axes)
    if p == 1:
        return a.mean(axis=axes)
    if p == 2:
        return np.sqrt((a * a).mean(axis=axes))
    return (a ** p).mean(axis=axes) ** (1.0 / p)


def lp_norm(f, p: float) -> float:
    """L^p norm of a scalar field; for vector fields the Euclidean length is used."""
    v = f.values
    if isinstance(f, VectorField):
        v = np.sqrt((v * v).sum(axis=0))
    return float(lp_array(v, p))


def multi_indices(dim: int, order: int):
    """All multi-indices of length ``dim`` with total order exactly ``order``."""
    for combo in itertools.combinations_with_replacement(range(dim), order):
        alpha = [0] * dim
        for i in combo:
            alpha[i] += 1
        yield tuple(alpha)


def spectral_tail_fraction(grid: GridSpec, coeffs: np.ndarray) -> float:
    """Energy fraction carried by modes with some |k_i| above n/4."""
    power = np.abs(coeffs) ** 2 * grid.spectral_weights
    total = power.sum()
    if total == 0:
        return 0.0
    high = np.zeros(grid.spectral_shape, dtype=bool)
    for k in grid.modes:
        high = high | (np.abs(k) > grid.n // 4)
    return float(power[..., high].sum() / total)


def partial_derivative(grid: GridSpec, coeffs: np.ndarray, alpha) -> np.ndarray:
    sym = 1.0
    for k, a in zip(grid.derivative_modes, alpha):
        if a:
            sym = sym * (2j * np.pi * k) ** a
    return grid.ifft(coeffs * sym)


def sobolev_norm(f: ScalarField, k: int, p: float, check: bool = True) -> float:
    """Sum of the L^p norms of all partial derivatives of order at most ``k``."""
    if k < 0:
        raise DomainError("Sobolev order must be nonnegative")
    if p < 1:
        raise DomainError(f"L^p needs p >= 1, got {p}")
    if check and k > 0:
        tail = spectral_tail_fraction(f.grid, f.coeffs)
        if tail > TAIL_TOL:
            raise AliasingError(f"spectral tail above n/4 carries {tail:.2e} of the energy")
    total = lp_norm(f, p)
    for order in range(1, k + 1):
        for alpha in multi_indices(f.grid.dim, order):
            total += float(lp_array(partial_derivative(f.grid, f.coeffs, alpha), p))
    return total


def require_resolution(grid: GridSpec, fastest: float, what: str = "field") -> None:
    """Enforce n >= 16·m for a field whose fastest oscillation parameter is m."""
    need = NODES_PER_FEATURE * fastest
    if grid.n < need:
        raise ResolutionError(
            f"{what} needs n >= {NODES_PER_FEATURE}*{fastest:g} = {need:g}, grid has n={grid.n}")


@dataclass(frozen=True)
class TimeGrid:
    T: float
    K: int

    def __post_init__(self):
        if not self.T > 0:
            raise DomainError("time horizon must be positive")
        if self.K < 8:
            raise DomainError("need at least K=8 time intervals")

    @property
    def dt(self) -> float:
        return self.T / self.K

    @cached_property
    def times(self) -> np.ndarray:
        return np.arange(self.K + 1) * (self.T / self.K)


class TimeField:
    """A scalar (rank 0) or vector (rank 1) field at every time sample.

    Snapshots come from ``getter(k)`` and are cached in a small LRU, so large
    runs only hold the samples they are working on.  ``dgetter(k)``
    optionally returns the exact time derivative at sample k; ``evaluator``
    and ``derivative`` are closed forms ``fn(t, x)`` when known.
    """

    def __init__(self, timegrid: TimeGrid, grid: GridSpec, rank: int, getter: Callable,
                 dgetter: Optional[Callable] = None, evaluator: Optional[Callable] = None,
                 derivative: Optional[Callable] = None, cache_size: int = 6):
        self.timegrid = timegrid
        self.grid = grid
        self.rank = rank
        self._getter = getter
        self._dgetter = dgetter
        self.evaluator = evaluator
        self.derivative = derivative
        self._cache = OrderedDict()
        self._cache_size = cache_size

    @classmethod
    def from_array(cls, timegrid, grid, values, dvalues=None):
        values = np.asarray(values, dtype=float)
        if values.shape[0] != timegrid.K + 1 or values.shape[-grid.dim:] != grid.shape:
            raise ValueError(f"snapshot array of shape {values.shape} does not match grids")
        rank = values.ndim - 1 - grid.dim
        dget = None if dvalues is None else (lambda k: dvalues[k])
        return cls(timegrid, grid, rank, lambda k: values[k], dget, cache_size=0)

    @property
    def shape(self) -> tuple:
        return ((self.grid.dim,) if self.rank else ()) + self.grid.shape

    @property
    def has_exact_derivative(self) -> bool:
        return self._dgetter is not None

    def snapshot(self, k: int) -> np.ndarray:
        k = int(k)
        if k < 0 or k > self.timegrid.K:
            raise IndexError(k)
        if self._cache_size == 0:
            return self._getter(k)
        if k in self._cache:
            self._cache.move_to_end(k)
            return self._cache[k]
        val = self._getter(k)
        self._cache[k] = val
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return val

    def dsnapshot(self, k: int):
        return None if self._dgetter is None else self._dgetter(int(k))

    @property
    def values(self) -> np.ndarray:
        """All snapshots stacked along a leading time axis."""
        return np.stack([self.snapshot(k) for k in range(self.timegrid.K + 1)])

    def __getitem__(self, k: int):
        return as_field(self.grid, self.snapshot(k))

    def __len__(self):
        return self.timegrid.K + 1


def _snap(fn, t, grid):
    raw = fn(t, grid.coords)
    if isinstance(raw, (tuple, list)):
        out = np.stack([np.broadcast_to(np.asarray(c, float), grid.shape) for c in raw])
    else:
        out = np.broadcast_to(np.asarray(raw, float), grid.shape).copy()
    if not np.all(np.isfinite(out)):
        raise SamplingError("evaluator returned non-finite values")
    return out


def time_field_from(fn: Callable, timegrid: TimeGrid, grid: GridSpec,
                    dfn: Optional[Callable] = None) -> TimeField:
    """Lazily sample a closed form ``fn(t, x)`` (scalar or tuple of components)."""
    rank = 1 if isinstance(fn(0.0, grid.coords), (tuple, list)) else 0
    times = timegrid.times
    dget = None if dfn is None else (lambda k: _snap(dfn, times[k], grid))
    return TimeField(timegrid, grid, rank, lambda k: _snap(fn, times[k], grid), dget,
                     evaluator=fn, derivative=dfn)


_CENTRAL = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
_EDGE = (
    np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / 12.0,
    np.array([-3.0, -10.0, 18.0, -6.0, 1.0]) / 12.0,
)


def stencil_derivative(values, k: int, dt: float) -> np.ndarray:
    """Fourth-order finite difference in time at sample ``k``.

    ``values`` is an array with a leading time axis or a TimeField.
    """
    get = values.snapshot if isinstance(values, TimeField) else values.__getitem__
    K = len(values) - 1
    if 2 <= k <= K - 2:
        w, idx = _CENTRAL, range(k - 2, k + 3)
    elif k < 2:
        w, idx = _EDGE[k], range(0, 5)
    else:
        w, idx = -_EDGE[K - k][::-1], range(K - 4, K + 1)
    out = 0.0
    for wi, i in zip(w, idx):
        if wi:
            out = out + wi * get(i)
    return out / dt


def time_derivative_array(F: TimeField, k: int, mode: str = "auto") -> np.ndarray:
    """Raw array of ∂_t F at sample ``k``; ``mode='stencil'`` ignores exact derivatives."""
    if mode not in ("auto", "stencil"):
        raise DomainError(f"unknown time-derivative mode {mode!r}")
    if mode == "auto" and F.has_exact_derivative:
        return F.dsnapshot(k)
    return stencil_derivative(F, k, F.timegrid.dt)


def time_derivative(F: TimeField, k: int, mode: str = "auto"):
    return as_field(F.grid, time_derivative_array(F, k, mode))


_MAGIC = b"MKFD"
_HEADER = struct.Struct("<4sIIIId")
MKFD_VERSION = 1


def dump_mkfd(path, F: TimeField) -> None:
    """Write all snapshots of ``F`` as little-endian f64 behind the MKFD header."""
    header = _HEADER.pack(_MAGIC, MKFD_VERSION, F.grid.dim, F.grid.n, F.timegrid.K,
                          float(F.timegrid.T))
    with open(path, "wb") as fh:
        fh.write(header)
        for k in range(F.timegrid.K + 1):
            fh.write(np.ascontiguousarray(F.snapshot(k), dtype="<f8").tobytes())


def load_mkfd(path) -> TimeField:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError("file too short for an MKFD header")
    magic, version, d, n, K, T = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != MKFD_VERSION:
        raise ValueError(f"unsupported MKFD version {version}")
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    per_snapshot = n ** d
    if body.size % ((K + 1) * per_snapshot):
        raise ValueError("payload length does not match header")
    comps = body.size // ((K + 1) * per_snapshot)
    if comps not in (1, d):
        raise ValueError(f"payload holds {comps} components per snapshot, expected 1 or {d}")
    grid = GridSpec(d, n)
    shape = (K + 1,) + ((d,) if comps == d and comps > 1 else ()) + grid.shape
    return TimeField.from_array(TimeGrid(T, K), grid, body.reshape(shape).astype(float))
