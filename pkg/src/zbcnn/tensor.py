"""Dense 4-D tensors and the seeded random source.

Storage is a C-contiguous numpy array in (n, c, h, w) order, so the flat
buffer is row-major with w varying fastest. Only float32 and float64 are
allowed and the two never mix.

Randomness comes from numpy's PCG64 bit generator. A child stream for worker
``i`` of a parent seeded with ``s`` is seeded with the entropy pair ``(s, i)``
through :class:`numpy.random.SeedSequence`, which keeps child streams
independent of each other and of the parent.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, ShapeError, SizeError, UsageError

PRECISIONS = {32: np.float32, 64: np.float64}
_MAX_ELEMENTS = np.iinfo(np.int64).max // 8


def as_dtype(precision) -> np.dtype:
    if isinstance(precision, int):
        if precision not in PRECISIONS:
            raise DomainError(f"precision must be 32 or 64, got {precision}")
        return np.dtype(PRECISIONS[precision])
    dtype = np.dtype(precision)
    if dtype not in (np.float32, np.float64):
        raise DomainError(f"unsupported scalar type {dtype}")
    return dtype


class Rng:
    """Seeded pseudo-random source (PCG64)."""

    def __init__(self, seed: int | Sequence[int]):
        if isinstance(seed, (int, np.integer)):
            self.seed = int(seed)
            entropy = self.seed
        else:
            self.seed = tuple(int(s) for s in seed)
            entropy = list(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def child(self, index: int) -> "Rng":
        base = list(self.seed) if isinstance(self.seed, tuple) else [self.seed]
        return Rng(tuple(base + [int(index)]))

    def uniform(self, lo=0.0, hi=1.0, size=None):
        return self._gen.uniform(lo, hi, size)

    def gaussian(self, mean=0.0, sigma=1.0, size=None):
        return self._gen.normal(mean, sigma, size)

    def bernoulli(self, p: float, size=None):
        if not 0.0 <= p <= 1.0:
            raise DomainError(f"bernoulli p must lie in [0, 1], got {p}")
        return self._gen.random(size) < p

    def integers(self, lo: int, hi: int, size=None):
        return self._gen.integers(lo, hi, size)

    def shuffle(self, items: list) -> list:
        """Shuffle a list in place and return it."""
        order = self._gen.permutation(len(items))
        items[:] = [items[i] for i in order]
        return items

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


class Tensor:
    """Immutable-by-convention 4-D array wrapper.

    ``array`` exposes the backing ndarray; in-place mutation goes through
    :meth:`assign` only.
    """

    __slots__ = ("_array",)

    def __init__(self, array, precision=None):
        arr = np.asarray(array)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be 4-D, got shape {arr.shape}")
        dtype = as_dtype(precision if precision is not None else
                         (arr.dtype if arr.dtype in (np.float32, np.float64) else 64))
        self._array = np.ascontiguousarray(arr, dtype=dtype)

    @property
    def array(self) -> np.ndarray:
        return self._array

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self._array.shape)

    @property
    def dtype(self) -> np.dtype:
        return self._array.dtype

    @property
    def precision(self) -> int:
        return 32 if self._array.dtype == np.float32 else 64

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the scalar buffer."""
        return self._array.reshape(-1)

    def __len__(self) -> int:
        return self._array.size

    def assign(self, index, value) -> None:
        self._array[index] = value

    def copy(self) -> "Tensor":
        return Tensor(self._array.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return (self.shape == other.shape and self.dtype == other.dtype
                and np.array_equal(self._array, other._array))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, precision={self.precision})"


def _check_shape(shape: Iterable[int]) -> tuple[int, int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ShapeError(f"expected 4 extents, got {len(shape)}")
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative extent in {shape}")
    if math.prod(shape) > _MAX_ELEMENTS:
        raise SizeError(f"tensor of shape {shape} exceeds addressable size")
    return shape


def tensor_new(shape, fill=("constant", 0.0), rng: Rng | None = None, precision=32) -> Tensor:
    """Create a tensor.

    ``fill`` is ``("constant", c)``, ``("gaussian", mean, sigma)`` or
    ``("uniform", lo, hi)``; random fills need ``rng``.
    """
    shape = _check_shape(shape)
    dtype = as_dtype(precision)
    kind, *args = fill if isinstance(fill, tuple) else ("constant", fill)
    if kind == "constant":
        return Tensor(np.full(shape, args[0], dtype=dtype))
    if rng is None:
        raise UsageError(f"{kind} fill needs an rng")
    if kind == "gaussian":
        values = rng.gaussian(args[0], args[1], shape)
    elif kind == "uniform":
        values = rng.uniform(args[0], args[1], shape)
    else:
        raise DomainError(f"unknown fill {kind!r}")
    return Tensor(values.astype(dtype))


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(op: str, a: Tensor, b=None, fn: Callable | None = None) -> Tensor:
    """Apply ``add``/``sub``/``mul`` (tensor or scalar ``b``), ``scale`` or ``map``."""
    if op == "map":
        if fn is None:
            raise UsageError("map needs fn")
        return Tensor(np.vectorize(fn, otypes=[a.dtype])(a.array).astype(a.dtype))
    if op == "scale":
        return Tensor((a.array * a.dtype.type(b)).astype(a.dtype))
    if op not in _BINARY:
        raise DomainError(f"unknown elementwise op {op!r}")
    if isinstance(b, Tensor):
        if b.shape != a.shape:
            raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
        if b.dtype != a.dtype:
            raise DomainError(f"mixed precision {a.dtype} vs {b.dtype}")
        return Tensor(_BINARY[op](a.array, b.array))
    return Tensor(_BINARY[op](a.array, a.dtype.type(b)))


def reduce(op: str, t: Tensor, over: str = "all"):
    """Reduce a tensor.

    ``over="all"`` returns a scalar (``argmax`` gives the flat index).
    ``over="per-channel-spatial"`` returns ``(values, positions)`` where both
    are indexed by (n, c) and positions hold (y, x) pairs; for ``sum`` the
    positions are ``None``. Ties resolve to the smallest linear index. Sums use
    :func:`math.fsum`, which is exactly rounded and so independent of order.
    """
    arr = t.array
    if over == "all":
        if arr.size == 0:
            raise DomainError("reduction over an empty tensor")
        flat = arr.reshape(-1)
        if op == "sum":
            return math.fsum(flat.tolist())
        if op == "max":
            return flat[int(np.argmax(flat))].item()
        if op == "argmax":
            return int(np.argmax(flat))
        raise DomainError(f"unknown reduction {op!r}")
    if over != "per-channel-spatial":
        raise DomainError(f"unknown reduction axis {over!r}")
    n, c, h, w = arr.shape
    if h * w == 0:
        raise DomainError("reduction over an empty spatial extent")
    flat = arr.reshape(n, c, h * w)
    if op == "sum":
        values = np.array([[math.fsum(flat[i, j].tolist()) for j in range(c)] for i in range(n)])
        return values, None
    if op not in ("max", "argmax"):
        raise DomainError(f"unknown reduction {op!r}")
    idx = np.argmax(flat, axis=2)
    values = np.take_along_axis(flat, idx[..., None], axis=2)[..., 0]
    positions = np.stack([idx // w, idx % w], axis=-1)
    return values, positions
