"""Dense tensor utilities: axis permutation, the TNS file format, and a
counter-based deterministic RNG.

Tensors are plain C-order ``numpy.ndarray`` values of dtype float32 or
float64, rank 1..5. The TNS layout (little-endian, no padding)::

    bytes 0-3   magic  b"ANCT"
    byte  4     version, currently 1
    byte  5     dtype code: 0 = float32, 1 = float64
    byte  6     rank, 1..5
    byte  7     reserved, 0
    rank x u32  extents
    payload     row-major values

Randomness uses numpy's Philox bit generator: a 64-bit-keyed counter-based
stream, so identical seeds give identical sequences on every platform and
for every worker count.
"""

from __future__ import annotations

import struct
from typing import Sequence

import numpy as np

from .errors import FormatError, InvalidArgumentError, IoError

MAGIC = b"ANCT"
VERSION = 1
MAX_RANK = 5

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


def _check_tensor(t: np.ndarray) -> np.ndarray:
    if t.dtype not in _DTYPE_CODES:
        raise InvalidArgumentError(f"unsupported dtype {t.dtype}; use float32/float64")
    if not 1 <= t.ndim <= MAX_RANK:
        raise InvalidArgumentError(f"rank must be 1..{MAX_RANK}, got {t.ndim}")
    if any(e < 1 for e in t.shape):
        raise InvalidArgumentError(f"all extents must be >= 1, got shape {t.shape}")
    return np.ascontiguousarray(t)


def permute(t: np.ndarray, order: Sequence[int]) -> np.ndarray:
    """Reorder axes; element at the permuted index equals the source element.

    ``permute(c, (2, 3, 0, 1))`` on a rank-4 correlation volume swaps the
    matching direction.
    """
    order = tuple(order)
    if sorted(order) != list(range(t.ndim)):
        raise InvalidArgumentError(
            f"order {order} is not a permutation of axes for rank-{t.ndim} tensor"
        )
    return np.ascontiguousarray(np.transpose(t, order))


def tns_write(t: np.ndarray, path) -> None:
    """Write ``t`` to ``path`` in TNS layout; round-trips bit-exactly."""
    arr = _check_tensor(t)
    code = _DTYPE_CODES[arr.dtype]
    header = MAGIC + struct.pack("<BBBB", VERSION, code, arr.ndim, 0)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(dims)
            fh.write(payload)
    except OSError as exc:
        raise IoError(f"cannot write tensor to {path}: {exc}") from exc


def tns_read(path) -> np.ndarray:
    """Read a TNS file; raises FormatError on any layout violation."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read tensor from {path}: {exc}") from exc

    if len(blob) < 8:
        raise FormatError(f"{path}: file shorter than the 8-byte header")
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, code, rank, reserved = struct.unpack("<BBBB", blob[4:8])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if not 1 <= rank <= MAX_RANK:
        raise FormatError(f"{path}: rank {rank} outside 1..{MAX_RANK}")
    if reserved != 0:
        raise FormatError(f"{path}: reserved header byte is {reserved}, expected 0")

    dims_end = 8 + 4 * rank
    if len(blob) < dims_end:
        raise FormatError(f"{path}: truncated extent table")
    dims = struct.unpack(f"<{rank}I", blob[8:dims_end])
    if any(d < 1 for d in dims):
        raise FormatError(f"{path}: zero extent in dims {dims}")

    dtype = _CODE_DTYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    payload = blob[dims_end:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected} for dims {dims}"
        )
    arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype)
    return arr.reshape(dims)


class Rng:
    """Seedable counter-based random stream (Philox under the hood).

    ``child(tag)`` derives an independent stream from (seed, tag) without
    consuming state, which keeps shuffling reproducible across training
    resumes.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._path = _path
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self._path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, tag: int) -> "Rng":
        return Rng(self.seed, self._path + (int(tag),))

    def uniform(self, lo: float, hi: float, dims: Sequence[int], dtype=np.float64) -> np.ndarray:
        if not lo < hi:
            raise InvalidArgumentError(f"uniform requires lo < hi, got [{lo}, {hi})")
        return self._gen.uniform(lo, hi, size=tuple(dims)).astype(dtype)

    def normal(self, mean: float, std: float, dims: Sequence[int], dtype=np.float64) -> np.ndarray:
        if not std > 0:
            raise InvalidArgumentError(f"normal requires std > 0, got {std}")
        return self._gen.normal(mean, std, size=tuple(dims)).astype(dtype)

    def integers(self, lo: int, hi: int, n: int) -> np.ndarray:
        return self._gen.integers(lo, hi, size=n)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        if k > n:
            raise InvalidArgumentError(f"cannot draw {k} items from {n} without replacement")
        return self._gen.choice(n, size=k, replace=False)


def rng_fill(r: Rng, dims: Sequence[int], distribution: str, *,
             lo: float = 0.0, hi: float = 1.0, mean: float = 0.0, std: float = 1.0,
             dtype=np.float64) -> np.ndarray:
    """Draw a tensor from ``uniform(lo, hi)`` or ``normal(mean, std)``."""
    if distribution == "uniform":
        return r.uniform(lo, hi, dims, dtype=dtype)
    if distribution == "normal":
        return r.normal(mean, std, dims, dtype=dtype)
    raise InvalidArgumentError(f"unknown distribution {distribution!r}")
