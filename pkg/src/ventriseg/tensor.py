"""Rank-4 array helpers, seeded random streams and the ``.vt4`` blob format.

Every image, activation, mask and gradient in the package is a plain
``numpy.ndarray`` of shape ``(batch, channels, height, width)``; this module
holds the few primitives shared by everything built on top of that
convention.

The ``.vt4`` blob layout (little-endian)::

    offset  size  content
    0       4     magic b"VT4\\0"
    4       32    four uint64 dims (batch, channels, height, width)
    36      8*N   float64 payload, row-major b -> c -> y -> x
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

MAGIC = b"VT4\0"
_HEADER = struct.Struct("<4s4Q")


def as_tensor4(x, dtype=np.float64) -> np.ndarray:
    """Return ``x`` as a C-contiguous rank-4 array, validating its shape."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ValueError(f"expected a rank-4 tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"all tensor dims must be >= 1, got {arr.shape}")
    return arr


def flat_index(shape, b, c, y, x):
    """Row-major offset of element ``(b, c, y, x)`` in a tensor of ``shape``."""
    _, C, H, W = shape
    return ((b * C + c) * H + y) * W + x


def unflat_index(shape, index):
    """Inverse of :func:`flat_index`."""
    _, C, H, W = shape
    index, x = divmod(index, W)
    index, y = divmod(index, H)
    b, c = divmod(index, C)
    return b, c, y, x


def to_bytes(t) -> bytes:
    t = as_tensor4(t)
    return _HEADER.pack(MAGIC, *t.shape) + t.astype("<f8").tobytes(order="C")


def from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise ValueError("truncated tensor blob")
    magic, *dims = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    n = int(np.prod(dims))
    payload = blob[_HEADER.size:]
    if len(payload) != 8 * n:
        raise ValueError(f"payload holds {len(payload)} bytes, dims {tuple(dims)} need {8 * n}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def save_tensor(path, t) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(t))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


class Rng:
    """Seeded random stream with label-derived child streams.

    Backed by numpy's PCG64 fed through ``SeedSequence``. A stream is keyed
    by ``(seed, path)`` where ``path`` is the tuple of labels used to derive
    it, so ``Rng(7).child("a")`` always yields the same numbers and never
    the numbers of ``Rng(7).child("b")``.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        words = [self.seed & 0xFFFFFFFF, self.seed >> 32]
        for label in self.path:
            digest = hashlib.sha256(label.encode("utf-8")).digest()
            words.extend(struct.unpack("<4I", digest[:16]))
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))

    def child(self, label) -> "Rng":
        return Rng(self.seed, self.path + (str(label),))

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path!r})"

    # thin pass-throughs so callers don't reach for .generator everywhere
    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)


def rng_normal(rng: Rng, shape) -> np.ndarray:
    """Standard-normal tensor; identical ``(seed, path, shape)`` give identical bits."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or min(shape) < 1:
        raise ValueError(f"invalid tensor shape {shape}")
    return rng.generator.standard_normal(shape)


def percentile(values, p) -> float:
    """Linear-interpolation percentile.

    Sorts the values, takes rank ``r = p/100 * (n - 1)`` and interpolates
    between the elements at ``floor(r)`` and ``ceil(r)``.
    """
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("empty sample")
    if not 0.0 <= p <= 100.0:
        raise ValueError(f"percentile must lie in [0, 100], got {p}")
    r = p / 100.0 * (v.size - 1)
    lo = int(np.floor(r))
    hi = int(np.ceil(r))
    return float(v[lo] + (r - lo) * (v[hi] - v[lo]))
