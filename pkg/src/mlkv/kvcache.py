"""Preallocated key/value cache with exact element accounting.

The cache holds one buffer pair per KV layer group. Each buffer has shape
``(b, capacity, g, d_k)``; keys are stored after the rotary transform, so a
reader needs nothing but the cache length to use them.
"""

from fractions import Fraction

import numpy as np

from .errors import CapacityError, ValidationError
from .numerics import STORAGE_DTYPE

BYTE_WIDTHS = (2, 4, 8)


def cache_elements(b, s, m, g, d_k):
    """Element count of a cache holding ``s`` positions: ``2*b*s*m*g*d_k``."""
    return 2 * b * s * m * g * d_k


def cache_bytes(elements, bytes_per_element):
    if bytes_per_element not in BYTE_WIDTHS:
        raise ValidationError(f"unsupported element width {bytes_per_element}; expected one of {BYTE_WIDTHS}")
    return elements * bytes_per_element


def reduction_ratio(cfg):
    """Cache size relative to multi-head attention with the same ``l`` and ``h``."""
    return Fraction(cfg.m * cfg.g, cfg.l * cfg.h)


class KvCache:
    def __init__(self, cfg, b, capacity, dtype=STORAGE_DTYPE):
        if b < 1:
            raise ValidationError(f"batch size must be >= 1, got {b}")
        if capacity < 1:
            raise ValidationError(f"capacity must be >= 1, got {capacity}")
        self.cfg = cfg
        self.b = b
        self.capacity = capacity
        self.d_k = cfg.d_k
        self.dtype = np.dtype(dtype)
        shape = (b, capacity, cfg.g, cfg.d_k)
        self.keys = [np.zeros(shape, dtype=self.dtype) for _ in range(cfg.m)]
        self.values = [np.zeros(shape, dtype=self.dtype) for _ in range(cfg.m)]
        self.lengths = [0] * cfg.m

    def __repr__(self):
        return f"KvCache(m={self.cfg.m}, g={self.cfg.g}, b={self.b}, length={self.length}/{self.capacity})"

    @property
    def length(self):
        """Positions present in every group."""
        return min(self.lengths)

    def group_length(self, group):
        return self.lengths[group]

    def append(self, group, keys, values):
        """Append ``(b, s_new, g, d_k)`` keys and values to zero-based ``group``."""
        expected = (self.b, keys.shape[1], self.cfg.g, self.d_k)
        if keys.shape != expected or values.shape != expected:
            raise ValidationError(f"append expects {expected}, got keys {keys.shape}, values {values.shape}")
        start = self.lengths[group]
        stop = start + keys.shape[1]
        if stop > self.capacity:
            raise CapacityError(
                f"cache group {group + 1} out of capacity: {start} + {keys.shape[1]} > {self.capacity}"
            )
        self.keys[group][:, start:stop] = keys
        self.values[group][:, start:stop] = values
        self.lengths[group] = stop

    def view(self, group, length=None):
        """Read-only views of the first ``length`` positions of ``group``."""
        n = self.lengths[group] if length is None else length
        k = self.keys[group][:, :n]
        v = self.values[group][:, :n]
        k.flags.writeable = False
        v.flags.writeable = False
        return k, v

    def fill(self, length, rng=None):
        """Populate every group with ``length`` positions of synthetic data."""
        rng = np.random.default_rng(0) if rng is None else rng
        shape = (self.b, length, self.cfg.g, self.d_k)
        for group in range(self.cfg.m):
            if self.lengths[group]:
                raise ValidationError("fill requires an empty cache")
            self.append(group, rng.standard_normal(shape).astype(self.dtype), rng.standard_normal(shape).astype(self.dtype))

    def element_count(self):
        """Stored key and value elements across all groups."""
        return sum(2 * self.b * n * self.cfg.g * self.d_k for n in self.lengths)

    def allocated_elements(self):
        return sum(k.size + v.size for k, v in zip(self.keys, self.values))

    def nbytes(self):
        return self.element_count() * self.dtype.itemsize


def new_cache(cfg, b, capacity, dtype=STORAGE_DTYPE):
    return KvCache(cfg, b, capacity, dtype=dtype)
