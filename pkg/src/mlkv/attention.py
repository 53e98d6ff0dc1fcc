"""Unified KV-sharing attention.

One scheme ``(l, h, m, g, d_k)`` covers all four attention families:

=========  =====  =====
scheme       m      g
=========  =====  =====
MHA          l      h
GQA          l    1<g<h
MQA          l      1
MLKV        <l    any
=========  =====  =====

Query head ``i`` of layer ``n`` reads KV head ``query_to_group(i)`` of KV
layer group ``layer_to_kv_group(n)``. Only the first layer of each KV layer
group owns K/V projections; it computes the keys and values from its own
input and writes them to the cache, and the remaining layers of the group
read them back.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, ValidationError


@dataclass(frozen=True)
class ShareConfig:
    l: int
    h: int
    m: int
    g: int
    d_k: int

    def __post_init__(self):
        for field in ("l", "h", "m", "g", "d_k"):
            v = getattr(self, field)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(field, f"must be a positive integer, got {v!r}")
        if self.m > self.l or self.l % self.m:
            raise ConfigError("m", f"must divide l={self.l}, got {self.m}")
        if self.g > self.h or self.h % self.g:
            raise ConfigError("g", f"must divide h={self.h}, got {self.g}")
        if self.d_k < 2 or self.d_k % 2:
            raise ConfigError("d_k", f"must be even and >= 2, got {self.d_k}")

    @property
    def kv_heads(self):
        """Total KV heads in the model, ``m * g``."""
        return self.m * self.g

    @property
    def layers_per_group(self):
        return self.l // self.m

    @property
    def heads_per_group(self):
        return self.h // self.g

    def owners(self):
        """One-based indices of the layers that own KV projections."""
        return [n for n in range(1, self.l + 1) if owns_kv(n, self.l, self.m)]

    @classmethod
    def mha(cls, l, h, d_k):
        return cls(l, h, l, h, d_k)

    @classmethod
    def gqa(cls, l, h, g, d_k):
        return cls(l, h, l, g, d_k)

    @classmethod
    def mqa(cls, l, h, d_k):
        return cls(l, h, l, 1, d_k)


def _block_index(i, count, groups, what):
    if groups < 1 or count % groups:
        raise ValidationError(f"{what}: {count} is not divisible by {groups}")
    if not 1 <= i <= count:
        raise ValidationError(f"{what}: index {i} outside 1..{count}")
    return (i - 1) // (count // groups) + 1


def query_to_group(i, h, g):
    """KV head (1..g) serving query head ``i`` (1..h)."""
    return _block_index(i, h, g, "query_to_group")


def layer_to_kv_group(n, l, m):
    """KV layer group (1..m) that layer ``n`` (1..l) reads from."""
    return _block_index(n, l, m, "layer_to_kv_group")


def owns_kv(n, l, m):
    _block_index(n, l, m, "owns_kv")
    return (n - 1) % (l // m) == 0


def group_index_map(h, g):
    """Zero-based KV head for each zero-based query head, as an index array."""
    return np.array([query_to_group(i, h, g) - 1 for i in range(1, h + 1)])


@dataclass
class LayerAttentionWeights:
    """Projection weights for one layer, as graph values.

    Head ``i`` of the query projection occupies columns ``i*d_k:(i+1)*d_k``
    of ``wq``; the same layout holds for the ``g`` heads of ``wk``/``wv``.
    """

    wq: ad.Var
    bq: ad.Var
    wo: ad.Var
    bo: ad.Var
    wk: ad.Var = None
    bk: ad.Var = None
    wv: ad.Var = None
    bv: ad.Var = None

    @property
    def owns_kv(self):
        return self.wk is not None


def attention_forward(x, weights, cache, layer, cfg, start_position, shared=None):
    """Attention for ``s_new`` new positions of layer ``layer`` (1-based).

    ``x`` is the normalized layer input, shape ``(b, s_new, d)``, as a
    :class:`~mlkv.autodiff.Var` or array. An owning layer projects keys and
    values, rotates the keys, and appends both to its cache group. Every
    layer then attends its rotated queries over that group's keys under a
    causal mask.

    ``shared`` maps a KV group to the graph values of its full keys and
    values for the current step. Owners fill it and followers read from it,
    which lets gradients flow back to the owner's projections. Without it,
    followers read plain arrays from the cache.
    """
    x = ad.const(x)
    if x.value.ndim != 3:
        raise DimensionError(f"attention input must be (b, s, d), got {x.shape}")
    b, s_new, _ = x.shape
    h, g, d_k = cfg.h, cfg.g, cfg.d_k
    k = layer_to_kv_group(layer, cfg.l, cfg.m) - 1
    owner = owns_kv(layer, cfg.l, cfg.m)
    if owner != weights.owns_kv:
        raise ValidationError(f"layer {layer}: K/V weights present={weights.owns_kv}, owns_kv={owner}")
    length = cache.group_length(k)
    positions = np.arange(start_position, start_position + s_new)

    if owner:
        if length != start_position:
            raise ValidationError(
                f"layer {layer}: cache group {k + 1} holds {length} positions, expected {start_position}"
            )
        k_new = ad.reshape(ad.linear(x, weights.wk, weights.bk, name=f"layer{layer}.k"), (b, s_new, g, d_k))
        v_new = ad.reshape(ad.linear(x, weights.wv, weights.bv, name=f"layer{layer}.v"), (b, s_new, g, d_k))
        k_new = ad.rotary(k_new, positions[None, :, None], name=f"layer{layer}.k_rot")
        cache.append(k, k_new.value, v_new.value)
        if start_position:
            prev_k, prev_v = cache.view(k, start_position)
            keys = ad.concat([prev_k, k_new], axis=1)
            values = ad.concat([prev_v, v_new], axis=1)
        else:
            keys, values = k_new, v_new
        if shared is not None:
            shared[k] = (keys, values)
    else:
        total = start_position + s_new
        if length < total:
            raise ValidationError(
                f"layer {layer}: cache group {k + 1} holds {length} positions, needs {total}"
            )
        if shared is not None and k in shared:
            keys, values = shared[k]
        else:
            keys, values = (ad.const(a) for a in cache.view(k, total))

    q = ad.reshape(ad.linear(x, weights.wq, weights.bq, name=f"layer{layer}.q"), (b, s_new, h, d_k))
    q = ad.rotary(q, positions[None, :, None], name=f"layer{layer}.q_rot")
    q = ad.transpose(q, (0, 2, 1, 3))  # b, h, s_new, d_k
    heads = group_index_map(h, g)
    kh = ad.take(ad.transpose(keys, (0, 2, 3, 1)), heads, axis=1)  # b, h, d_k, t
    vh = ad.take(ad.transpose(values, (0, 2, 1, 3)), heads, axis=1)  # b, h, t, d_k
    scores = ad.scale(ad.bmm(q, kh), 1.0 / math.sqrt(d_k))
    t = keys.shape[1]
    mask = np.arange(t)[None, :] <= positions[:, None]
    probs = ad.masked_softmax(scores, mask, name=f"layer{layer}.probs")
    out = ad.bmm(probs, vh)  # b, h, s_new, d_k
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, s_new, h * d_k))
    return ad.linear(out, weights.wo, weights.bo, name=f"layer{layer}.o")
