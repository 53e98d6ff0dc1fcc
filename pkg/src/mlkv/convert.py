"""Checkpoint files and KV-head merging.

File layout (all integers little-endian)::

    b"MLKVCKPT" | u32 manifest length | manifest JSON | float32 blob

The manifest is ``{"config": {...}, "tensors": [{"name", "shape", "offset"}]}``
with byte offsets into the blob.
"""

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .attention import ShareConfig, layer_to_kv_group, owns_kv
from .errors import CheckpointError, ConfigError, ValidationError
from .model import INIT_STD, Model, ModelConfig, compensate_mlp, param_shapes

MAGIC = b"MLKVCKPT"
KV_TENSORS = ("wk", "bk", "wv", "bv")
DEFAULT_SEED = 1234


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict

    def manifest(self):
        entries, offset = [], 0
        for name, arr in self.tensors.items():
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size * 4
        return {"config": self.config.to_dict(), "tensors": entries}

    def to_bytes(self):
        header = json.dumps(self.manifest(), separators=(",", ":")).encode()
        blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in self.tensors.values())
        return MAGIC + struct.pack("<I", len(header)) + header + blob

    @classmethod
    def from_bytes(cls, raw):
        if raw[:8] != MAGIC:
            raise CheckpointError("bad magic: not a checkpoint file")
        if len(raw) < 12:
            raise CheckpointError("truncated header")
        (n,) = struct.unpack("<I", raw[8:12])
        try:
            manifest = json.loads(raw[12:12 + n])
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise CheckpointError(f"manifest is not valid JSON: {e}") from None
        try:
            config = ModelConfig.from_dict(manifest["config"])
            entries = manifest["tensors"]
        except (KeyError, TypeError) as e:
            raise CheckpointError(f"manifest missing {e}") from None
        blob = raw[12 + n:]
        expected = param_shapes(config)
        names = [e["name"] for e in entries]
        if len(set(names)) != len(names):
            raise CheckpointError("duplicate tensor names in manifest")
        if set(names) != set(expected):
            missing = sorted(set(expected) - set(names))
            extra = sorted(set(names) - set(expected))
            raise CheckpointError(f"manifest mismatch: missing {missing}, unexpected {extra}")
        spans, tensors = [], {}
        for e in sorted(entries, key=lambda e: e["offset"]):
            shape = tuple(e["shape"])
            if shape != expected[e["name"]]:
                raise CheckpointError(f"{e['name']}: shape {shape}, config implies {expected[e['name']]}")
            size = int(np.prod(shape)) * 4
            spans.append((e["offset"], e["offset"] + size))
            tensors[e["name"]] = (e["offset"], shape)
        for (a0, a1), (b0, _) in zip(spans, spans[1:]):
            if b0 < a1:
                raise CheckpointError("tensor byte ranges overlap")
        total = sum(int(np.prod(s)) * 4 for s in expected.values())
        if len(blob) != total or (spans and spans[-1][1] > len(blob)):
            raise CheckpointError(f"blob holds {len(blob)} bytes, manifest needs {total}")
        out = {}
        for e in entries:
            offset, shape = tensors[e["name"]]
            count = int(np.prod(shape))
            out[e["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        return cls(config, out)

    def save(self, path):
        try:
            with open(path, "wb") as f:
                f.write(self.to_bytes())
        except OSError as e:
            raise CheckpointError(f"cannot write {path}: {e.strerror}") from None

    @classmethod
    def load(cls, path):
        try:
            with open(path, "rb") as f:
                raw = f.read()
        except OSError as e:
            raise CheckpointError(f"cannot read {path}: {e.strerror}") from None
        try:
            return cls.from_bytes(raw)
        except ConfigError as e:
            raise CheckpointError(f"bad config in {path}: {e}") from None

    @classmethod
    def from_model(cls, model):
        order = param_shapes(model.cfg)
        return cls(model.cfg, {k: np.asarray(model.params[k], dtype=np.float32) for k in order})

    def to_model(self):
        return Model(self.config, dict(self.tensors))


def check_refinable(src, target):
    if (src.l, src.h, src.d_k) != (target.l, target.h, target.d_k):
        raise ValidationError(f"target {target} changes l, h or d_k of source {src}")
    if src.m % target.m or src.g % target.g:
        raise ValidationError(
            f"target (m={target.m}, g={target.g}) does not coarsen source (m={src.m}, g={src.g})"
        )


def constituents(src, target, k, j):
    """Source (layer, head) pairs, one-based, averaged into target KV head ``j`` of group ``k``.

    Ordered layer-major, head-minor.
    """
    ratio = src.g // target.g
    return [
        (n, js)
        for n in range(1, src.l + 1)
        if owns_kv(n, src.l, src.m) and layer_to_kv_group(n, src.l, target.m) == k
        for js in range(1, src.g + 1)
        if (js - 1) // ratio + 1 == j
    ]


def _head_slice(arr, head, d_k):
    return arr[..., (head - 1) * d_k:head * d_k]


def merge_kv(src, target_share, seed=DEFAULT_SEED, unit=None, tol=1e-4, compensate=True):
    """Convert ``src`` to ``target_share`` by averaging KV heads.

    Each target KV head is the element-wise mean, in float64, of its source
    heads; biases are averaged the same way. Merged heads land on the first
    layer of each KV layer group. Everything else is copied. With
    ``compensate`` the MLP widths grow per :func:`~mlkv.model.compensate_mlp`;
    new ``w_in`` columns are drawn from ``N(0, 0.02)`` with ``seed`` and the
    matching ``w_out`` rows and ``b_in`` entries start at zero, so the merged
    model computes the same function as an uncompensated merge.
    """
    s = src.config.share
    check_refinable(s, target_share)
    if compensate:
        config = compensate_mlp(src.config, target_share, unit=unit, tol=tol)
    else:
        config = replace(src.config, share=target_share)
    d_k = s.d_k
    tensors = {}
    rng = np.random.default_rng(seed)
    for name in param_shapes(config):
        parts = name.split(".")
        if parts[0] == "layer" and parts[2] == "attn" and parts[3] in KV_TENSORS:
            n = int(parts[1]) + 1
            k = layer_to_kv_group(n, s.l, target_share.m)
            heads = []
            for j in range(1, target_share.g + 1):
                acc = None
                group = constituents(s, target_share, k, j)
                for ns, js in group:
                    piece = _head_slice(src.tensors[f"layer.{ns - 1}.attn.{parts[3]}"], js, d_k).astype(np.float64)
                    acc = piece if acc is None else acc + piece
                heads.append(acc / len(group))
            tensors[name] = np.concatenate(heads, axis=-1).astype(np.float32)
        elif parts[0] == "layer" and parts[2] == "mlp":
            tensors[name] = _widen_mlp(src.tensors[name], parts[3], config.d_ff[int(parts[1])], rng)
        else:
            tensors[name] = src.tensors[name].copy()
    return Checkpoint(config, tensors)


def _widen_mlp(arr, kind, width, rng):
    old = arr.shape[-1] if kind in ("w_in", "b_in") else arr.shape[0]
    if kind == "b_out" or width == old:
        return arr.copy()
    extra = width - old
    if extra < 0:
        raise ValidationError(f"MLP width shrinks from {old} to {width}")
    if kind == "w_in":
        fresh = rng.normal(0.0, INIT_STD, size=(arr.shape[0], extra)).astype(np.float32)
        return np.concatenate([arr, fresh], axis=1)
    if kind == "b_in":
        return np.concatenate([arr, np.zeros(extra, dtype=np.float32)])
    return np.concatenate([arr, np.zeros((extra, arr.shape[1]), dtype=np.float32)], axis=0)


def convert_identity_check(src):
    """Merge ``src`` onto its own scheme and insist the result is bit-identical."""
    out = merge_kv(src, src.config.share)
    if out.config != src.config:
        raise ValidationError("identity conversion changed the config")
    for name, arr in src.tensors.items():
        if out.tensors[name].tobytes() != arr.tobytes():
            raise ValidationError(f"identity conversion changed {name}")
    return out


def parse_scheme(config, m=None, g=None):
    s = config.share
    return ShareConfig(s.l, s.h, s.m if m is None else m, s.g if g is None else g, s.d_k)
