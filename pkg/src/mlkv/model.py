"""Decoder-only transformer built on the unified sharing scheme.

Parameters live in a flat ``dict`` keyed by checkpoint tensor names (see
:func:`param_shapes`). Each layer computes::

    x <- x + MLP(norm2(x + attn(norm1(x))))

with rotary positions, pre-norm placement and untied input/output embeddings.
"""

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attention import LayerAttentionWeights, ShareConfig, attention_forward, owns_kv
from .errors import ConfigError, InfeasibleError, ValidationError
from .kvcache import KvCache
from .numerics import STORAGE_DTYPE

INIT_STD = 0.02
NORM_PARAMS = ("g", "b")
ATTN_PARAMS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
MLP_PARAMS = ("w_in", "b_in", "w_out", "b_out")


@dataclass(frozen=True)
class ModelConfig:
    vocab: int
    d: int
    max_seq: int
    share: ShareConfig
    d_ff: tuple = field(default=())

    def __post_init__(self):
        d_ff = self.d_ff
        if isinstance(d_ff, (int, np.integer)):
            d_ff = (int(d_ff),) * self.share.l
        d_ff = tuple(int(w) for w in d_ff)
        object.__setattr__(self, "d_ff", d_ff)
        for name in ("vocab", "d", "max_seq"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(name, f"must be a positive integer, got {v!r}")
        if self.d != self.share.h * self.share.d_k:
            raise ConfigError("d", f"must equal h*d_k = {self.share.h * self.share.d_k}, got {self.d}")
        if len(d_ff) != self.share.l:
            raise ConfigError("d_ff", f"needs {self.share.l} entries, got {len(d_ff)}")
        if any(w < self.d for w in d_ff):
            raise ConfigError("d_ff", f"every width must be >= d={self.d}, got {list(d_ff)}")

    @property
    def l(self):
        return self.share.l

    def with_share(self, share):
        return replace(self, share=share)

    def to_dict(self):
        s = self.share
        return {
            "vocab": self.vocab, "d": self.d, "l": s.l, "h": s.h, "d_k": s.d_k,
            "m": s.m, "g": s.g, "max_seq": self.max_seq, "d_ff": list(self.d_ff),
        }

    @classmethod
    def from_dict(cls, data):
        required = ("vocab", "d", "l", "h", "d_k", "m", "g", "max_seq", "d_ff")
        for key in required:
            if key not in data:
                raise ConfigError(key, "missing")
        unknown = set(data) - set(required)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        for key in required:
            v = data[key]
            ok = isinstance(v, int) and not isinstance(v, bool)
            if key == "d_ff" and isinstance(v, list):
                ok = all(isinstance(w, int) and not isinstance(w, bool) for w in v)
            if not ok:
                raise ConfigError(key, f"expected integer{' or list of integers' if key == 'd_ff' else ''}, got {v!r}")
        share = ShareConfig(data["l"], data["h"], data["m"], data["g"], data["d_k"])
        return cls(data["vocab"], data["d"], data["max_seq"], share, data["d_ff"])

    @classmethod
    def load(cls, path):
        with open(path) as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError("config", f"invalid JSON: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be an object")
        return cls.from_dict(data)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


def param_shapes(cfg):
    """Ordered ``{name: shape}`` for every tensor of a model with config ``cfg``."""
    s = cfg.share
    d, hd, gd = cfg.d, s.h * s.d_k, s.g * s.d_k
    shapes = {"embed": (cfg.vocab, d)}
    for n in range(s.l):
        p = f"layer.{n}."
        shapes[p + "norm1.g"] = (d,)
        shapes[p + "norm1.b"] = (d,)
        shapes[p + "attn.wq"] = (d, hd)
        shapes[p + "attn.bq"] = (hd,)
        if owns_kv(n + 1, s.l, s.m):
            shapes[p + "attn.wk"] = (d, gd)
            shapes[p + "attn.bk"] = (gd,)
            shapes[p + "attn.wv"] = (d, gd)
            shapes[p + "attn.bv"] = (gd,)
        shapes[p + "attn.wo"] = (hd, d)
        shapes[p + "attn.bo"] = (d,)
        shapes[p + "norm2.g"] = (d,)
        shapes[p + "norm2.b"] = (d,)
        shapes[p + "mlp.w_in"] = (d, cfg.d_ff[n])
        shapes[p + "mlp.b_in"] = (cfg.d_ff[n],)
        shapes[p + "mlp.w_out"] = (cfg.d_ff[n], d)
        shapes[p + "mlp.b_out"] = (d,)
    shapes["final_norm.g"] = (d,)
    shapes["final_norm.b"] = (d,)
    shapes["unembed"] = (d, cfg.vocab)
    return shapes


def param_count(cfg):
    """Exact parameter total, biases and norms included."""
    s = cfg.share
    d = cfg.d
    embeddings = 2 * cfg.vocab * d
    norms = 2 * d * (2 * s.l + 1)
    queries_out = s.l * (2 * d * s.h * s.d_k + s.h * s.d_k + d)
    kv = s.m * 2 * (d * s.g * s.d_k + s.g * s.d_k)
    mlp = sum(2 * d * w + w + d for w in cfg.d_ff)
    return embeddings + norms + queries_out + kv + mlp


def is_decayed(name):
    """Whether AdamW weight decay applies to tensor ``name`` (norms and biases are exempt)."""
    leaf = name.rsplit(".", 1)[-1]
    if ".norm" in name or name.startswith("final_norm"):
        return False
    return not leaf.startswith("b")


def compensate_mlp(base, target_share, unit=None, tol=1e-4):
    """Return ``base`` with ``target_share`` and MLP widths grown to restore the parameter count.

    Widths grow in steps of ``unit`` (default ``d``), handed out one layer at a
    time starting from the first layer. The step count is the one whose total
    lands nearest to ``param_count(base)``. Raises :class:`InfeasibleError`
    when the best relative gap still exceeds ``tol``; pass ``tol=None`` to
    accept the nearest count unconditionally.
    """
    if (target_share.l, target_share.h, target_share.d_k) != (base.share.l, base.share.h, base.share.d_k):
        raise ValidationError(f"target scheme {target_share} does not fit base {base.share}")
    unit = base.d if unit is None else unit
    if unit < 1:
        raise ValidationError(f"unit must be positive, got {unit}")
    target = param_count(base)
    start = replace(base, share=target_share)
    per_step = (2 * base.d + 1) * unit
    deficit = target - param_count(start)
    l = base.l

    def widen(steps):
        if steps < 0 and min(start.d_ff) - unit * math.ceil(-steps / l) < base.d:
            return None
        extra = [steps // l + (1 if n < steps % l else 0) for n in range(l)]
        return replace(start, d_ff=tuple(w + unit * e for w, e in zip(start.d_ff, extra)))

    lo = math.floor(deficit / per_step)
    candidates = [c for c in (widen(lo), widen(lo + 1)) if c is not None]
    if not candidates:
        raise InfeasibleError(f"cannot shrink MLP widths below d={base.d}")
    best = min(candidates, key=lambda c: abs(param_count(c) - target))
    gap = abs(param_count(best) - target) / target
    if tol is not None and gap > tol:
        raise InfeasibleError(
            f"nearest count {param_count(best)} misses {target} by relative {gap:.3g} > {tol:g} "
            f"with width steps of {unit}"
        )
    return best


def init_params(cfg, seed=0, dtype=STORAGE_DTYPE):
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf.startswith("b"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, INIT_STD, size=shape)
        params[name] = arr.astype(dtype)
    return params


class Model:
    def __init__(self, cfg, params):
        expected = param_shapes(cfg)
        missing = set(expected) - set(params)
        extra = set(params) - set(expected)
        if missing or extra:
            raise ValidationError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValidationError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.cfg = cfg
        self.params = params

    @classmethod
    def random(cls, cfg, seed=0, dtype=STORAGE_DTYPE):
        return cls(cfg, init_params(cfg, seed, dtype))

    @property
    def dtype(self):
        return self.params["embed"].dtype

    def new_cache(self, b, capacity=None):
        return KvCache(self.cfg.share, b, capacity or self.cfg.max_seq, dtype=self.dtype)

    def astype(self, dtype):
        return Model(self.cfg, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self):
        return Model(self.cfg, {k: v.copy() for k, v in self.params.items()})


def _check_tokens(cfg, tokens, start=0):
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValidationError(f"tokens must be (batch, seq), got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ValidationError("tokens must be integers")
    if start + tokens.shape[1] > cfg.max_seq:
        raise ValidationError(f"sequence of {start + tokens.shape[1]} exceeds max_seq {cfg.max_seq}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise ValidationError(f"token id outside 0..{cfg.vocab - 1}")
    return tokens


def logits_graph(cfg, params, tokens, cache, start=0):
    """Graph for logits at ``tokens`` placed after ``start`` cached positions.

    ``params`` maps tensor names to :class:`~mlkv.autodiff.Var` leaves.
    """
    s = cfg.share
    x = ad.take(params["embed"], tokens, axis=0, name="embed")
    shared = {}
    for n in range(s.l):
        p = f"layer.{n}."
        weights = LayerAttentionWeights(**{
            k: params.get(p + "attn." + k) for k in ATTN_PARAMS
        })
        h1 = ad.layer_norm(x, params[p + "norm1.g"], params[p + "norm1.b"], name=p + "norm1")
        a = attention_forward(h1, weights, cache, n + 1, s, start, shared=shared)
        h2 = ad.layer_norm(ad.add(x, a), params[p + "norm2.g"], params[p + "norm2.b"], name=p + "norm2")
        u = ad.gelu(ad.linear(h2, params[p + "mlp.w_in"], params[p + "mlp.b_in"], name=p + "mlp.in"))
        x = ad.add(x, ad.linear(u, params[p + "mlp.w_out"], params[p + "mlp.b_out"], name=p + "mlp.out"))
    x = ad.layer_norm(x, params["final_norm.g"], params["final_norm.b"], name="final_norm")
    return ad.linear(x, params["unembed"], name="unembed")


def _leaves(model):
    return {k: ad.Var(v, name=k) for k, v in model.params.items()}


def forward(model, tokens):
    """Logits ``(b, s, vocab)`` for full sequences, causally masked."""
    tokens = _check_tokens(model.cfg, tokens)
    cache = model.new_cache(tokens.shape[0], max(tokens.shape[1], 1))
    return logits_graph(model.cfg, _leaves(model), tokens, cache).value


def decode_step(model, tokens, cache):
    """Logits for ``tokens`` appended after the cache contents; advances the cache."""
    tokens = _check_tokens(model.cfg, tokens, cache.length)
    if tokens.shape[0] != cache.b:
        raise ValidationError(f"batch {tokens.shape[0]} does not match cache batch {cache.b}")
    return logits_graph(model.cfg, _leaves(model), tokens, cache, cache.length).value


def generate(model, prompt, n_tokens, cache=None):
    """Greedy continuation of ``prompt`` (b, s0); returns the ``(b, n_tokens)`` new ids."""
    prompt = np.asarray(prompt)
    if cache is None:
        cache = model.new_cache(prompt.shape[0])
    logits = decode_step(model, prompt, cache)
    out = []
    for i in range(n_tokens):
        nxt = logits[:, -1].argmax(axis=-1)[:, None]
        out.append(nxt)
        if i + 1 < n_tokens:
            logits = decode_step(model, nxt, cache)
    return np.concatenate(out, axis=1) if out else np.zeros((prompt.shape[0], 0), dtype=np.int64)
