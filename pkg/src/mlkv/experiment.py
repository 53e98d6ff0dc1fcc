"""Reference shapes and the desk-scale uptraining comparison.

``pythia_160m`` is the 12-layer, 768-wide shape used for parameter and
memory accounting. ``SCHEMES`` names its eight converted variants by total
KV heads. :func:`uptrain_ordering` repeats the convert-then-uptrain
comparison on a model small enough to train on a laptop CPU.
"""

from dataclasses import dataclass, field

import numpy as np

from .attention import ShareConfig
from .convert import Checkpoint, merge_kv
from .model import Model, ModelConfig, compensate_mlp
from .trainer import VOCAB, TrainPlan, encode, eval_loss, pack_documents, uptrain

SCHEMES = {
    "GQA-48": (12, 4),
    "MLKV-48": (4, 12),
    "MQA-12": (12, 1),
    "MLKV-12": (4, 3),
    "MLKV-6": (6, 1),
    "MLKV-4": (4, 1),
    "MLKV-2": (2, 1),
    "MLKV-1": (1, 1),
}


def pythia_160m(vocab=50304, max_seq=2048):
    return ModelConfig(vocab, 768, max_seq, ShareConfig(12, 12, 12, 12, 64), 3072)


def pythia_variants(vocab=50304, max_seq=2048, compensate=True, tol=None):
    """``{name: config}`` for the baseline and every entry of :data:`SCHEMES`."""
    base = pythia_160m(vocab, max_seq)
    out = {"MHA-144": base}
    for name, (m, g) in SCHEMES.items():
        share = ShareConfig(12, 12, m, g, 64)
        out[name] = compensate_mlp(base, share, tol=tol) if compensate else base.with_share(share)
    return out


_LETTERS = list("abcdefghijklmnop")


def synthetic_corpus(n_docs, seed=0):
    """Short documents whose endings depend on earlier tokens.

    Each document is a repeated word, a key/value lookup or a two-digit sum,
    picked uniformly. Returns the text of each document.
    """
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(n_docs):
        kind = rng.integers(3)
        if kind == 0:
            w = "".join(rng.choice(_LETTERS, rng.integers(4, 9)))
            docs.append(f"copy {w} {w} {w}")
        elif kind == 1:
            keys = rng.choice(_LETTERS, 5, replace=False)
            vals = rng.integers(0, 10, 5)
            q = rng.integers(5)
            pairs = " ".join(f"{k}{v}" for k, v in zip(keys, vals))
            docs.append(f"{pairs} ?{keys[q]}{vals[q]}")
        else:
            a, b = rng.integers(0, 50, 2)
            docs.append(f"{a}+{b}={a + b}")
    return docs


@dataclass
class OrderingSetup:
    l: int = 6
    h: int = 6
    d: int = 48
    d_ff: int = 192
    row_len: int = 49
    n_docs: int = 6000
    base_steps: int = 600
    base_lr: float = 3e-3
    uptrain_steps: int = 100
    uptrain_lr: float = 6e-4
    batch: int = 16
    fraction: float = 0.05
    seeds: tuple = (0, 1, 2)
    schemes: tuple = field(default=((6, 3), (6, 1), (3, 1), (1, 1)))


@dataclass
class OrderingResult:
    base_loss: float
    # mg -> final uptrain loss per seed
    finals: dict
    before: dict

    def seed_mean(self):
        return {mg: float(np.mean(v)) for mg, v in self.finals.items()}


def uptrain_ordering(setup=OrderingSetup(), log=None):
    """Train an MHA base, convert it to each scheme and uptrain every variant.

    Each variant is converted with compensation at the nearest reachable
    parameter count and uptrained on the leading ``fraction`` of the rows for
    the same number of steps, once per seed.
    """
    log = log or (lambda msg: None)
    cfg = ModelConfig(VOCAB, setup.d, setup.row_len - 1,
                      ShareConfig(setup.l, setup.h, setup.l, setup.h, setup.d // setup.h), setup.d_ff)
    data = pack_documents([encode(t) for t in synthetic_corpus(setup.n_docs)], setup.row_len)
    base = Model.random(cfg, 0)
    history = uptrain(base, data, TrainPlan(total_steps=setup.base_steps, batch=setup.batch,
                                            base_lr=setup.base_lr, seed=0))
    base_loss = float(np.mean(history[-20:]))
    log(f"base: {data.row_count} rows, final loss {base_loss:.4f}")
    ckpt = Checkpoint.from_model(base)
    sub = data.subset(setup.fraction)
    finals, before = {}, {}
    for m, g in setup.schemes:
        mg = m * g
        finals[mg], before[mg] = [], []
        for seed in setup.seeds:
            variant = merge_kv(ckpt, ShareConfig(setup.l, setup.h, m, g, setup.d // setup.h),
                               seed=seed, tol=None).to_model()
            before[mg].append(eval_loss(variant, sub))
            plan = TrainPlan(total_steps=setup.uptrain_steps, batch=setup.batch,
                             base_lr=setup.uptrain_lr, seed=seed)
            finals[mg].append(uptrain(variant, sub, plan)[-1])
        log(f"mg={mg}: after conversion {np.mean(before[mg]):.4f}, after uptraining {np.mean(finals[mg]):.4f}")
    return OrderingResult(base_loss, finals, before)
