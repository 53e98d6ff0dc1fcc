"""Byte-level corpus handling, document packing and AdamW uptraining."""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import NumericError, ValidationError
from .model import is_decayed, logits_graph
from .numerics import check_finite

BOS = 256
EOS = 257
VOCAB = 258


def encode(text):
    return list(text.encode("utf-8"))


def decode(tokens):
    return bytes(t for t in tokens if t < 256).decode("utf-8", errors="replace")


def read_corpus(path, jsonl=False):
    """Documents from a UTF-8 file: one per line, or JSONL records with a ``text`` field."""
    docs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if jsonl:
                try:
                    text = json.loads(line)["text"]
                except (json.JSONDecodeError, KeyError, TypeError):
                    raise ValidationError(f"{path}:{lineno}: expected a JSON object with a 'text' field") from None
            else:
                text = line
            docs.append(encode(text))
    return docs


@dataclass
class PackedDataset:
    rows: np.ndarray
    seed: int = 0
    dropped_tokens: int = 0

    @property
    def row_count(self):
        return len(self.rows)

    @property
    def max_seq(self):
        return self.rows.shape[1]

    def subset(self, fraction):
        """Leading ``fraction`` of the rows (at least one)."""
        n = max(1, int(round(self.row_count * fraction)))
        return PackedDataset(self.rows[:n], self.seed, 0)


def pack_documents(docs, max_seq, eos=EOS, seed=0, sources=False):
    """Pack documents into rows of exactly ``max_seq`` tokens.

    Every document is terminated by ``eos``. Documents at least ``max_seq``
    long are first cut into full rows and their tails join the pool of short
    documents. Each row then takes, in pool order, every document that still
    fits whole; when none fits, the next document's prefix tops the row up
    and its remainder stays at the front of the pool. A final row that cannot
    be filled is discarded and counted in ``dropped_tokens``.

    With ``sources`` the return value is ``(dataset, origin)`` where
    ``origin[r, c]`` is the ``(doc, position)`` of each token, position
    ``len(doc)`` standing for the terminator.
    """
    if max_seq < 2:
        raise ValidationError(f"max_seq must be >= 2, got {max_seq}")
    if not docs:
        raise ValidationError("empty corpus")
    rows, origins, pool = [], [], []
    for i, doc in enumerate(docs):
        unit = list(doc) + [eos]
        where = [(i, p) for p in range(len(unit))]
        while len(unit) >= max_seq:
            rows.append(unit[:max_seq])
            origins.append(where[:max_seq])
            unit, where = unit[max_seq:], where[max_seq:]
        if unit:
            pool.append((unit, where))
    pool = _fill_rows(pool, max_seq, rows, origins)
    dropped = sum(len(u) for u, _ in pool)
    packed = PackedDataset(np.array(rows, dtype=np.int64).reshape(-1, max_seq), seed, dropped)
    if sources:
        return packed, np.array(origins, dtype=np.int64).reshape(-1, max_seq, 2)
    return packed


def _fill_rows(pool, max_seq, rows, origins):
    while pool:
        row, where, rest = [], [], []
        for unit, src in pool:
            if len(row) + len(unit) <= max_seq:
                row += unit
                where += src
            else:
                rest.append((unit, src))
        room = max_seq - len(row)
        if room and not rest:
            return [(row, where)]
        if room:
            unit, src = rest[0]
            row += unit[:room]
            where += src[:room]
            rest[0] = (unit[room:], src[room:])
        rows.append(row)
        origins.append(where)
        pool = rest
    return []


@dataclass
class TrainPlan:
    """Uptraining hyperparameters.

    The schedule warms up linearly to ``base_lr`` over ``warmup_ratio`` of the
    steps, then follows a cosine down to ``min_lr_ratio * base_lr``.
    """

    total_steps: int
    batch: int = 8
    base_lr: float = 6e-4
    warmup_ratio: float = 0.2
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.01
    min_lr_ratio: float = 0.1
    seed: int = 0
    shuffle: bool = field(default=True)

    def __post_init__(self):
        if not 0 < self.warmup_ratio < 1:
            raise ValidationError(f"warmup_ratio must be in (0, 1), got {self.warmup_ratio}")
        if not all(0 < b < 1 for b in self.betas):
            raise ValidationError(f"betas must be in (0, 1), got {self.betas}")
        if self.total_steps < 1 or self.batch < 1:
            raise ValidationError("total_steps and batch must be positive")


def lr_at(step, plan):
    if not 0 <= step <= plan.total_steps:
        raise ValidationError(f"step {step} outside 0..{plan.total_steps}")
    warmup = plan.warmup_ratio * plan.total_steps
    if step < warmup:
        return plan.base_lr * step / warmup
    floor = plan.min_lr_ratio * plan.base_lr
    progress = (step - warmup) / (plan.total_steps - warmup)
    return floor + (plan.base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """AdamW with decoupled decay; norm and bias tensors are never decayed."""

    def __init__(self, params, plan):
        self.plan = plan
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lr):
        b1, b2 = self.plan.betas
        self.t += 1
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            with np.errstate(all="ignore"):
                if is_decayed(name):
                    p *= 1 - lr * self.plan.weight_decay
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.plan.eps)).astype(p.dtype)
            check_finite(p, f"update of {name}")


def batch_loss(model, rows, params=None):
    """Next-token loss graph for ``rows``; ``params`` defaults to constant leaves."""
    cfg = model.cfg
    if params is None:
        params = {k: ad.Var(v, name=k) for k, v in model.params.items()}
    inputs, targets = rows[:, :-1], rows[:, 1:]
    cache = model.new_cache(len(rows), inputs.shape[1])
    logits = logits_graph(cfg, params, inputs, cache)
    return ad.cross_entropy(ad.reshape(logits, (-1, cfg.vocab)), targets.reshape(-1))


def _check_data(model, data):
    if data.row_count == 0:
        raise ValidationError("dataset has no rows")
    if data.rows.max() >= model.cfg.vocab:
        raise ValidationError(f"dataset token {data.rows.max()} outside model vocab {model.cfg.vocab}")
    if data.max_seq - 1 > model.cfg.max_seq:
        raise ValidationError(f"rows of {data.max_seq} tokens exceed model max_seq {model.cfg.max_seq} + 1")


def batches(data, plan):
    """Endless deterministic stream of row batches."""
    rng = np.random.default_rng(plan.seed)
    while True:
        order = rng.permutation(data.row_count) if plan.shuffle else np.arange(data.row_count)
        for i in range(0, data.row_count - plan.batch + 1, plan.batch):
            yield data.rows[order[i:i + plan.batch]]
        if data.row_count < plan.batch:
            yield data.rows[order]


def uptrain(model, data, plan, steps=None):
    """Train ``model`` in place; returns the loss of each step.

    Update ``t`` (1-based) uses ``lr_at(t, plan)``. ``steps`` stops early
    without changing the schedule.
    """
    _check_data(model, data)
    steps = plan.total_steps if steps is None else steps
    opt = AdamW(model.params, plan)
    history = []
    stream = batches(data, plan)
    for t in range(1, steps + 1):
        rows = next(stream)
        try:
            grads_holder = {}

            def loss_fn(leaves):
                grads_holder["loss"] = loss = batch_loss(model, rows, leaves)
                return loss

            grads = ad.gradient(loss_fn, model.params)
        except NumericError as e:
            raise NumericError(f"step {t}: {e}") from None
        loss = float(grads_holder["loss"].value)
        if not math.isfinite(loss):
            raise NumericError(f"step {t}: non-finite loss")
        history.append(loss)
        try:
            opt.step(model.params, grads, lr_at(t, plan))
        except NumericError as e:
            raise NumericError(f"step {t}: {e}") from None
    return history


def eval_loss(model, data, batch=8):
    """Mean next-token cross-entropy over every row, without updates."""
    _check_data(model, data)
    total = 0.0
    for i in range(0, data.row_count, batch):
        rows = data.rows[i:i + batch]
        total += float(batch_loss(model, rows).value) * len(rows)
    return total / data.row_count


def write_loss_csv(path, history, plan):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "lr", "loss"])
        for t, loss in enumerate(history, 1):
            w.writerow([t, repr(lr_at(t, plan)), repr(loss)])
