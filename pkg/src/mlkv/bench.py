"""Inference memory and throughput harness.

Memory is modelled analytically as weights plus KV cache; activation
scratch is left out. Throughput comes from timing greedy token-by-token
decoding after a synthetic prefill of the cache.
"""

import csv
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .kvcache import cache_bytes, cache_elements
from .model import Model, decode_step, param_count

PREFILL = 2000
GENERATE = 48
CSV_HEADER = ["config", "batch", "weights_bytes", "cache_bytes", "total_bytes", "tokens_per_sec", "fits_budget"]


class MemoryEstimate(NamedTuple):
    weights: int
    cache: int
    total: int


class GenerateResult(NamedTuple):
    tokens_per_second: float
    peak_cache_bytes: int
    steps: int
    cache_length: int


def memory_model(cfg, b, s, bytes_per_element=4):
    s_ = cfg.share
    weights = param_count(cfg) * bytes_per_element
    cache = cache_bytes(cache_elements(b, s, s_.m, s_.g, s_.d_k), bytes_per_element)
    return MemoryEstimate(weights, cache, weights + cache)


def max_fitting_batch(cfg, budget_bytes, s, bytes_per_element=4):
    """Largest batch whose modelled total fits ``budget_bytes`` (0 if none)."""
    weights = memory_model(cfg, 0, s, bytes_per_element).weights
    per_row = memory_model(cfg, 1, s, bytes_per_element).cache
    if budget_bytes < weights + per_row:
        return 0
    return (budget_bytes - weights) // per_row


def bench_generate(model, b, prefill=PREFILL, gen=GENERATE, seed=0, start_token=0):
    """Time ``gen`` greedy decode steps after a synthetic ``prefill``-position cache.

    The clock starts once the prefill is in place. Returns generated tokens
    per second over the whole batch and the cache size at its peak.
    """
    cfg = model.cfg
    cache = model.new_cache(b, prefill + gen)
    cache.fill(prefill, np.random.default_rng(seed))
    token = np.full((b, 1), start_token, dtype=np.int64)
    steps = 0
    t0 = time.perf_counter()
    for _ in range(gen):
        logits = decode_step(model, token, cache)
        token = logits[:, -1].argmax(axis=-1)[:, None]
        steps += 1
    elapsed = time.perf_counter() - t0
    s = cfg.share
    peak = cache_bytes(cache_elements(b, prefill + gen, s.m, s.g, s.d_k), cache.dtype.itemsize)
    return GenerateResult(gen * b / elapsed, peak, steps, cache.length)


@dataclass
class BenchRow:
    batch: int
    weights_bytes: int
    cache_bytes: int
    total_bytes: int
    fits_budget: bool
    tokens_per_sec: float = math.nan


@dataclass
class BenchReport:
    config_id: str
    rows: list = field(default_factory=list)

    @property
    def max_batch(self):
        return max((r.batch for r in self.rows if r.fits_budget), default=0)


def worker_count():
    """Worker cap from ``MLKV_THREADS`` (0 or unset means one per CPU)."""
    n = int(os.environ.get("MLKV_THREADS", "0") or 0)
    return n if n > 0 else (os.cpu_count() or 1)


def sweep(configs, batches, budget_bytes, s=PREFILL + GENERATE, bytes_per_element=4,
          measure=True, gen=GENERATE, seed=0, strict_timing=False):
    """Memory (and optionally throughput) for every config and batch size.

    ``configs`` maps an id to a :class:`~mlkv.model.ModelConfig`. Rows whose
    modelled total exceeds ``budget_bytes`` are marked unfit and never run.
    With ``measure``, fitting rows are timed with :func:`bench_generate` on a
    randomly initialised model; ``strict_timing`` keeps those runs sequential.
    """
    if not configs or not batches:
        raise ValueError("sweep needs at least one config and one batch size")
    reports = []
    jobs = []
    for cid, cfg in configs.items():
        report = BenchReport(cid)
        for b in sorted(batches):
            est = memory_model(cfg, b, s, bytes_per_element)
            row = BenchRow(b, est.weights, est.cache, est.total, est.total <= budget_bytes)
            report.rows.append(row)
            if measure and row.fits_budget:
                jobs.append((cfg, row))
        reports.append(report)
    if jobs:
        models = {}

        def run(job):
            cfg, row = job
            if cfg not in models:
                models[cfg] = Model.random(cfg, seed)
            row.tokens_per_sec = bench_generate(models[cfg], row.batch, s - gen, gen, seed).tokens_per_second

        workers = 1 if strict_timing else min(worker_count(), len(jobs))
        if workers == 1:
            for job in jobs:
                run(job)
        else:
            for cfg in {c for c, _ in jobs}:
                models[cfg] = Model.random(cfg, seed)
            with ThreadPoolExecutor(workers) as pool:
                list(pool.map(run, jobs))
    return reports


def write_csv(path, reports):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for rep in reports:
            for r in rep.rows:
                tps = "" if math.isnan(r.tokens_per_sec) else f"{r.tokens_per_sec:.6g}"
                w.writerow([rep.config_id, r.batch, r.weights_bytes, r.cache_bytes, r.total_bytes, tps,
                            str(r.fits_budget).lower()])


def write_dat(path, reports):
    """gnuplot data: one block per config, blocks separated by two blank lines."""
    with open(path, "w") as f:
        for i, rep in enumerate(reports):
            if i:
                f.write("\n\n")
            f.write(f"# {rep.config_id}\n# batch total_bytes cache_bytes fits\n")
            for r in rep.rows:
                f.write(f"{r.batch} {r.total_bytes} {r.cache_bytes} {int(r.fits_budget)}\n")
