"""Attention cost model (exact token-pair counts) and a wall-clock benchmark."""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError
from .model import msa_within_subbags

MAX_BENCH_LENGTH = 16384
BENCH_HEADER = ("p", "g", "dim", "m", "grouped_pairs", "full_pairs", "median_seconds")


def even_sizes(p: int, g: int) -> list[int]:
    """Sub-bag sizes of a balanced split; the first ``p % g`` get one extra."""
    q, r = divmod(p, g)
    return [q + 1] * r + [q] * (g - r)


@dataclass(frozen=True)
class PairCount:
    grouped: int  # within-sub-bag pairs, all levels
    merge: int  # merge-block pairs, all levels (CLS included at the top)
    full: int  # one ungrouped attention over the p instances
    layers: int

    @property
    def total(self) -> int:
        return self.grouped + self.merge

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.grouped, self.full)


def attention_pair_count(p: int, g: int | Sequence[int], m: int = 1, k: int = 1, layers: int = 1,
                         sizes: Sequence[int] | None = None) -> PairCount:
    """Exact query-key pair counts for grouped vs full attention.

    ``g`` is one sub-bag count for every level or one per level.  ``sizes``
    overrides the level-0 split (must sum to ``p``); other levels split
    evenly.  Level ``l + 1`` holds ``m`` tokens per level-``l`` sub-bag.
    """
    gs = [int(g)] * k if isinstance(g, (int, np.integer)) else [int(x) for x in g]
    if len(gs) != k or min(gs) < 1:
        raise ConfigurationError(f"need {k} sub-bag counts >= 1, got {gs}")
    if p < gs[0]:
        raise ConfigurationError(f"p={p} is smaller than g={gs[0]}")
    if m < 0 or layers < 1:
        raise ConfigurationError("m must be >= 0 and layers >= 1")
    if sizes is not None:
        sizes = [int(s) for s in sizes]
        if len(sizes) != gs[0] or sum(sizes) != p or min(sizes) < 0:
            raise ConfigurationError(f"sizes {sizes} do not split {p} tokens into {gs[0]} sub-bags")
    grouped = merge = 0
    tokens = p
    for level, gl in enumerate(gs):
        level_sizes = sizes if level == 0 and sizes is not None else even_sizes(tokens, gl)
        grouped += sum((w + m) ** 2 for w in level_sizes)
        tokens = m * gl
        merge += (tokens + (level + 1 == k)) ** 2
    return PairCount(grouped * layers, merge * layers, p * p * layers, layers)


def _bench_weights(C: int, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    return {k: Tensor(rng.normal(0.0, C ** -0.5, (C, C))) for k in ("wq", "wk", "wv", "wo")}


def bench_attention(p_list: Sequence[int], g_list: Sequence[int], C: int = 64, repetitions: int = 5,
                    heads: int = 1, m: int = 0, seed: int = 0) -> list[dict]:
    """Median forward time of one within-sub-bag attention block per (p, g)."""
    if repetitions < 1:
        raise ConfigurationError("repetitions must be >= 1")
    weights = _bench_weights(C, seed)
    rng = np.random.default_rng(seed)
    rows = []
    for p in p_list:
        if not 1 <= p <= MAX_BENCH_LENGTH:
            raise ConfigurationError(f"benchmark length {p} outside [1, {MAX_BENCH_LENGTH}]")
        x = rng.normal(size=(p, C))
        msg = rng.normal(size=(m, C))
        for g in g_list:
            if g > p:
                raise ConfigurationError(f"g={g} exceeds p={p}")
            sizes = even_sizes(p, g)
            times = []
            with ad.no_grad():
                parts = np.split(x, np.cumsum(sizes)[:-1])
                bags = [Tensor(np.vstack([msg, part])) for part in parts]
                for _ in range(repetitions):
                    t0 = time.perf_counter()
                    msa_within_subbags(bags, weights, heads, "bare")
                    times.append(time.perf_counter() - t0)
            pairs = attention_pair_count(p, g, m=m, sizes=sizes)
            rows.append({"p": p, "g": g, "dim": C, "m": m, "grouped_pairs": pairs.grouped,
                         "full_pairs": pairs.full, "median_seconds": statistics.median(times)})
    return rows


def bench_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, BENCH_HEADER, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "median_seconds": f"{r['median_seconds']:.6g}"})
    return buf.getvalue()
