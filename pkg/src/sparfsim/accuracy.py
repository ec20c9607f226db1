"""Synthetic-data accuracy harness: output error of the flash-aware sparse
attention versus dense, and its delta against the per-index sparse reference,
across compression ratios."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import HeadConfig, HeadTensors, dense_attention, sparf_attention, \
    sparq_attention
from .errors import ConfigError
from .layout import group_size_tokens

ALLOWED_RATIOS = (1.0, 0.5, 0.25, 0.125, 0.0625)

ACCURACY_CSV_HEADER = ("# sparfsim accuracy harness, csv schema v1\n"
                       "ratio,r,k,mean_rel_l2,max_rel_l2,sparf_sparq_delta")


@dataclass(frozen=True)
class AccuracyRow:
    ratio: float
    r: int
    k: int
    mean_rel_l2: float
    max_rel_l2: float
    sparf_sparq_delta: float


def run_accuracy(seed: int, d_h: int, s_len: int, heads: int,
                 ratios: tuple[float, ...]) -> list[AccuracyRow]:
    for ratio in ratios:
        if ratio not in ALLOWED_RATIOS:
            raise ConfigError(
                f"ratio {ratio} not in allowed set {ALLOWED_RATIOS}")
    if heads < 1:
        raise ConfigError("need at least one head")
    base = np.random.default_rng(seed)
    head_seeds = base.integers(0, 2 ** 62, size=heads)
    tensors = [HeadTensors.from_seed(int(s), d_h, s_len) for s in head_seeds]
    denses = [dense_attention(t) for t in tensors]

    n = min(s_len, group_size_tokens(4096, d_h))
    m = min(d_h, 8)
    rows = []
    for ratio in ratios:
        r = max(1, round(ratio * d_h))
        k = max(1, round(ratio * s_len))
        cfg = HeadConfig(d_h=d_h, s_len=s_len, r=r, k=k, m=m, n=n)
        cfg_unit = HeadConfig(d_h=d_h, s_len=s_len, r=r, k=k, m=1, n=1)
        errs = []
        delta = 0.0
        for t, dense in zip(tensors, denses):
            approx = sparf_attention(t, cfg).out
            errs.append(float(np.linalg.norm(approx - dense)
                              / np.linalg.norm(dense)))
            unit = sparf_attention(t, cfg_unit).out
            ref = sparq_attention(t, r, k).out
            delta = max(delta, float(np.abs(unit - ref).max()))
        rows.append(AccuracyRow(ratio=ratio, r=r, k=k,
                                mean_rel_l2=float(np.mean(errs)),
                                max_rel_l2=float(np.max(errs)),
                                sparf_sparq_delta=delta))
    return rows


def accuracy_csv(rows: list[AccuracyRow]) -> str:
    lines = [ACCURACY_CSV_HEADER]
    for row in rows:
        lines.append(f"{row.ratio!r},{row.r},{row.k},{row.mean_rel_l2!r},"
                     f"{row.max_rel_l2!r},{row.sparf_sparq_delta!r}")
    return "\n".join(lines) + "\n"
