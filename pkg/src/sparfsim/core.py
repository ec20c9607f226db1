"""Exact single-head attention numerics: dense, bandwidth-sparse (per-index
loads) and flash-aware sparse (page-group loads with in-controller filtering),
plus the page-level access traces each call would induce on flash.

All arithmetic is float64; byte accounting assumes 2-byte stored elements
(FP16 storage format), which keeps numerical verification separate from
capacity modeling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError, ConsistencyError, DegenerateQueryError

STORAGE_BYTES = 2  # stored element width (FP16), used only for byte accounting

EMBEDDING_AXIS = "embedding-axis"
TOKEN_AXIS = "token-axis"

PHASE_EMBEDDING = "step-2"  # embedding-indexed K column pages
PHASE_TOKEN = "step-8"      # token-indexed K,V row pages


@dataclass(frozen=True)
class HeadConfig:
    """Shape and sparsity parameters for one attention head call.

    d_h: head hidden dimension; s_len: current sequence length;
    r/k: kept embedding/token counts; m/n: embedding/token group sizes
    (indices packed per flash page unit).
    """

    d_h: int
    s_len: int
    r: int
    k: int
    m: int = 1
    n: int = 1

    def __post_init__(self):
        if self.d_h <= 0 or self.s_len <= 0:
            raise ConfigError("d_h and s_len must be positive")
        if not 1 <= self.r <= self.d_h:
            raise ConfigError(f"r={self.r} outside [1, d_h={self.d_h}]")
        if not 1 <= self.k <= self.s_len:
            raise ConfigError(f"k={self.k} outside [1, s_len={self.s_len}]")
        if self.m < 1 or self.n < 1:
            raise ConfigError("group sizes m, n must be >= 1")


@dataclass
class HeadTensors:
    """One head's operands: query, K/V matrices and the running value mean."""

    q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    v_bar: np.ndarray | None = None
    token_count: int | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.K = np.asarray(self.K, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        if self.K.ndim != 2 or self.V.shape != self.K.shape:
            raise ConfigError("K and V must be equal-shaped S x d_h matrices")
        if self.q.shape != (self.K.shape[1],):
            raise ConfigError("q length must match the K/V hidden dimension")
        if self.token_count is None:
            self.token_count = self.K.shape[0]
        if self.v_bar is None:
            self.v_bar = self.V.mean(axis=0)
        else:
            self.v_bar = np.asarray(self.v_bar, dtype=np.float64)
            if self.v_bar.shape != self.q.shape:
                raise ConfigError("v_bar length must match d_h")

    @property
    def s_len(self) -> int:
        return self.K.shape[0]

    @property
    def d_h(self) -> int:
        return self.K.shape[1]

    @classmethod
    def from_seed(cls, seed: int, d_h: int, s_len: int) -> "HeadTensors":
        rng = np.random.default_rng(seed)
        return cls(
            q=rng.standard_normal(d_h),
            K=rng.standard_normal((s_len, d_h)),
            V=rng.standard_normal((s_len, d_h)),
        )


@dataclass(frozen=True)
class SelectionMask:
    """Ordered index selection along one axis, with its page-group size."""

    kind: str
    selected: tuple[int, ...]
    group_size: int = 1

    def __post_init__(self):
        if self.kind not in (EMBEDDING_AXIS, TOKEN_AXIS):
            raise ConfigError(f"unknown mask kind {self.kind!r}")
        if self.group_size < 1:
            raise ConfigError("group_size must be >= 1")
        sel = self.selected
        if any(b <= a for a, b in zip(sel, sel[1:])):
            raise ConfigError("selected indices must be strictly increasing")
        if sel and sel[0] < 0:
            raise ConfigError("selected indices must be non-negative")


@dataclass(frozen=True)
class AccessTrace:
    """Page-level byte/IO record for one load phase of a sparse attention call.

    ``unit_bytes`` is the stored size of one group-load unit, so
    ``pages_requested * unit_bytes == bytes_over_channel`` by construction.
    ``dense_bytes`` is what a non-sparse load at the same group granularity
    would move, so ``bytes_after_filter <= bytes_over_channel <= dense_bytes``
    holds for every call.
    """

    phase: str
    pages_requested: int
    unit_bytes: int
    bytes_over_channel: int
    bytes_after_filter: int
    dense_bytes: int

    def __post_init__(self):
        if self.pages_requested * self.unit_bytes != self.bytes_over_channel:
            raise ConsistencyError("trace bytes do not match requested pages")
        if not (self.bytes_after_filter <= self.bytes_over_channel
                <= self.dense_bytes):
            raise ConsistencyError("trace byte ordering violated")


@dataclass(frozen=True)
class AttentionResult:
    out: np.ndarray
    alpha: float
    approx_scores: np.ndarray
    trace: tuple[AccessTrace, AccessTrace]
    embedding_mask: SelectionMask
    token_mask: SelectionMask
    degenerate_query: bool = False


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    exps = np.exp(shifted)
    return exps / exps.sum()


def dense_attention(t: HeadTensors) -> np.ndarray:
    """softmax(q.K^T / sqrt(d_h)).V over the full sequence."""
    logits = t.K @ t.q / np.sqrt(t.d_h)
    return _softmax(logits) @ t.V


def argtopk(values: np.ndarray, count: int, key: str = "raw",
            kind: str = TOKEN_AXIS, group_size: int = 1) -> SelectionMask:
    """Deterministic top-``count`` selection; ties go to the lower index."""
    values = np.asarray(values, dtype=np.float64)
    if not 1 <= count <= values.shape[0]:
        raise ConfigError(f"count={count} outside [1, {values.shape[0]}]")
    if key == "magnitude":
        keyvals = np.abs(values)
    elif key == "raw":
        keyvals = values
    else:
        raise ConfigError(f"unknown argtopk key {key!r}")
    order = np.argsort(-keyvals, kind="stable")
    selected = tuple(int(i) for i in np.sort(order[:count]))
    return SelectionMask(kind=kind, selected=selected, group_size=group_size)


def approx_scores(t: HeadTensors, mask: SelectionMask) -> np.ndarray:
    """Approximate score vector from the selected query embeddings.

    The softmax temperature is sqrt(d_h * |q_sel|_1 / |q|_1), so a full
    selection reduces exactly to the dense sqrt(d_h).
    """
    if mask.kind != EMBEDDING_AXIS:
        raise ConfigError("approx_scores requires an embedding-axis mask")
    l1_all = float(np.abs(t.q).sum())
    if l1_all == 0.0:
        raise DegenerateQueryError("query has zero L1 norm")
    sel = np.fromiter(mask.selected, dtype=np.intp)
    q_sel = t.q[sel]
    l1_sel = float(np.abs(q_sel).sum())
    temp = np.sqrt(t.d_h * l1_sel / l1_all)
    return _softmax(t.K[:, sel] @ q_sel / temp)


def alpha_mass(s_hat: np.ndarray, mask: SelectionMask) -> float:
    """Total approximate score mass captured by the selected tokens."""
    if mask.kind != TOKEN_AXIS:
        raise ConfigError("alpha_mass requires a token-axis mask")
    sel = np.fromiter(mask.selected, dtype=np.intp)
    return min(1.0, max(0.0, float(s_hat[sel].sum())))


def group_expand(mask: SelectionMask, group: int) -> tuple[int, ...]:
    """Group ids containing at least one selected index (first-step load set)."""
    if group < 1:
        raise ConfigError("group must be >= 1")
    return tuple(sorted({i // group for i in mask.selected}))


def filter_groups(groups: Mapping[int, np.ndarray], mask: SelectionMask,
                  axis: int = 0) -> np.ndarray:
    """Second-step filter: exact rows/columns for the mask, in index order.

    ``groups`` must cover exactly ``group_expand(mask, mask.group_size)``;
    each entry holds the slice of the source tensor for that group along
    ``axis`` (a boundary group may be shorter than the group size).
    """
    gsize = mask.group_size
    expected = set(group_expand(mask, gsize))
    got = set(groups.keys())
    if got != expected:
        raise ConsistencyError(
            f"loaded groups {sorted(got)} do not cover selection groups "
            f"{sorted(expected)}")
    pieces = []
    for idx in mask.selected:
        g = idx // gsize
        local = idx - g * gsize
        block = groups[g]
        if local >= block.shape[axis]:
            raise ConsistencyError(f"group {g} too short for index {idx}")
        pieces.append(np.take(block, local, axis=axis))
    return np.stack(pieces, axis=axis)


def update_value_mean(v_bar: np.ndarray, token_count: int,
                      new_row: np.ndarray) -> tuple[np.ndarray, int]:
    """Fold one more value row into the running mean."""
    if token_count < 0:
        raise ConfigError("token_count must be >= 0")
    v_bar = np.asarray(v_bar, dtype=np.float64)
    new_row = np.asarray(new_row, dtype=np.float64)
    return (v_bar * token_count + new_row) / (token_count + 1), token_count + 1


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _embedding_trace(cfg: HeadConfig, groups_loaded: int) -> AccessTrace:
    unit = cfg.m * cfg.s_len * STORAGE_BYTES  # one column group over the sequence
    return AccessTrace(
        phase=PHASE_EMBEDDING,
        pages_requested=groups_loaded,
        unit_bytes=unit,
        bytes_over_channel=groups_loaded * unit,
        bytes_after_filter=cfg.r * cfg.s_len * STORAGE_BYTES,
        dense_bytes=_ceil_div(cfg.d_h, cfg.m) * unit,
    )


def _token_trace(cfg: HeadConfig, groups_loaded: int) -> AccessTrace:
    unit = cfg.n * cfg.d_h * STORAGE_BYTES  # one K or V row group
    return AccessTrace(
        phase=PHASE_TOKEN,
        pages_requested=2 * groups_loaded,  # K rows and V rows
        unit_bytes=unit,
        bytes_over_channel=2 * groups_loaded * unit,
        bytes_after_filter=2 * cfg.k * cfg.d_h * STORAGE_BYTES,
        dense_bytes=2 * _ceil_div(cfg.s_len, cfg.n) * unit,
    )


def _slice_groups(tensor: np.ndarray, group_ids: Iterable[int], group: int,
                  axis: int) -> dict[int, np.ndarray]:
    """Simulated page-group load: contiguous slices along ``axis``."""
    out = {}
    limit = tensor.shape[axis]
    for g in group_ids:
        lo, hi = g * group, min((g + 1) * group, limit)
        out[g] = np.take(tensor, range(lo, hi), axis=axis)
    return out


def sparf_attention(t: HeadTensors, cfg: HeadConfig) -> AttentionResult:
    """Flash-aware sparse attention with dual-step (group load + filter) I/O.

    The filter step recovers the exact selected indices, so the numerical
    path is identical to `sparq_attention` for any group sizes; m and n only
    change the access trace.
    """
    if (cfg.d_h, cfg.s_len) != (t.d_h, t.s_len):
        raise ConfigError("tensor shapes do not match the head config")

    degenerate = float(np.abs(t.q).sum()) == 0.0
    if degenerate:
        emb_mask = SelectionMask(EMBEDDING_AXIS, tuple(range(cfg.r)), cfg.m)
        s_hat = np.full(cfg.s_len, 1.0 / cfg.s_len)
    else:
        emb_mask = argtopk(t.q, cfg.r, key="magnitude", kind=EMBEDDING_AXIS,
                           group_size=cfg.m)
        # dual-step column load: page groups in, exact columns out
        egroups = group_expand(emb_mask, cfg.m)
        loaded_cols = _slice_groups(t.K, egroups, cfg.m, axis=1)
        k_cols = filter_groups(loaded_cols, emb_mask, axis=1)
        sel = np.fromiter(emb_mask.selected, dtype=np.intp)
        q_sel = t.q[sel]
        temp = np.sqrt(cfg.d_h * float(np.abs(q_sel).sum())
                       / float(np.abs(t.q).sum()))
        s_hat = _softmax(k_cols @ q_sel / temp)
    egroups = group_expand(emb_mask, cfg.m)

    tok_mask = argtopk(s_hat, cfg.k, key="raw", kind=TOKEN_AXIS,
                       group_size=cfg.n)
    alpha = alpha_mass(s_hat, tok_mask)

    tgroups = group_expand(tok_mask, cfg.n)
    k_rows = filter_groups(_slice_groups(t.K, tgroups, cfg.n, axis=0),
                           tok_mask, axis=0)
    v_rows = filter_groups(_slice_groups(t.V, tgroups, cfg.n, axis=0),
                           tok_mask, axis=0)

    probs = _softmax(k_rows @ t.q / np.sqrt(cfg.d_h))
    out = alpha * (probs @ v_rows) + (1.0 - alpha) * t.v_bar

    trace = (_embedding_trace(cfg, len(egroups)),
             _token_trace(cfg, len(tgroups)))
    return AttentionResult(out=out, alpha=alpha, approx_scores=s_hat,
                           trace=trace, embedding_mask=emb_mask,
                           token_mask=tok_mask, degenerate_query=degenerate)


def sparq_attention(t: HeadTensors, r: int, k: int) -> AttentionResult:
    """Bandwidth-sparse reference: the same steps with group sizes forced
    to 1 (per-index loads, no page alignment)."""
    cfg = HeadConfig(d_h=t.d_h, s_len=t.s_len, r=r, k=k, m=1, n=1)
    return sparf_attention(t, cfg)


def test_vector_to_json(cfg: HeadConfig, tensors: HeadTensors | int,
                        expected: np.ndarray) -> str:
    """Serialize a {config, tensors (seed or explicit), expected} record."""
    if isinstance(tensors, int):
        tens: dict = {"seed": tensors}
    else:
        tens = {"q": tensors.q.tolist(), "K": tensors.K.tolist(),
                "V": tensors.V.tolist(), "v_bar": tensors.v_bar.tolist(),
                "token_count": tensors.token_count}
    record = {
        "config": {"d_h": cfg.d_h, "s_len": cfg.s_len, "r": cfg.r,
                   "k": cfg.k, "m": cfg.m, "n": cfg.n},
        "tensors": tens,
        "expected": np.asarray(expected).tolist(),
    }
    return json.dumps(record, sort_keys=True)


def test_vector_from_json(text: str) -> tuple[HeadConfig, HeadTensors, np.ndarray]:
    record = json.loads(text)
    for fieldname in ("config", "tensors", "expected"):
        if fieldname not in record:
            raise ConfigError(f"test vector missing field {fieldname!r}")
    cfg = HeadConfig(**record["config"])
    tens = record["tensors"]
    if "seed" in tens:
        tensors = HeadTensors.from_seed(tens["seed"], cfg.d_h, cfg.s_len)
    else:
        tensors = HeadTensors(q=tens["q"], K=tens["K"], V=tens["V"],
                              v_bar=tens.get("v_bar"),
                              token_count=tens.get("token_count"))
    return cfg, tensors, np.asarray(record["expected"], dtype=np.float64)
