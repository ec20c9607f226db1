"""Straight-line scalar reference for the sparse attention algorithms.

Everything in this module is written with plain Python floats, lists and
explicit loops -- no numpy -- so it can serve as an independent oracle for
the vectorized implementations in :mod:`sparfsim.core`. Keep it dumb: no
shared helpers with the main code path.
"""

from __future__ import annotations

import math


def _softmax(logits: list[float]) -> list[float]:
    # max-subtraction for numerical stability (both code paths use it)
    m = max(logits)
    exps = [math.exp(x - m) for x in logits]
    total = sum(exps)
    return [e / total for e in exps]


def _argtopk_indices(values: list[float], count: int, magnitude: bool) -> list[int]:
    # ties break toward the lower index; result ascending
    key = [abs(v) for v in values] if magnitude else list(values)
    order = sorted(range(len(values)), key=lambda i: (-key[i], i))
    return sorted(order[:count])


def scalar_dense_attention(q: list[float], K: list[list[float]],
                           V: list[list[float]]) -> list[float]:
    """softmax(q.K^T / sqrt(d_h)).V with explicit loops."""
    d_h = len(q)
    s_len = len(K)
    scale = math.sqrt(d_h)
    logits = [sum(q[d] * K[t][d] for d in range(d_h)) / scale for t in range(s_len)]
    probs = _softmax(logits)
    return [sum(probs[t] * V[t][d] for t in range(s_len)) for d in range(d_h)]


def scalar_sparf_attention(
    q: list[float],
    K: list[list[float]],
    V: list[list[float]],
    v_bar: list[float],
    r: int,
    k: int,
    m: int = 1,
    n: int = 1,
    temperature_scale: float = 1.0,
):
    """Straight-line transcription of the flash-aware sparse attention steps.

    Returns a dict with the output vector plus every intermediate needed to
    cross-check the vectorized path: the embedding/token selections, the
    group-quantized load sets, the approximate score vector and alpha.

    ``temperature_scale`` exists only as a mutation hook for the verification
    suite (scaling the approximate-score temperature must break the oracle
    equivalence); leave it at 1.0 for normal use.
    """
    d_h = len(q)
    s_len = len(K)

    # embedding selection by |q|
    l1_all = sum(abs(x) for x in q)
    degenerate = l1_all == 0.0
    if degenerate:
        emb_sel = list(range(r))
    else:
        emb_sel = _argtopk_indices(q, r, magnitude=True)

    # group-quantized column load, then exact filter back to emb_sel
    emb_groups = sorted({i // m for i in emb_sel})
    loaded_cols = []
    for g in emb_groups:
        loaded_cols.extend(range(g * m, min((g + 1) * m, d_h)))
    cols = [c for c in loaded_cols if c in set(emb_sel)]
    assert cols == emb_sel  # filter recovers the exact selection

    # approximate scores at the rescaled temperature
    if degenerate:
        temp = math.sqrt(d_h)
    else:
        l1_sel = sum(abs(q[i]) for i in emb_sel)
        temp = math.sqrt(d_h * l1_sel / l1_all) * temperature_scale
    approx_logits = [
        sum(q[i] * K[t][i] for i in emb_sel) / temp for t in range(s_len)
    ]
    s_hat = _softmax(approx_logits)

    # token selection on the raw approximate scores (the padding mask is
    # all-zeros for exact-length sequences, so it never changes the ranking)
    tok_sel = _argtopk_indices(s_hat, k, magnitude=False)
    alpha = sum(s_hat[t] for t in tok_sel)
    alpha = min(1.0, max(0.0, alpha))

    # group-quantized row load for K and V, filtered back to tok_sel
    tok_groups = sorted({t // n for t in tok_sel})
    loaded_rows = []
    for g in tok_groups:
        loaded_rows.extend(range(g * n, min((g + 1) * n, s_len)))
    rows = [t for t in loaded_rows if t in set(tok_sel)]
    assert rows == tok_sel

    # exact softmax over the selected tokens with the full query
    scale = math.sqrt(d_h)
    logits = [sum(q[d] * K[t][d] for d in range(d_h)) / scale for t in tok_sel]
    probs = _softmax(logits)

    out = [
        alpha * sum(probs[j] * V[tok_sel[j]][d] for j in range(len(tok_sel)))
        + (1.0 - alpha) * v_bar[d]
        for d in range(d_h)
    ]
    return {
        "out": out,
        "alpha": alpha,
        "approx_scores": s_hat,
        "embedding_selection": emb_sel,
        "token_selection": tok_sel,
        "embedding_groups": emb_groups,
        "token_groups": tok_groups,
        "degenerate": degenerate,
    }
