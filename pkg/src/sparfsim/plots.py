"""Figure rendering for preset runs: one PNG next to each results CSV."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .config import ScenarioConfig  # noqa: E402
from .system import ScenarioReport  # noqa: E402

_SYSTEM_ORDER = ("host-dense", "ssd-dense", "ssd-sparq", "csd-dense",
                 "csd-sparf")
_BUCKETS = ("kv_access", "weight_access", "compute", "transfer")
_BUCKET_LABELS = ("KV cache access", "weight access", "compute", "transfer")


def _save(fig, path: str):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_throughput(rows, path: str):
    by_label: dict[str, list[tuple[int, float]]] = {}
    for cfg, rep in rows:
        by_label.setdefault(rep.label, []).append((rep.batch,
                                                   rep.throughput_tps))
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for label in _SYSTEM_ORDER:
        if label not in by_label:
            continue
        pts = sorted(by_label[label])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                label=label)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("batch size")
    ax.set_ylabel("throughput (tokens/s)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    _save(fig, path)


def render_breakdown(rows, path: str):
    labels, stacks = [], {b: [] for b in _BUCKETS}
    for cfg, rep in rows:
        labels.append(f"{rep.label}\nb={rep.batch}, {rep.csd_count} dev")
        shares = rep.shares()
        for b in _BUCKETS:
            stacks[b].append(shares[b])
    fig, ax = plt.subplots(figsize=(max(6.4, 0.65 * len(labels)), 3.8))
    bottom = [0.0] * len(labels)
    for bucket, label in zip(_BUCKETS, _BUCKET_LABELS):
        ax.bar(range(len(labels)), stacks[bucket], bottom=bottom, label=label)
        bottom = [a + b for a, b in zip(bottom, stacks[bucket])]
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, fontsize=6, rotation=45, ha="right")
    ax.set_ylabel("decode time share")
    ax.legend(fontsize=8)
    _save(fig, path)


def render_scaling(rows, path: str):
    by_kind: dict[str, list[tuple[int, float]]] = {}
    for cfg, rep in rows:
        by_kind.setdefault(rep.sparsity, []).append((rep.csd_count,
                                                     rep.throughput_tps))
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for kind, pts in sorted(by_kind.items()):
        pts = sorted(pts)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="s",
                label=kind)
    ax.set_xlabel("device count")
    ax.set_ylabel("throughput (tokens/s)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    _save(fig, path)


def render_compression(rows, path: str):
    by_count: dict[int, list[tuple[float, float]]] = {}
    for cfg, rep in rows:
        by_count.setdefault(rep.csd_count, []).append((rep.ratio,
                                                       rep.throughput_tps))
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for count, pts in sorted(by_count.items()):
        pts = sorted(pts, reverse=True)
        ax.plot([1 / p[0] for p in pts], [p[1] for p in pts], marker="^",
                label=f"{count} device(s)")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("compression factor (1/ratio)")
    ax.set_ylabel("throughput (tokens/s)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    _save(fig, path)


PRESET_RENDERERS = {
    "fig-throughput": render_throughput,
    "fig-breakdown": render_breakdown,
    "fig-scaling": render_scaling,
    "fig-compression": render_compression,
}


def render_preset(name: str, rows, path: str):
    PRESET_RENDERERS[name](rows, path)
