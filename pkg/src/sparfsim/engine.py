"""Functional-plus-timing model of the in-storage attention engine: the
argtopk unit, line-rate NFC filters, two identical attention kernels, and
their pipeline overlap with flash loads.

Compute stages cost ceil(MACs / macs_per_cycle) cycles on one kernel;
softmax and argtopk run at a fixed element rate on dedicated units. Flash
loads use a closed-form channel-striped read model (validated against the
discrete flash simulator): a load of P pages keeps the channels busy for
ceil(P / channels) page transfers after a fixed fill (command overhead plus
one array read), and back-to-back loads stream at channel rate.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

from .errors import ConfigError
from .flashsim import FlashTiming
from .layout import FlashGeometry, embedding_stripe_tokens

MODE_SPARSE = "sparf"
MODE_DENSE = "dense"

STAGE_LABELS = {
    "argtopk_r": "ArgTopK-r",
    "k_col_load": "K-col load+filter",
    "logit0": "Logit-0",
    "argtopk_k": "ArgTopK-k",
    "kv_row_load": "K/V row load+filter",
    "logit": "Logit",
    "attend": "Attend",
    "output": "output transfer",
}


@dataclass(frozen=True)
class EngineConfig:
    clock_hz: float = 285e6
    macs_per_cycle: int = 768          # per-kernel GeMV throughput (DSP count)
    softmax_throughput: int = 1        # elements/cycle, dedicated unit
    argtopk_throughput: int = 1        # elements/cycle, dedicated unit
    nfc_filter_bytes_per_cycle: int = 16  # line-rate; adds no latency
    kernel_count: int = 2
    output_bandwidth: float = 3.5e9    # bytes/s back to the host/GPU link

    def __post_init__(self):
        if self.kernel_count != 2:
            raise ConfigError("the engine has exactly two attention kernels")
        for name in ("clock_hz", "macs_per_cycle", "softmax_throughput",
                     "argtopk_throughput", "output_bandwidth"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    def cycles_us(self, cycles: int) -> float:
        return cycles / self.clock_hz * 1e6


@dataclass(frozen=True)
class FlashLink:
    """Closed-form read model of one device's flash backend."""

    channels: int = 8
    channel_bandwidth: float = 1.4e9
    page_size: int = 4096
    t_read_us: float = 50.0
    command_overhead_us: float = 5.0

    @classmethod
    def from_parts(cls, geo: FlashGeometry, timing: FlashTiming) -> "FlashLink":
        return cls(channels=geo.channels,
                   channel_bandwidth=timing.channel_bandwidth,
                   page_size=geo.page_size,
                   t_read_us=timing.t_read_us,
                   command_overhead_us=timing.command_overhead_us)

    @property
    def fill_us(self) -> float:
        return self.command_overhead_us + self.t_read_us

    def busy_us(self, pages: int) -> float:
        """Channel occupancy of a striped read of ``pages`` pages."""
        if pages == 0:
            return 0.0
        xfer = self.page_size / self.channel_bandwidth * 1e6
        return math.ceil(pages / self.channels) * xfer

    def read_makespan_us(self, pages: int) -> float:
        if pages == 0:
            return 0.0
        return self.fill_us + self.busy_us(pages)

    @property
    def bandwidth(self) -> float:
        return self.channels * self.channel_bandwidth


@dataclass(frozen=True)
class HeadWork:
    """Per-head workload shape for the timing model.

    first_step_factor models how much of the index sparsity survives
    page-group quantization: real selections cluster, so the first-step load
    keeps about half the sparsity (factor 2 over the exact bytes, capped at
    dense).
    """

    d_h: int
    s_len: int
    r: int
    k: int
    token_group: int
    embedding_group: int
    page_size: int = 4096
    element_bytes: int = 2
    first_step_factor: float = 2.0
    mode: str = MODE_SPARSE

    def embed_pages(self) -> int:
        if self.mode == MODE_DENSE:
            return 0
        total_groups = math.ceil(self.d_h / self.embedding_group)
        hit = min(total_groups,
                  math.ceil(self.first_step_factor * self.r
                            / self.embedding_group))
        stripes = math.ceil(
            self.s_len / embedding_stripe_tokens(self.page_size,
                                                 self.embedding_group,
                                                 self.element_bytes))
        return hit * stripes

    def token_groups_loaded(self) -> int:
        total = math.ceil(self.s_len / self.token_group)
        if self.mode == MODE_DENSE:
            return total
        return min(total, math.ceil(self.first_step_factor * self.k
                                    / self.token_group))

    def kept_tokens(self) -> int:
        return self.s_len if self.mode == MODE_DENSE else self.k

    def flash_pages(self) -> int:
        return self.embed_pages() + 2 * self.token_groups_loaded()

    def kernel_macs(self) -> int:
        k_eff = self.kept_tokens()
        macs = 2 * k_eff * self.d_h + self.d_h
        if self.mode == MODE_SPARSE:
            macs += self.r * self.s_len
        return macs


def _stage_cycles(cfg: EngineConfig, work: HeadWork) -> dict[str, int]:
    k_eff = work.kept_tokens()
    cycles = {
        "argtopk_r": math.ceil(work.d_h / cfg.argtopk_throughput),
        "logit0": (math.ceil(work.r * work.s_len / cfg.macs_per_cycle)
                   + math.ceil(work.s_len / cfg.softmax_throughput)),
        "argtopk_k": math.ceil(work.s_len / cfg.argtopk_throughput),
        "logit": (math.ceil(k_eff * work.d_h / cfg.macs_per_cycle)
                  + math.ceil(k_eff / cfg.softmax_throughput)),
        "attend": (math.ceil(k_eff * work.d_h / cfg.macs_per_cycle)
                   + math.ceil(work.d_h / cfg.macs_per_cycle)),
    }
    if work.mode == MODE_DENSE:
        cycles["argtopk_r"] = cycles["logit0"] = cycles["argtopk_k"] = 0
    return cycles


@dataclass
class StageBreakdown:
    """Per-stage durations (us) and bytes for one head, plus the critical-path
    total and the exclusive segments that sum to it."""

    stages: dict[str, float]
    stage_bytes: dict[str, int]
    total_us: float
    segments: list[tuple[str, float]]

    def rows(self) -> list[tuple[str, float, int]]:
        return [(STAGE_LABELS[name], self.stages[name],
                 self.stage_bytes.get(name, 0)) for name in self.stages]


def stage_latencies(cfg: EngineConfig, work: HeadWork,
                    flash: FlashLink) -> StageBreakdown:
    """Single-head stage costs and critical path.

    The K-column load starts only after the embedding argtopk; the V-row load
    streams behind the K rows and overlaps the Logit stage; the NFC filter
    adds no latency.
    """
    cyc = _stage_cycles(cfg, work)
    e_pages = work.embed_pages()
    g_t = work.token_groups_loaded()
    page = flash.page_size

    a1 = cfg.cycles_us(cyc["argtopk_r"])
    kcol = flash.read_makespan_us(e_pages)
    logit0 = cfg.cycles_us(cyc["logit0"])
    a2 = cfg.cycles_us(cyc["argtopk_k"])
    t = a1 + kcol + logit0 + a2

    # K rows then V rows on the flash pipe; Logit waits for K only
    busy_k = flash.busy_us(g_t)
    busy_v = flash.busy_us(g_t)
    complete_k = t + (flash.fill_us + busy_k if g_t else 0.0)
    complete_v = t + (flash.fill_us + busy_k + busy_v if g_t else 0.0)
    logit = cfg.cycles_us(cyc["logit"])
    attend = cfg.cycles_us(cyc["attend"])
    logit_end = complete_k + logit
    attend_start = max(logit_end, complete_v)
    out_us = work.d_h * work.element_bytes / cfg.output_bandwidth * 1e6
    total = attend_start + attend + out_us

    # exclusive critical-path segments, summing to total by construction
    seg: list[tuple[str, float]] = []
    for name, dur in (("argtopk_r", a1), ("k_col_load", kcol),
                      ("logit0", logit0), ("argtopk_k", a2),
                      ("kv_row_load", complete_k - t), ("logit", logit)):
        if dur:
            seg.append((name, dur))
    if complete_v > logit_end:
        seg.append(("kv_row_load", complete_v - logit_end))
    seg.append(("attend", attend))
    seg.append(("output", out_us))

    stages = {
        "argtopk_r": a1,
        "k_col_load": kcol,
        "logit0": logit0,
        "argtopk_k": a2,
        "kv_row_load": complete_v - t,
        "logit": logit,
        "attend": attend,
        "output": out_us,
    }
    stage_bytes = {
        "k_col_load": e_pages * page,
        "kv_row_load": 2 * g_t * page,
        "output": work.d_h * work.element_bytes,
    }
    return StageBreakdown(stages=stages, stage_bytes=stage_bytes,
                          total_us=total, segments=seg)


@dataclass
class ScheduleResult:
    completions_us: list[float]
    makespan_us: float
    kernel_busy_us: float
    argtopk_busy_us: float
    flash_busy_us: float
    flash_bytes: int


def _head_stage_graph(cfg: EngineConfig, w: HeadWork):
    """Stages as (name, resource, amount, deps); flash amounts are pages."""
    cyc = _stage_cycles(cfg, w)
    out_us = w.d_h * w.element_bytes / cfg.output_bandwidth * 1e6
    g_t = w.token_groups_loaded()
    if w.mode == MODE_SPARSE:
        return [
            ("argtopk_r", "argtopk", cfg.cycles_us(cyc["argtopk_r"]), ()),
            ("k_col_load", "flash", w.embed_pages(), (0,)),
            ("logit0", "kernel", cfg.cycles_us(cyc["logit0"]), (1,)),
            ("argtopk_k", "argtopk", cfg.cycles_us(cyc["argtopk_k"]), (2,)),
            ("k_row_load", "flash", g_t, (3,)),
            ("v_row_load", "flash", g_t, (3,)),
            ("logit", "kernel", cfg.cycles_us(cyc["logit"]), (4,)),
            ("attend", "kernel", cfg.cycles_us(cyc["attend"]), (5, 6)),
            ("output", "link", out_us, (7,)),
        ]
    return [
        ("k_row_load", "flash", g_t, ()),
        ("v_row_load", "flash", g_t, ()),
        ("logit", "kernel", cfg.cycles_us(cyc["logit"]), (0,)),
        ("attend", "kernel", cfg.cycles_us(cyc["attend"]), (1, 2)),
        ("output", "link", out_us, (3,)),
    ]


def head_schedule(cfg: EngineConfig, works: list[HeadWork],
                  flash: FlashLink) -> ScheduleResult:
    """Greedy work-conserving schedule of many heads over the two kernels,
    the argtopk unit and the flash pipe.

    Stages are dispatched in (ready time, head, stage) order; the flash pipe
    streams queued loads back-to-back (a queued load's fixed fill latency
    overlaps the previous load's transfers), so loads for one head overlap
    compute of another.
    """
    if not works:
        raise ConfigError("head_schedule needs at least one head")
    kernel_free = [0.0] * cfg.kernel_count
    argtopk_free = 0.0
    flash_free = 0.0
    kernel_busy = argtopk_busy = flash_busy = 0.0
    flash_bytes = 0

    graphs = [_head_stage_graph(cfg, w) for w in works]
    n_deps = [[len(st[3]) for st in g] for g in graphs]
    dep_children: list[list[list[int]]] = []
    for g in graphs:
        children: list[list[int]] = [[] for _ in g]
        for si, (_, _, _, deps) in enumerate(g):
            for d in deps:
                children[d].append(si)
        dep_children.append(children)

    ready: list[tuple[float, int, int]] = []
    ready_at = [[0.0] * len(g) for g in graphs]
    for h, g in enumerate(graphs):
        for si, (_, _, _, deps) in enumerate(g):
            if not deps:
                heapq.heappush(ready, (0.0, h, si))

    completions = [0.0] * len(works)
    while ready:
        ready_t, h, si = heapq.heappop(ready)
        name, resource, amount, _ = graphs[h][si]
        if resource == "argtopk":
            start = max(ready_t, argtopk_free)
            end = start + amount
            argtopk_free = end
            argtopk_busy += amount
        elif resource == "kernel":
            idx = min(range(cfg.kernel_count), key=lambda i: kernel_free[i])
            start = max(ready_t, kernel_free[idx])
            end = start + amount
            kernel_free[idx] = end
            kernel_busy += amount
        elif resource == "flash":
            pages = int(amount)
            busy = flash.busy_us(pages)
            start = max(ready_t, flash_free)
            flash_free = start + busy
            end = start + busy + (flash.fill_us if pages else 0.0)
            flash_busy += busy
            flash_bytes += pages * flash.page_size
        else:  # output link: small messages, no contention modeled
            end = ready_t + amount
        completions[h] = max(completions[h], end)
        for child in dep_children[h][si]:
            ready_at[h][child] = max(ready_at[h][child], end)
            n_deps[h][child] -= 1
            if n_deps[h][child] == 0:
                heapq.heappush(ready, (ready_at[h][child], h, child))

    return ScheduleResult(
        completions_us=completions,
        makespan_us=max(completions),
        kernel_busy_us=kernel_busy,
        argtopk_busy_us=argtopk_busy,
        flash_busy_us=flash_busy,
        flash_bytes=flash_bytes,
    )
