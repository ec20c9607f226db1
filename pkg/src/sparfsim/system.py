"""End-to-end cost model: GPU roofline for the non-attention operators, PCIe
transfer and host-software overheads, prefill layer-wise pipelining, decode
GPU/device overlap, multi-device head partitioning, and the host- and
SSD-offloading baselines.

Decode is evaluated at the mid-generation sequence length; per-token cost is
affine in the KV length, so the midpoint integrates the token loop exactly up
to page-rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .engine import (EngineConfig, FlashLink, HeadWork, MODE_DENSE,
                     MODE_SPARSE, head_schedule)
from .errors import ConfigError, InfeasibleError
from .layout import default_embedding_group, group_size_tokens

GiB = 1024 ** 3

SYSTEM_CSD = "csd"     # in-storage attention offload (P2P DMA, no host fs)
SYSTEM_SSD = "ssd"     # SSD offload through the host filesystem
SYSTEM_HOST = "host"   # host-memory offload, swapping when over capacity

SPARSITY_DENSE = "dense"
SPARSITY_SPARQ = "sparq"
SPARSITY_SPARF = "sparf"

DECODE_OPS = ("qkv_proj", "o_proj", "ffn")
ATTENTION_OPS = ("logit", "attend")


@dataclass(frozen=True)
class ModelSpec:
    name: str = "opt-13b"
    layers: int = 40
    hidden: int = 5120
    heads: int = 40
    params: float = 13e9
    element_bytes: int = 2
    max_context: int = 2048

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError("hidden size must divide evenly into heads")

    @property
    def d_h(self) -> int:
        return self.hidden // self.heads

    @property
    def weight_bytes(self) -> float:
        return self.params * self.element_bytes

    @property
    def layer_weight_bytes(self) -> float:
        return 12 * self.hidden ** 2 * self.element_bytes


OPT_13B = ModelSpec()


@dataclass(frozen=True)
class HardwareSpec:
    gpu_peak_flops: float = 155e12
    gpu_vram_bandwidth: float = 768e9
    gpu_vram_bytes: float = 48 * GiB
    pcie_gpu_host: float = 32e9
    pcie_csd: float = 3.5e9              # per-drive link, also the SSD link
    csd_count: int = 1
    host_memory_bytes: float = 96 * GiB
    fs_bandwidth_derate: float = 0.2     # filesystem efficiency loss
    host_fs_overhead_s: float = 3e-3     # per chunked fs command (baselines)
    host_cmd_overhead_s: float = 1e-4    # per host-memory copy command
    host_spill_bandwidth: float = 0.25e9  # swap-thrash page-in rate
    csd_dispatch_overhead_s: float = 150e-6  # host dispatch per (seq, layer)

    def __post_init__(self):
        for name in ("gpu_peak_flops", "gpu_vram_bandwidth", "gpu_vram_bytes",
                     "pcie_gpu_host", "pcie_csd", "host_memory_bytes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.csd_count < 1:
            raise ConfigError("csd_count must be >= 1")


@dataclass(frozen=True)
class Sparsity:
    kind: str = SPARSITY_DENSE
    ratio: float = 1.0  # kept fraction along both the embedding and token axes

    def __post_init__(self):
        if self.kind not in (SPARSITY_DENSE, SPARSITY_SPARQ, SPARSITY_SPARF):
            raise ConfigError(f"unknown sparsity kind {self.kind!r}")
        if not 0 < self.ratio <= 1:
            raise ConfigError("sparsity ratio must be in (0, 1]")

    def r(self, d_h: int) -> int:
        return max(1, round(self.ratio * d_h))

    def k(self, s_len: int) -> int:
        return max(1, round(self.ratio * s_len))


@dataclass(frozen=True)
class OperatorCost:
    flops: float
    bytes: float
    time_s: float


@dataclass
class ScenarioReport:
    system: str
    sparsity: str
    ratio: float
    csd_count: int
    batch: int
    s_in: int
    s_out: int
    prefill_s: float
    decode_token_s: float
    throughput_tps: float
    weight_access_s: float
    kv_access_s: float
    compute_s: float
    transfer_s: float
    peak_vram_bytes: float

    @property
    def label(self) -> str:
        return f"{self.system}-{self.sparsity}"

    def shares(self) -> dict[str, float]:
        buckets = {
            "weight_access": self.weight_access_s,
            "kv_access": self.kv_access_s,
            "compute": self.compute_s,
            "transfer": self.transfer_s,
        }
        total = sum(buckets.values())
        if total == 0:
            return {k: 0.0 for k in buckets}
        return {k: v / total for k, v in buckets.items()}


def kv_cache_bytes(model: ModelSpec, batch: int, s_len: float) -> float:
    """K and V bytes for the whole model at one batch/sequence point."""
    if batch < 1 or s_len < 1:
        raise ConfigError("batch and sequence length must be >= 1")
    return 2 * model.element_bytes * model.hidden * model.layers * batch * s_len


def operator_cost(op: str, phase: str, model: ModelSpec, batch: int,
                  s_len: float, hw: HardwareSpec) -> OperatorCost:
    """Analytic per-layer flop/byte counts and the roofline time."""
    if phase not in ("prefill", "decode"):
        raise ConfigError(f"unknown phase {phase!r}")
    H = model.hidden
    eb = model.element_bytes
    nh = model.heads
    tokens = batch * s_len if phase == "prefill" else batch
    if tokens == 0 or s_len == 0:
        return OperatorCost(0.0, 0.0, 0.0)
    if op == "qkv_proj":
        flops = 2 * tokens * H * 3 * H
        nbytes = 3 * H * H * eb + 4 * tokens * H * eb
    elif op == "o_proj":
        flops = 2 * tokens * H * H
        nbytes = H * H * eb + 2 * tokens * H * eb
    elif op == "ffn":
        flops = 2 * tokens * 8 * H * H
        nbytes = 8 * H * H * eb + 6 * tokens * H * eb
    elif op == "logit":
        flops = 2 * tokens * s_len * H
        nbytes = batch * s_len * H * eb + tokens * H * eb + tokens * nh * s_len * eb
    elif op == "attend":
        flops = 2 * tokens * s_len * H
        nbytes = batch * s_len * H * eb + tokens * nh * s_len * eb + tokens * H * eb
    else:
        raise ConfigError(f"unknown operator {op!r}")
    time_s = max(flops / hw.gpu_peak_flops, nbytes / hw.gpu_vram_bandwidth)
    return OperatorCost(float(flops), float(nbytes), time_s)


def _mid_decode_length(s_in: int, s_out: int) -> float:
    return s_in + (s_out + 1) / 2


def _gpu_layer_decode(model, batch, s_len, hw, with_attention: bool):
    ops = DECODE_OPS + ATTENTION_OPS if with_attention else DECODE_OPS
    time_s = flop_s = 0.0
    for op in ops:
        c = operator_cost(op, "decode", model, batch, s_len, hw)
        time_s += c.time_s
        flop_s += c.flops / hw.gpu_peak_flops
    return time_s, flop_s


def _prefill(model, batch, s_in, hw, push_bandwidth, per_layer_commands_s=0.0):
    """Layer-wise pipeline: compute of layer i+1 overlaps the KV push of
    layer i; returns total seconds."""
    if s_in == 0:
        return 0.0
    comp = 0.0
    for op in DECODE_OPS + ATTENTION_OPS:
        comp += operator_cost(op, "prefill", model, batch, s_in, hw).time_s
    kv_layer = 2 * model.element_bytes * model.hidden * batch * s_in
    xfer = kv_layer / push_bandwidth + per_layer_commands_s
    L = model.layers
    return L * max(comp, xfer) + min(comp, xfer)


def simulate_csd_offload(model: ModelSpec, batch: int, s_in: int, s_out: int,
                         hw: HardwareSpec, sparsity: Sparsity,
                         engine_cfg: EngineConfig | None = None,
                         flash: FlashLink | None = None,
                         first_step_factor: float = 2.0) -> ScenarioReport:
    """In-storage attention offload: the GPU runs projections and FFN, each
    drive runs decode attention for its share of the heads over its own flash
    channels, with q/k/v and output vectors moved over per-drive P2P links."""
    if sparsity.kind == SPARSITY_SPARQ:
        raise ConfigError("the in-storage system runs dense or sparf attention")
    engine_cfg = engine_cfg or EngineConfig()
    flash = flash or FlashLink()
    if model.weight_bytes > hw.gpu_vram_bytes:
        raise InfeasibleError(
            f"model weights ({model.weight_bytes / GiB:.1f} GiB) exceed GPU "
            f"VRAM ({hw.gpu_vram_bytes / GiB:.1f} GiB)")

    n = hw.csd_count
    heads_per_csd = math.ceil(model.heads / n)
    d_h = model.d_h
    eb = model.element_bytes
    L = model.layers

    prefill_s = _prefill(model, batch, s_in, hw, push_bandwidth=hw.pcie_csd * n)

    kv_stage = 2 * eb * model.hidden * batch * max(s_in, 1)
    act = 4 * batch * max(s_in, 1) * model.hidden * eb
    peak_vram = model.weight_bytes + kv_stage + act

    if s_out == 0:
        return ScenarioReport(
            system=SYSTEM_CSD, sparsity=sparsity.kind, ratio=sparsity.ratio,
            csd_count=n, batch=batch, s_in=s_in, s_out=s_out,
            prefill_s=prefill_s, decode_token_s=0.0, throughput_tps=0.0,
            weight_access_s=0.0, kv_access_s=0.0, compute_s=0.0,
            transfer_s=0.0, peak_vram_bytes=peak_vram)

    s_mid = int(round(_mid_decode_length(s_in, s_out)))
    mode = MODE_DENSE if sparsity.kind == SPARSITY_DENSE else MODE_SPARSE
    token_group = group_size_tokens(flash.page_size, d_h, eb)
    emb_group = min(d_h, default_embedding_group(
        flash.page_size, max(model.max_context, s_in + s_out), eb))
    work = HeadWork(
        d_h=d_h, s_len=s_mid, r=sparsity.r(d_h), k=sparsity.k(s_mid),
        token_group=token_group, embedding_group=emb_group,
        page_size=flash.page_size, element_bytes=eb,
        first_step_factor=first_step_factor, mode=mode)

    # per-device attention stream per token: (layer, head) slots balance
    # across devices to within one slot, so the amortized load is L*heads/n
    # sequence-tasks each; the greedy schedule is affine in the task count,
    # so calibrate its slope once and scale
    probe_n = 256
    single = head_schedule(engine_cfg, [work], flash)
    probe = head_schedule(engine_cfg, [work] * probe_n, flash)
    slope_us = (probe.makespan_us - single.makespan_us) / (probe_n - 1)
    tasks_per_device = batch * L * model.heads / n
    attn_s = (single.makespan_us + slope_us * (tasks_per_device - 1)) * 1e-6

    vector_bytes = batch * L * 4 * d_h * heads_per_csd * eb
    transfer_s = vector_bytes / hw.pcie_csd
    csd_total = attn_s + transfer_s

    gpu_time, gpu_flop_time = _gpu_layer_decode(model, batch, s_mid, hw,
                                                with_attention=False)
    gpu_total = L * gpu_time
    dispatch_s = batch * L * hw.csd_dispatch_overhead_s

    # GPU work and device work overlap in sub-batches; host dispatch stays
    # on the critical path and does not shrink with more drives
    token_s = max(gpu_total, csd_total) + dispatch_s

    weight_s = L * model.layer_weight_bytes / hw.gpu_vram_bandwidth
    per_task_flash_s = probe.flash_busy_us / probe_n * 1e-6
    per_task_compute_s = (probe.kernel_busy_us / engine_cfg.kernel_count
                          + probe.argtopk_busy_us) / probe_n * 1e-6
    kv_s = per_task_flash_s * tasks_per_device
    compute_s = L * gpu_flop_time + per_task_compute_s * tasks_per_device
    xfer_bucket = transfer_s + dispatch_s

    decode_total = s_out * token_s
    throughput = batch * s_out / (prefill_s + decode_total)
    return ScenarioReport(
        system=SYSTEM_CSD, sparsity=sparsity.kind, ratio=sparsity.ratio,
        csd_count=n, batch=batch, s_in=s_in, s_out=s_out,
        prefill_s=prefill_s, decode_token_s=token_s,
        throughput_tps=throughput, weight_access_s=weight_s,
        kv_access_s=kv_s, compute_s=compute_s, transfer_s=xfer_bucket,
        peak_vram_bytes=peak_vram)


def _kv_placement(model, hw, batch, s_end):
    """Static KV placement as the baseline systems configure it: the whole KV
    class stays in VRAM only if its final footprint fits, otherwise it is
    pinned to the offload target."""
    kv_total = kv_cache_bytes(model, batch, s_end)
    act_reserve = 16 * batch * model.hidden * model.element_bytes
    vram_free = max(0.0, hw.gpu_vram_bytes - model.weight_bytes - act_reserve)
    if kv_total <= vram_free:
        return kv_total, 1.0, 0.0
    return kv_total, 0.0, 1.0


def simulate_baseline(kind: str, model: ModelSpec, batch: int, s_in: int,
                      s_out: int, hw: HardwareSpec,
                      sparsity: Sparsity) -> ScenarioReport:
    """Traditional offloading: the full (or sparsity-reduced) per-token KV
    working set moves over PCIe each step.

    ``ssd`` goes through the host filesystem (bandwidth derate plus a
    per-chunk command overhead); adding drives does not help because the fs
    pipeline is the serial resource. ``host`` uses host memory and falls back
    to swap-thrash rates for any KV beyond host capacity.
    """
    if kind not in (SYSTEM_SSD, SYSTEM_HOST):
        raise ConfigError(f"unknown baseline kind {kind!r}")
    if sparsity.kind == SPARSITY_SPARF:
        raise ConfigError("baselines run dense or sparq attention")

    eb = model.element_bytes
    L = model.layers
    s_end = max(s_in + s_out, 1)
    s_mid = _mid_decode_length(s_in, s_out) if s_out else s_in

    kv_total, f_vram, f_out = _kv_placement(model, hw, batch, s_end)
    read_bytes = kv_cache_bytes(model, batch, max(s_mid, 1))
    if sparsity.kind == SPARSITY_SPARQ:
        # top-r slice of K plus full K,V rows for the top-k tokens
        read_bytes *= sparsity.ratio / 2 + sparsity.ratio

    fs_bw = hw.pcie_csd * (1 - hw.fs_bandwidth_derate)
    host_bw = hw.pcie_gpu_host * (1 - hw.fs_bandwidth_derate)
    write_bytes = 2 * eb * model.hidden * L * batch  # new token KV per step

    if kind == SYSTEM_SSD:
        outer_bw = fs_bw
        commands_s = 2 * batch * L * hw.host_fs_overhead_s * f_out
        kv_access = (read_bytes * f_vram / hw.gpu_vram_bandwidth
                     + read_bytes * f_out / outer_bw
                     + write_bytes / outer_bw + commands_s)
        push_bw = fs_bw
        prefill_cmds = 2 * batch * hw.host_fs_overhead_s
    else:
        host_cap = hw.host_memory_bytes
        out_bytes_total = kv_total * f_out
        f_host = min(out_bytes_total, host_cap) / kv_total if kv_total else 0.0
        f_spill = max(0.0, f_out - f_host)
        commands_s = 2 * batch * L * hw.host_cmd_overhead_s * (f_host + f_spill)
        kv_access = (read_bytes * f_vram / hw.gpu_vram_bandwidth
                     + read_bytes * f_host / host_bw
                     + read_bytes * f_spill / hw.host_spill_bandwidth
                     + write_bytes / host_bw + commands_s)
        push_bw = host_bw
        prefill_cmds = 2 * batch * hw.host_cmd_overhead_s

    prefill_s = _prefill(model, batch, s_in, hw, push_bandwidth=push_bw,
                         per_layer_commands_s=prefill_cmds)

    gpu_time, gpu_flop_time = _gpu_layer_decode(model, batch, max(s_mid, 1),
                                                hw, with_attention=True)
    gpu_total = L * gpu_time
    token_s = max(kv_access, gpu_total) if s_out else 0.0

    weight_s = L * model.layer_weight_bytes / hw.gpu_vram_bandwidth
    compute_s = L * gpu_flop_time
    decode_total = s_out * token_s
    throughput = (batch * s_out / (prefill_s + decode_total)
                  if s_out else 0.0)
    peak_vram = (model.weight_bytes + kv_total * f_vram
                 + 4 * batch * max(s_in, 1) * model.hidden * eb)
    return ScenarioReport(
        system=kind, sparsity=sparsity.kind, ratio=sparsity.ratio,
        csd_count=hw.csd_count, batch=batch, s_in=s_in, s_out=s_out,
        prefill_s=prefill_s,
        decode_token_s=token_s, throughput_tps=throughput,
        weight_access_s=weight_s,
        kv_access_s=kv_access if s_out else 0.0,
        compute_s=compute_s, transfer_s=0.0,
        peak_vram_bytes=peak_vram)


def simulate(system: str, model: ModelSpec, batch: int, s_in: int, s_out: int,
             hw: HardwareSpec, sparsity: Sparsity,
             engine_cfg: EngineConfig | None = None,
             flash: FlashLink | None = None,
             first_step_factor: float = 2.0) -> ScenarioReport:
    if system == SYSTEM_CSD:
        return simulate_csd_offload(model, batch, s_in, s_out, hw, sparsity,
                                    engine_cfg, flash, first_step_factor)
    return simulate_baseline(system, model, batch, s_in, s_out, hw, sparsity)
