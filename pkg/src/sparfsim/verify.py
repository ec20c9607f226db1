"""Self-contained verification suite behind the `verify` subcommand: oracle
equivalences, normalization and trace invariants, layout round-trips and
arithmetic, bandwidth ceilings, and write-amplification counting.

``mutate="temperature"`` perturbs the approximate-score temperature in the
reference oracle; the transcription check must then fail, demonstrating the
oracle has teeth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core, flashsim, layout, reference
from .core import HeadConfig, HeadTensors
from .errors import ConfigError


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _random_cases(seed: int, count: int):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        d_h = int(rng.choice([4, 8, 16, 32]))
        s_len = int(rng.choice([8, 16, 64, 128]))
        r = int(rng.integers(1, d_h + 1))
        k = int(rng.integers(1, s_len + 1))
        m = int(rng.choice([1, 2, 4]))
        n = int(rng.choice([1, 2, 4, 8]))
        t = HeadTensors.from_seed(int(rng.integers(0, 2 ** 62)), d_h, s_len)
        yield HeadConfig(d_h, s_len, r, k, m, n), t


def check_scalar_transcription(temperature_scale: float = 1.0) -> CheckResult:
    worst = 0.0
    for cfg, t in _random_cases(101, 60):
        got = core.sparf_attention(t, cfg)
        ref = reference.scalar_sparf_attention(
            t.q.tolist(), t.K.tolist(), t.V.tolist(), t.v_bar.tolist(),
            cfg.r, cfg.k, cfg.m, cfg.n, temperature_scale=temperature_scale)
        worst = max(worst, float(np.abs(got.out - np.array(ref["out"])).max()),
                    abs(got.alpha - ref["alpha"]))
    return CheckResult("scalar-transcription", worst <= 1e-9,
                       f"max deviation {worst:.3e} (tol 1e-9)")


def check_sparq_equivalence() -> CheckResult:
    for cfg, t in _random_cases(202, 40):
        unit = HeadConfig(cfg.d_h, cfg.s_len, cfg.r, cfg.k, 1, 1)
        a = core.sparf_attention(t, unit)
        b = core.sparq_attention(t, cfg.r, cfg.k)
        if not (np.array_equal(a.out, b.out) and a.alpha == b.alpha):
            return CheckResult("sparq-equivalence", False,
                               "unit-group path diverged from reference")
    return CheckResult("sparq-equivalence", True,
                       "bitwise identical on 40 cases")


def check_dense_identity() -> CheckResult:
    worst = 0.0
    for cfg, t in _random_cases(303, 60):
        full = HeadConfig(cfg.d_h, cfg.s_len, cfg.d_h, cfg.s_len, cfg.m, cfg.n)
        got = core.sparf_attention(t, full).out
        want = core.dense_attention(t)
        scale = float(np.linalg.norm(want))
        worst = max(worst, float(np.linalg.norm(got - want)) / scale)
    return CheckResult("dense-identity", worst <= 1e-6,
                       f"max relative error {worst:.3e} (tol 1e-6)")


def check_normalization() -> CheckResult:
    for cfg, t in _random_cases(404, 40):
        res = core.sparf_attention(t, cfg)
        if abs(res.approx_scores.sum() - 1.0) > 1e-6:
            return CheckResult("normalization", False, "scores do not sum to 1")
        if not 0.0 <= res.alpha <= 1.0:
            return CheckResult("normalization", False, "alpha outside [0,1]")
        tr_e, tr_t = res.trace
        for tr in (tr_e, tr_t):
            if not (tr.bytes_after_filter <= tr.bytes_over_channel
                    <= tr.dense_bytes):
                return CheckResult("normalization", False,
                                   "trace byte ordering violated")
    return CheckResult("normalization", True,
                       "softmax sums, alpha bounds and trace ordering hold")


def check_dual_step_gather() -> CheckResult:
    rng = np.random.default_rng(505)
    for s_len in (1, 3, 8, 17, 32):
        data = rng.standard_normal((s_len, 4))
        for group in (1, 2, 4, 8, 16):
            for _ in range(8):
                count = int(rng.integers(1, s_len + 1))
                idx = tuple(sorted(rng.choice(s_len, count, replace=False)))
                mask = core.SelectionMask(core.TOKEN_AXIS, idx, group)
                groups = {g: data[g * group:(g + 1) * group]
                          for g in core.group_expand(mask, group)}
                got = core.filter_groups(groups, mask)
                if not np.array_equal(got, data[list(idx)]):
                    return CheckResult("dual-step-gather", False,
                                       f"mismatch at S={s_len} group={group}")
    return CheckResult("dual-step-gather", True,
                       "filter o group-load equals direct gather")


def check_layout_roundtrip() -> CheckResult:
    geo = layout.FlashGeometry(channels=4, dies_per_channel=2,
                               blocks_per_plane=64, pages_per_block=32,
                               page_size=64)
    lo = layout.KVCacheLayout(geo, d_h=4, max_context=16)
    rng = np.random.default_rng(606)
    K = rng.standard_normal((24, 4))
    V = rng.standard_normal((24, 4))
    for tok in range(24):
        lo.append_token_kv(0, 1, K[tok], V[tok])
    toks = [0, 5, 13, 23]
    if not np.array_equal(lo.gather_token_rows(0, 1, toks, "K"), K[toks]):
        return CheckResult("layout-roundtrip", False, "token K mismatch")
    if not np.array_equal(lo.gather_token_rows(0, 1, toks, "V"), V[toks]):
        return CheckResult("layout-roundtrip", False, "token V mismatch")
    cols = lo.gather_embedding_columns(0, 1, [0, 3], 24)
    if not np.array_equal(cols, K[:24][:, [0, 3]]):
        return CheckResult("layout-roundtrip", False, "embedding K mismatch")
    return CheckResult("layout-roundtrip", True,
                       "token and embedding reads return written data")


def check_layout_arithmetic() -> CheckResult:
    ok = (layout.group_size_tokens(4096, 128, 2) == 16
          and layout.embedding_stripe_tokens(4096, 1, 2) == 2048
          and all(256 <= layout.embedding_stripe_tokens(4096, g, 2) <= 1024
                  for g in range(2, 9)))
    return CheckResult("layout-arithmetic", ok,
                       "group and stripe token counts match the expected "
                       "constants" if ok else "constants drifted")


def check_bandwidth_ceiling() -> CheckResult:
    timing = flashsim.FlashTiming()
    geo = layout.FlashGeometry(channels=8, dies_per_channel=8,
                               page_size=16384, blocks_per_plane=512)
    tl = flashsim.schedule_reads(flashsim.balanced_read_addresses(geo, 16000),
                                 geo, timing)
    bw8 = flashsim.measure_bandwidth(tl)
    geo1 = layout.FlashGeometry(channels=1, dies_per_channel=8,
                                page_size=16384, blocks_per_plane=4096)
    tl1 = flashsim.schedule_reads(flashsim.balanced_read_addresses(geo1, 3000),
                                  geo1, timing)
    bw1 = flashsim.measure_bandwidth(tl1)
    ok = abs(bw8 - 11.2e9) <= 0.02 * 11.2e9 and abs(bw1 - 1.4e9) <= 0.02 * 1.4e9
    return CheckResult("bandwidth-ceiling", ok,
                       f"8-channel {bw8 / 1e9:.2f} GB/s, single {bw1 / 1e9:.3f} GB/s")


def check_write_amplification() -> CheckResult:
    geo = layout.FlashGeometry(channels=8, dies_per_channel=4,
                               blocks_per_plane=256, pages_per_block=256,
                               page_size=4096)
    lo = layout.KVCacheLayout(geo, d_h=128, max_context=4096)
    rng = np.random.default_rng(707)
    row = rng.standard_normal(128)
    for _ in range(4096):
        lo.append_token_kv(0, 0, row, row)
    rep = lo.write_amplification_report()
    wa = rep["grouped"].write_amplification
    naive = rep["naive"].write_amplification
    ok = wa <= 1.05 and abs(naive - 16.0) < 1e-9
    return CheckResult("write-amplification", ok,
                       f"grouped WA {wa:.3f}, naive WA {naive:.1f}")


def check_engine_breakdown() -> CheckResult:
    from .engine import EngineConfig, FlashLink, HeadWork, head_schedule, \
        stage_latencies
    cfg = EngineConfig()
    flash = FlashLink()
    work = HeadWork(d_h=128, s_len=1024, r=16, k=128, token_group=16,
                    embedding_group=8)
    br = stage_latencies(cfg, work, flash)
    additive = abs(sum(d for _, d in br.segments) - br.total_us) \
        <= cfg.cycles_us(1)
    dense = HeadWork(d_h=128, s_len=1024, r=128, k=1024, token_group=16,
                     embedding_group=8)
    brd = stage_latencies(cfg, dense, flash)
    symmetric = abs(brd.stages["logit0"] - brd.stages["logit"]) < 1e-9
    n = 64
    sched = head_schedule(cfg, [work] * n, flash)
    heads_per_s = n / (sched.makespan_us * 1e-6)
    flash_bound = flash.bandwidth / (work.flash_pages() * flash.page_size)
    compute_bound = (cfg.kernel_count * cfg.macs_per_cycle * cfg.clock_hz
                     / work.kernel_macs())
    ceiling = heads_per_s <= min(flash_bound, compute_bound) * 1.0001
    ok = additive and symmetric and ceiling
    return CheckResult("engine-breakdown", ok,
                       f"segments additive, dense logit symmetry, throughput "
                       f"{heads_per_s:.0f} heads/s under ceilings")


def check_system_trends() -> CheckResult:
    from .system import HardwareSpec, OPT_13B, Sparsity, simulate
    hw = HardwareSpec()
    csd_s = simulate("csd", OPT_13B, 64, 1024, 1024, hw,
                     Sparsity("sparf", 0.125))
    csd_d = simulate("csd", OPT_13B, 64, 1024, 1024, hw, Sparsity("dense"))
    ssd_q = simulate("ssd", OPT_13B, 64, 1024, 1024, hw,
                     Sparsity("sparq", 0.125))
    ssd_d = simulate("ssd", OPT_13B, 64, 1024, 1024, hw, Sparsity("dense"))
    ordered = (csd_s.throughput_tps > csd_d.throughput_tps
               > ssd_q.throughput_tps > ssd_d.throughput_tps)
    counts = (1, 2, 4)
    tps = [simulate("csd", OPT_13B, 64, 1024, 1024,
                    HardwareSpec(csd_count=n),
                    Sparsity("dense")).throughput_tps for n in counts]
    gains = [(t2 - t1) / (n2 - n1) for (n1, t1), (n2, t2)
             in zip(zip(counts, tps), zip(counts[1:], tps[1:]))]
    scaling = tps[0] < tps[1] < tps[2] and gains[0] >= gains[1]
    ok = ordered and scaling
    return CheckResult("system-trends", ok,
                       "throughput ordering and concave device scaling hold"
                       if ok else "trend violated")


def check_determinism() -> CheckResult:
    cfg = HeadConfig(16, 64, 4, 8, 2, 4)
    t = HeadTensors.from_seed(808, 16, 64)
    a = core.sparf_attention(t, cfg)
    b = core.sparf_attention(t, cfg)
    ok = (np.array_equal(a.out, b.out) and a.trace == b.trace
          and a.alpha == b.alpha)
    return CheckResult("determinism", ok,
                       "repeated evaluation is bitwise identical"
                       if ok else "outputs differ between runs")


def run_verify(mutate: str | None = None) -> list[CheckResult]:
    if mutate not in (None, "temperature"):
        raise ConfigError(f"unknown mutation {mutate!r}")
    temperature_scale = 1.001 if mutate == "temperature" else 1.0
    return [
        check_scalar_transcription(temperature_scale),
        check_sparq_equivalence(),
        check_dense_identity(),
        check_normalization(),
        check_dual_step_gather(),
        check_layout_roundtrip(),
        check_layout_arithmetic(),
        check_bandwidth_ceiling(),
        check_write_amplification(),
        check_engine_breakdown(),
        check_system_trends(),
        check_determinism(),
    ]
