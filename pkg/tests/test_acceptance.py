"""Acceptance gate: every criterion at its stated tolerance, one line each."""

import itertools

import numpy as np
import pytest

from sparfsim import core, flashsim, layout, reference
from sparfsim.config import results_csv, run_sweep
from sparfsim.core import HeadConfig, HeadTensors, SelectionMask, TOKEN_AXIS
from sparfsim.engine import EngineConfig, FlashLink, HeadWork, head_schedule
from sparfsim.flashsim import FlashTiming, balanced_read_addresses, \
    measure_bandwidth, schedule_reads
from sparfsim.layout import (FlashGeometry, KVCacheLayout,
                             embedding_stripe_tokens, group_size_tokens)
from sparfsim.presets import PRESET_NAMES, build_preset
from sparfsim.system import (HardwareSpec, OPT_13B, Sparsity, kv_cache_bytes,
                             simulate)

HW = HardwareSpec()


def report(criterion: str, passed: bool, detail: str = ""):
    print(f"[{'PASS' if passed else 'FAIL'}] {criterion}" +
          (f": {detail}" if detail else ""))
    assert passed, f"{criterion} failed: {detail}"


def test_criterion_1_algorithm_exactness():
    dims = [16, 64, 128]
    seqs = [32, 256, 1024]
    combos = list(itertools.product(dims, seqs))
    rng = np.random.default_rng(12345)
    worst_oracle = worst_dense = 0.0
    for i in range(1000):
        d_h, s_len = combos[i % len(combos)]
        r = int(rng.integers(1, d_h + 1))
        k = int(rng.integers(1, s_len + 1))
        t = HeadTensors.from_seed(int(rng.integers(0, 2 ** 62)), d_h, s_len)

        got = core.sparf_attention(t, HeadConfig(d_h, s_len, r, k, 1, 1))
        ref = reference.scalar_sparf_attention(
            t.q.tolist(), t.K.tolist(), t.V.tolist(), t.v_bar.tolist(), r, k)
        worst_oracle = max(
            worst_oracle,
            float(np.abs(got.out - np.asarray(ref["out"])).max()),
            abs(got.alpha - ref["alpha"]))

        sparq = core.sparq_attention(t, r, k)
        assert np.array_equal(got.out, sparq.out), "sparq mismatch"

        full = core.sparf_attention(
            t, HeadConfig(d_h, s_len, d_h, s_len, 2, 4))
        dense = core.dense_attention(t)
        worst_dense = max(worst_dense,
                          float(np.linalg.norm(full.out - dense)
                                / np.linalg.norm(dense)))
    report("criterion 1 (algorithm exactness, 1000 heads)",
           worst_oracle <= 1e-9 and worst_dense <= 1e-6,
           f"oracle dev {worst_oracle:.2e} <= 1e-9, "
           f"dense rel {worst_dense:.2e} <= 1e-6")


def test_criterion_2_dual_step_exactness():
    rng = np.random.default_rng(777)
    checked = 0
    for s_len in range(1, 33):
        matrix = rng.standard_normal((s_len, 2))
        for group in (1, 2, 4, 8, 16):
            if s_len <= 10:
                index_sets = [c for size in range(1, s_len + 1)
                              for c in itertools.combinations(range(s_len),
                                                              size)]
            else:
                singles = [(i,) for i in range(s_len)]
                pairs = list(itertools.combinations(range(s_len), 2))
                sampled = []
                for size in range(1, s_len + 1):
                    pick = rng.choice(s_len, size=size, replace=False)
                    sampled.append(tuple(sorted(int(x) for x in pick)))
                index_sets = singles + pairs + sampled + \
                    [tuple(range(s_len))]
            for idx in index_sets:
                mask = SelectionMask(TOKEN_AXIS, idx, group)
                groups = {g: matrix[g * group:(g + 1) * group]
                          for g in core.group_expand(mask, group)}
                got = core.filter_groups(groups, mask)
                assert np.array_equal(got, matrix[list(idx)]), \
                    f"S={s_len} group={group} idx={idx}"
                checked += 1
    report("criterion 2 (dual-step loading exactness)", True,
           f"{checked} mask/group cases equal direct gather "
           "(all subsets for S<=10)")


def test_criterion_3_layout_arithmetic():
    ok = (group_size_tokens(4096, 128, 2) == 16
          and embedding_stripe_tokens(4096, 1, 2) == 2048
          and all(256 <= embedding_stripe_tokens(4096, g, 2) <= 1024
                  for g in range(2, 9)))
    report("criterion 3 (layout arithmetic)", ok,
           "16 tokens/group, 2048 tokens/page, stripes in [256, 1024]")


def test_criterion_4_kv_sizing():
    a = kv_cache_bytes(OPT_13B, 32, 4096)
    b = kv_cache_bytes(OPT_13B, 128, 2048)
    ok = abs(a - 100e9) <= 0.10 * 100e9 and abs(b - 200e9) <= 0.10 * 200e9
    report("criterion 4 (KV sizing)", ok,
           f"{a / 1e9:.1f} GB vs 100 GB, {b / 1e9:.1f} GB vs 200 GB, +-10%")


def test_criterion_5_flash_bandwidth_ceiling():
    timing = FlashTiming()
    geo8 = FlashGeometry(channels=8, dies_per_channel=8, page_size=16384,
                         blocks_per_plane=512)
    bw8 = measure_bandwidth(schedule_reads(
        balanced_read_addresses(geo8, 16000), geo8, timing))
    geo1 = FlashGeometry(channels=1, dies_per_channel=8, page_size=16384,
                         blocks_per_plane=4096)
    bw1 = measure_bandwidth(schedule_reads(
        balanced_read_addresses(geo1, 3000), geo1, timing))
    ok = (abs(bw8 - 11.2e9) <= 0.02 * 11.2e9
          and abs(bw1 - 1.4e9) <= 0.02 * 1.4e9)
    report("criterion 5 (flash bandwidth ceiling)", ok,
           f"8-ch {bw8 / 1e9:.2f} GB/s (11.2 +-2%), "
           f"1-ch {bw1 / 1e9:.3f} GB/s (1.4 +-2%)")


def test_criterion_6_read_write_amplification():
    geo = FlashGeometry(channels=8, dies_per_channel=4, blocks_per_plane=256,
                        pages_per_block=256, page_size=4096)
    lo = KVCacheLayout(geo, d_h=128, max_context=4096)
    row = np.ones(128)
    for _ in range(4096):
        lo.append_token_kv(0, 0, row, row)

    one_group_pages = lo.lookup_token_pages(0, 0, range(16), "K")
    rep = lo.write_amplification_report()
    grouped_wa = rep["grouped"].write_amplification
    naive_wa = rep["naive"].write_amplification
    naive_read_ratio = geo.page_size / (128 * 2)  # bytes moved per 256B row
    ok = (len(one_group_pages) == 1 and naive_read_ratio == 16
          and grouped_wa <= 1.05 and naive_wa == pytest.approx(16.0))
    report("criterion 6 (read/write amplification)", ok,
           f"1 group = {len(one_group_pages)} page, naive moves "
           f"{naive_read_ratio:.0f}x, WA grouped {grouped_wa:.3f} <= 1.05 "
           f"vs naive {naive_wa:.0f}")


def test_criterion_7_baseline_breakdown_trend():
    big = simulate("ssd", OPT_13B, 64, 1024, 1024, HW, Sparsity("dense"))
    small = simulate("ssd", OPT_13B, 1, 1024, 1024, HW, Sparsity("dense"))
    big_share = big.shares()["kv_access"]
    small_shares = small.shares()
    ok = (big_share >= 0.95 and small_shares["kv_access"] <= 0.10
          and small_shares["weight_access"] == max(small_shares.values()))
    report("criterion 7 (baseline breakdown trend)", ok,
           f"b=64 KV share {big_share:.1%} >= 95%, b=1 KV share "
           f"{small_shares['kv_access']:.1%} <= 10% with weight access "
           f"dominant ({small_shares['weight_access']:.1%})")


def test_criterion_8_system_ordering_and_gains():
    details = []
    ok = True
    for batch in (64, 128, 256):
        csd_s = simulate("csd", OPT_13B, batch, 1024, 1024, HW,
                         Sparsity("sparf", 0.125))
        csd_d = simulate("csd", OPT_13B, batch, 1024, 1024, HW,
                         Sparsity("dense"))
        ssd_q = simulate("ssd", OPT_13B, batch, 1024, 1024, HW,
                         Sparsity("sparq", 0.125))
        ssd_d = simulate("ssd", OPT_13B, batch, 1024, 1024, HW,
                         Sparsity("dense"))
        ordered = (csd_s.throughput_tps > csd_d.throughput_tps
                   > ssd_q.throughput_tps > ssd_d.throughput_tps)
        gain = csd_s.throughput_tps / ssd_d.throughput_tps
        reduction = 1 - csd_d.kv_access_s / ssd_d.kv_access_s
        ok = ok and ordered and gain >= 4.0 and reduction >= 0.80
        details.append(f"b={batch}: gain {gain:.1f}x, KV time -{reduction:.1%}")
    csd2 = simulate("csd", OPT_13B, 64, 1024, 1024,
                    HardwareSpec(csd_count=2), Sparsity("dense"))
    csd1 = simulate("csd", OPT_13B, 64, 1024, 1024, HW, Sparsity("dense"))
    ssd1 = simulate("ssd", OPT_13B, 64, 1024, 1024, HW, Sparsity("dense"))
    shares = [r.shares()["kv_access"] for r in (ssd1, csd1, csd2)]
    ok = ok and shares[0] > shares[1] > shares[2]
    report("criterion 8 (system ordering and gains)", ok,
           "; ".join(details) + f"; KV share {shares[0]:.2f} > "
           f"{shares[1]:.2f} > {shares[2]:.2f}")


def test_criterion_9_multi_csd_scaling():
    counts = (1, 2, 4, 8, 12, 16, 20)
    speedups = {}
    ok = True
    for kind, sp, lo, hi in (("dense", Sparsity("dense"), 6.0, 12.0),
                             ("sparse", Sparsity("sparf", 0.125), 5.0, 10.0)):
        tps = [simulate("csd", OPT_13B, 256, 1024, 1024,
                        HardwareSpec(csd_count=n), sp).throughput_tps
               for n in counts]
        nondecreasing = all(b >= a - 1e-9 for a, b in zip(tps, tps[1:]))
        gains = [(t2 - t1) / (n2 - n1) for (n1, t1), (n2, t2)
                 in zip(zip(counts, tps), zip(counts[1:], tps[1:]))]
        concave = all(g2 <= g1 + 1e-9 for g1, g2 in zip(gains, gains[1:]))
        speedup = tps[-1] / tps[0]
        speedups[kind] = speedup
        ok = ok and nondecreasing and concave and lo <= speedup <= hi
    report("criterion 9 (multi-device scaling)", ok,
           f"dense 20-dev speedup {speedups['dense']:.2f}x in [6, 12], "
           f"sparse {speedups['sparse']:.2f}x in [5, 10], "
           "nondecreasing and concave")


def test_criterion_10_preset_determinism():
    ok = True
    for name in PRESET_NAMES:
        runs = []
        for _ in range(2):
            rows = run_sweep(build_preset(name, seed=42))
            runs.append(results_csv(rows).encode())
        ok = ok and runs[0] == runs[1]
    report("criterion 10 (preset determinism)", ok,
           "all presets byte-identical across repeated runs at seed 42")
