"""Engine timing model: stage formulas, overlap, scheduling and ceilings."""

import math

import pytest

from sparfsim.engine import (EngineConfig, FlashLink, HeadWork, MODE_DENSE,
                             MODE_SPARSE, head_schedule, stage_latencies)
from sparfsim.errors import ConfigError
from sparfsim.flashsim import FlashTiming, balanced_read_addresses, \
    schedule_reads
from sparfsim.layout import FlashGeometry

CFG = EngineConfig()
FLASH = FlashLink()


def work(**kwargs):
    base = dict(d_h=128, s_len=1024, r=16, k=128, token_group=16,
                embedding_group=8)
    base.update(kwargs)
    return HeadWork(**base)


class TestStageCosts:
    def test_gemv_cycle_formula(self):
        # 128 tokens x 128 dims on 768 MACs -> ceil(16384/768) = 22 cycles
        w = work(mode=MODE_DENSE, s_len=128)
        br = stage_latencies(CFG, w, FLASH)
        gemv_us = CFG.cycles_us(22)
        assert gemv_us == pytest.approx(0.0772, abs=1e-3)
        # logit = GeMV + softmax over 128 kept tokens
        assert br.stages["logit"] == pytest.approx(
            CFG.cycles_us(22 + 128), rel=1e-12)

    def test_dense_config_logit_symmetry(self):
        w = work(r=128, k=1024, mode=MODE_SPARSE)
        br = stage_latencies(CFG, w, FLASH)
        assert br.stages["logit0"] == pytest.approx(br.stages["logit"])

    def test_flash_dominated_total_approaches_load_sum(self):
        slow = FlashLink(channels=1, channel_bandwidth=50e6)
        br = stage_latencies(CFG, work(), slow)
        loads = br.stages["k_col_load"] + br.stages["kv_row_load"]
        assert loads / br.total_us > 0.95

    def test_breakdown_additivity(self):
        for w in (work(), work(mode=MODE_DENSE), work(r=128, k=1024)):
            br = stage_latencies(CFG, w, FLASH)
            assert sum(d for _, d in br.segments) == pytest.approx(
                br.total_us, abs=CFG.cycles_us(1))

    def test_rows_exported_with_bytes(self):
        br = stage_latencies(CFG, work(), FLASH)
        rows = br.rows()
        labels = [r[0] for r in rows]
        assert "Logit-0" in labels and "output transfer" in labels
        kv_bytes = dict((r[0], r[2]) for r in rows)["K/V row load+filter"]
        assert kv_bytes == 2 * work().token_groups_loaded() * 4096


class TestLoadedBytes:
    def test_dense_full_selection_loads_everything(self):
        # sparse mode with full selection: K columns once + K,V rows once
        w = work(r=128, k=1024)
        dense_k_pages = math.ceil(128 / 8) * math.ceil(1024 / 256)
        dense_kv_pages = 2 * math.ceil(1024 / 16)
        assert w.embed_pages() == dense_k_pages
        assert 2 * w.token_groups_loaded() == dense_kv_pages

    def test_sparse_loads_strictly_less(self):
        full = work(r=128, k=1024)
        sparse = work(r=16, k=128)
        assert sparse.embed_pages() < full.embed_pages()
        assert sparse.token_groups_loaded() < full.token_groups_loaded()

    def test_first_step_factor_caps_at_dense(self):
        w = work(k=1024, first_step_factor=8.0)
        assert w.token_groups_loaded() == math.ceil(1024 / 16)

    def test_dense_mode_skips_embedding_pass(self):
        w = work(mode=MODE_DENSE)
        assert w.embed_pages() == 0
        br = stage_latencies(CFG, w, FLASH)
        assert br.stages["k_col_load"] == 0.0
        assert br.stages["logit0"] == 0.0


class TestHeadSchedule:
    def test_single_head_equals_critical_path(self):
        w = work()
        br = stage_latencies(CFG, w, FLASH)
        sched = head_schedule(CFG, [w], FLASH)
        assert sched.makespan_us == pytest.approx(br.total_us)

    def test_two_heads_overlap(self):
        w = work()
        single = head_schedule(CFG, [w], FLASH).makespan_us
        double = head_schedule(CFG, [w, w], FLASH).makespan_us
        assert single < double < 2 * single

    def test_flash_bound_makespan_approaches_bandwidth_bound(self):
        w = work()
        n = 256
        sched = head_schedule(CFG, [w] * n, FLASH)
        pages = n * w.flash_pages()
        bound_us = pages * FLASH.page_size / FLASH.bandwidth * 1e6
        assert sched.makespan_us >= bound_us
        assert sched.makespan_us <= 1.2 * bound_us

    def test_throughput_ceilings_closed_form(self):
        w = work()
        n = 128
        sched = head_schedule(CFG, [w] * n, FLASH)
        heads_per_s = n / (sched.makespan_us * 1e-6)
        flash_bound = FLASH.bandwidth / (w.flash_pages() * FLASH.page_size)
        compute_bound = (CFG.kernel_count * CFG.macs_per_cycle * CFG.clock_hz
                         / w.kernel_macs())
        assert heads_per_s <= min(flash_bound, compute_bound) * 1.0001

    def test_work_conservation_binding_resource(self):
        # greedy scheduling keeps the busiest resource saturated: the makespan
        # never exceeds its busy time plus one head's critical path of fill
        for flash in (FLASH, FlashLink(channels=64, channel_bandwidth=100e9)):
            w = work()
            sched = head_schedule(CFG, [w] * 64, flash)
            busiest = max(sched.kernel_busy_us / CFG.kernel_count,
                          sched.argtopk_busy_us, sched.flash_busy_us)
            fill = stage_latencies(CFG, w, flash).total_us
            assert sched.makespan_us <= busiest + fill + 1e-6

    def test_empty_schedule_rejected(self):
        with pytest.raises(ConfigError):
            head_schedule(CFG, [], FLASH)

    def test_determinism(self):
        w = work()
        a = head_schedule(CFG, [w] * 10, FLASH)
        b = head_schedule(CFG, [w] * 10, FLASH)
        assert a.completions_us == b.completions_us


class TestFlashLinkValidation:
    def test_closed_form_matches_discrete_sim(self):
        # the engine's streaming read model tracks the event-level simulator
        geo = FlashGeometry(channels=8, dies_per_channel=8, page_size=16384,
                            blocks_per_plane=512)
        timing = FlashTiming()
        link = FlashLink.from_parts(geo, timing)
        for pages in (64, 512, 2048):
            tl = schedule_reads(balanced_read_addresses(geo, pages), geo,
                                timing)
            assert link.read_makespan_us(pages) == pytest.approx(
                tl.makespan_us, rel=0.05)

    def test_kernel_count_fixed(self):
        with pytest.raises(ConfigError):
            EngineConfig(kernel_count=3)
