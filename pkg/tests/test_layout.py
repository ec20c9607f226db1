"""FTL layout: packing arithmetic, placement, buffering, lookups, WA."""

import json

import numpy as np
import pytest

from sparfsim import layout
from sparfsim.core import SelectionMask, TOKEN_AXIS, EMBEDDING_AXIS
from sparfsim.errors import CapacityError, ConfigError, MappingError
from sparfsim.layout import (EmbeddingStripeKey, FlashGeometry, KVCacheLayout,
                             TokenGroupKey, embedding_stripe_tokens,
                             group_size_tokens)


class TestPackingArithmetic:
    def test_reference_head_geometry(self):
        assert group_size_tokens(4096, 128, 2) == 16

    @pytest.mark.parametrize("page,d_h,eb,want", [
        (16384, 128, 2, 64),
        (4096, 64, 2, 32),
    ])
    def test_group_size_ratios(self, page, d_h, eb, want):
        assert group_size_tokens(page, d_h, eb) == want

    def test_non_divisible_page_raises(self):
        with pytest.raises(ConfigError):
            group_size_tokens(4096, 96, 3)

    def test_stripe_full_page(self):
        assert embedding_stripe_tokens(4096, 1, 2) == 2048

    @pytest.mark.parametrize("g,want", [(8, 256), (4, 512), (2, 1024)])
    def test_stripe_range(self, g, want):
        assert embedding_stripe_tokens(4096, g, 2) == want

    def test_stripe_span_within_256_to_1024(self):
        for g in range(2, 9):
            assert 256 <= embedding_stripe_tokens(4096, g, 2) <= 1024

    @pytest.mark.parametrize("ctx,want", [(2048, 8), (4096, 8), (1024, 2),
                                          (512, 4), (256, 8)])
    def test_default_embedding_group(self, ctx, want):
        assert layout.default_embedding_group(4096, ctx, 2) == want


class TestGeometry:
    def test_defaults_valid(self):
        geo = FlashGeometry()
        assert geo.page_size == 4096 and geo.channels == 8

    def test_non_power_of_two_page(self):
        with pytest.raises(ConfigError):
            FlashGeometry(page_size=3000)

    def test_zero_counts(self):
        with pytest.raises(ConfigError):
            FlashGeometry(channels=0)

    def test_address_bounds(self):
        geo = FlashGeometry(channels=2)
        with pytest.raises(ConfigError):
            layout.PhysicalPageAddress(2, 0, 0, 0, 0).check_bounds(geo)


def small_layout(channels=8, d_h=4, page_size=64, max_context=64,
                 **geo_kwargs):
    geo = FlashGeometry(channels=channels, dies_per_channel=2,
                        planes_per_die=2, blocks_per_plane=64,
                        pages_per_block=32, page_size=page_size, **geo_kwargs)
    return KVCacheLayout(geo, d_h=d_h, max_context=max_context)


class TestPlacement:
    def test_consecutive_groups_stride_channels(self):
        lo = small_layout()
        chans = [lo.place_token_group(TokenGroupKey(0, 0, "K", g)).channel
                 for g in range(8)]
        assert chans == list(range(8))

    def test_heads_start_on_distinct_channels(self):
        lo = small_layout()
        chans = {lo.place_token_group(TokenGroupKey(0, h, "K", 0)).channel
                 for h in range(8)}
        assert len(chans) == 8

    def test_single_channel_geometry(self):
        lo = small_layout(channels=1)
        for g in range(5):
            assert lo.place_token_group(
                TokenGroupKey(0, 3, "V", g)).channel == 0

    def test_embedding_stripes_stride_channels(self):
        lo = small_layout()
        chans = {lo.place_embedding_stripe(
            EmbeddingStripeKey(0, 0, 0, s)).channel for s in range(8)}
        assert len(chans) == 8

    def test_channel_balance_for_consecutive_groups(self):
        lo = small_layout()
        counts = np.zeros(8, dtype=int)
        for g in range(37):
            counts[lo.place_token_group(
                TokenGroupKey(1, 5, "K", g)).channel] += 1
        assert counts.max() - counts.min() <= 1

    def test_heads_share_blocks(self):
        # flushes from different heads appended into one channel's open block
        lo = small_layout()
        a = lo.place_token_group(TokenGroupKey(0, 0, "K", 0))  # channel 0
        b = lo.place_token_group(TokenGroupKey(0, 8, "K", 0))  # channel 0 too
        assert (a.die, a.plane, a.block) == (b.die, b.plane, b.block)
        assert b.page == a.page + 1

    def test_capacity_error(self):
        geo = FlashGeometry(channels=1, dies_per_channel=1, planes_per_die=1,
                            blocks_per_plane=1, pages_per_block=2,
                            page_size=64)
        lo = KVCacheLayout(geo, d_h=4, max_context=16)
        lo.place_token_group(TokenGroupKey(0, 0, "K", 0))
        lo.place_token_group(TokenGroupKey(0, 0, "K", 1))
        with pytest.raises(CapacityError):
            lo.place_token_group(TokenGroupKey(0, 0, "K", 2))


class TestAppendAndBuffers:
    def test_flush_exactly_on_full_group(self):
        lo = small_layout()  # tokens_per_group = 64 / (4*2) = 8
        row = np.ones(4)
        events = []
        for i in range(7):
            events += lo.append_token_kv(0, 0, row, row)
        assert events == []
        events = lo.append_token_kv(0, 0, row, row)
        assert {e[0] for e in events} == {"K", "V"}

    def test_single_decode_token_many_heads_buffers_only(self):
        lo = small_layout()
        row = np.zeros(4)
        for head in range(40):
            assert lo.append_token_kv(0, head, row, row) == []
        assert lo.token_stats.pages_programmed == 0

    def test_block_batch_count(self):
        # 8 tokens x H heads -> 2H page flushes, batched into ceil(2H/pages
        # per block) block programs
        lo = small_layout()
        row = np.ones(4)
        heads = 16
        flushes = []
        for tok in range(8):
            for h in range(heads):
                flushes += lo.append_token_kv(0, h, row, row)
        assert len(flushes) == 2 * heads
        pages_per_block = lo.geometry.pages_per_block
        assert -(-len(flushes) // pages_per_block) == \
            -(-2 * heads // pages_per_block)

    def test_row_length_checked(self):
        lo = small_layout()
        with pytest.raises(ConfigError):
            lo.append_token_kv(0, 0, np.ones(3), np.ones(4))


class TestLookups:
    def make_filled(self, tokens=32):
        lo = small_layout()
        rng = np.random.default_rng(1)
        K = rng.standard_normal((tokens, 4))
        V = rng.standard_normal((tokens, 4))
        for i in range(tokens):
            lo.append_token_kv(0, 0, K[i], V[i])
        return lo, K, V

    def test_one_group_one_page(self):
        lo, K, V = self.make_filled()
        pages = lo.lookup_token_pages(0, 0, range(8), "K")
        assert len(pages) == 1

    def test_two_groups_two_channels(self):
        lo, K, V = self.make_filled()
        pages = lo.lookup_token_pages(0, 0, [0, 20], "K")
        assert len(pages) == 2
        assert pages[0].channel != pages[1].channel

    def test_buffered_group_served_from_dram(self):
        lo, K, V = self.make_filled(tokens=28)  # 3 full groups + 4 buffered
        pages = lo.lookup_token_pages(0, 0, [26], "K")
        assert pages == []

    def test_unknown_token_raises(self):
        lo, K, V = self.make_filled()
        with pytest.raises(MappingError):
            lo.lookup_token_pages(0, 0, [99], "K")

    def test_embedding_page_counts(self):
        # stripe_tokens = 64/(2*2) = 16 with g=2; 32 tokens -> 2 stripes
        lo, K, V = self.make_filled()
        assert lo.embedding_group == 2
        pages = lo.lookup_embedding_pages(0, 0, [0], 32)
        assert len(pages) == 2
        pages = lo.lookup_embedding_pages(0, 0, [0, 1], 32)
        assert len(pages) == 2  # same group
        pages = lo.lookup_embedding_pages(0, 0, [0, 2], 32)
        assert len(pages) == 4

    def test_dense_embedding_mask(self):
        lo, K, V = self.make_filled()
        pages = lo.lookup_embedding_pages(0, 0, range(4), 32)
        assert len(pages) == 2 * 2  # all groups x all stripes


class TestRoundTrip:
    @pytest.mark.parametrize("tokens", [8, 24, 61])
    def test_token_rows_roundtrip(self, tokens):
        lo = small_layout()
        rng = np.random.default_rng(tokens)
        K = rng.standard_normal((tokens, 4))
        V = rng.standard_normal((tokens, 4))
        for i in range(tokens):
            lo.append_token_kv(2, 1, K[i], V[i])
        idx = list(range(0, tokens, 3))
        assert np.array_equal(lo.gather_token_rows(2, 1, idx, "K"), K[idx])
        assert np.array_equal(lo.gather_token_rows(2, 1, idx, "V"), V[idx])

    def test_exhaustive_512_tokens_4_heads(self):
        geo = FlashGeometry(channels=4, dies_per_channel=2, planes_per_die=2,
                            blocks_per_plane=64, pages_per_block=32,
                            page_size=64)
        lo = KVCacheLayout(geo, d_h=4, max_context=512)
        rng = np.random.default_rng(99)
        data = {}
        for head in range(4):
            K = rng.standard_normal((512, 4))
            V = rng.standard_normal((512, 4))
            data[head] = (K, V)
            for i in range(512):
                lo.append_token_kv(0, head, K[i], V[i])
        for head in range(4):
            K, V = data[head]
            toks = list(range(512))
            assert np.array_equal(lo.gather_token_rows(0, head, toks, "K"), K)
            assert np.array_equal(lo.gather_token_rows(0, head, toks, "V"), V)
            cols = lo.gather_embedding_columns(0, head, list(range(4)), 512)
            assert np.array_equal(cols, K)


class TestDuplicationAndWA:
    def test_k_stored_twice(self):
        lo = small_layout()
        row = np.ones(4)
        for i in range(32):  # 2 full stripes of 16
            lo.append_token_kv(0, 0, row, row)
        k_logical = 32 * 4 * 2
        # embedding copy holds exactly the K bytes again (2 groups x 2 stripes)
        assert lo.embed_stats.logical_bytes == k_logical
        assert lo.embed_stats.pages_programmed == 4

    def test_grouped_wa_at_block_batched_prefill(self):
        geo = FlashGeometry(channels=8, dies_per_channel=4,
                            blocks_per_plane=256, pages_per_block=256,
                            page_size=4096)
        lo = KVCacheLayout(geo, d_h=128, max_context=4096)
        row = np.ones(128)
        for i in range(4096):
            lo.append_token_kv(0, 0, row, row)
        rep = lo.write_amplification_report()
        assert rep["grouped"].write_amplification <= 1.05
        assert rep["naive"].write_amplification == pytest.approx(16.0)

    def test_zero_writes_reported_as_one(self):
        lo = small_layout()
        rep = lo.write_amplification_report()
        assert rep["grouped"].write_amplification == 1.0

    def test_wa_bound_with_open_buffers(self):
        lo = small_layout()
        row = np.ones(4)
        for i in range(13):  # one full group + 5 buffered
            lo.append_token_kv(0, 0, row, row)
        rep = lo.write_amplification_report()
        grouped = rep["grouped"]
        # physical never exceeds logical + one page per open buffer
        open_pages = 2  # K and V buffers
        bound = 1 + open_pages * lo.geometry.page_size / grouped.logical_bytes
        assert grouped.write_amplification <= bound

    def test_drop_all_counts_erases(self):
        lo = small_layout()
        row = np.ones(4)
        for i in range(16):
            lo.append_token_kv(0, 0, row, row)
        erased = lo.drop_all()
        assert erased >= 1
        assert lo.token_stats.blocks_erased == erased
        assert lo.token_map == {}


class TestSerialization:
    def test_dump_restore_lookup(self):
        lo = small_layout()
        row = np.ones(4)
        for i in range(16):
            lo.append_token_kv(0, 0, row, row)
        text = lo.dump_json()
        restored = KVCacheLayout.load_json(text)
        a = lo.lookup_token_pages(0, 0, [0, 9], "K")
        b = restored.lookup_token_pages(0, 0, [0, 9], "K")
        assert a == b
        assert json.loads(text)["d_h"] == 4

    def test_jsonl_replay(self):
        lo = small_layout()
        lines = []
        for i in range(9):
            lines.append(json.dumps({"op": "append", "layer": 0, "head": 0,
                                     "k_row": [1.0] * 4, "v_row": [2.0] * 4}))
        lines.append(json.dumps({"op": "lookup_tokens", "layer": 0, "head": 0,
                                 "tokens": [0, 3], "tensor": "K"}))
        results = lo.replay_jsonl(lines)
        assert results[7] == 2  # K and V pages flushed on the 8th append
        assert results[-1] == 1

    def test_replay_unknown_op(self):
        lo = small_layout()
        with pytest.raises(ConfigError):
            lo.replay_jsonl([json.dumps({"op": "bogus"})])
