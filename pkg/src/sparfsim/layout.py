"""KV-cache-oriented FTL: dual logical-to-physical mappings (token-indexed and
embedding-indexed), page/group packing arithmetic, staged group buffers,
block-batched writes, and write-amplification accounting.

The K cache is stored twice -- once per orientation -- trading cheap flash
capacity for random-access efficiency along both axes. KV data is append-only
per request; there is no garbage collection (whole blocks are invalidated and
erased at request end).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Iterable, Sequence

import numpy as np

from .core import SelectionMask, group_expand, TOKEN_AXIS, EMBEDDING_AXIS
from .errors import CapacityError, ConfigError, ConsistencyError, MappingError

TENSOR_K = "K"
TENSOR_V = "V"


@dataclass(frozen=True)
class FlashGeometry:
    channels: int = 8
    dies_per_channel: int = 4
    planes_per_die: int = 2
    blocks_per_plane: int = 256
    pages_per_block: int = 256
    page_size: int = 4096

    def __post_init__(self):
        for name in ("channels", "dies_per_channel", "planes_per_die",
                     "blocks_per_plane", "pages_per_block", "page_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.page_size & (self.page_size - 1):
            raise ConfigError("page_size must be a power of two")

    @property
    def blocks_per_channel(self) -> int:
        return self.dies_per_channel * self.planes_per_die * self.blocks_per_plane

    @property
    def capacity_bytes(self) -> int:
        return (self.channels * self.blocks_per_channel
                * self.pages_per_block * self.page_size)


@dataclass(frozen=True)
class PhysicalPageAddress:
    channel: int
    die: int
    plane: int
    block: int
    page: int

    def check_bounds(self, geo: FlashGeometry) -> "PhysicalPageAddress":
        if not (0 <= self.channel < geo.channels
                and 0 <= self.die < geo.dies_per_channel
                and 0 <= self.plane < geo.planes_per_die
                and 0 <= self.block < geo.blocks_per_plane
                and 0 <= self.page < geo.pages_per_block):
            raise ConfigError(f"address {self} outside geometry bounds")
        return self


@dataclass(frozen=True)
class TokenGroupKey:
    layer: int
    head: int
    tensor: str  # K or V
    group_id: int  # token index // tokens_per_group


@dataclass(frozen=True)
class EmbeddingStripeKey:
    layer: int
    head: int
    embedding_group_id: int  # embedding index // embedding_group
    token_stripe_id: int     # token index // stripe_tokens


@dataclass
class WriteStats:
    logical_bytes: int = 0
    physical_bytes: int = 0
    pages_programmed: int = 0
    blocks_erased: int = 0

    @property
    def write_amplification(self) -> float:
        if self.logical_bytes == 0:
            return 1.0  # convention: no writes, no amplification
        return self.physical_bytes / self.logical_bytes


def group_size_tokens(page_size: int, d_h: int, element_bytes: int = 2) -> int:
    """Tokens per page when a page holds whole K or V rows."""
    row = d_h * element_bytes
    if page_size % row:
        raise ConfigError(
            f"page_size {page_size} not divisible by row size {row}")
    return page_size // row


def embedding_stripe_tokens(page_size: int, g: int, element_bytes: int = 2) -> int:
    """Tokens per page when a page holds ``g`` embeddings of many tokens."""
    if g < 1:
        raise ConfigError("embedding group must be >= 1")
    tokens = page_size // (g * element_bytes)
    if tokens < 1:
        raise ConfigError("embedding group too large for one page")
    return tokens


def default_embedding_group(page_size: int, max_context: int,
                            element_bytes: int = 2) -> int:
    """Deterministic stand-in for the runtime-adjusted embedding group size:
    largest group in [2, 8] whose stripe still spans the model context."""
    if max_context >= 2048:
        return 8
    return min(8, max(2, page_size // (element_bytes * max_context)))


class _ChannelLog:
    """Append-only page allocator for one channel; blocks are consumed in a
    fixed die-round-robin order so consecutive blocks land on distinct dies."""

    def __init__(self, geo: FlashGeometry, channel: int):
        self.geo = geo
        self.channel = channel
        self.block_seq = 0
        self.page = 0

    def _block_address(self, seq: int) -> tuple[int, int, int]:
        geo = self.geo
        die = seq % geo.dies_per_channel
        plane = (seq // geo.dies_per_channel) % geo.planes_per_die
        block = seq // (geo.dies_per_channel * geo.planes_per_die)
        if block >= geo.blocks_per_plane:
            raise CapacityError(
                f"channel {self.channel} out of blocks "
                f"({geo.blocks_per_channel} used)")
        return die, plane, block

    def allocate(self) -> PhysicalPageAddress:
        die, plane, block = self._block_address(self.block_seq)
        addr = PhysicalPageAddress(self.channel, die, plane, block, self.page)
        self.page += 1
        if self.page == self.geo.pages_per_block:
            self.page = 0
            self.block_seq += 1
        return addr


class KVCacheLayout:
    """The FTL for one device: mapping tables, group buffers and write stats.

    Mutations must be externally serialized (single simulated device);
    lookups are read-only.
    """

    def __init__(self, geometry: FlashGeometry, d_h: int,
                 element_bytes: int = 2, max_context: int = 2048,
                 embedding_group: int | None = None):
        self.geometry = geometry
        self.d_h = d_h
        self.element_bytes = element_bytes
        self.max_context = max_context
        self.tokens_per_group = group_size_tokens(
            geometry.page_size, d_h, element_bytes)
        self.embedding_group = (embedding_group if embedding_group is not None
                                else default_embedding_group(
                                    geometry.page_size, max_context,
                                    element_bytes))
        if self.embedding_group > d_h:
            self.embedding_group = d_h
        self.stripe_tokens = embedding_stripe_tokens(
            geometry.page_size, self.embedding_group, element_bytes)

        self._logs = [_ChannelLog(geometry, c) for c in range(geometry.channels)]
        self.token_map: dict[TokenGroupKey, PhysicalPageAddress] = {}
        self.embed_map: dict[EmbeddingStripeKey, PhysicalPageAddress] = {}
        self.page_store: dict[PhysicalPageAddress, np.ndarray] = {}
        # open staging buffers: rows awaiting a full group / stripe
        self._buffers: dict[tuple[int, int, str], list[np.ndarray]] = {}
        self._appended: dict[tuple[int, int], int] = {}  # (layer, head) -> tokens
        self.token_stats = WriteStats()
        self.embed_stats = WriteStats()

    # -- write path -------------------------------------------------------

    def _row_bytes(self) -> int:
        return self.d_h * self.element_bytes

    def place_token_group(self, key: TokenGroupKey) -> PhysicalPageAddress:
        """Allocate the page for one token group: consecutive groups of a head
        stride round-robin across channels, heads offset so they start on
        distinct channels, pages appended to the channel's open block."""
        if key in self.token_map:
            raise ConsistencyError(f"token group {key} already placed")
        channel = (key.head + key.group_id) % self.geometry.channels
        addr = self._logs[channel].allocate()
        self.token_map[key] = addr
        return addr

    def place_embedding_stripe(self, key: EmbeddingStripeKey) -> PhysicalPageAddress:
        if key in self.embed_map:
            raise ConsistencyError(f"embedding stripe {key} already placed")
        channel = ((key.head + key.embedding_group_id + key.token_stripe_id)
                   % self.geometry.channels)
        addr = self._logs[channel].allocate()
        self.embed_map[key] = addr
        return addr

    def append_token_kv(self, layer: int, head: int, k_row: np.ndarray,
                        v_row: np.ndarray) -> list[tuple[str, PhysicalPageAddress]]:
        """Buffer one token's K and V rows; returns the flush events (tensor
        label, page address) emitted when a group or stripe fills.

        Writes are page-sized at flush time and batchable at block granularity
        because groups from different heads share the channel's open block.
        """
        k_row = np.asarray(k_row, dtype=np.float64)
        v_row = np.asarray(v_row, dtype=np.float64)
        if k_row.shape != (self.d_h,) or v_row.shape != (self.d_h,):
            raise ConfigError("rows must have length d_h")
        flushed: list[tuple[str, PhysicalPageAddress]] = []
        token_index = self._appended.get((layer, head), 0)
        self._appended[(layer, head)] = token_index + 1
        self.token_stats.logical_bytes += 2 * self._row_bytes()

        for tensor, row in ((TENSOR_K, k_row), (TENSOR_V, v_row)):
            buf = self._buffers.setdefault((layer, head, tensor), [])
            buf.append(row)
            if len(buf) == self.tokens_per_group:
                flushed.append(self._flush_token_group(layer, head, tensor,
                                                       token_index))
                buf.clear()

        # embedding-oriented duplicate of K, flushed one stripe at a time
        ebuf = self._buffers.setdefault((layer, head, "K-embed"), [])
        ebuf.append(k_row)
        if len(ebuf) == self.stripe_tokens:
            flushed.extend(self._flush_embedding_stripe(layer, head, token_index))
            ebuf.clear()
        return flushed

    def _flush_token_group(self, layer: int, head: int, tensor: str,
                           last_token: int) -> tuple[str, PhysicalPageAddress]:
        group_id = last_token // self.tokens_per_group
        key = TokenGroupKey(layer, head, tensor, group_id)
        addr = self.place_token_group(key)
        rows = self._buffers[(layer, head, tensor)]
        self.page_store[addr] = np.stack(rows)
        self.token_stats.pages_programmed += 1
        self.token_stats.physical_bytes += self.geometry.page_size
        return (tensor, addr)

    def _flush_embedding_stripe(self, layer: int, head: int,
                                last_token: int) -> list[tuple[str, PhysicalPageAddress]]:
        stripe_id = last_token // self.stripe_tokens
        rows = np.stack(self._buffers[(layer, head, "K-embed")])  # stripe x d_h
        events = []
        n_groups = -(-self.d_h // self.embedding_group)
        for eg in range(n_groups):
            key = EmbeddingStripeKey(layer, head, eg, stripe_id)
            addr = self.place_embedding_stripe(key)
            lo = eg * self.embedding_group
            hi = min(lo + self.embedding_group, self.d_h)
            self.page_store[addr] = rows[:, lo:hi].T.copy()  # g x stripe_tokens
            self.embed_stats.pages_programmed += 1
            self.embed_stats.physical_bytes += self.geometry.page_size
            self.embed_stats.logical_bytes += (
                rows.shape[0] * (hi - lo) * self.element_bytes)
            events.append(("K-embed", addr))
        return events

    # -- read path --------------------------------------------------------

    def _written_tokens(self, layer: int, head: int) -> int:
        return self._appended.get((layer, head), 0)

    def lookup_token_pages(self, layer: int, head: int,
                           token_mask: SelectionMask | Iterable[int],
                           tensor: str) -> list[PhysicalPageAddress]:
        """Flash pages backing the selected tokens' rows; groups still open in
        the DRAM buffer are served from there and produce no page."""
        if tensor not in (TENSOR_K, TENSOR_V):
            raise ConfigError(f"unknown tensor {tensor!r}")
        if not isinstance(token_mask, SelectionMask):
            token_mask = SelectionMask(TOKEN_AXIS, tuple(sorted(token_mask)),
                                       self.tokens_per_group)
        written = self._written_tokens(layer, head)
        if token_mask.selected and token_mask.selected[-1] >= written:
            raise MappingError(
                f"token {token_mask.selected[-1]} not yet written "
                f"(layer {layer}, head {head})")
        pages = []
        for gid in group_expand(token_mask, self.tokens_per_group):
            key = TokenGroupKey(layer, head, tensor, gid)
            if key in self.token_map:
                pages.append(self.token_map[key])
            else:
                # open group: all its tokens are buffered in device DRAM
                buffered_from = (written // self.tokens_per_group)
                if gid != buffered_from:
                    raise MappingError(f"group {gid} neither flushed nor open")
        return pages

    def lookup_embedding_pages(self, layer: int, head: int,
                               embedding_mask: SelectionMask | Iterable[int],
                               token_count: int) -> list[PhysicalPageAddress]:
        """Flash pages for the selected embeddings over tokens [0, token_count);
        the open (partial) stripe is served from DRAM."""
        if not isinstance(embedding_mask, SelectionMask):
            embedding_mask = SelectionMask(
                EMBEDDING_AXIS, tuple(sorted(embedding_mask)),
                self.embedding_group)
        written = self._written_tokens(layer, head)
        if token_count > written:
            raise MappingError(
                f"token range {token_count} exceeds written tokens {written}")
        full_stripes = min(token_count, written) // self.stripe_tokens
        need_stripes = -(-token_count // self.stripe_tokens)
        pages = []
        for eg in group_expand(embedding_mask, self.embedding_group):
            for stripe in range(min(full_stripes, need_stripes)):
                key = EmbeddingStripeKey(layer, head, eg, stripe)
                if key not in self.embed_map:
                    raise MappingError(f"stripe {key} missing")
                pages.append(self.embed_map[key])
        return pages

    def gather_token_rows(self, layer: int, head: int, tokens: Sequence[int],
                          tensor: str) -> np.ndarray:
        """Read tokens' rows back through the mapping (flash pages plus the
        open buffer), for round-trip verification."""
        out = []
        written = self._written_tokens(layer, head)
        buf = self._buffers.get((layer, head, tensor), [])
        for tok in tokens:
            if tok >= written:
                raise MappingError(f"token {tok} not written")
            gid = tok // self.tokens_per_group
            key = TokenGroupKey(layer, head, tensor, gid)
            if key in self.token_map:
                page = self.page_store[self.token_map[key]]
                out.append(page[tok - gid * self.tokens_per_group])
            else:
                out.append(buf[tok - (written - len(buf))])
        return np.stack(out)

    def gather_embedding_columns(self, layer: int, head: int,
                                 embeddings: Sequence[int],
                                 token_count: int) -> np.ndarray:
        """Read K columns back through the embedding-indexed copy
        (token_count x len(embeddings))."""
        cols = []
        buf = self._buffers.get((layer, head, "K-embed"), [])
        buffered_from = self._written_tokens(layer, head) - len(buf)
        for emb in embeddings:
            if emb >= self.d_h:
                raise MappingError(f"embedding {emb} out of range")
            eg = emb // self.embedding_group
            local = emb - eg * self.embedding_group
            col = np.empty(token_count)
            for tok in range(token_count):
                stripe = tok // self.stripe_tokens
                key = EmbeddingStripeKey(layer, head, eg, stripe)
                if key in self.embed_map:
                    col[tok] = self.page_store[self.embed_map[key]][
                        local, tok - stripe * self.stripe_tokens]
                else:
                    col[tok] = buf[tok - buffered_from][emb]
            cols.append(col)
        return np.stack(cols, axis=1)

    # -- accounting -------------------------------------------------------

    def write_amplification_report(self) -> dict[str, WriteStats]:
        """WA of the group-buffered block-batched policy versus a naive
        policy that programs one page per row write.

        Scope is the token-indexed store; the embedding-oriented K duplicate
        is capacity duplication by design and is reported separately.
        """
        grouped = WriteStats(
            logical_bytes=self.token_stats.logical_bytes,
            physical_bytes=self.token_stats.physical_bytes,
            pages_programmed=self.token_stats.pages_programmed,
            blocks_erased=self.token_stats.blocks_erased,
        )
        rows_written = self.token_stats.logical_bytes // self._row_bytes()
        naive = WriteStats(
            logical_bytes=self.token_stats.logical_bytes,
            physical_bytes=rows_written * self.geometry.page_size,
            pages_programmed=rows_written,
        )
        return {"grouped": grouped, "naive": naive, "duplicate": self.embed_stats}

    def drop_all(self) -> int:
        """Request teardown: invalidate every written block and count erases."""
        blocks = {(a.channel, a.die, a.plane, a.block)
                  for a in list(self.token_map.values())
                  + list(self.embed_map.values())}
        erased = len(blocks)
        self.token_stats.blocks_erased += erased
        self.token_map.clear()
        self.embed_map.clear()
        self.page_store.clear()
        self._buffers.clear()
        self._appended.clear()
        self._logs = [_ChannelLog(self.geometry, c)
                      for c in range(self.geometry.channels)]
        return erased

    # -- serialization ----------------------------------------------------

    def dump_json(self) -> str:
        def addr(a: PhysicalPageAddress) -> list[int]:
            return [a.channel, a.die, a.plane, a.block, a.page]

        doc = {
            "geometry": asdict(self.geometry),
            "d_h": self.d_h,
            "element_bytes": self.element_bytes,
            "max_context": self.max_context,
            "embedding_group": self.embedding_group,
            "token_map": {
                f"{k.layer}/{k.head}/{k.tensor}/{k.group_id}": addr(v)
                for k, v in sorted(self.token_map.items(),
                                   key=lambda kv: str(kv[0]))},
            "embed_map": {
                f"{k.layer}/{k.head}/{k.embedding_group_id}/{k.token_stripe_id}":
                addr(v)
                for k, v in sorted(self.embed_map.items(),
                                   key=lambda kv: str(kv[0]))},
            "appended": {f"{l}/{h}": c
                         for (l, h), c in sorted(self._appended.items())},
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def load_json(cls, text: str) -> "KVCacheLayout":
        doc = json.loads(text)
        layout = cls(FlashGeometry(**doc["geometry"]), doc["d_h"],
                     doc["element_bytes"], doc["max_context"],
                     doc["embedding_group"])
        for key, a in doc["token_map"].items():
            layer, head, tensor, gid = key.split("/")
            layout.token_map[TokenGroupKey(int(layer), int(head), tensor,
                                           int(gid))] = \
                PhysicalPageAddress(*a)
        for key, a in doc["embed_map"].items():
            layer, head, eg, stripe = key.split("/")
            layout.embed_map[EmbeddingStripeKey(int(layer), int(head), int(eg),
                                                int(stripe))] = \
                PhysicalPageAddress(*a)
        for key, count in doc["appended"].items():
            layer, head = key.split("/")
            layout._appended[(int(layer), int(head))] = count
        return layout

    def replay_jsonl(self, lines: Iterable[str]) -> list[object]:
        """Replay append/lookup commands from JSON lines; returns one result
        per command (flush counts for appends, page counts for lookups)."""
        results: list[object] = []
        for lineno, line in enumerate(lines):
            line = line.strip()
            if not line:
                continue
            cmd = json.loads(line)
            op = cmd.get("op")
            if op == "append":
                flushed = self.append_token_kv(cmd["layer"], cmd["head"],
                                               np.asarray(cmd["k_row"]),
                                               np.asarray(cmd["v_row"]))
                results.append(len(flushed))
            elif op == "lookup_tokens":
                pages = self.lookup_token_pages(cmd["layer"], cmd["head"],
                                                cmd["tokens"], cmd["tensor"])
                results.append(len(pages))
            elif op == "lookup_embeddings":
                pages = self.lookup_embedding_pages(cmd["layer"], cmd["head"],
                                                    cmd["embeddings"],
                                                    cmd["token_count"])
                results.append(len(pages))
            else:
                raise ConfigError(f"line {lineno}: unknown op {op!r}")
        return results
