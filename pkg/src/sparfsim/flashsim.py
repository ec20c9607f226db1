"""Deterministic discrete-event timing model of the flash backend.

Per-channel buses serialize transfers; per-die array operations serialize
reads/programs on that die. Commands are served FIFO in issue order (no
reordering), with die-level pipelining: while one die's page transfers over
the channel, other dies on the channel run their array operations.
Command overhead is a fixed issue-to-die latency and does not occupy the bus.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence

from .errors import ConfigError, ConsistencyError
from .layout import FlashGeometry, PhysicalPageAddress

READ = "read"
PROGRAM = "program"


@dataclass(frozen=True)
class FlashTiming:
    t_read_us: float = 50.0
    t_program_us: float = 600.0
    t_erase_us: float = 3000.0
    channel_bandwidth: float = 1.4e9  # bytes/s
    command_overhead_us: float = 5.0

    def __post_init__(self):
        for name in ("t_read_us", "t_program_us", "t_erase_us",
                     "channel_bandwidth", "command_overhead_us"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.channel_bandwidth <= 0:
            raise ConfigError("channel_bandwidth must be positive")

    def transfer_us(self, page_size: int) -> float:
        return page_size / self.channel_bandwidth * 1e6


@dataclass(frozen=True)
class CommandEvent:
    kind: str
    address: PhysicalPageAddress
    issue_us: float
    die_start_us: float
    transfer_start_us: float
    complete_us: float


@dataclass
class EventTimeline:
    page_size: int
    events: list[CommandEvent] = field(default_factory=list)
    channel_busy: dict[int, list[tuple[float, float]]] = field(default_factory=dict)
    die_busy: dict[tuple[int, int], list[tuple[float, float]]] = field(default_factory=dict)

    @property
    def makespan_us(self) -> float:
        if not self.events:
            return 0.0
        start = min(e.issue_us for e in self.events)
        end = max(e.complete_us for e in self.events)
        return end - start

    @property
    def total_bytes(self) -> int:
        return len(self.events) * self.page_size

    def channel_busy_us(self, channel: int) -> float:
        return sum(b - a for a, b in self.channel_busy.get(channel, []))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("command,kind,channel,die,start_us,end_us\n")
        for i, e in enumerate(self.events):
            buf.write(f"{i},{e.kind},{e.address.channel},{e.address.die},"
                      f"{e.issue_us!r},{e.complete_us!r}\n")
        return buf.getvalue()


def _check_addresses(pages: Sequence[PhysicalPageAddress], geo: FlashGeometry):
    for addr in pages:
        addr.check_bounds(geo)


def schedule_reads(pages: Sequence[PhysicalPageAddress], geo: FlashGeometry,
                   timing: FlashTiming, issue_us: float = 0.0) -> EventTimeline:
    """Schedule page reads in issue order.

    Each read occupies its die for t_read, then its channel for the page
    transfer; the die frees at array-read end (cache register), so back-to-back
    reads pipeline both across and within dies.
    """
    _check_addresses(pages, geo)
    tl = EventTimeline(page_size=geo.page_size)
    die_free: dict[tuple[int, int], float] = {}
    chan_free: dict[int, float] = {}
    xfer = timing.transfer_us(geo.page_size)
    for addr in pages:
        dkey = (addr.channel, addr.die)
        die_start = max(issue_us + timing.command_overhead_us,
                        die_free.get(dkey, 0.0))
        die_end = die_start + timing.t_read_us
        transfer_start = max(die_end, chan_free.get(addr.channel, 0.0))
        complete = transfer_start + xfer
        die_free[dkey] = die_end
        chan_free[addr.channel] = complete
        tl.events.append(CommandEvent(READ, addr, issue_us, die_start,
                                      transfer_start, complete))
        tl.die_busy.setdefault(dkey, []).append((die_start, die_end))
        tl.channel_busy.setdefault(addr.channel, []).append((transfer_start,
                                                             complete))
    return tl


def schedule_programs(pages: Sequence[PhysicalPageAddress], geo: FlashGeometry,
                      timing: FlashTiming, issue_us: float = 0.0) -> EventTimeline:
    """Schedule page programs in issue order: channel transfer first, then the
    die stays busy for t_program. Reprogramming a page within one batch
    violates the append-only log."""
    _check_addresses(pages, geo)
    if len(set(pages)) != len(pages):
        raise ConsistencyError("duplicate page program in one batch "
                               "(append-only log)")
    tl = EventTimeline(page_size=geo.page_size)
    die_free: dict[tuple[int, int], float] = {}
    chan_free: dict[int, float] = {}
    xfer = timing.transfer_us(geo.page_size)
    for addr in pages:
        dkey = (addr.channel, addr.die)
        transfer_start = max(issue_us + timing.command_overhead_us,
                             chan_free.get(addr.channel, 0.0))
        transfer_end = transfer_start + xfer
        die_start = max(transfer_end, die_free.get(dkey, 0.0))
        complete = die_start + timing.t_program_us
        chan_free[addr.channel] = transfer_end
        die_free[dkey] = complete
        tl.events.append(CommandEvent(PROGRAM, addr, issue_us, die_start,
                                      transfer_start, complete))
        tl.channel_busy.setdefault(addr.channel, []).append((transfer_start,
                                                             transfer_end))
        tl.die_busy.setdefault(dkey, []).append((die_start, complete))
    return tl


def measure_bandwidth(timeline: EventTimeline) -> float:
    """Total bytes moved divided by the makespan, in bytes/s."""
    if not timeline.events:
        raise ConfigError("cannot measure bandwidth of an empty timeline")
    return timeline.total_bytes / (timeline.makespan_us * 1e-6)


def balanced_read_addresses(geo: FlashGeometry, count: int,
                            channels: int | None = None) -> list[PhysicalPageAddress]:
    """A stream of ``count`` page addresses striped round-robin across
    channels and dies (the layout's placement discipline for one head's
    consecutive groups), for bandwidth measurements."""
    channels = geo.channels if channels is None else channels
    pages = []
    for i in range(count):
        ch = i % channels
        per_ch = i // channels
        die = per_ch % geo.dies_per_channel
        seq = per_ch // geo.dies_per_channel
        plane = seq % geo.planes_per_die
        rest = seq // geo.planes_per_die
        block = rest // geo.pages_per_block
        page = rest % geo.pages_per_block
        pages.append(PhysicalPageAddress(ch, die, plane, block, page)
                     .check_bounds(geo))
    return pages
