"""Named experiment grids mirroring the headline figures: throughput vs batch,
decode latency breakdown, device-count scaling, and compression-ratio sweeps."""

from __future__ import annotations

from dataclasses import replace

from .config import ScenarioConfig
from .errors import ConfigError
from .system import HardwareSpec, Sparsity

THROUGHPUT_BATCHES = (4, 8, 16, 32, 64, 128, 256)
BREAKDOWN_BATCHES = (4, 64, 256)
SCALING_CSDS = (1, 2, 4, 8, 12, 16, 20)
COMPRESSION_RATIOS = (1.0, 0.5, 0.25, 0.125)
DEFAULT_RATIO = 0.125

PRESET_NAMES = ("fig-throughput", "fig-breakdown", "fig-scaling",
                "fig-compression")


def _scenario(seed, system, sparsity, batch, csd_count, tag) -> ScenarioConfig:
    return ScenarioConfig(
        scenario_id=tag, seed=seed,
        hardware=HardwareSpec(csd_count=csd_count),
        batch=batch, s_in=1024, s_out=1024,
        system=system, sparsity=sparsity)


def build_preset(name: str, seed: int = 0, csd_count: int | None = None,
                 ratio: float | None = None) -> list[ScenarioConfig]:
    if name not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")
    ratio = DEFAULT_RATIO if ratio is None else ratio
    base_n = 1 if csd_count is None else csd_count
    out: list[ScenarioConfig] = []

    if name == "fig-throughput":
        systems = (
            ("host", Sparsity("dense")),
            ("ssd", Sparsity("dense")),
            ("ssd", Sparsity("sparq", ratio)),
            ("csd", Sparsity("dense")),
            ("csd", Sparsity("sparf", ratio)),
        )
        for batch in THROUGHPUT_BATCHES:
            for system, sp in systems:
                tag = f"throughput/b{batch}/{system}-{sp.kind}"
                out.append(_scenario(seed, system, sp, batch, base_n, tag))
    elif name == "fig-breakdown":
        rows = (
            ("ssd", Sparsity("dense"), 1),
            ("csd", Sparsity("dense"), base_n),
            ("csd", Sparsity("dense"), 2 * base_n),
            ("ssd", Sparsity("sparq", ratio), 1),
            ("csd", Sparsity("sparf", ratio), base_n),
            ("csd", Sparsity("sparf", ratio), 2 * base_n),
        )
        for batch in BREAKDOWN_BATCHES:
            for system, sp, n in rows:
                tag = f"breakdown/b{batch}/{system}-{sp.kind}-{n}csd"
                out.append(_scenario(seed, system, sp, batch, n, tag))
    elif name == "fig-scaling":
        for kind, sp in (("dense", Sparsity("dense")),
                         ("sparf", Sparsity("sparf", ratio))):
            for n in SCALING_CSDS:
                tag = f"scaling/{kind}/{n}csd"
                out.append(_scenario(seed, "csd", sp, 256, n, tag))
    else:  # fig-compression
        for n in (base_n, 2 * base_n):
            for rr in COMPRESSION_RATIOS:
                tag = f"compression/{n}csd/ratio-{rr}"
                out.append(_scenario(seed, "csd", Sparsity("sparf", rr), 256,
                                     n, tag))
    return out
