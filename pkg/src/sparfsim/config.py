"""Scenario files, scenario evaluation and the versioned results CSV."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

from .engine import EngineConfig, FlashLink
from .errors import ConfigError
from .system import (HardwareSpec, ModelSpec, OPT_13B, ScenarioReport,
                     Sparsity, simulate)

MAX_WORKERS_ENV = "SPARFSIM_MAX_WORKERS"

CSV_SCHEMA = ("scenario_id,system,sparsity,ratio,csd_count,batch,s_in,s_out,"
              "seed,prefill_s,decode_token_s,throughput_tps,kv_access_s,"
              "weight_access_s,compute_s,transfer_s,kv_share,weight_share,"
              "compute_share,transfer_share,peak_vram_bytes")
CSV_HEADER_COMMENT = "# sparfsim results, csv schema v1"

MODEL_PRESETS = {"opt-13b": OPT_13B}


@dataclass(frozen=True)
class ScenarioConfig:
    scenario_id: str
    seed: int
    model: ModelSpec = OPT_13B
    hardware: HardwareSpec = HardwareSpec()
    batch: int = 64
    s_in: int = 1024
    s_out: int = 1024
    system: str = "csd"
    sparsity: Sparsity = Sparsity()
    engine: EngineConfig = EngineConfig()
    flash: FlashLink = FlashLink()
    first_step_factor: float = 2.0


def _filtered_kwargs(cls, doc: dict, context: str) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown field(s) {sorted(unknown)} in {context!r}")
    return doc


def _require(doc: dict, name: str, context: str):
    if name not in doc:
        raise ConfigError(f"missing field {name!r} in {context!r}")
    return doc[name]


def scenario_from_dict(doc: dict, scenario_id: str = "scenario") -> ScenarioConfig:
    seed = _require(doc, "seed", scenario_id)
    workload = _require(doc, "workload", scenario_id)
    system_doc = _require(doc, "system", scenario_id)
    kind = _require(system_doc, "kind", f"{scenario_id}.system")
    batch = _require(workload, "batch", f"{scenario_id}.workload")
    s_in = _require(workload, "s_in", f"{scenario_id}.workload")
    s_out = _require(workload, "s_out", f"{scenario_id}.workload")

    model_doc = doc.get("model", "opt-13b")
    if isinstance(model_doc, str):
        if model_doc not in MODEL_PRESETS:
            raise ConfigError(f"unknown model preset {model_doc!r}")
        model = MODEL_PRESETS[model_doc]
    else:
        model = ModelSpec(**_filtered_kwargs(ModelSpec, model_doc, "model"))

    hw_doc = dict(doc.get("hardware", {}))
    if "csd_count" in system_doc:
        hw_doc["csd_count"] = system_doc["csd_count"]
    hardware = HardwareSpec(**_filtered_kwargs(HardwareSpec, hw_doc, "hardware"))

    sparsity = Sparsity(kind=system_doc.get("sparsity", "dense"),
                        ratio=system_doc.get("ratio", 1.0))
    engine = EngineConfig(**_filtered_kwargs(
        EngineConfig, doc.get("engine", {}), "engine"))
    flash = FlashLink(**_filtered_kwargs(
        FlashLink, doc.get("flash", {}), "flash"))
    return ScenarioConfig(
        scenario_id=doc.get("id", scenario_id), seed=int(seed), model=model,
        hardware=hardware, batch=int(batch), s_in=int(s_in),
        s_out=int(s_out), system=kind, sparsity=sparsity, engine=engine,
        flash=flash,
        first_step_factor=doc.get("first_step_factor", 2.0))


def load_scenario(path: str) -> ScenarioConfig:
    with open(path) as fh:
        doc = json.load(fh)
    return scenario_from_dict(doc, scenario_id=os.path.basename(path))


def load_sweep(path: str) -> list[ScenarioConfig]:
    with open(path) as fh:
        doc = json.load(fh)
    scenarios = _require(doc, "scenarios", path)
    return [scenario_from_dict(s, scenario_id=s.get("id", f"scenario-{i}"))
            for i, s in enumerate(scenarios)]


def evaluate(cfg: ScenarioConfig) -> ScenarioReport:
    return simulate(cfg.system, cfg.model, cfg.batch, cfg.s_in, cfg.s_out,
                    cfg.hardware, cfg.sparsity, cfg.engine, cfg.flash,
                    cfg.first_step_factor)


def run_sweep(configs: list[ScenarioConfig]) -> list[tuple[ScenarioConfig, ScenarioReport]]:
    """Evaluate every scenario; output order follows config order regardless
    of completion order. SPARFSIM_MAX_WORKERS caps the fan-out."""
    workers = int(os.environ.get(MAX_WORKERS_ENV, "1") or "1")

    def one(cfg: ScenarioConfig) -> ScenarioReport:
        try:
            return evaluate(cfg)
        except Exception as exc:
            raise type(exc)(f"scenario {cfg.scenario_id!r}: {exc}") from exc

    if workers > 1 and len(configs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(one, configs))
    else:
        reports = [one(c) for c in configs]
    return list(zip(configs, reports))


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def results_csv(rows: list[tuple[ScenarioConfig, ScenarioReport]]) -> str:
    lines = [CSV_HEADER_COMMENT, CSV_SCHEMA]
    for cfg, rep in rows:
        shares = rep.shares()
        record = [
            cfg.scenario_id, rep.system, rep.sparsity, _fmt(rep.ratio),
            rep.csd_count, rep.batch, rep.s_in, rep.s_out, cfg.seed,
            _fmt(rep.prefill_s), _fmt(rep.decode_token_s),
            _fmt(rep.throughput_tps), _fmt(rep.kv_access_s),
            _fmt(rep.weight_access_s), _fmt(rep.compute_s),
            _fmt(rep.transfer_s), _fmt(shares["kv_access"]),
            _fmt(shares["weight_access"]), _fmt(shares["compute"]),
            _fmt(shares["transfer"]), _fmt(rep.peak_vram_bytes),
        ]
        lines.append(",".join(str(v) for v in record))
    return "\n".join(lines) + "\n"
