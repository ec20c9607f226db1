"""Command line surface: scenario runs, sweeps, presets with figures, the
verification suite and the synthetic accuracy harness."""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .accuracy import accuracy_csv, run_accuracy
from .config import (ScenarioConfig, evaluate, load_scenario, load_sweep,
                     results_csv, run_sweep)
from .errors import ConfigError, InfeasibleError
from .presets import PRESET_NAMES, build_preset
from .system import HardwareSpec, Sparsity
from .verify import run_verify

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3


def _summary(cfg: ScenarioConfig, rep) -> str:
    shares = rep.shares()
    lines = [
        f"scenario {cfg.scenario_id}: {rep.label} b={rep.batch} "
        f"s_in={rep.s_in} s_out={rep.s_out} devices={rep.csd_count}",
        f"  prefill            {rep.prefill_s:10.3f} s",
        f"  decode per token   {rep.decode_token_s:10.4f} s",
        f"  throughput         {rep.throughput_tps:10.2f} tokens/s",
        f"  peak VRAM          {rep.peak_vram_bytes / 2**30:10.2f} GiB",
        "  decode share: " + ", ".join(
            f"{k} {v:.1%}" for k, v in shares.items()),
    ]
    return "\n".join(lines)


def _apply_overrides(cfg: ScenarioConfig, args) -> ScenarioConfig:
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "csd_count", None) is not None:
        cfg = replace(cfg, hardware=replace(cfg.hardware,
                                            csd_count=args.csd_count))
    if getattr(args, "ratio", None) is not None:
        cfg = replace(cfg, sparsity=replace(cfg.sparsity, ratio=args.ratio))
    return cfg


def _stage_csv(cfg: ScenarioConfig) -> str:
    from .engine import (HeadWork, MODE_DENSE, MODE_SPARSE, stage_latencies)
    from .layout import default_embedding_group, group_size_tokens
    from .system import _mid_decode_length

    d_h = cfg.model.d_h
    eb = cfg.model.element_bytes
    s_mid = int(round(_mid_decode_length(cfg.s_in, cfg.s_out))) \
        if cfg.s_out else cfg.s_in
    work = HeadWork(
        d_h=d_h, s_len=max(s_mid, 1), r=cfg.sparsity.r(d_h),
        k=cfg.sparsity.k(max(s_mid, 1)),
        token_group=group_size_tokens(cfg.flash.page_size, d_h, eb),
        embedding_group=min(d_h, default_embedding_group(
            cfg.flash.page_size, max(cfg.model.max_context,
                                     cfg.s_in + cfg.s_out), eb)),
        page_size=cfg.flash.page_size, element_bytes=eb,
        first_step_factor=cfg.first_step_factor,
        mode=MODE_DENSE if cfg.sparsity.kind == "dense" else MODE_SPARSE)
    br = stage_latencies(cfg.engine, work, cfg.flash)
    lines = ["# sparfsim per-head stage breakdown, csv schema v1",
             "stage,duration_us,bytes"]
    for label, us, nbytes in br.rows():
        lines.append(f"{label},{us!r},{nbytes}")
    lines.append(f"total,{br.total_us!r},{sum(b for _, _, b in br.rows())}")
    return "\n".join(lines) + "\n"


def _cmd_run(args) -> int:
    cfg = _apply_overrides(load_scenario(args.config), args)
    rep = evaluate(cfg)
    text = results_csv([(cfg, rep)])
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    if args.stages:
        if cfg.system != "csd":
            raise ConfigError("--stages applies to the in-storage system only")
        with open(args.stages, "w") as fh:
            fh.write(_stage_csv(cfg))
    print(_summary(cfg, rep))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    configs = [_apply_overrides(c, args) for c in load_sweep(args.config)]
    rows = run_sweep(configs)
    with open(args.out, "w") as fh:
        fh.write(results_csv(rows))
    print(f"wrote {len(rows)} scenario rows to {args.out}")
    return EXIT_OK


def _cmd_preset(args) -> int:
    configs = build_preset(args.name, seed=args.seed,
                           csd_count=args.csd_count, ratio=args.ratio)
    rows = run_sweep(configs)
    os.makedirs(args.out_dir, exist_ok=True)
    csv_path = os.path.join(args.out_dir, f"{args.name}.csv")
    with open(csv_path, "w") as fh:
        fh.write(results_csv(rows))
    print(f"wrote {len(rows)} rows to {csv_path}")
    if not args.no_plot:
        from .plots import render_preset
        png_path = os.path.join(args.out_dir, f"{args.name}.png")
        render_preset(args.name, rows, png_path)
        print(f"rendered {png_path}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    results = run_verify(mutate=args.mutate)
    failed = 0
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(f"[{status}] {res.name}: {res.detail}")
        failed += 0 if res.passed else 1
    if failed:
        print(f"{failed} check(s) failed")
        return EXIT_FAIL
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def _cmd_accuracy(args) -> int:
    ratios = tuple(float(x) for x in args.ratios.split(","))
    rows = run_accuracy(args.seed, args.d_h, args.seq_len, args.heads, ratios)
    text = accuracy_csv(rows)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {len(rows)} rows to {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparfsim",
        description="Flash-aware sparse attention and its storage-system "
                    "cost model")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="evaluate one scenario config")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--out", default=None, help="results CSV path")
    run_p.add_argument("--stages", default=None,
                       help="per-head engine stage breakdown CSV path")
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--csd-count", type=int, default=None)
    run_p.add_argument("--ratio", type=float, default=None)
    run_p.set_defaults(func=_cmd_run)

    sweep_p = sub.add_parser("sweep", help="evaluate a list of scenarios")
    sweep_p.add_argument("--config", required=True)
    sweep_p.add_argument("--out", required=True)
    sweep_p.add_argument("--seed", type=int, default=None)
    sweep_p.add_argument("--csd-count", type=int, default=None)
    sweep_p.add_argument("--ratio", type=float, default=None)
    sweep_p.set_defaults(func=_cmd_sweep)

    preset_p = sub.add_parser("preset", help="run a named figure grid")
    preset_p.add_argument("name", choices=PRESET_NAMES)
    preset_p.add_argument("--out-dir", default=".")
    preset_p.add_argument("--seed", type=int, default=0)
    preset_p.add_argument("--csd-count", type=int, default=None)
    preset_p.add_argument("--ratio", type=float, default=None)
    preset_p.add_argument("--no-plot", action="store_true")
    preset_p.set_defaults(func=_cmd_preset)

    verify_p = sub.add_parser("verify", help="run the verification suite")
    verify_p.add_argument("--mutate", default=None,
                          help="fault-injection hook (e.g. 'temperature')")
    verify_p.set_defaults(func=_cmd_verify)

    acc_p = sub.add_parser("accuracy", help="synthetic accuracy harness")
    acc_p.add_argument("--seed", type=int, default=0)
    acc_p.add_argument("--d-h", dest="d_h", type=int, default=64)
    acc_p.add_argument("--seq-len", type=int, default=256)
    acc_p.add_argument("--heads", type=int, default=32)
    acc_p.add_argument("--ratios", default="1,0.5,0.25,0.125")
    acc_p.add_argument("--out", default=None)
    acc_p.set_defaults(func=_cmd_accuracy)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
