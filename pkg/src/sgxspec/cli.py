"""Command-line front end: gadget scans, attack simulation, demos, and
countermeasure evaluation.

Exit codes: 0 success, 1 findings where none were expected, 2 usage or
parse error, 3 internal limit hit (exploration cap or retry budget
exhausted).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources

from . import asm, figures, harness, scan, symex
from .config import (CountermeasureConfig, LatencyConfig, apply_overrides,
                     cpu_model, load_config_file)
from .scan import ScanConfig

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_USAGE = 2
EXIT_LIMIT = 3

CONFIG_ENV = "SGXSPEC_CONFIG"


def _corpus_path(name):
    return resources.files("sgxspec") / "corpus" / name


def load_listing(path):
    with open(path, "r", encoding="utf-8") as fh:
        return asm.parse_listing(fh.read())


def _gather_config(args):
    """defaults < config file (flag or env var) < --set flags"""
    kv = {}
    path = args.config or os.environ.get(CONFIG_ENV)
    if path:
        kv.update(load_config_file(path))
    for item in args.set or ():
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        kv[k.strip()] = v.strip()
    return kv


def _write_output(args, text, figure_fn=None):
    """Emit the report; with -o, figures land next to the text file."""
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
        if figure_fn is not None:
            stem, _ = os.path.splitext(args.output)
            figure_fn(stem + ".png")
    else:
        sys.stdout.write(text)


def _sim_configs(kv, args):
    lat = apply_overrides(LatencyConfig(), kv, prefix="latency.")
    cm = apply_overrides(CountermeasureConfig(), kv, prefix="mitigations.")
    for name in getattr(args, "mitigations", None) or ():
        if name == "ibpb-eenter":
            cm = apply_overrides(cm, {"mitigations.ibpb-events": "eenter"},
                                 prefix="mitigations.")
        else:
            cm = apply_overrides(cm, {f"mitigations.{name}": "on"},
                                 prefix="mitigations.")
    cpu = cpu_model(kv.get("cpu", getattr(args, "cpu", None) or "skylake"), kv)
    if getattr(args, "cpu", None):
        cpu = cpu_model(args.cpu, kv)
    return cpu, lat, cm


# ---------------------------------------------------------------------------
# commands

def cmd_scan(args):
    kv = _gather_config(args)
    listing = load_listing(args.listing)
    em = symex.EntryModel.from_mapping(kv)
    cfg = symex.ExplorationConfig.from_mapping(kv)
    modes = [symex.ECALL, symex.ORET] if args.mode == "both" else [args.mode]
    gadgets, capped = [], False
    for mode in modes:
        if em.entry_symbol not in listing.symbols:
            continue
        start = em.ocall_symbol if mode == symex.ORET else None
        if start and start not in listing.symbols:
            continue
        found, summary = scan.scan_type1(listing, em, mode=mode, cfg=cfg,
                                         start=start)
        gadgets.extend(found)
        capped = capped or summary.capped
    fmt = "structured" if args.format == "structured" else "text-table"
    text = scan.emit_report(type1=gadgets, format=fmt,
                            corpus_id=os.path.basename(args.listing))
    _write_output(args, text,
                  lambda p: figures.save_scan_figure(gadgets, (), p))
    if capped:
        return EXIT_LIMIT
    if args.expect_clean and gadgets:
        return EXIT_FINDINGS
    return EXIT_OK


def cmd_scan2(args):
    kv = _gather_config(args)
    listing = load_listing(args.listing)
    cfg = ScanConfig(window=args.window, regC_required=args.require_regC)
    gadgets = scan.scan_type2(listing, cfg)
    fmt = "structured" if args.format == "structured" else "text-table"
    text = scan.emit_report(type2=gadgets, format=fmt,
                            corpus_id=os.path.basename(args.listing))
    _write_output(args, text,
                  lambda p: figures.save_scan_figure((), gadgets, p))
    if args.expect_clean and gadgets:
        return EXIT_FINDINGS
    return EXIT_OK


def _result_text(result, fmt, extra=None):
    if fmt == "structured":
        doc = {
            "recovered": result.recovered,
            "expected": result.expected,
            "attempts": result.attempts,
            "success-rate": result.success_rate,
            "notes": result.notes,
        }
        if extra:
            doc.update(extra)
        return json.dumps(doc, indent=2) + "\n"
    lines = ["byte | recovered | expected | attempts"]
    expected = result.expected or [None] * len(result.recovered)
    for i, (r, e, a) in enumerate(zip(result.recovered, expected,
                                      result.attempts)):
        rs = f"0x{r:02x}" if r is not None else "?"
        es = f"0x{e:02x}" if e is not None else "?"
        lines.append(f"{i} | {rs} | {es} | {a}")
    lines.append(f"success-rate | {result.success_rate:.4f}")
    if result.notes:
        lines.append(f"notes | {result.notes}")
    if extra:
        for k, v in extra.items():
            lines.append(f"{k} | {v}")
    return "\n".join(lines) + "\n"


def cmd_simulate(args):
    kv = _gather_config(args)
    cpu, lat, cm = _sim_configs(kv, args)
    listing = load_listing(args.program)
    scenario = harness.load_scenario(args.scenario)
    overrides = []
    for spec in args.secret or ():
        addr, data = spec.split(":", 1)
        overrides.append((int(addr, 0), bytes.fromhex(data)))
    result = harness.run_scenario(listing, scenario, cpu=cpu, lat=lat, cm=cm,
                                  secret_overrides=overrides)
    text = _result_text(result, args.format)
    _write_output(args, text, lambda p: figures.save_attack_figure(result, p))
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            fh.write("\n".join(result.trace) + "\n")
    if any(b is None for b in result.recovered):
        return EXIT_LIMIT
    return EXIT_OK


def cmd_demo_ssa(args):
    kv = _gather_config(args)
    cpu, lat, cm = _sim_configs(kv, args)
    listing = load_listing(args.program) if args.program else \
        asm.parse_listing(_corpus_path("victim.prog").read_text())
    rng_regs = {}
    if args.seed is not None:
        data = harness.seeded_bytes(args.seed, 8 * 4)
        for i, r in enumerate(("rbx", "r12", "r13", "r14")):
            rng_regs[r] = int.from_bytes(data[i * 8:(i + 1) * 8], "little")
    snapshot, result = harness.read_ssa_registers(listing, cpu, lat, cm,
                                                  victim_regs=rng_regs)
    extra = {f"reg.{k}": f"0x{v:016x}" for k, v in sorted(snapshot.items())}
    text = _result_text(result, args.format, extra=extra)
    _write_output(args, text, lambda p: figures.save_attack_figure(result, p))
    if any(b is None for b in result.recovered):
        return EXIT_LIMIT
    return EXIT_OK


def cmd_demo_key(args):
    kv = _gather_config(args)
    cpu, lat, cm = _sim_configs(kv, args)
    listing = load_listing(args.program) if args.program else \
        asm.parse_listing(_corpus_path("victim.prog").read_text())
    key, recovered, result = harness.steal_key_demo(listing, seed=args.seed,
                                                    cpu=cpu, lat=lat, cm=cm)
    rec_hex = "".join(f"{b:02x}" if b is not None else "??"
                      for b in recovered)
    extra = {"key": key.hex(), "recovered-key": rec_hex,
             "match": str(rec_hex == key.hex()).lower()}
    text = _result_text(result, args.format, extra=extra)
    _write_output(args, text, lambda p: figures.save_attack_figure(result, p))
    if any(b is None for b in result.recovered):
        return EXIT_LIMIT
    return EXIT_OK


def cmd_eval_mitigations(args):
    kv = _gather_config(args)
    lat = apply_overrides(LatencyConfig(), kv, prefix="latency.")
    listing = load_listing(args.program)
    scenario = harness.load_scenario(args.scenario)
    overrides = []
    for spec in args.secret or ():
        addr, data = spec.split(":", 1)
        overrides.append((int(addr, 0), bytes.fromhex(data)))
    rows = harness.countermeasure_matrix(listing, scenario, lat=lat,
                                         secret_overrides=overrides)
    if args.format == "structured":
        text = json.dumps({"matrix": [{"cell": c, "success-rate": r}
                                      for c, r in rows]}, indent=2) + "\n"
    else:
        lines = ["cell | success-rate"]
        lines.extend(f"{c} | {r:.4f}" for c, r in rows)
        text = "\n".join(lines) + "\n"
    _write_output(args, text, lambda p: figures.save_matrix_figure(rows, p))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def _common(p):
    p.add_argument("--config", help="config file (key = value lines); "
                   f"default from ${CONFIG_ENV}")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key")
    p.add_argument("--format", choices=("text", "structured"),
                   default="text")
    p.add_argument("-o", "--output", help="write the report here and render "
                   "a figure alongside it")


def _sim_flags(p):
    p.add_argument("--cpu", choices=("skylake", "pre-skylake"))
    p.add_argument("--mitigations", action="append",
                   choices=("ibrs", "stibp", "retpoline", "ibpb-eenter",
                            "rsb-refill-on-enclave-entry"),
                   help="enable one countermeasure (repeatable)")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="sgxspec",
        description="Speculative-execution gadget scanning and attack "
                    "simulation for enclave binaries.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan", help="find indirect-branch gadgets")
    p.add_argument("listing")
    p.add_argument("--mode", choices=("ecall", "oret", "both"),
                   default="both")
    p.add_argument("--expect-clean", action="store_true")
    _common(p)
    p.set_defaults(fn=cmd_scan)

    p = sub.add_parser("scan2", help="find dependent-load gadgets")
    p.add_argument("listing")
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--require-regC", action="store_true")
    p.add_argument("--expect-clean", action="store_true")
    _common(p)
    p.set_defaults(fn=cmd_scan2)

    p = sub.add_parser("simulate", help="run an attack scenario")
    p.add_argument("program")
    p.add_argument("scenario")
    p.add_argument("--secret", action="append", metavar="ADDR:HEX",
                   help="write secret bytes before the run (repeatable)")
    p.add_argument("--trace", help="write the event trace to this file")
    _sim_flags(p)
    _common(p)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("demo-ssa",
                       help="interrupt the victim and read its saved "
                            "register file")
    p.add_argument("program", nargs="?")
    p.add_argument("--seed", type=int, default=None,
                   help="seed the victim's register values")
    _sim_flags(p)
    _common(p)
    p.set_defaults(fn=cmd_demo_ssa)

    p = sub.add_parser("demo-key",
                       help="extract an unsealed key from the victim stack")
    p.add_argument("program", nargs="?")
    p.add_argument("--seed", type=int, default=0)
    _sim_flags(p)
    _common(p)
    p.set_defaults(fn=cmd_demo_key)

    p = sub.add_parser("eval-mitigations",
                       help="run the countermeasure matrix over a scenario")
    p.add_argument("program")
    p.add_argument("scenario")
    p.add_argument("--secret", action="append", metavar="ADDR:HEX")
    p.add_argument("--matrix", choices=("default",), default="default")
    _common(p)
    p.set_defaults(fn=cmd_eval_mitigations)

    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (asm.ParseError, asm.SymbolError, harness.ScenarioError,
            ValueError, OSError) as exc:
        print(f"sgxspec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
