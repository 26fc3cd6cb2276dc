"""``pmusim`` command line: attack, scan, covert, assemble.

Exit status: 0 on success, 1 when a result exceeds ``--max-error`` (or a scan
disagrees with the catalog, or assembly fails), 2 on usage errors.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import __version__
from .attack import AttackConfig, EventUnavailable, Variant, run_attack
from .covert import ChannelConfig, ChannelMode, random_payload, run_channel
from .decoder import NoWorkingMethod
from .isa import AssemblyError, Attack, assemble
from .pmu import CatalogError, UnknownEvent, catalog_load
from .scanner import CellKind, diff_against_catalog, scan
from .uarch import Simulator, SuppressionMode, UarchConfig

SEED_ENV = "PMU_SIM_SEED"

KINDS = {"meltdown": Attack.MELTDOWN, "spectre": Attack.SPECTRE_PHT,
         "zombieload": Attack.ZOMBIELOAD}
KIND_NAMES = {v: k for k, v in KINDS.items()}

# (attack, mode) columns of the results table
TABLE_COLUMNS = [
    (Attack.MELTDOWN, SuppressionMode.TSX_MODEL),
    (Attack.MELTDOWN, SuppressionMode.SIGNAL_MODEL),
    (Attack.ZOMBIELOAD, SuppressionMode.TSX_MODEL),
    (Attack.ZOMBIELOAD, SuppressionMode.SIGNAL_MODEL),
    (Attack.SPECTRE_PHT, SuppressionMode.SIGNAL_MODEL),
]


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value file; flags override it")
    p.add_argument("--catalog", type=Path, help="event catalog (default: built-in i7-7700)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a microarchitecture parameter (repeatable)")
    p.add_argument("--seed", type=int, help=f"RNG seed (fallback: ${SEED_ENV})")
    p.add_argument("--out", type=Path, help="write the report here instead of stdout")
    p.add_argument("--format", choices=["table", "csv", "json"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmusim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("attack", help="recover a secret through one or all events")
    _common(a)
    a.add_argument("--variant", choices=[v.value for v in Variant])
    a.add_argument("--kind", choices=sorted(KINDS))
    a.add_argument("--event", help='name, "0xCODE:0xUMASK", or "all"')
    a.add_argument("--mode", choices=[m.value for m in SuppressionMode])
    a.add_argument("--secret-hex")
    a.add_argument("--secret-len", type=int)
    a.add_argument("--noise", type=float)
    a.add_argument("--repeats", type=int)
    a.add_argument("--max-error", type=float)

    s = sub.add_parser("scan", help="classify every (gadget, event) pair")
    _common(s)

    c = sub.add_parser("covert", help="run the divider covert channel")
    _common(c)
    c.add_argument("--mode", choices=[m.value for m in ChannelMode])
    c.add_argument("--event")
    c.add_argument("--payload-bytes", type=int)
    c.add_argument("--payload-file", type=Path)
    c.add_argument("--bit-period", type=int)
    c.add_argument("--threshold", type=float)
    c.add_argument("--no-any-bit", action="store_const", const=True, default=None,
                   help="leave the ANY bit clear on the receiver slot")
    c.add_argument("--suppression", choices=[m.value for m in SuppressionMode])
    c.add_argument("--noise", type=float)
    c.add_argument("--max-error", type=float)

    asm = sub.add_parser("assemble", help="assemble a gadget and print its listing")
    asm.add_argument("source", nargs="?", type=Path, help="assembly file (default: stdin)")
    asm.add_argument("--out", type=Path)
    return parser


DEFAULTS = {
    "attack": dict(variant="v1", kind="meltdown", event="ARITH.DIVIDER_ACTIVE", mode="tsx",
                   secret_hex=None, secret_len=16, noise=0.0, repeats=None, max_error=0.0,
                   format="table"),
    "scan": dict(format="csv"),
    "covert": dict(mode="same", event="ARITH.DIVIDER_ACTIVE", payload_bytes=1024,
                   payload_file=None, bit_period=2048, threshold=5.0, no_any_bit=False,
                   suppression="tsx", noise=0.0, max_error=0.0, format="table"),
}
_SHARED_KEYS = {"seed", "out", "catalog"}


def read_config(path: Path) -> Dict[str, str]:
    values = {}
    for n, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def resolve(args: argparse.Namespace, environ=os.environ) -> argparse.Namespace:
    """Merge defaults < config file < flags, then fill the seed from the environment."""
    defaults = DEFAULTS[args.command]
    config = read_config(args.config) if args.config else {}
    uarch = {}
    allowed = set(defaults) | _SHARED_KEYS
    for key, val in config.items():
        if key.startswith("uarch."):
            uarch[key[len("uarch."):]] = val
        elif key in allowed:
            if getattr(args, key, None) is None:
                setattr(args, key, _coerce(key, val))
        else:
            raise UsageError(f"unknown config key {key!r}")
    for key, val in defaults.items():
        if getattr(args, key, None) is None:
            setattr(args, key, val)
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        uarch[key.strip()] = val.strip()
    try:
        args.uarch = UarchConfig().with_overrides(**{k: int(v, 0) for k, v in uarch.items()})
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc).strip("'\"")) from None
    if args.seed is None and environ.get(SEED_ENV):
        try:
            args.seed = int(environ[SEED_ENV])
        except ValueError:
            raise UsageError(f"${SEED_ENV} must be an integer") from None
    return args


def _flag(val: str) -> bool:
    return val.lower() in ("1", "true", "yes", "on")


_KEY_TYPES = {
    "seed": lambda v: int(v, 0), "secret_len": int, "repeats": int, "payload_bytes": int,
    "bit_period": lambda v: int(v, 0), "noise": float, "max_error": float,
    "threshold": float, "no_any_bit": _flag,
    "out": Path, "catalog": Path, "payload_file": Path,
}


def _coerce(key, val: str):
    try:
        return _KEY_TYPES.get(key, str)(val)
    except ValueError:
        raise UsageError(f"bad value for {key}: {val!r}") from None


# ---------------------------------------------------------------------------
# output helpers


def _records_csv(records: List[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(records[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(records)
    return buf.getvalue()


def _aligned(header: Sequence[str], rows: List[Sequence[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    fmt = lambda r: "  ".join(str(x).ljust(w) for x, w in zip(r, widths)).rstrip()
    lines = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


def _emit(text: str, out: Optional[Path]) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)


def _col_name(attack, mode) -> str:
    return f"{KIND_NAMES[attack]}/{mode.value}"


def results_table(reports) -> str:
    """One line per event; T (bytes/s) and E (%) per attack/mode, '-' where not run."""
    by_event: Dict[str, dict] = {}
    order = []
    for r in reports:
        if r.event.name not in by_event:
            by_event[r.event.name] = {"umask": f"{r.event.umask:#04x}", "cells": {}}
            order.append(r.event.name)
        by_event[r.event.name]["cells"][(r.attack, r.suppression_mode)] = r
    cols = [c for c in TABLE_COLUMNS if any(c in v["cells"] for v in by_event.values())]
    header = ["event", "umask"]
    for c in cols:
        header += [f"T {_col_name(*c)}", "E"]
    rows = []
    for name in order:
        entry = by_event[name]
        row = [name, entry["umask"]]
        for c in cols:
            rep = entry["cells"].get(c)
            row += ([f"{rep.throughput:.0f}", f"{100 * rep.error_rate:.2f}"]
                    if rep else ["-", "-"])
        rows.append(row)
    return _aligned(header, rows)


# ---------------------------------------------------------------------------
# subcommands


def _catalog(args):
    try:
        return catalog_load(args.catalog)
    except (OSError, CatalogError) as exc:
        raise UsageError(f"cannot load catalog: {exc}") from None


def cmd_attack(args) -> int:
    catalog = _catalog(args)
    variant = Variant(args.variant)
    secret = None
    if args.secret_hex is not None:
        try:
            secret = bytes.fromhex(args.secret_hex)
        except ValueError:
            raise UsageError("--secret-hex must be an even-length hex string") from None
        if not secret:
            raise UsageError("--secret-hex must not be empty")

    if args.event == "all":
        want = lambda ev: ev.is_arithmetic == (variant is Variant.V1)
        plan = [(ev, att, mode) for ev in catalog if want(ev) for att, mode in TABLE_COLUMNS
                if (args.kind is None or att is KINDS[args.kind]) and ev.available(att, mode)]
    else:
        try:
            ev = catalog.resolve(args.event)
        except UnknownEvent as exc:
            raise UsageError(str(exc)) from None
        plan = [(ev, KINDS[args.kind], SuppressionMode(args.mode))]

    reports = []
    for ev, att, mode in plan:
        cfg = AttackConfig(variant=variant, attack=att, event=ev.name, mode=mode,
                           secret=secret, secret_len=args.secret_len, noise=args.noise,
                           repeats=args.repeats, seed=args.seed)
        try:
            reports.append(run_attack(Simulator(args.uarch), cfg, catalog))
        except EventUnavailable as exc:
            print(f"pmusim: {exc}", file=sys.stderr)
            return 1
        except NoWorkingMethod as exc:
            print(f"pmusim: {ev.name}: {exc}", file=sys.stderr)
            return 1

    records = [r.to_record() for r in reports]
    if args.format == "json":
        text = json.dumps(records, indent=2) + "\n"
    elif args.format == "csv":
        text = _records_csv(records)
    else:
        text = results_table(reports)
    _emit(text, args.out)
    worst = max(r.error_rate for r in reports)
    return 1 if worst > args.max_error else 0


def scan_table(matrix) -> str:
    mark = {CellKind.FLAT: ".", CellKind.UNAVAILABLE: "x"}
    header = ["event", "umask"] + [r.label for r in matrix.rows]
    rows = []
    for ev in matrix.events:
        row = [ev.name, f"{ev.umask:#04x}"]
        for r in matrix.rows:
            cell = matrix[(r.label, ev.key)]
            row.append(cell.method.value.upper() if cell.leaks else mark[cell.kind])
        rows.append(row)
    return _aligned(header, rows)


def cmd_scan(args) -> int:
    catalog = _catalog(args)
    matrix = scan(lambda: Simulator(args.uarch), catalog)
    if args.format == "json":
        text = json.dumps(matrix.records(), indent=2) + "\n"
    elif args.format == "table":
        text = scan_table(matrix)
    else:
        text = matrix.to_csv()
    _emit(text, args.out)
    problems = diff_against_catalog(matrix, catalog)
    for d in problems:
        print(f"pmusim: {d}", file=sys.stderr)
    return 1 if problems else 0


def cmd_covert(args) -> int:
    catalog = _catalog(args)
    if args.payload_file is not None:
        payload = args.payload_file.read_bytes()
    else:
        if args.payload_bytes < 1:
            raise UsageError("--payload-bytes must be positive")
        payload = random_payload(args.payload_bytes, args.seed)
    if not payload:
        raise UsageError("payload is empty")
    mode = ChannelMode(args.mode)
    cfg = ChannelConfig(mode=mode, event=args.event, bit_period=args.bit_period,
                        threshold=args.threshold,
                        any_thread=False if args.no_any_bit else None,
                        suppression=args.suppression, noise=args.noise, seed=args.seed)
    try:
        report = run_channel(payload, cfg, Simulator(args.uarch), catalog)
    except UnknownEvent as exc:
        raise UsageError(str(exc)) from None
    rec = report.to_record()
    if args.format == "json":
        text = json.dumps(rec, indent=2) + "\n"
    elif args.format == "csv":
        text = _records_csv([rec])
    else:
        text = _aligned(list(rec), [[str(v) for v in rec.values()]])
    _emit(text, args.out)
    return 1 if report.ber > args.max_error else 0


def cmd_assemble(args) -> int:
    text = args.source.read_text() if args.source else sys.stdin.read()
    try:
        prog = assemble(text)
    except AssemblyError as exc:
        print(f"pmusim: {exc}", file=sys.stderr)
        return 1
    _emit(prog.listing() + "\n", args.out)
    return 0


COMMANDS = {"attack": cmd_attack, "scan": cmd_scan, "covert": cmd_covert,
            "assemble": cmd_assemble}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command != "assemble":
            args = resolve(args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"pmusim: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        parser.print_usage(sys.stderr)
        print(f"pmusim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
