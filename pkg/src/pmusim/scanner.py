"""Exhaustive (gadget x event) leak classification.

Each row is one gadget run under one transient cause and suppression mode;
each column is a catalog event.  A cell LEAKS when some decode method
recovers the planted bytes from that event's readings.  Cells that do not
leak are split into FLAT (the event's signals never depend on the secret)
and UNAVAILABLE (they do, but the core hides the transient part from the
counter).
"""
from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .attack import CALIBRATION_BYTES, GadgetHarness, is_privileged
from .decoder import DecodeMethod, NoWorkingMethod, SecretDecoder
from .gadgets import (
    DEFAULT_SECRET_ADDR,
    Category,
    build_category_probe,
    build_v1,
    build_v2,
)
from .isa import Attack, GadgetKind, GadgetProgram
from .pmu import Catalog, CounterBank, HardwareProfile, PerfEvtSel, PmuEventDesc, builtin_catalog
from .uarch import Simulator, SuppressionMode

M = SuppressionMode


class CellKind(enum.Enum):
    LEAKS = "LEAKS"
    FLAT = "FLAT"
    UNAVAILABLE = "UNAVAILABLE"


@dataclass(frozen=True)
class Cell:
    kind: CellKind
    method: Optional[DecodeMethod] = None

    @property
    def leaks(self) -> bool:
        return self.kind is CellKind.LEAKS

    def __str__(self) -> str:
        if self.kind is CellKind.LEAKS:
            return f"LEAKS({self.method.name})"
        return self.kind.value


@dataclass(frozen=True)
class ScanRow:
    """One gadget configuration of the matrix."""

    label: str
    build: Callable[[int], GadgetProgram]
    attack: Attack = Attack.NONE
    mode: SuppressionMode = M.TSX_MODEL
    kind: GadgetKind = GadgetKind.CATEGORY_PROBE
    category: Optional[Category] = None

    @property
    def secret_addr(self) -> int:
        return DEFAULT_SECRET_ADDR[self.attack]


_ATTACK_ROWS = (
    (Attack.MELTDOWN, M.TSX_MODEL),
    (Attack.MELTDOWN, M.SIGNAL_MODEL),
    (Attack.ZOMBIELOAD, M.TSX_MODEL),
    (Attack.ZOMBIELOAD, M.SIGNAL_MODEL),
    (Attack.SPECTRE_PHT, M.SIGNAL_MODEL),
)


def default_rows() -> List[ScanRow]:
    """The five instruction categories, then v1/v2 under every attack and mode."""
    rows = [ScanRow(cat.name, lambda a, c=cat: build_category_probe(c, secret_addr=a),
                    category=cat)
            for cat in Category]
    for variant, build, kind in (("v1", build_v1, GadgetKind.V1_DIV),
                                 ("v2", build_v2, GadgetKind.V2_MOV)):
        for attack, mode in _ATTACK_ROWS:
            rows.append(ScanRow(f"{variant}/{attack.value}/{mode.value}",
                                lambda a, b=build, at=attack: b(at, a),
                                attack, mode, kind))
    return rows


class ScanMatrix:
    def __init__(self, rows: Sequence[ScanRow], events: Sequence[PmuEventDesc],
                 cells: Dict[Tuple[str, Tuple[int, int]], Cell]):
        self.rows = list(rows)
        self.events = list(events)
        self.cells = dict(cells)

    def __getitem__(self, key) -> Cell:
        label, event = key
        if isinstance(event, PmuEventDesc):
            event = event.key
        return self.cells[(label, event)]

    def row(self, label: str) -> Dict[str, Cell]:
        return {ev.name: self.cells[(label, ev.key)] for ev in self.events}

    def leak_count(self, label: str) -> int:
        return sum(c.leaks for c in self.row(label).values())

    def is_complete(self) -> bool:
        return all((r.label, e.key) in self.cells for r in self.rows for e in self.events)

    def records(self) -> List[dict]:
        out = []
        for r in self.rows:
            for ev in self.events:
                cell = self.cells[(r.label, ev.key)]
                out.append({
                    "row": r.label, "event": ev.name,
                    "code": f"{ev.event_code:#04x}", "umask": f"{ev.umask:#04x}",
                    "cell": cell.kind.value,
                    "method": cell.method.name if cell.method else "",
                })
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row"] + [ev.name for ev in self.events])
        for r in self.rows:
            w.writerow([r.label] + [str(self.cells[(r.label, ev.key)]) for ev in self.events])
        return buf.getvalue()


def _sweep_counts(sim: Simulator, program: GadgetProgram, mode, banks: Sequence[CounterBank]):
    """Readings of every configured slot of every bank: shape (slots total, 256)."""
    harness = GadgetHarness(sim, program, mode)
    slots = [(bank, s) for bank in banks for s in range(len(bank.slots))]
    out = np.zeros((len(slots), 256))
    for t in range(256):
        trace = harness.run_guess(t).trace
        for i, (bank, s) in enumerate(slots):
            out[i, t] = bank.count(s, trace)
    return out


def _banks(catalog, profile, events) -> List[CounterBank]:
    """Enough 4-slot banks to cover ``events`` in order."""
    banks = []
    for lo in range(0, len(events), 4):
        chunk = events[lo:lo + 4]
        bank = CounterBank(catalog, profile, slots=len(chunk))
        for s, ev in enumerate(chunk):
            bank.configure(s, PerfEvtSel.for_event(ev))
        banks.append(bank)
    return banks


def scan_row(sim_factory: Callable[[], Simulator], catalog: Catalog, row: ScanRow,
             profile: Optional[HardwareProfile] = None,
             known: Sequence[int] = CALIBRATION_BYTES) -> Dict[Tuple[int, int], Cell]:
    """Classify every catalog event for one row.

    The core's visibility profile and a permissive one are both read from
    the same runs, so each known byte costs a single 256-guess sweep.
    """
    profile = profile or HardwareProfile.builtin()
    events = list(catalog)
    banks = _banks(catalog, profile, events) + _banks(catalog, HardwareProfile.permissive(), events)
    readings = np.zeros((len(known), 2 * len(events), 256))
    for k, byte in enumerate(known):
        sim = sim_factory()
        program = row.build(row.secret_addr)
        sim.plant(program.secret_addr, byte, kernel=is_privileged(row.attack))
        readings[k] = _sweep_counts(sim, program, row.mode, banks)

    n = len(events)
    return {ev.key: _classify(readings[:, e], readings[:, n + e], known)
            for e, ev in enumerate(events)}


def _classify(gated: np.ndarray, open_: np.ndarray, known) -> Cell:
    try:
        method = SecretDecoder().fit(gated, list(known)).method_
        return Cell(CellKind.LEAKS, method)
    except NoWorkingMethod:
        pass
    try:
        SecretDecoder().fit(open_, list(known))
        return Cell(CellKind.UNAVAILABLE)
    except NoWorkingMethod:
        return Cell(CellKind.FLAT)


def scan(sim_factory: Callable[[], Simulator] = Simulator, catalog: Optional[Catalog] = None,
         rows: Optional[Iterable[ScanRow]] = None,
         profile: Optional[HardwareProfile] = None) -> ScanMatrix:
    """Populate the full matrix; every row starts from a fresh simulator."""
    catalog = catalog or builtin_catalog()
    rows = list(rows) if rows is not None else default_rows()
    cells = {}
    for row in rows:
        for key, cell in scan_row(sim_factory, catalog, row, profile).items():
            cells[(row.label, key)] = cell
    return ScanMatrix(rows, list(catalog), cells)


# ---------------------------------------------------------------------------
# Catalog cross-check


@dataclass(frozen=True)
class Discrepancy:
    row: str
    event: str
    expected_leak: bool
    observed: Cell

    def __str__(self) -> str:
        want = "leak" if self.expected_leak else "no leak"
        return f"{self.row} x {self.event}: catalog implies {want}, scan found {self.observed}"


def expected_leak(row: ScanRow, event: PmuEventDesc) -> bool:
    """What the catalog declares for a cell.

    DIVISION and v1 gadgets leak only through the arithmetic event;
    DATA_MOVING and v2 gadgets only through memory-system events.  Attack
    rows additionally need the event to be available for the attack and mode.
    """
    if row.kind is GadgetKind.CATEGORY_PROBE:
        if row.category is Category.DIVISION:
            return event.is_arithmetic
        if row.category is Category.DATA_MOVING:
            return not event.is_arithmetic
        return False
    family = event.is_arithmetic if row.kind is GadgetKind.V1_DIV else not event.is_arithmetic
    return family and event.available(row.attack, row.mode)


def diff_against_catalog(matrix: ScanMatrix, catalog: Catalog) -> List[Discrepancy]:
    out = []
    for row in matrix.rows:
        for ev in catalog:
            cell = matrix[(row.label, ev.key)]
            want = expected_leak(row, ev)
            if cell.leaks != want:
                out.append(Discrepancy(row.label, ev.name, want, cell))
    return out
