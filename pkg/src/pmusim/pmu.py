"""Performance monitoring unit: event catalog, event selects and counters.

Counters tally signals from every run, architectural or transient.  Whether
the signals of a *transient* window reach a given counter is decided by a
:class:`HardwareProfile`, the core's own per-event visibility table.  The
catalog a user loads only *declares* availability; the scanner checks those
declarations against what the profile lets through.
"""
from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Tuple, Union

from .isa import Attack
from .uarch import Signal, SignalTrace, SuppressionMode

COUNTER_BITS = 48
COUNTER_MASK = (1 << COUNTER_BITS) - 1
NUM_SLOTS = 4
CATALOG_SIZE = 40

ARITH_SIGNALS = frozenset({Signal.DIVIDER_BUSY})
MEMORY_SIGNALS = frozenset(Signal) - ARITH_SIGNALS


class PmuError(Exception):
    pass


class CatalogError(PmuError):
    pass


class DuplicateEvent(CatalogError):
    pass


class UnknownSignal(CatalogError):
    pass


class UnknownEvent(PmuError):
    pass


class UnconfiguredSlot(PmuError):
    pass


# ---------------------------------------------------------------------------
# Signal expressions

_TERM_RE = re.compile(r"^(COUNT|CYCLES_WITH)\(\s*([A-Z0-9_]+)\s*\)$")


@dataclass(frozen=True)
class SignalExpr:
    """Sum of ``COUNT(sig)`` / ``CYCLES_WITH(sig)`` terms."""

    terms: Tuple[Tuple[str, Signal], ...] = ()

    @classmethod
    def parse(cls, text: str) -> "SignalExpr":
        text = text.strip()
        if text in ("", "0"):
            return cls(())
        terms = []
        for part in text.split("+"):
            m = _TERM_RE.match(part.strip())
            if not m:
                raise CatalogError(f"malformed expression term {part.strip()!r}")
            kind, name = m.groups()
            try:
                terms.append((kind, Signal[name]))
            except KeyError:
                raise UnknownSignal(f"unknown signal {name!r}") from None
        return cls(tuple(terms))

    @property
    def signals(self) -> FrozenSet[Signal]:
        return frozenset(sig for _, sig in self.terms)

    def evaluate(self, trace: SignalTrace, ctxs: Iterable[int] = (0, 1),
                 include_transient: bool = True) -> int:
        # each context is evaluated on its own and summed, so cycle terms
        # never merge cycles across contexts
        transient = None if include_transient else False
        total = 0
        for ctx in ctxs:
            only = (ctx,)
            for kind, sig in self.terms:
                if kind == "COUNT":
                    total += trace.count(sig, only, transient)
                else:
                    total += trace.cycles_with(sig, only, transient)
        return total

    def __str__(self) -> str:
        return " + ".join(f"{k}({s.name})" for k, s in self.terms) or "0"


# ---------------------------------------------------------------------------
# Catalog

Availability = FrozenSet[Tuple[Attack, SuppressionMode]]

_ATTACK_TOKENS = {"meltdown": Attack.MELTDOWN, "zombieload": Attack.ZOMBIELOAD,
                  "spectre": Attack.SPECTRE_PHT}
_MODE_TOKENS = {"tsx": SuppressionMode.TSX_MODEL, "signal": SuppressionMode.SIGNAL_MODEL}


def parse_availability(text: str) -> Availability:
    text = text.strip()
    if text in ("", "-"):
        return frozenset()
    out = set()
    for tok in text.split():
        attack, _, mode = tok.partition(":")
        try:
            out.add((_ATTACK_TOKENS[attack.lower()], _MODE_TOKENS[mode.lower()]))
        except KeyError:
            raise CatalogError(f"bad availability token {tok!r}") from None
    return frozenset(out)


def format_availability(avail: Availability) -> str:
    if not avail:
        return "-"
    att = {v: k for k, v in _ATTACK_TOKENS.items()}
    mod = {v: k for k, v in _MODE_TOKENS.items()}
    order = [(a, m) for a in _ATTACK_TOKENS.values() for m in _MODE_TOKENS.values()]
    return " ".join(f"{att[a]}:{mod[m]}" for a, m in order if (a, m) in avail)


@dataclass(frozen=True)
class PmuEventDesc:
    name: str
    event_code: int
    umask: int
    signal_expr: SignalExpr = SignalExpr()
    availability: Availability = frozenset()

    @property
    def key(self) -> Tuple[int, int]:
        return (self.event_code, self.umask)

    @property
    def is_arithmetic(self) -> bool:
        return self.name.startswith("ARITH.")

    def available(self, attack: Attack, mode: SuppressionMode) -> bool:
        if attack is Attack.NONE:
            return True
        return (attack, mode) in self.availability

    def __str__(self) -> str:
        return f"{self.name} ({self.event_code:#04x}/{self.umask:#04x})"


class Catalog:
    """Ordered, validated collection of event descriptors."""

    def __init__(self, events: Iterable[PmuEventDesc]):
        self.events: Tuple[PmuEventDesc, ...] = tuple(events)
        self._by_key: Dict[Tuple[int, int], PmuEventDesc] = {}
        self._by_name: Dict[str, PmuEventDesc] = {}
        for ev in self.events:
            if ev.key in self._by_key:
                raise DuplicateEvent(f"duplicate event {ev.event_code:#x}/{ev.umask:#x}")
            if ev.name in self._by_name:
                raise DuplicateEvent(f"duplicate event name {ev.name}")
            self._by_key[ev.key] = ev
            self._by_name[ev.name] = ev

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[PmuEventDesc]:
        return iter(self.events)

    def __contains__(self, key) -> bool:
        return key in self._by_key

    def get(self, code: int, umask: int) -> PmuEventDesc:
        try:
            return self._by_key[(code, umask)]
        except KeyError:
            raise UnknownEvent(f"no event {code:#x}/{umask:#x} in catalog") from None

    def resolve(self, ref: Union[str, Tuple[int, int], PmuEventDesc]) -> PmuEventDesc:
        """Look up by ``"0x14:0x01"``, name, key tuple or descriptor."""
        if isinstance(ref, PmuEventDesc):
            return self.get(*ref.key)
        if isinstance(ref, tuple):
            return self.get(*ref)
        if ref in self._by_name:
            return self._by_name[ref]
        code, sep, umask = ref.partition(":")
        if sep:
            try:
                return self.get(int(code, 0), int(umask, 0))
            except ValueError:
                pass
        raise UnknownEvent(f"unknown event {ref!r}")

    def replace_event(self, key: Tuple[int, int], **changes) -> "Catalog":
        return Catalog(replace(ev, **changes) if ev.key == key else ev for ev in self.events)

    def with_availability(self, key, attack: Attack, mode: SuppressionMode,
                          available: bool) -> "Catalog":
        ev = self.get(*key)
        pair = (attack, mode)
        avail = ev.availability | {pair} if available else ev.availability - {pair}
        return self.replace_event(key, availability=frozenset(avail))

    def to_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "code", "umask", "expr", "availability"])
        for ev in self.events:
            w.writerow([ev.name, f"{ev.event_code:#04x}", f"{ev.umask:#04x}",
                        str(ev.signal_expr), format_availability(ev.availability)])
        return buf.getvalue()


def parse_catalog(text: str, expected_size: Optional[int] = CATALOG_SIZE) -> Catalog:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    reader = csv.DictReader(lines)
    need = {"name", "code", "umask", "expr", "availability"}
    if reader.fieldnames is None or not need <= set(reader.fieldnames):
        raise CatalogError(f"catalog header must contain {sorted(need)}")
    events = []
    for n, row in enumerate(reader, start=1):
        try:
            code, umask = int(row["code"], 0), int(row["umask"], 0)
        except (TypeError, ValueError):
            raise CatalogError(f"record {n}: bad code/umask") from None
        if not (0 <= code <= 0xFF and 0 <= umask <= 0xFF):
            raise CatalogError(f"record {n}: code/umask must be bytes")
        events.append(PmuEventDesc(
            name=row["name"].strip(),
            event_code=code,
            umask=umask,
            signal_expr=SignalExpr.parse(row["expr"]),
            availability=parse_availability(row["availability"]),
        ))
    cat = Catalog(events)
    if expected_size is not None and len(cat) != expected_size:
        raise CatalogError(f"catalog has {len(cat)} events, expected {expected_size}")
    return cat


def catalog_load(path=None, expected_size: Optional[int] = CATALOG_SIZE) -> Catalog:
    """Load a catalog file, or the built-in i7-7700 profile when ``path`` is None."""
    if path is None:
        return builtin_catalog()
    return parse_catalog(Path(path).read_text(), expected_size)


def builtin_catalog_text() -> str:
    return resources.files("pmusim").joinpath("data/i7_7700.catalog").read_text()


@lru_cache(maxsize=None)
def builtin_catalog() -> Catalog:
    return parse_catalog(builtin_catalog_text())


# ---------------------------------------------------------------------------
# Hardware visibility


class HardwareProfile:
    """Which events observe transient-window signals, per attack and mode."""

    def __init__(self, table: Dict[Tuple[int, int], Availability], permissive: bool = False):
        self._table = dict(table)
        self._permissive = permissive

    @classmethod
    def from_catalog(cls, catalog: Catalog) -> "HardwareProfile":
        return cls({ev.key: ev.availability for ev in catalog})

    @classmethod
    def builtin(cls) -> "HardwareProfile":
        return _builtin_profile()

    @classmethod
    def permissive(cls) -> "HardwareProfile":
        """Profile that lets every transient signal through (signal-level view)."""
        return cls({}, permissive=True)

    def visible(self, key: Tuple[int, int], attack: Attack, mode: SuppressionMode) -> bool:
        if self._permissive or attack is Attack.NONE:
            return True
        return (attack, mode) in self._table.get(key, frozenset())


@lru_cache(maxsize=None)
def _builtin_profile() -> HardwareProfile:
    return HardwareProfile.from_catalog(builtin_catalog())


# ---------------------------------------------------------------------------
# Counters


@dataclass(frozen=True)
class PerfEvtSel:
    event_code: int
    umask: int
    enabled: bool = True
    any_thread: bool = False

    @classmethod
    def for_event(cls, event: PmuEventDesc, enabled: bool = True,
                  any_thread: bool = False) -> "PerfEvtSel":
        return cls(event.event_code, event.umask, enabled, any_thread)

    @property
    def key(self) -> Tuple[int, int]:
        return (self.event_code, self.umask)


@dataclass
class CounterSlot:
    sel: Optional[PerfEvtSel] = None
    value: int = 0
    ctx: int = 0


class CounterBank:
    """Four programmable 48-bit counters shared by both logical contexts."""

    def __init__(self, catalog: Optional[Catalog] = None,
                 profile: Optional[HardwareProfile] = None, slots: int = NUM_SLOTS):
        self.catalog = catalog if catalog is not None else builtin_catalog()
        self.profile = profile if profile is not None else HardwareProfile.builtin()
        self.slots: List[CounterSlot] = [CounterSlot() for _ in range(slots)]

    def _slot(self, slot: int) -> CounterSlot:
        if not 0 <= slot < len(self.slots):
            raise IndexError(f"slot {slot} out of range 0..{len(self.slots) - 1}")
        return self.slots[slot]

    def configure(self, slot: int, sel: PerfEvtSel, ctx: int = 0) -> None:
        s = self._slot(slot)
        self.catalog.get(*sel.key)
        s.sel = sel
        s.ctx = ctx

    def reset(self, slot: Optional[int] = None) -> None:
        targets = self.slots if slot is None else [self._slot(slot)]
        for s in targets:
            s.value = 0

    def count(self, slot: int, trace: SignalTrace) -> int:
        """Increment ``slot`` would receive from ``trace`` (no state change)."""
        s = self._slot(slot)
        if s.sel is None or not s.sel.enabled:
            return 0
        event = self.catalog.get(*s.sel.key)
        ctxs = (0, 1) if s.sel.any_thread else (s.ctx,)
        visible = self.profile.visible(event.key, trace.attack, trace.mode)
        return event.signal_expr.evaluate(trace, ctxs, include_transient=visible)

    def accumulate(self, trace: SignalTrace) -> None:
        for i, s in enumerate(self.slots):
            if s.sel is not None and s.sel.enabled:
                s.value = (s.value + self.count(i, trace)) & COUNTER_MASK

    def read(self, slot: int) -> int:
        s = self._slot(slot)
        if s.sel is None:
            raise UnconfiguredSlot(f"slot {slot} has no event selected")
        return s.value
