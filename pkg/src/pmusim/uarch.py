"""Cycle-stepped execution engine with caches, LFB, divider and a PHT.

The engine runs a :class:`~pmusim.isa.GadgetProgram` either architecturally
or with a transient cause.  A transient cause opens a window at the first
fault (EXCEPTION, ASSIST) or the first mispredicted JL (MISPREDICTION); up to
``window`` micro-ops then execute, emitting signals, and every architectural
effect since the start of the run is discarded.

Timing is strictly sequential: each instruction starts when the previous one
finishes.  That is enough to give every signal a cycle stamp; it is not meant
to model an out-of-order scheduler.

Several memory-system signals are deterministic stubs attached to an L2 fill
rather than outcomes of a modelled structure: the prefetcher (one request
that hits, one that misses), victim handling (one clean line dropped
silently, one dirty line written back) and a replay of the dependent port-0
and port-4 micro-ops once the missing data returns.
"""
from __future__ import annotations

import enum
from collections import defaultdict, deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Tuple

from .isa import (
    ArchState,
    Attack,
    DivideByZero,
    Fault,
    GadgetProgram,
    Imm,
    Instruction,
    Opcode,
    PermissionViolation,
    branch_taken,
    effective_address,
    retire,
)

# longest built-in gadget, in micro-ops; the transient window must cover it
BUILTIN_GADGET_MAX_LEN = 16


class Signal(enum.Enum):
    DIVIDER_BUSY = "DIVIDER_BUSY"
    L1D_MISS = "L1D_MISS"
    L2_MISS = "L2_MISS"
    L3_MISS = "L3_MISS"
    L2_REF = "L2_REF"
    L3_REF = "L3_REF"
    LFB_PEND = "LFB_PEND"
    OFFCORE_RD = "OFFCORE_RD"
    OFFCORE_PEND = "OFFCORE_PEND"
    PORT0_UOP = "PORT0_UOP"
    PORT4_UOP = "PORT4_UOP"
    EXEC_STALL = "EXEC_STALL"
    RS_EMPTY = "RS_EMPTY"
    L2_LINE_IN = "L2_LINE_IN"
    L2_LINE_OUT_SILENT = "L2_LINE_OUT_SILENT"
    L2_LINE_OUT_NONSILENT = "L2_LINE_OUT_NONSILENT"
    L2_WB = "L2_WB"
    PF_HIT = "PF_HIT"
    PF_MISS = "PF_MISS"
    UOP_EXEC = "UOP_EXEC"


class TransientCause(enum.Enum):
    EXCEPTION = "exception"
    MISPREDICTION = "misprediction"
    ASSIST = "assist"

    @property
    def attack(self) -> Attack:
        return _CAUSE_ATTACK[self]

    @classmethod
    def for_attack(cls, attack: Attack) -> Optional["TransientCause"]:
        for cause, att in _CAUSE_ATTACK.items():
            if att is attack:
                return cause
        return None


_CAUSE_ATTACK = {
    TransientCause.EXCEPTION: Attack.MELTDOWN,
    TransientCause.MISPREDICTION: Attack.SPECTRE_PHT,
    TransientCause.ASSIST: Attack.ZOMBIELOAD,
}


class SuppressionMode(enum.Enum):
    TSX_MODEL = "tsx"
    SIGNAL_MODEL = "signal"


class SimulationError(Exception):
    pass


class UnhandledFault(SimulationError):
    def __init__(self, fault: Fault):
        super().__init__(f"unhandled fault: {fault}")
        self.fault = fault


class Unstaged(SimulationError):
    pass


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class UarchConfig:
    line_size: int = 64
    l1_size: int = 32 * 1024
    l1_ways: int = 8
    l2_size: int = 256 * 1024
    l2_ways: int = 4
    l3_size: int = 8 * 1024 * 1024
    l3_ways: int = 16
    l1_latency: int = 4
    l2_latency: int = 12
    l3_latency: int = 40
    mem_latency: int = 200
    divider_latency: int = 10
    mul_latency: int = 3
    alu_latency: int = 1
    window: int = 64
    lfb_entries: int = 10
    tsx_cost: int = 1000
    signal_cost: int = 8000

    def __post_init__(self):
        lat = (self.l1_latency, self.l2_latency, self.l3_latency, self.mem_latency)
        if not all(a < b for a, b in zip(lat, lat[1:])) or lat[0] <= 0:
            raise ValueError(f"cache latencies must strictly increase by level, got {lat}")
        if self.window < BUILTIN_GADGET_MAX_LEN:
            raise ValueError(f"window must be >= {BUILTIN_GADGET_MAX_LEN} micro-ops")
        if self.line_size & (self.line_size - 1):
            raise ValueError("line_size must be a power of two")
        for level in (1, 2, 3):
            size, ways = getattr(self, f"l{level}_size"), getattr(self, f"l{level}_ways")
            sets = size // (ways * self.line_size)
            if sets <= 0 or sets & (sets - 1) or sets * ways * self.line_size != size:
                raise ValueError(f"L{level} geometry must give a power-of-two set count")
        if self.divider_latency <= 0 or self.lfb_entries <= 0:
            raise ValueError("divider latency and LFB size must be positive")

    def latencies(self) -> Tuple[int, int, int, int]:
        return (self.l1_latency, self.l2_latency, self.l3_latency, self.mem_latency)

    def suppression_cost(self, mode: SuppressionMode) -> int:
        return self.tsx_cost if mode is SuppressionMode.TSX_MODEL else self.signal_cost

    @classmethod
    def from_mapping(cls, values: dict) -> "UarchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise KeyError(f"unknown uarch key(s): {', '.join(sorted(unknown))}")
        return cls(**{k: int(v, 0) if isinstance(v, str) else int(v) for k, v in values.items()})

    def with_overrides(self, **values) -> "UarchConfig":
        merged = asdict(self)
        merged.update(values)
        return type(self).from_mapping(merged)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "UarchConfig":
        values = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ValueError(f"line {n}: expected 'key = value'")
            values[key.strip()] = val.strip()
        return cls.from_mapping(values)

    @classmethod
    def load(cls, path) -> "UarchConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


# ---------------------------------------------------------------------------
# Signal traces


class Span(NamedTuple):
    """``signal`` asserted once per cycle for ``length`` cycles from ``start``."""

    signal: Signal
    ctx: int
    transient: bool
    start: int
    length: int = 1


class SignalTrace:
    """Per-cycle record of signals emitted by one run."""

    def __init__(self, cause: Optional[TransientCause] = None,
                 mode: SuppressionMode = SuppressionMode.TSX_MODEL):
        self.cause = cause
        self.mode = mode
        self.spans: List[Span] = []
        self._by_signal: Dict[Signal, List[Span]] = defaultdict(list)

    @property
    def attack(self) -> Attack:
        return self.cause.attack if self.cause is not None else Attack.NONE

    def emit(self, signal: Signal, ctx: int, transient: bool, start: int, length: int = 1) -> None:
        if length <= 0:
            return
        span = Span(signal, ctx, transient, start, length)
        self.spans.append(span)
        self._by_signal[signal].append(span)

    def __len__(self) -> int:
        return sum(s.length for s in self.spans)

    def _select(self, signal, ctxs, transient):
        for s in self._by_signal.get(signal, ()):
            if ctxs is not None and s.ctx not in ctxs:
                continue
            if transient is not None and s.transient != transient:
                continue
            yield s

    def count(self, signal: Signal, ctxs=None, transient: Optional[bool] = None) -> int:
        return sum(s.length for s in self._select(signal, ctxs, transient))

    def cycles_with(self, signal: Signal, ctxs=None, transient: Optional[bool] = None) -> int:
        intervals = sorted((s.start, s.start + s.length) for s in self._select(signal, ctxs, transient))
        total, cur_start, cur_end = 0, None, None
        for a, b in intervals:
            if cur_end is None or a > cur_end:
                if cur_end is not None:
                    total += cur_end - cur_start
                cur_start, cur_end = a, b
            else:
                cur_end = max(cur_end, b)
        if cur_end is not None:
            total += cur_end - cur_start
        return total

    def multiset(self, transient: Optional[bool] = None) -> Dict[Signal, int]:
        """Signal -> occurrence count, optionally restricted to one side of the window."""
        out: Dict[Signal, int] = {}
        for sig in self._by_signal:
            n = self.count(sig, transient=transient)
            if n:
                out[sig] = n
        return out

    def per_cycle(self) -> Dict[int, List[Tuple[Signal, int]]]:
        """Expanded view: cycle -> list of (signal, ctx)."""
        out: Dict[int, List[Tuple[Signal, int]]] = defaultdict(list)
        for s in self.spans:
            for c in range(s.start, s.start + s.length):
                out[c].append((s.signal, s.ctx))
        return dict(out)

    def __repr__(self) -> str:
        return f"SignalTrace(cause={self.cause}, spans={len(self.spans)}, signals={len(self)})"


@dataclass
class ExecutionOutcome:
    state: ArchState
    trace: SignalTrace
    cycles: int
    squashed: bool = False
    fault: Optional[Fault] = None
    path: Tuple[int, ...] = ()
    window_uops: int = 0


# ---------------------------------------------------------------------------
# Caches


class CacheLevel:
    """Set-associative LRU cache over line numbers.

    The set index XOR-folds the whole line number so that page-strided probe
    arrays spread across sets instead of piling into one.
    """

    def __init__(self, name: str, size: int, ways: int, line_size: int):
        self.name = name
        self.ways = ways
        self.num_sets = size // (ways * line_size)
        self._bits = self.num_sets.bit_length() - 1
        self._mask = self.num_sets - 1
        self.sets: Dict[int, List[int]] = {}
        # set indices changed since the last snapshot/restore
        self.dirty: set = set()

    def index(self, line: int) -> int:
        if self._bits == 0:
            return 0
        idx = 0
        while line:
            idx ^= line & self._mask
            line >>= self._bits
        return idx

    def __contains__(self, line: int) -> bool:
        return line in self.sets.get(self.index(line), ())

    def touch(self, line: int) -> None:
        idx = self.index(line)
        self.dirty.add(idx)
        ways = self.sets[idx]
        ways.remove(line)
        ways.append(line)

    def insert(self, line: int) -> Optional[int]:
        """Insert as MRU; return the evicted LRU line, if any."""
        idx = self.index(line)
        self.dirty.add(idx)
        ways = self.sets.setdefault(idx, [])
        if line in ways:
            ways.remove(line)
            ways.append(line)
            return None
        victim = ways.pop(0) if len(ways) >= self.ways else None
        ways.append(line)
        return victim

    def invalidate(self, line: int) -> bool:
        idx = self.index(line)
        ways = self.sets.get(idx)
        if ways and line in ways:
            self.dirty.add(idx)
            ways.remove(line)
            if not ways:
                del self.sets[idx]
            return True
        return False

    def lines(self) -> set:
        return {ln for ways in self.sets.values() for ln in ways}


class CacheHierarchy:
    """Inclusive three-level hierarchy; level 3 in results means memory."""

    def __init__(self, cfg: UarchConfig):
        self.line_size = cfg.line_size
        self._shift = cfg.line_size.bit_length() - 1
        self.levels = [
            CacheLevel("L1D", cfg.l1_size, cfg.l1_ways, cfg.line_size),
            CacheLevel("L2", cfg.l2_size, cfg.l2_ways, cfg.line_size),
            CacheLevel("L3", cfg.l3_size, cfg.l3_ways, cfg.line_size),
        ]

    def line_of(self, addr: int) -> int:
        return addr >> self._shift

    def probe(self, addr: int) -> int:
        """Level that would serve ``addr`` (0-2), or 3 for memory; no side effects."""
        line = self.line_of(addr)
        for lvl, cache in enumerate(self.levels):
            if line in cache:
                return lvl
        return 3

    def access(self, addr: int) -> int:
        line = self.line_of(addr)
        hit = 3
        for lvl, cache in enumerate(self.levels):
            if line in cache:
                hit = lvl
                break
        if hit < 3:
            self.levels[hit].touch(line)
        # fill outer to inner so inclusion holds after every step
        for lvl in range(min(hit, 3) - 1, -1, -1):
            victim = self.levels[lvl].insert(line)
            if victim is not None:
                for inner in self.levels[:lvl]:
                    inner.invalidate(victim)
        if hit == 3:
            for lvl in (2, 1, 0):
                victim = self.levels[lvl].insert(line)
                if victim is not None:
                    for inner in self.levels[:lvl]:
                        inner.invalidate(victim)
        return hit

    def flush(self, addr: int) -> None:
        line = self.line_of(addr)
        for cache in self.levels:
            cache.invalidate(line)

    def snapshot(self):
        snap = tuple({k: tuple(v) for k, v in c.sets.items()} for c in self.levels)
        for c in self.levels:
            c.dirty.clear()
        self._last = snap
        return snap

    def restore(self, snap) -> None:
        # returning to the snapshot last taken or restored only has to undo
        # the sets touched since then
        incremental = getattr(self, "_last", None) is snap
        for cache, sets in zip(self.levels, snap):
            if incremental:
                for idx in cache.dirty:
                    if idx in sets:
                        cache.sets[idx] = list(sets[idx])
                    else:
                        cache.sets.pop(idx, None)
            else:
                cache.sets = {k: list(v) for k, v in sets.items()}
            cache.dirty.clear()
        self._last = snap


@dataclass
class LfbEntry:
    line: int
    data: bytes
    valid: bool = True


class LineFillBuffer:
    def __init__(self, entries: int = 10):
        self.entries: deque = deque(maxlen=entries)

    def stage(self, data: bytes, line: int) -> None:
        data = bytes(data)
        if len(data) != 64:
            raise ValueError("LFB entries hold exactly 64 bytes")
        self.entries.append(LfbEntry(line, data))

    def newest(self) -> Optional[LfbEntry]:
        for entry in reversed(self.entries):
            if entry.valid:
                return entry
        return None

    def clear(self) -> None:
        self.entries.clear()


# ---------------------------------------------------------------------------
# Engine

_ALU_OPS = frozenset({Opcode.XOR, Opcode.ADD, Opcode.SUB, Opcode.CMP, Opcode.SHL, Opcode.MOV_IMM})


def _is_cheap_factor(f: int) -> bool:
    return f == 0 or f & (f - 1) == 0


@dataclass
class Simulator:
    """One simulated core: architectural state plus microarchitecture.

    Two logical contexts (ids 0 and 1) share the core; a run tags every
    signal it emits with the context it executes on.
    """

    cfg: UarchConfig = field(default_factory=UarchConfig)
    state: ArchState = field(default_factory=ArchState)

    def __post_init__(self):
        self.caches = CacheHierarchy(self.cfg)
        self.lfb = LineFillBuffer(self.cfg.lfb_entries)
        self.predict_taken = False

    # -- harness-facing primitives -------------------------------------

    def flush(self, addr: int) -> None:
        self.caches.flush(addr)

    def warm(self, addr: int) -> None:
        """Bring a line into every level without recording signals."""
        self.caches.access(addr)

    def lfb_stage(self, data: bytes, line: int) -> None:
        self.lfb.stage(data, line)

    def train_branch(self, direction) -> None:
        if isinstance(direction, str):
            direction = {"taken": True, "not-taken": False, "not_taken": False}[direction]
        self.predict_taken = bool(direction)

    def plant(self, addr: int, data, kernel: bool = False) -> None:
        st = self.state.poke(addr, data)
        if kernel:
            n = 1 if isinstance(data, int) else max(len(data), 1)
            for a in range(addr, addr + n):
                st = st.with_kernel_page(a)
        self.state = st

    def line_bytes(self, line_addr: int) -> bytes:
        base = line_addr - line_addr % self.cfg.line_size
        return bytes(self.state.peek(base + i) for i in range(self.cfg.line_size))

    # -- execution -------------------------------------------------------

    def run(self, program: GadgetProgram, cause: Optional[TransientCause] = None, *,
            ctx: int = 0, mode: SuppressionMode = SuppressionMode.TSX_MODEL,
            catch_faults: bool = False, regs: Optional[dict] = None) -> ExecutionOutcome:
        """Execute ``program`` on logical context ``ctx``.

        ``catch_faults`` lets an architectural run end cleanly at a fault (as
        a signal handler would) instead of raising :class:`UnhandledFault`.
        Any suppressed fault adds the ``mode`` overhead to the cycle count.
        """
        if ctx not in (0, 1):
            raise ValueError("logical context must be 0 or 1")
        if cause is TransientCause.ASSIST and self.lfb.newest() is None:
            raise Unstaged("ASSIST run needs a staged LFB entry")
        if regs:
            self.state = self.state.with_regs(regs)
        snapshot = self.state
        st = snapshot
        trace = SignalTrace(cause, mode)
        code = program.code
        cycle = pc = window_uops = overhead = 0
        window = predicted = False
        fault = None
        path = []

        while pc < len(code):
            if window and window_uops >= self.cfg.window:
                break
            instr = code[pc]
            path.append(pc)
            if window:
                window_uops += 1

            if instr.opcode is Opcode.JL:
                trace.emit(Signal.UOP_EXEC, ctx, window, cycle)
                cycle += self.cfg.alu_latency
                actual = branch_taken(st)
                go = actual
                if cause is TransientCause.MISPREDICTION and not predicted and not window:
                    predicted = True
                    if self.predict_taken != actual:
                        window = True
                        go = self.predict_taken
                pc = instr.operands[0].index if go else pc + 1
                continue

            try:
                st, cycle = self._execute(st, instr, ctx, window, cycle, trace, cause)
            except Fault as exc:
                if window:
                    break
                if cause in (TransientCause.EXCEPTION, TransientCause.ASSIST):
                    window = True
                    window_uops += 1
                    fault = exc
                    overhead = self.cfg.suppression_cost(mode)
                    st, cycle = self._forward(st, instr, exc, ctx, cycle, trace, cause)
                    pc += 1
                    continue
                if catch_faults:
                    fault = exc
                    overhead = self.cfg.suppression_cost(mode)
                    break
                raise UnhandledFault(exc) from exc
            pc += 1

        final = snapshot if window else st
        self.state = final
        return ExecutionOutcome(final, trace, cycle + overhead, window, fault,
                                tuple(path), window_uops)

    def _mem_access(self, addr, ctx, transient, cycle, trace) -> Tuple[int, int]:
        """Cache lookup plus its signals; returns (serving level, latency)."""
        cfg = self.cfg
        level = self.caches.access(addr)
        lat = cfg.latencies()[level]
        if level >= 1:
            trace.emit(Signal.L1D_MISS, ctx, transient, cycle)
            trace.emit(Signal.L2_REF, ctx, transient, cycle)
            pend = lat - cfg.l1_latency
            for sig in (Signal.LFB_PEND, Signal.EXEC_STALL, Signal.RS_EMPTY):
                trace.emit(sig, ctx, transient, cycle + 1, pend)
        if level >= 2:
            for sig in (Signal.L2_MISS, Signal.L3_REF, Signal.OFFCORE_RD, Signal.L2_LINE_IN,
                        Signal.PF_HIT, Signal.PF_MISS, Signal.L2_LINE_OUT_SILENT,
                        Signal.L2_LINE_OUT_NONSILENT, Signal.L2_WB):
                trace.emit(sig, ctx, transient, cycle)
            trace.emit(Signal.OFFCORE_PEND, ctx, transient, cycle + 1, lat - cfg.l2_latency)
        if level >= 3:
            trace.emit(Signal.L3_MISS, ctx, transient, cycle)
        if level >= 1:
            done = cycle + lat
            trace.emit(Signal.PORT0_UOP, ctx, transient, done)
            trace.emit(Signal.PORT4_UOP, ctx, transient, done)
            trace.emit(Signal.UOP_EXEC, ctx, transient, done)
            trace.emit(Signal.UOP_EXEC, ctx, transient, done)
        return level, lat

    def _lfb_byte(self, addr: int) -> int:
        entry = self.lfb.newest()
        if entry is None:
            raise Unstaged("no valid LFB entry to forward")
        return entry.data[addr % self.cfg.line_size]

    def _execute(self, st, instr: Instruction, ctx, transient, cycle, trace, cause):
        cfg = self.cfg
        op = instr.opcode
        ops = instr.operands
        if op is Opcode.NOP:
            return st, cycle + cfg.alu_latency
        trace.emit(Signal.UOP_EXEC, ctx, transient, cycle)

        if op in _ALU_OPS:
            trace.emit(Signal.PORT0_UOP, ctx, transient, cycle)
            return retire(st, instr), cycle + cfg.alu_latency
        if op is Opcode.MUL:
            trace.emit(Signal.PORT0_UOP, ctx, transient, cycle)
            factor = ops[0].value if isinstance(ops[0], Imm) else st.regs[ops[0].idx]
            lat = cfg.alu_latency if _is_cheap_factor(factor) else cfg.mul_latency
            return retire(st, instr), cycle + lat
        if op is Opcode.DIV:
            trace.emit(Signal.PORT0_UOP, ctx, transient, cycle)
            if st.regs[ops[0].idx] == 0:
                # the divide unit never starts
                raise DivideByZero("the divisor register is zero")
            trace.emit(Signal.DIVIDER_BUSY, ctx, transient, cycle, cfg.divider_latency)
            return retire(st, instr), cycle + cfg.divider_latency
        if op is Opcode.FLUSH:
            self.caches.flush(effective_address(st, ops[0]))
            return st, cycle + cfg.alu_latency
        if op is Opcode.MOV_STORE:
            trace.emit(Signal.PORT4_UOP, ctx, transient, cycle)
            addr = effective_address(st, ops[1])
            st.check_access(addr)
            _, lat = self._mem_access(addr, ctx, transient, cycle, trace)
            return retire(st, instr), cycle + lat

        # MOV_LOAD / MACCESS
        addr = effective_address(st, ops[0])
        st.check_access(addr)
        level, lat = self._mem_access(addr, ctx, transient, cycle, trace)
        if op is Opcode.MACCESS:
            return st, cycle + lat
        if transient and cause is TransientCause.ASSIST and level >= 1:
            value = self._lfb_byte(addr)
            return st.with_regs({ops[1].idx: value}), cycle + lat
        return retire(st, instr), cycle + lat

    def _forward(self, st, instr, exc, ctx, cycle, trace, cause):
        """Transient result of the instruction whose fault opened the window."""
        if not isinstance(exc, PermissionViolation):
            return st, cycle + self.cfg.alu_latency
        op = instr.opcode
        addr = exc.addr
        if cause is TransientCause.EXCEPTION:
            # the privileged load still fetches its line and forwards real data
            _, lat = self._mem_access(addr, ctx, True, cycle, trace)
            value = st.peek(addr)
        else:
            lat = self.cfg.l1_latency
            value = self._lfb_byte(addr)
        if op is Opcode.MOV_LOAD:
            st = st.with_regs({instr.operands[1].idx: value})
        return st, cycle + lat

    # -- cache snapshots --------------------------------------------------

    def save_caches(self):
        return self.caches.snapshot()

    def restore_caches(self, snap) -> None:
        self.caches.restore(snap)

    def fork(self) -> "Simulator":
        """Independent copy sharing no mutable state."""
        other = Simulator(self.cfg, self.state)
        other.restore_caches(self.save_caches())
        for e in self.lfb.entries:
            other.lfb.entries.append(LfbEntry(e.line, e.data, e.valid))
        other.predict_taken = self.predict_taken
        return other
