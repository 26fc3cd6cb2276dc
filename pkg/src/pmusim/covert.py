"""Covert channel over a divider-activity counter.

The transmitter sends 1 by dividing by a nonzero value and 0 by dividing by
zero, which never starts the divider.  The receiver resets its counter at
the start of each bit period and thresholds the count at the end.  Both ends
share one simulated core and run in lockstep.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .isa import GadgetProgram, assemble
from .pmu import Catalog, CounterBank, HardwareProfile, PerfEvtSel, builtin_catalog
from .uarch import ExecutionOutcome, Simulator, SuppressionMode

NOMINAL_HZ = 1_000_000_000
RECEIVER_CTX = 0


class ChannelMode(enum.Enum):
    SAME_CONTEXT = "same"
    SMT = "smt"


class ChannelError(Exception):
    pass


class EmptyPayload(ChannelError, ValueError):
    pass


class PeriodOverrun(ChannelError):
    """A symbol took longer than the bit period."""


@dataclass(frozen=True)
class ChannelConfig:
    """``any_thread`` defaults to on exactly when the transmitter is on the sibling context."""

    mode: ChannelMode = ChannelMode.SAME_CONTEXT
    event: str = "ARITH.DIVIDER_ACTIVE"
    bit_period: int = 2048
    threshold: float = 5
    any_thread: Optional[bool] = None
    suppression: SuppressionMode = SuppressionMode.TSX_MODEL
    noise: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", ChannelMode(self.mode))
        object.__setattr__(self, "suppression", SuppressionMode(self.suppression))
        if self.any_thread is None:
            object.__setattr__(self, "any_thread", self.mode is ChannelMode.SMT)
        if self.bit_period <= 0:
            raise ValueError("bit_period must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")

    @property
    def transmitter_ctx(self) -> int:
        return 1 if self.mode is ChannelMode.SMT else RECEIVER_CTX


@dataclass
class ChannelReport:
    sent: bytes
    received: bytes
    deltas: List[float] = field(repr=False)
    bit_period: int
    mode: ChannelMode

    @property
    def total_bits(self) -> int:
        return 8 * len(self.sent)

    @property
    def bit_errors(self) -> int:
        return sum(bin(a ^ b).count("1") for a, b in zip(self.sent, self.received))

    @property
    def ber(self) -> float:
        return self.bit_errors / self.total_bits

    @property
    def simulated_cycles(self) -> int:
        return self.total_bits * self.bit_period

    @property
    def throughput(self) -> float:
        """Payload bytes per simulated second at the nominal clock."""
        return len(self.sent) * NOMINAL_HZ / self.simulated_cycles

    def to_record(self) -> dict:
        return {
            "mode": self.mode.value,
            "bytes": len(self.sent),
            "bit_errors": self.bit_errors,
            "ber": self.ber,
            "bit_period": self.bit_period,
            "simulated_cycles": self.simulated_cycles,
            "throughput": round(self.throughput, 3),
        }


def _transmitter(bit: int) -> GadgetProgram:
    return _PROGRAMS[bit]


_PROGRAMS = {
    bit: assemble(f"mov 5, r0\nmov {bit}, r1\ndiv r1", name=f"tx-{bit}")
    for bit in (0, 1)
}


def transmit_bit(sim: Simulator, bit: int, ctx: int = RECEIVER_CTX,
                 mode: SuppressionMode = SuppressionMode.TSX_MODEL) -> ExecutionOutcome:
    """Send one symbol; the divide-by-zero for 0 is absorbed by ``mode``."""
    if bit not in (0, 1):
        raise ValueError("bit must be 0 or 1")
    return sim.run(_transmitter(bit), ctx=ctx, mode=mode, catch_faults=True)


def bits_msb_first(payload: bytes):
    for byte in payload:
        for i in range(7, -1, -1):
            yield (byte >> i) & 1


def pack_bits(bits) -> bytes:
    bits = list(bits)
    out = bytearray()
    for i in range(0, len(bits), 8):
        byte = 0
        for b in bits[i:i + 8]:
            byte = (byte << 1) | b
        out.append(byte)
    return bytes(out)


def random_payload(n: int, seed: Optional[int] = None) -> bytes:
    return np.random.default_rng(seed).bytes(n)


def run_channel(payload: bytes, cfg: ChannelConfig = ChannelConfig(),
                sim: Optional[Simulator] = None,
                catalog: Optional[Catalog] = None) -> ChannelReport:
    payload = bytes(payload)
    if not payload:
        raise EmptyPayload("nothing to transmit")
    sim = sim or Simulator()
    catalog = catalog or builtin_catalog()
    event = catalog.resolve(cfg.event)
    bank = CounterBank(catalog, HardwareProfile.builtin(), slots=1)
    bank.configure(0, PerfEvtSel.for_event(event, any_thread=cfg.any_thread), ctx=RECEIVER_CTX)
    rng = np.random.default_rng(cfg.seed) if cfg.noise else None

    deltas, bits = [], []
    for bit in bits_msb_first(payload):
        bank.reset(0)
        outcome = transmit_bit(sim, bit, cfg.transmitter_ctx, cfg.suppression)
        if outcome.cycles > cfg.bit_period:
            raise PeriodOverrun(f"symbol took {outcome.cycles} cycles, "
                                f"period is {cfg.bit_period}")
        bank.accumulate(outcome.trace)
        delta = float(bank.read(0))
        if rng is not None:
            delta += rng.normal(0.0, cfg.noise)
        deltas.append(delta)
        bits.append(int(delta > cfg.threshold))
    return ChannelReport(payload, pack_bits(bits), deltas, cfg.bit_period, cfg.mode)
