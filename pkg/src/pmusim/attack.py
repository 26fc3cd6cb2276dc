"""Secret recovery: configure a counter, sweep 256 guesses, decode.

For each secret byte the harness runs the gadget once per guess ``t`` with
the counter reset beforehand and read afterwards, producing a 256-point
:class:`MeasurementTrace`.  A :class:`~pmusim.decoder.SecretDecoder`
calibrated on known bytes turns traces into bytes.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .decoder import DecodeMethod, NoWorkingMethod, SecretDecoder, decode
from .gadgets import (
    ARRAY1,
    DEFAULT_SECRET_ADDR,
    PROBE_STRIDE,
    TARGET,
    build_v1,
    build_v2,
)
from .isa import Attack, GadgetKind, GadgetProgram
from .pmu import Catalog, CounterBank, PerfEvtSel, PmuEventDesc, builtin_catalog
from .uarch import Simulator, SuppressionMode, TransientCause

NOMINAL_HZ = 1_000_000_000
CALIBRATION_BYTES = (0x5A, 0xA5)

GadgetBuilder = Union[GadgetProgram, Callable[[int], GadgetProgram]]


class AttackError(Exception):
    pass


class EventUnavailable(AttackError):
    pass


class Variant(enum.Enum):
    V1 = "v1"
    V2 = "v2"

    @property
    def builder(self):
        return build_v1 if self is Variant.V1 else build_v2


@dataclass(frozen=True)
class MeasurementTrace:
    values: np.ndarray
    event: PmuEventDesc
    repeats: int = 1
    cycles: int = 0

    def __post_init__(self):
        if len(self.values) != 256:
            raise ValueError("a measurement trace has exactly 256 values")

    def __len__(self) -> int:
        return 256

    def __getitem__(self, t):
        return self.values[t]


def _program(builder: GadgetBuilder, secret_addr: Optional[int]) -> GadgetProgram:
    if isinstance(builder, GadgetProgram):
        return builder
    return builder(secret_addr)


def is_privileged(attack: Attack) -> bool:
    """Whether the attack's secret sits on a kernel-tagged page."""
    return attack in (Attack.MELTDOWN, Attack.ZOMBIELOAD)


class GadgetHarness:
    """Per-guess preparation and execution of one gadget on one simulator.

    :meth:`prime` warms every line the gadget reads on its non-leaking path,
    so the only cache miss that can depend on the guess is the probe line
    flushed for ``t``.  The primed cache contents are restored before each
    guess, which makes every run independent of the previous one.
    """

    def __init__(self, sim: Simulator, program: GadgetProgram,
                 mode: SuppressionMode = SuppressionMode.TSX_MODEL):
        self.sim = sim
        self.program = program
        self.mode = SuppressionMode(mode)
        self.cause = TransientCause.for_attack(program.attack)
        self._snap = None

    def prime(self) -> None:
        sim, prog = self.sim, self.program
        warm = [prog.secret_addr]
        if prog.guess_addr is not None:
            warm.append(prog.guess_addr)
        if prog.attack is Attack.SPECTRE_PHT:
            warm.append(ARRAY1)
        if prog.attack is Attack.ZOMBIELOAD:
            # the enclave line is only ever reached through the LFB
            warm.remove(prog.secret_addr)
        if prog.probe_base is not None:
            warm.extend(prog.probe_base + t * PROBE_STRIDE for t in range(256))
        for addr in warm:
            sim.warm(addr)
        self._snap = sim.save_caches()
        self._lfb_line = (sim.caches.line_of(prog.secret_addr), sim.line_bytes(prog.secret_addr))

    def prepare(self, t: int) -> dict:
        """Reset caches and plant guess ``t``; returns the entry registers."""
        sim, prog = self.sim, self.program
        sim.restore_caches(self._snap)
        if prog.kind is GadgetKind.V2_MOV:
            sim.flush(prog.probe_base + t * PROBE_STRIDE)
        if prog.attack is Attack.ZOMBIELOAD:
            sim.flush(TARGET)
            line, data = self._lfb_line
            sim.lfb_stage(data, line)
        if prog.attack is Attack.SPECTRE_PHT:
            sim.train_branch("taken")
        regs = dict(prog.entry_regs)
        if prog.guess_addr is not None:
            sim.plant(prog.guess_addr, t)
        elif prog.guess_reg is not None:
            regs[prog.guess_reg] = t
        return regs

    def run_guess(self, t: int):
        if self._snap is None:
            self.prime()
        regs = self.prepare(t)
        return self.sim.run(self.program, self.cause, mode=self.mode,
                            catch_faults=self.cause is None, regs=regs)


def _sweep(harness: GadgetHarness, banks: Sequence[CounterBank], slot: int = 0):
    """Noiseless readings of every bank for each guess, plus total cycles."""
    out = np.zeros((len(banks), 256), dtype=float)
    cycles = 0
    for t in range(256):
        outcome = harness.run_guess(t)
        cycles += outcome.cycles
        for i, bank in enumerate(banks):
            out[i, t] = bank.count(slot, outcome.trace)
    return out, cycles


def _bank_for(catalog: Catalog, event: PmuEventDesc, bank: Optional[CounterBank] = None,
              slot: int = 0) -> CounterBank:
    bank = bank if bank is not None else CounterBank(catalog)
    bank.configure(slot, PerfEvtSel.for_event(event))
    return bank


def measure_byte(sim: Simulator, bank: Optional[CounterBank], gadget_builder: GadgetBuilder,
                 event, secret_addr: Optional[int] = None, *,
                 mode: SuppressionMode = SuppressionMode.TSX_MODEL, repeats: int = 1,
                 noise: float = 0.0, rng: Optional[np.random.Generator] = None,
                 slot: int = 0, check_available: bool = True) -> MeasurementTrace:
    """Sweep all 256 guesses for the byte at ``secret_addr``.

    Each reading is the counter value after reset + one gadget run, plus
    optional Gaussian read noise; ``repeats`` readings are averaged.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    catalog = bank.catalog if bank is not None else builtin_catalog()
    event = catalog.resolve(event)
    program = _program(gadget_builder, secret_addr)
    mode = SuppressionMode(mode)
    if check_available and not event.available(program.attack, mode):
        raise EventUnavailable(f"{event.name} is not observable for {program.attack.value} "
                               f"under {mode.value}")
    bank = _bank_for(catalog, event, bank, slot)
    harness = GadgetHarness(sim, program, mode)
    if noise and rng is None:
        rng = np.random.default_rng()

    # every run starts from the same restored state, so a repeat would
    # reproduce the same count; simulate once and charge its cycles per repeat
    values = np.zeros(256, dtype=float)
    cycles = 0
    for t in range(256):
        bank.reset(slot)
        outcome = harness.run_guess(t)
        bank.accumulate(outcome.trace)
        cycles += outcome.cycles
        values[t] = bank.read(slot)
    if noise:
        values = values + rng.normal(0.0, noise, size=(repeats, 256)).mean(axis=0)
    return MeasurementTrace(values, event, repeats, cycles * repeats)


def _calibration_traces(sim, gadget_builder, event, secret_addr, mode, catalog, repeats,
                        noise, rng, check_available=True):
    traces, cycles = [], 0
    for known in CALIBRATION_BYTES:
        fork = sim.fork()
        program = _program(gadget_builder, secret_addr)
        fork.plant(program.secret_addr, known, kernel=is_privileged(program.attack))
        tr = measure_byte(fork, CounterBank(catalog), program, event, mode=mode,
                          repeats=repeats, noise=noise, rng=rng,
                          check_available=check_available)
        traces.append(tr)
        cycles += tr.cycles
    return traces, cycles


def calibrate(sim: Simulator, gadget_builder: GadgetBuilder, event,
              secret_addr: Optional[int] = None, *,
              mode: SuppressionMode = SuppressionMode.TSX_MODEL,
              catalog: Optional[Catalog] = None, repeats: int = 1, noise: float = 0.0,
              rng: Optional[np.random.Generator] = None) -> DecodeMethod:
    """Pick the decode method that recovers known planted bytes.

    Runs on a fork of ``sim``, so the real secret is never overwritten.
    """
    decoder, _ = _calibrate(sim, gadget_builder, event, secret_addr, mode,
                            catalog or builtin_catalog(), repeats, noise, rng)
    return decoder.method_


def _calibrate(sim, gadget_builder, event, secret_addr, mode, catalog, repeats, noise, rng):
    traces, cycles = _calibration_traces(sim, gadget_builder, event, secret_addr, mode,
                                         catalog, repeats, noise, rng)
    # under noise one unlucky calibration trace should not veto a leaking event
    decoder = SecretDecoder(min_accuracy=0.5 if noise else 1.0)
    decoder.fit(traces, list(CALIBRATION_BYTES))
    return decoder, cycles


# ---------------------------------------------------------------------------
# End-to-end


@dataclass(frozen=True)
class AttackConfig:
    variant: Variant = Variant.V1
    attack: Attack = Attack.MELTDOWN
    event: str = "ARITH.DIVIDER_ACTIVE"
    mode: SuppressionMode = SuppressionMode.TSX_MODEL
    secret: Optional[bytes] = None
    secret_len: int = 16
    secret_addr: Optional[int] = None
    repeats: Optional[int] = None
    noise: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "attack", Attack(self.attack))
        object.__setattr__(self, "mode", SuppressionMode(self.mode))
        if self.attack is Attack.NONE:
            raise ValueError("an attack needs a transient cause")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.repeats is not None and self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.secret is not None:
            object.__setattr__(self, "secret", bytes(self.secret))
            if not self.secret:
                raise ValueError("secret must not be empty")
        elif self.secret_len < 1:
            raise ValueError("secret_len must be >= 1")

    @property
    def effective_repeats(self) -> int:
        if self.repeats is not None:
            return self.repeats
        return 8 if self.noise else 1

    def resolved_secret(self) -> bytes:
        if self.secret is not None:
            return self.secret
        rng = np.random.default_rng(self.seed)
        return bytes(rng.integers(0, 256, self.secret_len, dtype=np.uint8))


@dataclass
class AttackReport:
    recovered: bytes
    truth: bytes
    event: PmuEventDesc
    method: DecodeMethod
    simulated_cycles: int
    suppression_mode: SuppressionMode
    variant: Variant
    attack: Attack
    traces: list = field(default_factory=list, repr=False)

    @property
    def errors(self) -> int:
        return sum(a != b for a, b in zip(self.recovered, self.truth))

    @property
    def error_rate(self) -> float:
        return self.errors / len(self.truth)

    @property
    def throughput(self) -> float:
        """Bytes per simulated second at the nominal clock."""
        return len(self.truth) * NOMINAL_HZ / self.simulated_cycles

    def to_record(self) -> dict:
        return {
            "variant": self.variant.value,
            "attack": self.attack.value,
            "mode": self.suppression_mode.value,
            "event": self.event.name,
            "code": f"{self.event.event_code:#04x}",
            "umask": f"{self.event.umask:#04x}",
            "method": self.method.name,
            "truth": self.truth.hex(),
            "recovered": self.recovered.hex(),
            "error_rate": self.error_rate,
            "simulated_cycles": self.simulated_cycles,
            "throughput": round(self.throughput, 3),
        }


def run_attack(sim: Simulator, config: AttackConfig,
               catalog: Optional[Catalog] = None) -> AttackReport:
    """Plant a secret, calibrate, then recover it byte by byte."""
    catalog = catalog or builtin_catalog()
    event = catalog.resolve(config.event)
    attack, mode = config.attack, config.mode
    if not event.available(attack, mode):
        raise EventUnavailable(f"{event.name} is not observable for {attack.value} "
                               f"under {mode.value}")
    secret = config.resolved_secret()
    base = config.secret_addr if config.secret_addr is not None else DEFAULT_SECRET_ADDR[attack]
    build = config.variant.builder
    repeats = config.effective_repeats
    rng = np.random.default_rng(config.seed) if config.noise else None

    sim.plant(base, secret, kernel=is_privileged(attack))
    decoder, cycles = _calibrate(sim, lambda a: build(attack, a), event, base, mode,
                                 catalog, repeats, config.noise, rng)
    recovered, traces = bytearray(), []
    for i in range(len(secret)):
        trace = measure_byte(sim, CounterBank(catalog), build(attack, base + i), event,
                             mode=mode, repeats=repeats, noise=config.noise, rng=rng)
        cycles += trace.cycles
        traces.append(trace)
        recovered.append(int(decoder.predict([trace.values])[0]))
    return AttackReport(bytes(recovered), secret, event, decoder.method_, cycles,
                        mode, config.variant, attack, traces)


__all__ = [
    "AttackConfig", "AttackReport", "EventUnavailable", "GadgetHarness", "MeasurementTrace",
    "NOMINAL_HZ", "NoWorkingMethod", "Variant", "calibrate", "decode",
    "measure_byte", "run_attack",
]
