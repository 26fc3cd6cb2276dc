import pytest
from hypothesis import given, settings, strategies as st

from oracles import divider_busy_oracle, window_memory_misses
from support import ATTACKS, harness, window_count

from pmusim.gadgets import (
    PROBE_BASE,
    Category,
    build_category_probe,
    build_v1,
    build_v2,
    builtin_gadgets,
)
from pmusim.isa import Attack, GadgetKind, Opcode, assemble
from pmusim.pmu import CounterBank, HardwareProfile, PerfEvtSel, builtin_catalog
from pmusim.uarch import Signal, Simulator


def all_event_counts(program):
    """Every catalog event's count for one architectural run on a fresh core."""
    sim = Simulator()
    for t in range(256):
        sim.warm(PROBE_BASE + t * 4096)
    trace = sim.run(program, catch_faults=True).trace
    bank = CounterBank(profile=HardwareProfile.permissive())
    out = {}
    for ev in builtin_catalog():
        bank.configure(0, PerfEvtSel.for_event(ev))
        out[ev.name] = bank.count(0, trace)
    return out


class TestShapes:
    @pytest.mark.parametrize("attack,n", [(Attack.MELTDOWN, 7), (Attack.SPECTRE_PHT, 9),
                                          (Attack.ZOMBIELOAD, 5)])
    def test_v1_length(self, attack, n):
        prog = build_v1(attack)
        assert len(prog) == n
        assert prog.kind is GadgetKind.V1_DIV
        assert prog.opcodes().count(Opcode.DIV) == 1

    @pytest.mark.parametrize("attack,n", [(Attack.MELTDOWN, 4), (Attack.SPECTRE_PHT, 8),
                                          (Attack.ZOMBIELOAD, 4)])
    def test_v2_length(self, attack, n):
        prog = build_v2(attack)
        assert len(prog) == n
        assert prog.kind is GadgetKind.V2_MOV

    def test_zombieload_starts_with_null_access(self):
        for build in (build_v1, build_v2):
            first = build(Attack.ZOMBIELOAD).code[0]
            assert first.opcode is Opcode.MACCESS
            assert first.operands[0].disp == 0 and first.operands[0].base is None

    def test_builtins_reassemble(self):
        for prog in builtin_gadgets():
            again = assemble(prog.listing())
            assert again.code == prog.code

    def test_accepts_attack_name(self):
        assert build_v1("meltdown").code == build_v1(Attack.MELTDOWN).code

    def test_unknown_attack(self):
        with pytest.raises(ValueError):
            build_v1("rowhammer")


class TestBehaviour:
    @pytest.mark.parametrize("variant", ["v1", "v2"])
    @pytest.mark.parametrize("attack", ATTACKS)
    def test_path_independent_of_guess(self, variant, attack):
        # up to the leaking instruction; a zero divisor may end the window after it
        h = harness(variant, attack, 0x41)
        ops = h.program.opcodes()
        leak = max(i for i, op in enumerate(ops)
                   if op in (Opcode.DIV, Opcode.MOV_LOAD, Opcode.MACCESS))
        paths = {tuple(p for p in h.run_guess(t).path if p <= leak)
                 for t in (0, 0x40, 0x41, 0x42, 0xFF)}
        assert len(paths) == 1 and leak in paths.pop()

    @pytest.mark.parametrize("attack", ATTACKS)
    def test_v1_divider_matches_oracle(self, attack):
        h = harness("v1", attack, 0x41)
        for t in (0, 0x40, 0x41, 0x42, 0xFF):
            got = window_count(h.run_guess(t), Signal.DIVIDER_BUSY)
            assert got == divider_busy_oracle(h.program, 0x41, t)

    @pytest.mark.parametrize("attack", ATTACKS)
    def test_v2_window_misses_match_oracle(self, attack):
        h = harness("v2", attack, 0x41)
        for t in (0, 0x41, 0xFF):
            got = window_count(h.run_guess(t), Signal.L3_MISS)
            assert got == window_memory_misses(attack, 0x41, t)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 255), st.integers(0, 255))
    def test_v1_meltdown_oracle_property(self, secret, t):
        h = harness("v1", Attack.MELTDOWN, secret)
        assert window_count(h.run_guess(t), Signal.DIVIDER_BUSY) == \
            divider_busy_oracle(h.program, secret, t)


class TestCategoryProbes:
    # operand pairs differ in the property that would change a data-dependent
    # unit (8-bit carry/borrow, cheap multiplier factor); no event should notice
    @pytest.mark.parametrize("category,a,b", [
        (Category.ADDITION, (240, 100), (5, 6)),
        (Category.SUBTRACTION, (5, 6), (100, 40)),
        (Category.MULTIPLICATION, (7, 4), (7, 3)),
    ])
    def test_negative_controls_identical(self, category, a, b):
        assert all_event_counts(build_category_probe(category, a)) == \
            all_event_counts(build_category_probe(category, b))

    def test_division_differs_by_divider_latency(self):
        ok = all_event_counts(build_category_probe(Category.DIVISION, (5, 2)))
        zero = all_event_counts(build_category_probe(Category.DIVISION, (5, 0)))
        assert ok["ARITH.DIVIDER_ACTIVE"] - zero["ARITH.DIVIDER_ACTIVE"] == 10

    def test_data_moving_hit_vs_miss(self):
        miss = all_event_counts(build_category_probe(Category.DATA_MOVING, (3, 3)))
        hit = all_event_counts(build_category_probe(Category.DATA_MOVING, (3, 4)))
        assert miss["LONGEST_LAT_CACHE.MISS"] == hit["LONGEST_LAT_CACHE.MISS"] + 1
        assert miss["ARITH.DIVIDER_ACTIVE"] == hit["ARITH.DIVIDER_ACTIVE"]

    def test_category_by_name(self):
        assert build_category_probe("division").opcodes()[-1] is Opcode.DIV
