import pytest
from hypothesis import given, settings, strategies as st

from oracles import divider_busy_oracle, naive_lru_cache_run, window_memory_misses
from support import ATTACKS, harness, planted_sim, window_count

from pmusim.gadgets import PROBE_BASE, PROBE_STRIDE, USER_SECRET, build_v1
from pmusim.isa import ArchState, Attack, assemble, retire
from pmusim.uarch import (
    BUILTIN_GADGET_MAX_LEN,
    CacheHierarchy,
    CacheLevel,
    LineFillBuffer,
    Signal,
    SignalTrace,
    Simulator,
    SuppressionMode,
    TransientCause,
    UarchConfig,
    UnhandledFault,
    Unstaged,
)

CFG = UarchConfig()


# ---------------------------------------------------------------------------
# configuration


class TestConfig:
    def test_defaults(self):
        assert CFG.latencies() == (4, 12, 40, 200)
        assert (CFG.divider_latency, CFG.window, CFG.tsx_cost, CFG.signal_cost) == (10, 64, 1000, 8000)

    def test_latencies_must_increase(self):
        with pytest.raises(ValueError):
            UarchConfig(l2_latency=40, l3_latency=40)

    def test_window_covers_builtin_gadgets(self):
        longest = max(len(g) for g in (build_v1(a) for a in ATTACKS))
        assert longest <= BUILTIN_GADGET_MAX_LEN
        with pytest.raises(ValueError):
            UarchConfig(window=BUILTIN_GADGET_MAX_LEN - 1)

    def test_bad_geometry(self):
        with pytest.raises(ValueError):
            UarchConfig(l1_size=3000)

    def test_text_roundtrip(self, tmp_path):
        cfg = CFG.with_overrides(mem_latency=300, window=32)
        path = tmp_path / "u.cfg"
        cfg.save(path)
        assert UarchConfig.load(path) == cfg

    def test_unknown_key(self):
        with pytest.raises(KeyError):
            UarchConfig.from_text("l1_latency = 4\nturbo = 1\n")

    def test_suppression_cost_ordering(self):
        assert CFG.suppression_cost(SuppressionMode.TSX_MODEL) < CFG.suppression_cost(SuppressionMode.SIGNAL_MODEL)


# ---------------------------------------------------------------------------
# caches


class TestCaches:
    @given(st.lists(st.integers(0, 200), max_size=300))
    def test_lru_matches_reference(self, lines):
        level = CacheLevel("t", 4 * 2 * 64, 2, 64)
        got = []
        for ln in lines:
            hit = ln in level
            level.insert(ln)
            got.append(hit)
        assert got == naive_lru_cache_run(lines, level.num_sets, 2, level.index)

    @settings(max_examples=50)
    @given(st.lists(st.tuples(st.booleans(), st.integers(0, 1 << 16)), max_size=400))
    def test_inclusion(self, ops):
        cfg = UarchConfig(l1_size=1024, l1_ways=2, l2_size=4096, l2_ways=2, l3_size=16384, l3_ways=4)
        h = CacheHierarchy(cfg)
        for is_flush, line in ops:
            addr = line * 64
            h.flush(addr) if is_flush else h.access(addr)
            l1, l2, l3 = (lv.lines() for lv in h.levels)
            assert l1 <= l2 <= l3

    def test_flush_is_idempotent(self):
        h = CacheHierarchy(CFG)
        h.access(0x5000)
        h.flush(0x5000)
        snap = h.snapshot()
        h.flush(0x5000)
        assert h.snapshot() == snap and h.probe(0x5000) == 3

    def test_snapshot_restore(self):
        h = CacheHierarchy(CFG)
        for a in range(0, 64 * 100, 64):
            h.access(a)
        snap = h.snapshot()
        h.flush(0)
        h.access(1 << 30)
        h.restore(snap)
        assert h.snapshot() == snap
        # restoring a snapshot other than the last one is a full restore
        other = CacheHierarchy(CFG).snapshot()
        h.restore(other)
        assert h.snapshot() == other

    def test_primed_probe_area_fits_in_l1(self):
        sim = Simulator()
        for t in range(256):
            sim.warm(PROBE_BASE + t * PROBE_STRIDE)
        sim.warm(USER_SECRET)
        assert all(sim.caches.probe(PROBE_BASE + t * PROBE_STRIDE) == 0 for t in range(256))


def _access_trace(sim, addr):
    prog = assemble(f"mov ({addr:#x}), r1")
    return sim.run(prog).trace


class TestFlushAndSignals:
    def test_flushed_line_misses_everywhere(self):
        sim = Simulator()
        addr = PROBE_BASE + 0x41 * PROBE_STRIDE
        sim.warm(addr)
        sim.flush(addr)
        ms = _access_trace(sim, addr).multiset()
        assert ms[Signal.L1D_MISS] == ms[Signal.L2_MISS] == ms[Signal.L3_MISS] == 1

    def test_other_line_unaffected_by_flush(self):
        sim = Simulator()
        a, b = PROBE_BASE, PROBE_BASE + PROBE_STRIDE
        sim.warm(a)
        sim.warm(b)
        sim.flush(a)
        ms = _access_trace(sim, b).multiset()
        assert not {Signal.L1D_MISS, Signal.L2_MISS, Signal.L3_MISS} & set(ms)

    def test_l2_hit_bundle(self):
        # expected values follow from the latencies: span = l2 - l1 cycles
        sim = Simulator()
        sim.warm(0x7000)
        sim.caches.levels[0].invalidate(sim.caches.line_of(0x7000))
        ms = _access_trace(sim, 0x7000).multiset()
        span = CFG.l2_latency - CFG.l1_latency
        assert ms == {
            Signal.L1D_MISS: 1, Signal.L2_REF: 1, Signal.LFB_PEND: span,
            Signal.EXEC_STALL: span, Signal.RS_EMPTY: span,
            Signal.PORT0_UOP: 1, Signal.PORT4_UOP: 1, Signal.UOP_EXEC: 3,
        }

    def test_memory_bundle_spans(self):
        sim = Simulator()
        tr = _access_trace(sim, 0x7000)
        assert tr.count(Signal.LFB_PEND) == CFG.mem_latency - CFG.l1_latency
        assert tr.count(Signal.OFFCORE_PEND) == CFG.mem_latency - CFG.l2_latency
        for sig in (Signal.L3_REF, Signal.OFFCORE_RD, Signal.L2_LINE_IN, Signal.PF_HIT,
                    Signal.PF_MISS, Signal.L2_WB):
            assert tr.count(sig) == 1


class TestSignalTrace:
    def test_cycles_with_merges_overlaps(self):
        tr = SignalTrace()
        tr.emit(Signal.LFB_PEND, 0, False, 0, 10)
        tr.emit(Signal.LFB_PEND, 0, False, 5, 10)
        tr.emit(Signal.LFB_PEND, 0, False, 30, 2)
        assert tr.count(Signal.LFB_PEND) == 22
        assert tr.cycles_with(Signal.LFB_PEND) == 17

    def test_filters(self):
        tr = SignalTrace()
        tr.emit(Signal.L3_MISS, 0, True, 0)
        tr.emit(Signal.L3_MISS, 1, False, 3)
        assert tr.count(Signal.L3_MISS, ctxs=(1,)) == 1
        assert tr.count(Signal.L3_MISS, transient=True) == 1
        assert tr.per_cycle()[3] == [(Signal.L3_MISS, 1)]


# ---------------------------------------------------------------------------
# execution


class TestRun:
    @pytest.mark.parametrize("t,expected", [(0x41, 0), (0x40, 10)])
    def test_v1_meltdown_divider(self, t, expected):
        h = harness("v1", Attack.MELTDOWN, 0x41)
        out = h.run_guess(t)
        assert out.trace.count(Signal.DIVIDER_BUSY) == expected
        assert expected == divider_busy_oracle(h.program, 0x41, t)

    @pytest.mark.parametrize("attack", ATTACKS)
    def test_v1_matches_hand_stepped_oracle(self, attack):
        secret = 0x9C
        h = harness("v1", attack, secret)
        for t in range(256):
            got = h.run_guess(t).trace.count(Signal.DIVIDER_BUSY)
            assert got == divider_busy_oracle(h.program, secret, t), t

    @pytest.mark.parametrize("attack", ATTACKS)
    def test_v2_window_misses_match_cache_walk(self, attack):
        secret = 0x73
        h = harness("v2", attack, secret)
        for t in range(256):
            out = h.run_guess(t)
            assert window_count(out, Signal.L3_MISS) == window_memory_misses(attack, secret, t)

    @pytest.mark.parametrize("attack", [Attack.MELTDOWN, Attack.SPECTRE_PHT])
    def test_v2_single_miss_at_secret(self, attack):
        out = harness("v2", attack, 0x73).run_guess(0x73)
        assert window_count(out, Signal.L3_MISS) == 1
        assert window_count(out, Signal.L2_LINE_IN) == 1

    def test_architectural_run_is_retire_fold(self):
        prog = assemble("mov 7, r0\nadd 5, r0\nmov 3, r1\nmul r1, r0\nmov r0, 0x2000(r15)")
        sim = Simulator()
        out = sim.run(prog)
        ref = ArchState()
        for i in prog.code:
            ref = retire(ref, i)
        assert out.state == ref and not out.squashed

    def test_unhandled_fault(self):
        with pytest.raises(UnhandledFault):
            Simulator().run(assemble("mov 0, r1\ndiv r1"))

    def test_catch_faults_ends_run(self):
        out = Simulator().run(assemble("mov 0, r1\ndiv r1\nmov 1, r2"), catch_faults=True)
        assert out.fault is not None and out.state.regs[2] == 0

    def test_window_limit(self):
        cfg = UarchConfig(window=16)
        prog = assemble("maccess (0)\n" + "add 1, r0\n" * 40)
        out = Simulator(cfg).run(prog, TransientCause.EXCEPTION)
        assert out.window_uops == 16
        # the faulting access counts as the window's first micro-op
        assert out.path == tuple(range(16))

    def test_nested_fault_ends_window(self):
        prog = assemble("maccess (0)\nadd 1, r0\nmaccess (0)\nadd 1, r0")
        out = Simulator().run(prog, TransientCause.EXCEPTION)
        assert out.path == (0, 1, 2)

    def test_suppression_overhead(self):
        cycles = {}
        for mode in SuppressionMode:
            h = harness("v1", Attack.MELTDOWN, 0x10, mode)
            cycles[mode] = h.run_guess(3).cycles
        diff = cycles[SuppressionMode.SIGNAL_MODEL] - cycles[SuppressionMode.TSX_MODEL]
        assert diff == CFG.signal_cost - CFG.tsx_cost

    def test_misprediction_has_no_overhead(self):
        base = harness("v1", Attack.SPECTRE_PHT, 0x10).run_guess(3)
        assert base.cycles < CFG.tsx_cost

    def test_determinism(self):
        a = [harness("v2", Attack.MELTDOWN, 0x33).run_guess(t).trace.spans for t in (1, 0x33)]
        b = [harness("v2", Attack.MELTDOWN, 0x33).run_guess(t).trace.spans for t in (1, 0x33)]
        assert a == b

    def test_context_tagging(self):
        out = Simulator().run(assemble("mov 5, r0\nmov 1, r1\ndiv r1"), ctx=1)
        assert out.trace.count(Signal.DIVIDER_BUSY, ctxs=(1,)) == 10
        assert out.trace.count(Signal.DIVIDER_BUSY, ctxs=(0,)) == 0
        with pytest.raises(ValueError):
            Simulator().run(assemble("nop"), ctx=2)


class TestLfb:
    def test_unstaged(self):
        with pytest.raises(Unstaged):
            Simulator().run(build_v1(Attack.ZOMBIELOAD), TransientCause.ASSIST)

    def test_newest_wins(self):
        sim = Simulator()
        sim.lfb_stage(bytes([0x11]) * 64, 1)
        sim.lfb_stage(bytes([0x22]) * 64, 2)
        assert sim.lfb.newest().data[0] == 0x22
        # the forwarded value is squashed, so observe it through the divider
        probe = assemble("maccess (0)\nmov (0x30000), r1\nsub 0x22, r1\nmov 9, r0\ndiv r1")
        sim.flush(0x30000)
        out = sim.run(probe, TransientCause.ASSIST)
        assert out.trace.count(Signal.DIVIDER_BUSY) == 0

    def test_entry_size(self):
        with pytest.raises(ValueError):
            LineFillBuffer().stage(b"short", 0)

    def test_staged_secret_suppresses_divider(self):
        h = harness("v1", Attack.ZOMBIELOAD, 0x5A)
        counts = [h.run_guess(t).trace.count(Signal.DIVIDER_BUSY) for t in range(256)]
        assert counts == [0 if t == 0x5A else 10 for t in range(256)]


class TestBranchTraining:
    def _spectre(self, x_in_bounds):
        sim = planted_sim(Attack.SPECTRE_PHT, 0x42)
        prog = build_v1(Attack.SPECTRE_PHT)
        regs = dict(prog.entry_regs)
        regs[prog.guess_reg] = 1
        if x_in_bounds:
            regs[9] = 3
        return sim, prog, regs

    def test_trained_taken_opens_window(self):
        sim, prog, regs = self._spectre(False)
        sim.train_branch("taken")
        out = sim.run(prog, TransientCause.MISPREDICTION, regs=regs)
        assert out.squashed and out.trace.count(Signal.DIVIDER_BUSY, transient=True) == 10

    def test_trained_not_taken_no_window(self):
        sim, prog, regs = self._spectre(False)
        sim.train_branch("not-taken")
        out = sim.run(prog, TransientCause.MISPREDICTION, regs=regs)
        assert not out.squashed and out.trace.multiset(transient=True) == {}

    def test_in_bounds_runs_architecturally(self):
        sim, prog, regs = self._spectre(True)
        sim.train_branch(True)
        out = sim.run(prog, TransientCause.MISPREDICTION, regs=regs)
        assert not out.squashed and out.trace.count(Signal.DIVIDER_BUSY, transient=False) == 10


# ---------------------------------------------------------------------------
# properties


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(["v1", "v2"]), st.sampled_from(ATTACKS), st.integers(0, 255),
       st.integers(0, 255))
def test_squash_restores_snapshot(variant, attack, secret, t):
    h = harness(variant, attack, secret)
    h.prime()
    regs = h.prepare(t)
    before = h.sim.state.with_regs(regs)
    out = h.sim.run(h.program, h.cause, mode=h.mode, regs=regs)
    assert out.squashed
    assert out.state == before == h.sim.state
    # signal persistence
    if out.window_uops:
        assert out.trace.multiset(transient=True)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=8))
def test_divider_count_is_ten_per_nonzero_div(divisors):
    text = "mov 100, r0\n" + "".join(f"mov {d}, r1\ndiv r1\nmov 100, r0\n" for d in divisors)
    out = Simulator().run(assemble(text), catch_faults=True)
    executed = 0
    for d in divisors:
        if d == 0:
            break
        executed += 1
    assert out.trace.count(Signal.DIVIDER_BUSY) == 10 * executed
