"""Shared setup for tests that run attack gadgets directly."""
from pmusim.attack import GadgetHarness, is_privileged
from pmusim.gadgets import build_v1, build_v2, DEFAULT_SECRET_ADDR
from pmusim.isa import Attack
from pmusim.uarch import Signal, Simulator, SuppressionMode

ATTACKS = (Attack.MELTDOWN, Attack.SPECTRE_PHT, Attack.ZOMBIELOAD)
DEFAULT_MODE = {
    Attack.MELTDOWN: SuppressionMode.TSX_MODEL,
    Attack.ZOMBIELOAD: SuppressionMode.TSX_MODEL,
    Attack.SPECTRE_PHT: SuppressionMode.SIGNAL_MODEL,
}


def planted_sim(attack, secret, addr=None, cfg=None):
    sim = Simulator(cfg) if cfg is not None else Simulator()
    addr = DEFAULT_SECRET_ADDR[attack] if addr is None else addr
    sim.plant(addr, secret, kernel=is_privileged(attack))
    return sim


def harness(variant, attack, secret, mode=None):
    build = build_v1 if variant == "v1" else build_v2
    sim = planted_sim(attack, secret)
    return GadgetHarness(sim, build(attack), mode or DEFAULT_MODE[attack])


def window_count(outcome, signal):
    return outcome.trace.count(signal, transient=True)


__all__ = ["ATTACKS", "DEFAULT_MODE", "Signal", "harness", "planted_sim", "window_count"]
