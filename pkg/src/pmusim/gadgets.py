"""Gadget builders: v1 (division), v2 (data-moving) and category probes.

Every builder returns an immutable :class:`~pmusim.isa.GadgetProgram` whose
``entry_regs`` tell the harness which registers to install before a run.
The programs are straight-line apart from the Spectre-PHT bounds check, so
the executed opcode sequence never depends on the secret or the guess.
"""
from __future__ import annotations

import enum
from typing import Optional, Sequence

from .isa import Attack, GadgetKind, GadgetProgram, assemble

# address layout shared by builders and the attack harness
GUESS_ADDR = 0x2000                   # attacker-controlled variable (Meltdown v1)
USER_SECRET = 0x8000                  # user-readable secret for category probes
ARRAY1 = 0x10000                      # Spectre-PHT victim array
ARRAY1_SIZE = 16
VICTIM_SECRET = 0x18000               # Spectre-PHT secret, reachable as array1[x]
KERNEL_SECRET = 0xFFFF888000001000    # Meltdown secret, kernel page
ENCLAVE_SECRET = 0x50000000           # Zombieload secret, kernel-tagged enclave page
TARGET = 0x30000                      # Zombieload target[] area, flushed before each run
PROBE_BASE = 0x100000                 # 256 x 4096 probe area ("mem")
PROBE_STRIDE = 4096

MELTDOWN_DIVIDEND = 9
SPECTRE_DIVIDEND = 32

# register conventions
REG_SIZE, REG_X, REG_ARRAY, REG_GUESS, REG_MEM, REG_ZERO = 8, 9, 10, 11, 12, 15


class Category(enum.Enum):
    ADDITION = "addition"
    SUBTRACTION = "subtraction"
    MULTIPLICATION = "multiplication"
    DIVISION = "division"
    DATA_MOVING = "data_moving"


DEFAULT_SECRET_ADDR = {
    Attack.MELTDOWN: KERNEL_SECRET,
    Attack.SPECTRE_PHT: VICTIM_SECRET,
    Attack.ZOMBIELOAD: ENCLAVE_SECRET,
    Attack.NONE: USER_SECRET,
}

_BOUNDS_CHECK = """
    cmp r8, r9            ; flags from x - array1_size
    jl body               ; x < array1_size
    cmp r8, r15           ; 0 - array1_size always borrows
    jl end                ; skip the body
body:
"""


def _spectre_regs(secret_addr: int) -> dict:
    return {REG_SIZE: ARRAY1_SIZE, REG_X: secret_addr - ARRAY1, REG_ARRAY: ARRAY1, REG_ZERO: 0}


def _zombie_target(secret_addr: int) -> int:
    # target[0] sits at the same line offset as the secret so that the
    # forwarded LFB byte is the secret itself
    return TARGET + secret_addr % 64


def _attack(attack) -> Attack:
    return attack if isinstance(attack, Attack) else Attack(attack)


def build_v1(attack, secret_addr: Optional[int] = None, guess_reg: int = REG_GUESS) -> GadgetProgram:
    """Division gadget: divides a constant by ``secret - t``.

    When the guess equals the secret the divisor is zero and the divide unit
    never starts.
    """
    attack = _attack(attack)
    if secret_addr is None:
        secret_addr = DEFAULT_SECRET_ADDR[attack]
    g = f"r{guess_reg}"
    meta = dict(secret_addr=secret_addr, kind=GadgetKind.V1_DIV, attack=attack)

    if attack is Attack.MELTDOWN:
        # rbx <- t, rcx <- secret, rcx = secret - t, rax = 9 / rcx
        text = """
            xor rbx, rbx
            xor rcx, rcx
            mov 0x9, rax
            mov (rdx), rbx
            mov (rsi), rcx
            sub rbx, rcx
            div rcx
        """
        return assemble(text, guess_reg=1, guess_addr=GUESS_ADDR,
                        entry_regs={3: GUESS_ADDR, 4: secret_addr},
                        name="v1-meltdown", **meta)
    if attack is Attack.SPECTRE_PHT:
        text = _BOUNDS_CHECK + f"""
            mov (r10, r9, 1), r1  ; array1[x]
            sub {g}, r1
            mov 32, r0
            div r1
        end:
            nop
        """
        return assemble(text, guess_reg=guess_reg, entry_regs=_spectre_regs(secret_addr),
                        name="v1-spectre", **meta)
    if attack is Attack.ZOMBIELOAD:
        text = f"""
            maccess (0)
            mov (r10), r1         ; target[0], served from the LFB
            sub {g}, r1
            mov 32, r0
            div r1
        """
        return assemble(text, guess_reg=guess_reg,
                        entry_regs={REG_ARRAY: _zombie_target(secret_addr)},
                        name="v1-zombieload", **meta)
    raise ValueError(f"no v1 gadget for {attack}")


def build_v2(attack, secret_addr: Optional[int] = None, guess_reg: Optional[int] = None,
             probe_base: int = PROBE_BASE) -> GadgetProgram:
    """Data-moving gadget: touches ``probe_base + secret * 4096``.

    The guess never enters the program; the harness flushes the probe line
    of guess ``t`` before each run.
    """
    attack = _attack(attack)
    if secret_addr is None:
        secret_addr = DEFAULT_SECRET_ADDR[attack]
    syms = {"mem": probe_base}
    meta = dict(secret_addr=secret_addr, kind=GadgetKind.V2_MOV, attack=attack,
                probe_base=probe_base, guess_reg=guess_reg)

    if attack is Attack.MELTDOWN:
        text = """
            xor rax, rax
            mov (rsi), rax
            shl 0xc, rax
            movzx (mem, (rax), 1), rbx
        """
        return assemble(text, syms, entry_regs={4: secret_addr}, name="v2-meltdown", **meta)
    if attack is Attack.SPECTRE_PHT:
        text = _BOUNDS_CHECK + """
            mov (r10, r9, 1), rax  ; array1[x]
            shl 0xc, rax
            mov (mem, (rax), 1), rbx
        end:
            nop
        """
        return assemble(text, syms, entry_regs=_spectre_regs(secret_addr),
                        name="v2-spectre", **meta)
    if attack is Attack.ZOMBIELOAD:
        text = """
            maccess (0)
            mov (r10), rax         ; target[0]
            shl 0xc, rax
            maccess (mem, (rax), 1)
        """
        return assemble(text, syms, entry_regs={REG_ARRAY: _zombie_target(secret_addr)},
                        name="v2-zombieload", **meta)
    raise ValueError(f"no v2 gadget for {attack}")


_PROBE_WITH_OPERANDS = {
    Category.ADDITION: "mov {a}, r0\nmov {b}, r1\nshl 56, r0\nshl 56, r1\nadd r1, r0",
    Category.SUBTRACTION: "mov {a}, r0\nmov {b}, r1\nshl 56, r0\nshl 56, r1\nsub r1, r0",
    Category.MULTIPLICATION: "mov {a}, r0\nmov {b}, r1\nmul r1, r0",
    Category.DIVISION: "mov {a}, r0\nmov {b}, r1\ndiv r1",
    Category.DATA_MOVING: "flush ({fa:#x})\nmov ({fb:#x}), r1",
}

# operand taken from the planted secret s and the guess t (register r11)
_PROBE_WITH_SECRET = {
    Category.ADDITION: "mov (r4), r0\nshl 56, r0\nshl 56, r11\nadd r11, r0",
    Category.SUBTRACTION: "mov (r4), r0\nshl 56, r0\nshl 56, r11\nsub r11, r0",
    Category.MULTIPLICATION: "mov (r4), r1\nsub r11, r1\nmov 5, r0\nmul r1, r0",
    Category.DIVISION: "mov (r4), r1\nsub r11, r1\nmov 5, r0\ndiv r1",
    Category.DATA_MOVING: (
        "shl 0xc, r11\nflush (mem, (r11), 1)\n"
        "mov (r4), r0\nshl 0xc, r0\nmov (mem, (r0), 1), r1"
    ),
}


def build_category_probe(category, operands: Optional[Sequence[int]] = None, *,
                         secret_addr: int = USER_SECRET,
                         probe_base: int = PROBE_BASE) -> GadgetProgram:
    """Straight-line program exercising one instruction category once.

    With ``operands`` the values are immediates: ``(a, b)`` computes
    ``a + b``, ``a - b`` (both at 8-bit width), ``a * b``, ``a / b``, or for
    DATA_MOVING flushes probe page ``a`` and then loads probe page ``b``.
    Without operands the varying operand is derived from the byte at
    ``secret_addr`` (s) and the guess register (t): ``s + t``, ``s - t``,
    ``5 * (s - t)``, ``5 / (s - t)``, or flush page ``t`` then load page ``s``.
    """
    category = category if isinstance(category, Category) else Category(category)
    if operands is not None:
        a, b = operands
        text = _PROBE_WITH_OPERANDS[category].format(
            a=a, b=b, fa=probe_base + a * PROBE_STRIDE, fb=probe_base + b * PROBE_STRIDE)
        return assemble(text, probe_base=probe_base, name=f"probe-{category.value}")
    return assemble(
        _PROBE_WITH_SECRET[category], {"mem": probe_base},
        secret_addr=secret_addr, guess_reg=REG_GUESS, probe_base=probe_base,
        entry_regs={4: secret_addr}, name=f"probe-{category.value}",
    )


def builtin_gadgets():
    """All v1/v2 attack gadgets at their default secret addresses."""
    return [build(att) for build in (build_v1, build_v2)
            for att in (Attack.MELTDOWN, Attack.SPECTRE_PHT, Attack.ZOMBIELOAD)]
