"""Mini instruction set, architectural state and the gadget assembler.

Operand order follows AT&T syntax: sources first, destination last
(``sub rbx, rax`` computes ``rax -= rbx``).  Registers are sixteen flat
64-bit slots ``r0``-``r15``; the usual x86 names are accepted as aliases.

Memory is byte addressed.  Loads read one byte and zero-extend it, stores
write the low byte of the source register.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Mapping, Optional, Sequence, Tuple, Union

MASK64 = (1 << 64) - 1
PAGE_SIZE = 4096
NUM_REGS = 16

# implicit DIV registers: r0 is the dividend and receives the quotient,
# r3 receives the remainder (rax / rdx)
DIV_DIVIDEND = 0
DIV_REMAINDER = 3

REGISTER_ALIASES = {
    "rax": 0, "rbx": 1, "rcx": 2, "rdx": 3, "rsi": 4, "rdi": 5, "rbp": 6, "rsp": 7,
}
REGISTER_ALIASES.update({f"r{i}": i for i in range(NUM_REGS)})


class Opcode(enum.Enum):
    MOV_LOAD = "mov_load"
    MOV_STORE = "mov_store"
    MOV_IMM = "mov_imm"
    XOR = "xor"
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    DIV = "div"
    SHL = "shl"
    CMP = "cmp"
    JL = "jl"
    FLUSH = "flush"
    MACCESS = "maccess"
    NOP = "nop"


class GadgetKind(enum.Enum):
    V1_DIV = "v1"
    V2_MOV = "v2"
    CATEGORY_PROBE = "probe"


class Attack(enum.Enum):
    MELTDOWN = "meltdown"
    SPECTRE_PHT = "spectre"
    ZOMBIELOAD = "zombieload"
    NONE = "none"


@dataclass(frozen=True)
class Reg:
    idx: int

    def __str__(self) -> str:
        return f"r{self.idx}"


@dataclass(frozen=True)
class Imm:
    value: int

    def __str__(self) -> str:
        return hex(self.value)


@dataclass(frozen=True)
class Mem:
    base: Optional[int] = None
    disp: int = 0
    index: Optional[int] = None
    scale: int = 1

    def __str__(self) -> str:
        if self.base is None and self.index is None:
            return f"({self.disp:#x})"
        disp = f"{self.disp:#x}" if self.disp else ""
        base = f"r{self.base}" if self.base is not None else ""
        if self.index is None:
            return f"{disp}({base})"
        return f"{disp}({base}, r{self.index}, {self.scale})"


@dataclass(frozen=True)
class Target:
    """Resolved branch destination (instruction index)."""

    index: int
    label: str = ""

    def __str__(self) -> str:
        return self.label or f"L{self.index}"


Operand = Union[Reg, Imm, Mem, Target]


@dataclass(frozen=True)
class Instruction:
    opcode: Opcode
    operands: Tuple[Operand, ...] = ()

    def __post_init__(self):
        _check_signature(self.opcode, self.operands)

    def __str__(self) -> str:
        ops = ", ".join(str(o) for o in self.operands)
        mnem = "mov" if self.opcode.name.startswith("MOV") else self.opcode.name.lower()
        return f"{mnem} {ops}".rstrip()


# allowed operand kinds per position
_SIGNATURES = {
    Opcode.MOV_LOAD: ((Mem,), (Reg,)),
    Opcode.MOV_STORE: ((Reg,), (Mem,)),
    Opcode.MOV_IMM: ((Imm,), (Reg,)),
    Opcode.XOR: ((Reg, Imm), (Reg,)),
    Opcode.ADD: ((Reg, Imm), (Reg,)),
    Opcode.SUB: ((Reg, Imm), (Reg,)),
    Opcode.MUL: ((Reg, Imm), (Reg,)),
    Opcode.CMP: ((Reg, Imm), (Reg,)),
    Opcode.SHL: ((Reg, Imm), (Reg,)),
    Opcode.DIV: ((Reg,),),
    Opcode.JL: ((Target,),),
    Opcode.FLUSH: ((Mem,),),
    Opcode.MACCESS: ((Mem,),),
    Opcode.NOP: (),
}


class IsaError(Exception):
    pass


class OperandError(IsaError, ValueError):
    pass


def _check_signature(opcode: Opcode, operands: Sequence[Operand]) -> None:
    sig = _SIGNATURES[opcode]
    if len(operands) != len(sig):
        raise OperandError(f"{opcode.name} takes {len(sig)} operand(s), got {len(operands)}")
    for pos, (op, kinds) in enumerate(zip(operands, sig)):
        if not isinstance(op, kinds):
            names = "/".join(k.__name__ for k in kinds)
            raise OperandError(f"{opcode.name} operand {pos} must be {names}, got {op!r}")
        if isinstance(op, Reg) and not 0 <= op.idx < NUM_REGS:
            raise OperandError(f"register r{op.idx} out of range")
        if isinstance(op, Mem):
            for r in (op.base, op.index):
                if r is not None and not 0 <= r < NUM_REGS:
                    raise OperandError(f"register r{r} out of range")
            if op.scale not in (1, 2, 4, 8):
                raise OperandError(f"bad scale {op.scale}")


# ---------------------------------------------------------------------------
# Faults


class Fault(Exception):
    """Architectural fault raised by :func:`retire`."""


class DivideByZero(Fault):
    pass


class PermissionViolation(Fault):
    def __init__(self, addr: int):
        super().__init__(f"user access to kernel page at {addr:#x}")
        self.addr = addr


# ---------------------------------------------------------------------------
# Architectural state


@dataclass(frozen=True)
class Flags:
    zero: bool = False
    overflow: bool = False
    sign: bool = False


def _freeze(mapping: Mapping) -> Mapping:
    return MappingProxyType(dict(mapping))


@dataclass(frozen=True)
class ArchState:
    """Registers, flags and sparse byte memory with per-page permissions.

    Instances are immutable; every update returns a new state.  Page 0 is
    kernel-tagged by default so that null accesses fault in user mode.
    """

    regs: Tuple[int, ...] = (0,) * NUM_REGS
    flags: Flags = Flags()
    mem: Mapping[int, int] = field(default_factory=lambda: _freeze({}))
    kernel_pages: frozenset = frozenset({0})
    user_mode: bool = True

    def __post_init__(self):
        if len(self.regs) != NUM_REGS:
            raise ValueError(f"expected {NUM_REGS} registers")
        if not isinstance(self.mem, MappingProxyType):
            object.__setattr__(self, "mem", _freeze(self.mem))

    def reg(self, idx: int) -> int:
        return self.regs[idx]

    def with_regs(self, values: Mapping[int, int]) -> "ArchState":
        regs = list(self.regs)
        for idx, val in values.items():
            regs[idx] = val & MASK64
        return replace(self, regs=tuple(regs))

    def with_flags(self, flags: Flags) -> "ArchState":
        return replace(self, flags=flags)

    def is_kernel(self, addr: int) -> bool:
        return (addr & MASK64) // PAGE_SIZE in self.kernel_pages

    def check_access(self, addr: int) -> None:
        if self.user_mode and self.is_kernel(addr):
            raise PermissionViolation(addr)

    def peek(self, addr: int) -> int:
        """Raw byte read ignoring permissions (the hardware's view)."""
        return self.mem.get(addr & MASK64, 0)

    def load(self, addr: int) -> int:
        self.check_access(addr)
        return self.peek(addr)

    def poke(self, addr: int, data: Union[int, bytes]) -> "ArchState":
        """Write byte(s) ignoring permissions; used to plant data."""
        if isinstance(data, int):
            data = bytes([data & 0xFF])
        mem = dict(self.mem)
        for i, b in enumerate(data):
            mem[(addr + i) & MASK64] = b
        return replace(self, mem=_freeze(mem))

    def store(self, addr: int, value: int) -> "ArchState":
        self.check_access(addr)
        return self.poke(addr, value & 0xFF)

    def with_kernel_page(self, addr: int) -> "ArchState":
        page = (addr & MASK64) // PAGE_SIZE
        return replace(self, kernel_pages=self.kernel_pages | {page})


def effective_address(state: ArchState, mem: Mem) -> int:
    addr = mem.disp
    if mem.base is not None:
        addr += state.regs[mem.base]
    if mem.index is not None:
        addr += state.regs[mem.index] * mem.scale
    return addr & MASK64


def _value(state: ArchState, op: Operand) -> int:
    if isinstance(op, Reg):
        return state.regs[op.idx]
    return op.value & MASK64


def _result_flags(result: int, overflow: bool) -> Flags:
    return Flags(zero=result == 0, overflow=overflow, sign=bool(result >> 63))


def branch_taken(state: ArchState) -> bool:
    """JL condition: unsigned less-than from the preceding CMP (borrow)."""
    return state.flags.overflow


def retire(state: ArchState, instr: Instruction) -> ArchState:
    """Apply the architectural effect of one instruction.

    Pure: returns a new state or raises :class:`Fault`.  Control flow (JL) has
    no architectural effect here; the caller resolves it with
    :func:`branch_taken`.
    """
    op = instr.opcode
    ops = instr.operands
    if op is Opcode.NOP or op is Opcode.JL or op is Opcode.FLUSH:
        return state
    if op is Opcode.MACCESS:
        state.check_access(effective_address(state, ops[0]))
        return state
    if op is Opcode.MOV_LOAD:
        value = state.load(effective_address(state, ops[0]))
        return state.with_regs({ops[1].idx: value})
    if op is Opcode.MOV_STORE:
        return state.store(effective_address(state, ops[1]), state.regs[ops[0].idx])
    if op is Opcode.MOV_IMM:
        return state.with_regs({ops[1].idx: ops[0].value})
    if op is Opcode.DIV:
        divisor = state.regs[ops[0].idx]
        if divisor == 0:
            raise DivideByZero("the divisor register is zero")
        dividend = state.regs[DIV_DIVIDEND]
        return state.with_regs(
            {DIV_DIVIDEND: dividend // divisor, DIV_REMAINDER: dividend % divisor}
        )

    src = _value(state, ops[0])
    dst_idx = ops[1].idx
    dst = state.regs[dst_idx]
    if op is Opcode.XOR:
        res = dst ^ src
        return replace(state.with_regs({dst_idx: res}), flags=_result_flags(res, False))
    if op is Opcode.ADD:
        full = dst + src
        res = full & MASK64
        return replace(state.with_regs({dst_idx: res}), flags=_result_flags(res, full > MASK64))
    if op is Opcode.SUB or op is Opcode.CMP:
        res = (dst - src) & MASK64
        flags = _result_flags(res, dst < src)
        if op is Opcode.CMP:
            return state.with_flags(flags)
        return replace(state.with_regs({dst_idx: res}), flags=flags)
    if op is Opcode.MUL:
        full = dst * src
        res = full & MASK64
        return replace(state.with_regs({dst_idx: res}), flags=_result_flags(res, full > MASK64))
    if op is Opcode.SHL:
        count = src & 63
        res = (dst << count) & MASK64
        return replace(state.with_regs({dst_idx: res}), flags=_result_flags(res, False))
    raise AssertionError(f"unhandled opcode {op}")


def add_overflows(a: int, b: int, width: int = 8) -> bool:
    """True when ``a + b`` wraps at ``width`` bits, observed through the ISA.

    Both operands are shifted to the top of a 64-bit register so the 64-bit
    overflow flag reports the narrow carry.
    """
    shift = 64 - width
    mask = (1 << width) - 1
    st = ArchState().with_regs({0: a & mask, 1: b & mask})
    for instr in (
        Instruction(Opcode.SHL, (Imm(shift), Reg(0))),
        Instruction(Opcode.SHL, (Imm(shift), Reg(1))),
        Instruction(Opcode.ADD, (Reg(1), Reg(0))),
    ):
        st = retire(st, instr)
    return st.flags.overflow


# ---------------------------------------------------------------------------
# Gadget programs


@dataclass(frozen=True)
class GadgetProgram:
    code: Tuple[Instruction, ...]
    secret_addr: int = 0
    guess_reg: Optional[int] = None
    probe_base: Optional[int] = None
    kind: GadgetKind = GadgetKind.CATEGORY_PROBE
    attack: Attack = Attack.NONE
    # harness hints: registers installed before each run, and where the
    # attacker value t lives when the program loads it from memory
    entry_regs: Mapping[int, int] = field(default_factory=lambda: _freeze({}))
    guess_addr: Optional[int] = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "code", tuple(self.code))
        object.__setattr__(self, "entry_regs", _freeze(self.entry_regs))
        if self.kind is GadgetKind.V1_DIV:
            n_div = sum(i.opcode is Opcode.DIV for i in self.code)
            if n_div != 1:
                raise IsaError(f"V1 gadget needs exactly one DIV, found {n_div}")
        elif self.kind is GadgetKind.V2_MOV:
            if len(_page_indexed_loads(self.code)) != 1:
                raise IsaError("V2 gadget needs exactly one access indexed by a 4096-stride register")

    def __len__(self) -> int:
        return len(self.code)

    def opcodes(self) -> Tuple[Opcode, ...]:
        return tuple(i.opcode for i in self.code)

    def listing(self) -> str:
        """Assembly text that reassembles to the same code."""
        labels = {op.index: op for i in self.code for op in i.operands if isinstance(op, Target)}
        lines = []
        for pos, instr in enumerate(self.code):
            if pos in labels:
                lines.append(f"{labels[pos]}:")
            lines.append(f"    {instr}" if labels else str(instr))
        if len(self.code) in labels:
            lines.append(f"{labels[len(self.code)]}:")
        return "\n".join(lines)


def _page_indexed_loads(code: Sequence[Instruction]) -> list:
    shifted = set()
    hits = []
    for pos, instr in enumerate(code):
        ops = instr.operands
        if instr.opcode is Opcode.SHL and isinstance(ops[0], Imm) and ops[0].value == 12:
            shifted.add(ops[1].idx)
            continue
        if instr.opcode in (Opcode.MOV_LOAD, Opcode.MACCESS):
            mem = ops[0]
            if mem.index in shifted and mem.scale == 1:
                hits.append(pos)
        # any other write to a shifted register clears it
        if len(ops) == 2 and isinstance(ops[1], Reg) and instr.opcode is not Opcode.CMP:
            if instr.opcode is not Opcode.SHL:
                shifted.discard(ops[1].idx)
    return hits


# ---------------------------------------------------------------------------
# Assembler


class AssemblyError(IsaError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{line}:{column}: {message}")
        self.line = line
        self.column = column


class UnknownMnemonic(AssemblyError):
    pass


class BadOperandCount(AssemblyError):
    pass


class UndefinedLabel(AssemblyError):
    pass


class BadOperand(AssemblyError):
    pass


_MNEMONICS = {
    "xor": Opcode.XOR, "add": Opcode.ADD, "sub": Opcode.SUB, "mul": Opcode.MUL,
    "imul": Opcode.MUL, "div": Opcode.DIV, "shl": Opcode.SHL, "cmp": Opcode.CMP,
    "jl": Opcode.JL, "jb": Opcode.JL, "flush": Opcode.FLUSH, "clflush": Opcode.FLUSH,
    "maccess": Opcode.MACCESS, "nop": Opcode.NOP,
    "movzx": Opcode.MOV_LOAD, "movzb": Opcode.MOV_LOAD,
}
_LABEL_RE = re.compile(r"^\s*([A-Za-z_.][\w.]*)\s*:")
_INT_RE = re.compile(r"^\$?-?(0x[0-9a-fA-F]+|\d+)$")


def _split_operands(text: str) -> list:
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur))
    parts = [p.strip() for p in parts]
    # tolerate a trailing comma ("xor rax, rax,")
    if parts and parts[-1] == "" and len(parts) > 1:
        parts.pop()
    return [p for p in parts if p] if parts != [""] else []


def _parse_int(tok: str) -> Optional[int]:
    tok = tok.strip()
    if not _INT_RE.match(tok):
        return None
    tok = tok.lstrip("$")
    return int(tok, 0)


def _parse_reg(tok: str) -> Optional[int]:
    return REGISTER_ALIASES.get(tok.strip().lstrip("%").lower())


def _parse_operand(tok: str, symbols: Mapping[str, int]):
    """Return an operand or a label name (str) for branch targets."""
    tok = tok.strip()
    reg = _parse_reg(tok)
    if reg is not None:
        return Reg(reg)
    value = _parse_int(tok)
    if value is not None:
        return Imm(value & MASK64)
    if tok in symbols:
        return Imm(symbols[tok] & MASK64)
    if "(" in tok and tok.endswith(")"):
        head, inner = tok.split("(", 1)
        inner = inner[:-1]
        disp = 0
        if head.strip():
            disp = _parse_int(head)
            if disp is None:
                disp = symbols.get(head.strip())
            if disp is None:
                raise ValueError(f"bad displacement {head!r}")
        fields = [f.strip() for f in inner.split(",")] if inner.strip() else []
        base = index = None
        scale = 1
        if fields:
            first = fields[0]
            if first:
                # "(mem, (rax), 1)": a nested register stands for the index
                base = _parse_reg(first)
                if base is None:
                    absolute = _parse_int(first)
                    if absolute is None:
                        absolute = symbols.get(first)
                    if absolute is None:
                        raise ValueError(f"bad base {first!r}")
                    disp += absolute
            if len(fields) > 1:
                index = _parse_reg(fields[1].strip("()"))
                if index is None:
                    raise ValueError(f"bad index {fields[1]!r}")
            if len(fields) > 2:
                scale = _parse_int(fields[2])
                if scale is None:
                    raise ValueError(f"bad scale {fields[2]!r}")
            if len(fields) > 3:
                raise ValueError("too many memory operand fields")
        return Mem(base=base, disp=disp & MASK64, index=index, scale=scale)
    if re.match(r"^[A-Za-z_.][\w.]*$", tok):
        return tok
    raise ValueError(f"cannot parse operand {tok!r}")


def _strip_comment(line: str) -> str:
    for marker in (";", "//", "#"):
        pos = line.find(marker)
        if pos >= 0:
            line = line[:pos]
    return line


def assemble(text: str, symbols: Optional[Mapping[str, int]] = None, **meta) -> GadgetProgram:
    """Assemble a gadget listing into a :class:`GadgetProgram`.

    One instruction per line; ``;`` (also ``//`` and ``#``) starts a comment
    and ``name:`` defines a label.  ``symbols`` maps names usable as
    immediates or memory displacements.  Remaining keyword arguments are
    passed to :class:`GadgetProgram`.
    """
    symbols = dict(symbols or {})
    pending = []  # (line, col, mnemonic, operand tokens)
    labels = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        while True:
            m = _LABEL_RE.match(line)
            if not m:
                break
            labels[m.group(1)] = len(pending)
            line = line[m.end():]
        if not line.strip():
            continue
        col = len(line) - len(line.lstrip()) + 1
        body = line.strip()
        mnem, _, rest = body.partition(" ")
        pending.append((lineno, col, mnem.lower(), rest, col + len(mnem) + 1))

    code = []
    for lineno, col, mnem, rest, op_col in pending:
        try:
            toks = _split_operands(rest)
            ops = [_parse_operand(t, symbols) for t in toks]
        except ValueError as exc:
            raise BadOperand(str(exc), lineno, op_col) from None
        if mnem in ("mov", "movq", "movb"):
            if len(ops) != 2:
                raise BadOperandCount(f"mov takes 2 operands, got {len(ops)}", lineno, col)
            if isinstance(ops[0], Mem):
                opcode = Opcode.MOV_LOAD
            elif isinstance(ops[1], Mem):
                opcode = Opcode.MOV_STORE
            else:
                opcode = Opcode.MOV_IMM
        elif mnem in _MNEMONICS:
            opcode = _MNEMONICS[mnem]
        else:
            raise UnknownMnemonic(f"unknown mnemonic {mnem!r}", lineno, col)

        expected = len(_SIGNATURES[opcode])
        if len(ops) != expected:
            raise BadOperandCount(
                f"{mnem} takes {expected} operand(s), got {len(ops)}", lineno, col
            )
        resolved = []
        for op in ops:
            if isinstance(op, str):
                if opcode is not Opcode.JL:
                    raise BadOperand(f"unknown symbol {op!r}", lineno, op_col)
                if op not in labels:
                    raise UndefinedLabel(f"undefined label {op!r}", lineno, op_col)
                op = Target(labels[op], op)
            resolved.append(op)
        try:
            code.append(Instruction(opcode, tuple(resolved)))
        except OperandError as exc:
            raise BadOperand(str(exc), lineno, op_col) from None
    try:
        return GadgetProgram(code=tuple(code), **meta)
    except IsaError as exc:
        raise AssemblyError(str(exc), 0, 0) from None
