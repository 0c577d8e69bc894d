"""RV32I decode, encoding, a small assembler, and the golden reference model."""
from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .harness import RvfiRecord, byte_lanes, rs_addr

MASK32 = 0xFFFF_FFFF

KINDS = (
    "LUI", "AUIPC", "JAL", "JALR",
    "BEQ", "BNE", "BLT", "BGE", "BLTU", "BGEU",
    "LB", "LH", "LW", "LBU", "LHU",
    "SB", "SH", "SW",
    "ADDI", "SLTI", "SLTIU", "XORI", "ORI", "ANDI", "SLLI", "SRLI", "SRAI",
    "ADD", "SUB", "SLL", "SLT", "SLTU", "XOR", "SRL", "SRA", "OR", "AND",
    "EBREAK", "ILLEGAL",
)

OP_LUI, OP_AUIPC, OP_JAL, OP_JALR = 0x37, 0x17, 0x6F, 0x67
OP_BRANCH, OP_LOAD, OP_STORE = 0x63, 0x03, 0x23
OP_IMM, OP_REG, OP_SYSTEM = 0x13, 0x33, 0x73
EBREAK_WORD = 0x0010_0073

BRANCH_F3 = {"BEQ": 0, "BNE": 1, "BLT": 4, "BGE": 5, "BLTU": 6, "BGEU": 7}
LOAD_F3 = {"LB": 0, "LH": 1, "LW": 2, "LBU": 4, "LHU": 5}
STORE_F3 = {"SB": 0, "SH": 1, "SW": 2}
IMM_F3 = {"ADDI": 0, "SLTI": 2, "SLTIU": 3, "XORI": 4, "ORI": 6, "ANDI": 7,
          "SLLI": 1, "SRLI": 5, "SRAI": 5}
REG_F3F7 = {"ADD": (0, 0), "SUB": (0, 0x20), "SLL": (1, 0), "SLT": (2, 0), "SLTU": (3, 0),
            "XOR": (4, 0), "SRL": (5, 0), "SRA": (5, 0x20), "OR": (6, 0), "AND": (7, 0)}

_BRANCH_BY_F3 = {v: k for k, v in BRANCH_F3.items()}
_LOAD_BY_F3 = {v: k for k, v in LOAD_F3.items()}
_STORE_BY_F3 = {v: k for k, v in STORE_F3.items()}
_REG_BY_F3F7 = {v: k for k, v in REG_F3F7.items()}
_IMM_BY_F3 = {0: "ADDI", 2: "SLTI", 3: "SLTIU", 4: "XORI", 6: "ORI", 7: "ANDI"}

LOADS = frozenset(LOAD_F3)
STORES = frozenset(STORE_F3)
BRANCHES = frozenset(BRANCH_F3)
SHIFT_IMMS = frozenset({"SLLI", "SRLI", "SRAI"})
REG_OPS = frozenset(REG_F3F7)
IMM_OPS = frozenset(IMM_F3)
JUMPS = frozenset({"JAL", "JALR"})
ACCESS_SIZE = {"LB": 1, "LBU": 1, "SB": 1, "LH": 2, "LHU": 2, "SH": 2, "LW": 4, "SW": 4}

_RS1_KINDS = frozenset({"JALR"}) | BRANCHES | LOADS | STORES | IMM_OPS | REG_OPS
_RS2_KINDS = BRANCHES | STORES | REG_OPS
_RD_KINDS = frozenset({"LUI", "AUIPC", "JAL", "JALR"}) | LOADS | IMM_OPS | REG_OPS


def sext(value: int, bits: int) -> int:
    value &= (1 << bits) - 1
    return value - (1 << bits) if value >> (bits - 1) else value


@dataclass(frozen=True)
class Instr:
    kind: str
    rd: int
    rs1: int
    rs2: int
    imm: int
    raw: int

    @property
    def rs1_is_reg(self) -> bool:
        return self.kind in _RS1_KINDS

    @property
    def rs2_is_reg(self) -> bool:
        return self.kind in _RS2_KINDS

    @property
    def writes_rd(self) -> bool:
        return self.kind in _RD_KINDS

    @property
    def is_load(self) -> bool:
        return self.kind in LOADS

    @property
    def is_store(self) -> bool:
        return self.kind in STORES

    def __str__(self):
        return disassemble(self)


def decode(word: int) -> Instr:
    """Decode a 32-bit word.  Total: anything unrecognized is ``ILLEGAL``."""
    word &= MASK32
    opcode = word & 0x7F
    rd = (word >> 7) & 0x1F
    f3 = (word >> 12) & 0x7
    rs1 = (word >> 15) & 0x1F
    rs2 = (word >> 20) & 0x1F
    f7 = word >> 25
    i_imm = sext(word >> 20, 12)
    kind = "ILLEGAL"
    imm = 0
    if opcode == OP_LUI:
        kind, imm = "LUI", sext(word & 0xFFFF_F000, 32)
    elif opcode == OP_AUIPC:
        kind, imm = "AUIPC", sext(word & 0xFFFF_F000, 32)
    elif opcode == OP_JAL:
        kind = "JAL"
        imm = sext(((word >> 31) & 1) << 20 | ((word >> 12) & 0xFF) << 12
                   | ((word >> 20) & 1) << 11 | ((word >> 21) & 0x3FF) << 1, 21)
    elif opcode == OP_JALR and f3 == 0:
        kind, imm = "JALR", i_imm
    elif opcode == OP_BRANCH and f3 in _BRANCH_BY_F3:
        kind = _BRANCH_BY_F3[f3]
        imm = sext(((word >> 31) & 1) << 12 | ((word >> 7) & 1) << 11
                   | ((word >> 25) & 0x3F) << 5 | ((word >> 8) & 0xF) << 1, 13)
    elif opcode == OP_LOAD and f3 in _LOAD_BY_F3:
        kind, imm = _LOAD_BY_F3[f3], i_imm
    elif opcode == OP_STORE and f3 in _STORE_BY_F3:
        kind, imm = _STORE_BY_F3[f3], sext(f7 << 5 | rd, 12)
    elif opcode == OP_IMM:
        if f3 in _IMM_BY_F3:
            kind, imm = _IMM_BY_F3[f3], i_imm
        elif f3 == 1 and f7 == 0:
            kind, imm = "SLLI", rs2
        elif f3 == 5 and f7 == 0:
            kind, imm = "SRLI", rs2
        elif f3 == 5 and f7 == 0x20:
            kind, imm = "SRAI", rs2
    elif opcode == OP_REG and (f3, f7) in _REG_BY_F3F7:
        kind = _REG_BY_F3F7[(f3, f7)]
    elif word == EBREAK_WORD:
        kind = "EBREAK"
    return Instr(kind, rd, rs1, rs2, imm, word)


# --------------------------------------------------------------------------
# Encoding

class AssemblyError(Exception):
    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}" if lineno is not None else message)


class AsmSyntaxError(AssemblyError):
    pass


class UnknownMnemonic(AssemblyError):
    pass


class ImmediateOutOfRange(AssemblyError):
    pass


def _check_range(kind: str, value: int, lo: int, hi: int, align: int = 1):
    if not lo <= value <= hi:
        raise ImmediateOutOfRange(f"{kind.lower()}: immediate {value} outside [{lo}, {hi}]")
    if value % align:
        raise ImmediateOutOfRange(f"{kind.lower()}: offset {value} is not a multiple of {align}")


def encode(kind: str, rd: int = 0, rs1: int = 0, rs2: int = 0, imm: int = 0) -> int:
    """Encode one instruction from its fields (immediates as signed integers)."""
    kind = kind.upper()
    for r in (rd, rs1, rs2):
        if not 0 <= r < 32:
            raise AsmSyntaxError(f"register index {r} out of range")
    if kind in ("LUI", "AUIPC"):
        # imm is the full 32-bit value; the low 12 bits must be clear
        if imm & 0xFFF:
            raise ImmediateOutOfRange(f"{kind.lower()}: low 12 bits of {imm:#x} must be zero")
        _check_range(kind, imm, -(1 << 31), MASK32)
        return (imm & 0xFFFF_F000) | rd << 7 | (OP_LUI if kind == "LUI" else OP_AUIPC)
    if kind == "JAL":
        _check_range(kind, imm, -(1 << 20), (1 << 20) - 2, 2)
        u = imm & 0x1F_FFFF
        return ((u >> 20) & 1) << 31 | ((u >> 1) & 0x3FF) << 21 | ((u >> 11) & 1) << 20 \
            | ((u >> 12) & 0xFF) << 12 | rd << 7 | OP_JAL
    if kind == "JALR" or kind in LOADS:
        _check_range(kind, imm, -2048, 2047)
        f3 = 0 if kind == "JALR" else LOAD_F3[kind]
        op = OP_JALR if kind == "JALR" else OP_LOAD
        return (imm & 0xFFF) << 20 | rs1 << 15 | f3 << 12 | rd << 7 | op
    if kind in BRANCHES:
        _check_range(kind, imm, -4096, 4094, 2)
        u = imm & 0x1FFF
        return ((u >> 12) & 1) << 31 | ((u >> 5) & 0x3F) << 25 | rs2 << 20 | rs1 << 15 \
            | BRANCH_F3[kind] << 12 | ((u >> 1) & 0xF) << 8 | ((u >> 11) & 1) << 7 | OP_BRANCH
    if kind in STORES:
        _check_range(kind, imm, -2048, 2047)
        u = imm & 0xFFF
        return (u >> 5) << 25 | rs2 << 20 | rs1 << 15 | STORE_F3[kind] << 12 | (u & 0x1F) << 7 | OP_STORE
    if kind in SHIFT_IMMS:
        _check_range(kind, imm, 0, 31)
        f7 = 0x20 if kind == "SRAI" else 0
        return f7 << 25 | imm << 20 | rs1 << 15 | IMM_F3[kind] << 12 | rd << 7 | OP_IMM
    if kind in IMM_OPS:
        _check_range(kind, imm, -2048, 2047)
        return (imm & 0xFFF) << 20 | rs1 << 15 | IMM_F3[kind] << 12 | rd << 7 | OP_IMM
    if kind in REG_OPS:
        f3, f7 = REG_F3F7[kind]
        return f7 << 25 | rs2 << 20 | rs1 << 15 | f3 << 12 | rd << 7 | OP_REG
    if kind == "EBREAK":
        return EBREAK_WORD
    raise UnknownMnemonic(f"unknown mnemonic {kind.lower()!r}")


def encode_instr(instr: Instr) -> int:
    if instr.kind == "ILLEGAL":
        return instr.raw
    return encode(instr.kind, instr.rd, instr.rs1, instr.rs2, instr.imm)


ABI_NAMES = ("zero ra sp gp tp t0 t1 t2 s0 s1 a0 a1 a2 a3 a4 a5 a6 a7 "
             "s2 s3 s4 s5 s6 s7 s8 s9 s10 s11 t3 t4 t5 t6").split()
_REGS = {f"x{i}": i for i in range(32)} | {n: i for i, n in enumerate(ABI_NAMES)} | {"fp": 8}


def disassemble(instr: Instr) -> str:
    k, m = instr.kind, instr.kind.lower()
    if k == "ILLEGAL":
        return f".word {instr.raw:#010x}"
    if k == "EBREAK":
        return m
    if k in ("LUI", "AUIPC"):
        return f"{m} x{instr.rd}, {(instr.imm >> 12) & 0xFFFFF:#x}"
    if k == "JAL":
        return f"{m} x{instr.rd}, {instr.imm}"
    if k == "JALR" or k in LOADS:
        return f"{m} x{instr.rd}, {instr.imm}(x{instr.rs1})"
    if k in STORES:
        return f"{m} x{instr.rs2}, {instr.imm}(x{instr.rs1})"
    if k in BRANCHES:
        return f"{m} x{instr.rs1}, x{instr.rs2}, {instr.imm}"
    if k in IMM_OPS:
        return f"{m} x{instr.rd}, x{instr.rs1}, {instr.imm}"
    return f"{m} x{instr.rd}, x{instr.rs1}, x{instr.rs2}"


_LABEL = re.compile(r"^([A-Za-z_.][\w.]*):")
_MEMREF = re.compile(r"^(.*)\((\w+)\)$")


def _reg(tok: str, lineno: int) -> int:
    try:
        return _REGS[tok.strip().lower()]
    except KeyError:
        raise AsmSyntaxError(f"bad register {tok.strip()!r}", lineno) from None


def _int(tok: str, lineno: int) -> int:
    try:
        return int(tok.strip(), 0)
    except ValueError:
        raise AsmSyntaxError(f"bad number {tok.strip()!r}", lineno) from None


def assemble(lines: str | Iterable[str], origin: int = 0) -> list[int]:
    """Assemble RV32I text into words placed from ``origin``.

    One instruction per line; ``#`` starts a comment; ``label:`` defines a
    label usable as a branch or jump target.  ``nop`` and ``.word`` are
    accepted as conveniences.
    """
    if isinstance(lines, str):
        lines = lines.splitlines()
    items: list[tuple[int, str, list[str]]] = []
    labels: dict[str, int] = {}
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        while True:
            m = _LABEL.match(text)
            if not m:
                break
            if m.group(1) in labels:
                raise AsmSyntaxError(f"duplicate label {m.group(1)!r}", lineno)
            labels[m.group(1)] = origin + 4 * len(items)
            text = text[m.end():].strip()
        if not text:
            continue
        mnemonic, _, rest = text.partition(" ")
        ops = [o.strip() for o in rest.split(",")] if rest.strip() else []
        items.append((lineno, mnemonic.lower(), ops))

    words = []
    for index, (lineno, mnemonic, ops) in enumerate(items):
        pc = origin + 4 * index
        try:
            words.append(_assemble_one(mnemonic, ops, pc, labels, lineno))
        except AssemblyError as exc:
            if exc.lineno is None:
                raise type(exc)(str(exc), lineno) from None
            raise
    return words


def _expect(ops: list[str], n: int, mnemonic: str, lineno: int):
    if len(ops) != n:
        raise AsmSyntaxError(f"{mnemonic} takes {n} operands, got {len(ops)}", lineno)


def _target(tok: str, pc: int, labels: dict[str, int], lineno: int) -> int:
    tok = tok.strip()
    if tok in labels:
        return labels[tok] - pc
    if re.match(r"^[A-Za-z_.]", tok):
        raise AsmSyntaxError(f"undefined label {tok!r}", lineno)
    return _int(tok, lineno)


def _assemble_one(mnemonic: str, ops: list[str], pc: int, labels: dict[str, int], lineno: int) -> int:
    kind = mnemonic.upper()
    if mnemonic == ".word":
        _expect(ops, 1, mnemonic, lineno)
        value = _int(ops[0], lineno)
        if not 0 <= value <= MASK32:
            raise ImmediateOutOfRange(f".word {value} does not fit 32 bits", lineno)
        return value
    if mnemonic == "nop":
        _expect(ops, 0, mnemonic, lineno)
        return encode("ADDI")
    if kind not in KINDS or kind == "ILLEGAL":
        raise UnknownMnemonic(f"unknown mnemonic {mnemonic!r}", lineno)
    if kind == "EBREAK":
        _expect(ops, 0, mnemonic, lineno)
        return encode(kind)
    if kind in ("LUI", "AUIPC"):
        _expect(ops, 2, mnemonic, lineno)
        upper = _int(ops[1], lineno)
        _check_range(kind, upper, -(1 << 19), 0xFFFFF)
        return encode(kind, rd=_reg(ops[0], lineno), imm=sext(upper << 12, 32))
    if kind == "JAL":
        if len(ops) == 1:
            ops = ["x1"] + ops
        _expect(ops, 2, mnemonic, lineno)
        return encode(kind, rd=_reg(ops[0], lineno), imm=_target(ops[1], pc, labels, lineno))
    if kind == "JALR" or kind in LOADS:
        if kind == "JALR" and len(ops) == 3:
            return encode(kind, rd=_reg(ops[0], lineno), rs1=_reg(ops[1], lineno), imm=_int(ops[2], lineno))
        _expect(ops, 2, mnemonic, lineno)
        offset, base = _memref(ops[1], lineno)
        return encode(kind, rd=_reg(ops[0], lineno), rs1=base, imm=offset)
    if kind in STORES:
        _expect(ops, 2, mnemonic, lineno)
        offset, base = _memref(ops[1], lineno)
        return encode(kind, rs2=_reg(ops[0], lineno), rs1=base, imm=offset)
    if kind in BRANCHES:
        _expect(ops, 3, mnemonic, lineno)
        return encode(kind, rs1=_reg(ops[0], lineno), rs2=_reg(ops[1], lineno),
                      imm=_target(ops[2], pc, labels, lineno))
    if kind in IMM_OPS:
        _expect(ops, 3, mnemonic, lineno)
        return encode(kind, rd=_reg(ops[0], lineno), rs1=_reg(ops[1], lineno), imm=_int(ops[2], lineno))
    _expect(ops, 3, mnemonic, lineno)
    return encode(kind, rd=_reg(ops[0], lineno), rs1=_reg(ops[1], lineno), rs2=_reg(ops[2], lineno))


def _memref(tok: str, lineno: int) -> tuple[int, int]:
    m = _MEMREF.match(tok.strip())
    if not m:
        raise AsmSyntaxError(f"expected offset(base), got {tok!r}", lineno)
    offset = _int(m.group(1), lineno) if m.group(1).strip() else 0
    return offset, _reg(m.group(2), lineno)


# --------------------------------------------------------------------------
# Golden model

class PcOutOfRange(Exception):
    pass


class PcMisaligned(Exception):
    pass


@dataclass(frozen=True)
class ArchState:
    """Architectural state.  ``mem`` is immutable; stores produce a new copy."""

    pc: int
    regs: tuple[int, ...]
    mem: bytes

    @classmethod
    def reset(cls, image: Sequence[int] | bytes, mem_size: int) -> "ArchState":
        return cls(0, (0,) * 32, image_bytes(image, mem_size))

    def load_word(self, addr: int) -> int:
        return int.from_bytes(self.mem[addr:addr + 4], "little")


def image_bytes(image: Sequence[int] | bytes, mem_size: int) -> bytes:
    raw = bytes(image) if isinstance(image, (bytes, bytearray)) else \
        b"".join((w & MASK32).to_bytes(4, "little") for w in image)
    if len(raw) > mem_size:
        raise ValueError(f"image of {len(raw)} bytes does not fit {mem_size}-byte memory")
    return raw + bytes(mem_size - len(raw))


RetireInfo = RvfiRecord


def golden_step(state: ArchState, order: int = 0) -> tuple[ArchState, RvfiRecord]:
    """Execute one instruction in program order."""
    pc = state.pc
    if pc % 4:
        raise PcMisaligned(f"pc {pc:#x} is not word aligned")
    if pc + 4 > len(state.mem):
        raise PcOutOfRange(f"pc {pc:#x} outside {len(state.mem)}-byte memory")
    ins = decode(state.load_word(pc))
    regs = state.regs
    k = ins.kind
    a = regs[ins.rs1] if ins.rs1_is_reg else 0
    b = regs[ins.rs2] if ins.rs2_is_reg else 0
    info = dict(order=order, insn=ins.raw,
                rs1_addr=rs_addr(ins.rs1_is_reg, ins.rs1), rs1_rdata=a,
                rs2_addr=rs_addr(ins.rs2_is_reg, ins.rs2), rs2_rdata=b,
                pc_rdata=pc, pc_wdata=(pc + 4) & MASK32)
    if k == "ILLEGAL":
        return replace(state, pc=(pc + 4) & MASK32), RvfiRecord(**info, trap=1)
    if k == "EBREAK":
        return replace(state, pc=(pc + 4) & MASK32), RvfiRecord(**info, halt=1)

    mem = state.mem
    rd_value = None
    next_pc = (pc + 4) & MASK32
    if k in ACCESS_SIZE:
        size = ACCESS_SIZE[k]
        addr = (a + ins.imm) & MASK32
        if addr % size or addr + size > len(mem):
            return replace(state, pc=next_pc), RvfiRecord(**info, trap=1)
        base, off = addr & ~3, addr & 3
        lane_mask = ((1 << size) - 1) << off
        word = state.load_word(base)
        info.update(mem_addr=base)
        if ins.is_load:
            raw = (word >> (8 * off)) & ((1 << (8 * size)) - 1)
            rd_value = raw if k in ("LBU", "LHU", "LW") else sext(raw, 8 * size) & MASK32
            info.update(mem_rmask=lane_mask, mem_rdata=word & byte_lanes(lane_mask))
        else:
            data = (b << (8 * off)) & byte_lanes(lane_mask)
            info.update(mem_wmask=lane_mask, mem_wdata=data)
            mem = mem[:addr] + (b & ((1 << (8 * size)) - 1)).to_bytes(size, "little") + mem[addr + size:]
    elif k in BRANCHES or k in JUMPS:
        if k == "JALR":
            target = (a + ins.imm) & MASK32 & ~1
        else:
            target = (pc + ins.imm) & MASK32
        taken = k in JUMPS or _branch_taken(k, a, b)
        if taken:
            if target % 4:
                return replace(state, pc=next_pc), RvfiRecord(**info, trap=1)
            next_pc = target
        if k in JUMPS:
            rd_value = (pc + 4) & MASK32
        info.update(pc_wdata=next_pc)
    elif k == "LUI":
        rd_value = ins.imm & MASK32
    elif k == "AUIPC":
        rd_value = (pc + ins.imm) & MASK32
    else:
        operand = ins.imm & MASK32 if k in IMM_OPS else b
        rd_value = alu(ALU_OP[k], a, operand)

    if rd_value is not None and ins.rd:
        regs = regs[:ins.rd] + (rd_value,) + regs[ins.rd + 1:]
        info.update(rd_addr=ins.rd, rd_wdata=rd_value)
    return ArchState(next_pc, regs, mem), RvfiRecord(**info)


def _branch_taken(kind: str, a: int, b: int) -> bool:
    if kind == "BEQ":
        return a == b
    if kind == "BNE":
        return a != b
    if kind == "BLT":
        return sext(a, 32) < sext(b, 32)
    if kind == "BGE":
        return sext(a, 32) >= sext(b, 32)
    if kind == "BLTU":
        return a < b
    return a >= b


ALU_OP = {k: k for k in REG_OPS} | {
    "ADDI": "ADD", "SLTI": "SLT", "SLTIU": "SLTU", "XORI": "XOR", "ORI": "OR",
    "ANDI": "AND", "SLLI": "SLL", "SRLI": "SRL", "SRAI": "SRA",
}


def alu(op: str, a: int, b: int) -> int:
    """Register-register ALU semantics on 32-bit unsigned operands."""
    sh = b & 0x1F
    if op == "ADD":
        return (a + b) & MASK32
    if op == "SUB":
        return (a - b) & MASK32
    if op == "SLL":
        return (a << sh) & MASK32
    if op == "SLT":
        return int(sext(a, 32) < sext(b, 32))
    if op == "SLTU":
        return int(a < b)
    if op == "XOR":
        return a ^ b
    if op == "SRL":
        return a >> sh
    if op == "SRA":
        return (sext(a, 32) >> sh) & MASK32
    if op == "OR":
        return a | b
    if op == "AND":
        return a & b
    raise ValueError(op)


def run_golden(image: Sequence[int] | bytes, mem_size: int = 1 << 16, max_steps: int = 100_000) -> list[RvfiRecord]:
    """Run from reset until EBREAK (inclusive) or ``max_steps``."""
    state = ArchState.reset(image, mem_size)
    out = []
    for order in range(max_steps):
        state, info = golden_step(state, order)
        out.append(info)
        if info.halt:
            break
    return out
