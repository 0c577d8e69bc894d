"""Trace checking against the golden model, random programs, and pair enumeration."""
from __future__ import annotations

import hashlib
import itertools
import json
import random
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from . import isa
from .core import CoreConfig, simulate
from .harness import RvfiRecord, RvfiTrace

VIOLATION_KINDS = (
    "DuplicateOrder", "OrderGap", "InsnMismatch", "Rs1Mismatch", "Rs2Mismatch", "RdMismatch",
    "PcMismatch", "MemMismatch", "X0Nonzero", "TrapMismatch", "HaltMismatch", "IncompleteTrace",
)

# comparison priority: the first differing field names the violation
FIELD_KIND = {
    "insn": "InsnMismatch",
    "pc_rdata": "PcMismatch",
    "trap": "TrapMismatch",
    "intr": "TrapMismatch",
    "halt": "HaltMismatch",
    "rs1_addr": "Rs1Mismatch",
    "rs1_rdata": "Rs1Mismatch",
    "rs2_addr": "Rs2Mismatch",
    "rs2_rdata": "Rs2Mismatch",
    "rd_addr": "RdMismatch",
    "rd_wdata": "RdMismatch",
    "pc_wdata": "PcMismatch",
    "mem_addr": "MemMismatch",
    "mem_rmask": "MemMismatch",
    "mem_wmask": "MemMismatch",
    "mem_rdata": "MemMismatch",
    "mem_wdata": "MemMismatch",
}


@dataclass(frozen=True)
class Violation:
    kind: str
    order: int
    field: str | None = None
    expected: int | None = None
    actual: int | None = None
    cycle: int | None = None
    program: int | None = None
    detail: str = ""

    def __str__(self):
        where = f"order {self.order}"
        if self.program is not None:
            where = f"program {self.program}, {where}"
        if self.cycle is not None:
            where += f", cycle {self.cycle}"
        text = f"{self.kind} at {where}"
        if self.field is not None:
            text += f": {self.field} expected {_hex(self.expected)} got {_hex(self.actual)}"
        if self.detail:
            text += f" ({self.detail})"
        return text

    def to_json(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None and v != ""}


def _hex(v):
    return "-" if v is None else f"{v:#x}"


@dataclass
class CheckReport:
    violations: list[Violation] = field(default_factory=list)
    instructions: int = 0
    programs: int = 0
    failed_programs: int = 0

    @property
    def passed(self) -> bool:
        return not self.violations

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}

    def merge(self, other: "CheckReport") -> "CheckReport":
        self.violations.extend(other.violations)
        self.instructions += other.instructions
        self.programs += other.programs
        self.failed_programs += other.failed_programs
        return self

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"{status}: {self.programs} program(s), {self.instructions} instruction(s) checked"
        if not self.passed:
            counts = Counter(v.kind for v in self.violations)
            text += f", {len(self.violations)} violation(s) in {self.failed_programs} program(s): " + \
                ", ".join(f"{k}={n}" for k, n in sorted(counts.items()))
        return text

    def to_json(self) -> dict:
        return {
            "pass": self.passed,
            "programs": self.programs,
            "instructions": self.instructions,
            "failed_programs": self.failed_programs,
            "violations": [v.to_json() for v in self.violations],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# Trace checking

def check_trace(trace: RvfiTrace | Iterable[RvfiRecord], image: Sequence[int] | bytes,
                mem_size: int = 1 << 16) -> CheckReport:
    """Replay the golden model in order and compare each retirement.

    Records are sorted by order first, so out-of-order presentation is
    irrelevant.  At most one violation is reported per order id; the replay
    always continues from golden state.
    """
    complete = getattr(trace, "complete", True)
    records = sorted(trace, key=lambda r: r.order)
    report = CheckReport(programs=1)
    by_order: dict[int, list[RvfiRecord]] = {}
    for r in records:
        by_order.setdefault(r.order, []).append(r)
    # dense ids: n distinct orders must be exactly 0..n-1
    n = len(by_order)
    for order, recs in by_order.items():
        if len(recs) > 1:
            report.violations.append(Violation("DuplicateOrder", order, cycle=recs[1].cycle,
                                               detail=f"{len(recs)} records"))
    for order in range(n):
        if order not in by_order:
            report.violations.append(Violation("OrderGap", order))

    state = isa.ArchState.reset(image, mem_size)
    golden_halted = False
    for order in range(n):
        if golden_halted:
            r = by_order.get(order, [None])[0]
            report.violations.append(Violation(
                "HaltMismatch", order, cycle=r.cycle if r else None, detail="retired after halt"))
            break
        try:
            state, expected = isa.golden_step(state, order)
        except (isa.PcOutOfRange, isa.PcMisaligned) as exc:
            report.violations.append(Violation("PcMismatch", order, detail=f"golden model: {exc}"))
            break
        golden_halted = bool(expected.halt)
        report.instructions += 1
        recs = by_order.get(order)
        if not recs:
            continue
        if any(r == expected for r in recs):
            continue
        v = _compare(recs[0], expected)
        if v is not None:
            report.violations.append(v)
    if not complete or (n and not golden_halted and not any(r.halt for r in records)) or n == 0:
        report.violations.append(Violation("IncompleteTrace", n, detail="no halt retired"))
    report.failed_programs = int(not report.passed)
    return report


def _compare(actual: RvfiRecord, expected: RvfiRecord) -> Violation | None:
    if actual.rd_addr == 0 and actual.rd_wdata != 0:
        return Violation("X0Nonzero", actual.order, "rd_wdata", 0, actual.rd_wdata, actual.cycle)
    for name, kind in FIELD_KIND.items():
        a, e = getattr(actual, name), getattr(expected, name)
        if a != e:
            return Violation(kind, actual.order, name, e, a, actual.cycle)
    return None


# --------------------------------------------------------------------------
# Random programs

SCRATCH_BASE = 0x8000
BASE_REG = 31
_ALU_KINDS = tuple(sorted(isa.IMM_OPS | isa.REG_OPS))
DEFAULT_WEIGHTS: dict[str, float] = {
    **{k: 2.0 for k in _ALU_KINDS},
    "ADDI": 6.0, "ADD": 4.0, "LUI": 1.5, "AUIPC": 1.0,
    "LW": 5.0, "LH": 2.0, "LHU": 2.0, "LB": 2.0, "LBU": 2.0,
    "SW": 4.0, "SH": 2.0, "SB": 2.0,
    "BEQ": 2.0, "BNE": 2.0, "BLT": 1.5, "BGE": 1.5, "BLTU": 1.5, "BGEU": 1.5,
    "JAL": 1.5, "JALR": 1.0,
}


def program_seed(seed: int, index: int) -> int:
    """Per-program seed derived from a campaign seed and a program index."""
    digest = hashlib.sha256(f"{seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def gen_program(seed: int, length: int = 100, weights: Mapping[str, float] | None = None) -> list[int]:
    """A random terminating program of ``length`` words ending in EBREAK.

    Branches and jumps only go forward, never into the middle of an
    AUIPC/JALR pair.  Stores address a scratch region through a reserved base
    register, so the program text is never overwritten.
    """
    if length < 1:
        raise ValueError("length must be at least 1")
    rng = random.Random(seed)
    weights = dict(DEFAULT_WEIGHTS if weights is None else weights)
    kinds = [k for k, w in weights.items() if w > 0 and k not in ("EBREAK", "ILLEGAL")]
    unknown = set(kinds) - set(isa.KINDS)
    if unknown:
        raise ValueError(f"unknown instruction kinds {sorted(unknown)}")
    kind_weights = [weights[k] for k in kinds]

    def reg():
        return rng.randint(1, 8) if rng.random() < 0.85 else rng.randint(0, 30)

    def src():
        return rng.choice((0, reg(), reg(), reg()))

    # slots hold either a finished word or a (kind, fields, target_index) to patch
    slots: list = []
    body = length - 1
    if body >= 1:
        slots.append(("LUI", dict(rd=BASE_REG, imm=SCRATCH_BASE), None))
    for _ in range(min(3, max(0, body - 1 - 8))):
        slots.append(("ADDI", dict(rd=reg(), rs1=0, imm=rng.randint(-2048, 2047)), None))
    pair_seconds: set[int] = set()
    while len(slots) < body and kinds:
        kind = rng.choices(kinds, kind_weights)[0]
        i = len(slots)
        if kind == "JALR":
            if body - i < 2:
                continue
            tmp = rng.randint(1, 8)  # x0 would make the jump absolute
            slots.append(("AUIPC", dict(rd=tmp, imm=0), None))
            slots.append(("JALR", dict(rd=reg(), rs1=tmp), "pair"))
            pair_seconds.add(i + 1)
            continue
        if kind in isa.BRANCHES:
            slots.append((kind, dict(rs1=src(), rs2=src()), "fwd"))
        elif kind == "JAL":
            slots.append((kind, dict(rd=reg()), "fwd"))
        elif kind in isa.LOADS or kind in isa.STORES:
            size = isa.ACCESS_SIZE[kind]
            offset = rng.randrange(-64, 64, size)
            if rng.random() < 0.04:
                offset += rng.choice((1, 2, 3))
            base = BASE_REG
            fields = dict(rs1=base, imm=offset)
            if kind in isa.LOADS:
                if rng.random() < 0.08:
                    fields["rs1"] = src()
                fields["rd"] = reg()
            else:
                fields["rs2"] = src()
            slots.append((kind, fields, None))
        elif kind in ("LUI", "AUIPC"):
            slots.append((kind, dict(rd=reg(), imm=isa.sext(rng.getrandbits(20) << 12, 32)), None))
        elif kind in isa.SHIFT_IMMS:
            slots.append((kind, dict(rd=reg(), rs1=src(), imm=rng.randint(0, 31)), None))
        elif kind in isa.IMM_OPS:
            imm = rng.randint(-16, 16) if rng.random() < 0.6 else rng.randint(-2048, 2047)
            slots.append((kind, dict(rd=reg(), rs1=src(), imm=imm), None))
        else:
            slots.append((kind, dict(rd=reg(), rs1=src(), rs2=src()), None))
    end = len(slots)  # index of the final EBREAK
    landing = [j for j in range(end + 1) if j not in pair_seconds]

    words = []
    for i, (kind, fields, fix) in enumerate(slots):
        if fix == "fwd":
            fields["imm"] = 4 * (rng.choice([j for j in landing if j > i][:8]) - i)
        elif fix == "pair":
            j = rng.choice([j for j in landing if j > i][:8])
            fields["imm"] = 4 * (j - (i - 1))
        words.append(isa.encode(kind, **fields))
    words.append(isa.EBREAK_WORD)
    return words


# --------------------------------------------------------------------------
# Campaigns

def run_program(config: CoreConfig, image: Sequence[int], index: int | None = None) -> CheckReport:
    trace, _ = simulate(config, image)
    report = check_trace(trace, image, config.mem_size)
    if index is not None:
        report.violations = [_tag(v, index) for v in report.violations]
    return report


def _tag(v: Violation, index: int) -> Violation:
    return Violation(v.kind, v.order, v.field, v.expected, v.actual, v.cycle, index, v.detail)


def _fuzz_one(args) -> CheckReport:
    config, seed, index, length, weights = args
    image = gen_program(program_seed(seed, index), length, weights)
    return run_program(config, image, index)


def fuzz(config: CoreConfig, seed: int, n_programs: int, length: int = 100,
         weights: Mapping[str, float] | None = None, jobs: int = 1,
         max_failures: int | None = None) -> CheckReport:
    """Generate, simulate and check ``n_programs`` programs.

    Results are merged in program order whatever ``jobs`` is.  With
    ``max_failures`` the campaign stops once that many programs have failed.
    """
    report = CheckReport()
    tasks = [(config, seed, i, length, weights) for i in range(n_programs)]
    if jobs > 1 and n_programs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = pool.map(_fuzz_one, tasks, chunksize=max(1, n_programs // (4 * jobs)))
            for r in results:
                report.merge(r)
                if max_failures is not None and report.failed_programs >= max_failures:
                    break
        return report
    for task in tasks:
        report.merge(_fuzz_one(task))
        if max_failures is not None and report.failed_programs >= max_failures:
            break
    return report


class BoundExceeded(ValueError):
    def __init__(self, count: int, bound: int):
        super().__init__(f"{count} sequences exceed the bound of {bound}")
        self.count = count
        self.bound = bound


def _instances(kind: str, slot: int, n_slots: int, regs: Sequence[int], imms: Sequence[int]) -> list[int]:
    kind = kind.upper()
    if kind == "JALR":
        raise ValueError("JALR targets depend on register values; not enumerable by position")
    if kind not in isa.KINDS or kind == "ILLEGAL":
        raise ValueError(f"unknown instruction kind {kind!r}")
    targets = [4 * (j - slot) for j in range(slot + 1, n_slots + 1)]
    if kind == "EBREAK":
        return [isa.EBREAK_WORD]
    if kind in isa.BRANCHES:
        return [isa.encode(kind, rs1=a, rs2=b, imm=t) for a in regs for b in regs for t in targets]
    if kind == "JAL":
        return [isa.encode(kind, rd=d, imm=t) for d in regs for t in targets]
    if kind in ("LUI", "AUIPC"):
        return [isa.encode(kind, rd=d, imm=isa.sext((i & 0xFFFFF) << 12, 32)) for d in regs for i in imms]
    if kind in isa.SHIFT_IMMS:
        return [isa.encode(kind, rd=d, rs1=a, imm=i % 32) for d in regs for a in regs for i in imms]
    if kind in isa.IMM_OPS or kind in isa.LOADS:
        return [isa.encode(kind, rd=d, rs1=a, imm=i) for d in regs for a in regs for i in imms]
    if kind in isa.STORES:
        return [isa.encode(kind, rs1=a, rs2=b, imm=i) for a in regs for b in regs for i in imms]
    return [isa.encode(kind, rd=d, rs1=a, rs2=b) for d in regs for a in regs for b in regs]


def pair_programs(kinds: Iterable[str], regs: Sequence[int] = (1, 2),
                  imms: Sequence[int] = (0, 1, -1), bound: int = 10 ** 6) -> list[list[int]]:
    """Every two-instruction program over the given pools, each followed by EBREAK."""
    kinds = list(kinds)
    first = [w for k in kinds for w in _instances(k, 0, 2, regs, imms)]
    second = [w for k in kinds for w in _instances(k, 1, 2, regs, imms)]
    count = len(first) * len(second)
    if count > bound:
        raise BoundExceeded(count, bound)
    return [[a, b, isa.EBREAK_WORD] for a, b in itertools.product(first, second)]


def exhaustive_pairs(config: CoreConfig, kinds: Iterable[str], regs: Sequence[int] = (1, 2),
                     imms: Sequence[int] = (0, 1, -1), bound: int = 10 ** 6) -> CheckReport:
    report = CheckReport()
    for i, image in enumerate(pair_programs(kinds, regs, imms, bound)):
        report.merge(run_program(config, image, i))
    return report
