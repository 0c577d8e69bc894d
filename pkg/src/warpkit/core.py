"""Pipelined RV32I core: graph construction and cycle-accurate simulation.

:func:`build_core` describes the core once over virtual stages.  The same
micro-architecture is also implemented directly by :func:`simulate`, a
transaction-level model that is much faster than interpreting the elaborated
graph; :func:`simulate_graph` runs the graph itself, and the two are required
to produce identical retirement records on every cycle.

Pipeline behaviour shared by both:

* One transaction enters NEXT_PC every cycle.  It is either a fetch or, when
  a load's data returns, a pseudo-load-return, which wins over fetch.
* Squashing uses epochs.  Each transaction records three epoch counters at
  NEXT_PC; a redirect from REG_RD, EXECUTE or RESULT bumps the matching
  counter, which invalidates every younger transaction still upstream.
* A scoreboard bit is set per destination register at REG_RD and cleared at
  REG_WR (or by the load return).  A reader of a busy register replays: it
  redirects fetch to itself and tries again.
* Loads issue at RESULT, and their data re-enters at NEXT_PC
  ``mem_latency + 1`` cycles later, together with the recirculated fields of
  the original load.
"""
from __future__ import annotations

import enum
import functools
from collections import deque
from dataclasses import dataclass, replace
from typing import IO, Iterable, Sequence

from . import isa
from .harness import (ORIGINAL_LD_FIELDS, RvfiRecord, RvfiTrace, byte_lanes,
                      load_return_record, rs_addr)
from .stagegraph import (FIVE_STAGE, Delay, DesignGraph, Stage, StageMap,
                         elaborate, eval_cycle, recirculate_bundle, validate_stage_map)

MASK32 = 0xFFFF_FFFF
EPOCH_BITS = 4
OUTSTANDING_BITS = 16


class Mutation(enum.Enum):
    """Deliberate defects, applied by :func:`simulate` only, to test the checker."""

    NO_SCOREBOARD = "no_scoreboard"
    SHORT_SQUASH = "short_squash"
    RECIRC_EARLY = "recirc_early"
    RECIRC_LATE = "recirc_late"
    RD_WDATA_STALE = "rd_wdata_stale"
    RS1_NOT_ZEROED = "rs1_not_zeroed"
    LOAD_ORDER_FROM_PIPE = "load_order_from_pipe"


@dataclass(frozen=True)
class CoreConfig:
    stage_map: StageMap = FIVE_STAGE
    mem_latency: int = 1
    mem_size: int = 1 << 16
    max_pending_loads: int = 4
    max_cycles: int = 100_000
    mutations: frozenset = frozenset()

    def __post_init__(self):
        validate_stage_map(self.stage_map)
        if self.mem_latency < 1:
            raise ValueError(f"mem_latency must be at least 1, got {self.mem_latency}")
        if self.mem_size <= 0 or self.mem_size % 4 or self.mem_size >= 1 << 32:
            raise ValueError(f"mem_size must be a positive multiple of 4 below 2**32, got {self.mem_size}")
        if not 1 <= self.max_pending_loads < 1 << (OUTSTANDING_BITS - 1):
            raise ValueError(f"max_pending_loads out of range: {self.max_pending_loads}")
        if self.max_cycles < 1:
            raise ValueError(f"max_cycles must be positive, got {self.max_cycles}")
        object.__setattr__(self, "mutations", frozenset(Mutation(m) for m in self.mutations))


@dataclass
class SimStats:
    cycles: int = 0
    retirements: int = 0
    squashed: int = 0
    stall_cycles: int = 0
    load_returns: int = 0
    halted: bool = False


@dataclass
class PendingLoad:
    """A load between issue and the injection of its pseudo-load-return."""

    order: int
    original: dict
    rd: int
    addr: int
    f3: int
    countdown: int


def load_return_delay(config: CoreConfig) -> Delay:
    """The recirculation delay as a map-independent :class:`Delay`."""
    return Delay(config.mem_latency + 1, (Stage.NEXT_PC, Stage.RESULT))


def load_return_alignment(config: CoreConfig) -> int:
    """Cycles between a load at a stage and its pseudo-load-return at that stage."""
    return load_return_delay(config).resolve(config.stage_map)


# --------------------------------------------------------------------------
# Memory images

class ImageFormatError(ValueError):
    pass


def read_image(src: IO[str] | Iterable[str]) -> list[int]:
    words = []
    for lineno, line in enumerate(src, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if len(text) != 8:
            raise ImageFormatError(f"line {lineno}: expected 8 hex digits, got {text!r}")
        try:
            words.append(int(text, 16))
        except ValueError:
            raise ImageFormatError(f"line {lineno}: not a hex word: {text!r}") from None
    return words


def write_image(words: Iterable[int], out: IO[str]) -> None:
    for w in words:
        out.write(f"{w & MASK32:08x}\n")


# --------------------------------------------------------------------------
# Graph construction

LD_BUNDLE_FIELDS = ORIGINAL_LD_FIELDS + ("valid_ld", "ld_word", "ld_f3", "ld_shift")
_LD_WIDTHS = {
    "order": 64, "insn": 32, "pc_rdata": 32, "pc_wdata": 32, "rs1_addr": 5, "rs1_is_reg": 1,
    "rs1_rdata": 32, "rs2_addr": 5, "rs2_is_reg": 1, "rs2_rdata": 32, "rd_addr": 5,
    "mem_addr": 32, "mem_rmask": 4, "valid_ld": 1, "ld_word": 32, "ld_f3": 3, "ld_shift": 2,
}


def build_core(config: CoreConfig) -> DesignGraph:
    """Describe the core over virtual stages.  The stage map is not consulted."""
    g = DesignGraph("warpkit_core")
    g.regfile("rf", 32, 32)
    g.memory("mem", config.mem_size)
    S = g.signal

    # Every register takes its next value from a single stage, so no value is
    # ever staged into next-state logic.  Redirect requests are registered and
    # arbitrated at NEXT_PC on the following cycle.
    with g.at(Stage.NEXT_PC):
        pc_prev_r = g.reg("pc_prev_r", 32)
        fetched_prev_r = g.reg("fetched_prev_r", 1)
        fetch_en_prev_r = g.reg("fetch_en_prev_r", 1, init=1)
        replay_res_r = g.reg("replay_res_r", 1)
        replay_res_pc_r = g.reg("replay_res_pc_r", 32)
        redirect_ex_r = g.reg("redirect_ex_r", 1)
        stop_fetch_r = g.reg("stop_fetch_r", 1)
        target_ex_r = g.reg("target_ex_r", 32)
        replay_rd_r = g.reg("replay_rd_r", 1)
        replay_rd_pc_r = g.reg("replay_rd_pc_r", 32)
        ep_rd_r = g.reg("ep_rd_r", EPOCH_BITS)
        ep_ex_r = g.reg("ep_ex_r", EPOCH_BITS)
        ep_res_r = g.reg("ep_res_r", EPOCH_BITS)
        # scoreboard bit r is set_tog[r] ^ clr_tog[r]
        set_tog_r = g.reg("busy_set_r", 32)
        clr_tog_r = g.reg("busy_clr_r", 32)
        order_r = g.reg("order_r", 64)
        issued_r = g.reg("issued_r", OUTSTANDING_BITS)
        returned_r = g.reg("returned_r", OUTSTANDING_BITS)

    # the load bundle is produced at RESULT but its feedback is declared first
    with g.at(Stage.RESULT):
        ld_src = {f: g.forward(_LD_WIDTHS[f]) for f in LD_BUNDLE_FIELDS}
        for f, w in ld_src.items():
            S(f"ld.{f}", w)
        ld_bundle = g.bundle("ld", [f"ld.{f}" for f in LD_BUNDLE_FIELDS])
    original = recirculate_bundle(g, ld_bundle, load_return_delay(config),
                                  target=Stage.NEXT_PC, name="original_ld")
    g.bundles["original_ld"] = original

    def orig(f):
        return g.wire(original[f].node)

    with g.at(Stage.NEXT_PC):
        returning = S("returning_ld", g.buf(orig("valid_ld")))
        one1, zero1 = g.const(1, 1), g.const(0, 1)
        fetch_en = g.mux(replay_res_r, one1,
                         g.mux(stop_fetch_r, zero1,
                               g.mux(redirect_ex_r | replay_rd_r, one1, fetch_en_prev_r)))
        fetched = S("fetched", ~returning & fetch_en)
        sequential = g.mux(fetched_prev_r, pc_prev_r + 4, pc_prev_r)
        pc = S("pc", g.mux(replay_res_r, replay_res_pc_r,
                           g.mux(redirect_ex_r, g.mux(stop_fetch_r, pc_prev_r, target_ex_r),
                                 g.mux(replay_rd_r, replay_rd_pc_r, sequential))))
        g.connect(pc_prev_r, pc)
        g.connect(fetched_prev_r, fetched)
        g.connect(fetch_en_prev_r, fetch_en)
        g.connect(returned_r, returned_r + returning.zext(OUTSTANDING_BITS))
        tx_ep_rd = g.buf(ep_rd_r)
        tx_ep_ex = g.buf(ep_ex_r)
        tx_ep_res = g.buf(ep_res_r)

    with g.at(Stage.FETCH):
        insn = S("insn", g.mem_read("mem", pc))

    with g.at(Stage.DECODE):
        opcode = insn[6:0]
        rd = S("rd", insn[11:7])
        f3 = S("f3", insn[14:12])
        rs1 = S("rs1", insn[19:15])
        rs2 = S("rs2", insn[24:20])
        f7 = insn[31:25]
        f3_is = [f3.eq(i) for i in range(8)]
        f7_zero = f7.eq(0)
        f7_alt = f7.eq(0x20)
        is_lui = S("is_lui", opcode.eq(isa.OP_LUI))
        is_auipc = S("is_auipc", opcode.eq(isa.OP_AUIPC))
        is_jal = S("is_jal", opcode.eq(isa.OP_JAL))
        is_jalr = S("is_jalr", opcode.eq(isa.OP_JALR) & f3_is[0])
        is_branch = S("is_branch", opcode.eq(isa.OP_BRANCH) & ~(f3_is[2] | f3_is[3]))
        is_load = S("is_load", opcode.eq(isa.OP_LOAD)
                    & (f3_is[0] | f3_is[1] | f3_is[2] | f3_is[4] | f3_is[5]))
        is_store = S("is_store", opcode.eq(isa.OP_STORE) & (f3_is[0] | f3_is[1] | f3_is[2]))
        shift_ok = (f3_is[1] & f7_zero) | (f3_is[5] & (f7_zero | f7_alt))
        is_opimm = S("is_opimm", opcode.eq(isa.OP_IMM) & ((~(f3_is[1] | f3_is[5])) | shift_ok))
        is_op = S("is_op", opcode.eq(isa.OP_REG) & (f7_zero | (f7_alt & (f3_is[0] | f3_is[5]))))
        is_ebreak = S("is_ebreak", insn.eq(isa.EBREAK_WORD))
        known = is_lui | is_auipc | is_jal | is_jalr | is_branch | is_load | is_store \
            | is_opimm | is_op | is_ebreak
        S("illegal", ~known)
        S("rs1_is_reg", is_jalr | is_branch | is_load | is_store | is_opimm | is_op)
        S("rs2_is_reg", is_branch | is_store | is_op)
        S("writes_rd", is_lui | is_auipc | is_jal | is_jalr | is_load | is_opimm | is_op)
        zero1 = g.const(0, 1)
        S("i_imm", insn[31:20].sext(32))
        S("s_imm", g.cat(insn[31:25], insn[11:7]).sext(32))
        S("b_imm", g.cat(insn[31], insn[7], insn[30:25], insn[11:8], zero1).sext(32))
        S("u_imm", g.cat(insn[31:12], g.const(0, 12)))
        S("j_imm", g.cat(insn[31], insn[19:12], insn[20], insn[30:21], zero1).sext(32))
    s = g.sig

    with g.at(Stage.REG_RD):
        epochs_ok = tx_ep_rd.eq(ep_rd_r) & tx_ep_ex.eq(ep_ex_r) & tx_ep_res.eq(ep_res_r)
        valid_rd = fetched & epochs_ok
        S("rs1_rdata", g.mux(s("rs1_is_reg"), g.rf_read("rf", rs1), 0))
        S("rs2_rdata", g.mux(s("rs2_is_reg"), g.rf_read("rf", rs2), 0))
        busy_r = set_tog_r ^ clr_tog_r
        busy_rs1 = (busy_r >> rs1)[0]
        busy_rs2 = (busy_r >> rs2)[0]
        busy_rd = (busy_r >> rd)[0]
        hazard = (s("rs1_is_reg") & busy_rs1) | (s("rs2_is_reg") & busy_rs2) | (s("writes_rd") & busy_rd)
        replay_rd = S("replay_rd", valid_rd & hazard)
        go = S("go", valid_rd & ~hazard)
        set_busy = S("set_busy", go & s("writes_rd") & rd.ne(0))
        set_mask = g.mux(set_busy, g.const(1, 32) << rd, 0)
        g.connect(set_tog_r, set_tog_r ^ set_mask)
        g.connect(replay_rd_r, replay_rd)
        g.connect(replay_rd_pc_r, g.buf(pc))
        g.connect(ep_rd_r, ep_rd_r + replay_rd.zext(EPOCH_BITS))

    with g.at(Stage.EXECUTE):
        ex_valid = S("ex_valid", go & tx_ep_ex.eq(ep_ex_r) & tx_ep_res.eq(ep_res_r))
        a = s("rs1_rdata")
        b_reg = s("rs2_rdata")
        b = g.mux(is_op, b_reg, s("i_imm"))
        shamt = b[4:0]
        alt = insn[30]
        add_sub = g.mux(is_op & alt, a - b, a + b)
        shift_r = g.mux(alt, a.sra(shamt), a >> shamt)
        by_f3 = [add_sub, a << shamt, a.lt(b).zext(32), a.ltu(b).zext(32),
                 a ^ b, shift_r, a | b, a & b]
        alu = _select(g, f3, by_f3)
        S("alu", alu)

        base_cond = g.mux(f3[2], g.mux(f3[1], a.ltu(b_reg), a.lt(b_reg)), a.eq(b_reg))
        cond = base_cond ^ f3[0]
        jump = is_jal | is_jalr
        taken = S("taken", jump | (is_branch & cond))
        jalr_target = (a + s("i_imm")) & 0xFFFF_FFFE
        target = S("target", g.mux(is_jalr, jalr_target,
                                   pc + g.mux(is_jal, s("j_imm"), s("b_imm"))))

        is_mem = is_load | is_store
        addr = S("mem_addr", a + g.mux(is_store, s("s_imm"), s("i_imm")))
        size_code = f3[1:0]
        misaligned = (size_code.eq(1) & addr[0]) | (size_code.eq(2) & addr[1:0].ne(0))
        aligned = S("mem_addr_aligned", addr & 0xFFFF_FFFC)
        out_of_range = ~aligned.ltu(config.mem_size)
        trap = S("trap", s("illegal") | (is_mem & (misaligned | out_of_range))
                 | (taken & target[1:0].ne(0)))
        good_jump = taken & ~trap
        S("pc_wdata", g.mux(good_jump, target, pc + 4))
        off = addr[1:0]
        base_mask = g.mux(size_code.eq(0), g.const(0b0001, 4),
                          g.mux(size_code.eq(1), g.const(0b0011, 4), g.const(0b1111, 4)))
        mask = S("wmask", base_mask << g.cat(g.const(0, 3), off))
        byte_shift = g.cat(off, g.const(0, 3))
        S("store_lane", b_reg << byte_shift)
        redirect_ex = ex_valid & (good_jump | is_ebreak)
        stop_fetch = ex_valid & is_ebreak
        g.connect(redirect_ex_r, redirect_ex)
        g.connect(stop_fetch_r, stop_fetch)
        g.connect(target_ex_r, target)
        g.connect(ep_ex_r, ep_ex_r + redirect_ex.zext(EPOCH_BITS))

    with g.at(Stage.RESULT):
        res_valid = S("res_valid", ex_valid & tx_ep_res.eq(ep_res_r))
        ld_ready = res_valid & is_load & ~trap
        outstanding = issued_r - returned_r
        replay_res = S("replay_res", ld_ready & ~outstanding.ltu(config.max_pending_loads))
        commit = S("commit", res_valid & ~replay_res)
        issue = S("issue", ld_ready & ~replay_res)
        order = S("order", g.buf(order_r))
        g.connect(replay_res_r, replay_res)
        g.connect(replay_res_pc_r, g.buf(pc))
        g.connect(ep_res_r, ep_res_r + replay_res.zext(EPOCH_BITS))
        g.connect(order_r, order_r + commit.zext(64))
        g.connect(issued_r, issued_r + issue.zext(OUTSTANDING_BITS))
        ld_word = g.mem_read("mem", aligned)
        g.mem_write("mem", commit & is_store & ~trap, aligned, s("store_lane"), mask)
        sources = {
            "order": order, "insn": insn, "pc_rdata": pc, "pc_wdata": s("pc_wdata"),
            "rs1_addr": rs1, "rs1_is_reg": s("rs1_is_reg"), "rs1_rdata": a,
            "rs2_addr": rs2, "rs2_is_reg": s("rs2_is_reg"), "rs2_rdata": b_reg,
            "rd_addr": rd, "mem_addr": aligned, "mem_rmask": mask,
            "valid_ld": issue, "ld_word": ld_word, "ld_f3": f3, "ld_shift": off,
        }
        for f in LD_BUNDLE_FIELDS:
            g.assign(ld_src[f], g.buf(sources[f]))

        shifted = orig("ld_word") >> g.cat(orig("ld_shift"), g.const(0, 3))
        ld_f3 = orig("ld_f3")
        byte, half = shifted[7:0], shifted[15:0]
        ld_data = _select(g, ld_f3, [byte.sext(32), half.sext(32), shifted, shifted,
                                     byte.zext(32), half.zext(32), shifted, shifted])
        link = pc + 4
        value = g.mux(jump, link, g.mux(is_lui, s("u_imm"),
                                        g.mux(is_auipc, pc + s("u_imm"), alu)))
        result = S("result", g.mux(returning, ld_data, value))

    with g.at(Stage.REG_WR):
        ret_rd = orig("rd_addr")
        wr_pipe = commit & s("writes_rd") & ~trap & ~is_load
        g.rf_write("rf", (wr_pipe & rd.ne(0)) | (returning & ret_rd.ne(0)),
                   g.mux(returning, ret_rd, rd), result)
        one = g.const(1, 32)
        clr_mask = g.mux(set_busy & ~issue, one << rd, 0) \
            | g.mux(returning & ret_rd.ne(0), one << ret_rd, 0)
        g.connect(clr_tog_r, clr_tog_r ^ clr_mask)
    return g


def _select(g: DesignGraph, sel, choices):
    """Binary mux tree: ``choices[sel]``."""
    level = list(choices)
    bit = 0
    while len(level) > 1:
        level = [g.mux(sel[bit], level[i + 1], level[i]) for i in range(0, len(level), 2)]
        bit += 1
    return level[0]


# --------------------------------------------------------------------------
# Fast transaction-level simulation

@functools.lru_cache(maxsize=8192)
def _decoded(word: int):
    ins = isa.decode(word)
    return (ins, ins.rs1_is_reg, ins.rs2_is_reg, ins.writes_rd, ins.is_load, ins.is_store)


_MASK_BY_SIZE = {1: 0b0001, 2: 0b0011, 4: 0b1111}


class _Tx:
    __slots__ = (
        "pc", "ep_rd", "ep_ex", "ep_res", "fetched", "returning", "ret", "harness_ret",
        "insn", "ins", "rs1_is_reg", "rs2_is_reg", "writes_rd", "is_load", "is_store",
        "rs1v", "rs2v", "go", "set_busy", "ex_valid", "wild_ex", "trap", "taken", "target",
        "pc_wdata", "addr", "mask", "store_lane", "res_valid", "commit", "issue", "order",
        "result",
    )

    def __init__(self):
        self.go = self.set_busy = self.ex_valid = self.res_valid = False
        self.commit = self.issue = self.wild_ex = False
        self.trap = self.taken = False
        self.ret = self.harness_ret = None
        self.ins = None
        self.result = 0


def _zero_bundle():
    return dict.fromkeys(LD_BUNDLE_FIELDS, 0)


def simulate(config: CoreConfig, image: Sequence[int] | bytes) -> tuple[RvfiTrace, SimStats]:
    """Run ``image`` from reset until the halting instruction retires and drains."""
    mutations = config.mutations
    phys = config.stage_map.physical
    depth = max(phys)
    p_rd, p_ex, p_res, p_wr = phys[Stage.REG_RD], phys[Stage.EXECUTE], phys[Stage.RESULT], phys[Stage.REG_WR]
    p_fetch, p_dec = phys[Stage.FETCH], phys[Stage.DECODE]
    mem_size = config.mem_size
    mem = bytearray(isa.image_bytes(image, mem_size))
    regs = [0] * 32
    latency = config.mem_latency
    tap = latency + 1
    harness_tap = tap - (Mutation.RECIRC_EARLY in mutations) + (Mutation.RECIRC_LATE in mutations)
    history: deque[dict] = deque([_zero_bundle()] * (tap + 2), maxlen=tap + 2)
    no_scoreboard = Mutation.NO_SCOREBOARD in mutations
    short_squash = Mutation.SHORT_SQUASH in mutations
    stale_wdata = Mutation.RD_WDATA_STALE in mutations
    raw_rs1 = Mutation.RS1_NOT_ZEROED in mutations
    order_from_pipe = Mutation.LOAD_ORDER_FROM_PIPE in mutations

    pc_r, fetch_en = 0, True
    ep_rd = ep_ex = ep_res = 0
    busy = 0
    order_r = 0
    pending: deque[PendingLoad] = deque()
    slots: list[_Tx | None] = [None] * (depth + 1)
    prev_result = 0
    records: list[RvfiRecord] = []
    stats = SimStats()
    halted = finished = False
    emask = (1 << EPOCH_BITS) - 1

    for cycle in range(config.max_cycles):
        # NEXT_PC
        tx = _Tx()
        head = pending[0] if pending else None
        returning = head is not None and head.countdown == 0
        tx.returning = returning
        if returning:
            tx.ret = head.original
            tx.harness_ret = history[-harness_tap] if harness_tap != tap else head.original
        tx.fetched = fetched = not returning and fetch_en
        tx.pc = pc_r
        tx.ep_rd, tx.ep_ex, tx.ep_res = ep_rd, ep_ex, ep_res
        slots[0] = tx

        # FETCH and DECODE
        t = slots[p_fetch]
        if t is not None:
            base = (t.pc & ~3) % mem_size
            t.insn = int.from_bytes(mem[base:base + 4], "little")
        t = slots[p_dec]
        if t is not None:
            (t.ins, t.rs1_is_reg, t.rs2_is_reg, t.writes_rd, t.is_load, t.is_store) = _decoded(t.insn)

        # REG_RD
        replay_rd = False
        set_mask = 0
        t = slots[p_rd]
        if t is not None:
            ins = t.ins
            t.rs1v = regs[ins.rs1] if t.rs1_is_reg else 0
            t.rs2v = regs[ins.rs2] if t.rs2_is_reg else 0
            if t.fetched and t.ep_rd == ep_rd and t.ep_ex == ep_ex and t.ep_res == ep_res:
                hazard = not no_scoreboard and (
                    (t.rs1_is_reg and busy >> ins.rs1 & 1)
                    or (t.rs2_is_reg and busy >> ins.rs2 & 1)
                    or (t.writes_rd and busy >> ins.rd & 1))
                if hazard:
                    replay_rd = True
                    stats.stall_cycles += 1
                else:
                    t.go = True
                    if t.writes_rd and ins.rd:
                        t.set_busy = True
                        set_mask = 1 << ins.rd
        replay_rd_pc = t.pc if replay_rd else 0

        # EXECUTE
        redirect_ex = stop_fetch = False
        t = slots[p_ex]
        ex_target = 0
        if t is not None:
            _execute(t, mem_size)
            if t.go and (t.ep_ex == ep_ex or t.wild_ex) and t.ep_res == ep_res:
                t.ex_valid = True
                if t.ins.kind == "EBREAK":
                    redirect_ex = stop_fetch = True
                elif t.taken and not t.trap:
                    redirect_ex = True
                    ex_target = t.target

        # RESULT
        replay_res = issue = False
        t = slots[p_res]
        bundle = _zero_bundle()
        if t is not None:
            ins = t.ins
            if t.ex_valid and t.ep_res == ep_res:
                t.res_valid = True
                if t.is_load and not t.trap:
                    if len(pending) >= config.max_pending_loads:
                        replay_res = True
                        stats.stall_cycles += 1
                    else:
                        issue = True
                if not replay_res:
                    t.commit = True
                    t.order = order_r
            t.issue = issue
            if t.is_load or issue:
                bundle = _ld_bundle(t, mem, mem_size, issue, order_r)
            if t.commit and t.is_store and not t.trap:
                size = isa.ACCESS_SIZE[ins.kind]
                a = t.addr
                mem[a:a + size] = (t.rs2v & ((1 << (8 * size)) - 1)).to_bytes(size, "little")
            t.result = _result(t)
        history.append(bundle)
        if issue:
            pending.append(PendingLoad(order_r, bundle, t.ins.rd, t.addr, bundle["ld_f3"], latency + 1))
        replay_res_pc = t.pc if replay_res else 0
        committed = t is not None and t.commit

        # REG_WR
        clr_mask = 0
        t = slots[p_wr]
        rec = None
        if t is not None:
            if t.returning:
                o = t.ret
                rd = o["rd_addr"]
                if rd:
                    regs[rd] = t.result
                clr_mask |= 1 << rd
                stats.load_returns += 1
                wdata = prev_result if stale_wdata else t.result
                rec = load_return_record(t.harness_ret, wdata, o["ld_word"], cycle)
                if order_from_pipe:
                    rec = replace(rec, order=order_r)
            else:
                if t.set_busy and not t.issue:
                    clr_mask |= 1 << t.ins.rd
                if t.commit:
                    if t.writes_rd and not t.trap and not t.is_load and t.ins.rd:
                        regs[t.ins.rd] = t.result
                    if not (t.is_load and not t.trap):
                        rec = _pipe_record(t, cycle, prev_result if stale_wdata else t.result, raw_rs1)
                elif t.fetched:
                    stats.squashed += 1
            prev_result = t.result
        if rec is not None:
            records.append(rec)
            if rec.halt:
                halted = True

        # global state update
        if replay_res:
            pc_r, fetch_en = replay_res_pc, True
        elif redirect_ex:
            if stop_fetch:
                fetch_en = False
            else:
                pc_r, fetch_en = ex_target, True
        elif replay_rd:
            pc_r, fetch_en = replay_rd_pc, True
        elif fetched:
            pc_r = (pc_r + 4) & MASK32
        if redirect_ex:
            ep_ex = (ep_ex + 1) & emask
            if short_squash and p_ex >= 1 and slots[p_ex - 1] is not None:
                slots[p_ex - 1].wild_ex = True
        ep_rd = (ep_rd + replay_rd) & emask
        ep_res = (ep_res + replay_res) & emask
        busy = (busy | set_mask) & ~clr_mask
        order_r += committed
        if returning:
            pending.popleft()
        for p in pending:
            if p.countdown:
                p.countdown -= 1
        # mirror the hardware shift of the pipeline
        slots = [None] + slots[:-1]
        stats.cycles = cycle + 1
        in_flight = any(s is not None and s.returning for s in slots[1:p_wr + 1])
        if halted and not pending and not in_flight:
            finished = True
            break

    stats.retirements = len(records)
    stats.halted = halted
    return RvfiTrace(records, complete=finished), stats


def _execute(t: _Tx, mem_size: int) -> None:
    ins = t.ins
    k = ins.kind
    a, b = t.rs1v, t.rs2v
    pc = t.pc
    t.trap = k == "ILLEGAL"
    t.taken = False
    t.target = 0
    t.addr = 0
    t.mask = 0
    t.store_lane = 0
    if k in isa.ACCESS_SIZE:
        size = isa.ACCESS_SIZE[k]
        addr = (a + ins.imm) & MASK32
        t.addr = addr
        off = addr & 3
        t.mask = (_MASK_BY_SIZE[size] << off) & 0xF
        t.store_lane = (b << (8 * off)) & MASK32
        if addr % size or (addr & ~3) >= mem_size:
            t.trap = True
    elif k in isa.BRANCHES or k in isa.JUMPS:
        if k == "JALR":
            target = (a + ins.imm) & MASK32 & ~1
        else:
            target = (pc + ins.imm) & MASK32
        t.target = target
        t.taken = k in isa.JUMPS or isa._branch_taken(k, a, b)
        if t.taken and target & 3:
            t.trap = True
    t.pc_wdata = t.target if t.taken and not t.trap else (pc + 4) & MASK32


def _ld_bundle(t: _Tx, mem: bytearray, mem_size: int, issue: bool, order_r: int) -> dict:
    ins = t.ins
    aligned = t.addr & ~3
    base = aligned % mem_size
    return {
        "order": order_r, "insn": t.insn, "pc_rdata": t.pc, "pc_wdata": t.pc_wdata,
        "rs1_addr": ins.rs1, "rs1_is_reg": int(t.rs1_is_reg), "rs1_rdata": t.rs1v,
        "rs2_addr": ins.rs2, "rs2_is_reg": int(t.rs2_is_reg), "rs2_rdata": t.rs2v,
        "rd_addr": ins.rd, "mem_addr": aligned, "mem_rmask": t.mask,
        "valid_ld": int(issue), "ld_word": int.from_bytes(mem[base:base + 4], "little"),
        "ld_f3": (t.insn >> 12) & 7, "ld_shift": t.addr & 3,
    }


def _load_value(o: dict) -> int:
    word = o["ld_word"] >> (8 * o["ld_shift"])
    f3 = o["ld_f3"]
    if f3 == 0:
        return isa.sext(word, 8) & MASK32
    if f3 == 1:
        return isa.sext(word, 16) & MASK32
    if f3 == 4:
        return word & 0xFF
    if f3 == 5:
        return word & 0xFFFF
    return word


def _result(t: _Tx) -> int:
    if t.returning:
        return _load_value(t.ret)
    ins = t.ins
    k = ins.kind
    if k in isa.JUMPS:
        return (t.pc + 4) & MASK32
    if k == "LUI":
        return ins.imm & MASK32
    if k == "AUIPC":
        return (t.pc + ins.imm) & MASK32
    if k in isa.ALU_OP:
        operand = t.rs2v if k in isa.REG_OPS else ins.imm & MASK32
        return isa.alu(isa.ALU_OP[k], t.rs1v, operand)
    return 0


def _pipe_record(t: _Tx, cycle: int, rd_value: int, raw_rs1: bool) -> RvfiRecord:
    ins = t.ins
    trap = t.trap
    rd = ins.rd if t.writes_rd and not trap else 0
    store = t.is_store and not trap
    wmask = t.mask if store else 0
    return RvfiRecord(
        order=t.order, insn=t.insn, trap=int(trap), halt=int(ins.kind == "EBREAK"),
        rs1_addr=ins.rs1 if raw_rs1 else rs_addr(t.rs1_is_reg, ins.rs1),
        rs2_addr=rs_addr(t.rs2_is_reg, ins.rs2),
        rs1_rdata=t.rs1v, rs2_rdata=t.rs2v,
        rd_addr=rd, rd_wdata=rd_value if rd else 0,
        pc_rdata=t.pc, pc_wdata=t.pc_wdata,
        mem_addr=t.addr & ~3 if store else 0, mem_wmask=wmask,
        mem_wdata=t.store_lane & byte_lanes(wmask) if store else 0,
        cycle=cycle,
    )


# --------------------------------------------------------------------------
# Running the elaborated graph

def build_design(config: CoreConfig):
    """Build the core, attach the harness, and elaborate under the config's map."""
    from .harness import attach_rvfi

    return elaborate(attach_rvfi(build_core(config)), config.stage_map)


def simulate_graph(config: CoreConfig, image: Sequence[int] | bytes,
                   design=None) -> tuple[RvfiTrace, SimStats]:
    """Run the elaborated graph through the IR interpreter (slow; reference)."""
    from .harness import extract_record

    design = design or build_design(config)
    state = design.initial_state({"mem": isa.image_bytes(image, config.mem_size)})
    g = design.graph
    ret_node = g.signals["returning_ld"].node
    chain = design.staging.get(ret_node, 0)
    p_wr = config.stage_map[Stage.REG_WR]
    records = []
    stats = SimStats()
    halted = finished = False
    outstanding = 1
    issued, returned = _reg_id(g, "issued_r"), _reg_id(g, "returned_r")
    for cycle in range(config.max_cycles):
        state, out = eval_cycle(design, state)
        stats.cycles = cycle + 1
        rec = extract_record(out, cycle)
        if rec is not None:
            records.append(rec)
            halted = halted or bool(rec.halt)
        regs = state["regs"]
        outstanding = regs[issued] - regs[returned]
        in_flight = any(state["staging"][(ret_node, k)] for k in range(1, min(chain, p_wr) + 1))
        if halted and outstanding == 0 and not in_flight:
            finished = True
            break
    stats.retirements = len(records)
    stats.halted = halted
    stats.load_returns = sum(1 for r in records if r.mem_rmask)
    return RvfiTrace(records, complete=finished), stats


def _reg_id(g: DesignGraph, name: str) -> int:
    for n in g.nodes:
        if n.op == "reg" and n.attrs[0] == name:
            return n.id
    raise KeyError(name)
