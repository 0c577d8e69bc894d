"""RVFI retirement view: record type, trace files, and the verification harness.

The harness is attached to a core graph at the register-write stage.  It
aligns every retirement field there and selects, for pseudo-load-returns,
the fields recirculated from the original load.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from typing import IO, Iterable, Mapping

from .stagegraph import DesignGraph, Stage, align_bundle

FIELD_WIDTHS = {
    "order": 64, "insn": 32, "trap": 1, "halt": 1, "intr": 1,
    "rs1_addr": 5, "rs2_addr": 5, "rs1_rdata": 32, "rs2_rdata": 32,
    "rd_addr": 5, "rd_wdata": 32, "pc_rdata": 32, "pc_wdata": 32,
    "mem_addr": 32, "mem_rmask": 4, "mem_wmask": 4, "mem_rdata": 32, "mem_wdata": 32,
}
TRACE_KEYS = tuple(f"rvfi_{k}" for k in FIELD_WIDTHS)
# valid is carried by record presence but is still one of the interface signals
RVFI_SIGNALS = ("valid",) + tuple(FIELD_WIDTHS)

# Fields recirculated with a load to its pseudo-load-return.  The two is_reg
# flags travel with the register addresses so the zeroing rule can be applied
# after the multiplexer.
ORIGINAL_LD_FIELDS = (
    "order", "insn", "pc_rdata", "pc_wdata", "rs1_addr", "rs1_is_reg", "rs1_rdata",
    "rs2_addr", "rs2_is_reg", "rs2_rdata", "rd_addr", "mem_addr", "mem_rmask",
)


class MalformedTrace(ValueError):
    pass


@dataclass(frozen=True)
class RvfiRecord:
    order: int
    insn: int
    trap: int = 0
    halt: int = 0
    intr: int = 0
    rs1_addr: int = 0
    rs2_addr: int = 0
    rs1_rdata: int = 0
    rs2_rdata: int = 0
    rd_addr: int = 0
    rd_wdata: int = 0
    pc_rdata: int = 0
    pc_wdata: int = 0
    mem_addr: int = 0
    mem_rmask: int = 0
    mem_wmask: int = 0
    mem_rdata: int = 0
    mem_wdata: int = 0
    valid: bool = field(default=True, compare=False)
    cycle: int | None = field(default=None, compare=False)

    def to_json(self) -> dict[str, int]:
        return {f"rvfi_{k}": getattr(self, k) for k in FIELD_WIDTHS}

    @classmethod
    def from_json(cls, obj: Mapping[str, int]) -> "RvfiRecord":
        keys = set(obj)
        if keys != set(TRACE_KEYS):
            missing = sorted(set(TRACE_KEYS) - keys)
            extra = sorted(keys - set(TRACE_KEYS))
            raise MalformedTrace(f"bad keys (missing {missing}, unexpected {extra})")
        vals = {}
        for name, width in FIELD_WIDTHS.items():
            v = obj[f"rvfi_{name}"]
            if isinstance(v, bool) or not isinstance(v, int) or not 0 <= v < (1 << width):
                raise MalformedTrace(f"rvfi_{name}={v!r} is not a {width}-bit unsigned value")
            vals[name] = v
        return cls(**vals)

    def diff(self, other: "RvfiRecord") -> list[str]:
        return [k for k in FIELD_WIDTHS if getattr(self, k) != getattr(other, k)]


@dataclass
class RvfiTrace:
    records: list[RvfiRecord]
    complete: bool = True

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def sorted(self) -> list[RvfiRecord]:
        return sorted(self.records, key=lambda r: r.order)


def write_trace(records: Iterable[RvfiRecord], out: IO[str]) -> None:
    for r in records:
        out.write(json.dumps(r.to_json()) + "\n")


def read_trace(src: IO[str]) -> list[RvfiRecord]:
    records = []
    for lineno, line in enumerate(src, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedTrace(f"line {lineno}: {exc.msg}") from None
        if not isinstance(obj, dict):
            raise MalformedTrace(f"line {lineno}: expected a JSON object")
        try:
            records.append(RvfiRecord.from_json(obj))
        except MalformedTrace as exc:
            raise MalformedTrace(f"line {lineno}: {exc}") from None
    return records


# --------------------------------------------------------------------------
# Field rules shared by every producer of records

def rs_addr(is_reg: bool, raw_field: int) -> int:
    """Register source address as presented: zero when the field is not a register."""
    return raw_field if is_reg else 0


def byte_lanes(mask: int) -> int:
    """Expand a 4-bit byte mask to a 32-bit bit mask."""
    return sum(0xFF << (8 * i) for i in range(4) if mask >> i & 1)


def load_return_record(original: Mapping[str, int] | None, rd_wdata: int, mem_word: int,
                       cycle: int | None = None) -> RvfiRecord:
    """Record for a pseudo-load-return: identity fields from the original load.

    ``original`` is the recirculated bundle (None if nothing was captured at
    that slot, which only happens when the recirculation is misaligned).
    """
    o = original or dict.fromkeys(ORIGINAL_LD_FIELDS, 0)
    rd = o["rd_addr"]
    return RvfiRecord(
        order=o["order"], insn=o["insn"],
        rs1_addr=rs_addr(o["rs1_is_reg"], o["rs1_addr"]), rs1_rdata=o["rs1_rdata"],
        rs2_addr=rs_addr(o["rs2_is_reg"], o["rs2_addr"]), rs2_rdata=o["rs2_rdata"],
        rd_addr=rd, rd_wdata=rd_wdata if rd else 0,
        pc_rdata=o["pc_rdata"], pc_wdata=o["pc_wdata"],
        mem_addr=o["mem_addr"], mem_rmask=o["mem_rmask"],
        mem_rdata=mem_word & byte_lanes(o["mem_rmask"]),
        cycle=cycle,
    )


def extract_record(outputs: Mapping[str, int], cycle: int | None = None) -> RvfiRecord | None:
    """Turn one cycle of harness outputs into a record, or None for no retirement."""
    if not outputs.get("rvfi_valid"):
        return None
    return RvfiRecord(**{k: outputs[f"rvfi_{k}"] for k in FIELD_WIDTHS}, cycle=cycle)


# --------------------------------------------------------------------------
# Harness attachment

def attach_rvfi(graph: DesignGraph) -> DesignGraph:
    """Add the RVFI harness to a core graph built by :func:`warpkit.core.build_core`.

    Every field is expressed at the register-write stage; staging of the
    signals it consumes is left to elaboration, so the attachment is the same
    for every stage map.
    """
    g = graph
    s = g.sig
    with g.section("harness"), g.at(Stage.REG_WR):
        pipe = align_bundle(g, g.bundle("instr", [
            "order", "insn", "pc", "pc_wdata", "rs1", "rs1_is_reg", "rs1_rdata",
            "rs2", "rs2_is_reg", "rs2_rdata", "rd", "mem_addr_aligned",
        ]), Stage.REG_WR, name="pipe")
        original_ld = g.bundles["original_ld"]
        returning = s("returning_ld")

        def pick(pipe_member: str, ld_member: str):
            return g.mux(returning, g.wire(original_ld[ld_member].node), g.wire(pipe[pipe_member].node))

        order = pick("order", "order")
        insn = pick("insn", "insn")
        pc_rdata = pick("pc", "pc_rdata")
        pc_wdata = pick("pc_wdata", "pc_wdata")
        raw_rs1 = pick("rs1", "rs1_addr")
        rs1_is_reg = pick("rs1_is_reg", "rs1_is_reg")
        rs1_rdata = pick("rs1_rdata", "rs1_rdata")
        raw_rs2 = pick("rs2", "rs2_addr")
        rs2_is_reg = pick("rs2_is_reg", "rs2_is_reg")
        rs2_rdata = pick("rs2_rdata", "rs2_rdata")
        raw_rd = pick("rd", "rd_addr")

        # connected straight from the pipeline: not meaningful for loads
        in_pipe = ~returning
        trap = in_pipe & s("trap")
        store = in_pipe & s("is_store") & ~s("trap")
        rd_ok = returning | (s("writes_rd") & ~s("trap"))
        rd_addr = g.mux(rd_ok, raw_rd, 0)
        zero32 = g.const(0, 32)
        mem_addr = g.mux(returning, g.wire(original_ld["mem_addr"].node),
                         g.mux(store, g.wire(pipe["mem_addr_aligned"].node), zero32))
        rmask = g.mux(returning, g.wire(original_ld["mem_rmask"].node), g.const(0, 4))
        wmask = g.mux(store, s("wmask"), g.const(0, 4))

        out = {
            "valid": (s("commit") & ~(s("is_load") & ~s("trap"))) | returning,
            "order": order,
            "insn": insn,
            "trap": trap,
            "halt": in_pipe & s("is_ebreak"),
            "intr": g.const(0, 1),
            "rs1_addr": g.mux(rs1_is_reg, raw_rs1, 0),
            "rs2_addr": g.mux(rs2_is_reg, raw_rs2, 0),
            "rs1_rdata": rs1_rdata,
            "rs2_rdata": rs2_rdata,
            "rd_addr": rd_addr,
            "rd_wdata": g.mux(rd_addr.ne(0), s("result"), zero32),
            "pc_rdata": pc_rdata,
            "pc_wdata": pc_wdata,
            "mem_addr": mem_addr,
            "mem_rmask": rmask,
            "mem_wmask": wmask,
            "mem_rdata": g.mux(returning, g.wire(original_ld["ld_word"].node) & _lanes(g, rmask), zero32),
            "mem_wdata": s("store_lane") & _lanes(g, wmask),
        }
        for name in RVFI_SIGNALS:
            g.output(f"rvfi_{name}", out[name])
    return g


def _lanes(g: DesignGraph, mask):
    parts = [g.mux(mask[i], g.const(0xFF, 8), g.const(0, 8)) for i in (3, 2, 1, 0)]
    return g.cat(*parts)
