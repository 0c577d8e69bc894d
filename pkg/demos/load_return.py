"""Watch a load leave the pipe and come back as a pseudo-load-return.

Prints the retirement stream for a load followed by an independent and a
dependent instruction, on every preset.  The load's record arrives after the
independent one but carries the load's own order, pc and source fields.
"""
from warpkit import isa
from warpkit.core import CoreConfig, load_return_alignment, simulate
from warpkit.stagegraph import PRESETS

PROGRAM = isa.assemble("""
    lui  x31, 0x8
    addi x1, x0, 3
    sw   x1, 0(x31)
    lw   x4, 0(x31)
    addi x6, x0, 1
    add  x5, x4, x1
    ebreak
""")

for n, stage_map in PRESETS.items():
    cfg = CoreConfig(stage_map=stage_map, mem_latency=2)
    trace, stats = simulate(cfg, PROGRAM)
    print(f"{stage_map.name}: load returns {load_return_alignment(cfg)} cycles after issue, "
          f"{stats.cycles} cycles total, {stats.stall_cycles} replayed")
    for r in trace:
        tag = " <- pseudo-load-return" if r.mem_rmask else ""
        print(f"  cycle {r.cycle:3d}  order {r.order}  pc {r.pc_rdata:#06x}  "
              f"{isa.disassemble(isa.decode(r.insn)):24s} rd x{r.rd_addr}={r.rd_wdata}{tag}")
