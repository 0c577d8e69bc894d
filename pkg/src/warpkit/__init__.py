"""Stage-mapped RV32I core generator with an RVFI-style verification harness."""
from .stagegraph import (FIVE_STAGE, ONE_STAGE, PRESETS, SEVEN_STAGE, STAGES, Delay, DesignGraph,
                         Stage, StageError, StageMap, elaborate, eval_cycle)
from .harness import RvfiRecord, RvfiTrace, MalformedTrace, attach_rvfi, read_trace, write_trace
from .isa import Instr, assemble, decode, disassemble, encode, golden_step, run_golden
from .core import CoreConfig, Mutation, SimStats, build_core, build_design, simulate, simulate_graph
from .checker import (CheckReport, Violation, check_trace, exhaustive_pairs, fuzz, gen_program)
from .backend import emit_verilog, lint, size_report

__version__ = "0.1.0"
