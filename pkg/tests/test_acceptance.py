"""Acceptance criteria 1-8.  Each test prints one PASS/FAIL line to the terminal."""
import io
import os
import subprocess
import sys
import time

import pytest

from conftest import LATENCIES, PRESET_IDS, SMOKE, config
from warpkit import isa
from warpkit.backend import emit_verilog, size_report
from warpkit.checker import check_trace, exhaustive_pairs, fuzz, gen_program, program_seed
from warpkit.core import Mutation, build_design, simulate
from warpkit.harness import write_trace

JOBS = os.cpu_count() or 1


@pytest.fixture
def verdict(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def test_criterion_1_cross_configuration(verdict):
    start = time.perf_counter()
    failures = []
    checked = 0
    for n in PRESET_IDS:
        for latency in LATENCIES:
            report = fuzz(config(n, latency), seed=2024, n_programs=500, length=200, jobs=JOBS)
            checked += report.programs
            if not report.passed:
                failures.append(f"{n}-stage L={latency}: {report.summary()}")
    elapsed = time.perf_counter() - start
    verdict(1, not failures and checked == 9 * 500,
            f"{checked} runs over 3 maps x 3 latencies, {len(failures)} failing configs, {elapsed:.0f}s"
            + (f"; {failures}" if failures else ""))


def test_criterion_2_architectural_equivalence(verdict):
    mismatched = []
    for i in range(100):
        image = gen_program(program_seed(77, i), 120)
        reference = None
        for n in PRESET_IDS:
            for latency in LATENCIES:
                trace, _ = simulate(config(n, latency), image)
                sorted_recs = trace.sorted()
                if reference is None:
                    reference = sorted_recs
                elif sorted_recs != reference:
                    mismatched.append((i, n, latency))
        assert reference == isa.run_golden(image)
    verdict(2, not mismatched, f"100 programs, sorted traces identical across 9 configs; mismatches: {mismatched[:5]}")


LOAD_USE = isa.assemble("""
    lui  x31, 0x8
    addi x1, x0, 3
    sw   x1, 0(x31)
    lw   x4, 0(x31)
    addi x6, x0, 1
    add  x5, x4, x1
    ebreak
""")


def test_criterion_3_load_return_contract(verdict):
    problems = []
    for n in PRESET_IDS:
        for latency in LATENCIES:
            tag = f"{n}-stage L={latency}"
            trace, _ = simulate(config(n, latency), LOAD_USE)
            recs = trace.records
            ld = next(r for r in recs if r.insn == LOAD_USE[3])
            # (a) identity fields come from the original load
            if (ld.order, ld.pc_rdata, ld.pc_wdata, ld.rs1_addr, ld.rs1_rdata, ld.rs2_addr) != (3, 12, 16, 31, 0x8000, 0):
                problems.append(f"{tag}: load fields {ld}")
            if (ld.rd_addr, ld.rd_wdata, ld.mem_rmask) != (4, 3, 0xF):
                problems.append(f"{tag}: load result {ld}")
            add = next(r for r in recs if r.order == 5)
            if add.rs1_rdata != 3 or add.rd_wdata != 6:
                problems.append(f"{tag}: dependent add {add}")
            # (b) a record presented after a younger one is always a load
            late = [r for i, r in enumerate(recs) if any(p.order > r.order for p in recs[:i])]
            if not late or any(isa.decode(r.insn).kind not in isa.LOADS for r in late):
                problems.append(f"{tag}: out-of-order records {[r.order for r in late]}")
            # (c) dense order ids
            if sorted(r.order for r in recs) != list(range(len(LOAD_USE))):
                problems.append(f"{tag}: orders {[r.order for r in recs]}")
            if not check_trace(trace, LOAD_USE).passed:
                problems.append(f"{tag}: checker")
    verdict(3, not problems, f"LW + dependent ADD on 9 configs; problems: {problems[:3]}")


def test_criterion_4_staging_trends(verdict):
    report = size_report([config(n) for n in (1, 5, 7)])
    regs = [r.staging_registers for r in report.rows]
    digests = {r.log_digest for r in report.rows}
    core_g, harness_g = report.growth("core_chars"), report.growth("harness_chars")
    ok = regs[0] == 0 and regs[0] < regs[1] < regs[2] and harness_g >= core_g and len(digests) == 1
    verdict(4, ok, f"staging registers {regs}, growth core {core_g:.3f} harness {harness_g:.3f}, "
                   f"{len(digests)} distinct construction log(s)")


MUTANTS = {
    Mutation.NO_SCOREBOARD: {"Rs1Mismatch", "Rs2Mismatch"},
    Mutation.SHORT_SQUASH: {"InsnMismatch"},
    Mutation.RECIRC_EARLY: {"DuplicateOrder", "OrderGap"},
    Mutation.RECIRC_LATE: {"DuplicateOrder", "OrderGap"},
    Mutation.RD_WDATA_STALE: {"RdMismatch"},
    Mutation.RS1_NOT_ZEROED: {"Rs1Mismatch"},
    Mutation.LOAD_ORDER_FROM_PIPE: {"DuplicateOrder", "OrderGap"},
}


def test_criterion_5_mutation_suite(verdict):
    lines, missed = [], []
    for mutation, expected in MUTANTS.items():
        cfg = config(5, 2, mutations={mutation})
        report = fuzz(cfg, seed=9, n_programs=500, length=100, max_failures=1)
        found = report.kinds() & expected
        lines.append(f"{mutation.name}:{'/'.join(sorted(found)) or 'undetected'}@{report.programs}")
        if not found:
            missed.append(mutation.name)
    verdict(5, not missed, f"{len(MUTANTS)} mutants, detected kinds: {', '.join(lines)}")


def test_criterion_6_bounded_exhaustive_pairs(verdict):
    kinds = ["ADDI", "ADD", "LW", "SW", "BEQ"]
    start = time.perf_counter()
    total, failures = 0, []
    for n in PRESET_IDS:
        report = exhaustive_pairs(config(n), kinds, regs=(1, 2), imms=(0, 1, -1))
        total += report.programs
        if not report.passed:
            failures.append(f"{n}-stage: {report.summary()}")
    elapsed = time.perf_counter() - start
    verdict(6, not failures and elapsed <= 600,
            f"{total} sequences over 3 presets ({total // 3} each), {elapsed:.1f}s; {failures}")


def test_criterion_7_smoke(verdict):
    results = []
    for n in PRESET_IDS:
        trace, _ = simulate(config(n), SMOKE)
        results.append((len(trace), trace.complete, check_trace(trace, SMOKE).passed))
    ok = len(SMOKE) == 11 and all(r == (11, True, True) for r in results)
    verdict(7, ok, f"{len(SMOKE)}-instruction program, (records, complete, clean) per preset: {results}")


_ARTIFACTS = """
import io, sys
from warpkit.checker import fuzz, gen_program
from warpkit.core import CoreConfig, build_design, simulate
from warpkit.backend import emit_verilog, size_report
from warpkit.harness import write_trace
from warpkit.stagegraph import PRESETS
out = io.StringIO()
for n in (1, 5, 7):
    cfg = CoreConfig(stage_map=PRESETS[n], mem_latency=2)
    write_trace(simulate(cfg, gen_program(123, 150))[0].records, out)
    out.write(emit_verilog(build_design(cfg)))
out.write(size_report([CoreConfig(stage_map=PRESETS[n]) for n in (1, 5, 7)]).dumps())
out.write(fuzz(CoreConfig(), 5, 10, 80).dumps())
sys.stdout.write(out.getvalue())
"""


def test_criterion_8_determinism(verdict):
    runs = []
    for hashseed in ("1", "2"):
        env = dict(os.environ, PYTHONHASHSEED=hashseed)
        proc = subprocess.run([sys.executable, "-c", _ARTIFACTS], capture_output=True, env=env, check=True)
        runs.append(proc.stdout)
    in_process = []
    for _ in range(2):
        buf = io.StringIO()
        write_trace(simulate(config(7, 5), SMOKE)[0].records, buf)
        buf.write(emit_verilog(build_design(config(7, 5))))
        in_process.append(buf.getvalue())
    ok = runs[0] == runs[1] and len(runs[0]) > 0 and in_process[0] == in_process[1]
    verdict(8, ok, f"two processes with different hash seeds produced {len(runs[0])} identical bytes "
                   "of traces, Verilog and reports")
