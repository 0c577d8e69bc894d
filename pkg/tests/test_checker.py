from dataclasses import replace

import pytest

from conftest import PRESET_IDS, SMOKE, config
from warpkit import isa
from warpkit.checker import (VIOLATION_KINDS, BoundExceeded, check_trace, exhaustive_pairs, fuzz,
                             gen_program, pair_programs, program_seed)
from warpkit.core import Mutation, simulate
from warpkit.harness import RvfiTrace


def smoke_trace():
    trace, _ = simulate(config(5), SMOKE)
    return trace


class TestCheckTrace:
    def test_ebreak_only(self):
        image = [isa.EBREAK_WORD]
        trace, _ = simulate(config(5), image)
        report = check_trace(trace, image)
        assert report.passed and report.instructions == 1

    def test_clean(self):
        assert check_trace(smoke_trace(), SMOKE).passed

    def test_duplicate_order(self):
        recs = smoke_trace().records
        recs = recs + [recs[3]]
        assert check_trace(recs, SMOKE).kinds() == {"DuplicateOrder"}

    def test_order_gap(self):
        recs = [r for r in smoke_trace().records if r.order != 4]
        assert "OrderGap" in check_trace(recs, SMOKE).kinds()

    def test_rd_bit_flip(self):
        recs = smoke_trace().sorted()
        recs[2] = replace(recs[2], rd_wdata=recs[2].rd_wdata ^ 0x100)
        report = check_trace(recs, SMOKE)
        assert [(v.kind, v.order, v.field) for v in report.violations] == [("RdMismatch", 2, "rd_wdata")]
        assert "order 2" in str(report.violations[0])

    def test_x0_nonzero(self):
        recs = smoke_trace().sorted()
        recs[7] = replace(recs[7], rd_wdata=1)  # the branch writes no register
        assert check_trace(recs, SMOKE).kinds() == {"X0Nonzero"}

    def test_insensitive_to_presentation_order(self):
        recs = smoke_trace().records
        assert check_trace(list(reversed(recs)), SMOKE).passed

    def test_incomplete(self):
        recs = [r for r in smoke_trace().records if not r.halt]
        assert check_trace(recs, SMOKE).kinds() == {"IncompleteTrace"}
        assert "IncompleteTrace" in check_trace(RvfiTrace(smoke_trace().records, complete=False), SMOKE).kinds()
        assert check_trace([], SMOKE).kinds() == {"IncompleteTrace"}

    def test_retired_after_halt(self):
        recs = smoke_trace().sorted()
        extra = replace(recs[-1], order=len(recs))
        assert "HaltMismatch" in check_trace(recs + [extra], SMOKE).kinds()

    def test_report_json(self):
        recs = smoke_trace().sorted()
        recs[0] = replace(recs[0], insn=0)
        data = check_trace(recs, SMOKE).to_json()
        assert data["pass"] is False and data["violations"][0]["kind"] == "InsnMismatch"
        assert all(v["kind"] in VIOLATION_KINDS for v in data["violations"])


class TestGenProgram:
    def test_deterministic(self):
        assert gen_program(7, 80) == gen_program(7, 80)
        assert gen_program(7, 80) != gen_program(8, 80)

    def test_length_and_terminator(self):
        words = gen_program(3, 60)
        assert len(words) == 60 and words[-1] == isa.EBREAK_WORD

    def test_no_memory_ops(self):
        weights = {"ADDI": 3, "ADD": 2, "BEQ": 1, "JAL": 1, "LW": 0, "SW": 0}
        kinds = {isa.decode(w).kind for s in range(20) for w in gen_program(s, 60, weights)}
        assert not kinds & (isa.LOADS | isa.STORES)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            gen_program(0, 10, {"MUL": 1})

    @pytest.mark.parametrize("n", PRESET_IDS)
    def test_seed_zero_clean(self, n):
        image = gen_program(0, 50)
        trace, _ = simulate(config(n), image)
        assert check_trace(trace, image).passed

    def test_program_seed_spread(self):
        assert len({program_seed(1, i) for i in range(1000)}) == 1000


class TestFuzz:
    def test_vacuous(self):
        report = fuzz(config(5), seed=0, n_programs=0)
        assert report.passed and report.programs == 0 and report.instructions == 0

    def test_healthy(self):
        report = fuzz(config(5, 2), seed=11, n_programs=20, length=80)
        assert report.passed and report.programs == 20

    def test_jobs_do_not_change_results(self):
        cfg = config(7, 2, mutations={Mutation.NO_SCOREBOARD})
        serial = fuzz(cfg, seed=4, n_programs=12, length=60)
        parallel = fuzz(cfg, seed=4, n_programs=12, length=60, jobs=3)
        assert serial.to_json() == parallel.to_json()

    def test_scoreboard_mutant(self):
        cfg = config(5, 2, mutations={Mutation.NO_SCOREBOARD})
        report = fuzz(cfg, seed=0, n_programs=500, length=100, max_failures=1)
        assert report.kinds() & {"Rs1Mismatch", "Rs2Mismatch"}

    def test_max_failures_stops_early(self):
        cfg = config(5, mutations={Mutation.RS1_NOT_ZEROED})
        report = fuzz(cfg, seed=0, n_programs=200, length=60, max_failures=1)
        assert report.failed_programs == 1 and report.programs < 200


class TestPairs:
    def test_empty_kinds(self):
        report = exhaustive_pairs(config(5), [])
        assert report.passed and report.programs == 0

    def test_alu_pairs(self):
        report = exhaustive_pairs(config(5), ["ADDI", "ADD"])
        assert report.passed and report.programs == (12 + 8) ** 2

    def test_load_order_mutant(self):
        cfg = config(5, mutations={Mutation.LOAD_ORDER_FROM_PIPE})
        report = exhaustive_pairs(cfg, ["ADDI", "LW"])
        assert report.kinds() & {"OrderGap", "DuplicateOrder", "RdMismatch"}

    def test_bound(self):
        with pytest.raises(BoundExceeded):
            pair_programs(["ADD"], bound=10)

    def test_jalr_not_enumerable(self):
        with pytest.raises(ValueError):
            pair_programs(["JALR"])

    def test_branch_targets_stay_in_program(self):
        for prog in pair_programs(["BEQ", "JAL"]):
            for slot, word in enumerate(prog[:2]):
                target = slot * 4 + isa.decode(word).imm
                assert slot * 4 < target <= 8
