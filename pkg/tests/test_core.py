import io

import pytest

from conftest import LATENCIES, PRESET_IDS, SMOKE, config
from warpkit import isa
from warpkit.checker import check_trace, gen_program
from warpkit.core import (CoreConfig, ImageFormatError, build_core, build_design, load_return_alignment,
                          read_image, simulate, simulate_graph, write_image)
from warpkit.stagegraph import ONE_STAGE, SEVEN_STAGE, Stage, StageError, StageMap, elaborate


class TestConfig:
    def test_defaults(self):
        c = CoreConfig()
        assert c.stage_map.name == "5-stage" and c.mem_latency == 1

    @pytest.mark.parametrize("kw", [dict(mem_latency=0), dict(mem_size=1001), dict(max_cycles=0),
                                    dict(max_pending_loads=0)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            CoreConfig(**kw)

    def test_rejects_bad_map(self):
        with pytest.raises(StageError):
            CoreConfig(stage_map=StageMap((0, 2, 1, 2, 3, 4, 5)))


class TestAlignment:
    def test_single_stage(self):
        assert load_return_alignment(CoreConfig(stage_map=ONE_STAGE, mem_latency=1)) == 2

    def test_seven_stage(self):
        assert load_return_alignment(CoreConfig(stage_map=SEVEN_STAGE, mem_latency=1)) == 7

    @pytest.mark.parametrize("n", PRESET_IDS)
    @pytest.mark.parametrize("latency", LATENCIES)
    def test_at_least_one_and_observed(self, n, latency):
        cfg = config(n, latency)
        a = load_return_alignment(cfg)
        assert a >= 1
        # a lone load: its pseudo-return retires a cycles after the load's own slot would have
        image = isa.assemble("lw x1, 64(x0)\nebreak")
        trace, _ = simulate(cfg, image)
        ld = next(r for r in trace if r.order == 0)
        brk = next(r for r in trace if r.order == 1)
        # the EBREAK behind it retires one cycle after the load's slot
        assert ld.cycle == brk.cycle - 1 + a


class TestBuildCore:
    def test_graph_is_map_independent(self):
        g1 = build_core(config(1))
        g7 = build_core(config(7))
        assert g1.log == g7.log
        e1, e7 = elaborate(g1, g1_map := config(1).stage_map), elaborate(g7, config(7).stage_map)
        assert e1.staging_registers == 0 < e7.staging_registers
        assert g1_map.name == "1-stage"

    def test_one_feedback_arc(self):
        g = build_core(CoreConfig())
        assert len(g.feedback) == 1
        assert g.feedback[0].target == Stage.NEXT_PC

    def test_single_stage_no_staging(self):
        assert build_design(config(1)).staging_registers == 0


class TestSimulate:
    @pytest.mark.parametrize("n", PRESET_IDS)
    def test_smoke(self, n):
        trace, stats = simulate(config(n), SMOKE)
        assert trace.complete and stats.halted
        assert sorted(r.order for r in trace) == list(range(11))
        assert check_trace(trace, SMOKE).passed

    def test_alu_cpi_one(self):
        image = isa.assemble([f"addi x{i % 8 + 1}, x{i % 5}, {i}" for i in range(30)] + ["ebreak"])
        trace, stats = simulate(config(1), image)
        assert [r.cycle for r in trace] == list(range(31))
        assert stats.cycles == 31

    @pytest.mark.parametrize("n", PRESET_IDS)
    def test_taken_branch_squash(self, n):
        image = isa.assemble("""
            addi x1, x0, 1
            beq  x0, x0, target
            addi x2, x0, 1
            addi x3, x0, 1
            addi x4, x0, 1
            addi x5, x0, 1
            addi x6, x0, 1
        target:
            addi x7, x0, 1
            ebreak
        """)
        cfg = config(n)
        trace, stats = simulate(cfg, image)
        span = cfg.stage_map.span(Stage.NEXT_PC, Stage.EXECUTE)
        by_order = {r.order: r for r in trace}
        assert by_order[2].pc_rdata == 28
        assert by_order[2].cycle - by_order[1].cycle - 1 == span
        assert stats.squashed == span

    def test_load_use_replays(self):
        image = isa.assemble("lw x1, 64(x0)\nadd x2, x1, x1\nebreak")
        _, stats = simulate(config(5, 5), image)
        assert stats.stall_cycles > 0

    def test_pending_load_cap(self):
        image = isa.assemble([f"lw x{i + 1}, {64 + 4 * i}(x0)" for i in range(8)] + ["ebreak"])
        for cap in (1, 2, 8):
            cfg = config(7, 5, max_pending_loads=cap)
            trace, _ = simulate(cfg, image)
            assert check_trace(trace, image).passed

    def test_timeout_gives_partial_trace(self):
        image = isa.assemble("loop: jal x0, loop")
        trace, stats = simulate(config(5, max_cycles=50), image)
        assert not trace.complete and not stats.halted
        assert stats.cycles == 50 and len(trace) > 0

    def test_fetch_wraps_and_checker_objects(self):
        # the core's fetch address wraps modulo mem_size; the golden model refuses
        image = isa.assemble("nop\nnop")
        trace, _ = simulate(config(5, mem_size=8, max_cycles=40), image)
        assert not trace.complete
        assert trace.records[2].pc_rdata == 8
        report = check_trace(trace, image, 8)
        assert "PcMismatch" in report.kinds()


class TestGraphAgreement:
    """The elaborated graph evaluated cycle by cycle matches the fast simulator."""

    @pytest.mark.parametrize("n", PRESET_IDS)
    @pytest.mark.parametrize("latency", LATENCIES)
    def test_smoke(self, n, latency):
        cfg = config(n, latency)
        fast, fs = simulate(cfg, SMOKE)
        slow, gs = simulate_graph(cfg, SMOKE)
        assert [(r, r.cycle) for r in fast] == [(r, r.cycle) for r in slow]
        assert slow.complete and fs.cycles == gs.cycles

    @pytest.mark.parametrize("n", PRESET_IDS)
    def test_random_programs(self, n):
        cfg = config(n, 2)
        design = build_design(cfg)
        for seed in range(3):
            image = gen_program(seed, 40)
            fast, _ = simulate(cfg, image)
            slow, _ = simulate_graph(cfg, image, design)
            assert [(r, r.cycle) for r in fast] == [(r, r.cycle) for r in slow], seed


class TestImages:
    def test_round_trip(self):
        buf = io.StringIO()
        write_image(SMOKE, buf)
        assert read_image(io.StringIO(buf.getvalue())) == SMOKE

    def test_comments_and_errors(self):
        assert read_image(["00000013  # nop", "", "# only a comment"]) == [0x13]
        with pytest.raises(ImageFormatError, match="line 2"):
            read_image(["00000013", "xyz"])
