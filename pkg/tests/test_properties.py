from dataclasses import replace

from hypothesis import HealthCheck, assume, given, settings, strategies as st

from conftest import SMOKE, config
from warpkit import isa
from warpkit.checker import FIELD_KIND, check_trace, gen_program
from warpkit.core import CoreConfig, build_core, simulate, simulate_graph
from warpkit.harness import FIELD_WIDTHS, attach_rvfi
from warpkit.stagegraph import (STAGES, DesignGraph, NonMonotone, Stage, StageMap, elaborate, eval_cycle,
                                recirculate_bundle, validate_stage_map)
from warpkit.backend import lint

SLOW = settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])


@st.composite
def stage_maps(draw):
    steps = draw(st.lists(st.integers(0, 2), min_size=6, max_size=6))
    phys = [0]
    for s in steps:
        phys.append(phys[-1] + s)
    return StageMap(tuple(phys), "drawn")


# --------------------------------------------------------------------------
# Stage maps and elaboration

@given(stage_maps())
def test_monotone_maps_validate(m):
    validate_stage_map(m)
    assert m.depth >= 0


@given(st.lists(st.integers(0, 6), min_size=7, max_size=7))
def test_validation_matches_definition(phys):
    m = StageMap(tuple(phys))
    monotone = all(a <= b for a, b in zip(phys, phys[1:]))
    try:
        validate_stage_map(m)
        ok = True
    except NonMonotone:
        ok = False
        assert not monotone
    except Exception:
        ok = False
        assert monotone and min(phys) != 0
    assert ok == (monotone and min(phys) == 0)


_CORE = attach_rvfi(build_core(CoreConfig()))


@settings(max_examples=30, deadline=None)
@given(stage_maps())
def test_staging_equals_per_producer_max(m):
    design = elaborate(_CORE, m)
    expected = {}
    for node in _CORE.nodes:
        if node.op in ("reg", "feedback"):
            continue
        for src in node.operands:
            prod = _CORE.nodes[src]
            if prod.op == "reg":
                continue
            d = m[node.stage] - m[prod.stage]
            if d > 0:
                expected[src] = max(expected.get(src, 0), d)
    assert design.staging == expected
    assert design.staging_registers == sum(expected.values())
    assert lint(design) == []


@given(stage_maps(), st.lists(st.integers(0, 255), min_size=1, max_size=12))
def test_alignment_between_every_stage_pair(m, values):
    g = DesignGraph()
    probes = []
    for a in STAGES:
        with g.at(a):
            src = g.input(f"in_{a.name}", 8)
        for b in STAGES[a:]:
            with g.at(b):
                g.output(f"{a.name}->{b.name}", g.buf(src))
            probes.append((a, b))
    design = elaborate(g, m)
    state = design.initial_state()
    history = []
    for v in values:
        state, out = eval_cycle(design, state, {f"in_{a.name}": v for a in STAGES})
        history.append(out)
    for t, out in enumerate(history):
        for a, b in probes:
            lag = m[b] - m[a]
            want = values[t - lag] if t >= lag else 0
            assert out[f"{a.name}->{b.name}"] == want


@given(st.integers(1, 6), st.lists(st.integers(0, 2 ** 16 - 1), min_size=1, max_size=20), stage_maps())
def test_recirculation_is_bit_exact(delay, values, m):
    g = DesignGraph()
    with g.at(Stage.EXECUTE):
        g.signal("x", g.input("x", 16))
        g.signal("y", ~g.sig("x"))
    rb = recirculate_bundle(g, g.bundle("b", ["x", "y"]), delay)
    g.output("x", g.wire(rb["x"].node))
    g.output("y", g.wire(rb["y"].node))
    design = elaborate(g, m)
    state = design.initial_state()
    for t, v in enumerate(values):
        state, out = eval_cycle(design, state, {"x": v})
        past = values[t - delay] if t >= delay else None
        if past is not None:
            assert (out["x"], out["y"]) == (past, past ^ 0xFFFF)


@settings(max_examples=25)
@given(st.dictionaries(st.sampled_from(["a", "b"]), st.integers(0, 2 ** 32 - 1)), stage_maps())
def test_eval_is_deterministic(inputs, m):
    g = DesignGraph()
    a, b = g.input("a", 32), g.input("b", 32)
    r = g.reg("acc", 32)
    with g.at(Stage.EXECUTE):
        s = g.buf(a) ^ g.buf(b)
        g.connect(r, r + s)
        g.output("o", s.sra(g.const(3, 5)) + r)
    design = elaborate(g, m)
    s0 = design.initial_state()
    assert eval_cycle(design, s0, inputs) == eval_cycle(design, s0, inputs)


# --------------------------------------------------------------------------
# ISA

def _fields(kind, draw):
    rd, rs1, rs2 = (draw(st.integers(0, 31)) for _ in range(3))
    if kind in isa.BRANCHES:
        return dict(rs1=rs1, rs2=rs2, imm=draw(st.integers(-2048, 2047)) * 2)
    if kind == "JAL":
        return dict(rd=rd, imm=draw(st.integers(-(2 ** 19), 2 ** 19 - 1)) * 2)
    if kind in ("LUI", "AUIPC"):
        return dict(rd=rd, imm=isa.sext(draw(st.integers(0, 2 ** 20 - 1)) << 12, 32))
    if kind in isa.SHIFT_IMMS:
        return dict(rd=rd, rs1=rs1, imm=draw(st.integers(0, 31)))
    if kind in isa.STORES:
        return dict(rs1=rs1, rs2=rs2, imm=draw(st.integers(-2048, 2047)))
    if kind in isa.IMM_OPS or kind in isa.LOADS or kind == "JALR":
        return dict(rd=rd, rs1=rs1, imm=draw(st.integers(-2048, 2047)))
    if kind in isa.REG_OPS:
        return dict(rd=rd, rs1=rs1, rs2=rs2)
    return {}


@st.composite
def instructions(draw):
    kind = draw(st.sampled_from([k for k in isa.KINDS if k != "ILLEGAL"]))
    return kind, _fields(kind, draw)


@given(instructions())
def test_encode_decode_round_trip(case):
    kind, fields = case
    word = isa.encode(kind, **fields)
    instr = isa.decode(word)
    assert instr.kind == kind
    for k, v in fields.items():
        assert getattr(instr, k) == v
    assert isa.encode_instr(instr) == word
    assert isa.assemble(isa.disassemble(instr)) == [word]


@given(st.integers(0, 2 ** 32 - 1))
def test_decode_is_total_and_canonical(word):
    instr = isa.decode(word)
    if instr.kind != "ILLEGAL":
        assert isa.encode_instr(instr) == word


@st.composite
def arch_states(draw, mem_size=256):
    regs = (0,) + tuple(draw(st.lists(st.integers(0, 2 ** 32 - 1), min_size=31, max_size=31)))
    mem = bytearray(draw(st.binary(min_size=mem_size, max_size=mem_size)))
    return regs, mem


@given(instructions(), arch_states())
def test_x0_is_never_written(case, rs):
    kind, fields = case
    regs, mem = rs
    fields = dict(fields, rd=0) if "rd" in fields else fields
    word = isa.encode(kind, **fields)
    mem[0:4] = word.to_bytes(4, "little")
    state = isa.ArchState(0, regs, bytes(mem))
    try:
        new, info = isa.golden_step(state)
    except (isa.PcMisaligned, isa.PcOutOfRange):
        return
    assert new.regs[0] == 0 and info.rd_addr == 0 and info.rd_wdata == 0


@given(st.sampled_from(sorted(isa.STORES | isa.LOADS)), st.integers(1, 7), st.integers(0, 2 ** 32 - 1),
       st.integers(16, 63), arch_states())
def test_memory_masks(kind, base, value, offset, rs):
    regs, mem = rs
    regs = list(regs)
    regs[base] = 64
    regs[2 if base != 2 else 3] = value
    src = 2 if base != 2 else 3
    size = isa.ACCESS_SIZE[kind]
    offset -= offset % size
    if kind in isa.STORES:
        word = isa.encode(kind, rs1=base, rs2=src, imm=offset)
    else:
        word = isa.encode(kind, rd=src, rs1=base, imm=offset)
    mem[0:4] = word.to_bytes(4, "little")
    new, info = isa.golden_step(isa.ArchState(0, tuple(regs), bytes(mem)))
    mask = info.mem_wmask or info.mem_rmask
    assert bin(mask).count("1") == size
    assert mask == ((1 << size) - 1) << (offset % 4)
    lanes = sum(0xFF << 8 * i for i in range(4) if mask >> i & 1)
    data = info.mem_wdata if kind in isa.STORES else info.mem_rdata
    assert data & ~lanes == 0
    if kind in isa.STORES:
        assert new.mem[64 + offset:64 + offset + size] == (value & ((1 << 8 * size) - 1)).to_bytes(size, "little")
        assert new.mem[:64 + offset] == bytes(mem[:64 + offset])


# --------------------------------------------------------------------------
# Checker

_SMOKE_TRACE = simulate(config(5, 2), SMOKE)[0].sorted()


@given(st.integers(0, len(_SMOKE_TRACE) - 1), st.sampled_from(sorted(FIELD_WIDTHS)), st.data())
def test_any_single_field_change_is_caught(index, name, data):
    rec = _SMOKE_TRACE[index]
    width = FIELD_WIDTHS[name]
    value = data.draw(st.integers(0, 2 ** width - 1))
    assume(value != getattr(rec, name))
    recs = list(_SMOKE_TRACE)
    recs[index] = replace(rec, **{name: value})
    report = check_trace(recs, SMOKE)
    if name == "order":
        assert report.kinds() and report.kinds() <= {"DuplicateOrder", "OrderGap"}
    elif name in ("rd_addr", "rd_wdata"):
        assert report.kinds() in ({"RdMismatch"}, {"X0Nonzero"})
    else:
        assert report.kinds() == {FIELD_KIND[name]}
    assert len(report.violations) == 1 or name == "order"


@given(st.permutations(_SMOKE_TRACE))
def test_presentation_order_irrelevant(recs):
    assert check_trace(recs, SMOKE).to_json() == check_trace(_SMOKE_TRACE, SMOKE).to_json()


# --------------------------------------------------------------------------
# The core under arbitrary legal maps

@SLOW
@given(stage_maps(), st.integers(1, 4), st.integers(0, 2 ** 32))
def test_core_correct_under_any_map(m, latency, seed):
    cfg = CoreConfig(stage_map=m, mem_latency=latency)
    image = gen_program(seed, 60)
    trace, _ = simulate(cfg, image)
    assert check_trace(trace, image).passed


@settings(max_examples=4, deadline=None)
@given(stage_maps(), st.integers(1, 3), st.integers(0, 2 ** 32))
def test_graph_matches_simulator_under_any_map(m, latency, seed):
    cfg = CoreConfig(stage_map=m, mem_latency=latency)
    image = gen_program(seed, 25)
    fast, _ = simulate(cfg, image)
    slow, _ = simulate_graph(cfg, image)
    assert [(r, r.cycle) for r in fast] == [(r, r.cycle) for r in slow]
