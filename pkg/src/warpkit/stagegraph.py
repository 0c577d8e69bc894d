"""Timing-abstract pipeline IR.

Logic is declared against *virtual* stages.  A :class:`StageMap` assigns each
virtual stage a physical pipeline position, and :func:`elaborate` inserts the
staging registers implied by every cross-stage read.  The same
:class:`DesignGraph` therefore elaborates to a single-cycle machine or a deep
pipeline without any change to the construction code.

Three kinds of state exist in an elaborated design:

* staging registers, inserted automatically (one shared chain per producer);
* ``reg`` nodes, explicit state whose output is readable from any stage
  without staging and whose next value may come from any stage;
* feedback taps created by :func:`recirculate_bundle`, which read a bundle as it
  was a number of cycles earlier.

Register arrays (register files and byte memories) are declared on the graph
and accessed through read/write port nodes.
"""
from __future__ import annotations

import contextlib
import enum
import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence


class Stage(enum.IntEnum):
    NEXT_PC = 0
    FETCH = 1
    DECODE = 2
    REG_RD = 3
    EXECUTE = 4
    RESULT = 5
    REG_WR = 6


STAGES = tuple(Stage)
MAX_WIDTH = 64


# --------------------------------------------------------------------------
# Errors

class StageError(Exception):
    pass


class NonMonotone(StageError):
    def __init__(self, earlier: Stage, later: Stage):
        super().__init__(f"stage map is not monotone: {earlier.name} maps after {later.name}")
        self.pair = (earlier, later)


class MinNotZero(StageError):
    pass


class NegativeDepth(StageError):
    pass


class StageOrderViolation(StageError):
    pass


class CombinationalLoop(StageError):
    pass


class WidthMismatch(ValueError):
    pass


# --------------------------------------------------------------------------
# Stage maps

@dataclass(frozen=True)
class StageMap:
    """Physical index for every virtual stage, indexed by :class:`Stage`."""

    physical: tuple[int, ...]
    name: str = "custom"

    def __post_init__(self):
        if len(self.physical) != len(STAGES):
            raise ValueError(f"stage map needs {len(STAGES)} entries, got {len(self.physical)}")

    def __getitem__(self, stage: Stage) -> int:
        return self.physical[stage]

    @property
    def depth(self) -> int:
        return self.physical[Stage.REG_WR] - self.physical[Stage.NEXT_PC]

    @property
    def n_physical(self) -> int:
        return self.depth + 1

    def span(self, a: Stage, b: Stage) -> int:
        return self.physical[b] - self.physical[a]

    def stages_at(self, phys: int) -> tuple[Stage, ...]:
        return tuple(s for s in STAGES if self.physical[s] == phys)

    @classmethod
    def from_mapping(cls, mapping: Mapping[Stage, int], name: str = "custom") -> "StageMap":
        missing = [s.name for s in STAGES if s not in mapping]
        if missing:
            raise ValueError(f"stage map is missing {', '.join(missing)}")
        return cls(tuple(int(mapping[s]) for s in STAGES), name)

    @classmethod
    def preset(cls, n: int) -> "StageMap":
        try:
            return PRESETS[n]
        except KeyError:
            raise ValueError(f"no {n}-stage preset (choose from {sorted(PRESETS)})") from None

    def __str__(self):
        body = ", ".join(f"{s.name}={self.physical[s]}" for s in STAGES)
        return f"{self.name} ({body})"


ONE_STAGE = StageMap((0, 0, 0, 0, 0, 0, 0), "1-stage")
FIVE_STAGE = StageMap((0, 0, 1, 1, 2, 3, 4), "5-stage")
SEVEN_STAGE = StageMap((0, 1, 2, 3, 4, 5, 6), "7-stage")
PRESETS = {1: ONE_STAGE, 5: FIVE_STAGE, 7: SEVEN_STAGE}


def validate_stage_map(stage_map: StageMap) -> None:
    """Raise :class:`NonMonotone` or :class:`MinNotZero` for an illegal map."""
    phys = stage_map.physical
    for a, b in zip(STAGES, STAGES[1:]):
        if phys[a] > phys[b]:
            raise NonMonotone(a, b)
    if min(phys) != 0:
        raise MinNotZero(f"lowest physical stage is {min(phys)}, expected 0")


def staging_depth(stage_map: StageMap, producer: Stage, consumer: Stage) -> int:
    """Registers needed to carry a value from ``producer`` to ``consumer``."""
    depth = stage_map[consumer] - stage_map[producer]
    if depth < 0:
        raise NegativeDepth(
            f"{consumer.name} (physical {stage_map[consumer]}) precedes "
            f"{producer.name} (physical {stage_map[producer]})")
    return depth


@dataclass(frozen=True)
class Delay:
    """A feedback alignment: ``cycles`` plus the physical span between two stages.

    Keeping the span symbolic lets a graph carry a map-dependent alignment
    while its construction stays identical for every map.
    """

    cycles: int
    span: tuple[Stage, Stage] | None = None

    def resolve(self, stage_map: StageMap) -> int:
        extra = stage_map.span(*self.span) if self.span else 0
        return self.cycles + extra

    def __str__(self):
        if self.span is None:
            return str(self.cycles)
        return f"{self.cycles}+span({self.span[0].name},{self.span[1].name})"


# --------------------------------------------------------------------------
# Graph primitives

OPS = frozenset({
    "const", "input", "add", "sub", "and", "or", "xor", "shl", "srl", "sra",
    "eq", "lt_s", "lt_u", "mux", "slice", "concat", "sext", "zext",
    "rf_read", "rf_write", "mem_read", "mem_write", "reg", "feedback",
})
_BINARY_SAME = frozenset({"add", "sub", "and", "or", "xor"})
_SHIFTS = frozenset({"shl", "srl", "sra"})
_COMPARES = frozenset({"eq", "lt_s", "lt_u"})
WRITE_PORTS = frozenset({"rf_write", "mem_write"})


@dataclass(frozen=True)
class Node:
    id: int
    op: str
    operands: tuple[int, ...]
    width: int
    stage: Stage
    attrs: tuple = ()
    section: str = "core"
    name: str | None = None


@dataclass(frozen=True)
class Signal:
    name: str
    node: int
    width: int
    stage: Stage


@dataclass(frozen=True)
class Bundle:
    name: str
    members: tuple[Signal, ...]

    def __post_init__(self):
        names = [m.name for m in self.members]
        if len(set(names)) != len(names):
            raise ValueError(f"bundle {self.name!r} has duplicate member names")

    @property
    def width(self) -> int:
        return sum(m.width for m in self.members)

    def __getitem__(self, member: str) -> Signal:
        """Look up a member by full signal name or by its last dotted component."""
        for m in self.members:
            if m.name == member:
                return m
        for m in self.members:
            if m.name.rsplit(".", 1)[-1] == member:
                return m
        raise KeyError(member)

    def __iter__(self):
        return iter(self.members)

    def __len__(self):
        return len(self.members)

    def names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.members)


@dataclass(frozen=True)
class FeedbackArc:
    source: str
    taps: tuple[int, ...]
    delay: Delay
    target: Stage


@dataclass(frozen=True)
class ArrayDecl:
    name: str
    kind: str  # "rf" (word-addressed) or "mem" (byte-addressed, 32-bit ports)
    depth: int
    width: int


def _mask(width: int) -> int:
    return (1 << width) - 1


class Wire:
    """Handle to a graph node with operator sugar for building expressions."""

    __slots__ = ("graph", "id")

    def __init__(self, graph: "DesignGraph", nid: int):
        self.graph = graph
        self.id = nid

    @property
    def node(self) -> Node:
        return self.graph.nodes[self.id]

    @property
    def width(self) -> int:
        return self.node.width

    @property
    def stage(self) -> Stage:
        return self.node.stage

    def __add__(self, other):
        return self.graph.op("add", self, other)

    def __sub__(self, other):
        return self.graph.op("sub", self, other)

    def __and__(self, other):
        return self.graph.op("and", self, other)

    def __or__(self, other):
        return self.graph.op("or", self, other)

    def __xor__(self, other):
        return self.graph.op("xor", self, other)

    def __invert__(self):
        return self.graph.op("xor", self, _mask(self.width))

    def __lshift__(self, other):
        return self.graph.op("shl", self, other)

    def __rshift__(self, other):
        return self.graph.op("srl", self, other)

    def sra(self, other):
        return self.graph.op("sra", self, other)

    def eq(self, other):
        return self.graph.op("eq", self, other)

    def ne(self, other):
        return ~self.graph.op("eq", self, other)

    def lt(self, other):
        return self.graph.op("lt_s", self, other)

    def ltu(self, other):
        return self.graph.op("lt_u", self, other)

    def sext(self, width: int):
        return self.graph.op("sext", self, width=width)

    def zext(self, width: int):
        return self.graph.op("zext", self, width=width)

    def __getitem__(self, key):
        if isinstance(key, slice):
            hi, lo = key.start, key.stop
        else:
            hi = lo = key
        return self.graph.op("slice", self, attrs=(hi, lo), width=hi - lo + 1)

    def __repr__(self):
        n = self.node
        return f"Wire(n{n.id} {n.op} w{n.width} @{n.stage.name})"


class DesignGraph:
    """A timing-abstract design: expression nodes annotated with virtual stages.

    Construction is recorded in :attr:`log`, one line per mutation, so two
    constructions can be compared byte for byte.
    """

    def __init__(self, name: str = "design"):
        self.name = name
        self.nodes: list[Node] = []
        self.signals: dict[str, Signal] = {}
        self.bundles: dict[str, Bundle] = {}
        self.feedback: list[FeedbackArc] = []
        self.arrays: dict[str, ArrayDecl] = {}
        self.inputs: dict[str, int] = {}
        self.outputs: dict[str, int] = {}
        self.log: list[str] = []
        self._stage = Stage.NEXT_PC
        self._section = "core"
        self._consts: dict[tuple, int] = {}

    # -- context ----------------------------------------------------------
    @contextlib.contextmanager
    def at(self, stage: Stage):
        prev, self._stage = self._stage, Stage(stage)
        try:
            yield self
        finally:
            self._stage = prev

    @contextlib.contextmanager
    def section(self, name: str):
        prev, self._section = self._section, name
        try:
            yield self
        finally:
            self._section = prev

    @property
    def stage(self) -> Stage:
        return self._stage

    def _record(self, text: str):
        self.log.append(f"[{self._section}] {text}")

    def log_digest(self, section: str | None = None) -> str:
        lines = self.log if section is None else [l for l in self.log if l.startswith(f"[{section}]")]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()

    def wire(self, nid: int) -> Wire:
        return Wire(self, nid)

    # -- node creation ----------------------------------------------------
    def add_node(self, op: str, operands: Sequence[int], width: int, stage: Stage | None = None,
                 attrs: tuple = (), check: bool = True, name: str | None = None) -> Wire:
        """Append a node.  ``check=False`` skips width/stage validation."""
        if op not in OPS:
            raise ValueError(f"unknown op {op!r}")
        stage = self._stage if stage is None else Stage(stage)
        node = Node(len(self.nodes), op, tuple(operands), width, stage, tuple(attrs), self._section, name)
        if check:
            problem = node_width_problem(node, self.nodes)
            if problem:
                raise WidthMismatch(problem)
            for src in _staged_operands(node):
                prod = self.nodes[src]
                if prod.op != "reg" and prod.stage > stage:
                    raise StageOrderViolation(
                        f"{op} at {stage.name} reads n{src} produced later at {prod.stage.name}")
        self.nodes.append(node)
        ops = " ".join(f"n{o}" for o in node.operands)
        extra = f" {attrs}" if attrs else ""
        self._record(f"n{node.id} = {op}({ops}){extra} w{width} @{stage.name}")
        return Wire(self, node.id)

    def _coerce(self, value, width: int) -> Wire:
        if isinstance(value, Wire):
            return value
        return self.const(int(value), width)

    def const(self, value: int, width: int) -> Wire:
        if not 1 <= width <= MAX_WIDTH:
            raise WidthMismatch(f"constant width {width} out of range")
        key = (value & _mask(width), width, self._stage, self._section)
        if key not in self._consts:
            self._consts[key] = self.add_node("const", (), width, attrs=(value & _mask(width),)).id
        return Wire(self, self._consts[key])

    def input(self, name: str, width: int) -> Wire:
        w = self.add_node("input", (), width, attrs=(name,), name=name)
        self.inputs[name] = w.id
        return w

    def op(self, op: str, *args, width: int | None = None, attrs: tuple = ()) -> Wire:
        first = next((a for a in args if isinstance(a, Wire)), None)
        if first is None:
            raise WidthMismatch(f"{op} needs at least one wire operand")
        if op in _SHIFTS:
            a = self._coerce(args[0], first.width)
            b = self._coerce(args[1], 5)
            wires = [a, b]
        else:
            wires = [self._coerce(a, first.width) for a in args]
        if width is None:
            if op in _COMPARES:
                width = 1
            elif op == "concat":
                width = sum(w.width for w in wires)
            else:
                width = wires[-1].width if op == "mux" else wires[0].width
        return self.add_node(op, [w.id for w in wires], width, attrs=attrs)

    def mux(self, sel: Wire, if_true, if_false) -> Wire:
        """``sel ? if_true : if_false``."""
        ref = if_true if isinstance(if_true, Wire) else if_false
        a = self._coerce(if_true, ref.width)
        b = self._coerce(if_false, ref.width)
        return self.add_node("mux", (sel.id, a.id, b.id), a.width)

    def cat(self, *parts: Wire) -> Wire:
        """Concatenate, most significant part first."""
        return self.add_node("concat", [p.id for p in parts], sum(p.width for p in parts))

    def buf(self, value: Wire) -> Wire:
        """Identity at the current stage (captures a value into the transaction)."""
        return self.add_node("zext", (value.id,), value.width)

    def forward(self, width: int) -> Wire:
        """A buffer whose source is connected later with :meth:`assign`."""
        return self.add_node("zext", (), width, check=False)

    def assign(self, target: Wire, value: Wire):
        node = self.nodes[target.id]
        if node.op != "zext" or node.operands:
            raise ValueError(f"n{target.id} is not an unassigned forward wire")
        if value.width != node.width:
            raise WidthMismatch(f"assign n{target.id}: width {value.width} != {node.width}")
        if value.node.op != "reg" and value.stage > node.stage:
            raise StageOrderViolation(f"forward n{target.id} at {node.stage.name} driven from {value.stage.name}")
        self.nodes[target.id] = Node(node.id, node.op, (value.id,), node.width, node.stage,
                                     node.attrs, node.section, node.name)
        self._record(f"n{target.id} <= n{value.id}")

    def reg(self, name: str, width: int, init: int = 0) -> Wire:
        """State register; connect its next value later with :meth:`connect`."""
        return self.add_node("reg", (), width, attrs=(name, init & _mask(width)), check=False, name=name)

    def connect(self, register: Wire, next_value: Wire):
        node = self.nodes[register.id]
        if node.op != "reg":
            raise ValueError(f"n{register.id} is not a register")
        if next_value.width != node.width:
            raise WidthMismatch(f"{node.attrs[0]}: next value width {next_value.width} != {node.width}")
        self.nodes[register.id] = Node(node.id, "reg", (next_value.id,), node.width, node.stage,
                                       node.attrs, node.section, node.name)
        self._record(f"n{register.id} next <= n{next_value.id}")

    # -- arrays -----------------------------------------------------------
    def regfile(self, name: str, depth: int = 32, width: int = 32) -> ArrayDecl:
        decl = ArrayDecl(name, "rf", depth, width)
        self.arrays[name] = decl
        self._record(f"array {name} rf {depth}x{width}")
        return decl

    def memory(self, name: str, size: int) -> ArrayDecl:
        if size % 4:
            raise ValueError("memory size must be a multiple of 4 bytes")
        decl = ArrayDecl(name, "mem", size, 8)
        self.arrays[name] = decl
        self._record(f"array {name} mem {size}B")
        return decl

    def rf_read(self, array: str, addr: Wire) -> Wire:
        return self.add_node("rf_read", (addr.id,), self.arrays[array].width, attrs=(array,))

    def rf_write(self, array: str, en: Wire, addr: Wire, data: Wire) -> Wire:
        return self.add_node("rf_write", (en.id, addr.id, data.id), data.width, attrs=(array,))

    def mem_read(self, array: str, addr: Wire) -> Wire:
        return self.add_node("mem_read", (addr.id,), 32, attrs=(array,))

    def mem_write(self, array: str, en: Wire, addr: Wire, data: Wire, mask: Wire) -> Wire:
        return self.add_node("mem_write", (en.id, addr.id, data.id, mask.id), 32, attrs=(array,))

    # -- naming -----------------------------------------------------------
    def signal(self, name: str, value: Wire) -> Wire:
        if name in self.signals:
            raise ValueError(f"duplicate signal name {name!r}")
        node = self.nodes[value.id]
        if node.name is None:
            self.nodes[value.id] = Node(node.id, node.op, node.operands, node.width, node.stage,
                                        node.attrs, node.section, name)
        self.signals[name] = Signal(name, value.id, node.width, node.stage)
        self._record(f"signal {name} = n{value.id}")
        return value

    def sig(self, name: str) -> Wire:
        return Wire(self, self.signals[name].node)

    def bundle(self, name: str, members: Iterable[str | Signal]) -> Bundle:
        sigs = tuple(m if isinstance(m, Signal) else self.signals[m] for m in members)
        b = Bundle(name, sigs)
        self.bundles[name] = b
        self._record(f"bundle {name} = {', '.join(m.name for m in sigs)}")
        return b

    def output(self, name: str, value: Wire):
        if name in self.outputs:
            raise ValueError(f"duplicate output {name!r}")
        self.outputs[name] = value.id
        self._record(f"output {name} = n{value.id}")


def _staged_operands(node: Node) -> tuple[int, ...]:
    """Operands read through ordinary (stage-aligned) edges."""
    if node.op in ("reg", "feedback"):
        return ()
    return node.operands


def node_width_problem(node: Node, nodes: Sequence[Node]) -> str | None:
    """Return a description of a width inconsistency, or None."""
    op, w = node.op, node.width
    if not 1 <= w <= MAX_WIDTH:
        return f"n{node.id} {op}: width {w} outside 1..{MAX_WIDTH}"
    ws = [nodes[o].width for o in node.operands]
    if op in _BINARY_SAME:
        if len(ws) != 2 or ws[0] != ws[1] or ws[0] != w:
            return f"n{node.id} {op}: operand widths {ws} vs result {w}"
    elif op in _SHIFTS:
        if len(ws) != 2 or ws[0] != w:
            return f"n{node.id} {op}: operand widths {ws} vs result {w}"
    elif op in _COMPARES:
        if len(ws) != 2 or ws[0] != ws[1] or w != 1:
            return f"n{node.id} {op}: operand widths {ws}, result {w}"
    elif op == "mux":
        if len(ws) != 3 or ws[0] != 1 or ws[1] != ws[2] or ws[1] != w:
            return f"n{node.id} mux: selector/arms {ws} vs result {w}"
    elif op == "slice":
        hi, lo = node.attrs
        if len(ws) != 1 or not (0 <= lo <= hi < ws[0]) or w != hi - lo + 1:
            return f"n{node.id} slice[{hi}:{lo}] of width {ws}"
    elif op == "concat":
        if not ws or sum(ws) != w:
            return f"n{node.id} concat: parts {ws} vs result {w}"
    elif op in ("sext", "zext"):
        if len(ws) != 1 or ws[0] > w:
            return f"n{node.id} {op}: {ws} -> {w}"
    elif op in ("rf_read", "mem_read"):
        if len(ws) != 1:
            return f"n{node.id} {op}: expects one address operand"
    elif op == "rf_write":
        if len(ws) != 3 or ws[0] != 1 or ws[2] != w:
            return f"n{node.id} rf_write: operand widths {ws}"
    elif op == "mem_write":
        if len(ws) != 4 or ws[0] != 1 or ws[2] != 32 or ws[3] != 4:
            return f"n{node.id} mem_write: operand widths {ws}"
    elif op in ("const", "input"):
        if ws:
            return f"n{node.id} {op}: takes no operands"
    elif op in ("reg", "feedback"):
        if len(ws) != 1 or ws[0] != w:
            return f"n{node.id} {op}: source widths {ws} vs {w}"
    return None


# --------------------------------------------------------------------------
# Bundles across stages and cycles

def align_bundle(graph: DesignGraph, bundle: Bundle, target: Stage, name: str | None = None) -> Bundle:
    """Re-present every member of ``bundle`` at ``target``.

    Each member becomes a buffer at the target stage; elaboration then gives it
    whatever staging depth its own producer stage requires.
    """
    target = Stage(target)
    late = [m.name for m in bundle if m.stage > target]
    if late:
        raise StageOrderViolation(f"{bundle.name}: {', '.join(late)} produced after {target.name}")
    name = name or f"{bundle.name}@{target.name}"
    members = []
    with graph.at(target):
        for m in bundle:
            sig_name = f"{name}.{m.name}"
            graph.signal(sig_name, graph.buf(graph.wire(m.node)))
            members.append(graph.signals[sig_name])
    return graph.bundle(name, members)


def recirculate_bundle(graph: DesignGraph, bundle: Bundle, delay: int | Delay,
                       target: Stage | None = None, name: str | None = None) -> Bundle:
    """Feed ``bundle`` back through ``delay`` cycles.

    The returned bundle lives at ``target`` (default: the members' stage) and
    yields the source members' values from ``delay`` cycles earlier in the
    target's frame, so the physical register count is
    ``delay + phys(target) - phys(source)``.
    """
    if not isinstance(delay, Delay):
        delay = Delay(int(delay))
    if delay.span is None and delay.cycles < 1:
        raise CombinationalLoop(f"{bundle.name}: feedback delay must be at least 1 cycle")
    stages = {m.stage for m in bundle}
    if target is None:
        if len(stages) != 1:
            raise StageOrderViolation(f"{bundle.name}: members span several stages; give a target")
        target = stages.pop()
    target = Stage(target)
    name = name or f"{bundle.name}>>{delay}"
    arc_index = len(graph.feedback)
    taps, members = [], []
    with graph.at(target):
        for m in bundle:
            tap = graph.add_node("feedback", (m.node,), m.width, attrs=(arc_index,))
            graph.signal(f"{name}.{m.name}", tap)
            taps.append(tap.id)
            members.append(graph.signals[f"{name}.{m.name}"])
    graph.feedback.append(FeedbackArc(bundle.name, tuple(taps), delay, target))
    graph._record(f"feedback {bundle.name} -> {name} delay {delay} @{target.name}")
    return graph.bundle(name, members)


# --------------------------------------------------------------------------
# Elaboration

@dataclass(frozen=True)
class ElaboratedDesign:
    graph: DesignGraph
    stage_map: StageMap
    phys: tuple[int, ...]
    staging: dict[int, int]
    staging_core: dict[int, int]
    feedback_flops: dict[int, int]
    order: tuple[int, ...]
    reads: tuple[tuple[tuple, ...], ...]
    arc_flops: tuple[int, ...] = field(default=())
    widths: tuple[int, ...] = field(default=())

    @property
    def staging_registers(self) -> int:
        return sum(self.staging.values())

    @property
    def staging_bits(self) -> int:
        nodes = self.graph.nodes
        return sum(d * nodes[n].width for n, d in self.staging.items())

    def staging_stats(self, section: str | None = None) -> dict[str, int]:
        """Register and bit counts, optionally restricted to one section.

        Chain positions up to the deepest core consumer count as core; the
        remainder of a chain exists only for harness consumers.
        """
        nodes = self.graph.nodes
        regs = bits = 0
        for n, d in self.staging.items():
            core = self.staging_core.get(n, 0)
            if section is None:
                k = d
            elif section == "core":
                k = core
            else:
                k = d - core
            regs += k
            bits += k * nodes[n].width
        return {"registers": regs, "bits": bits}

    def initial_state(self, arrays: Mapping[str, Sequence[int] | bytes] | None = None) -> dict:
        """Reset state: every register zero (or its declared init)."""
        arrays = dict(arrays or {})
        g = self.graph
        state_arrays = {}
        for name, decl in g.arrays.items():
            init = arrays.pop(name, None)
            if decl.kind == "mem":
                buf = bytearray(decl.depth)
                if init is not None:
                    init = bytes(init)
                    if len(init) > decl.depth:
                        raise WidthMismatch(f"{name}: image of {len(init)} bytes exceeds {decl.depth}")
                    buf[:len(init)] = init
                state_arrays[name] = bytes(buf)
            else:
                vals = [0] * decl.depth
                if init is not None:
                    for i, v in enumerate(init):
                        vals[i] = v & _mask(decl.width)
                state_arrays[name] = tuple(vals)
        if arrays:
            raise KeyError(f"unknown arrays {sorted(arrays)}")
        stage_regs = {(n, k): 0 for n, d in self.staging.items() for k in range(1, d + 1)}
        fb = {(t, k): 0 for t, d in self.feedback_flops.items() for k in range(1, d + 1)}
        regs = {n.id: n.attrs[1] for n in g.nodes if n.op == "reg"}
        return {"staging": stage_regs, "feedback": fb, "regs": regs, "arrays": state_arrays}


def elaborate(graph: DesignGraph, stage_map: StageMap) -> ElaboratedDesign:
    """Map ``graph`` onto physical stages and insert staging registers."""
    validate_stage_map(stage_map)
    nodes = graph.nodes
    phys = tuple(stage_map[n.stage] for n in nodes)
    staging: dict[int, int] = {}
    staging_core: dict[int, int] = {}
    feedback_flops: dict[int, int] = {}
    reads: list[tuple] = []
    deps: list[list[int]] = [[] for _ in nodes]

    arc_flops = []
    for arc in graph.feedback:
        arc_flops.append(arc.delay.resolve(stage_map))

    for node in nodes:
        if node.op == "zext" and not node.operands:
            raise ValueError(f"forward wire n{node.id} was never assigned")
        if node.op == "reg":
            if not node.operands:
                raise ValueError(f"register {node.attrs[0]} has no next value")
            reads.append(())
            continue
        if node.op == "feedback":
            src = nodes[node.operands[0]]
            flops = arc_flops[node.attrs[0]] + phys[node.id] - phys[src.id]
            if flops < 1:
                raise CombinationalLoop(
                    f"feedback tap n{node.id} resolves to {flops} registers under {stage_map.name}")
            feedback_flops[node.id] = flops
            reads.append((("f", node.id, flops),))
            continue
        spec = []
        for src_id in node.operands:
            src = nodes[src_id]
            if src.op == "reg":
                spec.append(("r", src_id))
                continue
            if src.stage > node.stage:
                raise StageOrderViolation(
                    f"n{node.id} at {node.stage.name} reads n{src_id} from {src.stage.name}")
            depth = staging_depth(stage_map, src.stage, node.stage)
            if depth == 0:
                spec.append(("v", src_id))
                deps[node.id].append(src_id)
            else:
                spec.append(("s", src_id, depth))
                staging[src_id] = max(staging.get(src_id, 0), depth)
                if node.section == "core":
                    staging_core[src_id] = max(staging_core.get(src_id, 0), depth)
        reads.append(tuple(spec))

    order = _topo_order(len(nodes), deps)
    return ElaboratedDesign(graph, stage_map, phys, staging, staging_core, feedback_flops,
                            order, tuple(reads), tuple(arc_flops), tuple(n.width for n in nodes))


def _topo_order(n: int, deps: list[list[int]]) -> tuple[int, ...]:
    import heapq

    users: list[list[int]] = [[] for _ in range(n)]
    indeg = [0] * n
    for node, ds in enumerate(deps):
        for d in ds:
            users[d].append(node)
            indeg[node] += 1
    ready = [i for i in range(n) if indeg[i] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        i = heapq.heappop(ready)
        order.append(i)
        for u in users[i]:
            indeg[u] -= 1
            if indeg[u] == 0:
                heapq.heappush(ready, u)
    if len(order) != n:
        stuck = sorted(set(range(n)) - set(order))[:8]
        raise CombinationalLoop(f"combinational cycle through nodes {stuck}")
    return tuple(order)


# --------------------------------------------------------------------------
# Evaluation

def _to_signed(v: int, w: int) -> int:
    return v - (1 << w) if v >> (w - 1) & 1 else v


def _compute(node: Node, a: list[int], arrays: dict, widths: Sequence[int]) -> int:
    op, w = node.op, node.width
    m = (1 << w) - 1
    if op == "add":
        return (a[0] + a[1]) & m
    if op == "sub":
        return (a[0] - a[1]) & m
    if op == "and":
        return a[0] & a[1]
    if op == "or":
        return a[0] | a[1]
    if op == "xor":
        return a[0] ^ a[1]
    if op == "mux":
        return a[1] if a[0] else a[2]
    if op == "eq":
        return int(a[0] == a[1])
    if op == "slice":
        hi, lo = node.attrs
        return (a[0] >> lo) & m
    if op == "zext":
        return a[0]
    if op == "concat":
        v = 0
        for src, x in zip(node.operands, a):
            v = (v << widths[src]) | x
        return v
    if op == "shl":
        return (a[0] << a[1]) & m if a[1] < w else 0
    if op == "srl":
        return a[0] >> a[1]
    if op == "sra":
        return (_to_signed(a[0], w) >> min(a[1], w)) & m
    if op == "lt_u":
        return int(a[0] < a[1])
    if op == "lt_s":
        wa = widths[node.operands[0]]
        return int(_to_signed(a[0], wa) < _to_signed(a[1], wa))
    if op == "sext":
        wa = widths[node.operands[0]]
        return _to_signed(a[0], wa) & m
    if op == "rf_read":
        vals = arrays[node.attrs[0]]
        return vals[a[0] % len(vals)]
    if op == "mem_read":
        mem = arrays[node.attrs[0]]
        base = (a[0] & ~3) % len(mem)
        return int.from_bytes(mem[base:base + 4], "little")
    if op in ("const",):
        return node.attrs[0]
    if op in ("rf_write", "mem_write"):
        return 0
    raise ValueError(f"cannot evaluate op {op}")


def eval_cycle(design: ElaboratedDesign, state: dict, inputs: Mapping[str, int] | None = None):
    """Evaluate one clock cycle.

    Returns ``(next_state, outputs)``; ``state`` is not modified.  All values
    are unsigned and wrap at their node width.
    """
    g = design.graph
    nodes = g.nodes
    inputs = dict(inputs or {})
    for name, v in inputs.items():
        if name not in g.inputs:
            raise KeyError(f"unknown input {name!r}")
        w = nodes[g.inputs[name]].width
        if not 0 <= v <= _mask(w):
            raise WidthMismatch(f"input {name}={v} does not fit {w} bits")
    _check_state(design, state)
    widths = design.widths

    stg, fb, regs, arrays = state["staging"], state["feedback"], state["regs"], state["arrays"]
    vals: dict[int, int] = {}
    writes = []
    for nid in design.order:
        node = nodes[nid]
        op = node.op
        if op == "reg":
            vals[nid] = regs[nid]
            continue
        if op == "input":
            vals[nid] = inputs.get(node.attrs[0], 0)
            continue
        args = []
        for spec in design.reads[nid]:
            kind = spec[0]
            if kind == "v":
                args.append(vals[spec[1]])
            elif kind == "s":
                args.append(stg[(spec[1], spec[2])])
            elif kind == "r":
                args.append(regs[spec[1]])
            else:
                args.append(fb[(spec[1], spec[2])])
        if op == "feedback":
            vals[nid] = args[0]
            continue
        if op in WRITE_PORTS:
            writes.append((node, args))
        vals[nid] = _compute(node, args, arrays, widths)

    new_stg = {}
    for n, d in design.staging.items():
        new_stg[(n, 1)] = vals[n]
        for k in range(2, d + 1):
            new_stg[(n, k)] = stg[(n, k - 1)]
    new_fb = {}
    for t, d in design.feedback_flops.items():
        new_fb[(t, 1)] = vals[nodes[t].operands[0]]
        for k in range(2, d + 1):
            new_fb[(t, k)] = fb[(t, k - 1)]
    new_regs = {n.id: vals[n.operands[0]] for n in nodes if n.op == "reg"}
    new_arrays = dict(arrays)
    for node, args in writes:
        name = node.attrs[0]
        if not args[0]:
            continue
        if node.op == "rf_write":
            vals_ = list(new_arrays[name])
            vals_[args[1] % len(vals_)] = args[2]
            new_arrays[name] = tuple(vals_)
        else:
            mem = bytearray(new_arrays[name])
            base = (args[1] & ~3) % len(mem)
            for i in range(4):
                if args[3] >> i & 1:
                    mem[base + i] = (args[2] >> (8 * i)) & 0xFF
            new_arrays[name] = bytes(mem)
    outputs = {name: vals[nid] for name, nid in g.outputs.items()}
    return {"staging": new_stg, "feedback": new_fb, "regs": new_regs, "arrays": new_arrays}, outputs


def _check_state(design: ElaboratedDesign, state: dict):
    nodes = design.graph.nodes
    for (n, k), v in state["staging"].items():
        if not 0 <= v <= _mask(nodes[n].width):
            raise WidthMismatch(f"staging register n{n}[{k}]={v} does not fit {nodes[n].width} bits")
    for n, v in state["regs"].items():
        if not 0 <= v <= _mask(nodes[n].width):
            raise WidthMismatch(f"register n{n}={v} does not fit {nodes[n].width} bits")
    if len(state["staging"]) != sum(design.staging.values()):
        raise WidthMismatch("state does not match the design's staging registers")
