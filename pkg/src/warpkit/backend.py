"""Verilog emission, structural lint, and the per-configuration size report."""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from typing import Sequence

from .stagegraph import ElaboratedDesign, Node, _staged_operands, node_width_problem

SECTION_MARK = "// ==== section: {} ===="
_SECTIONS = ("core", "harness")


class UnsupportedNode(ValueError):
    pass


def lint(design: ElaboratedDesign) -> list[str]:
    """Structural problems in ``design``; an empty list means clean."""
    g = design.graph
    nodes = g.nodes
    phys = design.phys
    problems = []
    for node in nodes:
        if node.op == "zext" and not node.operands:
            problems.append(f"n{node.id}: forward wire never assigned")
            continue
        if node.op == "reg" and not node.operands:
            problems.append(f"n{node.id}: register {node.attrs[0]} has no next value")
            continue
        problem = node_width_problem(node, nodes)
        if problem:
            problems.append(problem)
        for src in _staged_operands(node):
            prod = nodes[src]
            if prod.op == "reg":
                continue
            if phys[src] > phys[node.id]:
                problems.append(f"n{node.id} at physical {phys[node.id]} reads n{src} "
                                f"available only at physical {phys[src]}")
    for tap, flops in design.feedback_flops.items():
        if flops < 1:
            problems.append(f"feedback tap n{tap}: {flops} registers (combinational loop)")
    for name, nid in g.outputs.items():
        if not 0 <= nid < len(nodes):
            problems.append(f"output {name} references missing node n{nid}")
    return problems


# --------------------------------------------------------------------------
# Emission

_IDENT = re.compile(r"[^A-Za-z0-9_]")
_KEYWORDS = frozenset("""always and assign begin case default else end endcase endmodule
    for if initial inout input integer module negedge or output parameter posedge reg
    signed wire xor""".split())


def _names(design: ElaboratedDesign) -> list[str]:
    used = {"clk", "rst"} | set(design.graph.arrays) | set(design.graph.inputs) | set(design.graph.outputs)
    names = []
    for node in design.graph.nodes:
        base = _IDENT.sub("_", node.name) if node.name else f"n{node.id}"
        if base in _KEYWORDS or base[0].isdigit():
            base = f"s_{base}"
        name = base
        if name in used:
            name = f"{base}_n{node.id}"
        used.add(name)
        names.append(name)
    return names


def _decl(kind: str, width: int, name: str) -> str:
    return f"{kind} [{width - 1}:0] {name};"


def emit_verilog(design: ElaboratedDesign, module: str | None = None) -> str:
    """One flat module: declarations, combinational assigns, clocked updates.

    Output is split into a core and a harness section by marker comments.
    Each staging register is declared on its own line as ``<name>_s<k>``.
    """
    problems = lint(design)
    if problems:
        raise ValueError("design fails lint: " + problems[0])
    g = design.graph
    nodes = g.nodes
    names = _names(design)
    module = module or _IDENT.sub("_", g.name)
    w = design.widths

    def ref(spec) -> str:
        kind = spec[0]
        if kind in ("v", "r"):
            return names[spec[1]]
        if kind == "s":
            return f"{names[spec[1]]}_s{spec[2]}"
        return f"{names[spec[1]]}_f{spec[2]}"

    ports = ["input wire clk", "input wire rst"]
    ports += [f"input wire [{nodes[n].width - 1}:0] {name}" for name, n in g.inputs.items()]
    ports += [f"output wire [{nodes[n].width - 1}:0] {name}" for name, n in g.outputs.items()]
    out = [f"module {module} (", ",\n".join(f"  {p}" for p in ports), ");"]

    body = {s: {"decl": [], "assign": [], "seq": [], "reset": []} for s in _SECTIONS}

    def section(name: str) -> dict:
        return body[name if name in body else "core"]

    # arrays belong to the core
    for decl in g.arrays.values():
        if decl.kind == "rf":
            body["core"]["decl"].append(f"reg [{decl.width - 1}:0] {decl.name} [0:{decl.depth - 1}];")
        else:
            body["core"]["decl"].append(f"reg [31:0] {decl.name} [0:{decl.depth // 4 - 1}];")

    for nid in design.order:
        node = nodes[nid]
        sec = section(node.section)
        name = names[nid]
        args = [ref(s) for s in design.reads[nid]]
        if node.op == "reg":
            sec["decl"].append(_decl("reg", node.width, name))
            sec["reset"].append(f"{name} <= {node.width}'h{node.attrs[1]:x};")
            sec["seq"].append(f"{name} <= {names[node.operands[0]]};")
            continue
        if node.op in ("rf_write", "mem_write"):
            sec["seq"].extend(_write_port(node, args, g.arrays[node.attrs[0]], w))
            continue
        if node.op == "input":
            continue
        sec["decl"].append(_decl("wire", node.width, name))
        sec["assign"].append(f"assign {name} = {_expr(node, args, w, g)};")

    # staging chains: positions past the deepest core consumer belong to the harness
    for nid in sorted(design.staging):
        depth = design.staging[nid]
        core_depth = design.staging_core.get(nid, 0)
        width = nodes[nid].width
        for k in range(1, depth + 1):
            sec = body["core"] if k <= core_depth else body["harness"]
            reg = f"{names[nid]}_s{k}"
            prev = names[nid] if k == 1 else f"{names[nid]}_s{k - 1}"
            sec["decl"].append(_decl("reg", width, reg))
            sec["reset"].append(f"{reg} <= {width}'h0;")
            sec["seq"].append(f"{reg} <= {prev};")
    for tap in sorted(design.feedback_flops):
        flops = design.feedback_flops[tap]
        node = nodes[tap]
        sec = section(node.section)
        src = names[node.operands[0]]
        for k in range(1, flops + 1):
            reg = f"{names[tap]}_f{k}"
            prev = src if k == 1 else f"{names[tap]}_f{k - 1}"
            sec["decl"].append(_decl("reg", node.width, reg))
            sec["reset"].append(f"{reg} <= {node.width}'h0;")
            sec["seq"].append(f"{reg} <= {prev};")

    for name, nid in g.outputs.items():
        section(nodes[nid].section)["assign"].append(f"assign {name} = {names[nid]};")

    for s in _SECTIONS:
        b = body[s]
        out.append("")
        out.append(SECTION_MARK.format(s))
        out.extend(b["decl"])
        out.extend(b["assign"])
        if b["seq"]:
            out.append("always @(posedge clk) begin")
            if b["reset"]:
                out.append("  if (rst) begin")
                out.extend(f"    {line}" for line in b["reset"])
                out.append("  end else begin")
                out.extend(f"    {line}" for line in b["seq"])
                out.append("  end")
            else:
                out.extend(f"  {line}" for line in b["seq"])
            out.append("end")
    out.append("")
    out.append("endmodule")
    return "\n".join(out) + "\n"


def _const(width: int, value: int) -> str:
    return f"{width}'h{value:x}"


def _expr(node: Node, a: list[str], w: Sequence[int], g) -> str:
    op = node.op
    binary = {"add": "+", "sub": "-", "and": "&", "or": "|", "xor": "^",
              "shl": "<<", "srl": ">>", "eq": "==", "lt_u": "<"}
    if op == "const":
        return _const(node.width, node.attrs[0])
    if op in binary:
        return f"{a[0]} {binary[op]} {a[1]}"
    if op == "sra":
        return f"$unsigned($signed({a[0]}) >>> {a[1]})"
    if op == "lt_s":
        return f"$signed({a[0]}) < $signed({a[1]})"
    if op == "mux":
        return f"{a[0]} ? {a[1]} : {a[2]}"
    if op == "slice":
        hi, lo = node.attrs
        return f"{a[0]}[{hi}:{lo}]"
    if op == "concat":
        return "{" + ", ".join(a) + "}"
    if op in ("sext", "zext"):
        src_w = w[node.operands[0]]
        pad = node.width - src_w
        if pad == 0:
            return a[0]
        fill = f"{a[0]}[{src_w - 1}]" if op == "sext" else "1'b0"
        return f"{{{{{pad}{{{fill}}}}}, {a[0]}}}"
    if op == "rf_read":
        decl = g.arrays[node.attrs[0]]
        return f"{decl.name}[{_index(a[0], w[node.operands[0]], decl.depth)}]"
    if op == "mem_read":
        decl = g.arrays[node.attrs[0]]
        return f"{decl.name}[{_word_index(a[0], w[node.operands[0]], decl.depth)}]"
    if op == "feedback":
        return a[0]
    raise UnsupportedNode(f"n{node.id}: cannot emit op {op!r}")


def _index(addr: str, width: int, depth: int) -> str:
    """Array index with modulo wrap; plain when the address width already wraps."""
    if 1 << width == depth:
        return addr
    return f"{addr} % {width}'d{depth}" if depth < 1 << width else addr


def _word_index(addr: str, width: int, depth_bytes: int) -> str:
    words = depth_bytes // 4
    if words & (words - 1) == 0:
        bits = words.bit_length() - 1
        return f"{addr}[{bits + 1}:2]" if bits else "0"
    return f"({addr} >> 2) % {width}'d{words}"


def _write_port(node: Node, a: list[str], decl, w: Sequence[int]) -> list[str]:
    if node.op == "rf_write":
        idx = _index(a[1], w[node.operands[1]], decl.depth)
        return [f"if ({a[0]}) {decl.name}[{idx}] <= {a[2]};"]
    idx = _word_index(a[1], w[node.operands[1]], decl.depth)
    lines = [f"if ({a[0]}) begin"]
    for i in range(4):
        lines.append(f"  if ({a[3]}[{i}]) {decl.name}[{idx}][{8 * i + 7}:{8 * i}] <= {a[2]}[{8 * i + 7}:{8 * i}];")
    lines.append("end")
    return lines


# --------------------------------------------------------------------------
# Size measurement

_COMMENT = re.compile(r"//[^\n]*|/\*.*?\*/", re.S)
_SPACE = re.compile(r"\s+")


def strip_text(text: str) -> str:
    """Remove comments and collapse whitespace runs to single spaces."""
    return _SPACE.sub(" ", _COMMENT.sub("", text)).strip()


def section_text(verilog: str, name: str) -> str:
    marker = SECTION_MARK.format(name)
    start = verilog.index(marker) + len(marker)
    nxt = verilog.find("// ==== section:", start)
    end = verilog.rfind("endmodule") if nxt < 0 else nxt
    return verilog[start:end]


def section_chars(verilog: str, name: str) -> int:
    return len(strip_text(section_text(verilog, name)))


@dataclass(frozen=True)
class SizeRow:
    config: str
    construction_ops: int
    core_ops: int
    harness_ops: int
    log_digest: str
    staging_registers: int
    staging_bits: int
    core_staging_registers: int
    harness_staging_registers: int
    core_chars: int
    harness_chars: int


@dataclass(frozen=True)
class SizeReport:
    rows: tuple[SizeRow, ...]

    def growth(self, column: str) -> float:
        first, last = getattr(self.rows[0], column), getattr(self.rows[-1], column)
        return last / first if first else float("inf")

    def chars_per_op(self) -> list[float]:
        """Emitted harness characters per harness construction operation, per row."""
        return [r.harness_chars / r.harness_ops if r.harness_ops else 0.0 for r in self.rows]

    def to_json(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "harness_chars_per_op": self.chars_per_op(),
            "core_growth": self.growth("core_chars"),
            "harness_growth": self.growth("harness_chars"),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def format_text(self, color: bool = False) -> str:
        cols = [("config", "config"), ("construction_ops", "graph ops"), ("staging_registers", "stg regs"),
                ("staging_bits", "stg bits"), ("core_staging_registers", "core stg"),
                ("harness_staging_registers", "harness stg"), ("core_chars", "core chars"),
                ("harness_chars", "harness chars")]
        table = [[h for _, h in cols]] + [[str(getattr(r, c)) for c, _ in cols] for r in self.rows]
        widths = [max(len(row[i]) for row in table) for i in range(len(cols))]
        lines = []
        for i, row in enumerate(table):
            cells = [row[0].ljust(widths[0])] + [c.rjust(wd) for c, wd in zip(row[1:], widths[1:])]
            line = "  ".join(cells)
            if color and i == 0:
                line = f"\033[1m{line}\033[0m"
            lines.append(line)
        lines.append(f"growth (last/first): core {self.growth('core_chars'):.3f}, "
                     f"harness {self.growth('harness_chars'):.3f}")
        ratios = ", ".join(f"{r.config} {x:.1f}" for r, x in zip(self.rows, self.chars_per_op()))
        lines.append(f"harness chars per construction op: {ratios}")
        return "\n".join(lines)


def size_report(configs: Sequence) -> SizeReport:
    """Build, attach the harness, elaborate, emit and measure each config."""
    from .core import build_core
    from .harness import attach_rvfi
    from .stagegraph import elaborate

    if not configs:
        raise ValueError("size_report needs at least one config")
    rows = []
    for cfg in configs:
        graph = attach_rvfi(build_core(cfg))
        design = elaborate(graph, cfg.stage_map)
        text = emit_verilog(design)
        core_stats = design.staging_stats("core")
        harness_stats = design.staging_stats("harness")
        rows.append(SizeRow(
            config=f"{cfg.stage_map.name} L={cfg.mem_latency}",
            construction_ops=len(graph.log),
            core_ops=sum(1 for line in graph.log if line.startswith("[core]")),
            harness_ops=sum(1 for line in graph.log if line.startswith("[harness]")),
            log_digest=graph.log_digest(),
            staging_registers=design.staging_registers,
            staging_bits=design.staging_bits,
            core_staging_registers=core_stats["registers"],
            harness_staging_registers=harness_stats["registers"],
            core_chars=section_chars(text, "core"),
            harness_chars=section_chars(text, "harness"),
        ))
    return SizeReport(tuple(rows))
