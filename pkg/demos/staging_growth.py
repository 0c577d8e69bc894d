"""How staging registers grow with pipeline depth while the source stays fixed.

Sweeps every monotone split of the seven virtual stages into 1..7 physical
stages that keeps consecutive stages at most one apart, and prints the
staging cost of the core and of the attached harness.
"""
import itertools
from collections import defaultdict

from warpkit.core import CoreConfig, build_core
from warpkit.harness import attach_rvfi
from warpkit.stagegraph import StageMap, elaborate

graph = attach_rvfi(build_core(CoreConfig()))
by_depth = defaultdict(list)
for steps in itertools.product((0, 1), repeat=6):
    phys = tuple(itertools.accumulate((0,) + steps))
    design = elaborate(graph, StageMap(phys))
    by_depth[phys[-1] + 1].append((design.staging_stats("core")["registers"],
                                   design.staging_stats("harness")["registers"]))

print("stages  maps  core regs (min..max)  harness regs (min..max)")
for depth in sorted(by_depth):
    rows = by_depth[depth]
    core = [c for c, _ in rows]
    harness = [h for _, h in rows]
    print(f"{depth:6d}  {len(rows):4d}  {min(core):8d}..{max(core):<8d}  {min(harness):10d}..{max(harness)}")
