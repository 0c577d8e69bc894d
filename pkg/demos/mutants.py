"""Break the core on purpose and let the checker find it."""
import sys

from warpkit.checker import fuzz
from warpkit.core import CoreConfig, Mutation

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
for mutation in Mutation:
    report = fuzz(CoreConfig(mutations={mutation}, mem_latency=2), seed, 500, 100, max_failures=1)
    first = report.violations[0] if report.violations else "not detected"
    print(f"{mutation.name:22s} after {report.programs:3d} program(s): {first}")
