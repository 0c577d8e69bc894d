import pytest

from warpkit import isa
from warpkit.core import CoreConfig
from warpkit.stagegraph import PRESETS

# ALU, store, load, load-use, taken branch and ebreak; every instruction retires.
SMOKE_SOURCE = """
    addi x1, x0, 5
    addi x2, x0, 7
    add  x3, x1, x2
    lui  x31, 0x8
    sw   x3, 0(x31)
    lw   x4, 0(x31)
    add  x5, x4, x1
    beq  x5, x5, next
next:
    sub  x7, x5, x2
    xori x8, x7, -1
    ebreak
"""
SMOKE = isa.assemble(SMOKE_SOURCE)

PRESET_IDS = sorted(PRESETS)
LATENCIES = (1, 2, 5)


def config(stages: int, latency: int = 1, **kw) -> CoreConfig:
    return CoreConfig(stage_map=PRESETS[stages], mem_latency=latency, **kw)


@pytest.fixture(params=PRESET_IDS, ids=lambda n: f"{n}-stage")
def preset(request):
    return request.param
