import numpy as np
import pytest

from edproxy.grid import Branch, Bus, Generator, SystemCase, compute_ptdf


TWO_BUS_CASE = """\
function mpc = case2
mpc.version = '2';
mpc.baseMVA = 100;
%% bus data
mpc.bus = [
    1  3  0    0  0  0  1  1  0  230  1  1.1  0.9;
    2  1  120  0  0  0  1  1  0  230  1  1.1  0.9;
];
mpc.gen = [
    1  0  0  50  -50  1  100  1  150  0;
];
mpc.branch = [
    1  2  0.01  0.1  0  40  0  0  0  0  1  -360  360;
];
mpc.gencost = [
    2  0  0  2  10  0;
];
"""

THREE_BUS_RING_CASE = """\
function mpc = case3ring
mpc.baseMVA = 100;
mpc.bus = [
    1  3  0    0  0  0  1  1  0  230  1  1.1  0.9;
    2  1  100  0  0  0  1  1  0  230  1  1.1  0.9;
    3  1  80   0  0  0  1  1  0  230  1  1.1  0.9;
];
mpc.gen = [
    1  0  0  50  -50  1  100  1  120  0;
    2  0  0  50  -50  1  100  1  120  0;
    3  0  0  50  -50  1  100  1  120  0;
];
mpc.branch = [
    1  2  0.0  0.1  0  30  0  0  0  0  1  -360  360;
    2  3  0.0  0.1  0  30  0  0  0  0  1  -360  360;
    3  1  0.0  0.1  0  30  0  0  0  0  1  -360  360;
];
mpc.gencost = [
    2  0  0  2  10  0;
    2  0  0  2  20  0;
    2  0  0  2  30  0;
];
"""


@pytest.fixture
def two_bus_text():
    return TWO_BUS_CASE


@pytest.fixture
def ring_text():
    return THREE_BUS_RING_CASE


def make_random_network_case(rng: np.random.Generator, n_bus: int,
                             extra_chords: int = 1, limit_scale: float = 1.0) -> SystemCase:
    """Ring-plus-chords case with one generator per bus, minimums at zero."""
    buses = [Bus(id=i + 1, demand_pu=float(rng.uniform(0.2, 0.6))) for i in range(n_bus)]
    branches = [Branch(from_bus=i + 1, to_bus=(i + 1) % n_bus + 1,
                       reactance_pu=float(rng.uniform(0.05, 0.25)),
                       flow_min_pu=-2.0 * limit_scale, flow_max_pu=2.0 * limit_scale)
                for i in range(n_bus)]
    for _ in range(extra_chords):
        f = int(rng.integers(1, n_bus + 1))
        t = int(rng.integers(1, n_bus + 1))
        if f == t:
            t = f % n_bus + 1
        lim = float(rng.uniform(0.4, 0.8)) * limit_scale
        branches.append(Branch(from_bus=f, to_bus=t, reactance_pu=float(rng.uniform(0.05, 0.25)),
                               flow_min_pu=-lim, flow_max_pu=lim))
    gens = []
    for i in range(n_bus):
        pmax = float(rng.uniform(0.4, 1.1))
        gens.append(Generator(bus=i + 1, p_min_pu=0.0, p_max_pu=pmax, r_max_pu=pmax,
                              cost_linear=float(rng.uniform(5.0, 40.0))))
    case = SystemCase(base_mva=100.0, buses=buses, branches=branches,
                      generators=gens, slack_bus=1)
    case.ptdf = compute_ptdf(case)
    return case


@pytest.fixture
def desk_case():
    """Synthetic 30-generator case used by the desk-scale experiments."""
    return make_random_network_case(np.random.default_rng(2024), n_bus=30, extra_chords=4)
