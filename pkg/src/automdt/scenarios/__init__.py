"""Bottleneck fixtures: per-thread limits of 80/160/200, 205/75/195 and
200/150/70 Mbps with 1 Gbps stage caps, plus their published target tuples."""

from pathlib import Path

from ..domain import ConcurrencyTuple
from ..simulator import ScenarioSpec

HERE = Path(__file__).parent

TARGETS = {
    "read_bn": ConcurrencyTuple(13, 7, 5),
    "net_bn": ConcurrencyTuple(5, 14, 5),
    "write_bn": ConcurrencyTuple(5, 7, 15),
}

# scenario rates are Mbps; dataset sizes given in GB convert at 8000 Mb/GB
MB_PER_GB = 8000.0


def fixture_path(name: str) -> Path:
    if name not in TARGETS:
        raise KeyError(f"unknown fixture {name!r}; choose from {sorted(TARGETS)}")
    return HERE / f"{name}.json"


def load_fixture(name: str) -> ScenarioSpec:
    return ScenarioSpec.load(fixture_path(name))


def resolve_scenario(arg: str) -> ScenarioSpec:
    """Accept a fixture name (``read_bn``) or a path to a scenario JSON file."""
    p = Path(arg)
    if p.exists():
        return ScenarioSpec.load(p)
    if p.stem in TARGETS and not p.parent.parts:
        return load_fixture(p.stem)
    return ScenarioSpec.load(p)
