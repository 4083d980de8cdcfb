from __future__ import annotations

import math

import pytest

from endico import data_path
from endico.feeder import Bus, DerMode, DerSpec, Feeder, Line, feeder_from_dict, load_scenario


def chain(n, r=0.01, x=0.01, loads=None, ders=None, amp=math.inf):
    """Bus ids "0".."n-1" in a straight line; loads/ders keyed by int index."""
    loads = loads or {}
    ders = ders or {}
    buses = []
    for k in range(n):
        lp, lq = loads.get(k, (0.0, 0.0))
        children = (str(k + 1),) if k + 1 < n else ()
        buses.append(Bus(str(k), None if k == 0 else str(k - 1), children, lp, lq, ders.get(k)))
    lines = tuple(Line(str(k - 1), str(k), r, x, amp) for k in range(1, n))
    return Feeder(tuple(buses), lines)


def vvc_der(p, s=None):
    return DerSpec(rating_s=1.2 * p if s is None else s, rating_p=p, mode=DerMode.VVC)


def vwc_der(p, s=None):
    return DerSpec(rating_s=1.2 * p if s is None else s, rating_p=p, mode=DerMode.VWC)


def shipped(name, **overrides):
    return load_scenario(data_path(f"{name}.json"), **overrides)


@pytest.fixture
def two_bus_doc():
    return {
        "buses": [{"id": "root", "parent": None}, {"id": "leaf", "parent": "root", "load_p": 0.1, "load_q": 0.05}],
        "lines": [{"from": "root", "to": "leaf", "r_pu": 0.01, "x_pu": 0.01, "ampacity_sq_pu": 4.0}],
    }


@pytest.fixture
def two_bus(two_bus_doc):
    return feeder_from_dict(two_bus_doc)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.LINES:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.LINES:
            terminalreporter.write_line(line)
