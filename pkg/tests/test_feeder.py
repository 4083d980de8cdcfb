from __future__ import annotations

import copy
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from endico import data_path
from endico.feeder import (
    DerMode,
    FeederError,
    Scenario,
    feeder_from_dict,
    feeder_to_dict,
    load_feeder,
    load_profile_csv,
    load_scenario,
    save_feeder,
    topology_order,
    write_profile_csv,
)
from endico.validation import random_feeder

from .conftest import chain, vvc_der


def test_minimal_two_bus(two_bus):
    assert len(two_bus.buses) == 2
    assert len(two_bus.lines) == 1
    assert two_bus.root == "root"
    assert topology_order(two_bus) == ["root", "leaf"]


def test_cycle_rejected(two_bus_doc):
    doc = copy.deepcopy(two_bus_doc)
    doc["buses"].append({"id": "c", "parent": "leaf"})
    doc["lines"].append({"from": "leaf", "to": "c", "r_pu": 0.01, "x_pu": 0.01, "ampacity_sq_pu": 1.0})
    doc["lines"].append({"from": "c", "to": "root", "r_pu": 0.01, "x_pu": 0.01, "ampacity_sq_pu": 1.0})
    with pytest.raises(FeederError, match="cycle detected"):
        feeder_from_dict(doc)


def test_parent_loop_without_root_link_rejected():
    doc = {
        "buses": [{"id": "r", "parent": None}, {"id": "a", "parent": "b"}, {"id": "b", "parent": "a"}],
        "lines": [
            {"from": "b", "to": "a", "r_pu": 0.01, "x_pu": 0.01, "ampacity_sq_pu": 1.0},
        ],
    }
    with pytest.raises(FeederError, match="cycle detected"):
        feeder_from_dict(doc)


@pytest.mark.parametrize(
    "mutate, needle",
    [
        (lambda d: d["buses"].append({"id": "leaf", "parent": "root"}), "duplicate bus id 'leaf'"),
        (lambda d: d["buses"].append({"id": "x", "parent": "ghost"}), "orphan bus 'x'"),
        (lambda d: d["lines"][0].update(r_pu=-0.01), "root->leaf"),
        (lambda d: d["lines"][0].update(r_pu=0.0, x_pu=0.0), "nonpositive impedance"),
        (lambda d: d["lines"][0].update(ampacity_sq_pu=0.0), "ampacity"),
        (lambda d: d["lines"][0].pop("x_pu"), "missing x_pu or x_ohm"),
        (lambda d: d["lines"].clear(), "no line from its parent"),
    ],
)
def test_validation_names_offender(two_bus_doc, mutate, needle):
    doc = copy.deepcopy(two_bus_doc)
    mutate(doc)
    with pytest.raises(FeederError, match=needle):
        feeder_from_dict(doc)


def test_malformed_json(tmp_path):
    p = tmp_path / "f.json"
    p.write_text("{not json")
    with pytest.raises(FeederError, match="malformed JSON"):
        load_feeder(p)


def test_chain_with_vvc_der_roundtrip(tmp_path):
    built = chain(3, r=0.02, x=0.04, loads={1: (0.3, 0.15), 2: (0.3, 0.15)}, ders={2: vvc_der(0.25)})
    save_feeder(built, tmp_path / "c.json")
    loaded = load_feeder(tmp_path / "c.json")
    assert loaded == built
    assert loaded.bus("2").der.mode is DerMode.VVC


def test_ohm_file_matches_per_unit_values():
    f = load_feeder(data_path("feeder_3bus_vvc.json"))
    ln = f.line_to("1")
    assert ln.r == pytest.approx(0.02, rel=1e-9)
    assert ln.x == pytest.approx(0.04, rel=1e-9)
    i_base = 1.0e3 / (math.sqrt(3.0) * 12.47)
    assert ln.ampacity_sq == pytest.approx((200.0 / i_base) ** 2, rel=1e-12)


def test_der_rules():
    with pytest.raises(FeederError, match="rating_p"):
        chain(2, ders={1: vvc_der(0.5, s=0.4)})
    with pytest.raises(FeederError, match="VVC DER at bus '1' needs a line with x > 0"):
        chain(2, r=0.01, x=0.0, ders={1: vvc_der(0.5)})
    with pytest.raises(FeederError, match="root"):
        chain(2, ders={0: vvc_der(0.5)})


def test_binary_tree_order():
    doc = {"buses": [{"id": "1", "parent": None}], "lines": []}
    for k in range(2, 8):
        doc["buses"].append({"id": str(k), "parent": str(k // 2)})
        doc["lines"].append({"from": str(k // 2), "to": str(k), "r_pu": 0.01, "x_pu": 0.01, "ampacity_sq_pu": 1.0})
    f = feeder_from_dict(doc)
    order = topology_order(f)
    pos = {b: i for i, b in enumerate(order)}
    assert sorted(order) == [str(k) for k in range(1, 8)]
    assert all(pos[str(k // 2)] < pos[str(k)] for k in range(2, 8))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 20))
def test_random_tree_parent_precedes_child(seed, n):
    f = random_feeder(np.random.default_rng(seed), n)
    pos = {b: i for i, b in enumerate(topology_order(f))}
    for ln in f.lines:
        assert pos[ln.from_bus] < pos[ln.to_bus]
    # exactly one line into every non-root bus
    into = [ln.to_bus for ln in f.lines]
    assert sorted(into) == sorted(b.id for b in f.buses if b.parent is not None)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 15))
def test_serialize_roundtrip(seed, n):
    f = random_feeder(np.random.default_rng(seed), n)
    doc = json.loads(json.dumps(feeder_to_dict(f)))
    assert feeder_from_dict(doc) == f


# ---------------------------------------------------------------------------
# scenarios


def _scenario(**kw):
    base = dict(feeder=chain(3, ders={2: vvc_der(0.2)}), horizon=20, profile_interval_seconds=60, load_profile=(1.0, 0.5), pv_profile=(1.0, 0.2))
    base.update(kw)
    return Scenario(**base)


def test_scenario_interval_mapping():
    sc = _scenario()
    assert sc.steps_per_interval == 10
    assert [sc.interval(t) for t in (0, 9, 10, 19)] == [0, 0, 1, 1]
    assert sc.inputs(12).load_mult == 0.5
    assert sc.inputs(12).pv_mult == 0.2


@pytest.mark.parametrize(
    "kw, needle",
    [
        (dict(v_min_sq=1.1, v_max_sq=1.0), "v_min_sq"),
        (dict(alpha=-1.0), "alpha"),
        (dict(horizon=30), "horizon needs 3"),
        (dict(load_profile=(1.0, -0.1)), ">= 0"),
        (dict(profile_interval_seconds=50), "whole multiple"),
        (dict(mode="vwc"), "scenario mode vwc"),
    ],
)
def test_scenario_invariants(kw, needle):
    with pytest.raises(FeederError, match=needle):
        _scenario(**kw)


def test_profile_csv_roundtrip(tmp_path):
    write_profile_csv(tmp_path / "p.csv", [1.0, 0.7], [0.1, 0.9])
    assert load_profile_csv(tmp_path / "p.csv") == ((1.0, 0.7), (0.1, 0.9))
    (tmp_path / "bad.csv").write_text("t,a,b\n0,1,1\n")
    with pytest.raises(FeederError, match="header"):
        load_profile_csv(tmp_path / "bad.csv")


def test_load_scenario_magnitudes_and_overrides():
    sc = load_scenario(data_path("stressed_3bus_vwc.json"))
    assert sc.mode is DerMode.VWC
    assert sc.v_root_sq == pytest.approx(1.02**2)
    assert sc.v_max_sq == pytest.approx(1.05**2)
    assert sc.alpha == 10.0
    sc2 = load_scenario(data_path("stressed_3bus_vwc.json"), mode="vvc", alpha=0.0)
    assert sc2.mode is DerMode.VVC
    assert all(sc2.feeder.bus(b).der.mode is DerMode.VVC for b in sc2.feeder.der_buses)
    assert sc2.alpha == 0.0


def test_daytime_profile_shipped():
    sc = load_scenario(data_path("daytime_8bus_vvc.json"))
    assert sc.n_intervals == 30
    assert sc.steps_per_interval == 10
