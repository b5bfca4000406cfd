import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anoca.network import (Bus, BusKind, NetworkParseError, NetworkValidationError, Phase,
                           assemble_admittance, line_pu_block, network_to_dict, parse_network,
                           parse_phases, serialize_network, transformer_from_pct, validate)

from conftest import DATA, random_feeder

TWO_BUS = """\
[system]
name two
base_mva 1.0

[bus]
s abc slack 2.4 0.95 1.05
x abc load 2.4 0.95 1.05

[line]
s x abc 400 z 0.3 0.1 0.1 0.3 0.1 0.3 0.6 0.2 0.2 0.6 0.2 0.6

[load]
x abc 10,20,30 1,2,3
"""


def codes(model):
    return sorted(d.code for d in validate(model))


@pytest.mark.parametrize("name", ["toy2", "ieee4", "ieee4_anoca", "mesh60"])
def test_shipped_fixtures_validate(name):
    model = parse_network((DATA / f"{name}.net").read_text())
    assert validate(model) == []


@pytest.mark.parametrize("name", ["toy2", "ieee4_anoca", "mesh60"])
def test_text_round_trip_is_exact(name):
    model = parse_network((DATA / f"{name}.net").read_text())
    again = parse_network(serialize_network(model))
    assert again == model


def test_json_round_trip_matches_text(ieee4_anoca):
    doc = json.dumps(network_to_dict(ieee4_anoca))
    assert parse_network(doc, fmt="json") == ieee4_anoca


def test_impedance_form_inverts_to_admittance():
    model = parse_network(TWO_BUS)
    z = np.array([[0.3, 0.1, 0.1], [0.1, 0.3, 0.1], [0.1, 0.1, 0.3]]) \
        + 1j * np.array([[0.6, 0.2, 0.2], [0.2, 0.6, 0.2], [0.2, 0.2, 0.6]])
    np.testing.assert_allclose(model.lines[0].y_block @ z, np.eye(3), atol=1e-12)


def test_parse_error_reports_line_and_column():
    bad = TWO_BUS.replace("x abc 10,20,30 1,2,3", "x abc 10,twenty,30 1,2,3")
    with pytest.raises(NetworkParseError) as exc:
        parse_network(bad)
    assert exc.value.line == 13
    assert exc.value.column == 7


def test_unknown_section_rejected():
    with pytest.raises(NetworkParseError, match="unknown section"):
        parse_network("[busses]\n")


def test_broken_reference_is_a_diagnostic_not_a_crash():
    model = parse_network(TWO_BUS.replace("s x abc 400", "s y abc 400"), check=False)
    assert "unknown-bus" in codes(model)
    with pytest.raises(NetworkValidationError):
        parse_network(TWO_BUS.replace("s x abc 400", "s y abc 400"))


def test_phase_mismatch_and_unreachable_bus():
    text = TWO_BUS.replace("x abc load", "x ab load").replace("[load]\nx abc", "[load]\nx ab") \
        .replace("10,20,30 1,2,3", "10,20 1,2")
    assert "phase-mismatch" in codes(parse_network(text, check=False))
    island = TWO_BUS + "\n[bus]\nz a load 2.4 0.95 1.05\n"
    assert "unreachable" in codes(parse_network(island, check=False))


def test_missing_or_duplicate_slack():
    assert "no-slack" in codes(parse_network(TWO_BUS.replace("slack", "load"), check=False))
    dup = TWO_BUS.replace("x abc load", "x abc slack")
    assert "duplicate-slack" in codes(parse_network(dup, check=False))


def test_prosumer_checks():
    text = TWO_BUS + "\n[prosumer]\nx a 50 0 A 10 5 0.9 0.9 20\n"
    got = codes(parse_network(text, check=False))
    assert "weight" in got and "battery" in got
    on_slack = TWO_BUS + "\n[prosumer]\ns a 50 1 A 10 5 0.9 0.9 5\n"
    got = codes(parse_network(on_slack, check=False))
    assert "prosumer-slack" in got


def test_transformer_percent_impedance_on_own_rating():
    kv = 4.16 / math.sqrt(3)
    tr = transformer_from_pct("p", "s", parse_phases("abc"), kv, 6000.0, 1.0, 6.0)
    z_base = (kv * 1e3) ** 2 / 2e6
    assert 1 / complex(tr.series_g, tr.series_b) == pytest.approx(complex(0.01, 0.06) * z_base)


@given(st.integers(0, 10_000), st.booleans())
@settings(max_examples=25, deadline=None)
def test_admittance_rows_sum_to_zero_without_shunts(seed, meshed):
    # series-only branches at unity tap carry no current under a common voltage
    model = random_feeder(seed, n_buses=7, ties=1 if meshed else 0)
    adm = assemble_admittance(model)
    Y = adm.complex_matrix({}).toarray()
    v = np.array([np.exp(1j * ph.angle) for _, ph in adm.nodes])
    np.testing.assert_allclose(Y @ v, 0.0, atol=1e-9)
    np.testing.assert_allclose(Y, Y.T, atol=1e-12)


def test_per_unit_block_scales_by_impedance_base(toy2):
    y_pu = line_pu_block(toy2, toy2.lines[0])
    z_pu = 1 / y_pu[0, 0]
    assert z_pu * toy2.z_base("house") == pytest.approx(2.0 + 1.0j)


def test_node_phase_order_is_document_order():
    model = parse_network(TWO_BUS)
    assert model.node_phases()[:4] == [("s", Phase.A), ("s", Phase.B), ("s", Phase.C), ("x", Phase.A)]
    assert model.slack == Bus("s", parse_phases("abc"), BusKind.SLACK, 2.4)
