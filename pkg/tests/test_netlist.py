import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from circuit_sizer.netlist import (FEATURE_DIM, NODE_KINDS, NetlistError, build_graph, node_features,
                                   normalized_adjacency, parse_netlist, to_dot)

from conftest import TOY_TWO, dense_adjacency_oracle


def test_toy_two_graph_has_four_nodes_and_expected_edges(toy_two):
    g = build_graph(toy_two)
    assert [n.name for n in g.nodes] == ["M1", "M2", "VDD", "GND"]
    # M1-M2 share a and b; M2 touches vdd; M1 touches gnd
    expected = np.array([[0, 1, 0, 1],
                         [1, 0, 1, 0],
                         [0, 1, 0, 0],
                         [1, 0, 0, 0]])
    np.testing.assert_array_equal(g.adjacency, expected)
    assert toy_two.num_params == 4


def test_builtin_circuits_have_published_parameter_counts(opamp, rfpa):
    assert opamp.num_params == 15
    assert rfpa.num_params == 14
    assert build_graph(opamp).num_nodes == 11
    assert build_graph(rfpa).num_nodes == 10


@pytest.mark.parametrize("fixture", ["opamp", "rfpa", "toy_two", "toy_five"])
def test_adjacency_matches_dense_oracle(fixture, request):
    netlist = request.getfixturevalue(fixture)
    g = build_graph(netlist)
    names, oracle = dense_adjacency_oracle(netlist)
    assert [n.name for n in g.nodes] == names
    np.testing.assert_array_equal(g.adjacency, oracle)
    assert np.all(g.adjacency == g.adjacency.T)
    assert np.all(np.diag(g.adjacency) == 0)


def test_normalized_adjacency_matches_brute_force(toy_five):
    g = build_graph(toy_five)
    a = g.adjacency.astype(float)
    n = len(a)
    a_hat = a + np.eye(n)
    deg = a_hat.sum(axis=1)
    expected = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            expected[i, j] = a_hat[i, j] / np.sqrt(deg[i] * deg[j])
    assert np.max(np.abs(normalized_adjacency(g) - expected)) <= 1e-9


def test_parameter_bijection(opamp):
    g = build_graph(opamp)
    targets = sorted(g.param_index.values())
    assert targets == list(range(opamp.num_params))
    assert len(set(g.param_index)) == opamp.num_params
    for (node, slot), k in g.param_index.items():
        assert g.nodes[node].param_indices[slot] == k
        assert opamp.params[k].device == g.nodes[node].name


def test_build_is_deterministic(opamp):
    a, b = build_graph(opamp), build_graph(opamp)
    assert [n.name for n in a.nodes] == [n.name for n in b.nodes]
    np.testing.assert_array_equal(a.adjacency, b.adjacency)
    assert to_dot(a) == to_dot(b)


def test_node_features_layout(toy_five):
    g = build_graph(toy_five)
    x = node_features(g, toy_five.init_values)
    assert x.shape == (5, FEATURE_DIM)
    np.testing.assert_array_equal(x[:, :len(NODE_KINDS)].sum(axis=1), np.ones(5))
    # M1.W = 10 in [1, 20]
    assert x[0, len(NODE_KINDS)] == pytest.approx(9 / 19)
    # resistor normalized on log scale
    assert x[2, len(NODE_KINDS)] == pytest.approx(np.log(1.5 / 0.1) / np.log(100))
    assert x[2, len(NODE_KINDS) + 1] == 0.0
    # supply voltage divided by the largest magnitude, ground 0
    assert x[3, len(NODE_KINDS)] == 1.0
    assert x[4, len(NODE_KINDS)] == 0.0


def test_node_features_batch_matches_single(opamp, rng):
    g = build_graph(opamp)
    batch = rng.uniform(opamp.lower, opamp.upper, size=(3, opamp.num_params))
    xb = node_features(g, batch)
    for k in range(3):
        np.testing.assert_array_equal(xb[k], node_features(g, batch[k]))


def test_integer_inference_and_midpoint(opamp):
    names = opamp.param_names
    assert opamp.integer_mask[names.index("M1.W")]
    assert opamp.integer_mask[names.index("M1.F")]
    assert not opamp.integer_mask[names.index("CC.C")]
    mid = opamp.midpoint()
    assert mid[names.index("M1.W")] == 50.0  # floor(50.5)
    assert mid[names.index("M1.F")] == 17.0
    assert mid[names.index("CC.C")] == pytest.approx(5.05)


@pytest.mark.parametrize("text, fragment", [
    ("", "no devices"),
    ("# only a comment\n", "no devices"),
    ("DEVICE M1 BJT a b PARAM W=1 BOUNDS 1 2 STEP 1", "unknown device kind"),
    ("DEVICE M1 NMOS a b PARAM W=1 BOUNDS 2 1 STEP 1 PARAM F=1 BOUNDS 1 2 STEP 1", "min < max"),
    ("DEVICE M1 NMOS a b PARAM W=1 BOUNDS 1 2 STEP 0 PARAM F=1 BOUNDS 1 2 STEP 1", "positive"),
    ("DEVICE M1 NMOS a b PARAM W=5 BOUNDS 1 2 STEP 1 PARAM F=1 BOUNDS 1 2 STEP 1", "outside its bounds"),
    ("DEVICE M1 NMOS a b PARAM W=1 BOUNDS 1 2 STEP 1", "exactly 2"),
    ("DEVICE C1 CAP a b PARAM C=1 BOUNDS 1 2 STEP 1 PARAM D=1 BOUNDS 1 2 STEP 1", "exactly 1"),
    ("DEVICE M1 NMOS a b PARAM W=x BOUNDS 1 2 STEP 1 PARAM F=1 BOUNDS 1 2 STEP 1", "expected a number"),
    ("DEVICE C1 CAP a b PARAM C=1 BOUNDS 1 2 STEP 1\nDEVICE C1 CAP a b PARAM C=1 BOUNDS 1 2 STEP 1",
     "duplicate"),
    ("WIRE a b", "unknown statement"),
])
def test_grammar_errors(text, fragment):
    with pytest.raises(NetlistError, match=fragment):
        parse_netlist(text)


def test_error_reports_line_number():
    with pytest.raises(NetlistError) as info:
        parse_netlist("SUPPLY GND gnd\n\nDEVICE M1 FOO a b")
    assert info.value.line == 3
    assert "line 3" in str(info.value)


def test_undeclared_net_rejected():
    net = parse_netlist(TOY_TWO.replace("M2 PMOS a b vdd", "M2 PMOS a q vdd"))
    with pytest.raises(NetlistError, match="undeclared net 'b'"):
        build_graph(net)


def test_port_allows_dangling_net():
    text = TOY_TWO.replace("M2 PMOS a b vdd", "M2 PMOS a q vdd") + "PORT b q\n"
    assert build_graph(parse_netlist(text)).num_nodes == 4


def test_dot_lists_every_edge(opamp):
    g = build_graph(opamp)
    dot = to_dot(g)
    assert dot.count(" -- ") == int(g.adjacency.sum() // 2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=6))
def test_random_netlists_match_oracle(pairs):
    lines = ["SUPPLY GND n0", "PORT n0 n1 n2 n3"]
    for k, (a, b) in enumerate(pairs):
        lines.append(f"DEVICE R{k} RES n{a} n{b} PARAM R=1 BOUNDS 0.5 2 STEP 0.1")
    netlist = parse_netlist("\n".join(lines))
    g = build_graph(netlist)
    _, oracle = dense_adjacency_oracle(netlist)
    np.testing.assert_array_equal(g.adjacency, oracle)
    a_star = normalized_adjacency(g)
    assert np.allclose(a_star, a_star.T)
    # largest eigenvalue of the normalized adjacency with self loops is 1
    assert np.max(np.linalg.eigvalsh(a_star)) == pytest.approx(1.0)
