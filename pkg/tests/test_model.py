"""Problem parsing, coefficient realization, and standing-assumption checks."""

import json

import numpy as np
import pytest

from mfbslq import ConfigurationError, build_tree, load_spec, realize, validate_h1_h2
from conftest import constant, corpus_path, scalar_spec, scalar_spec_doc


def _doc(**kwargs):
    return scalar_spec_doc(**kwargs)


# ---------------------------------------------------------------------------
# parsing


def test_corpus_parses(corpus):
    assert corpus["s1"].n == corpus["s1"].m == 1
    assert corpus["d2"].n == 2 and corpus["d2"].m == 1
    for spec in corpus.values():
        assert spec.horizon == 1.0
        assert spec.delta == 0.5


def test_missing_field_rejected():
    doc = _doc()
    del doc["delta"]
    with pytest.raises(ConfigurationError, match="delta"):
        load_spec(json.dumps(doc))


def test_unknown_field_rejected():
    doc = _doc()
    doc["extra"] = 1
    with pytest.raises(ConfigurationError, match="unknown"):
        load_spec(json.dumps(doc))


def test_invalid_json_rejected():
    with pytest.raises(ConfigurationError, match="JSON"):
        load_spec("{not json")


def test_bad_dimensions_rejected():
    doc = _doc()
    doc["n"] = 0
    with pytest.raises(ConfigurationError):
        load_spec(json.dumps(doc))
    doc = _doc()
    doc["delta"] = -0.5
    with pytest.raises(ConfigurationError, match="delta"):
        load_spec(json.dumps(doc))


def test_unsupported_form_rejected():
    doc = _doc()
    doc["dynamics"]["A"] = {"form": "mystery", "value": 1.0}
    with pytest.raises(ConfigurationError, match="mystery"):
        load_spec(json.dumps(doc))


def test_shape_mismatch_rejected():
    doc = _doc()
    doc["dynamics"]["A"] = constant([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ConfigurationError, match="A"):
        load_spec(json.dumps(doc))


def test_coefficient_payload_keys_checked():
    doc = _doc()
    doc["dynamics"]["A"] = {"form": "constant"}
    with pytest.raises(ConfigurationError, match="missing"):
        load_spec(json.dumps(doc))
    doc["dynamics"]["A"] = {"form": "constant", "value": 0.0, "stray": 1}
    with pytest.raises(ConfigurationError, match="unknown"):
        load_spec(json.dumps(doc))


# ---------------------------------------------------------------------------
# realization of each coefficient form


def test_realize_constant_and_shapes():
    spec = scalar_spec(A=0.25, B=2.0)
    tree = build_tree(1.0, 3)
    coeffs = realize(spec, tree)
    for k in range(3):
        assert coeffs.A[k].shape == (tree.n_nodes(k), 1, 1)
        assert np.allclose(coeffs.A[k], 0.25)
        assert np.allclose(coeffs.B[k], 2.0)
    assert coeffs.xi.shape == (8, 1)
    assert np.allclose(coeffs.xi, 0.0)


def test_realize_time_table():
    doc = _doc()
    doc["dynamics"]["A"] = {"form": "time_table", "values": [0.1, 0.2, 0.3]}
    spec = load_spec(json.dumps(doc))
    coeffs = realize(spec, build_tree(1.0, 3))
    assert np.allclose(coeffs.A[0], 0.1)
    assert np.allclose(coeffs.A[2], 0.3)
    with pytest.raises(ConfigurationError, match="time_table"):
        realize(spec, build_tree(1.0, 4))


def test_realize_affine_tanh_of_walk():
    doc = _doc()
    doc["dynamics"]["A"] = {"form": "affine_tanh_W", "m0": 0.1, "m1": 0.1}
    spec = load_spec(json.dumps(doc))
    tree = build_tree(1.0, 2)
    coeffs = realize(spec, tree)
    w1 = tree.brownian(1)
    assert np.allclose(coeffs.A[1][:, 0, 0], 0.1 + 0.1 * np.tanh(w1))


def test_realize_tanh_polynomial_of_walk():
    doc = _doc()
    doc["cost"]["N"] = {"form": "tanh_poly_W", "coeffs": [1.0, 0.0, 0.25]}
    spec = load_spec(json.dumps(doc))
    tree = build_tree(1.0, 2)
    coeffs = realize(spec, tree)
    th = np.tanh(tree.brownian(1))
    assert np.allclose(coeffs.N[1][:, 0, 0], 1.0 + 0.25 * th**2)


def test_realize_node_table():
    doc = _doc()
    doc["dynamics"]["A"] = {"form": "node_table", "values": [[0.5], [0.1, 0.9]]}
    spec = load_spec(json.dumps(doc))
    coeffs = realize(spec, build_tree(1.0, 2))
    assert np.allclose(coeffs.A[0][:, 0, 0], [0.5])
    assert np.allclose(coeffs.A[1][:, 0, 0], [0.1, 0.9])
    with pytest.raises(ConfigurationError, match="node_table"):
        realize(spec, build_tree(1.0, 3))


def test_realize_terminal_forms():
    tree = build_tree(1.0, 2)
    w = tree.brownian(2)

    spec = scalar_spec(terminal={"form": "affine_in_WT", "g0": 1.0, "g1": 2.0})
    assert np.allclose(realize(spec, tree).xi[:, 0], 1.0 + 2.0 * w)

    spec = scalar_spec(terminal={"form": "poly_in_WT", "coeffs": [0.0, 0.0, 1.0]})
    assert np.allclose(realize(spec, tree).xi[:, 0], w**2)

    spec = scalar_spec(terminal={"form": "leaf_table",
                                 "values": [1.0, 2.0, 3.0, 4.0]})
    assert np.allclose(realize(spec, tree).xi[:, 0], [1.0, 2.0, 3.0, 4.0])
    with pytest.raises(ConfigurationError, match="leaf_table"):
        realize(spec, build_tree(1.0, 3))


def test_realize_matrix_valued_terminal(d2):
    tree = build_tree(1.0, 3)
    coeffs = realize(d2, tree)
    w = tree.brownian(3)
    assert np.allclose(coeffs.xi[:, 0], 1.0 + 0.5 * w)
    assert np.allclose(coeffs.xi[:, 1], 0.5 - 0.25 * w)


# ---------------------------------------------------------------------------
# assumption validation


def _report(spec, nt=4):
    tree = build_tree(spec.horizon, nt)
    return validate_h1_h2(realize(spec, tree), spec.delta)


def test_corpus_validates(corpus):
    for name, spec in corpus.items():
        report = _report(spec)
        assert report.ok, f"{name}: {report.summary()}"


def test_control_weight_below_floor_detected():
    report = _report(scalar_spec(N=0.1))
    assert not report.ok
    assert "N" in report.summary()


def test_martingale_weight_below_floor_detected():
    report = _report(scalar_spec(R=0.1))
    assert not report.ok
    assert "R" in report.summary()


def test_asymmetric_weight_detected():
    doc = _doc()
    doc["n"] = 2
    for key in ("A", "A_bar", "C", "C_bar"):
        doc["dynamics"][key] = constant([[0.0, 0.0], [0.0, 0.0]])
    doc["dynamics"]["B"] = constant([[1.0], [0.0]])
    doc["dynamics"]["B_bar"] = constant([[0.0], [0.0]])
    for key in ("Q", "Q_bar", "R_bar"):
        doc["cost"][key] = constant([[0.0, 0.0], [0.0, 0.0]])
    doc["cost"]["R"] = constant([[1.0, 0.0], [0.0, 1.0]])
    doc["cost"]["G"] = [[0.0, 0.0], [0.0, 0.0]]
    doc["terminal"] = {"form": "affine_in_WT", "g0": [0.0, 0.0], "g1": [0.0, 0.0]}
    doc["cost"]["N_bar"] = {"form": "constant", "value": 1.0}

    base = load_spec(json.dumps(doc))
    assert _report(base).ok

    doc["cost"]["Q"] = constant([[1.0, 0.5], [0.0, 1.0]])
    report = _report(load_spec(json.dumps(doc)))
    assert not report.ok and "Q" in report.summary()


def test_indefinite_state_weight_reports_eigenvalue():
    doc = _doc()
    doc["n"] = 2
    for key in ("A", "A_bar", "C", "C_bar"):
        doc["dynamics"][key] = constant([[0.0, 0.0], [0.0, 0.0]])
    doc["dynamics"]["B"] = constant([[1.0], [0.0]])
    doc["dynamics"]["B_bar"] = constant([[0.0], [0.0]])
    doc["cost"]["Q"] = constant([[1.0, 2.0], [2.0, 1.0]])
    for key in ("Q_bar", "R_bar"):
        doc["cost"][key] = constant([[0.0, 0.0], [0.0, 0.0]])
    doc["cost"]["R"] = constant([[1.0, 0.0], [0.0, 1.0]])
    doc["cost"]["G"] = [[0.0, 0.0], [0.0, 0.0]]
    doc["terminal"] = {"form": "affine_in_WT", "g0": [0.0, 0.0], "g1": [0.0, 0.0]}

    report = _report(load_spec(json.dumps(doc)))
    assert not report.ok
    text = report.summary()
    assert "Q" in text and "-1" in text


def test_nonfinite_coefficient_detected():
    doc = _doc()
    doc["dynamics"]["A"] = constant(float("1e400"))  # parses to inf
    report = _report(load_spec(json.dumps(doc)))
    assert not report.ok


def test_corpus_files_match_committed_dimensions():
    raw = json.loads(corpus_path("d2").read_text())
    assert raw["n"] == 2 and raw["m"] == 1
    raw = json.loads(corpus_path("m1_random").read_text())
    assert raw["dynamics"]["A"]["form"] == "affine_tanh_W"
    assert raw["cost"]["N"]["form"] == "tanh_poly_W"
