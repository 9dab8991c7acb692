"""Shared fixtures: corpus loading and small problem builders.

Expected values asserted in the test modules were frozen from hand
derivations or from independent reference computations (tiny quadratic
programs solved on paper, Runge-Kutta references coded inline) before the
tests were written.
"""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from mfbslq import load_spec, load_spec_file

SPEC_DIR = Path(__file__).resolve().parent.parent / "specs"
CORPUS = ("s1", "m1", "m1_random", "d2")


def corpus_path(name: str) -> Path:
    return SPEC_DIR / f"{name}.json"


def constant(value) -> dict:
    return {"form": "constant", "value": value}


def scalar_spec_doc(*, A=0.0, A_bar=0.0, B=1.0, B_bar=0.0, C=0.0, C_bar=0.0,
                    Q=0.0, Q_bar=0.0, R=1.0, R_bar=0.0, N=1.0, N_bar=0.0,
                    G=0.0, terminal=None, T=1.0, delta=0.5) -> dict:
    """A fully scalar problem document with constant coefficients."""
    return {
        "n": 1, "m": 1, "T": T, "delta": delta,
        "dynamics": {"A": constant(A), "A_bar": constant(A_bar),
                     "B": constant(B), "B_bar": constant(B_bar),
                     "C": constant(C), "C_bar": constant(C_bar)},
        "cost": {"Q": constant(Q), "Q_bar": constant(Q_bar),
                 "R": constant(R), "R_bar": constant(R_bar),
                 "N": constant(N), "N_bar": constant(N_bar), "G": G},
        "terminal": terminal
        if terminal is not None else {"form": "poly_in_WT", "coeffs": [0.0]},
    }


def scalar_spec(**kwargs):
    return load_spec(json.dumps(scalar_spec_doc(**kwargs)))


def barred_zero_spec(name: str = "m1"):
    """A corpus spec with every mean-coupling coefficient replaced by zero."""
    raw = json.loads(corpus_path(name).read_text())
    for key in ("A_bar", "B_bar", "C_bar"):
        raw["dynamics"][key] = constant(0.0)
    for key in ("Q_bar", "R_bar", "N_bar"):
        raw["cost"][key] = constant(0.0)
    return load_spec(json.dumps(raw))


@pytest.fixture(scope="session")
def s1():
    return load_spec_file(corpus_path("s1"))


@pytest.fixture(scope="session")
def m1():
    return load_spec_file(corpus_path("m1"))


@pytest.fixture(scope="session")
def m1_random():
    return load_spec_file(corpus_path("m1_random"))


@pytest.fixture(scope="session")
def d2():
    return load_spec_file(corpus_path("d2"))


@pytest.fixture(scope="session")
def corpus(s1, m1, m1_random, d2):
    return {"s1": s1, "m1": m1, "m1_random": m1_random, "d2": d2}
