import numpy as np
import pytest

from trustfusion.sl_core import DirichletEvidence, MultinomialOpinion, evidence_to_opinion


def random_evidence(rng, k, scale=20.0):
    return DirichletEvidence(rng.uniform(0.0, scale, size=k))


def random_opinion(rng, k, scale=20.0):
    return evidence_to_opinion(random_evidence(rng, k, scale))


# Titanic worked example: (safe, unsafe) beliefs and uncertainty
TITANIC_VIEWS = {
    "captain": ((0.85, 0.05), 0.10),
    "dolphin": ((0.05, 0.90), 0.05),
    "polarbear": ((0.75, 0.20), 0.05),
}
TITANIC_FUSED = ((0.68, 0.31), 0.01)
# (trust, distrust, uncertainty) and printed degree of trust
TITANIC_REFERRALS = {
    "captain": ((0.6, 0.3, 0.1), 0.65),
    "dolphin": ((0.9, 0.0, 0.1), 0.95),
    "polarbear": ((0.2, 0.7, 0.1), 0.25),
}
TITANIC_DISCOUNTED = {
    "captain": ((0.55, 0.03), 0.42),
    "dolphin": ((0.04, 0.86), 0.10),
    "polarbear": ((0.19, 0.05), 0.76),
}
TITANIC_FUSED_TD = ((0.22, 0.70), 0.08)


@pytest.fixture
def rng():
    return np.random.default_rng(20240613)


@pytest.fixture
def titanic_opinions():
    return [MultinomialOpinion(b, u) for b, u in TITANIC_VIEWS.values()]


# one (criterion, passed, detail) entry per acceptance check, echoed at session end
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
