import numpy as np
import pytest

from glmmlap.families import Family

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)


class QuadraticFamily(Family):
    """Test-only data model with log[y|w] = -0.5 * q_i (w_i - c_i)^2.

    The exponent is exactly quadratic in w, so the Laplace approximation of
    its marginal is exact; the closed form is the referee for the whole
    likelihood assembly.  Not part of the public API.
    """

    name = "quadratic"

    def __init__(self, c, q):
        self.c = np.asarray(c, dtype=float)
        self.q = np.asarray(q, dtype=float)
        self.phi = None

    def check_support(self, y):
        return np.asarray(y, dtype=float)

    def elements(self, y, w, phi=None):
        return -0.5 * self.q * (np.asarray(w, dtype=float) - self.c) ** 2

    def grad(self, y, w, phi=None):
        return -self.q * (np.asarray(w, dtype=float) - self.c)

    def hess(self, y, w, phi=None):
        return -self.q * np.ones_like(np.asarray(w, dtype=float))

    def initial_w(self, y):
        return np.asarray(y, dtype=float)


def random_pd_matrix(rng, n, scale=1.0):
    """Well-conditioned random symmetric positive definite matrix."""
    A = rng.standard_normal((n, n))
    return scale * (A @ A.T / n + np.eye(n))


def random_neighbor_matrix(rng, n, p_edge=0.3):
    """Random symmetric binary neighbor matrix with no islands (a ring is
    always included)."""
    W = (rng.uniform(size=(n, n)) < p_edge).astype(float)
    W = np.triu(W, 1)
    W = W + W.T
    for i in range(n):
        W[i, (i + 1) % n] = 1.0
        W[(i + 1) % n, i] = 1.0
    np.fill_diagonal(W, 0.0)
    return W


@pytest.fixture
def rng():
    return np.random.default_rng(20240401)
