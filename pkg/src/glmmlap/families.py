"""Response families: conditional log-densities and their first and second
derivatives in the latent variable, samplers, and latent initialization.

Each family follows a mean parameterization E(y) = g^{-1}(w) with a log or
logit link.  Dispersion families use:

- negative binomial  Var = mu + mu^2/phi
- gamma              Var = mu^2/phi
- beta               Var = mu(1-mu)/(1+phi)
- inverse Gaussian   mu-scaled shape (lambda = phi*mu), Var = mu^2/phi

Derivatives are analytic; randomized finite-difference tests referee them.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, gammaln, digamma, polygamma

from .errors import SpecificationError, SupportError
from .validation import as_vector

__all__ = [
    "Family",
    "Binomial",
    "Poisson",
    "NegativeBinomial",
    "Gamma",
    "InverseGaussian",
    "Beta",
    "get_family",
    "FAMILY_KINDS",
]

_LOG_2PI = np.log(2.0 * np.pi)


def _require_integer(y: np.ndarray, name: str) -> None:
    bad = np.flatnonzero(y != np.floor(y))
    if bad.size:
        raise SupportError(f"{name} response must be integer; index {int(bad[0])} is {y[bad[0]]}")


class Family:
    """Base interface.  Subclasses implement per-element log densities and
    the analytic derivative pair used by the Newton mode finder."""

    name: str = ""
    has_dispersion: bool = False
    link: str = "log"

    def __init__(self, phi: float | None = None):
        if self.has_dispersion:
            if phi is None:
                phi = 1.0
            if not phi > 0:
                raise SpecificationError(f"{self.name} dispersion phi must be > 0, got {phi}")
        elif phi is not None:
            raise SpecificationError(f"{self.name} takes no dispersion parameter")
        self.phi = phi

    def _phi(self, phi):
        value = self.phi if phi is None else phi
        if self.has_dispersion and not value > 0:
            raise SpecificationError(f"{self.name} phi must be > 0, got {value}")
        return value

    def mean(self, w):
        w = np.asarray(w, dtype=float)
        return expit(w) if self.link == "logit" else np.exp(w)

    def check_support(self, y) -> np.ndarray:
        raise NotImplementedError

    def elements(self, y, w, phi=None) -> np.ndarray:
        """Per-observation conditional log densities."""
        raise NotImplementedError

    def log_density(self, y, w, phi=None) -> float:
        y = as_vector(y, "y")
        w = as_vector(w, "w", n=y.shape[0])
        out = float(np.sum(self.elements(y, w, phi)))
        if not np.isfinite(out):
            raise SpecificationError(f"{self.name} log density is non-finite")
        return out

    def grad(self, y, w, phi=None) -> np.ndarray:
        """d log[y_i | g^{-1}(w_i)] / d w_i, elementwise."""
        raise NotImplementedError

    def hess(self, y, w, phi=None) -> np.ndarray:
        """d^2 log[y_i | g^{-1}(w_i)] / d w_i^2, elementwise (the diagonal of
        the data-model Hessian; off-diagonals vanish by conditional
        independence)."""
        raise NotImplementedError

    def sample(self, w, rng: np.random.Generator, phi=None) -> np.ndarray:
        raise NotImplementedError

    def initial_w(self, y) -> np.ndarray:
        """Boundary-adjusted link transform of the data (finite everywhere)."""
        raise NotImplementedError


class Binomial(Family):
    """Binomial counts with logit link; trials default to 1 (Bernoulli)."""

    name = "binomial"
    link = "logit"

    def __init__(self, trials=None):
        super().__init__()
        self.trials = trials

    def _n(self, y: np.ndarray) -> np.ndarray:
        if self.trials is None:
            return np.ones_like(y)
        n = np.asarray(self.trials, dtype=float)
        n = np.broadcast_to(n, y.shape).astype(float)
        _require_integer(n, "binomial trials")
        if np.any(n < 1):
            bad = int(np.flatnonzero(n < 1)[0])
            raise SpecificationError(f"binomial trials must be >= 1 (index {bad})")
        return n

    def check_support(self, y):
        y = as_vector(y, "y")
        _require_integer(y, "binomial")
        n = self._n(y)
        bad = np.flatnonzero((y < 0) | (y > n))
        if bad.size:
            i = int(bad[0])
            raise SupportError(f"binomial response at index {i} is {y[i]}, outside [0, {n[i]}]")
        return y

    def elements(self, y, w, phi=None):
        n = self._n(y)
        return (
            gammaln(n + 1) - gammaln(y + 1) - gammaln(n - y + 1)
            + y * w - n * np.logaddexp(0.0, w)
        )

    def grad(self, y, w, phi=None):
        return y - self._n(y) * expit(w)

    def hess(self, y, w, phi=None):
        p = expit(w)
        return -self._n(y) * p * (1.0 - p)

    def sample(self, w, rng, phi=None):
        w = np.asarray(w, dtype=float)
        n = np.ones_like(w) if self.trials is None else np.broadcast_to(
            np.asarray(self.trials, dtype=float), w.shape
        )
        return rng.binomial(n.astype(int), expit(w)).astype(float)

    def initial_w(self, y):
        y = as_vector(y, "y")
        n = self._n(y)
        p = np.clip(y / n, 0.25 / n, 1.0 - 0.25 / n)
        return np.log(p / (1.0 - p))


class Poisson(Family):
    name = "poisson"

    def check_support(self, y):
        y = as_vector(y, "y")
        _require_integer(y, "poisson")
        bad = np.flatnonzero(y < 0)
        if bad.size:
            raise SupportError(f"poisson response at index {int(bad[0])} is negative")
        return y

    def elements(self, y, w, phi=None):
        return y * w - np.exp(w) - gammaln(y + 1)

    def grad(self, y, w, phi=None):
        return y - np.exp(w)

    def hess(self, y, w, phi=None):
        return -np.exp(np.asarray(w, dtype=float))

    def sample(self, w, rng, phi=None):
        return rng.poisson(np.exp(w)).astype(float)

    def initial_w(self, y):
        y = as_vector(y, "y")
        return np.log(np.where(y == 0, 0.5, y))


class NegativeBinomial(Family):
    name = "negative_binomial"
    has_dispersion = True

    def check_support(self, y):
        y = as_vector(y, "y")
        _require_integer(y, "negative_binomial")
        bad = np.flatnonzero(y < 0)
        if bad.size:
            raise SupportError(f"negative_binomial response at index {int(bad[0])} is negative")
        return y

    def elements(self, y, w, phi=None):
        phi = self._phi(phi)
        log_denom = np.logaddexp(w, np.log(phi))
        return (
            gammaln(y + phi) - gammaln(phi) - gammaln(y + 1)
            + y * (w - log_denom) + phi * (np.log(phi) - log_denom)
        )

    def grad(self, y, w, phi=None):
        phi = self._phi(phi)
        ew = np.exp(w)
        return phi * (y - ew) / (phi + ew)

    def hess(self, y, w, phi=None):
        phi = self._phi(phi)
        ew = np.exp(w)
        return -phi * ew * (phi + y) / (phi + ew) ** 2

    def sample(self, w, rng, phi=None):
        phi = self._phi(phi)
        mu = np.exp(w)
        return rng.negative_binomial(phi, phi / (phi + mu)).astype(float)

    def initial_w(self, y):
        y = as_vector(y, "y")
        return np.log(np.where(y == 0, 0.5, y))


class Gamma(Family):
    name = "gamma"
    has_dispersion = True

    def check_support(self, y):
        y = as_vector(y, "y")
        bad = np.flatnonzero(y <= 0)
        if bad.size:
            raise SupportError(f"gamma response at index {int(bad[0])} is not positive")
        return y

    def elements(self, y, w, phi=None):
        phi = self._phi(phi)
        return phi * np.log(phi) - gammaln(phi) + (phi - 1.0) * np.log(y) - phi * w - y * phi * np.exp(-w)

    def grad(self, y, w, phi=None):
        phi = self._phi(phi)
        return -phi + y * phi * np.exp(-w)

    def hess(self, y, w, phi=None):
        phi = self._phi(phi)
        return -y * phi * np.exp(-w)

    def sample(self, w, rng, phi=None):
        phi = self._phi(phi)
        mu = np.exp(w)
        return rng.gamma(shape=phi, scale=mu / phi)

    def initial_w(self, y):
        return np.log(as_vector(y, "y"))


class InverseGaussian(Family):
    """Inverse Gaussian with mean-scaled shape lambda = phi * mu, which keeps
    the curvature in w strictly negative."""

    name = "inverse_gaussian"
    has_dispersion = True

    def check_support(self, y):
        y = as_vector(y, "y")
        bad = np.flatnonzero(y <= 0)
        if bad.size:
            raise SupportError(f"inverse_gaussian response at index {int(bad[0])} is not positive")
        return y

    def elements(self, y, w, phi=None):
        phi = self._phi(phi)
        ew = np.exp(w)
        return 0.5 * (np.log(phi) + w - _LOG_2PI - 3.0 * np.log(y)) - phi * (y - ew) ** 2 / (2.0 * ew * y)

    def grad(self, y, w, phi=None):
        phi = self._phi(phi)
        ew = np.exp(w)
        return phi * (y / (2.0 * ew) - ew / (2.0 * y)) + 0.5

    def hess(self, y, w, phi=None):
        phi = self._phi(phi)
        ew = np.exp(w)
        return -phi * (ew * ew + y * y) / (2.0 * y * ew)

    def sample(self, w, rng, phi=None):
        phi = self._phi(phi)
        mu = np.exp(w)
        return rng.wald(mu, phi * mu)

    def initial_w(self, y):
        return np.log(as_vector(y, "y"))


class Beta(Family):
    """Beta responses on (0, 1) with logit link and mean-precision
    parameterization (shape parameters mu*phi and (1-mu)*phi)."""

    name = "beta"
    has_dispersion = True
    link = "logit"

    def check_support(self, y):
        y = as_vector(y, "y")
        bad = np.flatnonzero((y <= 0) | (y >= 1))
        if bad.size:
            i = int(bad[0])
            raise SupportError(f"beta response at index {i} is {y[i]}, outside (0, 1)")
        return y

    def elements(self, y, w, phi=None):
        phi = self._phi(phi)
        mu = expit(w)
        return (
            gammaln(phi) - gammaln(mu * phi) - gammaln((1.0 - mu) * phi)
            + (mu * phi - 1.0) * np.log(y) + ((1.0 - mu) * phi - 1.0) * np.log1p(-y)
        )

    @staticmethod
    def _digamma_core(mu, phi):
        return digamma(mu * phi) - digamma((1.0 - mu) * phi)

    def grad(self, y, w, phi=None):
        phi = self._phi(phi)
        mu = expit(w)
        k0 = self._digamma_core(mu, phi) + np.log(1.0 / y - 1.0)
        return -phi * mu * (1.0 - mu) * k0

    def hess(self, y, w, phi=None):
        # k1 combines the trigamma pair with a sinh(w) times the digamma
        # core plus 2*atanh(1-2y) (= log(1/y - 1)); this is the form that
        # matches finite differences of the log density.
        phi = self._phi(phi)
        w = np.asarray(w, dtype=float)
        mu = expit(w)
        k1 = phi * (polygamma(1, mu * phi) + polygamma(1, (1.0 - mu) * phi)) - 2.0 * np.sinh(w) * (
            self._digamma_core(mu, phi) + 2.0 * np.arctanh(1.0 - 2.0 * y)
        )
        return -phi * (mu * (1.0 - mu)) ** 2 * k1

    def sample(self, w, rng, phi=None):
        phi = self._phi(phi)
        mu = expit(w)
        return rng.beta(mu * phi, (1.0 - mu) * phi)

    def initial_w(self, y):
        # responses are interior but can sit within float rounding of the
        # boundary, where logit blows up and the curvature loses negativity;
        # start from a clamped interior point instead
        y = np.clip(as_vector(y, "y"), 0.005, 0.995)
        return np.log(y / (1.0 - y))


FAMILY_KINDS = {
    "binomial": Binomial,
    "poisson": Poisson,
    "negative_binomial": NegativeBinomial,
    "gamma": Gamma,
    "inverse_gaussian": InverseGaussian,
    "beta": Beta,
}


def get_family(kind: str, phi: float | None = None, trials=None) -> Family:
    """Instantiate a family by name."""
    if kind not in FAMILY_KINDS:
        raise SpecificationError(
            f"unknown family {kind!r}; choose from {sorted(FAMILY_KINDS)}"
        )
    cls = FAMILY_KINDS[kind]
    if kind == "binomial":
        if phi is not None:
            raise SpecificationError("binomial takes no dispersion parameter")
        return cls(trials=trials)
    if trials is not None:
        raise SpecificationError(f"{kind} takes no trials")
    return cls(phi=phi)
