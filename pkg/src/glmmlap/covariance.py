"""Patterned covariance construction.

A latent-field covariance is declared as an ordered sum of components, each
contributing Z_k V_k Z_k' for its own parameterized V_k.  Supported kinds:

- ``iid_nugget``        sigma0^2 * I
- ``random_effect``     sigma_k^2 * Z Z' for an incidence/design matrix Z
- ``ar1``               sigma^2 rho^|t_i - t_j| / (1 - rho^2), zero across groups
- ``exponential_geo``   sigma^2 exp(-dist/range) (+ optional nugget at dist 0)
- ``car``               sigma^2 (I - rho W_rs)^{-1} M_rs
- ``sar``               sigma^2 [(I - rho W_rs)(I - rho W_rs')]^{-1}

The total parameter vector theta concatenates component parameters in
declaration order.  Components also report couplings between observations,
from which a common block-diagonal partition is discovered when one exists.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform

from .errors import SpecificationError
from .validation import (
    as_float_array,
    as_vector,
    check_coords,
    check_neighbor_matrix,
    check_positive,
)

__all__ = [
    "CovMatrix",
    "CovarianceSpec",
    "Nugget",
    "RandomEffect",
    "AR1",
    "ExponentialGeo",
    "CAR",
    "SAR",
    "indicator_matrix",
    "neighbors_from_distance",
    "build_sigma",
    "cross_cov",
    "ar1_block",
    "row_standardize",
    "car_cov",
    "sar_cov",
]


@dataclass
class CovMatrix:
    """A dense symmetric covariance matrix plus an optional block partition
    (contiguous index ranges) under which it is block diagonal."""

    dense: np.ndarray
    structure: list[tuple[int, int]] | None = None

    @property
    def n(self) -> int:
        return self.dense.shape[0]


def indicator_matrix(labels) -> np.ndarray:
    """Full-column incidence matrix from group labels (one column per level,
    levels in order of first appearance)."""
    labels = np.asarray(labels)
    _, first_idx = np.unique(labels, return_index=True)
    levels = labels[np.sort(first_idx)]
    return (labels[:, None] == levels[None, :]).astype(float)


def ar1_block(times, sigma2: float, rho: float) -> np.ndarray:
    """Stationary AR1 covariance over the given time indices:
    entry (i, j) is sigma2 * rho^|t_i - t_j| / (1 - rho^2)."""
    times = as_vector(times, "times")
    check_positive(sigma2, "sigma2")
    if not (0 <= rho < 1):
        raise SpecificationError(f"ar1 rho must lie in [0, 1), got {rho}")
    lags = np.abs(times[:, None] - times[None, :])
    return sigma2 * rho**lags / (1.0 - rho**2)


def neighbors_from_distance(coords, threshold: float) -> np.ndarray:
    """Binary neighbor matrix from a centroid-distance rule: sites within
    ``threshold`` of each other (excluding self) are neighbors.  The
    threshold is always user-supplied; no default is meaningful."""
    coords = check_coords(coords)
    check_positive(threshold, "threshold")
    dist = squareform(pdist(coords))
    W = ((dist <= threshold) & (dist > 0)).astype(float)
    return W


def row_standardize(W) -> tuple[np.ndarray, np.ndarray]:
    """Row-standardize a neighbor matrix.

    Returns (W_rs, M_rs) where W_rs has rows scaled to sum to one and M_rs is
    the diagonal matrix of reciprocal row sums.  A zero row sum (an island)
    is an error naming the offending index.
    """
    W = check_neighbor_matrix(W)
    row_sums = W.sum(axis=1)
    return W / row_sums[:, None], np.diag(1.0 / row_sums)


def _rho_interval(W: np.ndarray) -> tuple[float, float]:
    """Validity interval (1/lambda_min, 1/lambda_max) for the dependence
    parameter, from the eigenvalues of the row-standardized W (computed via
    the similar symmetric matrix D^{-1/2} W D^{-1/2})."""
    d = W.sum(axis=1)
    scale = 1.0 / np.sqrt(d)
    eigvals = np.linalg.eigvalsh(scale[:, None] * W * scale[None, :])
    lam_min, lam_max = float(eigvals[0]), float(eigvals[-1])
    return 1.0 / lam_min, 1.0 / lam_max


def _check_rho_interval(rho: float, W: np.ndarray, kind: str) -> None:
    lo, hi = _rho_interval(W)
    if not (lo < rho < hi):
        raise SpecificationError(
            f"{kind} rho={rho} outside the validity interval ({lo:.6f}, {hi:.6f})"
        )


def car_cov(W, sigma2: float, rho: float) -> np.ndarray:
    """Conditional autoregressive covariance sigma2 (I - rho W_rs)^{-1} M_rs,
    computed through the symmetric form sigma2 (D - rho W)^{-1}."""
    W = check_neighbor_matrix(W)
    check_positive(sigma2, "sigma2")
    _check_rho_interval(rho, W, "car")
    D = np.diag(W.sum(axis=1))
    out = sigma2 * np.linalg.inv(D - rho * W)
    return 0.5 * (out + out.T)


def sar_cov(W, sigma2: float, rho: float) -> np.ndarray:
    """Simultaneous autoregressive covariance
    sigma2 [(I - rho W_rs)(I - rho W_rs')]^{-1}."""
    W = check_neighbor_matrix(W)
    check_positive(sigma2, "sigma2")
    _check_rho_interval(rho, W, "sar")
    W_rs = W / W.sum(axis=1)[:, None]
    B_inv = np.linalg.inv(np.eye(W.shape[0]) - rho * W_rs)
    out = sigma2 * (B_inv.T @ B_inv)
    return 0.5 * (out + out.T)


class CovComponent:
    """Base class for covariance components.

    Subclasses define ``param_names``/``param_kinds`` (kinds are used by the
    optimizer to pick transforms and default bounds), ``build`` for the n x n
    observed-site matrix, ``cross`` for prediction blocks, and ``couplings``
    yielding index groups that the component correlates.
    """

    kind: str = ""
    param_names: tuple[str, ...] = ()
    param_kinds: tuple[str, ...] = ()

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    def validate_theta(self, theta_k: np.ndarray) -> None:
        for name, kind, value in zip(self.param_names, self.param_kinds, theta_k):
            if kind in ("variance", "range") and not value > 0:
                raise SpecificationError(f"{self.kind} parameter {name} must be > 0, got {value}")
            if kind == "nugget" and value < 0:
                raise SpecificationError(f"{self.kind} parameter {name} must be >= 0, got {value}")
            if kind == "correlation" and not (0 <= value < 1):
                raise SpecificationError(
                    f"{self.kind} parameter {name} must lie in [0, 1), got {value}"
                )

    def build(self, theta_k: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def cross(self, theta_k: np.ndarray, pred: dict | None, m: int) -> tuple[np.ndarray, np.ndarray]:
        """Return (n x m cross block, m x m prediction block)."""
        raise NotImplementedError

    def couplings(self):
        """Yield arrays of indices that this component couples together."""
        return iter(())


class Nugget(CovComponent):
    """Independent per-observation variance sigma0^2 * I.  Contributes no
    cross-covariance to prediction sites (new units carry their own noise)."""

    kind = "iid_nugget"
    param_names = ("sigma0_sq",)
    param_kinds = ("variance",)

    def __init__(self, n: int):
        self.n = int(n)

    def build(self, theta_k):
        self.validate_theta(theta_k)
        return theta_k[0] * np.eye(self.n)

    def cross(self, theta_k, pred, m):
        self.validate_theta(theta_k)
        return np.zeros((self.n, m)), theta_k[0] * np.eye(m)


class RandomEffect(CovComponent):
    """sigma^2 Z Z' for an incidence or design matrix Z (random intercepts
    when Z is an indicator matrix, random slopes for real-valued columns)."""

    kind = "random_effect"
    param_names = ("sigma_sq",)
    param_kinds = ("variance",)

    def __init__(self, Z=None, groups=None):
        if (Z is None) == (groups is None):
            raise SpecificationError("random_effect requires exactly one of Z or groups")
        if Z is None:
            Z = indicator_matrix(groups)
            self._levels = np.asarray(groups)
        else:
            self._levels = None
        self.Z = as_float_array(Z, "Z", ndim=2)
        self.n = self.Z.shape[0]

    def build(self, theta_k):
        self.validate_theta(theta_k)
        return theta_k[0] * (self.Z @ self.Z.T)

    def cross(self, theta_k, pred, m):
        self.validate_theta(theta_k)
        pred = pred or {}
        if "Z" in pred:
            Z_u = as_float_array(pred["Z"], "prediction Z", ndim=2)
            if Z_u.shape != (m, self.Z.shape[1]):
                raise SpecificationError(
                    f"prediction Z must have shape ({m}, {self.Z.shape[1]}), got {Z_u.shape}"
                )
        elif "groups" in pred:
            if self._levels is None:
                raise SpecificationError(
                    "random_effect was built from an explicit Z; prediction requires Z too"
                )
            labels = np.asarray(pred["groups"])
            _, first_idx = np.unique(self._levels, return_index=True)
            levels = self._levels[np.sort(first_idx)]
            # new levels get all-zero rows: no shared effect with observed sites
            Z_u = (labels[:, None] == levels[None, :]).astype(float)
        else:
            raise SpecificationError("random_effect prediction requires Z or groups metadata")
        s2 = theta_k[0]
        return s2 * (self.Z @ Z_u.T), s2 * (Z_u @ Z_u.T)

    def couplings(self):
        for j in range(self.Z.shape[1]):
            idx = np.flatnonzero(self.Z[:, j] != 0)
            if idx.size > 1:
                yield idx


class AR1(CovComponent):
    """First-order autoregressive covariance over integer time indices,
    independent across groups when group labels are supplied."""

    kind = "ar1"
    param_names = ("sigma_sq", "rho")
    param_kinds = ("variance", "correlation")

    def __init__(self, times, groups=None):
        self.times = as_vector(times, "times")
        self.n = self.times.shape[0]
        self.groups = None if groups is None else np.asarray(groups)
        if self.groups is not None and self.groups.shape[0] != self.n:
            raise SpecificationError("ar1 groups must have the same length as times")

    def _mask(self, t_a, g_a, t_b, g_b):
        lags = np.abs(t_a[:, None] - t_b[None, :])
        if g_a is None:
            return lags, None
        same = g_a[:, None] == g_b[None, :]
        return lags, same

    def build(self, theta_k):
        self.validate_theta(theta_k)
        s2, rho = theta_k
        lags, same = self._mask(self.times, self.groups, self.times, self.groups)
        V = s2 * rho**lags / (1.0 - rho**2)
        if same is not None:
            V = np.where(same, V, 0.0)
        return V

    def cross(self, theta_k, pred, m):
        self.validate_theta(theta_k)
        pred = pred or {}
        if "times" not in pred:
            raise SpecificationError("ar1 prediction requires times metadata")
        t_u = as_vector(pred["times"], "prediction times", n=m)
        g_u = None
        if self.groups is not None:
            if "groups" not in pred:
                raise SpecificationError("ar1 prediction requires groups metadata")
            g_u = np.asarray(pred["groups"])
        s2, rho = theta_k
        lags_wu, same_wu = self._mask(self.times, self.groups, t_u, g_u)
        lags_uu, same_uu = self._mask(t_u, g_u, t_u, g_u)
        wu = s2 * rho**lags_wu / (1.0 - rho**2)
        uu = s2 * rho**lags_uu / (1.0 - rho**2)
        if same_wu is not None:
            wu = np.where(same_wu, wu, 0.0)
            uu = np.where(same_uu, uu, 0.0)
        return wu, uu

    def couplings(self):
        if self.groups is None:
            yield np.arange(self.n)
            return
        for level in np.unique(self.groups):
            idx = np.flatnonzero(self.groups == level)
            if idx.size > 1:
                yield idx


class ExponentialGeo(CovComponent):
    """Exponential geostatistical covariance on planar coordinates:
    sigma^2 exp(-dist/range), optionally plus a nugget at distance zero.

    The embedded nugget follows the distance-indicator convention (it also
    appears in cross blocks for coincident sites); use the standalone
    ``iid_nugget`` component for strictly per-unit noise.
    """

    kind = "exponential_geo"

    def __init__(self, coords, nugget: bool = False):
        self.coords = check_coords(coords)
        self.n = self.coords.shape[0]
        self.nugget = bool(nugget)
        if self.nugget:
            self.param_names = ("sigma_sq", "range", "nugget_sq")
            self.param_kinds = ("variance", "range", "nugget")
        else:
            self.param_names = ("sigma_sq", "range")
            self.param_kinds = ("variance", "range")
        # pairwise distances are parameter-free; compute once
        self._dist = squareform(pdist(self.coords))

    @property
    def max_distance(self) -> float:
        return float(np.max(self._dist)) if self.n > 1 else 1.0

    def _kernel(self, dist, theta_k):
        s2, rng = theta_k[0], theta_k[1]
        out = s2 * np.exp(-dist / rng)
        if self.nugget:
            out = out + theta_k[2] * (dist == 0.0)
        return out

    def build(self, theta_k):
        self.validate_theta(theta_k)
        return self._kernel(self._dist, theta_k)

    def cross(self, theta_k, pred, m):
        self.validate_theta(theta_k)
        pred = pred or {}
        if "coords" not in pred:
            raise SpecificationError("exponential_geo prediction requires coords metadata")
        c_u = check_coords(pred["coords"], "prediction coords", n=m)
        wu = self._kernel(cdist(self.coords, c_u), theta_k)
        uu = self._kernel(squareform(pdist(c_u)) if m > 1 else np.zeros((1, 1)), theta_k)
        return wu, uu

    def couplings(self):
        yield np.arange(self.n)


class _Autoregressive(CovComponent):
    """Shared machinery for CAR/SAR graph components."""

    param_names = ("sigma_sq", "rho")
    param_kinds = ("variance", "correlation")

    def __init__(self, W, allow_negative_rho: bool = False):
        self.W = check_neighbor_matrix(W)
        self.n = self.W.shape[0]
        self.allow_negative_rho = bool(allow_negative_rho)
        self.rho_interval = _rho_interval(self.W)

    def validate_theta(self, theta_k):
        s2, rho = theta_k
        check_positive(s2, f"{self.kind} sigma_sq")
        lo, hi = self.rho_interval
        if self.allow_negative_rho:
            ok = lo < rho < hi
        else:
            ok = 0 <= rho < hi
            lo = 0.0
        if not ok:
            raise SpecificationError(
                f"{self.kind} rho={rho} outside [{lo:.6f}, {hi:.6f})"
            )

    def _cov(self, W, theta_k):
        raise NotImplementedError

    def build(self, theta_k):
        self.validate_theta(theta_k)
        return self._cov(self.W, theta_k)

    def cross(self, theta_k, pred, m):
        """Graph kernels are not projective: the joint neighbor matrix over
        observed + prediction sites is built first and the joint covariance
        partitioned."""
        self.validate_theta(theta_k)
        pred = pred or {}
        if "W_joint" not in pred:
            raise SpecificationError(f"{self.kind} prediction requires W_joint metadata")
        W_joint = check_neighbor_matrix(pred["W_joint"], "W_joint")
        if W_joint.shape[0] != self.n + m:
            raise SpecificationError(
                f"W_joint must be ({self.n + m}) x ({self.n + m}), got {W_joint.shape}"
            )
        if not np.array_equal(W_joint[: self.n, : self.n], self.W):
            raise SpecificationError(
                "W_joint observed-site block differs from the fitted neighbor matrix"
            )
        joint = self._cov(W_joint, theta_k)
        return joint[: self.n, self.n :], joint[self.n :, self.n :]

    def couplings(self):
        rows, cols = np.nonzero(self.W)
        for i, j in zip(rows, cols):
            if i < j:
                yield np.array([i, j])


class CAR(_Autoregressive):
    kind = "car"

    def _cov(self, W, theta_k):
        return car_cov(W, theta_k[0], theta_k[1])


class SAR(_Autoregressive):
    kind = "sar"

    def _cov(self, W, theta_k):
        return sar_cov(W, theta_k[0], theta_k[1])


class _UnionFind:
    def __init__(self, n):
        self.parent = np.arange(n)

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i, j):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[rj] = ri


@dataclass
class CovarianceSpec:
    """Ordered sum of covariance components over n observations."""

    components: list[CovComponent]
    n: int = field(default=0)

    def __post_init__(self):
        if not self.components:
            raise SpecificationError("CovarianceSpec needs at least one component")
        sizes = {c.n for c in self.components}
        if len(sizes) > 1:
            raise SpecificationError(f"components disagree on n: {sorted(sizes)}")
        inferred = self.components[0].n
        if self.n and self.n != inferred:
            raise SpecificationError(f"spec n={self.n} but components have n={inferred}")
        self.n = inferred

    @property
    def n_params(self) -> int:
        return sum(c.n_params for c in self.components)

    @property
    def param_names(self) -> list[str]:
        return [
            f"{c.kind}[{k}].{name}"
            for k, c in enumerate(self.components)
            for name in c.param_names
        ]

    def split_theta(self, theta) -> list[np.ndarray]:
        theta = as_vector(theta, "theta")
        if theta.shape[0] != self.n_params:
            raise SpecificationError(
                f"theta must have length {self.n_params}, got {theta.shape[0]}"
            )
        out, pos = [], 0
        for c in self.components:
            out.append(theta[pos : pos + c.n_params])
            pos += c.n_params
        return out

    def discover_partition(self) -> list[tuple[int, int]] | None:
        """Common block partition: contiguous index ranges under which every
        component's matrix is block diagonal, or None if a single block.
        The partition is parameter-free, so it is computed once and cached."""
        cached = getattr(self, "_partition_cache", False)
        if cached is not False:
            return cached
        self._partition_cache = self._discover_partition()
        return self._partition_cache

    def _discover_partition(self) -> list[tuple[int, int]] | None:
        uf = _UnionFind(self.n)
        for comp in self.components:
            for idx in comp.couplings():
                first = int(idx[0])
                for j in idx[1:]:
                    uf.union(first, int(j))
        roots = np.array([uf.find(i) for i in range(self.n)])
        if np.unique(roots).size <= 1:
            return None
        # blocks must be contiguous in data order to be usable downstream
        boundaries = [0]
        for i in range(1, self.n):
            if roots[i] != roots[i - 1]:
                boundaries.append(i)
        boundaries.append(self.n)
        ranges = list(zip(boundaries[:-1], boundaries[1:]))
        if len(ranges) != np.unique(roots).size:
            return None
        return ranges


def build_sigma(spec: CovarianceSpec, theta) -> CovMatrix:
    """Sum the component matrices at parameter vector theta.

    The result carries the discovered block partition when one exists; it is
    symmetric by construction and positive definite for in-bounds parameters
    (factorization downstream applies the jitter policy if needed).
    """
    parts = spec.split_theta(theta)
    total = np.zeros((spec.n, spec.n))
    for comp, theta_k in zip(spec.components, parts):
        total += comp.build(theta_k)
    total = 0.5 * (total + total.T)
    return CovMatrix(dense=total, structure=spec.discover_partition())


def cross_cov(spec: CovarianceSpec, theta, pred_meta) -> tuple[np.ndarray, np.ndarray]:
    """Covariance blocks linking observed sites to m prediction sites.

    ``pred_meta`` is a :class:`PredictionMeta`: the number of sites plus one
    metadata dict per component (coords / times / groups / Z / W_joint as the
    component requires).  Returns (Sigma_wu, Sigma_uu) consistent with a
    joint covariance over observed + prediction sites.
    """
    parts = spec.split_theta(theta)
    m = pred_meta.m
    wu = np.zeros((spec.n, m))
    uu = np.zeros((m, m))
    for k, (comp, theta_k) in enumerate(zip(spec.components, parts)):
        c_wu, c_uu = comp.cross(theta_k, pred_meta.for_component(k), m)
        wu += c_wu
        uu += c_uu
    return wu, 0.5 * (uu + uu.T)


@dataclass
class PredictionMeta:
    """Metadata for m prediction sites: one dict per covariance component
    (None for components that need nothing, e.g. the nugget)."""

    m: int
    per_component: list[dict | None]

    def for_component(self, k: int) -> dict | None:
        if k >= len(self.per_component):
            raise SpecificationError(f"prediction metadata missing for component {k}")
        return self.per_component[k]
