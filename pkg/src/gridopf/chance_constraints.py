"""Deterministic tightening of probabilistic voltage-band constraints.

The voltage magnitude band must hold with probability at least beta under the
Gaussian estimation uncertainty.  Per node phase the band splits into an upper
circle and a lower bound replaced by the largest convex region inside the
annulus: the half plane tangent to the inner circle along the estimate's
direction.  Each side is then shifted to the four corners of the
+-alpha*sigma box of the node's rectangular standard deviations, giving eight
deterministic convex constraints whose joint satisfaction certifies the
probabilistic band.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import (ConfigError, DegenerateEstimateError,
                         InvalidCovarianceError)

# corner sign enumeration, fixed order: (re sign, im sign)
CORNERS = ((1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0))

_MIN_ESTIMATE_MAG = 1e-6
PSD_TOL = 1e-10

# Rational approximation coefficients for the inverse standard normal CDF
# (Acklam), absolute error below 1.2e-9 before refinement.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def standard_normal_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def inverse_normal_cdf(p: float) -> float:
    """Quantile of the standard normal distribution.

    Rational approximation followed by one Halley refinement against the
    exact CDF; the result is accurate to machine-level precision.
    """
    if not 0.0 < p < 1.0:
        raise ConfigError(f"quantile argument must lie in (0, 1), got {p}")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q
              + _C[5])
             / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r
              + _A[5]) * q
             / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r
                + 1.0))
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q
               + _C[5])
              / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    # Halley step on f(x) = Phi(x) - p
    err = standard_normal_cdf(x) - p
    u = err * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def compute_alpha(beta: float) -> float:
    """Tightening multiplier: smallest alpha with P(|w| >= alpha) <= (1-beta)/4.

    Equivalently the (1 - (1-beta)/8) standard normal quantile.
    """
    if not 0.0 < beta < 1.0:
        raise ConfigError(f"probability threshold must lie in (0, 1), got {beta}")
    return inverse_normal_cdf(1.0 - (1.0 - beta) / 8.0)


@dataclass(frozen=True)
class ChanceSpec:
    """Probability threshold, derived multiplier, and voltage band."""

    beta: float
    v_min: float
    v_max: float
    alpha: float
    uncertainty_ignored: bool = False

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ConfigError(f"beta must lie in (0, 1), got {self.beta}")
        if not self.v_min < self.v_max:
            raise ConfigError("v_min must be strictly below v_max")
        if self.alpha < 0.0:
            raise ConfigError("alpha must be nonnegative")
        if not self.uncertainty_ignored:
            canonical = compute_alpha(self.beta)
            if abs(self.alpha - canonical) > 1e-6:
                raise ConfigError(
                    f"alpha {self.alpha} inconsistent with beta {self.beta} "
                    f"(expected {canonical:.8f})")

    @staticmethod
    def from_beta(beta: float, v_min: float, v_max: float) -> "ChanceSpec":
        return ChanceSpec(beta=beta, v_min=v_min, v_max=v_max,
                          alpha=compute_alpha(beta))

    @staticmethod
    def ignore_uncertainty(beta: float, v_min: float, v_max: float) -> "ChanceSpec":
        """Ablation mode: estimates treated as exact, i.e. alpha = 0."""
        return ChanceSpec(beta=beta, v_min=v_min, v_max=v_max, alpha=0.0,
                          uncertainty_ignored=True)


def min_halfplane_coeffs(v_est_i: complex) -> np.ndarray:
    """Unit normal of the lower-bound half plane at one node.

    The constraint n . x >= v_min with |n| = 1 implies |x| >= v_min by
    Cauchy-Schwarz, so the half plane sits inside the annulus lower bound.
    """
    mag = abs(v_est_i)
    if mag < _MIN_ESTIMATE_MAG:
        raise DegenerateEstimateError(
            f"estimate magnitude {mag:.2e} too small to define a direction")
    return np.array([v_est_i.real / mag, v_est_i.imag / mag])


@dataclass
class TightenedConstraintSet:
    """Eight deterministic constraints per node phase, vectorized.

    For node i and corner k: circle  ||dv_i + circle_centers[i, k]||^2 <= v_max^2
    and half plane  normals[i] . dv_i >= hp_rhs[i, k], where dv_i is the
    node's rectangular voltage deviation.
    """

    v_min: float
    v_max: float
    alpha: float
    circle_centers: np.ndarray  # (N, 4, 2)
    normals: np.ndarray         # (N, 2)
    hp_rhs: np.ndarray          # (N, 4)

    @property
    def n_nodes(self) -> int:
        return self.circle_centers.shape[0]

    @property
    def n_constraints(self) -> int:
        return 8 * self.n_nodes

    def split_rect(self, delta_v_rect) -> np.ndarray:
        dv = np.asarray(delta_v_rect, dtype=float)
        n = self.n_nodes
        if dv.shape != (2 * n,):
            raise ConfigError(f"expected deviation of length {2 * n}, "
                              f"got {dv.shape}")
        return np.stack([dv[:n], dv[n:]], axis=1)  # (N, 2)

    def circle_values(self, delta_v_rect) -> np.ndarray:
        """||dv_i + c_ik||^2 - v_max^2, shape (N, 4); feasible <= 0."""
        pts = self.split_rect(delta_v_rect)[:, None, :] + self.circle_centers
        return np.sum(pts * pts, axis=2) - self.v_max ** 2

    def halfplane_values(self, delta_v_rect) -> np.ndarray:
        """hp_rhs - n_i . dv_i, shape (N, 4); feasible <= 0."""
        dots = np.einsum("ij,ij->i", self.split_rect(delta_v_rect), self.normals)
        return self.hp_rhs - dots[:, None]


def tighten_constraints(est, spec: ChanceSpec) -> TightenedConstraintSet:
    """Shifted circle and half-plane constraints from an estimation result.

    Only the diagonal of the rectangular covariance enters: the per-node
    standard deviations of the real and imaginary parts, scaled by alpha,
    define the four corner shifts.
    """
    v_est = np.asarray(est.v_est, dtype=complex)
    n = v_est.shape[0]
    var_re = np.diag(est.sigma_rect)[:n].copy()
    var_im = np.diag(est.sigma_rect)[n:].copy()
    for name, var in (("real", var_re), ("imaginary", var_im)):
        if np.any(var < -PSD_TOL):
            raise InvalidCovarianceError(
                f"negative {name}-part variance {var.min():.3e} beyond tolerance")
        np.clip(var, 0.0, None, out=var)
    sig_re = np.sqrt(var_re)
    sig_im = np.sqrt(var_im)

    corners = np.array(CORNERS)  # (4, 2)
    shifts = spec.alpha * np.stack(
        [corners[:, 0][None, :] * sig_re[:, None],
         corners[:, 1][None, :] * sig_im[:, None]], axis=2)       # (N, 4, 2)
    est_rect = np.stack([v_est.real, v_est.imag], axis=1)         # (N, 2)
    centers = est_rect[:, None, :] + shifts

    normals = np.empty((n, 2))
    for i in range(n):
        normals[i] = min_halfplane_coeffs(v_est[i])
    # n . (dv + c_ik) >= v_min  ->  n . dv >= v_min - n . c_ik
    hp_rhs = spec.v_min - np.einsum("ikj,ij->ik", centers, normals)

    return TightenedConstraintSet(
        v_min=spec.v_min, v_max=spec.v_max, alpha=spec.alpha,
        circle_centers=centers, normals=normals, hp_rhs=hp_rhs)


def check_corner_sufficiency(delta_v_rect, constraints: TightenedConstraintSet,
                             tol: float = 1e-9) -> bool:
    """True iff all eight constraints hold at every node (closed, small slack).

    By convexity this certifies that every noise realization inside the
    per-node alpha-sigma corner box keeps the voltage within the inner convex
    region of the band.
    """
    if np.max(constraints.circle_values(delta_v_rect)) > tol:
        return False
    return bool(np.max(constraints.halfplane_values(delta_v_rect)) <= tol)


def psd_sqrt(sigma: np.ndarray, tol: float = PSD_TOL) -> np.ndarray:
    """Symmetric PSD square root; eigenvalues in [-tol, 0) are clipped to 0."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise InvalidCovarianceError(f"covariance must be square, got {sigma.shape}")
    if np.max(np.abs(sigma - sigma.T)) > 1e-9:
        raise InvalidCovarianceError("covariance matrix is not symmetric")
    w, u = np.linalg.eigh((sigma + sigma.T) / 2.0)
    if w.min() < -tol:
        raise InvalidCovarianceError(
            f"covariance has eigenvalue {w.min():.3e} below -{tol}")
    return (u * np.sqrt(np.clip(w, 0.0, None))) @ u.T


def verify_chance_satisfaction(delta_v_rect, est, spec: ChanceSpec,
                               n_samples: int, seed, block: int = 20000) -> np.ndarray:
    """Per-node empirical probability of the voltage band under sampling.

    Draws the post-control rectangular voltage from a Gaussian centered at
    (deviation + estimate) with the full estimation covariance, so cross-node
    correlation is honored, and counts magnitudes inside [v_min, v_max].
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be at least 1")
    delta_v_rect = np.asarray(delta_v_rect, dtype=float)
    mean = delta_v_rect + est.v_est_rect
    n = mean.shape[0] // 2
    factor = psd_sqrt(est.sigma_rect)
    rng = np.random.default_rng(seed)

    inside = np.zeros(n, dtype=np.int64)
    left = n_samples
    while left > 0:
        take = min(block, left)
        z = rng.standard_normal((take, 2 * n))
        x = mean[None, :] + z @ factor.T
        mags = np.hypot(x[:, :n], x[:, n:])
        inside += np.sum((mags >= spec.v_min) & (mags <= spec.v_max), axis=0)
        left -= take
    return inside / float(n_samples)
