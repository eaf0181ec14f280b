"""Exact Euclidean projection onto the zero-mean / l2-ball constraint set.

The feasible set for an additive perturbation of a flattened image is the
intersection of the zero-mean hyperplane ``{z : sum(z) = 0}`` with the
l2 ball ``{z : ||z|| <= eps}``.  Projecting onto the hyperplane first and
then onto the ball is exactly the projection onto the intersection; the
KKT-based solver below certifies that equivalence numerically and is used
only by tests.

All math here runs in float64 regardless of the caller's dtype: the
equivalence checks operate at 1e-6 tolerances which float32 cannot sustain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .common import OracleFailure

#: After projection, |mean(delta)| <= MEAN_TOL * max(1, ||delta||).
MEAN_TOL = 1e-9
#: After projection, ||delta|| <= eps * (1 + NORM_TOL).
NORM_TOL = 1e-9


@dataclass(frozen=True)
class Perturbation:
    """A flat perturbation vector together with its l2 budget."""

    delta: np.ndarray
    eps: float

    def mean_violation(self) -> float:
        """|mean| relative to max(1, norm); zero-mean iff <= MEAN_TOL."""
        d = np.asarray(self.delta, dtype=np.float64)
        return abs(float(d.mean())) / max(1.0, float(np.linalg.norm(d)))

    def norm_violation(self) -> float:
        """How far the norm exceeds the budget, as a fraction of eps."""
        d = np.asarray(self.delta, dtype=np.float64)
        if self.eps == 0.0:
            return float(np.linalg.norm(d))
        return max(0.0, float(np.linalg.norm(d)) / self.eps - 1.0)

    def satisfies_constraints(self) -> bool:
        return self.mean_violation() <= MEAN_TOL and self.norm_violation() <= NORM_TOL


def _as_vector(delta) -> np.ndarray:
    d = np.asarray(delta, dtype=np.float64).ravel()
    if d.size == 0:
        raise ValueError("perturbation vector must be non-empty")
    return d


def project_zero_mean(delta) -> np.ndarray:
    """Project onto the zero-mean hyperplane by subtracting the mean.

    This is the Euclidean-nearest zero-mean vector: the hyperplane normal is
    the all-ones vector, so the projection removes the component along it.
    """
    d = _as_vector(delta)
    return d - d.mean()


def project_l2_ball(delta, eps: float) -> np.ndarray:
    """Project onto the l2 ball of radius eps by radial scaling."""
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    d = _as_vector(delta)
    nrm = float(np.linalg.norm(d))
    if nrm <= eps:
        return d.copy()
    if nrm == 0.0:
        return d.copy()
    return d * (eps / nrm)


def project_constraint_set(delta, eps: float) -> np.ndarray:
    """Exact projection onto {zero mean} ∩ {||.|| <= eps}.

    Hyperplane first, then ball: this order is the exact projection onto the
    intersection (the reverse order is not; see the order-sensitivity test).
    For length-1 input the only feasible point is 0, which is returned
    rather than raising.
    """
    d = _as_vector(delta)
    if d.size == 1:
        return np.zeros(1)
    return project_l2_ball(project_zero_mean(d), eps)


def qp_projection_oracle(delta, eps: float) -> np.ndarray:
    """Solve min ||delta - z||^2 s.t. sum(z) = 0, ||z||^2 <= eps^2 via KKT.

    Stationarity gives (1 + 2*lam) z = delta - nu * n with n the all-ones
    vector; applying n^T and the equality constraint fixes nu = mean(delta).
    If the lam = 0 candidate is feasible it is optimal; otherwise the ball
    constraint is active and lam > 0 is found from the complementarity
    equation ||z(lam)|| = eps by a bracketed scalar root solve.  Test-only:
    deliberately shares no code with the two-step path above.
    """
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    d = _as_vector(delta)
    if d.size == 1:
        return np.zeros(1)

    nu = float(d.mean())
    centered = d - nu  # delta - nu * n
    if eps == 0.0:
        return np.zeros_like(d)

    # lam = 0 candidate: z = centered.
    r0 = float(np.linalg.norm(centered))
    if r0 <= eps:
        return centered

    # Active ball: ||centered|| / (1 + 2 lam) = eps has a root in (0, hi].
    def radius_gap(lam: float) -> float:
        return r0 / (1.0 + 2.0 * lam) - eps

    hi = max(1.0, r0 / eps)  # 1 + 2*hi > r0/eps, so radius_gap(hi) < 0
    try:
        lam = brentq(radius_gap, 0.0, hi, xtol=1e-15, rtol=8.9e-16, maxiter=200)
    except (ValueError, RuntimeError) as exc:
        raise OracleFailure(f"KKT multiplier solve failed: {exc}") from exc
    z = centered / (1.0 + 2.0 * lam)
    if not np.all(np.isfinite(z)):
        raise OracleFailure("KKT solve produced non-finite entries")
    return z
