"""Closed-form minimiser of ``0.5 * ||R X - Y||_F^2`` over ``rank(R) <= k``.

The minimum of this relaxed problem lower-bounds the loss of every deep
linear network with bottleneck width ``k``, and is attained by the
network's global minima.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from dlcert import kernels
from dlcert.errors import AssumptionViolated, ConsistencyError, InvalidInput
from dlcert.linalg import DEFAULT_TOL, Tolerances, numerical_rank, top_k_left_vectors
from dlcert.network import SPECTRUM_GAP_TOL, Instance


@dataclass(frozen=True, eq=False)
class RelaxedSolution:
    R_star: np.ndarray
    optimal_loss: float
    k: int
    U_hat: np.ndarray | None
    spectrum: np.ndarray

    def to_json(self) -> dict:
        from dlcert.linalg import matrix_to_csv_string

        return {
            "k": self.k,
            "optimal_loss": self.optimal_loss,
            "R_star": matrix_to_csv_string(self.R_star),
            "U_hat": None if self.U_hat is None else matrix_to_csv_string(self.U_hat),
            "spectrum": [float(v) for v in self.spectrum],
        }


class LossBreakdown(NamedTuple):
    """``total = fit + residual`` where ``fit = 0.5 ||R* X - M||^2`` and
    ``residual = 0.5 ||M - Y||^2`` with ``M = Y X^T (X X^T)^{-1} X``."""

    total: float
    fit: float
    residual: float


def _half_sq(A) -> float:
    return 0.5 * float(np.sum(A * A))


def relaxed_loss(R, inst: Instance) -> float:
    return _half_sq(R @ inst.X - inst.Y)


def _require_valid(inst: Instance) -> None:
    if not inst.validated:
        raise AssumptionViolated("instance has not been validated")


def solve_full_rank(inst: Instance, tol: Tolerances = DEFAULT_TOL) -> RelaxedSolution:
    """Unconstrained least squares ``R* = Y X^T (X X^T)^{-1}``."""
    _require_valid(inst)
    if numerical_rank(inst.XXt, tol) != inst.d_x:
        raise AssumptionViolated("X X^T is numerically singular")
    R = inst.regression
    k = min(inst.d_x, inst.d_y)
    return RelaxedSolution(R, relaxed_loss(R, inst), k, None, inst.spectrum[:k].copy())


def solve_rank_constrained(inst: Instance, k: int) -> RelaxedSolution:
    """Project the regression onto the top-``k`` left singular subspace of M."""
    _require_valid(inst)
    r = min(inst.d_x, inst.d_y)
    if not 1 <= k < r:
        raise InvalidInput(f"rank-constrained solve needs 1 <= k < {r}, got k={k}")
    U_hat = top_k_left_vectors(inst.projected_targets, k, gap_tol=SPECTRUM_GAP_TOL)
    R = U_hat @ (U_hat.T @ inst.regression)
    return RelaxedSolution(R, relaxed_loss(R, inst), k, U_hat, inst.spectrum[:r].copy())


def solve(inst: Instance, k: int) -> RelaxedSolution:
    if k < 1:
        raise InvalidInput(f"k must be positive, got {k}")
    if k >= min(inst.d_x, inst.d_y):
        return solve_full_rank(inst)
    return solve_rank_constrained(inst, k)


def loss_breakdown(inst: Instance, R) -> LossBreakdown:
    M = inst.projected_targets
    RX = R @ inst.X
    return LossBreakdown(_half_sq(RX - inst.Y), _half_sq(RX - M), _half_sq(M - inst.Y))


def optimal_loss(inst: Instance, k: int, rtol: float = 1e-9) -> LossBreakdown:
    """Optimal relaxed loss and its split into fit and irreducible parts.

    Raises
    ------
    ConsistencyError
        If ``total`` and ``fit + residual`` disagree beyond ``rtol``.
    """
    sol = solve(inst, k)
    parts = loss_breakdown(inst, sol.R_star)
    if abs(parts.total - parts.fit - parts.residual) > rtol * max(1.0, parts.total):
        raise ConsistencyError(f"loss decomposition mismatch: {parts}")
    return parts


def cross_term(inst: Instance, R) -> tuple[float, float]:
    """``trace((M - Y)(R X - M)^T)`` and the product of the two norms.

    The first value vanishes for every R; dividing by the second gives a
    scale-free measure.
    """
    M = inst.projected_targets
    a = M - inst.Y
    b = R @ inst.X - M
    return float(np.sum(a * b)), float(np.linalg.norm(a) * np.linalg.norm(b))


class AlsResult(NamedTuple):
    best_loss: float
    best_converged: bool
    losses: np.ndarray
    converged: np.ndarray
    best_R: np.ndarray


def als_oracle(
    inst: Instance,
    k: int,
    restarts: int = 200,
    sweeps: int = 500,
    seed: int = 0,
    conv_rtol: float = 1e-12,
) -> AlsResult:
    """Minimise ``0.5 ||U V^T X - Y||^2`` by alternating least squares.

    Independent of the closed form: each restart starts from a Gaussian
    ``U`` and alternates exact solves for ``V`` and ``U``. A restart counts
    as converged when its last sweep changed the loss by at most
    ``conv_rtol`` relative.
    """
    dx, dy = inst.d_x, inst.d_y
    if not 1 <= k <= min(dx, dy):
        raise InvalidInput(f"k={k} outside [1, {min(dx, dy)}]")
    rng = np.random.default_rng(seed)
    U0 = rng.standard_normal((restarts, dy, k))
    yy = float(np.sum(inst.Y * inst.Y))
    loss, prev, U, V = kernels.als_restarts(inst.XXt, inst.YXt, inst.regression, yy, U0, sweeps)
    converged = np.isfinite(loss) & (np.abs(prev - loss) <= conv_rtol * np.maximum(1.0, np.abs(loss)))
    best = int(np.argmin(loss))
    R = U[best] @ V[best].T
    # recompute the winner directly; the Gram form used in the sweeps cancels
    return AlsResult(relaxed_loss(R, inst), bool(converged[best]), loss, converged, R)
