"""Tolerance-aware dense linear algebra primitives.

All functions take plain 2-D float arrays and never mutate them.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from dlcert.errors import DegenerateSpectrum, InvalidInput


@dataclass(frozen=True)
class Tolerances:
    """Thresholds that turn exact rank and equality tests into float tests.

    Attributes
    ----------
    rank_rel_tol : float
        Singular values at or below ``rank_rel_tol * sigma_max`` count as zero.
    subspace_tol : float
        Maximum projector Frobenius distance for two subspaces to be equal.
    grad_tol : float
        Criticality cutoff, multiplied by the data scale ``max(1, ||Y X^T||_F)``.
    zero_tol : float
        Cutoff for declaring a matrix zero (absolute, or relative to a scale).
    """

    rank_rel_tol: float = 1e-8
    subspace_tol: float = 1e-6
    grad_tol: float = 1e-8
    zero_tol: float = 1e-8

    def __post_init__(self):
        for name in ("rank_rel_tol", "subspace_tol", "grad_tol", "zero_tol"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise InvalidInput(f"{name} must be a positive finite number, got {value!r}")


DEFAULT_TOL = Tolerances()


class SvdResult(NamedTuple):
    U: np.ndarray
    singular_values: np.ndarray
    V: np.ndarray


class SubspaceComparison(NamedTuple):
    equal: bool
    distance: float


class FrobeniusBound(NamedTuple):
    """Both sides of ``||AB||^2 >= sigma_min^2(.) ||.||^2``.

    ``rhs1`` uses A (valid when A is tall, ``a_tall``); ``rhs2`` uses B
    (valid when B is wide, ``b_wide``).
    """

    lhs: float
    rhs1: float
    rhs2: float
    a_tall: bool
    b_wide: bool


def as_matrix(A, name="matrix") -> np.ndarray:
    """Validate and return ``A`` as a finite 2-D float64 array."""
    arr = np.asarray(A, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInput(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise InvalidInput(f"{name} must be nonempty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} has non-finite entries")
    return arr


def _fix_signs(U, V):
    # largest-|.| entry of each U column made positive; argmax picks lowest row on ties
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs, V * signs


def svd(A) -> SvdResult:
    """Thin SVD with a deterministic sign convention.

    Returns ``U`` (m x r), singular values (r,), ``V`` (n x r) with
    ``r = min(m, n)`` and ``A = U diag(s) V^T``.
    """
    A = as_matrix(A)
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    U, V = _fix_signs(U, Vt.T)
    return SvdResult(U, s, V)


def numerical_rank(A, tol: Tolerances = DEFAULT_TOL) -> int:
    s = np.linalg.svd(as_matrix(A), compute_uv=False)
    smax = s[0]
    if smax <= tol.zero_tol:
        return 0
    return int(np.count_nonzero(s > tol.rank_rel_tol * smax))


def spectral_gap(s, k) -> float:
    """Relative gap ``(s[k-1] - s[k]) / s[0]`` at the cut after ``k`` values."""
    if k >= len(s) or s[0] == 0:
        return np.inf
    return float((s[k - 1] - s[k]) / s[0])


def top_k_left_vectors(A, k: int, gap_tol: float = 1e-10) -> np.ndarray:
    """First ``k`` left singular vectors of ``A``.

    Raises
    ------
    DegenerateSpectrum
        If the k-th and (k+1)-th singular values are equal to within
        ``gap_tol`` relative to the largest, so the subspace is not unique.
    """
    A = as_matrix(A)
    if not 1 <= k <= min(A.shape):
        raise InvalidInput(f"k={k} outside [1, {min(A.shape)}]")
    U, s, _ = svd(A)
    if spectral_gap(s, k) < gap_tol:
        raise DegenerateSpectrum(
            f"sigma_{k}={s[k - 1]:.6g} and sigma_{k + 1}={s[k]:.6g} are not separated"
        )
    return U[:, :k]


def orthonormal_basis(A, tol: Tolerances = DEFAULT_TOL) -> np.ndarray:
    """Orthonormal basis for col(A); may have zero columns if A is zero."""
    A = as_matrix(A)
    U, s, _ = svd(A)
    if s[0] <= tol.zero_tol:
        return U[:, :0]
    return U[:, s > tol.rank_rel_tol * s[0]]


def projector(A, tol: Tolerances = DEFAULT_TOL) -> np.ndarray:
    Q = orthonormal_basis(A, tol)
    return Q @ Q.T


def subspaces_equal(U1, U2, tol: Tolerances = DEFAULT_TOL) -> SubspaceComparison:
    """Compare col(U1) and col(U2) via ``||P1 - P2||_F``."""
    U1 = as_matrix(U1, "U1")
    U2 = as_matrix(U2, "U2")
    if U1.shape[0] != U2.shape[0]:
        raise InvalidInput(f"row counts differ: {U1.shape[0]} vs {U2.shape[0]}")
    dist = float(np.linalg.norm(projector(U1, tol) - projector(U2, tol)))
    return SubspaceComparison(dist <= tol.subspace_tol, dist)


def sigma_extrema(A) -> tuple[float, float]:
    """``(sigma_max, sigma_min)`` where sigma_min is the min(m, n)-th value."""
    s = np.linalg.svd(as_matrix(A), compute_uv=False)
    return float(s[0]), float(s[-1])


def frobenius_bound_check(A, B) -> FrobeniusBound:
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    if A.shape[1] != B.shape[0]:
        raise InvalidInput(f"inner dimensions differ: {A.shape} @ {B.shape}")
    AB = A @ B
    lhs = float(np.sum(AB * AB))
    sa = sigma_extrema(A)[1]
    sb = sigma_extrema(B)[1]
    return FrobeniusBound(
        lhs=lhs,
        rhs1=sa**2 * float(np.sum(B * B)),
        rhs2=sb**2 * float(np.sum(A * A)),
        a_tall=A.shape[0] >= A.shape[1],
        b_wide=B.shape[0] <= B.shape[1],
    )


def read_matrix_csv(path) -> np.ndarray:
    """Read a header-less CSV matrix, one row per line."""
    arr = np.loadtxt(Path(path), delimiter=",", ndmin=2, dtype=np.float64)
    return as_matrix(arr, str(path))


def write_matrix_csv(path, A) -> None:
    A = as_matrix(A)
    np.savetxt(Path(path), A, delimiter=",", fmt="%.17g")


def matrix_to_csv_string(A) -> str:
    A = as_matrix(A)
    return "\n".join(",".join(format(v, ".17g") for v in row) for row in A)
