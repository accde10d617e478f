"""Classify critical points of a deep linear network.

With ``k`` the narrowest width, a critical point whose end-to-end product
has rank ``k`` is a global minimum when ``k = min(d_x, d_y)``; when
``k < min(d_x, d_y)`` it additionally needs the column space of
``W_{H+1} ... W_{p+1}`` to equal the top-``k`` left singular subspace of
``M = Y X^T (X X^T)^{-1} X``. Every other critical point is a saddle.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from dlcert.errors import AssumptionViolated, ConsistencyError, InvalidInput, NotInV1
from dlcert.linalg import DEFAULT_TOL, Tolerances, numerical_rank, sigma_extrema, subspaces_equal
from dlcert.network import (
    Instance,
    WeightStack,
    forward_product,
    loss_and_gradients,
    partial_products,
    product_range,
    residual_to_plain,
)
from dlcert.relaxed import optimal_loss, solve_rank_constrained

logger = logging.getLogger(__name__)

GAP_RTOL = 1e-6


class Verdict(str, enum.Enum):
    GLOBAL_MIN = "GlobalMin"
    SADDLE = "Saddle"
    NOT_CRITICAL = "NotCritical"


class Regime(str, enum.Enum):
    FULL = "FullBottleneck"
    STRICT = "StrictBottleneck"


EXIT_CODES = {Verdict.GLOBAL_MIN: 0, Verdict.SADDLE: 2, Verdict.NOT_CRITICAL: 3}


class CriticalityResult(NamedTuple):
    critical: bool
    grad_norms: list[float]
    threshold: float


class V2Result(NamedTuple):
    in_V2: bool
    subspace_distance: float


class CharacterizationResult(NamedTuple):
    ApE_norm: float
    EBp1_norm: float
    consistent: bool


@dataclass(frozen=True)
class Certificate:
    verdict: Verdict
    grad_norms: list[float]
    product_rank: int
    k: int
    p: int
    regime: Regime
    in_V1: bool
    in_V2: bool | None
    subspace_distance: float | None
    loss: float
    optimal_loss: float
    loss_gap: float
    criticality_residuals: tuple[float, float]
    marginal: bool
    grad_threshold: float

    def to_json(self) -> dict:
        out = asdict(self)
        for key in ("in_V1", "in_V2", "marginal"):
            if out[key] is not None:
                out[key] = bool(out[key])
        out["grad_norms"] = [float(v) for v in self.grad_norms]
        out["verdict"] = self.verdict.value
        out["regime"] = self.regime.value
        out["criticality_residuals"] = list(self.criticality_residuals)
        return out

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.verdict]


def regime_of(W: WeightStack) -> Regime:
    return Regime.FULL if W.dims.full_bottleneck else Regime.STRICT


def _require_valid(inst: Instance) -> None:
    if not inst.validated:
        raise AssumptionViolated("instance has not been validated")


def is_critical(W: WeightStack, inst: Instance, tol: Tolerances = DEFAULT_TOL) -> CriticalityResult:
    """All gradient norms at most ``grad_tol * max(1, ||Y X^T||_F)``."""
    _require_valid(inst)
    _, grads = loss_and_gradients(W, inst)
    norms = [float(np.linalg.norm(g)) for g in grads]
    threshold = tol.grad_tol * inst.scale
    return CriticalityResult(max(norms) <= threshold, norms, threshold)


def check_V1(W: WeightStack, tol: Tolerances = DEFAULT_TOL) -> bool:
    return numerical_rank(forward_product(W), tol) == W.dims.k


def _resolve_p(W: WeightStack, p: int | None) -> int:
    if p is None:
        return W.dims.p
    if p not in W.dims.admissible_p:
        raise InvalidInput(f"p={p} is not a minimal-width layer; choices are {W.dims.admissible_p}")
    return p


def check_V2(W: WeightStack, inst: Instance, tol: Tolerances = DEFAULT_TOL, p: int | None = None) -> V2Result:
    """Rank-k product and ``col(W_{H+1} ... W_{p+1}) = col(U_hat)``."""
    if regime_of(W) is not Regime.STRICT:
        raise InvalidInput("check_V2 applies only when k < min(d_x, d_y)")
    _require_valid(inst)
    p = _resolve_p(W, p)
    U_hat = solve_rank_constrained(inst, W.dims.k).U_hat
    post = product_range(W, p + 1, len(W))
    if not np.any(post):
        return V2Result(False, float("nan"))
    cmp = subspaces_equal(post, U_hat, tol)
    return V2Result(check_V1(W, tol) and cmp.equal, cmp.distance)


def _residual_norms(W: WeightStack, inst: Instance, p: int) -> tuple[float, float]:
    pp = partial_products(W, inst)
    n = len(W)
    # the definitions extend to A_0 = W_1^T A_1 and B_{H+2} = B_{H+1} W_{H+1}^T
    A_p = pp.A_at(p) if p >= 1 else W.W[0].T @ pp.A_at(1)
    B_p1 = pp.B_at(p + 1) if p + 1 <= n else pp.B_at(n) @ W.W[n - 1].T
    return float(np.linalg.norm(A_p @ pp.E)), float(np.linalg.norm(pp.E @ B_p1))


def check_criticality_characterization(
    W: WeightStack, inst: Instance, tol: Tolerances = DEFAULT_TOL, p: int | None = None
) -> CharacterizationResult:
    """Cross-check criticality against ``A_p E = 0`` and ``E B_{p+1} = 0``.

    Within the rank-k set the two tests must agree; ``consistent`` reports
    whether they do.
    """
    _require_valid(inst)
    if not check_V1(W, tol):
        raise NotInV1("end-to-end product does not have rank k")
    p = _resolve_p(W, p)
    a, b = _residual_norms(W, inst, p)
    crit = is_critical(W, inst, tol).critical
    cutoff = tol.zero_tol * inst.scale
    return CharacterizationResult(a, b, (max(a, b) <= cutoff) == crit)


def _marginal(P: np.ndarray, k: int, tol: Tolerances) -> bool:
    s = np.linalg.svd(P, compute_uv=False)
    if s[0] <= tol.zero_tol or k > len(s):
        return False
    cut = tol.rank_rel_tol * s[0]
    return cut / 10 <= s[k - 1] <= cut * 10


def classify(
    W: WeightStack,
    inst: Instance,
    tol: Tolerances = DEFAULT_TOL,
    p: int | None = None,
    strict: bool = True,
) -> Certificate:
    """Certify ``W`` as GlobalMin, Saddle or NotCritical.

    With ``strict`` a GlobalMin verdict whose loss exceeds the relaxed
    optimum by more than ``1e-6 * max(1, optimal_loss)`` raises
    :class:`ConsistencyError` instead of being returned.
    """
    _require_valid(inst)
    p = _resolve_p(W, p)
    regime = regime_of(W)
    k = W.dims.k
    crit = is_critical(W, inst, tol)
    P = forward_product(W)
    rank = numerical_rank(P, tol)
    in_V1 = rank == k
    in_V2 = None
    dist = None
    if regime is Regime.STRICT:
        v2 = check_V2(W, inst, tol, p)
        in_V2, dist = v2.in_V2, v2.subspace_distance
    cur = 0.5 * float(np.sum((P @ inst.X - inst.Y) ** 2))
    opt = optimal_loss(inst, k).total
    gap = cur - opt
    residuals = _residual_norms(W, inst, p)

    if not crit.critical:
        verdict = Verdict.NOT_CRITICAL
    elif regime is Regime.FULL:
        verdict = Verdict.GLOBAL_MIN if in_V1 else Verdict.SADDLE
    else:
        verdict = Verdict.GLOBAL_MIN if in_V2 else Verdict.SADDLE

    if verdict is Verdict.GLOBAL_MIN and gap > GAP_RTOL * max(1.0, opt):
        msg = f"GlobalMin verdict but loss gap {gap:.3e} exceeds tolerance"
        if strict:
            raise ConsistencyError(msg)
        logger.warning(msg)

    return Certificate(
        verdict=verdict,
        grad_norms=crit.grad_norms,
        product_rank=rank,
        k=k,
        p=p,
        regime=regime,
        in_V1=in_V1,
        in_V2=in_V2,
        subspace_distance=None if dist is None or np.isnan(dist) else dist,
        loss=cur,
        optimal_loss=opt,
        loss_gap=gap,
        criticality_residuals=residuals,
        marginal=_marginal(P, k, tol),
        grad_threshold=crit.threshold,
    )


def check_residual_condition(V: Sequence[np.ndarray], tol: Tolerances = DEFAULT_TOL) -> bool:
    """True iff every residual block has ``sigma_max(V_i) < 1``.

    When it holds each ``I + V_i`` is invertible, so the plain stack has a
    full-rank product; this is confirmed with :func:`check_V1`.
    """
    ok = all(sigma_extrema(v)[0] < 1.0 for v in V)
    if ok:
        W = residual_to_plain(V)
        if not check_V1(W, tol):
            raise ConsistencyError("sigma_max(V_i) < 1 for all i but the product is rank deficient")
        logger.debug("residual condition holds; plain stack confirmed full rank")
    return ok
