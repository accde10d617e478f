"""Ascent and descent witnesses near critical points.

A critical point that is not a local minimum is a saddle as soon as it is
also not a local maximum. The witnesses here exhibit a nearby point with
strictly larger loss: through random perturbations when
``W_H ... W_1 = 0``, and through the last-layer Hessian block otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dlcert.errors import InvalidInput, UseDegeneratePath, UseHessianPath, WitnessSearchFailed
from dlcert.linalg import DEFAULT_TOL, Tolerances
from dlcert.network import Instance, WeightStack, loss, product_range

HESSIAN_SIZE_LIMIT = 4096
MAX_SEED_RETRIES = 10


@dataclass(frozen=True, eq=False)
class AscentWitness:
    point: WeightStack
    loss_increase: float
    i_star: int
    delta_hat_norm: float
    trials_used: int
    seed: int
    base_loss: float
    candidate_losses: tuple[float, ...]
    # ||Delta_hat X||_F^2 for the degenerate construction, curvature otherwise
    delta_hat_x_sq: float

    def to_json(self) -> dict:
        return {
            "loss_increase": self.loss_increase,
            "i_star": self.i_star,
            "delta_hat_norm": self.delta_hat_norm,
            "trials_used": self.trials_used,
            "seed": self.seed,
            "base_loss": self.base_loss,
            "candidate_losses": list(self.candidate_losses),
            "delta_hat_x_sq": self.delta_hat_x_sq,
        }


@dataclass(frozen=True, eq=False)
class DescentResult:
    found: bool
    point: WeightStack | None
    best_loss: float
    base_loss: float
    trials_used: int


def sample_ball(rng: np.random.Generator, shape, radius: float) -> np.ndarray:
    """Uniform sample from the Frobenius ball of the given radius."""
    g = rng.standard_normal(shape)
    n = g.size
    norm = np.linalg.norm(g)
    u = rng.random()
    return g / norm * radius * u ** (1.0 / n)


def _is_zero(P: np.ndarray, factors, zero_tol: float) -> bool:
    # relative to the product of the factor norms; exact zero if any factor is zero
    scale = 1.0
    for F in factors:
        scale *= float(np.linalg.norm(F))
    return float(np.linalg.norm(P)) <= zero_tol * scale


def hessian_block_last_layer(W: WeightStack, inst: Instance) -> np.ndarray:
    """Hessian of the loss with respect to ``vec(W_{H+1}^T)``.

    Equals ``I_{d_y} kron (Z Z^T)`` with ``Z = W_H ... W_1 X``.
    """
    dy = W.dims.d_y
    dH = W.dims.d[-2]
    if dy * dH > HESSIAN_SIZE_LIMIT:
        raise InvalidInput(f"Hessian block of size {dy * dH} exceeds {HESSIAN_SIZE_LIMIT}")
    Z = product_range(W, 1, len(W) - 1) @ inst.X
    return np.kron(np.eye(dy), Z @ Z.T)


def _loss_of(mats, inst):
    return loss(WeightStack(tuple(mats)), inst)


def witness_ascent_degenerate(
    W: WeightStack,
    inst: Instance,
    epsilon: float,
    seed: int,
    tol: Tolerances = DEFAULT_TOL,
    max_retries: int = MAX_SEED_RETRIES,
) -> AscentWitness:
    """Randomised ascent witness at a point with ``W_H ... W_1 = 0``.

    Layers are perturbed one at a time by ``Delta_i`` drawn uniformly from
    the epsilon-ball until ``W_{H+1} ... W_{i+1} V_i ... V_1`` is nonzero.
    With ``Delta_hat = W_{H+1} ... W_{i*+1} Delta_{i*} V_{i*-1} ... V_1`` the
    two points using ``W_{i*} +/- Delta_{i*}`` have losses
    ``0.5||Y||^2 + 0.5||Delta_hat X||^2 -/+ <Delta_hat X, Y>``; the larger
    one is returned.
    """
    if not epsilon > 0:
        raise InvalidInput(f"epsilon must be positive, got {epsilon}")
    n = len(W)
    head = list(W.W[: n - 1])
    # with H = 0 the empty product is the identity
    if not head or not _is_zero(product_range(W, 1, n - 1), head, tol.zero_tol):
        raise UseHessianPath("W_H ... W_1 is nonzero; use the Hessian construction")
    base = loss(W, inst)
    for attempt in range(max_retries):
        rng = np.random.default_rng([seed, attempt])
        V = list(W.W)
        deltas = [None] * n
        i_star = None
        for i in range(n):
            deltas[i] = sample_ball(rng, W.W[i].shape, epsilon)
            V[i] = W.W[i] + deltas[i]
            factors = V[: i + 1] + list(W.W[i + 1:])
            prod = product_range(WeightStack(tuple(factors)), 1, n)
            if not _is_zero(prod, factors, tol.zero_tol):
                i_star = i
                break
        if i_star is None:
            continue
        pre = [V[j] for j in range(i_star)]
        post = list(W.W[i_star + 1:])
        delta_hat = _chain(post[::-1] + [deltas[i_star]] + pre[::-1])
        U1 = pre + [W.W[i_star] + deltas[i_star]] + post
        U2 = pre + [W.W[i_star] - deltas[i_star]] + post
        l1 = _loss_of(U1, inst)
        l2 = _loss_of(U2, inst)
        best, best_loss = (U1, l1) if l1 >= l2 else (U2, l2)
        DX = delta_hat @ inst.X
        if not best_loss > base:
            # the exact increase |<DX, Y>| + 0.5 ||DX||^2 is positive but not representable
            exact = abs(float(np.sum(DX * inst.Y))) + 0.5 * float(np.sum(DX * DX))
            raise WitnessSearchFailed(
                f"ascent of {exact:.3g} is below the floating-point resolution of the loss "
                f"{base:.6g}; use a larger epsilon"
            )
        return AscentWitness(
            point=WeightStack(tuple(best), W.dims),
            loss_increase=best_loss - base,
            i_star=i_star + 1,
            delta_hat_norm=float(np.linalg.norm(delta_hat)),
            trials_used=attempt + 1,
            seed=seed,
            base_loss=base,
            candidate_losses=(l1, l2),
            delta_hat_x_sq=float(np.sum(DX * DX)),
        )
    raise WitnessSearchFailed(f"no nonzero product after {max_retries} seeds")


def _chain(mats_left_to_right):
    out = mats_left_to_right[0]
    for M in mats_left_to_right[1:]:
        out = out @ M
    return out


def witness_ascent_nondegenerate(
    W: WeightStack,
    inst: Instance,
    seed: int,
    epsilon: float | None = None,
    tol: Tolerances = DEFAULT_TOL,
) -> AscentWitness:
    """Ascent along a top eigenvector of the last-layer Hessian block.

    The direction is a seeded unit combination inside the top eigenspace,
    reshaped into a perturbation of ``W_{H+1}``. Steps ``+/-10^-j`` for
    ``j = 1..12`` (capped at ``epsilon`` when given) are tried in order
    until the loss strictly increases.
    """
    n = len(W)
    head = list(W.W[: n - 1])
    Z = product_range(W, 1, n - 1)
    if head and _is_zero(Z, head, tol.zero_tol):
        raise UseDegeneratePath("W_H ... W_1 is zero; use the degenerate construction")
    Hb = hessian_block_last_layer(W, inst)
    evals, evecs = np.linalg.eigh(Hb)
    lam = evals[-1]
    top = evecs[:, evals >= lam * (1 - 1e-10)]
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(top.shape[1])
    v = top @ (c / np.linalg.norm(c))
    # vec(W^T) stacks the rows of W
    D = v.reshape(W.dims.d_y, W.dims.d[-2])
    base = loss(W, inst)
    trials = 0
    for j in range(1, 13):
        t = 10.0 ** (-j)
        if epsilon is not None and t > epsilon:
            continue
        for sgn in (1.0, -1.0):
            trials += 1
            cand = W.replace(n, W.W[-1] + sgn * t * D)
            val = loss(cand, inst)
            if val > base:
                return AscentWitness(
                    point=cand,
                    loss_increase=val - base,
                    i_star=n,
                    delta_hat_norm=t,
                    trials_used=trials,
                    seed=seed,
                    base_loss=base,
                    candidate_losses=(val,),
                    delta_hat_x_sq=float(lam),
                )
    raise WitnessSearchFailed("no strict increase along the top Hessian direction")


def witness_ascent(W: WeightStack, inst: Instance, epsilon: float, seed: int,
                   tol: Tolerances = DEFAULT_TOL) -> AscentWitness:
    """Dispatch to the degenerate or Hessian construction."""
    n = len(W)
    head = list(W.W[: n - 1])
    if not head or not _is_zero(product_range(W, 1, n - 1), head, tol.zero_tol):
        return witness_ascent_nondegenerate(W, inst, seed, epsilon, tol)
    return witness_ascent_degenerate(W, inst, epsilon, seed, tol)


def random_descent(
    W: WeightStack,
    inst: Instance,
    radius: float,
    trials: int,
    seed: int,
    margin: float = 1e-12,
) -> DescentResult:
    """Search the per-layer Frobenius ball for a loss below ``L(W) - margin``."""
    if trials < 1:
        raise InvalidInput(f"trials must be at least 1, got {trials}")
    base = loss(W, inst)
    if radius <= 0:
        return DescentResult(False, None, base, base, 0)
    rng = np.random.default_rng(seed)
    best = np.inf
    for t in range(trials):
        cand = WeightStack(tuple(w + sample_ball(rng, w.shape, radius) for w in W.W), W.dims)
        val = loss(cand, inst)
        best = min(best, val)
        if val < base - margin:
            return DescentResult(True, cand, val, base, t + 1)
    return DescentResult(False, None, best, base, trials)


def descent_search_budget(W: WeightStack) -> int:
    """Default random-search budget: ten samples per parameter."""
    return 10 * W.dims.n_params


__all__ = [
    "AscentWitness",
    "DescentResult",
    "descent_search_budget",
    "hessian_block_last_layer",
    "random_descent",
    "sample_ball",
    "witness_ascent",
    "witness_ascent_degenerate",
    "witness_ascent_nondegenerate",
]
