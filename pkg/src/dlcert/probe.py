"""Sampled checks of the function-space conditions for nonlinear pipelines.

A pipeline is a composition ``h_{H+1} o ... o h_1`` of layer maps with
``h_i(0) = 0``. Layer ``i`` (1-based) maps width ``d_{i-1}`` to ``d_i``;
``h_{b:a}`` denotes ``h_b o ... o h_a`` and is the identity when ``b < a``.

Points are stored one per row: a batch of ``n`` inputs of width ``d`` is an
``(n, d)`` array and batched Jacobians have shape ``(n, out, in)``.

Every "for all z" condition is only checked on a finite sample, so the
reports here can falsify a condition but never prove it.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from dlcert.errors import InvalidInput, NoDeclaredInverse, WrongRegime
from dlcert.linalg import read_matrix_csv

logger = logging.getLogger(__name__)

FD_STEP = 1e-6
FD_RTOL = 1e-5
FD_POINTS = 20
GROWTH_SCALES = (0.01, 1.0, 100.0)
ROUND_TRIP_TOL = 1e-8
KINDS = ("linear", "tanh", "arctan", "padding", "truncation", "custom")


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise InvalidInput(f"expected a vector or a batch of row vectors, got ndim={x.ndim}")
    return x, False


@dataclass(frozen=True, eq=False)
class LayerMap:
    """A differentiable map ``R^in -> R^out`` with ``h(0) = 0``.

    ``fn`` and ``jac`` act on batches: ``fn`` maps ``(n, in)`` to
    ``(n, out)`` and ``jac`` maps ``(n, in)`` to ``(n, out, in)``.
    ``inverse``, when given, maps ``(n, out)`` back to ``(n, in)``; for
    width-changing maps it is a one-sided inverse and only the composed
    round trips are taken as evidence.
    """

    in_dim: int
    out_dim: int
    kind: str
    fn: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    jac: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    growth_bound: float
    twice_differentiable: bool
    inverse: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)
    matrix: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise InvalidInput(f"layer dims must be positive, got {self.in_dim}->{self.out_dim}")
        if self.kind not in KINDS:
            raise InvalidInput(f"unknown layer kind {self.kind!r}")
        if not self.growth_bound >= 0:
            raise InvalidInput(f"growth bound must be non-negative, got {self.growth_bound}")

    def eval(self, x) -> np.ndarray:
        X, single = _as_batch(x)
        if X.shape[1] != self.in_dim:
            raise InvalidInput(f"{self.kind} layer expects width {self.in_dim}, got {X.shape[1]}")
        out = self.fn(X)
        return out[0] if single else out

    def jacobian(self, x) -> np.ndarray:
        X, single = _as_batch(x)
        if X.shape[1] != self.in_dim:
            raise InvalidInput(f"{self.kind} layer expects width {self.in_dim}, got {X.shape[1]}")
        J = self.jac(X)
        return J[0] if single else J

    def invert(self, y) -> np.ndarray:
        if self.inverse is None:
            raise NoDeclaredInverse(f"{self.kind} layer has no declared inverse")
        Y, single = _as_batch(y)
        out = self.inverse(Y)
        return out[0] if single else out

    def __call__(self, x):
        return self.eval(x)


class LayerCheck(NamedTuple):
    zero_ok: bool
    jacobian_rel_err: float
    growth_ratio: float
    ok: bool


def verify_layer(h: LayerMap, seed: int = 0) -> LayerCheck:
    """Check ``h(0) = 0``, the Jacobian and the growth bound on samples.

    The Jacobian is compared with central differences (step ``1e-6``) at
    20 standard normal points; the ratio ``||h(x)|| / ||x||`` is sampled
    at scales 0.01, 1 and 100.
    """
    rng = np.random.default_rng(seed)
    zero_ok = bool(np.all(h.eval(np.zeros(h.in_dim)) == 0))
    pts = rng.standard_normal((FD_POINTS, h.in_dim))
    J = h.jacobian(pts)
    err = 0.0
    for idx in range(FD_POINTS):
        fd = _fd_jacobian(h.eval, pts[idx], h.out_dim)
        err = max(err, float(np.linalg.norm(J[idx] - fd) / max(1.0, np.linalg.norm(J[idx]))))
    ratio = 0.0
    for scale in GROWTH_SCALES:
        x = rng.standard_normal((FD_POINTS, h.in_dim)) * scale
        ratio = max(ratio, float(np.max(np.linalg.norm(h.eval(x), axis=1) / np.linalg.norm(x, axis=1))))
    ok = zero_ok and err <= FD_RTOL and ratio <= h.growth_bound * (1 + 1e-12)
    return LayerCheck(zero_ok, err, ratio, ok)


def _fd_jacobian(f, x, out_dim, step=FD_STEP) -> np.ndarray:
    n = x.size
    E = np.eye(n) * step
    plus = f(x[None, :] + E)
    minus = f(x[None, :] - E)
    return ((plus - minus) / (2 * step)).T.reshape(out_dim, n)


def _registered(h: LayerMap, verify: bool) -> LayerMap:
    if verify:
        chk = verify_layer(h)
        if not chk.ok:
            raise InvalidInput(f"{h.kind} layer failed verification: {chk}")
    return h


def linear(A, verify: bool = True) -> LayerMap:
    A = np.array(A, dtype=float, ndmin=2)
    if not np.all(np.isfinite(A)):
        raise InvalidInput("linear layer matrix has non-finite entries")
    out_dim, in_dim = A.shape
    pinv = np.linalg.pinv(A)
    return _registered(LayerMap(
        in_dim, out_dim, "linear",
        fn=lambda X: X @ A.T,
        jac=lambda X: np.broadcast_to(A, (X.shape[0],) + A.shape).copy(),
        growth_bound=float(np.linalg.norm(A, 2)),
        twice_differentiable=True,
        inverse=lambda Y: Y @ pinv.T,
        matrix=A,
    ), verify)


def _diag_batch(d: np.ndarray) -> np.ndarray:
    n, w = d.shape
    out = np.zeros((n, w, w))
    idx = np.arange(w)
    out[:, idx, idx] = d
    return out


def _bounded_inverse(f, bound):
    # outside the open range the inverse does not exist; nan makes round trips fail
    def inv(Y):
        with np.errstate(invalid="ignore", divide="ignore"):
            out = f(np.where(np.abs(Y) < bound, Y, np.nan))
        return out
    return inv


def tanh(dim: int, verify: bool = True) -> LayerMap:
    return _registered(LayerMap(
        dim, dim, "tanh",
        fn=np.tanh,
        jac=lambda X: _diag_batch(1.0 - np.tanh(X) ** 2),
        growth_bound=1.0,
        twice_differentiable=True,
        inverse=_bounded_inverse(np.arctanh, 1.0),
    ), verify)


def arctan(dim: int, verify: bool = True) -> LayerMap:
    return _registered(LayerMap(
        dim, dim, "arctan",
        fn=np.arctan,
        jac=lambda X: _diag_batch(1.0 / (1.0 + X * X)),
        growth_bound=1.0,
        twice_differentiable=True,
        inverse=_bounded_inverse(np.tan, np.pi / 2),
    ), verify)


def _selector(out_dim: int, in_dim: int) -> np.ndarray:
    return np.eye(out_dim, in_dim)


def padding(in_dim: int, out_dim: int, verify: bool = True) -> LayerMap:
    """``(w_1, ..., w_in) -> (w_1, ..., w_in, 0, ..., 0)``."""
    if out_dim < in_dim:
        raise InvalidInput(f"padding cannot shrink {in_dim} to {out_dim}")
    S = _selector(out_dim, in_dim)

    def fn(X):
        out = np.zeros((X.shape[0], out_dim))
        out[:, :in_dim] = X
        return out

    return _registered(LayerMap(
        in_dim, out_dim, "padding",
        fn=fn,
        jac=lambda X: np.broadcast_to(S, (X.shape[0],) + S.shape).copy(),
        growth_bound=1.0,
        twice_differentiable=True,
        inverse=lambda Y: Y[:, :in_dim].copy(),
        matrix=S,
    ), verify)


def truncation(in_dim: int, out_dim: int, verify: bool = True) -> LayerMap:
    """Keep the first ``out_dim`` coordinates."""
    if out_dim > in_dim:
        raise InvalidInput(f"truncation cannot grow {in_dim} to {out_dim}")
    S = _selector(out_dim, in_dim)

    def inv(Y):
        # right inverse: zero fill
        out = np.zeros((Y.shape[0], in_dim))
        out[:, :out_dim] = Y
        return out

    return _registered(LayerMap(
        in_dim, out_dim, "truncation",
        fn=lambda X: X[:, :out_dim].copy(),
        jac=lambda X: np.broadcast_to(S, (X.shape[0],) + S.shape).copy(),
        growth_bound=1.0,
        twice_differentiable=True,
        inverse=inv,
        matrix=S,
    ), verify)


def resize(in_dim: int, out_dim: int, verify: bool = True) -> LayerMap:
    """Padding or truncation, whichever changes ``in_dim`` into ``out_dim``."""
    if out_dim >= in_dim:
        return padding(in_dim, out_dim, verify)
    return truncation(in_dim, out_dim, verify)


def custom(in_dim: int, out_dim: int, fn, jac, growth_bound: float, twice_differentiable: bool,
           inverse=None, verify: bool = True) -> LayerMap:
    """A caller-defined layer; smoothness and the growth bound must be declared."""
    return _registered(LayerMap(in_dim, out_dim, "custom", fn, jac, float(growth_bound),
                                bool(twice_differentiable), inverse), verify)


def scaled(h: LayerMap, c: float, verify: bool = True) -> LayerMap:
    return custom(h.in_dim, h.out_dim, lambda X: c * h.fn(X), lambda X: c * h.jac(X),
                  abs(c) * h.growth_bound, h.twice_differentiable,
                  None if h.inverse is None or c == 0 else (lambda Y: h.inverse(Y / c)), verify)


def perturbed(h: LayerMap, eta: LayerMap, t: float) -> LayerMap:
    """``h + t * eta`` as a layer; used for finite differences in function space."""
    if (h.in_dim, h.out_dim) != (eta.in_dim, eta.out_dim):
        raise InvalidInput("direction must have the layer's dimensions")
    return custom(h.in_dim, h.out_dim, lambda X: h.fn(X) + t * eta.fn(X),
                  lambda X: h.jac(X) + t * eta.jac(X),
                  h.growth_bound + abs(t) * eta.growth_bound,
                  h.twice_differentiable and eta.twice_differentiable, verify=False)


@dataclass(frozen=True, eq=False)
class Pipeline:
    """Composition of layers, first layer applied first.

    With ``check_widths`` every width must be at least ``min(d_x, d_y)``;
    target maps built as pipelines may switch this off.
    """

    layers: tuple[LayerMap, ...]
    check_widths: bool = True

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise InvalidInput("a pipeline needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise InvalidInput(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")
        d = self.dims
        if self.check_widths:
            lo = min(d[0], d[-1])
            if min(d) < lo:
                raise InvalidInput(f"every width must be at least min(d_x, d_y) = {lo}, got {list(d)}")
        if np.any(self.eval(np.zeros(d[0])) != 0):
            raise InvalidInput("composed map does not vanish at 0")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.layers[0].in_dim,) + tuple(h.out_dim for h in self.layers)

    @property
    def H(self) -> int:
        return len(self.layers) - 1

    @property
    def d_x(self) -> int:
        return self.dims[0]

    @property
    def d_y(self) -> int:
        return self.dims[-1]

    def segment(self, lo: int, hi: int, x) -> np.ndarray:
        """``h_{hi:lo}(x)``, identity when ``hi < lo``."""
        X, single = _as_batch(x)
        for h in self.layers[lo - 1: hi]:
            X = h.eval(X)
        return X[0] if single else X

    def eval(self, x) -> np.ndarray:
        return self.segment(1, len(self.layers), x)

    def __call__(self, x):
        return self.eval(x)

    def replace(self, i: int, h: LayerMap) -> "Pipeline":
        layers = list(self.layers)
        layers[i - 1] = h
        return Pipeline(tuple(layers), self.check_widths)

    def jacobian(self, x) -> np.ndarray:
        return compose_jacobian(self, 1, x)

    def as_layer(self) -> LayerMap:
        """View the whole pipeline as one custom layer."""
        inverse = None
        if all(h.inverse is not None for h in self.layers):
            def inverse(Y):
                for h in reversed(self.layers):
                    Y = h.inverse(Y)
                return Y
        return LayerMap(self.d_x, self.d_y, "custom", self.eval, self.jacobian,
                        float(np.prod([h.growth_bound for h in self.layers])),
                        all(h.twice_differentiable for h in self.layers), inverse)


def as_pipeline(h) -> Pipeline:
    if isinstance(h, Pipeline):
        return h
    if isinstance(h, LayerMap):
        return Pipeline((h,), check_widths=False)
    raise InvalidInput(f"expected a Pipeline or LayerMap, got {type(h).__name__}")


@dataclass(frozen=True)
class Sampler:
    """``n`` seeded draws of ``scale * N(0, I)``."""

    n: int
    seed: int = 0
    scale: float = 1.0

    def __post_init__(self):
        if self.n < 1:
            raise InvalidInput(f"sample count must be at least 1, got {self.n}")
        if not self.scale > 0:
            raise InvalidInput(f"scale must be positive, got {self.scale}")

    def draw(self, dim: int, stream: int = 0) -> np.ndarray:
        rng = np.random.default_rng([self.seed, stream])
        return rng.standard_normal((self.n, dim)) * self.scale


@dataclass
class ConditionReport:
    theorem: str
    sigma_min_inf_estimate: float
    epsilons: dict
    invertibility_evidence: float | None
    satisfied: bool
    n_samples: int
    seed: int
    scale: float
    checks: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "theorem": self.theorem,
            "sigma_min_inf_estimate": self.sigma_min_inf_estimate,
            "epsilons": dict(self.epsilons),
            "invertibility_evidence": self.invertibility_evidence,
            "satisfied": self.satisfied,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "scale": self.scale,
            "checks": dict(self.checks),
            "note": "conditions checked at sampled points only",
        }


class MonteCarloEstimate(NamedTuple):
    mean: float
    stderr: float
    n: int


class RiskEstimate(NamedTuple):
    excess: float
    stderr: float
    n: int
    max_discrepancy: float
    high_variance: bool


def compose_jacobian(p: Pipeline, from_layer: int, x) -> np.ndarray:
    """Jacobian of ``h_{H+1:from_layer}`` at ``x`` by the chain rule.

    ``x`` lives in the input space of layer ``from_layer``. With
    ``from_layer = H + 2`` the suffix is empty and the identity is returned.
    """
    n_layers = len(p.layers)
    if not 1 <= from_layer <= n_layers + 1:
        raise InvalidInput(f"from_layer must be in [1, {n_layers + 1}], got {from_layer}")
    X, single = _as_batch(x)
    width = p.dims[from_layer - 1]
    if X.shape[1] != width:
        raise InvalidInput(f"layer {from_layer} expects width {width}, got {X.shape[1]}")
    J = np.broadcast_to(np.eye(width), (X.shape[0], width, width)).copy()
    for h in p.layers[from_layer - 1:]:
        J = np.matmul(h.jacobian(X), J)
        X = h.eval(X)
    return J[0] if single else J


def _sigma_min_batch(J: np.ndarray) -> np.ndarray:
    return np.linalg.svd(J, compute_uv=False)[:, -1]


def estimate_sigma_min_inf(p: Pipeline, from_layer: int, s: Sampler) -> float:
    """Smallest sampled ``sigma_min`` of the suffix Jacobian.

    A lower envelope over ``s.n`` sampled points, not a bound over all
    inputs. When the suffix output is wider than its input the value is
    still computed but cannot reflect full row rank.
    """
    width = p.dims[from_layer - 1]
    if p.d_y > width:
        logger.warning("suffix output width %d exceeds input width %d; sigma_min is not a row-rank measure",
                       p.d_y, width)
    Z = s.draw(width, stream=from_layer)
    return float(np.min(_sigma_min_batch(compose_jacobian(p, from_layer, Z))))


def smoothness_spot_check(h: LayerMap, seed: int = 0, points: int = 5) -> bool:
    """Second differences of the Jacobian at two step sizes agree.

    Only meaningful for layers declared twice differentiable; a kink near
    a sample shows up as a disagreement.
    """
    if not h.twice_differentiable:
        return False
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((points, h.in_dim))
    V = rng.standard_normal((points, h.in_dim))
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    est = []
    for step in (1e-3, 5e-4):
        est.append((h.jacobian(X + step * V) - h.jacobian(X - step * V)) / (2 * step))
    diff = np.linalg.norm(est[0] - est[1])
    return bool(diff <= 1e-3 * max(1.0, float(np.linalg.norm(est[1]))))


def _smooth(layers: Sequence[LayerMap], seed: int) -> bool:
    return all(smoothness_spot_check(h, seed) for h in layers)


def check_theorem3(p: Pipeline, s: Sampler, margin: float) -> ConditionReport:
    """Sampled check that ``sigma_min(J[h_{H+1:2}]) >= margin`` and the suffix is smooth."""
    if p.d_x < p.d_y:
        raise WrongRegime(f"needs d_x >= d_y, got d_x={p.d_x}, d_y={p.d_y}")
    sigma = estimate_sigma_min_inf(p, 2, s)
    suffix = p.layers[1:]
    tags = all(h.twice_differentiable for h in suffix)
    smooth = _smooth(suffix, s.seed)
    return ConditionReport(
        theorem="T3",
        sigma_min_inf_estimate=sigma,
        epsilons={"epsilon": margin},
        invertibility_evidence=None,
        satisfied=bool(sigma >= margin and tags and smooth),
        n_samples=s.n,
        seed=s.seed,
        scale=s.scale,
        checks={"twice_differentiable_tags": tags, "smoothness_spot_check": smooth},
    )


def _round_trip(p: Pipeline, j: int, s: Sampler) -> float:
    # both directions on the prefix h_{j-1:1}, relative to max(1, ||u||)
    prefix = p.layers[: j - 1]
    missing = [h.kind for h in prefix if h.inverse is None]
    if missing:
        raise NoDeclaredInverse(f"prefix layers without a declared inverse: {missing}")
    U = s.draw(p.d_x, stream=101)

    def inv(Y):
        for h in reversed(prefix):
            Y = h.inverse(Y)
        return Y

    fwd = p.segment(1, j - 1, U)
    worst = 0.0
    for a, b in ((inv(fwd), U), (p.segment(1, j - 1, inv(U)), U)):
        r = np.linalg.norm(a - b, axis=1) / np.maximum(1.0, np.linalg.norm(b, axis=1))
        r = np.where(np.isfinite(r), r, np.inf)
        worst = max(worst, float(np.max(r)))
    return worst


def check_theorem4(p: Pipeline, j: int, s: Sampler, margins: tuple[float, float]) -> ConditionReport:
    """Sampled checks on an invertible prefix ``h_{j-1:1}`` and the suffix after layer ``j``.

    Reports the smallest sampled ``||h_{j-1:1}(u)|| / ||u||`` as the
    estimate of epsilon_1 and the smallest sampled ``sigma_min`` of
    ``J[h_{H+1:j+1}]`` as epsilon_2.
    """
    n_layers = len(p.layers)
    if p.d_x > p.d_y:
        raise WrongRegime(f"needs d_x <= d_y, got d_x={p.d_x}, d_y={p.d_y}")
    if not 1 <= j <= n_layers:
        raise WrongRegime(f"j must be in [1, {n_layers}], got {j}")
    d = p.dims
    if d[j - 1] != p.d_x or d[j] < p.d_y:
        raise WrongRegime(f"needs d_(j-1) = d_x and d_j >= d_y at j={j}, dims {list(d)}")
    eps1, eps2 = margins
    U = s.draw(p.d_x, stream=100)
    ratio = np.linalg.norm(p.segment(1, j - 1, U), axis=1) / np.linalg.norm(U, axis=1)
    eps1_est = float(np.min(ratio))
    residual = _round_trip(p, j, s)
    eps2_est = estimate_sigma_min_inf(p, j + 1, s)
    tags = all(h.twice_differentiable for h in p.layers)
    smooth = _smooth(p.layers, s.seed)
    ok = eps1_est >= eps1 and eps2_est >= eps2 and residual < ROUND_TRIP_TOL and tags and smooth
    return ConditionReport(
        theorem="T4",
        sigma_min_inf_estimate=eps2_est,
        epsilons={"epsilon1": eps1, "epsilon2": eps2,
                  "epsilon1_estimate": eps1_est, "epsilon2_estimate": eps2_est},
        invertibility_evidence=residual,
        satisfied=bool(ok),
        n_samples=s.n,
        seed=s.seed,
        scale=s.scale,
        checks={"j": j, "twice_differentiable_tags": tags, "smoothness_spot_check": smooth},
    )


def _target_eval(target, X) -> np.ndarray:
    if isinstance(target, (Pipeline, LayerMap)):
        return target.eval(X)
    return np.asarray(target(X), dtype=float)


def empirical_risk(p: Pipeline, target, X: np.ndarray) -> float:
    """``0.5 * mean ||p(x) - h*(x)||^2`` over the rows of ``X``."""
    r = p.eval(X) - _target_eval(target, X)
    return 0.5 * float(np.mean(np.sum(r * r, axis=1)))


def frechet_directional(p: Pipeline, i: int, eta: LayerMap, target, s: Sampler) -> MonteCarloEstimate:
    """Monte-Carlo directional derivative of the risk along ``eta`` in layer ``i``.

    Averages ``(h(X) - h*(X))^T J[h_{H+1:i+1}](h_{i:1}(X)) eta(h_{i-1:1}(X))``
    over the sampler and returns the mean with its standard error.
    """
    if not 1 <= i <= len(p.layers):
        raise InvalidInput(f"layer index must be in [1, {len(p.layers)}], got {i}")
    layer = p.layers[i - 1]
    if (eta.in_dim, eta.out_dim) != (layer.in_dim, layer.out_dim):
        raise InvalidInput("direction must have the layer's dimensions")
    if np.any(eta.eval(np.zeros(eta.in_dim)) != 0):
        raise InvalidInput("direction must vanish at 0")
    X = s.draw(p.d_x)
    a = p.segment(1, i - 1, X)
    b = layer.eval(a)
    out = p.segment(i + 1, len(p.layers), b)
    r = out - _target_eval(target, X)
    J = compose_jacobian(p, i + 1, b)
    vals = np.einsum("ni,nij,nj->n", r, J, eta.eval(a))
    stderr = float(np.std(vals, ddof=1) / np.sqrt(s.n)) if s.n > 1 else float("inf")
    return MonteCarloEstimate(float(np.mean(vals)), stderr, s.n)


def frechet_finite_difference(p: Pipeline, i: int, eta: LayerMap, target, s: Sampler,
                              t: float = 1e-4) -> float:
    """Central difference of the empirical risk along ``h_i + t eta`` on the same samples."""
    X = s.draw(p.d_x)
    layer = p.layers[i - 1]
    up = empirical_risk(p.replace(i, perturbed(layer, eta, t)), target, X)
    down = empirical_risk(p.replace(i, perturbed(layer, eta, -t)), target, X)
    return (up - down) / (2 * t)


def realization_index(dims: Sequence[int]) -> int:
    """Smallest ``j`` at which the target can be embedded exactly.

    Layers before ``j`` carry the input unchanged (so ``d_{j-1} = d_x`` and
    every earlier width is at least ``d_x``); layers from ``j`` on carry the
    target's ``d_y`` outputs (so every width from ``d_j`` on is at least
    ``d_y``).
    """
    d = list(dims)
    if len(d) < 2 or min(d) < 1:
        raise InvalidInput(f"invalid widths {d}")
    dx, dy = d[0], d[-1]
    n_layers = len(d) - 1
    for j in range(1, n_layers + 1):
        carries_x = d[j - 1] == dx and all(w >= dx for w in d[1: j])
        carries_y = all(w >= dy for w in d[j: n_layers])
        if carries_x and carries_y:
            return j
    raise WrongRegime(f"no layer can embed a {dx}->{dy} target exactly for widths {d}")


def realize_pipeline(h_star, dims) -> Pipeline:
    """Pipeline whose composition equals ``h_star`` exactly.

    Layers before the embedding index ``j`` pad or truncate while keeping
    the first ``d_x`` coordinates; layer ``j`` is ``x -> (h*(x), 0, ..., 0)``;
    later layers pad or truncate while keeping the first ``d_y``
    coordinates.
    """
    target = as_pipeline(h_star)
    d = list(getattr(dims, "d", dims))
    if (d[0], d[-1]) != (target.d_x, target.d_y):
        raise InvalidInput(f"target maps {target.d_x}->{target.d_y} but widths are {d}")
    j = realization_index(d)
    core = target.as_layer()
    layers = []
    for i in range(1, len(d)):
        if i == j:
            pad = padding(target.d_y, d[i])
            layers.append(custom(
                d[i - 1], d[i],
                fn=lambda X, pad=pad: pad.fn(core.fn(X)),
                jac=lambda X, pad=pad: np.matmul(pad.matrix, core.jac(X)),
                growth_bound=core.growth_bound,
                twice_differentiable=core.twice_differentiable,
                inverse=None if core.inverse is None else (lambda Y, pad=pad: core.inverse(pad.inverse(Y))),
                verify=False,
            ))
        else:
            layers.append(resize(d[i - 1], d[i]))
    return Pipeline(tuple(layers))


def excess_risk(p: Pipeline, h_star, s: Sampler) -> RiskEstimate:
    """Monte-Carlo estimate of ``0.5 E ||p(X) - h*(X)||^2``.

    This is the risk in excess of the irreducible noise term, which is
    never computed. A single sample is flagged as high variance.
    """
    target = h_star
    X = s.draw(p.d_x)
    Yt = _target_eval(target, X)
    out = p.eval(X)
    if out.shape != Yt.shape:
        raise InvalidInput(f"pipeline output {out.shape} does not match target {Yt.shape}")
    r = out - Yt
    vals = 0.5 * np.sum(r * r, axis=1)
    stderr = float(np.std(vals, ddof=1) / np.sqrt(s.n)) if s.n > 1 else float("inf")
    return RiskEstimate(float(np.mean(vals)), stderr, s.n, float(np.max(np.abs(r))), s.n == 1)


def load_pipeline(path) -> Pipeline:
    """Read a pipeline from JSON.

    The file holds ``{"input_dim": d, "layers": [...]}`` (or just the layer
    list when the first layer is linear). Layers are
    ``{"kind": "linear", "matrix": "A.csv"}``, ``{"kind": "tanh"}``,
    ``{"kind": "arctan"}``, ``{"kind": "padding", "out": k}`` or
    ``{"kind": "truncation", "out": k}``; matrix paths are relative to the
    JSON file.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInput(f"cannot read pipeline spec {path}: {exc}") from exc
    if isinstance(data, list):
        data = {"layers": data}
    specs = data.get("layers")
    if not isinstance(specs, list) or not specs:
        raise InvalidInput("pipeline spec needs a non-empty 'layers' list")
    width = data.get("input_dim")
    layers = []
    for spec in specs:
        kind = spec.get("kind")
        if kind == "linear":
            A = spec["matrix"]
            A = read_matrix_csv(path.parent / A) if isinstance(A, str) else np.asarray(A, float)
            h = linear(A)
            if width is not None and h.in_dim != width:
                raise InvalidInput(f"linear layer expects width {h.in_dim}, previous width is {width}")
        elif width is None:
            raise InvalidInput(f"cannot infer the input width of a leading {kind!r} layer; set input_dim")
        elif kind == "tanh":
            h = tanh(width)
        elif kind == "arctan":
            h = arctan(width)
        elif kind == "padding":
            h = padding(width, int(spec["out"]))
        elif kind == "truncation":
            h = truncation(width, int(spec["out"]))
        else:
            raise InvalidInput(f"unknown layer kind {kind!r}")
        layers.append(h)
        width = h.out_dim
    return Pipeline(tuple(layers))


__all__ = [
    "ConditionReport",
    "LayerMap",
    "MonteCarloEstimate",
    "Pipeline",
    "RiskEstimate",
    "Sampler",
    "arctan",
    "as_pipeline",
    "check_theorem3",
    "check_theorem4",
    "compose_jacobian",
    "custom",
    "empirical_risk",
    "estimate_sigma_min_inf",
    "excess_risk",
    "frechet_directional",
    "frechet_finite_difference",
    "linear",
    "load_pipeline",
    "padding",
    "perturbed",
    "realization_index",
    "realize_pipeline",
    "resize",
    "scaled",
    "smoothness_spot_check",
    "tanh",
    "truncation",
    "verify_layer",
]
