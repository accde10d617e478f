"""Synthetic instances, gradient descent, and seeded experiment runs."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from dlcert.certify import Certificate, Verdict, classify
from dlcert.errors import (
    AssumptionViolated,
    DivergenceDetected,
    DlcertError,
    GenerationFailed,
    InvalidInput,
)
from dlcert.escape import witness_ascent
from dlcert.linalg import DEFAULT_TOL, Tolerances, numerical_rank, sigma_extrema
from dlcert.network import (
    Dims,
    Instance,
    WeightStack,
    check_assumptions,
    forward_product,
    loss_and_gradients,
    loss_change,
)

logger = logging.getLogger(__name__)

MAX_GENERATION_ATTEMPTS = 10
ARMIJO_C = 1e-4


@dataclass(frozen=True)
class GenericGaussian:
    """X and Y with independent standard normal entries."""

    name: str = "generic"


@dataclass(frozen=True, eq=False)
class LinearGaussian:
    """``Y = R_true X + noise_sigma * xi`` with standard normal xi."""

    R_true: np.ndarray
    noise_sigma: float = 1.0
    name: str = "linear"


@dataclass(frozen=True)
class DuplicatedRows:
    """Generic Gaussian with the last row of Y copied from the first.

    Breaks the full-rank assumption on ``Y X^T`` whenever ``d_y >= 2``;
    used to exercise failure reporting.
    """

    name: str = "duplicated-rows"


MODELS = ("generic", "linear", "duplicated-rows")


def model_from_name(name: str, dims: Dims, seed: int = 0, noise_sigma: float = 1.0):
    """Data model by name; the linear model draws a standard normal ``R_true`` from ``seed``."""
    if name == "generic":
        return GenericGaussian()
    if name == "duplicated-rows":
        return DuplicatedRows()
    if name == "linear":
        R = np.random.default_rng(seed).standard_normal((dims.d_y, dims.d_x))
        return LinearGaussian(R, noise_sigma)
    raise InvalidInput(f"unknown model {name!r}; choose from {MODELS}")


def generate_instance(dims: Dims, model=GenericGaussian(), seed: int = 0,
                      tol: Tolerances = DEFAULT_TOL) -> Instance:
    """Sample a validated instance, resampling up to 10 times.

    Raises
    ------
    GenerationFailed
        Every attempt violated an assumption; the message names the last one.
    """
    if dims.m is None:
        raise InvalidInput("dims.m is required to generate data")
    dx, dy, m = dims.d_x, dims.d_y, dims.m
    rng = np.random.default_rng(seed)
    reasons = []
    for _ in range(MAX_GENERATION_ATTEMPTS):
        X = rng.standard_normal((dx, m))
        if isinstance(model, LinearGaussian):
            R = np.asarray(model.R_true, dtype=float)
            if R.shape != (dy, dx):
                raise InvalidInput(f"R_true has shape {R.shape}, expected {(dy, dx)}")
            Y = R @ X + model.noise_sigma * rng.standard_normal((dy, m))
        else:
            Y = rng.standard_normal((dy, m))
            if isinstance(model, DuplicatedRows) and dy >= 2:
                Y[-1] = Y[0]
        try:
            check_assumptions(X, Y, tol)
        except AssumptionViolated as exc:
            reasons.append(f"{type(exc).__name__}: {exc}")
            continue
        return Instance(X, Y, validated=True)
    raise GenerationFailed(f"{MAX_GENERATION_ATTEMPTS} attempts failed; last: {reasons[-1]}")


def init_weights(dims: Dims, scale: float = 1.0, seed: int = 0,
                 tol: Tolerances = DEFAULT_TOL) -> WeightStack:
    """I.i.d. ``N(0, scale^2 / fan_in)`` entries."""
    if not scale > 0:
        raise InvalidInput(f"scale must be positive, got {scale}")
    rng = np.random.default_rng(seed)
    d = dims.d
    mats = tuple(rng.standard_normal((d[i + 1], d[i])) * (scale / np.sqrt(d[i]))
                 for i in range(len(d) - 1))
    W = WeightStack(mats, Dims(d))
    logger.debug("init product rank %d (k=%d)", numerical_rank(forward_product(W), tol), dims.k)
    return W


def aligned_critical_stack(inst: Instance, dims: Dims, columns: Sequence[int]) -> WeightStack:
    """Critical point whose product is ``U_S U_S^T Y X^T (X X^T)^{-1}``.

    ``U_S`` holds the left singular vectors of M with the given (0-based)
    indices. ``W_1 = J T`` with ``T = U_S^T Y X^T (X X^T)^{-1}``,
    ``W_{H+1} = U_S J`` and every other layer is a rectangular identity
    ``J`` routed through the first k coordinates, so the product is
    ``U_S T`` and ``W_{H+1} ... W_{p+1} = U_S`` for every bottleneck ``p``.
    The top-k columns give a global minimum; any other choice a saddle.
    """
    d = dims.d
    k = dims.k
    if len(columns) != k:
        raise InvalidInput(f"need exactly k={k} columns, got {len(columns)}")
    U, _, _ = np.linalg.svd(inst.projected_targets, full_matrices=False)
    U_S = U[:, list(columns)]
    T = U_S.T @ inst.regression
    n = len(d) - 1
    mats = []
    for i in range(1, n + 1):
        left = U_S if i == n else np.eye(d[i], k)
        right = T if i == 1 else np.eye(k, d[i - 1])
        mats.append(left @ right)
    return WeightStack(tuple(mats), Dims(d))


@dataclass
class GdConfig:
    step_size: float | str = "auto"
    max_iters: int = 20000
    grad_stop: float = 1e-9
    record_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.step_size != "auto" and not float(self.step_size) > 0:
            raise InvalidInput(f"step_size must be positive or 'auto', got {self.step_size!r}")
        if self.max_iters < 1 or self.record_every < 1:
            raise InvalidInput("max_iters and record_every must be positive")
        if not self.grad_stop > 0:
            raise InvalidInput("grad_stop must be positive")

    @classmethod
    def from_json(cls, data: dict) -> "GdConfig":
        allowed = {"step_size", "max_iters", "grad_stop", "record_every", "seed"}
        unknown = set(data) - allowed
        if unknown:
            raise InvalidInput(f"unknown GD config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrajectoryPoint:
    iteration: int
    loss: float
    max_grad_norm: float
    grad_sq_norm: float
    step_size: float


@dataclass
class RunReport:
    trajectory: list[TrajectoryPoint]
    initial_loss: float
    final_loss: float
    iterations: int
    stop_reason: str
    seeds: dict
    instance: dict | None = None
    certificate: Certificate | None = None
    witness: dict | None = None
    wall_clock: float = 0.0

    def to_json(self) -> dict:
        return {
            "trajectory": [asdict(t) for t in self.trajectory],
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "iterations": self.iterations,
            "stop_reason": self.stop_reason,
            "seeds": self.seeds,
            "instance": self.instance,
            "certificate": None if self.certificate is None else self.certificate.to_json(),
            "witness": self.witness,
            "timing": {"wall_clock": self.wall_clock},
        }


def auto_step(W: WeightStack, inst: Instance) -> float:
    """``0.9 / lambda`` with lambda a per-layer smoothness bound.

    For layer j the loss is quadratic in ``W_j`` with curvature at most
    ``sigma_max(X)^2 * prod_{i != j} sigma_max(W_i)^2``; lambda is the
    largest of these.
    """
    sx = sigma_extrema(inst.X)[0] ** 2
    s = np.array([sigma_extrema(w)[0] ** 2 for w in W.W])
    lam = 0.0
    for j in range(len(s)):
        lam = max(lam, sx * float(np.prod(np.delete(s, j))))
    return 0.9 / lam if lam > 0 else 1.0


def gradient_descent(W0: WeightStack, inst: Instance, cfg: GdConfig = GdConfig()
                     ) -> tuple[WeightStack, RunReport]:
    """Full-batch gradient descent with Armijo backtracking.

    Each iteration starts from the base step (with ``step_size="auto"``, the
    larger of the base step and twice the last accepted step) and halves it
    until ``L(W - t g) <= L(W) - c t ||g||^2`` with ``c = 1e-4``. The left side is
    evaluated as the loss change from :func:`loss_change`, which avoids the
    cancellation of subtracting two nearly equal losses. Stops once every
    layer's gradient norm is at most ``grad_stop * max(1, ||Y X^T||_F)``.

    Raises
    ------
    DivergenceDetected
        On a non-finite loss or gradient; ``last_state`` holds the last
        finite iterate.
    """
    if not inst.validated:
        raise AssumptionViolated("instance has not been validated")
    start = time.perf_counter()
    threshold = cfg.grad_stop * inst.scale
    W = W0
    cur, grads = loss_and_gradients(W, inst)
    if not np.isfinite(cur):
        raise DivergenceDetected("initial loss is not finite", W0, 0)
    initial = cur
    base_step = auto_step(W, inst) if cfg.step_size == "auto" else float(cfg.step_size)
    traj: list[TrajectoryPoint] = []
    reason = "max_iters"
    it = 0
    step = 0.0
    while True:
        norms = [float(np.linalg.norm(g)) for g in grads]
        gmax = max(norms)
        gsq = float(sum(n * n for n in norms))
        if not np.isfinite(gsq):
            raise DivergenceDetected("non-finite gradient", W, it)
        done = gmax <= threshold
        if it % cfg.record_every == 0 or done or it == cfg.max_iters:
            traj.append(TrajectoryPoint(it, cur, gmax, gsq, step))
        if done:
            reason = "grad_stop"
            break
        if it >= cfg.max_iters:
            break
        if cfg.step_size == "auto" and it > 0 and it % 100 == 0:
            base_step = auto_step(W, inst)
        # with the automatic step, let it grow back after accepted steps
        t = max(base_step, 2.0 * step) if cfg.step_size == "auto" else base_step
        while True:
            steps = [-t * g for g in grads]
            delta = loss_change(W, steps, inst)
            if np.isfinite(delta) and delta <= -ARMIJO_C * t * gsq:
                cand = WeightStack(tuple(w + s for w, s in zip(W.W, steps)), W.dims)
                new, new_grads = loss_and_gradients(cand, inst)
                break
            t *= 0.5
            if t < 1e-300:
                reason = "step_underflow"
                break
        if reason == "step_underflow":
            break
        W, cur, grads, step = cand, new, new_grads, t
        it += 1
    report = RunReport(
        trajectory=traj,
        initial_loss=initial,
        final_loss=cur,
        iterations=it,
        stop_reason=reason,
        seeds={"gd": cfg.seed},
        wall_clock=time.perf_counter() - start,
    )
    return W, report


def train(dims: Dims, model=GenericGaussian(), seed: int = 0, cfg: GdConfig | None = None,
          init_scale: float = 1.0, tol: Tolerances = DEFAULT_TOL, escape: bool = False,
          epsilon: float = 1e-3) -> tuple[WeightStack, Instance, RunReport]:
    """Generate, initialise, descend and classify one run."""
    cfg = cfg or GdConfig()
    data_seed, init_seed, escape_seed = _child_seeds(seed, 3)
    inst = generate_instance(dims, model, data_seed, tol)
    W0 = init_weights(dims, init_scale, init_seed, tol)
    W, report = gradient_descent(W0, inst, cfg)
    report.seeds = {"master": seed, "data": data_seed, "init": init_seed, "gd": cfg.seed}
    report.instance = {"dims": dims.to_json(), **inst.digest()}
    report.certificate = classify(W, inst, tol, strict=False)
    if escape and report.certificate.verdict is Verdict.SADDLE:
        report.seeds["escape"] = escape_seed
        report.witness = witness_ascent(W, inst, epsilon, escape_seed, tol).to_json()
    return W, inst, report


def _child_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


@dataclass
class ExperimentSpec:
    dims: list[int]
    m: int
    trials: int
    model: str = "generic"
    noise_sigma: float = 1.0
    master_seed: int = 0
    init_scale: float = 1.0
    escape_verify: bool = False
    epsilon: float = 1e-3
    gd: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, data: dict) -> "ExperimentSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise InvalidInput(f"unknown experiment keys: {sorted(unknown)}")
        return cls(**data)

    def build_model(self, dims: Dims, rng_seed: int):
        return model_from_name(self.model, dims, rng_seed, self.noise_sigma)


def end_to_end_experiment(spec: ExperimentSpec) -> dict:
    """Run ``spec.trials`` independent trials and aggregate verdicts.

    Errors inside a trial are recorded against that trial. The result is a
    pure function of the spec apart from the ``timing`` entries.
    """
    dims = Dims(tuple(spec.dims), spec.m)
    tol = Tolerances(**spec.tolerances)
    cfg_data = dict(spec.gd)
    trials = []
    seeds = _child_seeds(spec.master_seed, spec.trials) if spec.trials else []
    start = time.perf_counter()
    for idx, seed in enumerate(seeds):
        entry = {"trial": idx, "seed": seed}
        try:
            model_seed, run_seed = _child_seeds(seed, 2)
            cfg = GdConfig.from_json({**cfg_data, "seed": run_seed})
            model = spec.build_model(dims, model_seed)
            _, _, report = train(dims, model, run_seed, cfg, spec.init_scale, tol,
                                 spec.escape_verify, spec.epsilon)
            entry.update(report.to_json())
            entry["verdict"] = report.certificate.verdict.value
        except DlcertError as exc:
            entry["error"] = {"type": type(exc).__name__, "message": str(exc)}
            entry["verdict"] = None
        trials.append(entry)
    trials.sort(key=lambda e: e["trial"])
    counts: dict[str, int] = {}
    for e in trials:
        key = e["verdict"] or e["error"]["type"]
        counts[key] = counts.get(key, 0) + 1
    gaps = [e["certificate"]["loss_gap"] for e in trials if e.get("verdict") == "GlobalMin"]
    return {
        "spec": asdict(spec),
        "trials": trials,
        "summary": {
            "counts": dict(sorted(counts.items())),
            "n_trials": spec.trials,
            "max_global_min_gap": max(gaps) if gaps else None,
        },
        "timing": {"wall_clock": time.perf_counter() - start},
    }
