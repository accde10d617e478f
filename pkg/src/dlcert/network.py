"""Deep linear networks: shapes, data instances, loss and gradients."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg

from dlcert import kernels
from dlcert.errors import AssumptionViolated, DegenerateSpectrum, InvalidInput
from dlcert.linalg import (
    DEFAULT_TOL,
    Tolerances,
    as_matrix,
    numerical_rank,
    read_matrix_csv,
    write_matrix_csv,
)

# minimum relative gap between consecutive nonzero singular values of M
SPECTRUM_GAP_TOL = 1e-8


@dataclass(frozen=True)
class Dims:
    """Layer widths ``d = (d_x, d_1, ..., d_H, d_y)`` and sample count ``m``.

    ``m`` may be None when only the network shape matters.
    """

    d: tuple[int, ...]
    m: int | None = None

    def __post_init__(self):
        d = tuple(int(v) for v in self.d)
        object.__setattr__(self, "d", d)
        if len(d) < 2:
            raise InvalidInput("need at least input and output widths")
        if any(v < 1 for v in d):
            raise InvalidInput(f"widths must be positive, got {d}")
        if self.m is not None:
            if self.m < 1:
                raise InvalidInput(f"m must be positive, got {self.m}")
            if d[0] > self.m or d[-1] > self.m:
                raise InvalidInput(f"need d_x <= m and d_y <= m, got d={d}, m={self.m}")

    @property
    def H(self) -> int:
        return len(self.d) - 2

    @property
    def d_x(self) -> int:
        return self.d[0]

    @property
    def d_y(self) -> int:
        return self.d[-1]

    @property
    def k(self) -> int:
        return min(self.d)

    @property
    def p(self) -> int:
        return self.d.index(self.k)

    @property
    def admissible_p(self) -> tuple[int, ...]:
        return tuple(i for i, v in enumerate(self.d) if v == self.k)

    @property
    def full_bottleneck(self) -> bool:
        return self.k == min(self.d_x, self.d_y)

    @property
    def n_params(self) -> int:
        return sum(self.d[i] * self.d[i + 1] for i in range(len(self.d) - 1))

    def to_json(self) -> dict:
        return {"d": list(self.d), "m": self.m}


@dataclass(frozen=True, eq=False)
class Instance:
    """Data pair ``X`` (d_x x m) and ``Y`` (d_y x m).

    Build through :func:`make_instance`, which validates the full-rank and
    distinct-spectrum assumptions. ``validated`` is False only for
    instances built with ``validate=False``.
    """

    X: np.ndarray
    Y: np.ndarray
    validated: bool = False

    @property
    def d_x(self) -> int:
        return self.X.shape[0]

    @property
    def d_y(self) -> int:
        return self.Y.shape[0]

    @property
    def m(self) -> int:
        return self.X.shape[1]

    @cached_property
    def XXt(self) -> np.ndarray:
        return self.X @ self.X.T

    @cached_property
    def YXt(self) -> np.ndarray:
        return self.Y @ self.X.T

    @cached_property
    def scale(self) -> float:
        """Data scale ``max(1, ||Y X^T||_F)`` used by criticality tests."""
        return max(1.0, float(np.linalg.norm(self.YXt)))

    @cached_property
    def _cho(self):
        return scipy.linalg.cho_factor(self.XXt, lower=True)

    @cached_property
    def regression(self) -> np.ndarray:
        """``Y X^T (X X^T)^{-1}`` via a Cholesky solve."""
        try:
            return scipy.linalg.cho_solve(self._cho, self.YXt.T).T
        except np.linalg.LinAlgError as exc:
            raise AssumptionViolated("X X^T is not positive definite") from exc

    @cached_property
    def projected_targets(self) -> np.ndarray:
        """``M = Y X^T (X X^T)^{-1} X``, the projection of Y's rows onto row(X)."""
        return self.regression @ self.X

    @cached_property
    def spectrum(self) -> np.ndarray:
        return np.linalg.svd(self.projected_targets, compute_uv=False)

    def digest(self) -> dict:
        return {
            "d_x": self.d_x,
            "d_y": self.d_y,
            "m": self.m,
            "spectrum": [float(v) for v in self.spectrum[: min(self.d_x, self.d_y)]],
        }


def check_assumptions(X, Y, tol: Tolerances = DEFAULT_TOL) -> None:
    """Raise if ``(X, Y)`` violates the data assumptions.

    Checks ``d_x, d_y <= m``, full rank of ``X X^T`` and ``Y X^T``, and that
    the ``min(d_x, d_y)`` leading singular values of ``M`` are pairwise
    distinct. The trailing ``d_y - d_x`` values are identically zero when
    ``d_y > d_x`` and are not compared.
    """
    dx, m = X.shape
    dy = Y.shape[0]
    if dx > m or dy > m:
        raise AssumptionViolated(f"need d_x <= m and d_y <= m, got d_x={dx}, d_y={dy}, m={m}")
    if numerical_rank(X @ X.T, tol) != dx:
        raise AssumptionViolated("X X^T is rank deficient")
    r = min(dx, dy)
    if numerical_rank(Y @ X.T, tol) != r:
        raise AssumptionViolated("Y X^T is rank deficient")
    inst = Instance(X, Y)
    s = inst.spectrum[:r]
    gaps = -np.diff(s) / s[0]
    if gaps.size and gaps.min() <= SPECTRUM_GAP_TOL:
        raise DegenerateSpectrum(f"singular values of M not distinct (min relative gap {gaps.min():.3g})")


def make_instance(X, Y, validate: bool = True, tol: Tolerances = DEFAULT_TOL) -> Instance:
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise InvalidInput(f"X and Y sample counts differ: {X.shape[1]} vs {Y.shape[1]}")
    if validate:
        check_assumptions(X, Y, tol)
    return Instance(X, Y, validated=validate)


@dataclass(frozen=True, eq=False)
class WeightStack:
    """Weights ``W_1, ..., W_{H+1}`` with ``W_i`` of shape ``d_i x d_{i-1}``.

    ``W[0]`` holds ``W_1``; layer indices in method arguments are 1-based.
    """

    W: tuple[np.ndarray, ...]
    dims: Dims = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        mats = tuple(as_matrix(w, f"W{i + 1}") for i, w in enumerate(self.W))
        if not mats:
            raise InvalidInput("a weight stack needs at least one matrix")
        d = [mats[0].shape[1]] + [w.shape[0] for w in mats]
        for i in range(1, len(mats)):
            if mats[i].shape[1] != mats[i - 1].shape[0]:
                raise InvalidInput(
                    f"W{i + 1} has {mats[i].shape[1]} columns but W{i} has {mats[i - 1].shape[0]} rows"
                )
        dims = self.dims
        if dims is None:
            dims = Dims(tuple(d))
        elif tuple(dims.d) != tuple(d):
            raise InvalidInput(f"dims {dims.d} do not match matrix shapes {tuple(d)}")
        object.__setattr__(self, "W", mats)
        object.__setattr__(self, "dims", dims)

    def __len__(self):
        return len(self.W)

    def __getitem__(self, i):
        return self.W[i]

    def replace(self, i: int, Wi) -> "WeightStack":
        """Copy with layer ``i`` (1-based) replaced."""
        mats = list(self.W)
        mats[i - 1] = Wi
        return WeightStack(tuple(mats), self.dims)

    def map(self, fn) -> "WeightStack":
        return WeightStack(tuple(fn(w) for w in self.W), self.dims)

    def __add__(self, other: "WeightStack") -> "WeightStack":
        return WeightStack(tuple(a + b for a, b in zip(self.W, other.W)), self.dims)

    def scaled(self, t: float) -> "WeightStack":
        return self.map(lambda w: t * w)

    def flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.W])


@dataclass(frozen=True, eq=False)
class PartialProducts:
    """``A_i = W_{i+1}^T ... W_{H+1}^T``, ``B_i = W_1^T ... W_{i-1}^T`` and
    ``E = (W_{H+1} ... W_1 X - Y) X^T``.

    ``A[i-1]`` and ``B[i-1]`` hold ``A_i`` and ``B_i``.
    """

    A: tuple[np.ndarray, ...]
    B: tuple[np.ndarray, ...]
    E: np.ndarray

    def A_at(self, i: int) -> np.ndarray:
        return self.A[i - 1]

    def B_at(self, i: int) -> np.ndarray:
        return self.B[i - 1]


def _check_compatible(W: WeightStack, inst: Instance) -> None:
    if W.dims.d_x != inst.d_x or W.dims.d_y != inst.d_y:
        raise InvalidInput(
            f"stack maps {W.dims.d_x} -> {W.dims.d_y} but data is {inst.d_x} -> {inst.d_y}"
        )


def forward_product(W: WeightStack) -> np.ndarray:
    """``W_{H+1} ... W_1``, multiplied in index order."""
    return kernels.chain_product(W.W)


def product_range(W: WeightStack, lo: int, hi: int) -> np.ndarray:
    """``W_hi ... W_lo`` (1-based, inclusive); identity of size ``d_{lo-1}`` if empty."""
    if hi < lo:
        return np.eye(W.dims.d[lo - 1])
    return kernels.chain_product(W.W[lo - 1:hi])


def loss(W: WeightStack, inst: Instance) -> float:
    """``0.5 * ||W_{H+1} ... W_1 X - Y||_F^2``."""
    _check_compatible(W, inst)
    return kernels.chain_loss(W.W, inst.X, inst.Y)


def loss_and_gradients(W: WeightStack, inst: Instance) -> tuple[float, list[np.ndarray]]:
    _check_compatible(W, inst)
    return kernels.chain_gradients(W.W, inst.X, inst.Y)


def gradients(W: WeightStack, inst: Instance) -> list[np.ndarray]:
    """Partial derivatives ``dL/dW_i = A_i E B_i`` for every layer."""
    return loss_and_gradients(W, inst)[1]


def loss_change(W: WeightStack, steps: Sequence[np.ndarray], inst: Instance) -> float:
    """``L(W + steps) - L(W)`` without subtracting two nearly equal losses.

    The product difference is telescoped as
    ``sum_i W'_{H+1} ... W'_{i+1} S_i W_{i-1} ... W_1`` so that
    ``D = (P' - P) X`` carries no cancellation, then
    ``L' - L = <D, R> + 0.5 ||D||^2`` with ``R = P X - Y``.
    """
    _check_compatible(W, inst)
    mats = W.W
    n = len(mats)
    new = [w + s for w, s in zip(mats, steps)]
    pre = np.eye(W.dims.d_x)
    prefixes = []
    for i in range(n):
        prefixes.append(pre)
        pre = mats[i] @ pre
    dP = np.zeros((W.dims.d_y, W.dims.d_x))
    suf = np.eye(W.dims.d_y)
    for i in range(n - 1, -1, -1):
        dP += suf @ (steps[i] @ prefixes[i])
        suf = suf @ new[i]
    R = pre @ inst.X - inst.Y
    D = dP @ inst.X
    return float(np.sum(D * R) + 0.5 * np.sum(D * D))


def partial_products(W: WeightStack, inst: Instance) -> PartialProducts:
    _check_compatible(W, inst)
    n = len(W)
    mats = W.W
    B = [np.eye(W.dims.d_x)]
    for i in range(1, n):
        B.append(B[-1] @ mats[i - 1].T)
    A = [None] * n
    A[n - 1] = np.eye(W.dims.d_y)
    for i in range(n - 2, -1, -1):
        A[i] = mats[i + 1].T @ A[i + 1]
    E = (forward_product(W) @ inst.X - inst.Y) @ inst.X.T
    return PartialProducts(tuple(A), tuple(B), E)


def residual_to_plain(V: Sequence[np.ndarray]) -> WeightStack:
    """Map residual weights ``V_i`` to the plain stack ``W_i = I + V_i``."""
    mats = [as_matrix(v, f"V{i + 1}") for i, v in enumerate(V)]
    if not mats:
        raise InvalidInput("need at least one layer")
    d = mats[0].shape[0]
    for i, v in enumerate(mats):
        if v.shape != (d, d):
            raise InvalidInput(f"V{i + 1} has shape {v.shape}, expected ({d}, {d})")
    eye = np.eye(d)
    return WeightStack(tuple(eye + v for v in mats))


def save_weights(W: WeightStack, directory, m: int | None = None) -> None:
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    for i, w in enumerate(W.W, start=1):
        write_matrix_csv(path / f"W{i}.csv", w)
    dims = {"d": list(W.dims.d), "m": m if m is not None else W.dims.m}
    (path / "dims.json").write_text(json.dumps(dims, indent=2) + "\n")


def load_weights(directory) -> WeightStack:
    path = Path(directory)
    meta = json.loads((path / "dims.json").read_text())
    d = meta["d"]
    mats = tuple(read_matrix_csv(path / f"W{i}.csv") for i in range(1, len(d)))
    # m is informational for a weight stack; keep the shapes authoritative
    return WeightStack(mats, Dims(tuple(d), None))


def save_instance(inst: Instance, directory) -> None:
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(path / "X.csv", inst.X)
    write_matrix_csv(path / "Y.csv", inst.Y)


def load_instance(directory, validate: bool = True, tol: Tolerances = DEFAULT_TOL) -> Instance:
    path = Path(directory)
    return make_instance(read_matrix_csv(path / "X.csv"), read_matrix_csv(path / "Y.csv"), validate, tol)
