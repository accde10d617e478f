"""Seeded constructions shared by the test modules.

The draw order here is mirrored by ``oracles/make_oracles.py`` so frozen
values line up with what the tests rebuild.
"""
import numpy as np

from dlcert.network import Dims, Instance, WeightStack, make_instance


def rand_xy(seed, dx, dy, m):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((dx, m))
    Y = rng.standard_normal((dy, m))
    return X, Y, rng


def rand_instance(seed, dx, dy, m, validate=True) -> Instance:
    X, Y, _ = rand_xy(seed, dx, dy, m)
    return make_instance(X, Y, validate=validate)


def rand_case(seed, d, m):
    """Instance and weight stack drawn from one generator: X, Y, then W_1..W_{H+1}."""
    X, Y, rng = rand_xy(seed, d[0], d[-1], m)
    mats = tuple(rng.standard_normal((d[i + 1], d[i])) for i in range(len(d) - 1))
    return make_instance(X, Y), WeightStack(mats, Dims(tuple(d), m))


def zero_stack(d) -> WeightStack:
    return WeightStack(tuple(np.zeros((d[i + 1], d[i])) for i in range(len(d) - 1)), Dims(tuple(d)))


def split_product(R, d, k=None) -> WeightStack:
    """Factor ``R`` (rank at most k) across the widths ``d``.

    ``R = U S V^T`` thin SVD truncated to k; ``W_1`` carries ``S V^T`` in its
    first k rows, the last layer carries ``U`` and the middle layers route
    the first k coordinates.
    """
    k = k or min(d)
    U, s, Vt = np.linalg.svd(R, full_matrices=False)
    U, s, Vt = U[:, :k], s[:k], Vt[:k]
    n = len(d) - 1
    mats = []
    for i in range(1, n + 1):
        left = U if i == n else np.eye(d[i], k)
        right = (s[:, None] * Vt) if i == 1 else np.eye(k, d[i - 1])
        mats.append(left @ right)
    return WeightStack(tuple(mats), Dims(tuple(d)))


def fd_gradients(W: WeightStack, inst, step=1e-5):
    """Central differences of the loss, entry by entry (direct evaluation)."""
    def loss_of(mats):
        P = mats[0]
        for M in mats[1:]:
            P = M @ P
        R = P @ inst.X - inst.Y
        return 0.5 * float(np.sum(R * R))

    out = []
    for i, Wi in enumerate(W.W):
        G = np.zeros_like(Wi)
        for idx in np.ndindex(Wi.shape):
            mats = [w.copy() for w in W.W]
            mats[i][idx] += step
            up = loss_of(mats)
            mats[i][idx] -= 2 * step
            down = loss_of(mats)
            G[idx] = (up - down) / (2 * step)
        out.append(G)
    return out
