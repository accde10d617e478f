"""Pure numpy implementation of the hot kernels.

Used when the compiled ``_kernels`` extension is unavailable or when
``DLCERT_BACKEND=python`` is set. Every function here has an identical
signature in ``_kernels.pyx``.
"""
import numpy as np


def chain_product(mats):
    """Return ``mats[-1] @ ... @ mats[0]``, folding left to right."""
    P = mats[0]
    for W in mats[1:]:
        P = W @ P
    return np.ascontiguousarray(P, dtype=np.float64)


def chain_loss(mats, X, Y):
    R = chain_product(mats) @ X - Y
    return 0.5 * float(np.sum(R * R))


def chain_gradients(mats, X, Y):
    """Loss and per-layer gradients of ``0.5 * ||W_L...W_1 X - Y||_F^2``.

    Returns
    -------
    loss : float
    grads : list of ndarray
        ``grads[i]`` has the shape of ``mats[i]``.
    """
    n = len(mats)
    # prefix[i] = W_i ... W_1 (prefix[0] = I), suffix[i] = W_L ... W_{i+2}
    prefix = [np.eye(mats[0].shape[1])]
    for W in mats:
        prefix.append(W @ prefix[-1])
    suffix = [None] * n
    suffix[n - 1] = np.eye(mats[-1].shape[0])
    for i in range(n - 2, -1, -1):
        suffix[i] = suffix[i + 1] @ mats[i + 1]
    R = prefix[n] @ X - Y
    loss = 0.5 * float(np.sum(R * R))
    E = R @ X.T
    grads = [suffix[i].T @ (E @ prefix[i].T) for i in range(n)]
    return loss, grads


def als_restarts(C, G, Gc, yy, U0, sweeps):
    """Run alternating least squares on ``R = U V^T`` for a batch of starts.

    Parameters
    ----------
    C : (dx, dx) ndarray
        ``X X^T``.
    G : (dy, dx) ndarray
        ``Y X^T``.
    Gc : (dy, dx) ndarray
        ``G C^{-1}``.
    yy : float
        ``||Y||_F^2``.
    U0 : (n, dy, k) ndarray
        Initial left factors, one per restart.
    sweeps : int

    Returns
    -------
    loss, prev_loss : (n,) ndarrays
        Loss after the final sweep and after the one before it. Restarts
        whose normal equations became singular report ``inf``.
    U, V : (n, dy, k) and (n, dx, k) ndarrays
    """
    U = np.array(U0, dtype=np.float64, copy=True)
    n, dy, k = U.shape
    dx = C.shape[0]
    V = np.zeros((n, dx, k))
    dead = np.zeros(n, dtype=bool)
    loss = np.full(n, np.inf)
    prev = np.full(n, np.inf)
    GcT = Gc.T
    for _ in range(sweeps):
        # V^T = (U^T U)^{-1} U^T G C^{-1}
        UtU = np.einsum("nik,nil->nkl", U, U)
        rhs = np.einsum("ji,nik->njk", GcT, U)
        V, bad = _solve_right(rhs, UtU)
        dead |= bad
        # U = G V (V^T C V)^{-1}
        VtCV = np.einsum("nik,ij,njl->nkl", V, C, V)
        GV = np.einsum("ij,njk->nik", G, V)
        U, bad = _solve_right(GV, VtCV)
        dead |= bad
        R = np.einsum("nik,njk->nij", U, V)
        prev = loss
        loss = 0.5 * (np.einsum("nij,jl,nil->n", R, C, R)
                      - 2.0 * np.einsum("nij,ij->n", R, G) + yy)
        loss = np.where(dead, np.inf, loss)
    return loss, prev, U, V


def _solve_right(B, S):
    """Solve ``X S = B`` batched, with S symmetric positive definite."""
    n = S.shape[0]
    out = np.zeros_like(B)
    bad = np.zeros(n, dtype=bool)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        for j in range(n):
            try:
                Lj = np.linalg.cholesky(S[j])
            except np.linalg.LinAlgError:
                bad[j] = True
                continue
            out[j] = _cho_right(B[j][None], Lj[None])[0]
        return out, bad
    return _cho_right(B, L), bad


def _cho_right(B, L):
    # X L L^T = B  ->  L L^T X^T = B^T
    Z = np.linalg.solve(L, np.swapaxes(B, 1, 2))
    Xt = np.linalg.solve(np.swapaxes(L, 1, 2), Z)
    return np.swapaxes(Xt, 1, 2)
