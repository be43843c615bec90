"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time: numba when it is importable and
``DPLAB_DISABLE_NUMBA`` is unset (or ``0``), numpy otherwise. Tests and the
benchmark switch at runtime with :func:`set_backend`.

Both paths implement the same arithmetic but may round differently (numba
loops accumulate sequentially, numpy reductions are pairwise), so results
agree to ~1e-12 rather than bit-for-bit across backends. Within one backend
everything is deterministic.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_DISABLED = os.environ.get("DPLAB_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")

BACKENDS = ("numba", "numpy") if HAVE_NUMBA else ("numpy",)
_backend = "numba" if (HAVE_NUMBA and not _DISABLED) else "numpy"

FLOW_CONVERGED = 0
FLOW_MAX_TIME = 1
FLOW_DIVERGED = 2


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> str:
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _backend
    if name not in BACKENDS:
        raise ValueError(f"unknown or unavailable backend {name!r}; choose from {BACKENDS}")
    previous, _backend = _backend, name
    return previous


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _np_row_norms(G):
    return np.sqrt(np.einsum("ij,ij->i", G, G))


def _np_clip_rows(G, C):
    norms = _np_row_norms(G)
    scale = np.maximum(1.0, norms / C)
    return G / scale[:, None], norms


def _np_ratio_terms(G):
    mean = G.sum(axis=0) / G.shape[0]
    dev = G - mean
    trace_cov = np.einsum("ij,ij->", dev, dev) / G.shape[0]
    return trace_cov, float(mean @ mean)


def _np_outer_rows(delta, a):
    n = delta.shape[0]
    return np.einsum("ip,iq->ipq", delta, a).reshape(n, delta.shape[1] * a.shape[1])


def _np_flow_grads(W1, W2, Sigma, c):
    r = (W2 @ W1) @ Sigma - c
    return W2.T @ r, r @ W1.T


def _np_flow_loss(W1, W2, Sigma, c, ey2):
    W = W2 @ W1
    return 0.5 * (float((W @ Sigma @ W.T)[0, 0]) - 2.0 * float((W @ c.T)[0, 0]) + ey2)


def _np_flow_run(*args):
    # divergence is detected from the non-finite loss, so overflow on the way there is expected
    with np.errstate(over="ignore", invalid="ignore"):
        return _np_flow_steps(*args)


def _np_flow_steps(W1, W2, Sigma, c, ey2, d_s, dt, max_steps, tol, midpoint, fp_tol, fp_maxit, patience):
    W1 = W1.copy()
    W2 = W2.copy()
    losses = np.empty(max_steps + 1)
    residuals = np.empty(max_steps + 1)
    noise_norms = np.empty(max_steps + 1)
    grad_norms = np.empty(max_steps + 1)
    status = FLOW_MAX_TIME
    rising = 0
    k = 0
    while True:
        G1, G2 = _np_flow_grads(W1, W2, Sigma, c)
        losses[k] = _np_flow_loss(W1, W2, Sigma, c, ey2)
        residuals[k] = np.linalg.norm(W1 @ W1.T - W2.T @ W2)
        noise_norms[k] = np.linalg.norm(W1[:, d_s:])
        grad_norms[k] = np.sqrt(np.sum(G1 * G1) + np.sum(G2 * G2))
        if not np.isfinite(losses[k]):
            status = FLOW_DIVERGED
            break
        if k > 0 and losses[k] > losses[k - 1]:
            rising += 1
            if rising >= patience:
                status = FLOW_DIVERGED
                break
        else:
            rising = 0
        if grad_norms[k] < tol:
            status = FLOW_CONVERGED
            break
        if k == max_steps:
            break
        N1 = W1 - dt * G1
        N2 = W2 - dt * G2
        if midpoint:
            for _ in range(fp_maxit):
                H1, H2 = _np_flow_grads(0.5 * (W1 + N1), 0.5 * (W2 + N2), Sigma, c)
                P1 = W1 - dt * H1
                P2 = W2 - dt * H2
                change = max(np.max(np.abs(P1 - N1)), np.max(np.abs(P2 - N2)))
                N1, N2 = P1, P2
                if change <= fp_tol:
                    break
        W1, W2 = N1, N2
        k += 1
    n = k + 1
    return W1, W2, losses[:n], residuals[:n], noise_norms[:n], grad_norms[:n], status


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_row_norms(G):
        n, d = G.shape
        out = np.empty(n)
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += G[i, j] * G[i, j]
            out[i] = np.sqrt(s)
        return out

    @njit(cache=True)
    def _nb_clip_rows(G, C):
        n, d = G.shape
        norms = _nb_row_norms(G)
        out = np.empty_like(G)
        for i in range(n):
            scale = max(1.0, norms[i] / C)
            for j in range(d):
                out[i, j] = G[i, j] / scale
        return out, norms

    @njit(cache=True)
    def _nb_ratio_terms(G):
        n, d = G.shape
        mean = np.zeros(d)
        for i in range(n):
            for j in range(d):
                mean[j] += G[i, j]
        for j in range(d):
            mean[j] /= n
        tr = 0.0
        for i in range(n):
            for j in range(d):
                e = G[i, j] - mean[j]
                tr += e * e
        msq = 0.0
        for j in range(d):
            msq += mean[j] * mean[j]
        return tr / n, msq

    @njit(cache=True)
    def _nb_outer_rows(delta, a):
        n, p = delta.shape
        q = a.shape[1]
        out = np.empty((n, p * q))
        for i in range(n):
            for r in range(p):
                dr = delta[i, r]
                base = r * q
                for s in range(q):
                    out[i, base + s] = dr * a[i, s]
        return out

    @njit(cache=True)
    def _nb_flow_grads(W1, W2, Sigma, c, G1, G2, W, r):
        m, d = W1.shape
        for j in range(d):
            acc = 0.0
            for h in range(m):
                acc += W2[0, h] * W1[h, j]
            W[j] = acc
        for j in range(d):
            acc = 0.0
            for l in range(d):
                acc += W[l] * Sigma[l, j]
            r[j] = acc - c[0, j]
        for h in range(m):
            w2h = W2[0, h]
            acc = 0.0
            for j in range(d):
                G1[h, j] = w2h * r[j]
                acc += r[j] * W1[h, j]
            G2[0, h] = acc

    @njit(cache=True)
    def _nb_flow_diagnostics(W1, W2, Sigma, c, ey2, d_s, W):
        m, d = W1.shape
        quad = 0.0
        for l in range(d):
            acc = 0.0
            for j in range(d):
                acc += Sigma[l, j] * W[j]
            quad += W[l] * acc
        lin = 0.0
        for j in range(d):
            lin += W[j] * c[0, j]
        loss = 0.5 * (quad - 2.0 * lin + ey2)
        res = 0.0
        for a in range(m):
            for b in range(m):
                acc = 0.0
                for j in range(d):
                    acc += W1[a, j] * W1[b, j]
                e = acc - W2[0, a] * W2[0, b]
                res += e * e
        wn = 0.0
        for a in range(m):
            for j in range(d_s, d):
                wn += W1[a, j] * W1[a, j]
        return loss, np.sqrt(res), np.sqrt(wn)

    @njit(cache=True)
    def _nb_flow_run(W1, W2, Sigma, c, ey2, d_s, dt, max_steps, tol, midpoint, fp_tol, fp_maxit, patience):
        m, d = W1.shape
        W1 = W1.copy()
        W2 = W2.copy()
        G1 = np.empty((m, d))
        G2 = np.empty((1, m))
        H1 = np.empty((m, d))
        H2 = np.empty((1, m))
        N1 = np.empty((m, d))
        N2 = np.empty((1, m))
        M1 = np.empty((m, d))
        M2 = np.empty((1, m))
        W = np.empty(d)
        r = np.empty(d)
        losses = np.empty(max_steps + 1)
        residuals = np.empty(max_steps + 1)
        noise_norms = np.empty(max_steps + 1)
        grad_norms = np.empty(max_steps + 1)
        status = FLOW_MAX_TIME
        rising = 0
        k = 0
        while True:
            _nb_flow_grads(W1, W2, Sigma, c, G1, G2, W, r)
            loss, res, wn = _nb_flow_diagnostics(W1, W2, Sigma, c, ey2, d_s, W)
            gsq = 0.0
            for h in range(m):
                gsq += G2[0, h] * G2[0, h]
                for j in range(d):
                    gsq += G1[h, j] * G1[h, j]
            losses[k] = loss
            residuals[k] = res
            noise_norms[k] = wn
            grad_norms[k] = np.sqrt(gsq)
            if not np.isfinite(loss):
                status = FLOW_DIVERGED
                break
            if k > 0 and losses[k] > losses[k - 1]:
                rising += 1
                if rising >= patience:
                    status = FLOW_DIVERGED
                    break
            else:
                rising = 0
            if grad_norms[k] < tol:
                status = FLOW_CONVERGED
                break
            if k == max_steps:
                break
            for h in range(m):
                N2[0, h] = W2[0, h] - dt * G2[0, h]
                for j in range(d):
                    N1[h, j] = W1[h, j] - dt * G1[h, j]
            if midpoint:
                for _ in range(fp_maxit):
                    for h in range(m):
                        M2[0, h] = 0.5 * (W2[0, h] + N2[0, h])
                        for j in range(d):
                            M1[h, j] = 0.5 * (W1[h, j] + N1[h, j])
                    _nb_flow_grads(M1, M2, Sigma, c, H1, H2, W, r)
                    change = 0.0
                    for h in range(m):
                        p = W2[0, h] - dt * H2[0, h]
                        change = max(change, abs(p - N2[0, h]))
                        N2[0, h] = p
                        for j in range(d):
                            p = W1[h, j] - dt * H1[h, j]
                            change = max(change, abs(p - N1[h, j]))
                            N1[h, j] = p
                    if change <= fp_tol:
                        break
            W1[:, :] = N1
            W2[:, :] = N2
            k += 1
        n = k + 1
        return W1, W2, losses[:n], residuals[:n], noise_norms[:n], grad_norms[:n], status


_IMPLS = {
    "numpy": {
        "row_norms": _np_row_norms,
        "clip_rows": _np_clip_rows,
        "ratio_terms": _np_ratio_terms,
        "outer_rows": _np_outer_rows,
        "flow_run": _np_flow_run,
    },
}
if HAVE_NUMBA:
    _IMPLS["numba"] = {
        "row_norms": _nb_row_norms,
        "clip_rows": _nb_clip_rows,
        "ratio_terms": _nb_ratio_terms,
        "outer_rows": _nb_outer_rows,
        "flow_run": _nb_flow_run,
    }


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def row_norms(G: np.ndarray) -> np.ndarray:
    """Euclidean norm of every row of an ``(n, d)`` array."""
    return _IMPLS[_backend]["row_norms"](_f64(G))


def clip_rows(G: np.ndarray, C: float) -> tuple[np.ndarray, np.ndarray]:
    """Rows scaled by ``1 / max(1, |g|/C)``; also returns the pre-clip norms.

    Rows already inside the ball are divided by exactly 1.0 and so come back
    bit-identical.
    """
    return _IMPLS[_backend]["clip_rows"](_f64(G), float(C))


def ratio_terms(G: np.ndarray) -> tuple[float, float]:
    """``(trace of row covariance, squared norm of the row mean)``."""
    tr, msq = _IMPLS[_backend]["ratio_terms"](_f64(G))
    return float(tr), float(msq)


def outer_rows(delta: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Row ``i`` is ``vec(outer(delta[i], a[i]))`` in row-major order."""
    return _IMPLS[_backend]["outer_rows"](_f64(delta), _f64(a))


def flow_run(W1, W2, Sigma, c, ey2, d_s, dt, max_steps, tol, midpoint=True,
             fp_tol=1e-15, fp_maxit=100, patience=100):
    """Integrate population gradient flow of ``0.5 E[(W2 W1 x - y)^2]``.

    ``Sigma`` is ``E[x x^T]``, ``c`` is the ``(1, d)`` row ``E[y x^T]`` and
    ``ey2`` is ``E[y^2]``. Returns final weights, per-step loss, balancedness
    residual, noise-block norm, gradient norm, and a status code.
    """
    return _IMPLS[_backend]["flow_run"](
        _f64(W1), _f64(W2), _f64(Sigma), _f64(np.reshape(c, (1, -1))), float(ey2), int(d_s),
        float(dt), int(max_steps), float(tol), bool(midpoint), float(fp_tol), int(fp_maxit), int(patience),
    )
