"""Hot numeric kernels.

Each kernel has a numba-compiled loop form and a numpy form. The public names
bind to the loop form when numba is usable and to the numpy form otherwise
(see :mod:`smsubu._accel`). Both forms agree to rounding error; neither draws
random numbers, so traces stay reproducible under either backend.
"""
import numpy as np

from ._accel import HAS_NUMBA, njit

__all__ = [
    "HAS_NUMBA",
    "softmax_xent_grad_sum",
    "softmax_xent_sum",
    "ubu_linear_chain",
    "baoab_linear_chain",
    "euler_linear_chain",
    "coupled_logreg_chunk",
    "KIND_UBU",
    "KIND_BAOAB",
    "KIND_EULER",
]


# -- multinomial logistic regression -------------------------------------------------------


def softmax_xent_grad_sum_numpy(W, Xa, y, idx):
    """Sum over ``idx`` of the per-datum cross-entropy gradient with respect to ``W``.

    ``W`` is (C, q), ``Xa`` the bias-augmented features (N, q), ``y`` labels in 0..C-1.
    """
    if idx.shape[0] == 0:
        return np.zeros_like(W)
    Xb = Xa[idx]
    Z = Xb @ W.T
    Z -= Z.max(axis=1, keepdims=True)
    P = np.exp(Z)
    P /= P.sum(axis=1, keepdims=True)
    P[np.arange(idx.shape[0]), y[idx]] -= 1.0
    return P.T @ Xb


def softmax_xent_sum_numpy(W, Xa, y, idx):
    if idx.shape[0] == 0:
        return 0.0
    Z = Xa[idx] @ W.T
    zmax = Z.max(axis=1)
    lse = zmax + np.log(np.exp(Z - zmax[:, None]).sum(axis=1))
    return float(np.sum(lse - Z[np.arange(idx.shape[0]), y[idx]]))


@njit
def _softmax_xent_grad_sum_loop(W, Xa, y, idx):
    C, q = W.shape
    G = np.zeros((C, q))
    z = np.empty(C)
    for r in range(idx.shape[0]):
        i = idx[r]
        zmax = -np.inf
        for c in range(C):
            s = 0.0
            for j in range(q):
                s += W[c, j] * Xa[i, j]
            z[c] = s
            if s > zmax:
                zmax = s
        tot = 0.0
        for c in range(C):
            z[c] = np.exp(z[c] - zmax)
            tot += z[c]
        for c in range(C):
            coef = z[c] / tot
            if c == y[i]:
                coef -= 1.0
            for j in range(q):
                G[c, j] += coef * Xa[i, j]
    return G


@njit
def _softmax_xent_sum_loop(W, Xa, y, idx):
    C, q = W.shape
    total = 0.0
    z = np.empty(C)
    for r in range(idx.shape[0]):
        i = idx[r]
        zmax = -np.inf
        for c in range(C):
            s = 0.0
            for j in range(q):
                s += W[c, j] * Xa[i, j]
            z[c] = s
            if s > zmax:
                zmax = s
        tot = 0.0
        for c in range(C):
            tot += np.exp(z[c] - zmax)
        total += zmax + np.log(tot) - z[y[i]]
    return total


# -- full-gradient chains on a linear force A(x - mu) --------------------------------------
#
# Noise arrays are supplied by the caller: ubu uses xi[k] = (xi1, xi2, xi1', xi2'),
# baoab and euler use xi[k] of shape (d,).


@njit
def _ubu_linear_chain_loop(x0, v0, A, mu, h, coef, xi):
    n = xi.shape[0]
    d = x0.shape[0]
    F, eta, sx1, sx2, sv1, sv2 = coef[0], coef[1], coef[2], coef[3], coef[4], coef[5]
    xs = np.empty((n, d))
    vs = np.empty((n, d))
    x = x0.copy()
    v = v0.copy()
    g = np.empty(d)
    for k in range(n):
        for j in range(d):
            xn = x[j] + F * v[j] + sx1 * xi[k, 0, j] + sx2 * xi[k, 1, j]
            v[j] = eta * v[j] + sv1 * xi[k, 0, j] + sv2 * xi[k, 1, j]
            x[j] = xn
        for i in range(d):
            s = 0.0
            for j in range(d):
                s += A[i, j] * (x[j] - mu[j])
            g[i] = s
        for j in range(d):
            v[j] -= h * g[j]
            xn = x[j] + F * v[j] + sx1 * xi[k, 2, j] + sx2 * xi[k, 3, j]
            v[j] = eta * v[j] + sv1 * xi[k, 2, j] + sv2 * xi[k, 3, j]
            x[j] = xn
            xs[k, j] = x[j]
            vs[k, j] = v[j]
    return xs, vs


def _ubu_linear_chain_numpy(x0, v0, A, mu, h, coef, xi):
    F, eta, sx1, sx2, sv1, sv2 = coef
    n = xi.shape[0]
    xs = np.empty((n, x0.shape[0]))
    vs = np.empty_like(xs)
    x, v = x0.copy(), v0.copy()
    for k in range(n):
        x, v = x + F * v + sx1 * xi[k, 0] + sx2 * xi[k, 1], eta * v + sv1 * xi[k, 0] + sv2 * xi[k, 1]
        v = v - h * (A @ (x - mu))
        x, v = x + F * v + sx1 * xi[k, 2] + sx2 * xi[k, 3], eta * v + sv1 * xi[k, 2] + sv2 * xi[k, 3]
        xs[k], vs[k] = x, v
    return xs, vs


@njit
def _baoab_linear_chain_loop(x0, v0, A, mu, h, eta, xi):
    n = xi.shape[0]
    d = x0.shape[0]
    sig = np.sqrt(1.0 - eta * eta)
    xs = np.empty((n, d))
    vs = np.empty((n, d))
    x = x0.copy()
    v = v0.copy()
    g = np.empty(d)
    for i in range(d):
        s = 0.0
        for j in range(d):
            s += A[i, j] * (x[j] - mu[j])
        g[i] = s
    for k in range(n):
        for j in range(d):
            v[j] -= 0.5 * h * g[j]
            x[j] += 0.5 * h * v[j]
            v[j] = eta * v[j] + sig * xi[k, j]
            x[j] += 0.5 * h * v[j]
        for i in range(d):
            s = 0.0
            for j in range(d):
                s += A[i, j] * (x[j] - mu[j])
            g[i] = s
        for j in range(d):
            v[j] -= 0.5 * h * g[j]
            xs[k, j] = x[j]
            vs[k, j] = v[j]
    return xs, vs


def _baoab_linear_chain_numpy(x0, v0, A, mu, h, eta, xi):
    sig = np.sqrt(1.0 - eta * eta)
    n = xi.shape[0]
    xs = np.empty((n, x0.shape[0]))
    vs = np.empty_like(xs)
    x, v = x0.copy(), v0.copy()
    g = A @ (x - mu)
    for k in range(n):
        v = v - 0.5 * h * g
        x = x + 0.5 * h * v
        v = eta * v + sig * xi[k]
        x = x + 0.5 * h * v
        g = A @ (x - mu)
        v = v - 0.5 * h * g
        xs[k], vs[k] = x, v
    return xs, vs


@njit
def _euler_linear_chain_loop(x0, v0, A, mu, h, gamma, xi):
    n = xi.shape[0]
    d = x0.shape[0]
    s2 = np.sqrt(2.0 * gamma * h)
    xs = np.empty((n, d))
    vs = np.empty((n, d))
    x = x0.copy()
    v = v0.copy()
    g = np.empty(d)
    for k in range(n):
        for i in range(d):
            s = 0.0
            for j in range(d):
                s += A[i, j] * (x[j] - mu[j])
            g[i] = s
        for j in range(d):
            xn = x[j] + h * v[j]
            v[j] = v[j] - h * g[j] - h * gamma * v[j] + s2 * xi[k, j]
            x[j] = xn
            xs[k, j] = x[j]
            vs[k, j] = v[j]
    return xs, vs


def _euler_linear_chain_numpy(x0, v0, A, mu, h, gamma, xi):
    s2 = np.sqrt(2.0 * gamma * h)
    n = xi.shape[0]
    xs = np.empty((n, x0.shape[0]))
    vs = np.empty_like(xs)
    x, v = x0.copy(), v0.copy()
    for k in range(n):
        g = A @ (x - mu)
        x, v = x + h * v, v - h * g - h * gamma * v + s2 * xi[k]
        xs[k], vs[k] = x, v
    return xs, vs


# above this many weights the BLAS-backed numpy form wins (see benchmarks/bench_kernels.py)
LOOP_MAX_WEIGHTS = 256


def _by_size(loop, ref):
    def dispatch(W, Xa, y, idx):
        return loop(W, Xa, y, idx) if W.size <= LOOP_MAX_WEIGHTS else ref(W, Xa, y, idx)
    dispatch.__name__ = ref.__name__.replace("_numpy", "")
    return dispatch


if HAS_NUMBA:
    softmax_xent_grad_sum = _by_size(_softmax_xent_grad_sum_loop, softmax_xent_grad_sum_numpy)
    softmax_xent_sum = _by_size(_softmax_xent_sum_loop, softmax_xent_sum_numpy)
    ubu_linear_chain = _ubu_linear_chain_loop
    baoab_linear_chain = _baoab_linear_chain_loop
    euler_linear_chain = _euler_linear_chain_loop
else:
    softmax_xent_grad_sum = softmax_xent_grad_sum_numpy
    softmax_xent_sum = softmax_xent_sum_numpy
    ubu_linear_chain = _ubu_linear_chain_numpy
    baoab_linear_chain = _baoab_linear_chain_numpy
    euler_linear_chain = _euler_linear_chain_numpy


# -- coupled (fine, coarse) chains on multinomial logistic regression ------------------------
#
# One call advances both chains through ``n`` coarse steps. ``noise_f`` is (n, 2, S, d) with
# S = 4 for ubu and 1 otherwise; ``noise_c`` is (n, S, d). ``idx_f`` is (n, 2, b), ``idx_c``
# is (n, b); with ``full`` set the index arrays are ignored and every datum is used.
# ``state`` rows are x_f, v_f, x_c, v_c, g_f, g_c (cached gradients for baoab); it is
# updated in place. Returns the 1-based step at which a chain left the finite range, or 0.

KIND_UBU, KIND_BAOAB, KIND_EULER = 0, 1, 2


@njit
def _lr_grad_est(x, C, q, Xa, y, prior_prec, idx, full, scale, vr, anchor_probs, anchor_sum, out):
    # anchor_probs[i] holds the softmax at the anchor for datum i (used when vr is set)
    d = C * q
    for j in range(d):
        out[j] = 0.0
    n_rows = Xa.shape[0] if full else idx.shape[0]
    z = np.empty(C)
    for r in range(n_rows):
        i = r if full else idx[r]
        zmax = -np.inf
        for c in range(C):
            s = 0.0
            for j in range(q):
                s += x[c * q + j] * Xa[i, j]
            z[c] = s
            if s > zmax:
                zmax = s
        tot = 0.0
        for c in range(C):
            z[c] = np.exp(z[c] - zmax)
            tot += z[c]
        for c in range(C):
            coef = z[c] / tot
            if vr:
                coef -= anchor_probs[i, c]
            elif c == y[i]:
                coef -= 1.0
            for j in range(q):
                out[c * q + j] += coef * Xa[i, j]
    for j in range(d):
        if vr:
            out[j] = prior_prec * x[j] + anchor_sum[j] + scale * out[j]
        else:
            out[j] = prior_prec * x[j] + scale * out[j]


@njit
def _lr_step(kind, x, v, g, h, coef, gamma, xi, C, q, Xa, y, prior_prec, idx, full, scale, vr,
             anchor_probs, anchor_sum, tmp):
    d = x.shape[0]
    if kind == 0:
        F, eta, sx1, sx2, sv1, sv2 = coef[0], coef[1], coef[2], coef[3], coef[4], coef[5]
        for j in range(d):
            xn = x[j] + F * v[j] + sx1 * xi[0, j] + sx2 * xi[1, j]
            v[j] = eta * v[j] + sv1 * xi[0, j] + sv2 * xi[1, j]
            x[j] = xn
        _lr_grad_est(x, C, q, Xa, y, prior_prec, idx, full, scale, vr, anchor_probs, anchor_sum, tmp)
        for j in range(d):
            v[j] -= h * tmp[j]
            xn = x[j] + F * v[j] + sx1 * xi[2, j] + sx2 * xi[3, j]
            v[j] = eta * v[j] + sv1 * xi[2, j] + sv2 * xi[3, j]
            x[j] = xn
    elif kind == 1:
        eta = coef[1]
        sig = np.sqrt(-np.expm1(-2.0 * gamma * h))
        for j in range(d):
            v[j] -= 0.5 * h * g[j]
            x[j] += 0.5 * h * v[j]
            v[j] = eta * v[j] + sig * xi[0, j]
            x[j] += 0.5 * h * v[j]
        _lr_grad_est(x, C, q, Xa, y, prior_prec, idx, full, scale, vr, anchor_probs, anchor_sum, g)
        for j in range(d):
            v[j] -= 0.5 * h * g[j]
    else:
        s2 = np.sqrt(2.0 * gamma * h)
        _lr_grad_est(x, C, q, Xa, y, prior_prec, idx, full, scale, vr, anchor_probs, anchor_sum, tmp)
        for j in range(d):
            xn = x[j] + h * v[j]
            v[j] = v[j] - h * tmp[j] - h * gamma * v[j] + s2 * xi[0, j]
            x[j] = xn


@njit
def _finite(x, v):
    for j in range(x.shape[0]):
        if not (abs(x[j]) <= 1e100 and abs(v[j]) <= 1e100):
            return False
    return True


@njit
def _coupled_logreg_chunk_loop(kind, C, q, Xa, y, prior_prec, full, scale, vr, anchor_probs, anchor_sum,
                               hf, hc, coef_f, coef_c, gamma, noise_f, noise_c, idx_f, idx_c,
                               same_fine, state, out_f, out_c):
    n = noise_c.shape[0]
    d = state.shape[1]
    tmp = np.empty(d)
    xf, vf, xc, vc, gf, gc = state[0], state[1], state[2], state[3], state[4], state[5]
    for k in range(n):
        _lr_step(kind, xf, vf, gf, hf, coef_f, gamma, noise_f[k, 0], C, q, Xa, y, prior_prec,
                 idx_f[k, 0], full, scale, vr, anchor_probs, anchor_sum, tmp)
        if not same_fine:
            _lr_step(kind, xf, vf, gf, hf, coef_f, gamma, noise_f[k, 1], C, q, Xa, y, prior_prec,
                     idx_f[k, 1], full, scale, vr, anchor_probs, anchor_sum, tmp)
        _lr_step(kind, xc, vc, gc, hc, coef_c, gamma, noise_c[k], C, q, Xa, y, prior_prec,
                 idx_c[k], full, scale, vr, anchor_probs, anchor_sum, tmp)
        if not (_finite(xf, vf) and _finite(xc, vc)):
            return k + 1
        for j in range(d):
            out_f[k, j] = xf[j]
            out_c[k, j] = xc[j]
    return 0


def _lr_grad_est_numpy(x, C, q, Xa, y, prior_prec, idx, full, scale, vr, anchor_probs, anchor_sum):
    rows = np.arange(Xa.shape[0]) if full else idx
    W = x.reshape(C, q)
    if vr:
        # repeated indices are summed with multiplicity, as in the loop form
        G = (_softmax_rows(Xa[rows] @ W.T) - anchor_probs[rows]).T @ Xa[rows]
        return prior_prec * x + anchor_sum + scale * G.reshape(-1)
    P = _softmax_rows(Xa[rows] @ W.T)
    P[np.arange(rows.shape[0]), y[rows]] -= 1.0
    return prior_prec * x + scale * (P.T @ Xa[rows]).reshape(-1)


def _softmax_rows(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    P = np.exp(Z)
    return P / P.sum(axis=1, keepdims=True)


def _coupled_logreg_chunk_numpy(kind, C, q, Xa, y, prior_prec, full, scale, vr, anchor_probs, anchor_sum,
                                hf, hc, coef_f, coef_c, gamma, noise_f, noise_c, idx_f, idx_c,
                                same_fine, state, out_f, out_c):
    def grad(x, idx):
        return _lr_grad_est_numpy(x, C, q, Xa, y, prior_prec, idx, full, scale, vr, anchor_probs, anchor_sum)

    def step(x, v, g, h, coef, xi, idx):
        if kind == KIND_UBU:
            F, eta, sx1, sx2, sv1, sv2 = coef
            x, v = x + F * v + sx1 * xi[0] + sx2 * xi[1], eta * v + sv1 * xi[0] + sv2 * xi[1]
            v = v - h * grad(x, idx)
            x, v = x + F * v + sx1 * xi[2] + sx2 * xi[3], eta * v + sv1 * xi[2] + sv2 * xi[3]
        elif kind == KIND_BAOAB:
            v = v - 0.5 * h * g
            x = x + 0.5 * h * v
            v = coef[1] * v + np.sqrt(-np.expm1(-2.0 * gamma * h)) * xi[0]
            x = x + 0.5 * h * v
            g = grad(x, idx)
            v = v - 0.5 * h * g
        else:
            gx = grad(x, idx)
            x, v = x + h * v, v - h * gx - h * gamma * v + np.sqrt(2.0 * gamma * h) * xi[0]
        return x, v, g

    xf, vf, xc, vc, gf, gc = (state[i].copy() for i in range(6))
    for k in range(noise_c.shape[0]):
        xf, vf, gf = step(xf, vf, gf, hf, coef_f, noise_f[k, 0], idx_f[k, 0])
        if not same_fine:
            xf, vf, gf = step(xf, vf, gf, hf, coef_f, noise_f[k, 1], idx_f[k, 1])
        xc, vc, gc = step(xc, vc, gc, hc, coef_c, noise_c[k], idx_c[k])
        state[:] = (xf, vf, xc, vc, gf, gc)
        if not (np.all(np.abs(np.concatenate([xf, vf, xc, vc])) <= 1e100)):
            return k + 1
        out_f[k], out_c[k] = xf, xc
    return 0


coupled_logreg_chunk = _coupled_logreg_chunk_loop if HAS_NUMBA else _coupled_logreg_chunk_numpy
