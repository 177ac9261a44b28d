"""Split potentials ``f(x) = f0(x) + sum_i f_i(x)`` and the concrete targets used by the samplers.

Parameters are flat float vectors of length ``model.dim``. Data terms are indexed
``0 .. n_terms - 1`` and class labels run over ``0 .. C - 1``.
"""
import numpy as np

from . import kernels

__all__ = [
    "Model",
    "QuadraticModel",
    "LogRegModel",
    "MlpModel",
    "LocalizedModel",
    "localize",
    "check_gradient",
]


def _as_param(x, dim):
    x = np.asarray(x, dtype=float)
    if x.shape != (dim,):
        raise ValueError(f"expected a parameter vector of shape ({dim},), got {x.shape}")
    return x


def _as_indices(indices, n_terms):
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n_terms):
        bad = idx[(idx < 0) | (idx >= n_terms)]
        raise ValueError(f"term indices out of range 0..{n_terms - 1}: {bad[:5].tolist()}")
    # summation order must not depend on how the batch was drawn
    return np.sort(idx)


class Model:
    """Base class for split potentials.

    Subclasses implement ``prior_potential``, ``prior_grad``, ``_term_potential_sum``
    and ``_term_gradient_sum``; everything else is derived from those.
    """

    dim: int
    n_terms: int

    def prior_potential(self, x):
        return 0.0

    def prior_grad(self, x):
        return np.zeros(self.dim)

    def _term_potential_sum(self, x, idx):
        raise NotImplementedError

    def _term_gradient_sum(self, x, idx):
        raise NotImplementedError

    @property
    def all_terms(self):
        return np.arange(self.n_terms)

    def term_potential_sum(self, x, indices):
        x = _as_param(x, self.dim)
        return self._term_potential_sum(x, _as_indices(indices, self.n_terms))

    def term_gradient_sum(self, x, indices):
        """Sum of per-term gradients over ``indices``; the prior is not included."""
        x = _as_param(x, self.dim)
        return self._term_gradient_sum(x, _as_indices(indices, self.n_terms))

    def term_potential(self, i, x):
        return self.term_potential_sum(x, [i])

    def term_gradient(self, i, x):
        return self.term_gradient_sum(x, [i])

    def potential(self, x):
        x = _as_param(x, self.dim)
        return self.prior_potential(x) + self._term_potential_sum(x, self.all_terms)

    def gradient(self, x):
        x = _as_param(x, self.dim)
        return self.prior_grad(x) + self._term_gradient_sum(x, self.all_terms)

    def hessian_vector_product(self, x, v, eps=1e-5):
        """``H(x) v`` by central differences of the gradient along ``v / |v|``."""
        if eps <= 0:
            raise ValueError("eps must be positive")
        x = _as_param(x, self.dim)
        v = _as_param(v, self.dim)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return np.zeros(self.dim)
        u = v / nv
        return (self.gradient(x + eps * u) - self.gradient(x - eps * u)) * nv / (2.0 * eps)


class QuadraticModel(Model):
    """Gaussian target ``N(mean, precision^-1)`` split into weighted shares.

    Term ``i`` is ``w_i (x - mean)^T A (x - mean) / 2``. With no ``term_weights``
    the shares are equal (``w_i = 1 / n_terms``); unequal weights make minibatch
    gradients genuinely noisy while keeping the force linear.
    """

    def __init__(self, precision, mean=None, n_terms=1, term_weights=None):
        A = np.atleast_2d(np.asarray(precision, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise ValueError("precision must be square")
        if not np.allclose(A, A.T, rtol=0.0, atol=1e-12):
            raise ValueError("precision must be symmetric")
        eig = np.linalg.eigvalsh(A)
        if eig[0] <= 0:
            raise ValueError("precision must be positive definite")
        self.precision = A
        self.dim = A.shape[0]
        self.mean = np.zeros(self.dim) if mean is None else _as_param(mean, self.dim).copy()
        self.n_terms = int(n_terms)
        if self.n_terms < 1:
            raise ValueError("n_terms must be >= 1")
        if term_weights is None:
            self.term_weights = None
        else:
            w = np.asarray(term_weights, dtype=float)
            if w.shape != (self.n_terms,) or np.any(w < 0):
                raise ValueError("term_weights must be n_terms non-negative numbers")
            if not np.isclose(w.sum(), 1.0, rtol=0, atol=1e-12):
                raise ValueError("term_weights must sum to one")
            self.term_weights = w
        self.m, self.M = float(eig[0]), float(eig[-1])

    @classmethod
    def with_spectrum(cls, eigenvalues, rng=None, **kwargs):
        """Quadratic with the given eigenvalues in a random orthonormal basis."""
        lam = np.asarray(eigenvalues, dtype=float)
        rng = np.random.default_rng(rng)
        Q, R = np.linalg.qr(rng.standard_normal((lam.size, lam.size)))
        Q *= np.sign(np.diag(R))
        A = (Q * lam) @ Q.T
        return cls(0.5 * (A + A.T), **kwargs)

    @property
    def covariance(self):
        return np.linalg.inv(self.precision)

    def _weight(self, idx):
        if self.term_weights is None:
            return idx.shape[0] / self.n_terms
        return float(np.sum(self.term_weights[idx]))

    def _term_potential_sum(self, x, idx):
        r = x - self.mean
        return 0.5 * self._weight(idx) * float(r @ self.precision @ r)

    def _term_gradient_sum(self, x, idx):
        return self._weight(idx) * (self.precision @ (x - self.mean))

    def hessian_vector_product(self, x, v, eps=1e-5):
        if eps <= 0:
            raise ValueError("eps must be positive")
        _as_param(x, self.dim)
        return self.precision @ _as_param(v, self.dim)


class _Classifier(Model):
    """Shared data handling for models with per-datum cross-entropy terms."""

    def _set_data(self, features, labels, n_classes):
        X = np.asarray(features, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(labels, dtype=np.int64).reshape(-1)
        if X.shape[0] != y.shape[0] or X.shape[0] == 0:
            raise ValueError("features and labels must have the same positive length")
        C = int(y.max()) + 1 if n_classes is None else int(n_classes)
        if y.min() < 0 or y.max() >= C:
            raise ValueError(f"labels must lie in 0..{C - 1}")
        if C < 2:
            raise ValueError("classification needs at least two classes")
        self.features, self.labels, self.n_classes = X, y, C
        self.n_terms = X.shape[0]
        self.n_features = X.shape[1]

    def predict_probs(self, x, inputs):
        raise NotImplementedError


def _softmax(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    P = np.exp(Z)
    P /= P.sum(axis=1, keepdims=True)
    return P


class LogRegModel(_Classifier):
    """Bayesian multinomial logistic regression with an isotropic Gaussian prior.

    Parameters are a (C, p + 1) matrix flattened row-major: per class ``p``
    weights followed by a bias. The prior ``|x|^2 / (2 sigma^2)`` covers every
    entry, biases included.
    """

    def __init__(self, features, labels, prior_variance=1.0, n_classes=None):
        self._set_data(features, labels, n_classes)
        if prior_variance <= 0:
            raise ValueError("prior_variance must be positive")
        self.prior_variance = float(prior_variance)
        self.Xa = np.ascontiguousarray(np.hstack([self.features, np.ones((self.n_terms, 1))]))
        self.shape = (self.n_classes, self.n_features + 1)
        self.dim = self.shape[0] * self.shape[1]

    def prior_potential(self, x):
        return float(x @ x) / (2.0 * self.prior_variance)

    def prior_grad(self, x):
        return x / self.prior_variance

    def _term_potential_sum(self, x, idx):
        return float(kernels.softmax_xent_sum(x.reshape(self.shape), self.Xa, self.labels, idx))

    def _term_gradient_sum(self, x, idx):
        return kernels.softmax_xent_grad_sum(x.reshape(self.shape), self.Xa, self.labels, idx).reshape(-1)

    def hessian_vector_product(self, x, v, eps=1e-5):
        if eps <= 0:
            raise ValueError("eps must be positive")
        W = _as_param(x, self.dim).reshape(self.shape)
        V = _as_param(v, self.dim).reshape(self.shape)
        P = _softmax(self.Xa @ W.T)
        S = self.Xa @ V.T
        R = P * (S - np.sum(P * S, axis=1, keepdims=True))
        return (R.T @ self.Xa).reshape(-1) + V.reshape(-1) / self.prior_variance

    def predict_probs(self, x, inputs):
        W = _as_param(x, self.dim).reshape(self.shape)
        Xi = np.atleast_2d(np.asarray(inputs, dtype=float))
        if Xi.shape[1] != self.n_features:
            raise ValueError(f"inputs must have {self.n_features} columns, got {Xi.shape[1]}")
        return _softmax(Xi @ W[:, :-1].T + W[:, -1])


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class MlpModel(_Classifier):
    """One-hidden-layer softplus network with cross-entropy terms.

    Layout: ``W1`` (H, p), ``b1`` (H), ``W2`` (C, H), ``b2`` (C), concatenated
    in that order. The Gaussian prior acts on weights only.
    """

    def __init__(self, features, labels, hidden=16, prior_variance=1.0, n_classes=None):
        self._set_data(features, labels, n_classes)
        if prior_variance <= 0:
            raise ValueError("prior_variance must be positive")
        self.hidden = int(hidden)
        self.prior_variance = float(prior_variance)
        p, H, C = self.n_features, self.hidden, self.n_classes
        self._sizes = [H * p, H, C * H, C]
        self._offsets = np.cumsum([0] + self._sizes)
        self.dim = int(self._offsets[-1])
        mask = np.zeros(self.dim)
        mask[self._offsets[0]:self._offsets[1]] = 1.0
        mask[self._offsets[2]:self._offsets[3]] = 1.0
        self._weight_mask = mask

    def unpack(self, x):
        o = self._offsets
        p, H, C = self.n_features, self.hidden, self.n_classes
        return (x[o[0]:o[1]].reshape(H, p), x[o[1]:o[2]], x[o[2]:o[3]].reshape(C, H), x[o[3]:o[4]])

    def init_params(self, rng):
        """Glorot-style random initialization."""
        rng = np.random.default_rng(rng)
        p, H, C = self.n_features, self.hidden, self.n_classes
        return np.concatenate([
            rng.standard_normal(H * p) / np.sqrt(p),
            np.zeros(H),
            rng.standard_normal(C * H) / np.sqrt(H),
            np.zeros(C),
        ])

    def prior_potential(self, x):
        w = x * self._weight_mask
        return float(w @ w) / (2.0 * self.prior_variance)

    def prior_grad(self, x):
        return x * self._weight_mask / self.prior_variance

    def _forward(self, x, X):
        W1, b1, W2, b2 = self.unpack(x)
        A1 = X @ W1.T + b1
        Hd = _softplus(A1)
        return A1, Hd, Hd @ W2.T + b2

    def _term_potential_sum(self, x, idx):
        if idx.shape[0] == 0:
            return 0.0
        _, _, Z = self._forward(x, self.features[idx])
        zmax = Z.max(axis=1)
        lse = zmax + np.log(np.exp(Z - zmax[:, None]).sum(axis=1))
        return float(np.sum(lse - Z[np.arange(idx.shape[0]), self.labels[idx]]))

    def _term_gradient_sum(self, x, idx):
        if idx.shape[0] == 0:
            return np.zeros(self.dim)
        X = self.features[idx]
        A1, Hd, Z = self._forward(x, X)
        W1, b1, W2, b2 = self.unpack(x)
        dZ = _softmax(Z)
        dZ[np.arange(idx.shape[0]), self.labels[idx]] -= 1.0
        gW2 = dZ.T @ Hd
        gb2 = dZ.sum(axis=0)
        dA1 = (dZ @ W2) * _sigmoid(A1)
        gW1 = dA1.T @ X
        gb1 = dA1.sum(axis=0)
        return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])

    def predict_probs(self, x, inputs):
        x = _as_param(x, self.dim)
        Xi = np.atleast_2d(np.asarray(inputs, dtype=float))
        if Xi.shape[1] != self.n_features:
            raise ValueError(f"inputs must have {self.n_features} columns, got {Xi.shape[1]}")
        return _softmax(self._forward(x, Xi)[2])


class LocalizedModel(Model):
    """``f*(x) = f(x) + |x - center|^2 / (2 rho^2)`` restricted to the box ``|x - center|_inf < rho_max``.

    The added quadratic lives in the prior slot, so minibatch estimators pick
    it up with the rest of ``f0``.
    """

    def __init__(self, inner, center, rho, rho_max=None):
        if rho <= 0:
            raise ValueError("rho must be positive")
        rho_max = 6.0 * rho if rho_max is None else rho_max
        if rho_max <= 0:
            raise ValueError("rho_max must be positive")
        self.inner = inner
        self.dim = inner.dim
        self.n_terms = inner.n_terms
        self.center = _as_param(center, inner.dim).copy()
        self.rho = float(rho)
        self.rho_max = float(rho_max)

    def prior_potential(self, x):
        r = x - self.center
        return self.inner.prior_potential(x) + float(r @ r) / (2.0 * self.rho**2)

    def prior_grad(self, x):
        return self.inner.prior_grad(x) + (x - self.center) / self.rho**2

    def _term_potential_sum(self, x, idx):
        return self.inner._term_potential_sum(x, idx)

    def _term_gradient_sum(self, x, idx):
        return self.inner._term_gradient_sum(x, idx)

    def hessian_vector_product(self, x, v, eps=1e-5):
        return self.inner.hessian_vector_product(x, v, eps) + _as_param(v, self.dim) / self.rho**2

    def contains(self, x):
        """True when ``x`` lies in the closed box (reflection can land exactly on a face)."""
        return bool(np.max(np.abs(np.asarray(x) - self.center)) <= self.rho_max)

    def predict_probs(self, x, inputs):
        return self.inner.predict_probs(x, inputs)

    def __getattr__(self, name):
        # expose data attributes (features, labels, n_classes, ...) of the wrapped model
        if name == "inner":
            raise AttributeError(name)
        return getattr(self.inner, name)


def localize(inner, center, rho, rho_max=None):
    return LocalizedModel(inner, center, rho, rho_max)


def check_gradient(model, x, eps=1e-6):
    """Relative error between ``model.gradient`` and central differences of ``model.potential``."""
    x = _as_param(x, model.dim)
    g = model.gradient(x)
    fd = np.empty(model.dim)
    for j in range(model.dim):
        e = np.zeros(model.dim)
        e[j] = eps
        fd[j] = (model.potential(x + e) - model.potential(x - e)) / (2 * eps)
    return float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-300))
