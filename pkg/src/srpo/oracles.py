"""Closed-form and brute-force references used by the test suite.

Nothing here imports the main code path: the VP schedule is re-derived inline
so that agreement between an oracle and the implementation means something.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

BETA_MIN, BETA_MAX = 0.1, 20.0


def vp_alpha_sigma(t, beta_min=BETA_MIN, beta_max=BETA_MAX):
    t = np.asarray(t, dtype=np.float64)
    alpha = np.exp(-0.25 * t * t * (beta_max - beta_min) - 0.5 * t * beta_min)
    return alpha, np.sqrt(1.0 - alpha * alpha)


@dataclass
class GaussianMixture:
    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, d)
    variances: np.ndarray  # (k,) isotropic

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.asarray(self.variances, dtype=np.float64).reshape(-1)
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        if not (len(self.weights) == len(self.means) == len(self.variances)):
            raise ValueError("weights, means and variances disagree in length")

    @property
    def dim(self):
        return self.means.shape[1]

    def diffused(self, t, beta_min=BETA_MIN, beta_max=BETA_MAX):
        if t == 0:
            return self
        alpha, sigma = vp_alpha_sigma(t, beta_min, beta_max)
        return GaussianMixture(self.weights, alpha * self.means,
                               alpha**2 * self.variances + sigma**2)

    def _component_logpdf(self, x):
        x = np.atleast_2d(x)
        diff = x[:, None, :] - self.means[None, :, :]
        sq = np.sum(diff**2, axis=2)
        d = self.dim
        return (np.log(self.weights)[None, :] - 0.5 * sq / self.variances[None, :]
                - 0.5 * d * np.log(2 * np.pi * self.variances)[None, :]), diff

    def logpdf(self, x):
        comp, _ = self._component_logpdf(x)
        return logsumexp(comp, axis=1)

    def score(self, x):
        comp, diff = self._component_logpdf(x)
        resp = np.exp(comp - logsumexp(comp, axis=1, keepdims=True))
        return -np.einsum("nk,nkd->nd", resp / self.variances[None, :], diff)

    def sample(self, n, rng):
        k = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[k] + np.sqrt(self.variances[k])[:, None] * rng.standard_normal((n, self.dim))


def diffused_mixture_score(gm, a_t, t, beta_min=BETA_MIN, beta_max=BETA_MAX):
    """Exact score of the mixture pushed through the VP forward kernel to time t."""
    return gm.diffused(t, beta_min, beta_max).score(a_t)


def diffused_mixture_logpdf(gm, a_t, t, beta_min=BETA_MIN, beta_max=BETA_MAX):
    return gm.diffused(t, beta_min, beta_max).logpdf(a_t)


class MixtureNoiseModel:
    """Exact noise predictor ``eps* = -sigma_t * score_t`` for a Gaussian mixture.

    Quacks like a trained behavior net (forward / noise_divergence), so it can
    stand in as the "perfect network" in tests.
    """

    def __init__(self, gm, beta_min=BETA_MIN, beta_max=BETA_MAX):
        self.gm = gm
        self.action_dim = gm.dim
        self.state_dim = 0
        self.beta_min, self.beta_max = beta_min, beta_max

    def forward(self, a_t, s, t, train=False):
        a_t = np.atleast_2d(np.asarray(a_t, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(a_t),))
        alpha, sigma = vp_alpha_sigma(t, self.beta_min, self.beta_max)
        gm = self.gm
        # per-row diffused mixture: means alpha m_k, variances alpha^2 v_k + sigma^2
        var = alpha[:, None] ** 2 * gm.variances[None, :] + sigma[:, None] ** 2
        diff = a_t[:, None, :] - alpha[:, None, None] * gm.means[None, :, :]
        comp = (np.log(gm.weights)[None, :] - 0.5 * np.sum(diff**2, axis=2) / var
                - 0.5 * gm.dim * np.log(2 * np.pi * var))
        resp = np.exp(comp - logsumexp(comp, axis=1, keepdims=True))
        score = -np.einsum("nk,nkd->nd", resp / var, diff)
        return -sigma[:, None] * score

    def noise_divergence(self, a_t, s, t, h=1e-5):
        a_t = np.atleast_2d(np.asarray(a_t, dtype=np.float64))
        eps = self.forward(a_t, s, t)
        div = np.zeros(len(a_t))
        for i in range(self.action_dim):
            e = np.zeros(self.action_dim)
            e[i] = h
            div += (self.forward(a_t + e, s, t)[:, i] - self.forward(a_t - e, s, t)[:, i]) / (2 * h)
        return eps, div


def expectile_solve(values, weights, tau, tol=1e-13):
    """Unique minimiser of sum_i w_i |tau - 1(x_i < v)| (x_i - v)^2, by bisection.

    The first-order condition sum_i w_i |tau - 1(x_i < v)| (x_i - v) = 0 is
    strictly decreasing in v, so bisection on [min x, max x] is exact.
    """
    x = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        return lo

    def foc(v):
        u = x - v
        return np.sum(w * np.where(u < 0, 1 - tau, tau) * u)

    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if foc(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def srpo_fixed_point_quadratic(a_tar, beta, gm, t0=0.0, iters=200):
    """Root of -2 (a - a_tar) + score_t0(a) / beta by damped Newton from a_tar.

    The Jacobian of the mixture score is taken by central differences.
    """
    a = np.array(a_tar, dtype=np.float64)
    if np.isinf(beta):
        return a
    inv_beta = 1.0 / beta
    d = len(a)

    def resid(x):
        return -2.0 * (x - a_tar) + inv_beta * diffused_mixture_score(gm, x[None], t0)[0]

    for _ in range(iters):
        r = resid(a)
        if np.linalg.norm(r) < 1e-12:
            break
        jac = np.empty((d, d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = 1e-6
            jac[:, j] = (resid(a + e) - resid(a - e)) / 2e-6
        step = np.linalg.solve(jac, -r)
        lam = 1.0
        while lam > 1e-6 and np.linalg.norm(resid(a + lam * step)) > np.linalg.norm(r):
            lam *= 0.5
        a = a + lam * step
    return a


def gaussian_fixed_point(a_tar, beta):
    """Closed form for N(0, I) behavior: a* = 2 beta a_tar / (2 beta + 1)."""
    return 2.0 * beta * np.asarray(a_tar, dtype=np.float64) / (2.0 * beta + 1.0)


def central_difference(f, x, h=1e-6):
    """Gradient of scalar ``f`` at array ``x`` by central differences (any shape)."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def naive_mlp_forward(weights, biases, activations, x):
    """Straight-line loop re-evaluation of a plain MLP, one sample at a time."""
    out = []
    for row in np.atleast_2d(x):
        h = [float(v) for v in row]
        for W, b, act in zip(weights, biases, activations):
            nxt = []
            for j in range(W.shape[1]):
                z = b[j] + sum(h[i] * W[i, j] for i in range(W.shape[0]))
                if act == "relu":
                    z = z if z > 0 else 0.0
                elif act == "tanh":
                    z = float(np.tanh(z))
                nxt.append(z)
            h = nxt
        out.append(h)
    return np.array(out)


def gaussian_mean_score_mc(mean, std, n, rng):
    """Monte-Carlo mean of d/d mean log N(x; mean, std^2 I) over its own samples.

    Returns ``(mc_mean, standard_error)`` per coordinate.
    """
    mean = np.asarray(mean, dtype=np.float64)
    x = mean + std * rng.standard_normal((n, len(mean)))
    g = (x - mean) / std**2
    return g.mean(axis=0), g.std(axis=0, ddof=1) / np.sqrt(n)
