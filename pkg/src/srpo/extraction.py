"""Score-regularized extraction of a deterministic policy, plus two baselines.

The policy ascends ``Q(s, a) - KL(pi || mu) / beta``. The KL gradient is never
formed from samples of the behavior model: it is read off the pretrained
diffusion network, either as the score at a single small time (``dirac_t0``)
or as a weighted ensemble over diffusion times with the injected noise
subtracted as a baseline.
"""

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .critic import QuadraticQ
from .errors import ConfigError, NumericError
from .nn import Adam, DenseNet, load_checkpoint, save_checkpoint
from .schedule import T_RANGE

log = logging.getLogger(__name__)

OMEGA_MODES = ("dirac_t0", "sigma_sq", "custom")
BETA_MODES = ("fixed", "grad_normalized")
NORM_EPS = 1e-8
MIN_SIGMA = 1e-6
WEIGHT_EXP_CLAMP = 100.0


@dataclass
class SrpoConfig:
    beta: float = 0.1  # math.inf switches the behavior term off
    beta_mode: str = "fixed"
    omega_mode: str = "sigma_sq"
    dirac_t0: float = 0.02
    use_baseline: bool = True
    t_range: tuple = T_RANGE
    mc_samples: int = 16
    steps: int = 2000
    batch: int = 256
    lr: float = 3e-4
    lr_schedule: str = "cosine"
    omega_fn: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.t_range = tuple(float(x) for x in self.t_range)
        self.validate()

    def validate(self):
        lo, hi = self.t_range
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if self.beta_mode not in BETA_MODES:
            raise ConfigError(f"beta_mode must be one of {BETA_MODES}")
        if self.omega_mode not in OMEGA_MODES:
            raise ConfigError(f"omega_mode must be one of {OMEGA_MODES}")
        if not 0.0 < lo < hi < 1.0:
            raise ConfigError(f"t_range must lie inside (0, 1), got {self.t_range}")
        if self.omega_mode == "dirac_t0" and not lo <= self.dirac_t0 <= hi:
            raise ConfigError(f"dirac_t0={self.dirac_t0} outside t_range {self.t_range}")
        if self.omega_mode == "custom" and not callable(self.omega_fn):
            raise ConfigError("omega_mode 'custom' needs a callable omega_fn")
        if self.mc_samples < 1 or self.steps < 0 or self.batch < 1 or self.lr <= 0:
            raise ConfigError("mc_samples, batch and lr must be positive")

    @property
    def inv_beta(self):
        return 0.0 if math.isinf(self.beta) else 1.0 / self.beta

    def omega(self, t, sigma):
        if self.omega_mode == "sigma_sq":
            return sigma**2
        return np.asarray(self.omega_fn(t), dtype=np.float64)


class ActionTable:
    """One free action per integer state: the deterministic bandit policy ``pi(.) = a``."""

    def __init__(self, init_actions):
        self.params = {"actions": np.array(init_actions, dtype=np.float64)}
        self.action_dim = self.params["actions"].shape[1]

    def _idx(self, states):
        return np.asarray(states).astype(int).reshape(-1)

    def forward(self, states, train=False):
        self._last = self._idx(states)
        return self.params["actions"][self._last].copy()

    def backward(self, upstream):
        g = np.zeros_like(self.params["actions"])
        np.add.at(g, self._last, upstream)
        return {"actions": g}

    def save(self, path, meta=None):
        return save_checkpoint(path, {"actions": self.params["actions"]},
                               {"model": "ActionTable", **(meta or {})})


class PolicyNet:
    """Deterministic MLP actor; with ``action_bounds`` the output is tanh-squashed inside them."""

    def __init__(self, state_dim, action_dim, hidden=(256, 256), action_bounds=None, seed=0):
        self.state_dim, self.action_dim = int(state_dim), int(action_dim)
        final = "none"
        if action_bounds is not None:
            lo, hi = (np.asarray(b, dtype=np.float64) for b in action_bounds)
            if np.any(hi <= lo):
                raise ValueError("action bounds need low < high")
            self.low, self.high = lo, hi
            final = "tanh"
        else:
            self.low = self.high = None
        acts = ["relu"] * len(hidden) + [final]
        self.net = DenseNet([state_dim, *hidden, action_dim], acts, seed=seed)

    @property
    def params(self):
        return self.net.params

    def forward(self, states, train=False):
        y = self.net.forward(states, train=train)
        if self.low is None:
            return y
        return self.low + (self.high - self.low) * (y + 1.0) / 2.0

    def backward(self, upstream):
        if self.low is not None:
            upstream = upstream * (self.high - self.low) / 2.0
        return self.net.backward_params(upstream)

    def save(self, path, meta=None):
        bounds = None if self.low is None else [self.low.tolist(), self.high.tolist()]
        return save_checkpoint(path, {"net": self.net},
                               {"model": "PolicyNet", "state_dim": self.state_dim,
                                "action_dim": self.action_dim, "bounds": bounds,
                                **(meta or {})})


def load_policy(path):
    comps, meta = load_checkpoint(path)
    if meta.get("model") == "ActionTable":
        return ActionTable(comps["actions"])
    pol = PolicyNet.__new__(PolicyNet)
    pol.state_dim, pol.action_dim = meta["state_dim"], meta["action_dim"]
    pol.net = comps["net"]
    if meta["bounds"] is None:
        pol.low = pol.high = None
    else:
        pol.low, pol.high = (np.array(b) for b in meta["bounds"])
    return pol


def _behavior_states(behavior, states, n):
    if behavior.state_dim == 0:
        return None
    return np.repeat(np.atleast_2d(states), n, axis=0) if n > 1 else np.atleast_2d(states)


def behavior_regularizer(a, s, behavior, schedule, cfg, rng):
    """The quantity subtracted (times 1/beta) from grad Q.

    ``dirac_t0``: ``eps(a | s, t0) / sigma_t0``, i.e. minus the behavior score
    at the small time t0, evaluated at the action itself.
    Otherwise: the Monte-Carlo mean over ``(t, eps)`` of
    ``omega(t) * (eps_model(alpha_t a + sigma_t eps | s, t) - eps)``, the
    ``- eps`` baseline being dropped when ``use_baseline`` is off.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    n, d = a.shape
    if cfg.omega_mode == "dirac_t0":
        _, sigma = schedule.alpha_sigma(cfg.dirac_t0)
        if sigma < MIN_SIGMA:
            raise NumericError(f"sigma_t underflow at t0={cfg.dirac_t0}")
        return behavior.forward(a, _behavior_states(behavior, s, 1), cfg.dirac_t0) / sigma

    k = cfg.mc_samples
    t = rng.uniform(cfg.t_range[0], cfg.t_range[1], size=(n, k))
    eps = rng.standard_normal((n, k, d))
    alpha, sigma = schedule.alpha_sigma(t)
    if np.any(sigma < MIN_SIGMA):
        raise NumericError("sigma_t underflow in Monte-Carlo draw")
    a_t = alpha[..., None] * a[:, None, :] + sigma[..., None] * eps
    s_rep = None
    if behavior.state_dim:
        s_rep = np.repeat(np.atleast_2d(s), k, axis=0)
    out = behavior.forward(a_t.reshape(n * k, d), s_rep, t.reshape(-1)).reshape(n, k, d)
    if cfg.use_baseline:
        out = out - eps
    w = cfg.omega(t, sigma)
    return np.mean(w[..., None] * out, axis=1)


def srpo_gradient_at_action(a, s, critic, behavior, schedule, cfg, rng, return_parts=False):
    """Ascent direction for the policy objective at actions ``a`` (one per state)."""
    gq = np.atleast_2d(critic.grad_action(s, a))
    if cfg.beta_mode == "grad_normalized":
        gq = gq / (np.linalg.norm(gq, axis=1, keepdims=True) + NORM_EPS)
    if cfg.inv_beta == 0.0:
        reg = np.zeros_like(gq)
    else:
        reg = behavior_regularizer(a, s, behavior, schedule, cfg, rng)
    grad = gq - cfg.inv_beta * reg
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite SRPO gradient estimate")
    return (grad, gq, reg) if return_parts else grad


@dataclass
class ExtractionResult:
    policy: object
    diagnostics: list

    def write_diagnostics(self, path):
        if not self.diagnostics:
            return None
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.diagnostics[0]))
            w.writeheader()
            w.writerows(self.diagnostics)
        return path


def _ascend(policy, states, grad_fn, cfg, rng, diag_fn=None, diag_every=0):
    """Adam ascent on the policy parameters along action-space gradients."""
    opt = Adam(cfg.lr)
    table = isinstance(policy, ActionTable)
    n = len(states)
    diagnostics = []
    for step in range(1, cfg.steps + 1):
        if cfg.lr_schedule == "cosine":
            opt.lr = 0.5 * cfg.lr * (1.0 + math.cos(math.pi * (step - 1) / cfg.steps))
        idx = np.arange(n) if table or n <= cfg.batch else rng.integers(0, n, size=cfg.batch)
        s = states[idx]
        a = policy.forward(s, train=True)
        grad, gq, reg = grad_fn(a, s)
        # chain rule through pi_theta(s); minus because Adam descends
        grads = policy.backward(-grad / len(idx))
        opt.step(policy.params, grads)
        if diag_fn is not None and diag_every and (step % diag_every == 0 or step == cfg.steps):
            row = {"step": step, "grad_q_norm": float(np.mean(np.linalg.norm(gq, axis=1))),
                   "reg_norm": float(np.mean(np.linalg.norm(reg, axis=1)))}
            row.update(diag_fn(policy))
            diagnostics.append(row)
    return diagnostics


def extract_policy(policy, states, critic, behavior, schedule, cfg, rng=None,
                   diag_every=0, density_fn=None):
    """Train ``policy`` on ``states`` with the score-regularized gradient.

    ``density_fn(states, actions)`` (optional) supplies the behavior
    log-density logged in the diagnostics rows alongside mean Q and the
    gradient norms.
    """
    cfg.validate()
    rng = rng if rng is not None else np.random.default_rng(0)

    def grad_fn(a, s):
        return srpo_gradient_at_action(a, s, critic, behavior, schedule, cfg, rng, True)

    def diag_fn(pol):
        s = states[: min(len(states), 1024)]
        a = pol.forward(s)
        row = {"mean_q": float(np.mean(critic.value(s, a)))}
        if density_fn is not None:
            row["mean_log_density"] = float(np.mean(density_fn(s, a)))
        return row

    diags = _ascend(policy, states, grad_fn, cfg, rng, diag_fn, diag_every)
    return ExtractionResult(policy, diags)


def _log_weights(critic, states, actions, beta):
    lw = beta * critic.value(states, actions)
    if np.any(lw > WEIGHT_EXP_CLAMP):
        warnings.warn(f"exponentiated weights clamped at exp({WEIGHT_EXP_CLAMP:g})")
        lw = np.minimum(lw, WEIGHT_EXP_CLAMP)
    return lw


def forward_kl_baseline(actions, states, critic, beta, policy, std=1.0, steps=2000,
                        lr=0.05, batch=256, seed=0):
    """Weighted-regression extraction of a fixed-variance Gaussian policy mean.

    Maximises ``E_(s,a)~D [exp(beta Q(s, a)) log N(a; m(s), std^2 I)]``. The
    partition function only rescales weights per state, so weights are
    normalised per state (a bandit ``ActionTable``) or per minibatch.
    ``beta = 0`` is plain maximum likelihood.
    """
    actions = np.asarray(actions, dtype=np.float64)
    rng = np.random.default_rng(seed)
    opt = Adam(lr)
    table = isinstance(policy, ActionTable)
    for step in range(1, steps + 1):
        opt.lr = 0.5 * lr * (1.0 + math.cos(math.pi * (step - 1) / steps))
        if table:
            # every cell sees the whole dataset under its own Q
            cells = np.arange(len(policy.params["actions"]))
            m = policy.forward(cells, train=True)
            n_c, n_a = len(cells), len(actions)
            lw = _log_weights(critic, np.repeat(cells, n_a),
                              np.tile(actions, (n_c, 1)), beta).reshape(n_c, n_a)
            w = np.exp(lw - lw.max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            # d/dm of -sum_j w_j log N(a_j; m, std^2)
            up = (m - w @ actions) / std**2
        else:
            idx = rng.integers(0, len(actions), size=batch)
            s, a = states[idx], actions[idx]
            m = policy.forward(s, train=True)
            lw = _log_weights(critic, s, a, beta)
            w = np.exp(lw - lw.max())
            w /= w.mean()
            up = w[:, None] * (m - a) / std**2 / len(idx)
        opt.step(policy.params, policy.backward(up))
    return policy


def gaussian_reverse_kl_baseline(actions, states, critic, cfg, policy, variant="gaussian",
                                 rng=None):
    """Reverse-KL extraction against a Gaussian stand-in for the behavior.

    The behavior score is replaced by ``-(a - a_ref) / v`` where ``v`` is the
    fitted isotropic behavior variance and ``a_ref`` is the behavior mean
    (``variant="gaussian"``) or the nearest dataset action
    (``variant="nearest"``). This is the TD3+BC-style L2 regulariser written
    as a Gaussian log-likelihood.
    """
    actions = np.asarray(actions, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(0)
    mean = actions.mean(axis=0)
    var = float(actions.var(axis=0).mean())
    if variant not in ("gaussian", "nearest"):
        raise ValueError(f"unknown variant {variant!r}")

    def grad_fn(a, s):
        gq = np.atleast_2d(critic.grad_action(s, a))
        if cfg.beta_mode == "grad_normalized":
            gq = gq / (np.linalg.norm(gq, axis=1, keepdims=True) + NORM_EPS)
        if variant == "gaussian":
            ref = mean
        else:
            d2 = ((a[:, None, :] - actions[None, :, :]) ** 2).sum(axis=2)
            ref = actions[np.argmin(d2, axis=1)]
        reg = (a - ref) / var
        return gq - cfg.inv_beta * reg, gq, reg

    _ascend(policy, states, grad_fn, cfg, rng)
    return policy


def diffused_policy_param_scores(policy, state, t, n, schedule, rng):
    """Per-sample ``d/dtheta log pi_t(a_t | s)`` for ``a_t ~ pi_t = N(alpha pi(s), sigma^2 I)``.

    Returns an ``(n, n_params)`` array (parameters flattened in sorted-name
    order). The policy Jacobian at ``s`` is built once from one backward pass
    per action coordinate; each sample's gradient is then linear in it.
    """
    alpha, sigma = schedule.alpha_sigma(t)
    s = np.atleast_2d(state)
    mean = policy.forward(s)[0]
    d = len(mean)
    rows = []
    for i in range(d):
        e = np.zeros((1, d))
        e[0, i] = 1.0
        policy.forward(s)
        g = policy.backward(e)
        rows.append(np.concatenate([g[k].ravel() for k in sorted(g)]))
    jac = np.stack(rows)  # (d, n_params)
    a_t = alpha * mean + sigma * rng.standard_normal((n, d))
    u = alpha * (a_t - alpha * mean) / sigma**2
    return u @ jac


def ensemble_gain(cfg, schedule, n=4001):
    """Mean pull of the time-ensembled regulariser relative to the single-time score.

    For N(0, I) behavior the ensembled term averages to
    ``E_t[omega(t) sigma_t alpha_t] * a`` while the ``dirac_t0`` term is exactly
    ``a``; dividing beta by this gain puts the two on an equal footing.
    """
    if cfg.omega_mode == "dirac_t0":
        return 1.0
    t = np.linspace(cfg.t_range[0], cfg.t_range[1], n)
    alpha, sigma = schedule.alpha_sigma(t)
    return float(np.trapezoid(cfg.omega(t, sigma) * sigma * alpha, t) / (t[-1] - t[0]))


def target_grid(n=5, extent=3.0):
    """``n x n`` grid of bandit targets spanning ``[-extent, extent]^2``, row-major in y."""
    g = np.linspace(-extent, extent, n)
    xx, yy = np.meshgrid(g, g)
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def extract_bandit(behavior, a_tar, cfg, schedule, seed=0, init_jitter=0.0, **kwargs):
    """Extract one action per bandit target under ``Q = -||a - a_tar||^2``.

    Each target gets its own free action, started at the target (plus optional
    jitter, which breaks exact symmetry at saddle points).
    """
    a_tar = np.atleast_2d(np.asarray(a_tar, dtype=np.float64))
    rng = np.random.default_rng(seed)
    init = a_tar + init_jitter * rng.standard_normal(a_tar.shape)
    table = ActionTable(init)
    states = np.arange(len(a_tar))
    return extract_policy(table, states, QuadraticQ(a_tar), behavior, schedule, cfg,
                          rng=rng, **kwargs)
