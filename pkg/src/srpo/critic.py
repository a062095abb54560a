"""Critics: expectile-regression IQL on offline transitions, and analytic quadratic Q."""

import math
from pathlib import Path

import numpy as np

from .behavior import write_curve
from .errors import CheckpointError, NumericError
from .nn import Adam, DenseNet, load_checkpoint, save_checkpoint


def expectile_loss(u, tau):
    """``|tau - 1(u < 0)| * u^2``, elementwise."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"expectile tau must lie in (0, 1), got {tau}")
    u = np.asarray(u, dtype=np.float64)
    return np.where(u < 0, 1.0 - tau, tau) * u**2


class QuadraticQ:
    """``Q(s, a) = -scale * ||a - a_tar(s)||^2``.

    With a single target the state is ignored. With a table of targets
    (shape ``(n_cells, d)``) an integer state array picks the row.
    """

    def __init__(self, a_tar, scale=1.0):
        self.a_tar = np.asarray(a_tar, dtype=np.float64)
        self.scale = float(scale)

    def _target(self, states):
        if self.a_tar.ndim == 2 and states is not None:
            s = np.asarray(states)
            if s.ndim == 1 and np.issubdtype(s.dtype, np.integer):
                return self.a_tar[s]
        return self.a_tar

    def value(self, states, actions):
        return -self.scale * np.sum((np.atleast_2d(actions) - self._target(states)) ** 2, axis=1)

    def grad_action(self, states, actions):
        return -2.0 * self.scale * (np.atleast_2d(actions) - self._target(states))


class CriticPair:
    """Q(s, a), V(s) and an EMA target copy of Q, trained by implicit Q-learning."""

    def __init__(self, state_dim, action_dim, hidden=(256, 256), tau=0.7, gamma=0.99,
                 rho=0.005, lr=3e-4, seed=0):
        if not 0.0 < tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {tau}")
        if not 0.0 <= gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
        if not 0.0 < rho <= 1.0:
            raise ValueError(f"rho must lie in (0, 1], got {rho}")
        self.state_dim, self.action_dim = int(state_dim), int(action_dim)
        self.tau, self.gamma, self.rho = float(tau), float(gamma), float(rho)
        self.q_net = DenseNet([state_dim + action_dim, *hidden, 1], seed=seed)
        self.v_net = DenseNet([state_dim, *hidden, 1], seed=seed + 1)
        self.target_q = self.q_net.copy()
        self.q_opt = Adam(lr)
        self.v_opt = Adam(lr)

    def _sa(self, states, actions):
        return np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)

    def value(self, states, actions):
        return self.q_net.forward(self._sa(states, actions))[:, 0]

    def state_value(self, states):
        return self.v_net.forward(np.atleast_2d(states))[:, 0]

    def grad_action(self, states, actions):
        q = self.q_net.forward(self._sa(states, actions))
        g = self.q_net.backward_input(np.ones_like(q))
        return g[:, self.state_dim:]

    def update_target(self):
        for k, v in self.q_net.params.items():
            self.target_q.params[k] += self.rho * (v - self.target_q.params[k])

    def save(self, path, meta=None):
        return save_checkpoint(path, {"q_net": self.q_net, "v_net": self.v_net,
                                      "target_q": self.target_q, "q_opt": self.q_opt,
                                      "v_opt": self.v_opt},
                               {"model": "CriticPair", "state_dim": self.state_dim,
                                "action_dim": self.action_dim, "tau": self.tau,
                                "gamma": self.gamma, "rho": self.rho, **(meta or {})})

    @classmethod
    def load(cls, path):
        comps, meta = load_checkpoint(path)
        if meta.get("model") != "CriticPair":
            raise CheckpointError(f"{path} does not hold a CriticPair")
        pair = cls.__new__(cls)
        pair.state_dim, pair.action_dim = meta["state_dim"], meta["action_dim"]
        pair.tau, pair.gamma, pair.rho = meta["tau"], meta["gamma"], meta["rho"]
        for k in ("q_net", "v_net", "target_q", "q_opt", "v_opt"):
            setattr(pair, k, comps[k])
        return pair


def v_step(pair, states, actions):
    """One expectile-regression step of V toward the target Q."""
    if len(states) == 0:
        raise ValueError("empty batch")
    q = pair.target_q.forward(pair._sa(states, actions))[:, 0]
    v = pair.v_net.forward(np.atleast_2d(states), train=True)[:, 0]
    u = q - v
    w = np.where(u < 0, 1.0 - pair.tau, pair.tau)
    loss = float(np.mean(w * u**2))
    if not math.isfinite(loss):
        raise NumericError("V loss is not finite")
    grads = pair.v_net.backward_params((-2.0 * w * u / len(u))[:, None])
    pair.v_opt.step(pair.v_net.params, grads)
    return loss


def q_step(pair, states, actions, rewards, next_states, terminals):
    """One regression step of Q toward ``r + gamma * V(s')``, then the EMA target update."""
    if len(states) == 0:
        raise ValueError("empty batch")
    v_next = pair.v_net.forward(np.atleast_2d(next_states))[:, 0]
    target = rewards + pair.gamma * (1.0 - np.asarray(terminals, dtype=np.float64)) * v_next
    q = pair.q_net.forward(pair._sa(states, actions), train=True)[:, 0]
    err = target - q
    loss = float(np.mean(err**2))
    if not math.isfinite(loss):
        raise NumericError("Q loss is not finite")
    grads = pair.q_net.backward_params((-2.0 * err / len(err))[:, None])
    pair.q_opt.step(pair.q_net.params, grads)
    pair.update_target()
    return loss


def train_critic(pair, data, steps=20_000, batch_size=256, lr_schedule="cosine",
                 seed=0, log_interval=100, out_dir=None):
    """Alternate V and Q steps over minibatches of an ``MdpDataset``.

    Returns rows ``(step, v_loss, q_loss)`` averaged over each log interval.
    """
    rng = np.random.default_rng(seed)
    n = len(data)
    if n == 0:
        raise ValueError("cannot train a critic on an empty dataset")
    base_q, base_v = pair.q_opt.lr, pair.v_opt.lr
    curve, acc = [], []
    for step in range(1, steps + 1):
        if lr_schedule == "cosine":
            frac = 0.5 * (1.0 + math.cos(math.pi * (step - 1) / steps))
            pair.q_opt.lr, pair.v_opt.lr = base_q * frac, base_v * frac
        idx = rng.integers(0, n, size=batch_size)
        lv = v_step(pair, data.states[idx], data.actions[idx])
        lq = q_step(pair, data.states[idx], data.actions[idx], data.rewards[idx],
                    data.next_states[idx], data.terminals[idx])
        acc.append((lv, lq))
        if step % log_interval == 0 or step == steps:
            m = np.mean(acc, axis=0)
            curve.append((step, float(m[0]), float(m[1])))
            acc = []
    pair.q_opt.lr, pair.v_opt.lr = base_q, base_v
    if out_dir is not None:
        out_dir = Path(out_dir)
        pair.save(out_dir / "critic.npz", {"steps": steps})
        write_curve(out_dir / "critic_loss.csv", curve, ("step", "v_loss", "q_loss"))
    return curve


def q_gradient(critic, states, actions):
    """``grad_a Q(s, a)`` for any critic exposing ``grad_action``."""
    return critic.grad_action(states, actions)
