"""Deterministic toy datasets: 2-D behavior distributions and small chain MDPs."""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BANDIT_NAMES = ("8gaussians", "swissroll", "checkerboard", "2spirals", "rings", "moons")
FRAME = 4.0
DATA_FORMAT = "srpo-data/1"


def _eight_gaussians(n, rng):
    angles = np.arange(8) * np.pi / 4
    centers = 2 * math.sqrt(2) * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return centers[rng.integers(0, 8, n)] + 0.3 * rng.standard_normal((n, 2))


def _swissroll(n, rng):
    t = rng.uniform(1.5 * np.pi, 4.5 * np.pi, n)
    scale = 3.5 / (4.5 * np.pi)
    x = scale * np.stack([t * np.cos(t), t * np.sin(t)], axis=1)
    return x + 0.15 * rng.standard_normal((n, 2))


def _checkerboard(n, rng):
    # 4x4 unit cells on [-2, 2]^2; cell (i, j) is filled when i + j is even
    cells = np.array([(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0])
    pick = cells[rng.integers(0, len(cells), n)]
    return pick - 2.0 + rng.random((n, 2))


def _two_spirals(n, rng):
    theta = np.sqrt(rng.random(n)) * 3 * np.pi
    r = 3.5 * theta / (3 * np.pi)
    x = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    x[rng.random(n) < 0.5] *= -1
    return x + 0.1 * rng.standard_normal((n, 2))


def _rings(n, rng):
    radii = 0.8 * np.array([1.0, 2.0, 3.0, 4.0])
    r = radii[rng.integers(0, 4, n)]
    phi = rng.uniform(0, 2 * np.pi, n)
    x = r[:, None] * np.stack([np.cos(phi), np.sin(phi)], axis=1)
    return x + 0.08 * rng.standard_normal((n, 2))


def _moons(n, rng):
    phi = rng.uniform(0, np.pi, n)
    upper = rng.random(n) < 0.5
    x = np.where(upper[:, None],
                 np.stack([2 * np.cos(phi), 2 * np.sin(phi)], axis=1),
                 np.stack([2 - 2 * np.cos(phi), 1 - 2 * np.sin(phi)], axis=1))
    x -= np.array([1.0, 0.5])
    return x + 0.1 * rng.standard_normal((n, 2))


_GENERATORS = {
    "8gaussians": _eight_gaussians,
    "swissroll": _swissroll,
    "checkerboard": _checkerboard,
    "2spirals": _two_spirals,
    "rings": _rings,
    "moons": _moons,
}


@dataclass
class BanditDataset:
    name: str
    samples: np.ndarray
    seed: int

    def save(self, path):
        _save_arrays(path, {"samples": self.samples},
                     {"type": "bandit", "name": self.name, "seed": self.seed})

    def to_csv(self, path):
        _write_csv(path, ["a_x", "a_y"], self.samples)


def generate_bandit(name, n_samples, seed=0):
    """Draw ``n_samples`` actions from one of the named 2-D behavior distributions.

    Samples falling outside the [-4, 4]^2 frame are redrawn, so the result is a
    frame-truncated version of the nominal distribution. Output depends only
    on ``(name, n_samples, seed)``.
    """
    if name not in _GENERATORS:
        raise ValueError(f"unknown dataset {name!r}; choose from {BANDIT_NAMES}")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng([seed, BANDIT_NAMES.index(name)])
    gen = _GENERATORS[name]
    out = gen(n_samples, rng)
    bad = np.any(np.abs(out) > FRAME, axis=1)
    while bad.any():
        out[bad] = gen(int(bad.sum()), rng)
        bad = np.any(np.abs(out) > FRAME, axis=1)
    return BanditDataset(name, out, seed)


def two_mode_dataset(n_samples, seed=0, separation=4.0, std=0.3):
    """Two equal-weight isotropic Gaussians at (+-separation/2, 0)."""
    rng = np.random.default_rng([seed, 97])
    centers = np.array([[-separation / 2, 0.0], [separation / 2, 0.0]])
    x = centers[rng.integers(0, 2, n_samples)] + std * rng.standard_normal((n_samples, 2))
    return BanditDataset("2modes", x, seed)


def gaussian_dataset(n_samples, seed=0, dim=2):
    """Standard normal actions; the behavior with a closed-form score at every t."""
    rng = np.random.default_rng([seed, 98])
    return BanditDataset("gaussian", rng.standard_normal((n_samples, dim)), seed)


def make_bandit(name, n_samples, seed=0):
    """Any 2-D action set by name: the six toys plus ``gaussian`` and ``2modes``."""
    if name == "gaussian":
        return gaussian_dataset(n_samples, seed)
    if name == "2modes":
        return two_mode_dataset(n_samples, seed)
    return generate_bandit(name, n_samples, seed)


@dataclass
class MdpDataset:
    """Transitions ``(s, a, r, s', terminal)`` with one-hot states."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    gamma: float
    behavior: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.rewards)

    def closed_support(self):
        """Every non-terminal successor state also appears as a source state."""
        seen = {tuple(s) for s in self.states}
        return all(t or tuple(s2) in seen for s2, t in zip(self.next_states, self.terminals))

    def save(self, path):
        arrays = {k: getattr(self, k) for k in
                  ("states", "actions", "rewards", "next_states", "terminals")}
        _save_arrays(path, arrays, {"type": "mdp", "gamma": self.gamma,
                                    "behavior": self.behavior})


def generate_chain_mdp(n_states, rewards, behavior_mix=None, gamma=0.99,
                       n_per_state=64, action_values=None, seed=0):
    """Deterministic chain: every action in state i leads to state i + 1.

    ``rewards[i][k]`` is the reward of action ``k`` in state ``i``; a state may
    list fewer actions than another. ``behavior_mix[i]`` gives the behavior
    probabilities over state i's actions (uniform by default). Transitions out
    of the last state are terminal. Actions are encoded by ``action_values``
    (default ``0, 1, 2, ...``) as 1-D continuous vectors.
    """
    if n_states < 2:
        raise ValueError("a chain needs at least two states")
    if len(rewards) != n_states:
        raise ValueError("need one reward list per state")
    rng = np.random.default_rng(seed)
    eye = np.eye(n_states)
    S, A, R, S2, T = [], [], [], [], []
    for i, r_i in enumerate(rewards):
        r_i = np.asarray(r_i, dtype=np.float64)
        k = len(r_i)
        p = np.full(k, 1.0 / k) if behavior_mix is None else np.asarray(behavior_mix[i], float)
        vals = np.arange(k, dtype=np.float64) if action_values is None else np.asarray(action_values[i], float)
        # exact behavior proportions, shuffled
        counts = np.floor(p * n_per_state).astype(int)
        counts[: n_per_state - counts.sum()] += 1
        acts = rng.permutation(np.repeat(np.arange(k), counts))
        last = i == n_states - 1
        for a in acts:
            S.append(eye[i])
            A.append([vals[a]])
            R.append(r_i[a])
            S2.append(np.zeros(n_states) if last else eye[i + 1])
            T.append(last)
    return MdpDataset(np.array(S), np.array(A), np.array(R), np.array(S2),
                      np.array(T, dtype=bool), float(gamma),
                      {"rewards": [list(map(float, r)) for r in rewards],
                       "behavior_mix": behavior_mix})


def _save_arrays(path, arrays, header):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = dict(arrays)
    blob["__header__"] = np.array(json.dumps({"format": DATA_FORMAT, **header}))
    with open(path, "wb") as fh:
        np.savez(fh, **blob)
    return path


def load_dataset(path):
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("format") != DATA_FORMAT:
            raise ValueError(f"{path}: unsupported dataset format")
        if header["type"] == "bandit":
            return BanditDataset(header["name"], data["samples"], header["seed"])
        return MdpDataset(data["states"], data["actions"], data["rewards"],
                          data["next_states"], data["terminals"], header["gamma"],
                          header.get("behavior") or {})


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows([repr(float(v)) for v in row] for row in rows)
    return path
