"""Conditional diffusion behavior model.

The network predicts the injected noise ``eps(a_t | s, t)``; its score is
``-eps / sigma_t``. Densities are recovered by integrating the probability-flow
ODE forward to t = 1 with the exact divergence of the drift.
"""

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, NumericError
from .nn import Adam, DenseNet, FourierTimeEmbedding, load_checkpoint, save_checkpoint
from .schedule import T_RANGE, VPSchedule

log = logging.getLogger(__name__)

MIN_SIGMA = 1e-6
# "t = 0" density maps are evaluated here; sigma_0 = 0 makes the endpoint singular.
DENSITY_T0 = 0.02


def _as_batch(x, width, n=None):
    x = np.asarray(x, dtype=np.float64)
    if width == 0:
        return np.zeros((n if n is not None else len(x), 0))
    if x.ndim == 1:
        x = x[None, :]
    return x


def _time_column(t, n):
    t = np.asarray(t, dtype=np.float64)
    return np.full(n, float(t)) if t.ndim == 0 else t.reshape(n)


class BehaviorNet:
    """Noise predictor over the input layout ``a_t || s || fourier(t)``.

    With ``linear_skip`` the output gains a term ``c(t) * a_t``, where ``c`` is
    a linear read-out of the time features (zero at init). The optimal noise
    prediction is close to linear in ``a_t`` wherever data is sparse, so the
    skip keeps the net's extrapolation into the tails anchored to the bulk.
    """

    def __init__(self, action_dim, state_dim=0, width=128, n_blocks=6, dropout=0.1,
                 num_frequencies=16, frequency_scale=30.0, seed=0, dtype=np.float64,
                 linear_skip=False):
        self.action_dim = int(action_dim)
        self.state_dim = int(state_dim)
        self.time_embed = FourierTimeEmbedding(num_frequencies, frequency_scale, seed)
        d_in = self.action_dim + self.state_dim + self.time_embed.dim
        self.trunk = DenseNet([d_in, width, self.action_dim], residual_blocks=n_blocks,
                              dropout=dropout, seed=seed + 1, dtype=dtype)
        self.skip = None
        if linear_skip:
            self.skip = DenseNet([self.time_embed.dim, self.action_dim], ["none"], dtype=dtype)
            for v in self.skip.params.values():
                v[...] = 0.0

    @property
    def params(self):
        """Trainable arrays; skip entries are prefixed ``skip/``. Updates in place propagate."""
        if self.skip is None:
            return self.trunk.params
        return {**self.trunk.params, **{f"skip/{k}": v for k, v in self.skip.params.items()}}

    @params.setter
    def params(self, values):
        self.trunk.params = {k: v for k, v in values.items() if not k.startswith("skip/")}
        if self.skip is not None:
            self.skip.params = {k[5:]: v for k, v in values.items() if k.startswith("skip/")}

    def _inputs(self, a_t, s, t):
        a_t = _as_batch(a_t, self.action_dim)
        n = len(a_t)
        s = _as_batch(s if s is not None else np.zeros((n, 0)), self.state_dim, n)
        if s.shape[1] != self.state_dim:
            raise ValueError(f"state width {s.shape[1]} != {self.state_dim}")
        emb = self.time_embed(_time_column(t, n))
        return np.concatenate([a_t, s, emb], axis=1)

    def forward(self, a_t, s, t, train=False):
        inp = self._inputs(a_t, s, t)
        out = self.trunk.forward(inp, train=train)
        if self.skip is not None:
            self._a = inp[:, :self.action_dim].astype(out.dtype)
            self._c = self.skip.forward(inp[:, self.action_dim + self.state_dim:])
            out = out + self._c * self._a
        return out

    def backward(self, upstream, need_params=True):
        """Returns ``(param_grads, d/d a_t)`` for the cached forward pass."""
        grads, g_in = self.trunk.backward(upstream, need_params=need_params)
        g_a = g_in[:, :self.action_dim]
        if self.skip is not None:
            up = np.asarray(upstream, dtype=self._c.dtype).reshape(self._c.shape)
            g_a = g_a + up * self._c
            if need_params:
                skip_grads = self.skip.backward(up * self._a)[0]
                grads.update({f"skip/{k}": g for k, g in skip_grads.items()})
        return grads, g_a

    def noise_divergence(self, a_t, s, t):
        """Noise prediction and its exact divergence w.r.t. ``a_t``."""
        eps = self.forward(a_t, s, t)
        div = np.zeros(len(eps), dtype=np.float64)
        for i in range(self.action_dim):
            e = np.zeros_like(eps)
            e[:, i] = 1.0
            div += self.backward(e, need_params=False)[1][:, i]
        return eps, div

    def describe(self):
        t = self.trunk
        return {"action_dim": self.action_dim, "state_dim": self.state_dim,
                "width": t.layer_dims[1], "n_blocks": t.residual_blocks,
                "dropout": t.dropout, "dtype": t.dtype.name,
                "linear_skip": self.skip is not None}

    def save(self, path, optimizer=None, meta=None):
        comps = {"trunk": self.trunk, "time_embed": self.time_embed}
        if self.skip is not None:
            comps["skip"] = self.skip
        if optimizer is not None:
            comps["optimizer"] = optimizer
        return save_checkpoint(path, comps, {"model": "BehaviorNet", **self.describe(),
                                             **(meta or {})})

    @classmethod
    def load(cls, path):
        comps, meta = load_checkpoint(path)
        if meta.get("model") != "BehaviorNet":
            raise CheckpointError(f"{path} does not hold a BehaviorNet")
        net = cls.__new__(cls)
        net.action_dim = meta["action_dim"]
        net.state_dim = meta["state_dim"]
        net.trunk = comps["trunk"]
        net.time_embed = comps["time_embed"]
        net.skip = comps.get("skip")
        return net

    def copy(self):
        other = BehaviorNet.__new__(BehaviorNet)
        other.__dict__.update(self.__dict__)
        other.trunk = self.trunk.copy()
        other.skip = self.skip.copy() if self.skip is not None else None
        return other


def score(model, a_t, s, t, schedule):
    """``-eps(a_t | s, t) / sigma_t``."""
    _, sigma = schedule.alpha_sigma(t)
    if np.any(sigma < MIN_SIGMA):
        raise ValueError(f"sigma_t below {MIN_SIGMA} at t={t}")
    eps = model.forward(a_t, s, t)
    sigma = np.asarray(sigma)
    return -eps / (sigma[:, None] if sigma.ndim == 1 else sigma)


def sample_times(rng, n, t_range=T_RANGE, t_sampling="uniform"):
    """Diffusion times for a training batch.

    ``"uniform"`` draws U(t_range). ``"low_biased"`` draws half the batch
    log-uniformly, which spends more updates on the small-t regime where the
    score is sharpest; the minimiser of the loss is unchanged.
    """
    lo, hi = t_range
    if t_sampling == "uniform":
        return rng.uniform(lo, hi, size=n)
    if t_sampling == "low_biased":
        t = rng.uniform(lo, hi, size=n)
        m = rng.random(n) < 0.5
        t[m] = np.exp(rng.uniform(math.log(lo), math.log(hi), size=int(m.sum())))
        return t
    raise ValueError(f"unknown t_sampling {t_sampling!r}")


def denoising_loss(model, actions, states, rng, schedule, t_range=T_RANGE, need_grads=True,
                   t_sampling="uniform"):
    """Mean over the batch of ``||eps(alpha a + sigma eps | s, t) - eps||^2``.

    Returns ``(loss, param_grads)``; grads are None when ``need_grads`` is false.
    """
    actions = np.asarray(actions, dtype=np.float64)
    n = len(actions)
    if n == 0:
        raise ValueError("empty batch")
    t = sample_times(rng, n, t_range, t_sampling)
    eps = rng.standard_normal(actions.shape)
    a_t = schedule.perturb(actions, t, eps)
    diff = model.forward(a_t, states, t, train=need_grads) - eps
    loss = float(np.mean(np.sum(diff**2, axis=1)))
    if not math.isfinite(loss):
        raise NumericError("denoising loss is not finite")
    if not need_grads:
        return loss, None
    grads, _ = model.backward(2.0 * diff / n)
    return loss, grads


@dataclass
class BehaviorTrainConfig:
    steps: int = 50_000
    batch_size: int = 512
    lr: float = 3e-4
    weight_decay: float = 0.0
    lr_schedule: str = "cosine"  # or "constant"
    ema_decay: float = 0.0
    t_sampling: str = "uniform"
    log_interval: int = 100
    ckpt_interval: int = 0
    seed: int = 0


def _lr_at(cfg, step):
    if cfg.lr_schedule == "constant":
        return cfg.lr
    if cfg.lr_schedule == "cosine":
        return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / cfg.steps))
    raise ValueError(f"unknown lr_schedule {cfg.lr_schedule!r}")


def train_behavior(model, actions, states=None, config=None, schedule=None,
                   out_dir=None, callback=None):
    """Fit ``model`` to the (state, action) pairs with the denoising loss.

    Writes ``loss_curve.csv`` and periodic ``behavior_<step>.npz`` checkpoints
    into ``out_dir`` when given. ``callback(step, model)`` fires at every
    checkpoint interval, which tests use to track convergence.
    Returns the loss curve as a list of ``(step, mean_loss)`` rows.
    """
    cfg = config or BehaviorTrainConfig()
    schedule = schedule or VPSchedule()
    actions = np.asarray(actions, dtype=np.float64)
    if len(actions) == 0:
        raise ValueError("cannot train a behavior model on an empty dataset")
    if states is None:
        states = np.zeros((len(actions), 0))
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.lr, weight_decay=cfg.weight_decay)
    ema = {k: v.copy() for k, v in model.params.items()} if cfg.ema_decay else None
    out_dir = Path(out_dir) if out_dir else None

    curve, acc = [], []
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(actions), size=cfg.batch_size)
        loss, grads = denoising_loss(model, actions[idx], states[idx], rng, schedule,
                                     t_sampling=cfg.t_sampling)
        opt.lr = _lr_at(cfg, step - 1)
        opt.step(model.params, grads)
        if ema is not None:
            for k, v in model.params.items():
                ema[k] += (1.0 - cfg.ema_decay) * (v - ema[k])
        acc.append(loss)
        if step % cfg.log_interval == 0 or step == cfg.steps:
            curve.append((step, float(np.mean(acc))))
            acc = []
        if cfg.ckpt_interval and (step % cfg.ckpt_interval == 0 or step == cfg.steps):
            view = _ema_view(model, ema)
            if out_dir is not None:
                view.save(out_dir / f"behavior_{step:07d}.npz", opt, {"step": step})
            if callback is not None:
                callback(step, view)

    if ema is not None:
        model.params = ema
    if out_dir is not None:
        model.save(out_dir / "behavior.npz", opt, {"step": cfg.steps,
                                                   "train_config": asdict(cfg),
                                                   "schedule": schedule.to_dict()})
        write_curve(out_dir / "loss_curve.csv", curve, ("step", "loss"))
    log.info("behavior training done: final loss %.4f", curve[-1][1])
    return curve


def _ema_view(model, ema):
    if ema is None:
        return model
    view = model.copy()
    view.params = {k: v.copy() for k, v in ema.items()}
    return view


def write_curve(path, rows, header):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _flow(model, x, s, t, schedule):
    """Probability-flow velocity and its divergence at time ``t``."""
    _, sigma = schedule.alpha_sigma(t)
    f, g2 = schedule.drift_diffusion(t)
    eps, div_eps = model.noise_divergence(x, s, t)
    v = f * x + 0.5 * g2 / sigma * eps
    div = x.shape[1] * f + 0.5 * g2 / sigma * div_eps
    return v, div


def log_density(model, a, s=None, t_eval=DENSITY_T0, schedule=None, ode_steps=200):
    """Log-density of the diffused behavior at ``t_eval`` for each row of ``a``.

    Fixed-step RK4 on the probability-flow ODE from ``t_eval`` to 1, with the
    instantaneous change of variables accumulated alongside and an N(0, I)
    terminal density.
    """
    schedule = schedule or VPSchedule()
    if ode_steps < 50:
        raise ValueError("ode_steps must be >= 50")
    x = np.array(_as_batch(a, model.action_dim), dtype=np.float64)
    n, d = x.shape
    s = _as_batch(s if s is not None else np.zeros((n, 0)), model.state_dim, n)
    if t_eval >= 1.0:
        return _std_normal_logpdf(x)
    h = (1.0 - t_eval) / ode_steps
    acc = np.zeros(n)
    t = float(t_eval)
    for _ in range(ode_steps):
        k1, d1 = _flow(model, x, s, t, schedule)
        k2, d2 = _flow(model, x + 0.5 * h * k1, s, t + 0.5 * h, schedule)
        k3, d3 = _flow(model, x + 0.5 * h * k2, s, t + 0.5 * h, schedule)
        k4, d4 = _flow(model, x + h * k3, s, min(t + h, 1.0), schedule)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        acc = acc + h / 6.0 * (d1 + 2 * d2 + 2 * d3 + d4)
        t = min(t + h, 1.0)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(acc))):
            raise NumericError(f"probability-flow state became non-finite at t={t:.4f}")
    return _std_normal_logpdf(x) + acc


def _std_normal_logpdf(x):
    return -0.5 * np.sum(x**2, axis=1) - 0.5 * x.shape[1] * math.log(2 * math.pi)


@dataclass
class DensityGrid:
    """Log-density on the cell midpoints of a 2-D box; ``values[iy, ix]``."""

    bounds: tuple  # (xmin, xmax, ymin, ymax)
    resolution: tuple  # (nx, ny)
    values: np.ndarray
    diffusion_time: float

    def axes(self):
        xmin, xmax, ymin, ymax = self.bounds
        nx, ny = self.resolution
        dx, dy = (xmax - xmin) / nx, (ymax - ymin) / ny
        return xmin + dx * (np.arange(nx) + 0.5), ymin + dy * (np.arange(ny) + 0.5)

    def points(self):
        xs, ys = self.axes()
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    def cell_area(self):
        xmin, xmax, ymin, ymax = self.bounds
        nx, ny = self.resolution
        return (xmax - xmin) / nx * (ymax - ymin) / ny

    def integral(self):
        """Midpoint-rule integral of ``exp(values)`` over the box."""
        return float(np.exp(self.values).sum() * self.cell_area())

    def total_variation(self):
        v = self.values
        return float(np.abs(np.diff(v, axis=0)).sum() + np.abs(np.diff(v, axis=1)).sum())

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        pts = self.points()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["nx", "ny", "xmin", "xmax", "ymin", "ymax", "t"])
            w.writerow([*self.resolution, *self.bounds, self.diffusion_time])
            w.writerow(["x", "y", "log_density"])
            for (x, y), v in zip(pts, self.values.ravel()):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(v))])
        return path

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head = rows[1]
        nx, ny = int(head[0]), int(head[1])
        bounds = tuple(float(v) for v in head[2:6])
        values = np.array([float(r[2]) for r in rows[3:]]).reshape(ny, nx)
        return cls(bounds, (nx, ny), values, float(head[6]))

    def render_png(self, path, scatter=None):
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(4, 4))
        xmin, xmax, ymin, ymax = self.bounds
        ax.imshow(np.exp(self.values), origin="lower", extent=(xmin, xmax, ymin, ymax),
                  cmap="viridis")
        if scatter is not None:
            ax.scatter(scatter[:, 0], scatter[:, 1], s=6, c="r")
        ax.set_title(f"t = {self.diffusion_time:g}")
        fig.savefig(path, dpi=100, bbox_inches="tight")
        plt.close(fig)
        return path


def density_grid(model, bounds=(-4.5, 4.5, -4.5, 4.5), resolution=(60, 60),
                 t_eval=DENSITY_T0, schedule=None, ode_steps=200, chunk=4096):
    """Evaluate ``log_density`` on every cell midpoint of a 2-D box."""
    if model.action_dim != 2:
        raise ValueError("density grids are defined for 2-D actions only")
    grid = DensityGrid(tuple(float(b) for b in bounds), tuple(int(r) for r in resolution),
                       np.empty(0), float(t_eval))
    pts = grid.points()
    vals = np.concatenate([
        log_density(model, pts[i:i + chunk], None, t_eval, schedule, ode_steps)
        for i in range(0, len(pts), chunk)
    ])
    grid.values = vals.reshape(grid.resolution[1], grid.resolution[0])
    return grid
